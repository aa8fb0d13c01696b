#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "mcnet/trainer.hpp"
#include "test_util.hpp"

using namespace mcnet;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mcnet_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.keypoints = 2;
    cfg.levels = 2;
    cfg.base_channels = 4;
    cfg.memory_c = 4;
    cfg.memory_h = 4;
    cfg.memory_w = 4;
    cfg.image_size = 32;
    cfg.flow_size = 8;
    cfg.num_kernels = 2;
    cfg.hg_width = 8;
    cfg.hg_depth = 2;
    return cfg;
}

RunConfig micro_run(const fs::path& corpus, const fs::path& out) {
    RunConfig cfg;
    cfg.model = tiny_config();
    cfg.train.steps = 3;
    cfg.train.batch = 2;
    cfg.train.lr = 1e-3;
    cfg.train.seed = 5;
    cfg.train.ckpt_every = 100;
    cfg.train.log_every = 1;
    cfg.data.manifest = (corpus / "manifest.txt").string();
    cfg.data.out_dir = out.string();
    return cfg;
}

int count_lines(const std::string& text) {
    int n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

}  // namespace

TEST_CASE("model checkpoint round trip preserves the forward pass") {
    const fs::path dir = tmp_dir("model_ckpt");
    Model<float> m = make_model<float>(tiny_config(), 7);

    Rng rng(3);
    Tensor<float> src{{1, 3, 32, 32}}, drv{{1, 3, 32, 32}};
    for (std::int64_t i = 0; i < src.numel(); ++i) src[i] = static_cast<float>(rng.uniform());
    for (std::int64_t i = 0; i < drv.numel(); ++i) drv[i] = static_cast<float>(rng.uniform());

    auto forward = [&](Model<float>& model) {
        Tape<float> t;
        Lifter<float> L(false);
        return t.val(animate(t, L, model, t.constant(src), t.constant(drv)).img);
    };
    const Tensor<float> before = forward(m);

    const std::string path = (dir / "m.mcnc").string();
    save_checkpoint(path, model_checkpoint(m, 17));
    const Checkpoint ckpt = load_checkpoint(path);
    CHECK(checkpoint_step(ckpt) == 17);
    CHECK(checkpoint_precision(ckpt) == 0);
    const ModelConfig back_cfg = checkpoint_config(ckpt);
    CHECK(back_cfg.levels == 2);
    CHECK(back_cfg.base_channels == 4);
    CHECK(back_cfg.image_size == 32);

    Model<float> back = model_from_checkpoint<float>(ckpt);
    const Tensor<float> after = forward(back);
    REQUIRE(after.same_shape(before));
    for (std::int64_t i = 0; i < before.numel(); ++i) REQUIRE(after[i] == before[i]);
}

TEST_CASE("loading into a mismatched model names the offending tensor") {
    const fs::path dir = tmp_dir("model_mismatch");
    Model<float> m = make_model<float>(tiny_config(), 7);
    const std::string path = (dir / "m.mcnc").string();
    save_checkpoint(path, model_checkpoint(m, 0));

    ModelConfig wide = tiny_config();
    wide.base_channels = 8;
    Model<float> other = make_model<float>(wide, 7);
    const Checkpoint ckpt = load_checkpoint(path);
    CHECK_THROWS_WITH_AS(load_model_params(ckpt, other), doctest::Contains("enc0.w"), DataError);

    Model<double> wrong_dtype = make_model<double>(tiny_config(), 7);
    CHECK_THROWS_WITH_AS(load_model_params(ckpt, wrong_dtype), doctest::Contains("f32"),
                         DataError);
}

TEST_CASE("a micro training run writes logs and checkpoints") {
    const fs::path corpus = tmp_dir("train_corpus");
    const fs::path out = tmp_dir("train_out");
    synthesize_dataset(corpus.string(), 2, 4, 32, 11);
    const RunConfig cfg = micro_run(corpus, out);

    const TrainResult r = train_run<float>(cfg);
    CHECK(r.final_step == 3);
    CHECK(std::isfinite(r.first_loss));
    CHECK(std::isfinite(r.final_loss));
    CHECK(r.first_loss > 0);

    const std::string csv = slurp(r.csv_path);
    CHECK(csv.rfind(kTrainCsvHeader, 0) == 0);
    CHECK(count_lines(csv) == 4);  // header + 3 steps
    CHECK(fs::exists(r.ckpt_path));
    CHECK(fs::exists(out / "ckpt_000003.mcnc"));
    CHECK(checkpoint_step(load_checkpoint(r.ckpt_path)) == 3);
}

TEST_CASE("identical seeds produce identical training logs") {
    const fs::path corpus = tmp_dir("det_corpus");
    synthesize_dataset(corpus.string(), 2, 4, 32, 11);
    const fs::path out1 = tmp_dir("det_out1");
    const fs::path out2 = tmp_dir("det_out2");

    const TrainResult a = train_run<float>(micro_run(corpus, out1));
    const TrainResult b = train_run<float>(micro_run(corpus, out2));
    CHECK(slurp(a.csv_path) == slurp(b.csv_path));
    CHECK(slurp(a.ckpt_path) == slurp(b.ckpt_path));
}

TEST_CASE("a resumed run continues the step numbering") {
    const fs::path corpus = tmp_dir("resume_corpus");
    synthesize_dataset(corpus.string(), 2, 4, 32, 11);
    const fs::path out1 = tmp_dir("resume_out1");
    const TrainResult first = train_run<float>(micro_run(corpus, out1));

    const fs::path out2 = tmp_dir("resume_out2");
    RunConfig cfg = micro_run(corpus, out2);
    cfg.train.resume = first.ckpt_path;
    cfg.train.steps = 2;
    const TrainResult second = train_run<float>(cfg);
    CHECK(second.start_step == 3);
    CHECK(second.final_step == 5);

    const std::string csv = slurp(second.csv_path);
    CHECK(csv.find("\n4,") != std::string::npos);
    CHECK(csv.find("\n5,") != std::string::npos);
    CHECK(csv.find("\n1,") == std::string::npos);
    CHECK(checkpoint_step(load_checkpoint(second.ckpt_path)) == 5);
}

TEST_CASE("steps=0 writes the initial checkpoint and nothing else") {
    const fs::path corpus = tmp_dir("zero_corpus");
    synthesize_dataset(corpus.string(), 2, 4, 32, 11);
    const fs::path out = tmp_dir("zero_out");
    RunConfig cfg = micro_run(corpus, out);
    cfg.train.steps = 0;

    const TrainResult r = train_run<float>(cfg);
    CHECK(r.final_step == 0);
    CHECK(fs::exists(r.ckpt_path));
    CHECK(checkpoint_step(load_checkpoint(r.ckpt_path)) == 0);
    CHECK(count_lines(slurp(r.csv_path)) == 1);  // header only
}

TEST_CASE("optimizer leaves zero-gradient parameters untouched") {
    const fs::path corpus = tmp_dir("adam_corpus");
    synthesize_dataset(corpus.string(), 2, 3, 32, 11);
    const Manifest man = read_manifest((corpus / "manifest.txt").string());

    Model<float> m = make_model<float>(tiny_config(), 7);
    const Tensor<float> enc_before = m.enc[0].w;
    const Tensor<float> bank_before = m.memory.bank;

    Tape<float> t;
    Lifter<float> L(true);
    const Var<float> src = t.constant(stack_frames<float>({man.sequences[0][0]}, 32));
    const Var<float> drv = t.constant(stack_frames<float>({man.sequences[0][1]}, 32));
    AnimateOut<float> out = animate(t, L, m, src, drv);
    // consistency only: everything upstream of the memory path is detached
    const Var<float> loss = consistency_loss(t, out.fv, out.fproj, -1);
    t.backward(loss);
    Adam<float> adam(1e-2);
    adam.step(m, t, L);
    CHECK(adam.steps_taken() == 1);

    for (std::int64_t i = 0; i < enc_before.numel(); ++i) REQUIRE(m.enc[0].w[i] == enc_before[i]);
    double moved = 0;
    for (std::int64_t i = 0; i < bank_before.numel(); ++i)
        moved += std::abs(static_cast<double>(m.memory.bank[i] - bank_before[i]));
    CHECK(moved > 0);
}

TEST_CASE("optimizer state survives a checkpoint round trip") {
    const fs::path dir = tmp_dir("adam_state");
    Model<float> m = make_model<float>(tiny_config(), 7);

    Rng rng(3);
    Tensor<float> src{{1, 3, 32, 32}}, drv{{1, 3, 32, 32}};
    for (std::int64_t i = 0; i < src.numel(); ++i) src[i] = static_cast<float>(rng.uniform());
    for (std::int64_t i = 0; i < drv.numel(); ++i) drv[i] = static_cast<float>(rng.uniform());

    Adam<float> adam(1e-3);
    {
        Tape<float> t;
        Lifter<float> L(true);
        AnimateOut<float> out = animate(t, L, m, t.constant(src), t.constant(drv));
        t.backward(l1(t, out.img, t.constant(drv)));
        adam.step(m, t, L);
    }
    Checkpoint ckpt = model_checkpoint(m, 1);
    adam.save_state(ckpt, m);
    save_checkpoint((dir / "s.mcnc").string(), ckpt);

    const Checkpoint loaded = load_checkpoint((dir / "s.mcnc").string());
    Model<float> m2 = model_from_checkpoint<float>(loaded);
    Adam<float> adam2(1e-3);
    adam2.load_state(loaded, m2);
    CHECK(adam2.steps_taken() == 1);

    // one more identical step from both copies lands on identical parameters
    auto one_step = [&](Model<float>& model, Adam<float>& opt) {
        Tape<float> t;
        Lifter<float> L(true);
        AnimateOut<float> out = animate(t, L, model, t.constant(src), t.constant(drv));
        t.backward(l1(t, out.img, t.constant(drv)));
        opt.step(model, t, L);
    };
    one_step(m, adam);
    one_step(m2, adam2);
    bool same = true;
    m.visit_params([&](const std::string& name, Tensor<float>& p) {
        Tensor<float>* q = nullptr;
        m2.visit_params([&](const std::string& n2, Tensor<float>& p2) {
            if (n2 == name) q = &p2;
        });
        REQUIRE(q != nullptr);
        for (std::int64_t i = 0; i < p.numel(); ++i) same = same && p[i] == (*q)[i];
    });
    CHECK(same);
}

TEST_CASE("a diverging run aborts naming the bad step") {
    const fs::path corpus = tmp_dir("nan_corpus");
    synthesize_dataset(corpus.string(), 2, 4, 32, 11);
    const fs::path out = tmp_dir("nan_out");
    RunConfig cfg = micro_run(corpus, out);
    cfg.train.lr = 1e9;
    cfg.train.steps = 10;
    CHECK_THROWS_WITH_AS(train_run<float>(cfg), doctest::Contains("step"), NumericError);
}

TEST_CASE("same-sequence evaluation reports reconstruction metrics") {
    const fs::path corpus = tmp_dir("eval_corpus");
    synthesize_dataset(corpus.string(), 2, 4, 32, 11);
    const Manifest man = read_manifest((corpus / "manifest.txt").string());
    const fs::path out = tmp_dir("eval_out");

    Model<float> m = make_model<float>(tiny_config(), 7);
    const EvalResult r = eval_run(m, man, PairMode::same, (out / "same.csv").string());
    CHECK(r.pairs == 6);  // 2 sequences x frames 1..3
    CHECK(std::isfinite(r.mean.psnr));
    CHECK(r.mean.l1 >= 0);
    const std::string csv = slurp(out / "same.csv");
    CHECK(csv.rfind("seq,frame,l1,psnr,ssim", 0) == 0);
    CHECK(count_lines(csv) == 7);

    // holding out later frames only
    const EvalResult held = eval_run(m, man, PairMode::same, (out / "held.csv").string(), 3);
    CHECK(held.pairs == 2);
}

TEST_CASE("cross-sequence evaluation logs generation statistics only") {
    const fs::path corpus = tmp_dir("cross_corpus");
    synthesize_dataset(corpus.string(), 2, 3, 32, 11);
    const Manifest man = read_manifest((corpus / "manifest.txt").string());
    const fs::path out = tmp_dir("cross_out");

    Model<float> m = make_model<float>(tiny_config(), 7);
    const EvalResult r = eval_run(m, man, PairMode::cross, (out / "cross.csv").string());
    CHECK(r.pairs == 6);
    const std::string csv = slurp(out / "cross.csv");
    CHECK(csv.rfind("source_seq,driving_seq,frame,gen_mean,gen_std", 0) == 0);
    CHECK(csv.find("psnr") == std::string::npos);
    CHECK(csv.find("ssim") == std::string::npos);

    Manifest single;
    single.sequences = {man.sequences[0]};
    CHECK_THROWS_WITH_AS(eval_run(m, single, PairMode::cross, (out / "x.csv").string()),
                         doctest::Contains("at least 2 sequences"), DataError);
}
