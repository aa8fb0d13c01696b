#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "gradcheck_ops.hpp"
#include "mcnet/image_io.hpp"
#include "mcnet/trainer.hpp"

// Command line front end. Exit codes: 0 success, 1 bad usage, 2 bad data,
// 3 numeric failure.

namespace fs = std::filesystem;
using namespace mcnet;

namespace {

template <class S>
Tensor<S> to_batch(const Tensor<S>& img) {
    Tensor<S> batch{{1, img.dim(0), img.dim(1), img.dim(2)}};
    std::copy(img.data(), img.data() + img.numel(), batch.data());
    return batch;
}

std::string frame_name(const char* stem, int idx) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%04d.ppm", stem, idx);
    return buf;
}

// Each channel scaled to its own [0,1] range; a constant channel renders as
// mid gray.
template <class S>
Tensor<double> normalize_channel(const Tensor<S>& t, std::int64_t offset, int h, int w) {
    const std::int64_t n = static_cast<std::int64_t>(h) * w;
    double lo = t[offset], hi = t[offset];
    for (std::int64_t i = 1; i < n; ++i) {
        lo = std::min(lo, static_cast<double>(t[offset + i]));
        hi = std::max(hi, static_cast<double>(t[offset + i]));
    }
    Tensor<double> out{{h, w}};
    if (hi - lo < 1e-12) {
        out.fill(0.5);
    } else {
        for (std::int64_t i = 0; i < n; ++i) out[i] = (t[offset + i] - lo) / (hi - lo);
    }
    return out;
}

void run_synth(const std::string& out, int sequences, int frames, int size,
               std::uint64_t seed) {
    const std::string manifest = synthesize_dataset(out, sequences, frames, size, seed);
    std::cout << "wrote " << sequences << " sequences x " << frames << " frames ("
              << size << "x" << size << ") under " << out << "\n"
              << "manifest: " << manifest << "\n";
}

template <class S>
void run_train(const RunConfig& cfg) {
    const TrainResult r = train_run<S>(cfg);
    if (r.final_step == r.start_step) {
        std::cout << "wrote initial checkpoint " << r.ckpt_path << " (step " << r.final_step
                  << ")\n";
        return;
    }
    std::cout << "trained steps " << (r.start_step + 1) << ".." << r.final_step
              << "  loss " << r.first_loss << " -> " << r.final_loss << "\n"
              << "checkpoint: " << r.ckpt_path << "\n"
              << "log: " << r.csv_path << "\n";
}

template <class S>
void run_animate(const Checkpoint& ckpt, const std::string& source_path,
                 const std::string& manifest_path, const std::string& out_dir) {
    Model<S> model = model_from_checkpoint<S>(ckpt);
    const Tensor<S> source = read_ppm<S>(source_path);
    if (source.dim(1) != model.cfg.image_size || source.dim(2) != model.cfg.image_size)
        throw DataError("source image is " + std::to_string(source.dim(2)) + "x" +
                        std::to_string(source.dim(1)) + ", the model expects " +
                        std::to_string(model.cfg.image_size) + "x" +
                        std::to_string(model.cfg.image_size));
    const Manifest man = read_manifest(manifest_path);
    fs::create_directories(out_dir);

    const Tensor<S> src_batch = to_batch(source);
    int idx = 0;
    for (const auto& seq : man.sequences)
        for (const std::string& frame : seq) {
            Tape<S> tape;
            Lifter<S> lift(false);
            const Var<S> src = tape.constant(src_batch);
            const Var<S> drv =
                tape.constant(stack_frames<S>({frame}, model.cfg.image_size));
            const Tensor<S>& img = tape.val(animate(tape, lift, model, src, drv).img);
            Tensor<S> plane{{3, img.dim(2), img.dim(3)}};
            std::copy(img.data(), img.data() + plane.numel(), plane.data());
            write_ppm((fs::path(out_dir) / frame_name("frame", idx++)).string(), plane);
        }
    std::cout << "wrote " << idx << " frames to " << out_dir << "\n";
}

template <class S>
void run_inspect(const Checkpoint& ckpt, const std::string& out_dir,
                 const std::string& source_path) {
    Model<S> model = model_from_checkpoint<S>(ckpt);
    fs::create_directories(out_dir);
    const int hm = model.memory.bank.dim(1), wm = model.memory.bank.dim(2);

    char buf[64];
    int written = 0;
    for (int c = 0; c < model.memory.bank.dim(0); ++c) {
        std::snprintf(buf, sizeof(buf), "memory_c%03d.pgm", c);
        write_pgm((fs::path(out_dir) / buf).string(),
                  normalize_channel(model.memory.bank, static_cast<std::int64_t>(c) * hm * wm,
                                    hm, wm));
        ++written;
    }

    if (!source_path.empty()) {
        const Tensor<S> source = read_ppm<S>(source_path);
        if (source.dim(1) != model.cfg.image_size || source.dim(2) != model.cfg.image_size)
            throw DataError("source image does not match the model's input size");
        Tape<S> tape;
        Lifter<S> lift(false);
        const Var<S> src = tape.constant(to_batch(source));
        // self-driving pass: the conditioned memory depends on the source only
        AnimateOut<S> out = animate(tape, lift, model, src, src);
        for (std::size_t l = 0; l < out.ms.size(); ++l) {
            const Tensor<S>& ms = tape.val(out.ms[l]);
            for (int c = 0; c < ms.dim(1); ++c) {
                std::snprintf(buf, sizeof(buf), "level%zu_c%03d.pgm", l, c);
                write_pgm((fs::path(out_dir) / buf).string(),
                          normalize_channel(ms, static_cast<std::int64_t>(c) * ms.dim(2) *
                                                    ms.dim(3),
                                            ms.dim(2), ms.dim(3)));
                ++written;
            }
        }
    }
    std::cout << "wrote " << written << " channel images to " << out_dir << "\n";
}

template <class S>
void run_eval(const Checkpoint& ckpt, const std::string& manifest_path, PairMode mode,
              const std::string& out_dir, int driving_start, bool ablate) {
    Model<S> model = model_from_checkpoint<S>(ckpt);
    model.cfg.ablate_compensation = ablate;
    const Manifest man = read_manifest(manifest_path);
    fs::create_directories(out_dir);
    const std::string csv =
        (fs::path(out_dir) / (mode == PairMode::same ? "eval_same.csv" : "eval_cross.csv"))
            .string();
    const EvalResult r = eval_run(model, man, mode, csv, driving_start);
    if (mode == PairMode::same) {
        std::printf("pairs=%d mean_l1=%.6f mean_psnr=%.3f mean_ssim=%.4f\n", r.pairs, r.mean.l1,
                    r.mean.psnr, r.mean.ssim);
    } else {
        std::printf("pairs=%d (no ground truth; per-frame statistics in the log)\n", r.pairs);
    }
    std::cout << "log: " << csv << "\n";
}

int run_gradcheck(const std::string& only) {
    std::vector<tools::OpCheck> ops = tools::gradcheck_registry();
    if (!only.empty()) {
        std::vector<tools::OpCheck> picked;
        for (auto& op : ops)
            if (op.name == only) picked.push_back(op);
        if (picked.empty()) {
            std::string names;
            for (const auto& op : ops) names += (names.empty() ? "" : ", ") + op.name;
            throw UsageError("unknown op '" + only + "'; available: " + names);
        }
        ops = std::move(picked);
    } else {
        // the deliberately broken adjoint only runs when asked for by name
        std::erase_if(ops, [](const tools::OpCheck& op) { return op.name == "negative-control"; });
    }

    std::vector<std::string> failed;
    for (const auto& op : ops) {
        const GradCheckReport rep = op.run();
        if (rep.ok) {
            std::printf("op %-22s PASS  max rel err %.3g\n", op.name.c_str(), rep.max_rel_err);
        } else {
            std::printf("op %-22s FAIL  max rel err %.3g (%s)\n", op.name.c_str(),
                        rep.max_rel_err, rep.worst.c_str());
            failed.push_back(op.name);
        }
    }
    if (!failed.empty()) {
        std::string names;
        for (const auto& n : failed) names += (names.empty() ? "" : ", ") + n;
        throw NumericError("gradient check failed for: " + names);
    }
    std::cout << "all " << ops.size() << " ops within tolerance\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"keypoint-driven face animation with a memory compensation network"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "render a procedural face corpus");
    std::string synth_out = "corpus";
    int synth_sequences = 20, synth_frames = 30, synth_size = 64;
    std::uint64_t synth_seed = 1;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--sequences", synth_sequences, "number of sequences");
    synth->add_option("--frames", synth_frames, "frames per sequence");
    synth->add_option("--size", synth_size, "square frame edge in pixels");
    synth->add_option("--seed", synth_seed, "corpus seed");

    // train
    auto* train = app.add_subcommand("train", "optimize a model on a frame corpus");
    std::vector<std::string> train_configs, train_sets;
    std::string train_resume;
    train->add_option("--config", train_configs, "config file with key=value lines");
    train->add_option("--set", train_sets, "override, e.g. --set train.steps=1000");
    train->add_option("--resume", train_resume, "checkpoint to continue from");

    // animate
    auto* anim = app.add_subcommand("animate", "drive a source image with a frame sequence");
    std::string anim_ckpt, anim_source, anim_manifest, anim_out = "animated";
    anim->add_option("--ckpt", anim_ckpt, "model checkpoint")->required();
    anim->add_option("--source", anim_source, "source image (ppm)")->required();
    anim->add_option("--driving-manifest", anim_manifest, "manifest of driving frames")
        ->required();
    anim->add_option("--out", anim_out, "output directory");

    // inspect-memory
    auto* inspect = app.add_subcommand("inspect-memory", "dump memory channels as images");
    std::string ins_ckpt, ins_out = "memory", ins_source;
    inspect->add_option("--ckpt", ins_ckpt, "model checkpoint")->required();
    inspect->add_option("--out", ins_out, "output directory");
    inspect->add_option("--source", ins_source,
                        "also dump the memory conditioned on this image, per level");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over a manifest");
    std::string eval_ckpt, eval_manifest, eval_mode = "same", eval_out = "eval";
    int eval_start = 1;
    bool eval_ablate = false;
    eval->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
    eval->add_option("--manifest", eval_manifest, "frame manifest")->required();
    eval->add_option("--mode", eval_mode, "same (reconstruction) or cross (transfer)");
    eval->add_option("--out", eval_out, "output directory");
    eval->add_option("--driving-start", eval_start,
                     "first driving frame index in same mode (frame 0 is the source)");
    eval->add_flag("--ablate-compensation", eval_ablate,
                   "zero the retrieved compensation before decoding");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op");
    std::string gc_op;
    gc->add_option("--op", gc_op,
                   "check one op by name (negative-control is a deliberately broken adjoint "
                   "that must fail)");

    try {
        app.parse(argc, argv);

        if (*synth) {
            run_synth(synth_out, synth_sequences, synth_frames, synth_size, synth_seed);
        } else if (*train) {
            RunConfig cfg;
            for (const std::string& f : train_configs) load_config_file(cfg, f);
            apply_overrides(cfg, train_sets);
            if (!train_resume.empty()) cfg.train.resume = train_resume;
            int precision = cfg.train.precision == "f64" ? 1 : 0;
            if (!cfg.train.resume.empty())
                precision = checkpoint_precision(load_checkpoint(cfg.train.resume));
            if (precision == 1)
                run_train<double>(cfg);
            else
                run_train<float>(cfg);
        } else if (*anim) {
            const Checkpoint ckpt = load_checkpoint(anim_ckpt);
            if (checkpoint_precision(ckpt) == 1)
                run_animate<double>(ckpt, anim_source, anim_manifest, anim_out);
            else
                run_animate<float>(ckpt, anim_source, anim_manifest, anim_out);
        } else if (*inspect) {
            const Checkpoint ckpt = load_checkpoint(ins_ckpt);
            if (checkpoint_precision(ckpt) == 1)
                run_inspect<double>(ckpt, ins_out, ins_source);
            else
                run_inspect<float>(ckpt, ins_out, ins_source);
        } else if (*eval) {
            const Checkpoint ckpt = load_checkpoint(eval_ckpt);
            const PairMode mode = parse_pair_mode(eval_mode);
            if (checkpoint_precision(ckpt) == 1)
                run_eval<double>(ckpt, eval_manifest, mode, eval_out, eval_start, eval_ablate);
            else
                run_eval<float>(ckpt, eval_manifest, mode, eval_out, eval_start, eval_ablate);
        } else if (*gc) {
            return run_gradcheck(gc_op);
        }
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
