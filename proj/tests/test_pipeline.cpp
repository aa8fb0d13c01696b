#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "mcnet/pipeline.hpp"
#include "test_util.hpp"

using namespace mcnet;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.keypoints = 2;
    cfg.levels = 2;
    cfg.base_channels = 4;
    cfg.memory_c = 4;
    cfg.memory_h = 4;
    cfg.memory_w = 4;
    cfg.image_size = 16;
    cfg.flow_size = 8;
    cfg.num_kernels = 2;
    cfg.hg_width = 8;
    cfg.hg_depth = 2;
    return cfg;
}

template <class S>
Tensor<S> random_image(Rng& rng, int b, int size) {
    return testutil::rand_uniform<S>(rng, {b, 3, size, size}, 0.05, 0.95);
}

// Absolute gradient mass per top-level parameter group (prefix before the
// first dot-digit boundary, e.g. "kp", "enc0" -> "enc"). Parameters that
// never entered the graph count as zero.
template <class S>
std::map<std::string, double> group_grad_mass(Tape<S>& t, Lifter<S>& L, Model<S>& m) {
    std::map<std::string, double> mass;
    m.visit_params([&](const std::string& name, Tensor<S>& p) {
        std::string group = name.substr(0, name.find_first_of(".0123456789"));
        double s = 0;
        if (Var<S> v = L.var_of(p); v.valid()) {
            const Tensor<S>& g = t.grad(v);
            for (std::int64_t i = 0; i < g.numel(); ++i) s += std::abs(static_cast<double>(g[i]));
        }
        mass[group] += s;
    });
    return mass;
}

}  // namespace

TEST_CASE("encoder follows the halving shape schedule") {
    ModelConfig cfg;
    cfg.keypoints = 5;
    cfg.levels = 3;
    cfg.base_channels = 8;
    cfg.memory_c = 8;
    cfg.memory_h = 4;
    cfg.memory_w = 4;
    cfg.image_size = 64;
    cfg.flow_size = 16;
    cfg.hg_width = 8;
    cfg.hg_depth = 2;
    auto m = make_model<double>(cfg, 1);
    Rng rng(2);
    auto img = random_image<double>(rng, 2, 64);
    Tape<double> t;
    Lifter<double> L(false);
    auto feats = encode(t, L, m, t.constant(img));
    REQUIRE(feats.size() == 3);
    CHECK(t.val(feats[0]).shape() == Shape{2, 8, 64, 64});
    CHECK(t.val(feats[1]).shape() == Shape{2, 16, 32, 32});
    CHECK(t.val(feats[2]).shape() == Shape{2, 32, 16, 16});

    // Same input, same parameters: bit-identical features.
    Tape<double> t2;
    Lifter<double> L2(false);
    auto again = encode(t2, L2, m, t2.constant(img));
    for (std::size_t l = 0; l < feats.size(); ++l)
        for (std::int64_t i = 0; i < t.val(feats[l]).numel(); ++i)
            CHECK(t.val(feats[l])[i] == t2.val(again[l])[i]);
}

TEST_CASE("a single-level model encodes one feature map and still animates") {
    ModelConfig cfg = tiny_config();
    cfg.levels = 1;
    auto m = make_model<double>(cfg, 3);
    Rng rng(4);
    auto src = random_image<double>(rng, 1, cfg.image_size);
    auto drv = random_image<double>(rng, 1, cfg.image_size);
    Tape<double> t;
    Lifter<double> L(false);
    auto feats = encode(t, L, m, t.constant(src));
    CHECK(feats.size() == 1);
    auto out = animate(t, L, m, t.constant(src), t.constant(drv));
    CHECK(t.val(out.img).shape() == Shape{1, 3, 16, 16});
}

TEST_CASE("initialization is a pure function of the seed") {
    ModelConfig cfg = tiny_config();
    auto a = make_model<double>(cfg, 7);
    auto b = make_model<double>(cfg, 7);
    auto c = make_model<double>(cfg, 8);
    CHECK(a.count_parameters() == b.count_parameters());
    CHECK(a.count_parameters() == c.count_parameters());
    CHECK(a.count_parameters() > 0);

    std::vector<Tensor<double>*> pa, pb, pc;
    a.visit_params([&](const std::string&, Tensor<double>& p) { pa.push_back(&p); });
    b.visit_params([&](const std::string&, Tensor<double>& p) { pb.push_back(&p); });
    c.visit_params([&](const std::string&, Tensor<double>& p) { pc.push_back(&p); });
    REQUIRE(pa.size() == pb.size());
    bool all_equal = true, any_differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->numel() == pb[i]->numel());
        for (std::int64_t j = 0; j < pa[i]->numel(); ++j) {
            if ((*pa[i])[j] != (*pb[i])[j]) all_equal = false;
            if ((*pa[i])[j] != (*pc[i])[j]) any_differs = true;
        }
    }
    CHECK(all_equal);
    CHECK(any_differs);
}

TEST_CASE("parameter names are unique and the memory appears exactly once") {
    auto m = make_model<double>(tiny_config(), 5);
    std::map<std::string, int> seen;
    int bank_count = 0;
    m.visit_params([&](const std::string& name, Tensor<double>& p) {
        ++seen[name];
        if (&p == &m.memory.bank) ++bank_count;
    });
    for (const auto& [name, count] : seen) {
        INFO(name);
        CHECK(count == 1);
    }
    CHECK(bank_count == 1);
}

TEST_CASE("animate produces an image in range and is deterministic") {
    auto m = make_model<double>(tiny_config(), 11);
    Rng rng(12);
    auto src = random_image<double>(rng, 2, 16);
    auto drv = random_image<double>(rng, 2, 16);

    Tape<double> t;
    Lifter<double> L(false);
    auto out = animate(t, L, m, t.constant(src), t.constant(drv));
    CHECK(t.val(out.img).shape() == src.shape());
    for (std::int64_t i = 0; i < t.val(out.img).numel(); ++i) {
        CHECK(t.val(out.img)[i] > 0.0);
        CHECK(t.val(out.img)[i] < 1.0);
    }
    CHECK(t.val(out.kp_s).shape() == Shape{2, 2, 2});
    CHECK(t.val(out.flow).shape() == Shape{2, 8, 8, 2});
    REQUIRE(out.fw.size() == 2);
    CHECK(t.val(out.fw[0]).shape() == t.val(out.fe[0]).shape());
    CHECK(t.val(out.fcpt[1]).shape() == t.val(out.fe[1]).shape());
    CHECK(!out.occlusion.valid());

    Tape<double> t2;
    Lifter<double> L2(false);
    auto out2 = animate(t2, L2, m, t2.constant(src), t2.constant(drv));
    for (std::int64_t i = 0; i < t.val(out.img).numel(); ++i)
        CHECK(t.val(out.img)[i] == t2.val(out2.img)[i]);
}

TEST_CASE("animate rejects mismatched and mis-sized inputs") {
    auto m = make_model<double>(tiny_config(), 13);
    Rng rng(14);
    auto src = random_image<double>(rng, 1, 16);
    auto small = random_image<double>(rng, 1, 8);
    Tape<double> t;
    Lifter<double> L(false);
    CHECK_THROWS_AS(animate(t, L, m, t.constant(src), t.constant(small)), DataError);
    CHECK_THROWS_AS(animate(t, L, m, t.constant(small), t.constant(small)), DataError);
}

TEST_CASE("driving the source with itself warps features onto themselves") {
    auto m = make_model<double>(tiny_config(), 15);
    Rng rng(16);
    auto src = random_image<double>(rng, 1, 16);
    Tape<double> t;
    Lifter<double> L(false);
    auto out = animate(t, L, m, t.constant(src), t.constant(src));
    for (std::int64_t i = 0; i < t.val(out.kp_s).numel(); ++i)
        CHECK(t.val(out.kp_s)[i] == t.val(out.kp_d)[i]);
    for (std::size_t l = 0; l < out.fw.size(); ++l) {
        double worst = 0;
        for (std::int64_t i = 0; i < t.val(out.fw[l]).numel(); ++i)
            worst = std::max(worst, std::abs(t.val(out.fw[l])[i] - t.val(out.fe[l])[i]));
        INFO("level " << l << " max deviation " << worst);
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("reconstruction gradient reaches every parameter group") {
    ModelConfig cfg = tiny_config();
    cfg.occlusion = true;  // bring the occlusion head into the graph too
    auto m = make_model<double>(cfg, 17);
    Rng rng(18);
    auto src = random_image<double>(rng, 1, 16);
    auto drv = random_image<double>(rng, 1, 16);
    Tape<double> t;
    Lifter<double> L(true);
    auto out = animate(t, L, m, t.constant(src), t.constant(drv));
    CHECK(t.val(out.occlusion).shape() == Shape{1, 1, 8, 8});
    auto diff = sub(t, out.img, t.constant(drv));
    t.backward(sum(t, mul(t, diff, diff)));
    auto mass = group_grad_mass(t, L, m);
    REQUIRE(mass.size() == 7);
    for (const auto& [group, s] : mass) {
        INFO(group);
        CHECK(s > 0.0);
    }
}

TEST_CASE("the consistency objective alone trains only the memory side") {
    auto m = make_model<double>(tiny_config(), 19);
    Rng rng(20);
    auto src = random_image<double>(rng, 1, 16);
    auto drv = random_image<double>(rng, 1, 16);
    Tape<double> t;
    Lifter<double> L(true);
    auto out = animate(t, L, m, t.constant(src), t.constant(drv));
    Var<double> loss{};
    for (std::size_t l = 0; l < out.fv.size(); ++l) {
        const Tensor<double>& pv = t.val(out.fproj[l]);
        auto resized = bilinear_resize(t, out.fv[l], pv.dim(2), pv.dim(3));
        auto term = l1(t, resized, detach(t, out.fproj[l]));
        loss = loss.valid() ? add(t, loss, term) : term;
    }
    t.backward(loss);
    auto mass = group_grad_mass(t, L, m);
    CHECK(mass["kp"] == 0.0);
    CHECK(mass["motion"] == 0.0);
    CHECK(mass["enc"] == 0.0);
    CHECK(mass["dec"] == 0.0);
    CHECK(mass["out"] == 0.0);
    CHECK(mass["memory"] > 0.0);
    CHECK(mass["comp"] > 0.0);
}

TEST_CASE("reconstruction alone still feeds the memory bank") {
    auto m = make_model<double>(tiny_config(), 21);
    Rng rng(22);
    auto src = random_image<double>(rng, 1, 16);
    auto drv = random_image<double>(rng, 1, 16);
    Tape<double> t;
    Lifter<double> L(true);
    auto out = animate(t, L, m, t.constant(src), t.constant(drv));
    t.backward(l1(t, out.img, t.constant(drv)));
    Var<double> bank = L.var_of(m.memory.bank);
    REQUIRE(bank.valid());
    double s = 0;
    for (std::int64_t i = 0; i < t.grad(bank).numel(); ++i) s += std::abs(t.grad(bank)[i]);
    CHECK(s > 0.0);
}

TEST_CASE("updating the shared bank shifts the conditioned memory at every level") {
    auto m = make_model<double>(tiny_config(), 23);
    Rng rng(24);
    auto src = random_image<double>(rng, 1, 16);
    auto drv = random_image<double>(rng, 1, 16);

    Tape<double> t;
    Lifter<double> L(false);
    auto before = animate(t, L, m, t.constant(src), t.constant(drv));
    std::vector<Tensor<double>> ms_before;
    for (auto v : before.ms) ms_before.push_back(t.val(v));

    for (std::int64_t i = 0; i < m.memory.bank.numel(); ++i) m.memory.bank[i] += 0.01;

    Tape<double> t2;
    Lifter<double> L2(false);
    auto after = animate(t2, L2, m, t2.constant(src), t2.constant(drv));
    REQUIRE(after.ms.size() == ms_before.size());
    for (std::size_t l = 0; l < after.ms.size(); ++l) {
        double diff = 0;
        for (std::int64_t i = 0; i < ms_before[l].numel(); ++i)
            diff += std::abs(t2.val(after.ms[l])[i] - ms_before[l][i]);
        INFO("level " << l);
        CHECK(diff > 1e-6);
    }
}

TEST_CASE("tape gradients match finite differences through the whole model") {
    // Probes cover the memory-conditioning and decoding half, where every
    // path from parameter to loss stays clear of detach boundaries, so the
    // finite difference of the full forward equals the tape gradient.
    auto m = make_model<double>(tiny_config(), 25);
    Rng rng(26);
    auto src = random_image<double>(rng, 1, 16);
    auto drv = random_image<double>(rng, 1, 16);

    auto loss_value = [&]() {
        Tape<double> t;
        Lifter<double> L(false);
        auto out = animate(t, L, m, t.constant(src), t.constant(drv));
        auto diff = sub(t, out.img, t.constant(drv));
        return t.val(sum(t, mul(t, diff, diff)))[0];
    };

    Tape<double> t;
    Lifter<double> L(true);
    auto out = animate(t, L, m, t.constant(src), t.constant(drv));
    auto diff = sub(t, out.img, t.constant(drv));
    t.backward(sum(t, mul(t, diff, diff)));

    std::vector<std::pair<Tensor<double>*, std::int64_t>> probes = {
        {&m.memory.bank, 0},
        {&m.comp[0].cond.mem_w, 1},
        {&m.comp[0].cond.id_mlp.layers[0].w, 2},
        {&m.comp[1].readout.value.bank, 3},
        {&m.comp[1].readout.query.w, 0},
        {&m.dec[0].w, 4},
        {&m.out_conv.w, 5},
        {&m.out_conv.b, 0},
    };
    const double h = 1e-5;
    for (auto [param, idx] : probes) {
        Var<double> v = L.var_of(*param);
        REQUIRE(v.valid());
        const double analytic = t.grad(v)[idx];
        const double saved = (*param)[idx];
        (*param)[idx] = saved + h;
        const double up = loss_value();
        (*param)[idx] = saved - h;
        const double down = loss_value();
        (*param)[idx] = saved;
        const double numeric = (up - down) / (2 * h);
        const double err =
            std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
        INFO("probe idx " << idx << " analytic " << analytic << " numeric " << numeric);
        CHECK(err < 1e-4);
    }
}
