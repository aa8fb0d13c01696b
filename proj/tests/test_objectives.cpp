#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mcnet/gradcheck.hpp"
#include "mcnet/objectives.hpp"
#include "oracles.hpp"
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

}  // namespace

TEST_CASE("perceptual loss vanishes on identical images and is symmetric") {
    Rng rng(30);
    auto a = testutil::rand_uniform<double>(rng, {1, 3, 16, 16}, 0.0, 1.0);
    auto b = testutil::rand_uniform<double>(rng, {1, 3, 16, 16}, 0.0, 1.0);
    auto ext = PerceptualExtractor<double>::make_default();
    Tape<double> t;
    CHECK(t.val(perceptual_loss(t, ext, t.constant(a), t.constant(a)))[0] == 0.0);
    const double ab = t.val(perceptual_loss(t, ext, t.constant(a), t.constant(b)))[0];
    const double ba = t.val(perceptual_loss(t, ext, t.constant(b), t.constant(a)))[0];
    CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    CHECK(ab > 0.0);
}

TEST_CASE("identity extractor reduces to the pixel pyramid") {
    Rng rng(31);
    auto a = testutil::rand_uniform<double>(rng, {2, 3, 16, 16}, 0.0, 1.0);
    auto b = testutil::rand_uniform<double>(rng, {2, 3, 16, 16}, 0.0, 1.0);
    auto ext = PerceptualExtractor<double>::identity();
    Tape<double> t;
    const double got = t.val(perceptual_loss(t, ext, t.constant(a), t.constant(b)))[0];
    const double want = oracle::pyramid_l1(a, b, 4);
    CHECK(got == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("perceptual loss rejects images that cannot form the pyramid") {
    Rng rng(32);
    auto ext = PerceptualExtractor<double>::identity();
    auto small = testutil::rand_uniform<double>(rng, {1, 3, 12, 12}, 0.0, 1.0);
    Tape<double> t;
    CHECK_THROWS_AS(perceptual_loss(t, ext, t.constant(small), t.constant(small)), DataError);
}

TEST_CASE("perceptual loss gradient") {
    Rng rng(33);
    auto target = testutil::rand_uniform<double>(rng, {1, 3, 8, 8}, 0.0, 1.0);
    auto rep = grad_check(
        [&](Tape<double>& t, const std::vector<Var<double>>& v) {
            auto ext = PerceptualExtractor<double>::make_default(99, 4, 1);
            return perceptual_loss(t, ext, v[0], t.constant(target));
        },
        {testutil::rand_uniform<double>(rng, {1, 3, 8, 8}, 0.0, 1.0)}, 1e-6, 1e-5, 7);
    INFO(rep.worst);
    CHECK(rep.ok);
}

TEST_CASE("an identity transform gives exactly zero equivariance loss") {
    auto m = make_model<double>(tiny_config(), 40);
    Rng rng(41);
    auto img = testutil::rand_uniform<double>(rng, {1, 3, 16, 16}, 0.05, 0.95);
    Tape<double> t;
    Lifter<double> L(false);
    CHECK(t.val(equivariance_loss(t, L, m, t.constant(img), Affine::identity()))[0] == 0.0);
}

TEST_CASE("equivariance loss is non-negative and trains only the detector") {
    auto m = make_model<double>(tiny_config(), 42);
    Rng rng(43);
    auto img = testutil::rand_uniform<double>(rng, {1, 3, 16, 16}, 0.05, 0.95);
    Tape<double> t;
    Lifter<double> L(true);
    auto loss = equivariance_loss(t, L, m, t.constant(img), Affine::random(rng));
    CHECK(t.val(loss)[0] >= 0.0);
    t.backward(loss);
    CHECK(!L.var_of(m.enc[0].w).valid());
    CHECK(!L.var_of(m.memory.bank).valid());
    double kp_mass = 0;
    m.kp.visit("kp", [&](const std::string&, Tensor<double>& p) {
        if (Var<double> v = L.var_of(p); v.valid())
            for (std::int64_t i = 0; i < t.grad(v).numel(); ++i)
                kp_mass += std::abs(t.grad(v)[i]);
    });
    CHECK(kp_mass > 0.0);
}

TEST_CASE("affine inverse composes to the identity") {
    Rng rng(44);
    auto T = Affine::random(rng);
    auto inv = T.inverse();
    // Apply T then its inverse to a probe point.
    const double x = 0.3, y = -0.6;
    const double tx = T.a[0] * x + T.a[1] * y + T.a[2];
    const double ty = T.a[3] * x + T.a[4] * y + T.a[5];
    CHECK(inv.a[0] * tx + inv.a[1] * ty + inv.a[2] == doctest::Approx(x).epsilon(1e-12));
    CHECK(inv.a[3] * tx + inv.a[4] * ty + inv.a[5] == doctest::Approx(y).epsilon(1e-12));
}

TEST_CASE("a hard-argmax detector is equivariant under whole-pixel translation") {
    // One bright dot; translate by exactly two pixels in each direction. The
    // warped image's argmax must land where the transformed keypoint says.
    const int hw = 17;
    Tensor<double> img{{1, 3, hw, hw}};
    const int py = 6, px = 9;
    for (int c = 0; c < 3; ++c) img.at({0, c, py, px}) = 1.0;

    const double step = 2.0 / (hw - 1);  // one pixel in normalized units
    Affine T;
    T.a = {1, 0, 2 * step, 0, 1, -2 * step};

    Tape<double> t;
    auto warped = warp_image_affine(t, t.constant(img), T);
    const Tensor<double>& wv = t.val(warped);
    int best = 0;
    for (std::int64_t i = 0; i < hw * hw; ++i)
        if (wv[i] > wv[best]) best = static_cast<int>(i);
    const int by = best / hw, bx = best % hw;

    const double kx = 2.0 * px / (hw - 1) - 1.0, ky = 2.0 * py / (hw - 1) - 1.0;
    const double wx = T.a[0] * kx + T.a[1] * ky + T.a[2];
    const double wy = T.a[3] * kx + T.a[4] * ky + T.a[5];
    CHECK(2.0 * bx / (hw - 1) - 1.0 == doctest::Approx(wx).epsilon(1e-9));
    CHECK(2.0 * by / (hw - 1) - 1.0 == doctest::Approx(wy).epsilon(1e-9));
}

TEST_CASE("exact keypoint distance matches the documented pair cases") {
    auto far = Tensor<double>::from({1, 2, 2}, {0.0, 0.0, 0.25, 0.25});   // L1 gap 0.5
    auto near = Tensor<double>::from({1, 2, 2}, {0.0, 0.0, 0.05, 0.05});  // L1 gap 0.1
    auto edge = Tensor<double>::from({1, 2, 2}, {0.0, 0.0, 0.2, 0.0});    // L1 gap exactly 0.2
    CHECK(keypoint_distance_exact(far, 0.2) == 0.0);
    CHECK(keypoint_distance_exact(near, 0.2) == 4.0);
    CHECK(keypoint_distance_exact(edge, 0.2) == 2.0);
}

TEST_CASE("hinge surrogate shares the exact loss's zero set") {
    Rng rng(45);
    for (int trial = 0; trial < 20; ++trial) {
        auto kp = testutil::rand_uniform<double>(rng, {1, 3, 2}, -0.5, 0.5);
        Tape<double> t;
        const double hinge = t.val(keypoint_distance_loss(t, t.constant(kp), 0.2))[0];
        const double exact = keypoint_distance_exact(kp, 0.2);
        CHECK((hinge > 0.0) == (exact > 0.0));
    }
}

TEST_CASE("coincident keypoints pay 2*alpha per ordered pair set") {
    auto kp = Tensor<double>::from({1, 2, 2}, {0.3, 0.3, 0.3, 0.3});
    Tape<double> t;
    CHECK(t.val(keypoint_distance_loss(t, t.constant(kp), 0.2))[0] ==
          doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("keypoint distance averages over the batch") {
    // Row 0: coincident pair (0.4); row 1: far apart (0).
    auto kp = Tensor<double>::from({2, 2, 2}, {0.1, 0.1, 0.1, 0.1, -0.5, -0.5, 0.5, 0.5});
    Tape<double> t;
    CHECK(t.val(keypoint_distance_loss(t, t.constant(kp), 0.2))[0] ==
          doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("hinge keypoint distance gradient") {
    auto kp = Tensor<double>::from({1, 3, 2}, {0.00, 0.00, 0.03, -0.04, 0.40, 0.40});
    auto rep = grad_check(
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
            return keypoint_distance_loss(t, v[0], 0.2);
        },
        {kp}, 1e-6, 1e-7);
    INFO(rep.worst);
    CHECK(rep.ok);
}

TEST_CASE("consistency loss is zero when values equal projections") {
    Rng rng(46);
    auto x = testutil::randn<double>(rng, {1, 3, 6, 6});
    Tape<double> t;
    auto v = t.constant(x);
    CHECK(t.val(consistency_loss(t, {v}, {v}))[0] == 0.0);
}

TEST_CASE("consistency loss averages levels and honors level selection") {
    Tensor<double> fv1{{1, 2, 4, 4}, 0.0}, fp1{{1, 2, 4, 4}, 1.0};
    Tensor<double> fv2{{1, 2, 2, 2}, 0.0}, fp2{{1, 2, 2, 2}, 3.0};
    Tape<double> t;
    std::vector<Var<double>> fv{t.constant(fv1), t.constant(fv2)};
    std::vector<Var<double>> fp{t.constant(fp1), t.constant(fp2)};
    CHECK(t.val(consistency_loss(t, fv, fp, -1))[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(t.val(consistency_loss(t, fv, fp, 0))[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.val(consistency_loss(t, fv, fp, 1))[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK_THROWS_AS(consistency_loss(t, fv, fp, 2), DataError);
}

TEST_CASE("consistency loss pulls on values, never on projections") {
    Rng rng(47);
    auto fv_t = testutil::randn<double>(rng, {1, 2, 3, 3});
    fv_t.set_grad_flag(true);
    auto fp_t = testutil::randn<double>(rng, {1, 2, 6, 6});
    fp_t.set_grad_flag(true);
    Tape<double> t;
    auto fv = t.leaf(fv_t);
    auto fp = t.leaf(fp_t);
    t.backward(consistency_loss(t, {fv}, {fp}));
    double value_mass = 0;
    for (std::int64_t i = 0; i < t.grad(fv).numel(); ++i) value_mass += std::abs(t.grad(fv)[i]);
    CHECK(value_mass > 0.0);
    for (std::int64_t i = 0; i < t.grad(fp).numel(); ++i) CHECK(t.grad(fp)[i] == 0.0);
}

TEST_CASE("total loss is the weighted part sum") {
    Tape<double> t;
    LossParts<double> parts;
    parts.perceptual = t.constant(Tensor<double>::scalar(0.7));
    parts.equivariance = t.constant(Tensor<double>::scalar(1.3));
    parts.distance = t.constant(Tensor<double>::scalar(0.11));
    parts.consistency = t.constant(Tensor<double>::scalar(2.9));

    LossConfig zero;
    zero.lambda_p = zero.lambda_eq = zero.lambda_dist = zero.lambda_con = 0.0;
    CHECK(t.val(total_loss(t, parts, zero))[0] == 0.0);

    LossConfig tens;  // defaults are all 10
    const double got = t.val(total_loss(t, parts, tens))[0];
    CHECK(got == doctest::Approx(10.0 * (0.7 + 1.3 + 0.11 + 2.9)).epsilon(1e-12));

    LossConfig doubled = tens;
    doubled.lambda_eq = 20.0;
    CHECK(t.val(total_loss(t, parts, doubled))[0] - got ==
          doctest::Approx(10.0 * 1.3).epsilon(1e-12));
}

TEST_CASE("metrics on identical images hit the documented fixpoints") {
    Rng rng(48);
    auto x = testutil::rand_uniform<double>(rng, {1, 3, 16, 16}, 0.0, 1.0);
    auto m = compute_metrics(x, x);
    CHECK(m.l1 == 0.0);
    CHECK(m.psnr == 100.0);
    CHECK(m.ssim == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a constant 0.1 gap scores exactly 20 dB") {
    Tensor<double> a{{1, 3, 16, 16}, 0.5}, b{{1, 3, 16, 16}, 0.6};
    CHECK(metric_l1(a, b) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(metric_psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
    CHECK(metric_ssim(a, b) < 1.0);
}

TEST_CASE("ssim matches the sliding-window oracle") {
    Rng rng(49);
    auto a = testutil::rand_uniform<double>(rng, {2, 3, 16, 16}, 0.0, 1.0);
    auto b = testutil::rand_uniform<double>(rng, {2, 3, 16, 16}, 0.0, 1.0);
    CHECK(metric_ssim(a, b) == doctest::Approx(oracle::ssim(a, b)).epsilon(1e-6));
    // Also against a mildly corrupted copy, where SSIM should stay high.
    auto c = a;
    for (std::int64_t i = 0; i < c.numel(); ++i) c[i] += 0.01 * rng.normal();
    const double s = metric_ssim(a, c);
    CHECK(s == doctest::Approx(oracle::ssim(a, c)).epsilon(1e-6));
    CHECK(s > 0.5);
    CHECK(s < 1.0);
}

TEST_CASE("metrics validate their inputs") {
    Tensor<double> a{{1, 3, 16, 16}}, b{{1, 3, 8, 8}};
    CHECK_THROWS_AS(metric_l1(a, b), DataError);
    CHECK_THROWS_AS(metric_ssim(b, b), DataError);
}
