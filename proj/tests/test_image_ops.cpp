#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mcnet/gradcheck.hpp"
#include "mcnet/image_ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mcnet;

namespace {

template <class Build>
void expect_grads(Build&& build, std::vector<Tensor<double>> inputs, double tol = 1e-6) {
    auto rep = grad_check(build, std::move(inputs), 1e-6, tol);
    INFO(rep.worst);
    CHECK(rep.ok);
}

template <class S>
Tensor<S> identity_grid(int b, int h, int w) {
    Tensor<S> g{{b, h, w, 2}};
    for (int n = 0; n < b; ++n)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                g.at({n, y, x, 0}) = w > 1 ? S(2.0 * x / (w - 1) - 1.0) : S(0);
                g.at({n, y, x, 1}) = h > 1 ? S(2.0 * y / (h - 1) - 1.0) : S(0);
            }
    return g;
}

}  // namespace

TEST_CASE("conv2d matches the six-loop oracle") {
    Rng rng(31);
    struct Case {
        Shape x, w;
        int stride, pad;
    };
    const Case cases[] = {
        {{2, 3, 5, 5}, {4, 3, 3, 3}, 1, 1},
        {{1, 2, 7, 6}, {3, 2, 3, 3}, 2, 1},
        {{2, 4, 4, 4}, {2, 4, 1, 1}, 1, 0},
        {{1, 1, 6, 6}, {1, 1, 5, 5}, 1, 2},
    };
    for (const auto& c : cases) {
        auto x = testutil::randn<double>(rng, c.x);
        auto w = testutil::randn<double>(rng, c.w);
        std::vector<double> bias(static_cast<std::size_t>(c.w[0]));
        for (auto& b : bias) b = rng.normal();
        Tape<double> t;
        auto bv = t.constant(Tensor<double>::from({c.w[0]}, bias));
        auto y = conv2d(t, t.constant(x), t.constant(w), bv, c.stride, c.pad);
        auto want = oracle::conv2d(x, w, bias, c.stride, c.pad);
        REQUIRE(t.val(y).shape() == want.shape());
        for (std::int64_t i = 0; i < want.numel(); ++i)
            CHECK(t.val(y)[i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
}

TEST_CASE("conv2d without bias and channel mismatch error") {
    Rng rng(32);
    auto x = testutil::randn<double>(rng, {1, 2, 4, 4});
    auto w = testutil::randn<double>(rng, {2, 2, 3, 3});
    Tape<double> t;
    auto y = conv2d(t, t.constant(x), t.constant(w), Var<double>{}, 1, 1);
    auto want = oracle::conv2d(x, w, {}, 1, 1);
    for (std::int64_t i = 0; i < want.numel(); ++i)
        CHECK(t.val(y)[i] == doctest::Approx(want[i]).epsilon(1e-10));

    auto wbad = testutil::randn<double>(rng, {2, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(t, t.constant(x), t.constant(wbad), Var<double>{}, 1, 1), DataError);
    auto wbig = testutil::randn<double>(rng, {2, 2, 9, 9});
    CHECK_THROWS_AS(conv2d(t, t.constant(x), t.constant(wbig), Var<double>{}, 1, 1), DataError);
}

TEST_CASE("conv2d gradients") {
    Rng rng(33);
    expect_grads(
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
            auto y = conv2d(t, v[0], v[1], v[2], 1, 1);
            return sum(t, mul(t, y, y));
        },
        {testutil::randn<double>(rng, {2, 2, 4, 4}), testutil::randn<double>(rng, {3, 2, 3, 3}),
         testutil::randn<double>(rng, {3})});
    expect_grads(
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
            auto y = conv2d(t, v[0], v[1], Var<double>{}, 2, 1);
            return sum(t, mul(t, y, y));
        },
        {testutil::randn<double>(rng, {1, 2, 5, 5}), testutil::randn<double>(rng, {2, 2, 3, 3})});
}

TEST_CASE("conv2d_per_sample applies a different filter per batch element") {
    Rng rng(34);
    auto x = testutil::randn<double>(rng, {3, 2, 4, 4});
    auto w = testutil::randn<double>(rng, {3, 2, 2, 3, 3});
    Tape<double> t;
    auto y = conv2d_per_sample(t, t.constant(x), t.constant(w), 1, 1);
    for (int n = 0; n < 3; ++n) {
        Tensor<double> xn{{1, 2, 4, 4}};
        Tensor<double> wn{{2, 2, 3, 3}};
        for (int i = 0; i < 32; ++i) xn[i] = x[n * 32 + i];
        for (int i = 0; i < 36; ++i) wn[i] = w[n * 36 + i];
        auto want = oracle::conv2d(xn, wn, {}, 1, 1);
        for (std::int64_t i = 0; i < want.numel(); ++i)
            CHECK(t.val(y)[n * want.numel() + i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
}

TEST_CASE("conv2d_per_sample broadcasts a singleton input batch") {
    Rng rng(35);
    auto x = testutil::randn<double>(rng, {1, 2, 4, 4});
    auto w = testutil::randn<double>(rng, {3, 2, 2, 3, 3});
    Tape<double> t;
    auto y = conv2d_per_sample(t, t.constant(x), t.constant(w), 1, 1);
    CHECK(t.val(y).shape() == Shape{3, 2, 4, 4});
    for (int n = 0; n < 3; ++n) {
        Tensor<double> wn{{2, 2, 3, 3}};
        for (int i = 0; i < 36; ++i) wn[i] = w[n * 36 + i];
        auto want = oracle::conv2d(x, wn, {}, 1, 1);
        for (std::int64_t i = 0; i < want.numel(); ++i)
            CHECK(t.val(y)[n * want.numel() + i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
}

TEST_CASE("conv2d_per_sample gradients, including the broadcast case") {
    Rng rng(36);
    expect_grads(
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
            auto y = conv2d_per_sample(t, v[0], v[1], 1, 1);
            return sum(t, mul(t, y, y));
        },
        {testutil::randn<double>(rng, {2, 2, 3, 3}), testutil::randn<double>(rng, {2, 2, 2, 3, 3})});
    expect_grads(
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
            auto y = conv2d_per_sample(t, v[0], v[1], 1, 1);
            return sum(t, mul(t, y, y));
        },
        {testutil::randn<double>(rng, {1, 2, 3, 3}), testutil::randn<double>(rng, {3, 2, 2, 3, 3})});
}

TEST_CASE("grid_sample with the identity grid reproduces the input") {
    Rng rng(37);
    auto x = testutil::randn<double>(rng, {2, 3, 5, 6});
    Tape<double> t;
    auto y = grid_sample(t, t.constant(x), t.constant(identity_grid<double>(2, 5, 6)));
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(t.val(y)[i] == doctest::Approx(x[i]));
}

TEST_CASE("grid_sample clamps out-of-range coordinates to the border") {
    auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<double> g{{1, 1, 2, 2}};
    g.at({0, 0, 0, 0}) = -5.0;  // far left
    g.at({0, 0, 0, 1}) = -5.0;  // far above
    g.at({0, 0, 1, 0}) = 5.0;   // far right
    g.at({0, 0, 1, 1}) = 5.0;   // far below
    Tape<double> t;
    auto y = grid_sample(t, t.constant(x), t.constant(g));
    CHECK(t.val(y)[0] == 1.0);
    CHECK(t.val(y)[1] == 4.0);
}

TEST_CASE("grid_sample matches the scalar bilinear oracle") {
    Rng rng(38);
    auto x = testutil::randn<double>(rng, {1, 2, 4, 5});
    auto g = testutil::rand_uniform<double>(rng, {1, 3, 3, 2}, -1.2, 1.2);
    Tape<double> t;
    auto y = grid_sample(t, t.constant(x), t.constant(g));
    for (int c = 0; c < 2; ++c)
        for (int p = 0; p < 9; ++p) {
            const double want =
                oracle::bilinear(x.data() + c * 20, 4, 5, g[p * 2], g[p * 2 + 1]);
            CHECK(t.val(y)[c * 9 + p] == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("grid_sample gradients for input and grid") {
    Rng rng(39);
    auto x = testutil::randn<double>(rng, {1, 2, 4, 4});
    // Interior coordinates only: the clamp kink breaks finite differences.
    auto g = testutil::rand_uniform<double>(rng, {1, 3, 3, 2}, -0.8, 0.8);
    expect_grads(
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
            auto y = grid_sample(t, v[0], v[1]);
            return sum(t, mul(t, y, y));
        },
        {x, g}, 1e-5);
}

TEST_CASE("bilinear_resize to the same size is the identity") {
    Rng rng(40);
    auto x = testutil::randn<double>(rng, {2, 3, 6, 7});
    Tape<double> t;
    auto y = bilinear_resize(t, t.constant(x), 6, 7);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(t.val(y)[i] == x[i]);
}

TEST_CASE("bilinear_resize keeps corners fixed") {
    Rng rng(41);
    auto x = testutil::randn<double>(rng, {1, 1, 5, 5});
    Tape<double> t;
    auto y = bilinear_resize(t, t.constant(x), 9, 9);
    CHECK(t.val(y).at({0, 0, 0, 0}) == doctest::Approx(x.at({0, 0, 0, 0})));
    CHECK(t.val(y).at({0, 0, 0, 8}) == doctest::Approx(x.at({0, 0, 0, 4})));
    CHECK(t.val(y).at({0, 0, 8, 0}) == doctest::Approx(x.at({0, 0, 4, 0})));
    CHECK(t.val(y).at({0, 0, 8, 8}) == doctest::Approx(x.at({0, 0, 4, 4})));
}

TEST_CASE("bilinear_resize gradient") {
    Rng rng(42);
    expect_grads(
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
            auto y = bilinear_resize(t, v[0], 3, 5);
            return sum(t, mul(t, y, y));
        },
        {testutil::randn<double>(rng, {1, 2, 4, 4})});
}

TEST_CASE("upsample_nearest2x duplicates pixels") {
    auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tape<double> t;
    auto y = upsample_nearest2x(t, t.constant(x));
    CHECK(t.val(y).shape() == Shape{1, 1, 4, 4});
    CHECK(t.val(y).at({0, 0, 0, 0}) == 1.0);
    CHECK(t.val(y).at({0, 0, 0, 1}) == 1.0);
    CHECK(t.val(y).at({0, 0, 1, 1}) == 1.0);
    CHECK(t.val(y).at({0, 0, 3, 3}) == 4.0);
}

TEST_CASE("avg_pool2x averages blocks and rejects odd sizes") {
    auto x = Tensor<double>::from({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tape<double> t;
    auto y = avg_pool2x(t, t.constant(x));
    CHECK(t.val(y).shape() == Shape{1, 1, 1, 2});
    CHECK(t.val(y)[0] == doctest::Approx((1 + 2 + 5 + 6) / 4.0));
    CHECK(t.val(y)[1] == doctest::Approx((3 + 4 + 7 + 8) / 4.0));
    auto odd = t.constant(Tensor<double>{{1, 1, 3, 4}});
    CHECK_THROWS_AS(avg_pool2x(t, odd), DataError);
}

TEST_CASE("pooling and upsampling gradients") {
    Rng rng(43);
    expect_grads(
        [](Tape<double>& t, const std::vector<Var<double>>& v) {
            auto y = avg_pool2x(t, upsample_nearest2x(t, v[0]));
            return sum(t, mul(t, y, y));
        },
        {testutil::randn<double>(rng, {2, 2, 2, 2})});
}

TEST_CASE("downsample_to reaches the target by halving") {
    Rng rng(44);
    auto x = testutil::randn<double>(rng, {1, 2, 8, 8});
    Tape<double> t;
    auto y = downsample_to(t, t.constant(x), 2);
    CHECK(t.val(y).shape() == Shape{1, 2, 2, 2});
    CHECK_THROWS_AS(downsample_to(t, t.constant(x), 3), DataError);
}
