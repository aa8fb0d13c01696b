#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mcnet/tensor.hpp"

using mcnet::DataError;
using mcnet::Shape;
using mcnet::Tensor;

TEST_CASE("construction and shape bookkeeping") {
    Tensor<float> t{{2, 3, 4}};
    CHECK(t.rank() == 3);
    CHECK(t.numel() == 24);
    CHECK(t.dim(1) == 3);
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0f);

    Tensor<float> f{{2, 2}, 1.5f};
    CHECK(f[3] == 1.5f);

    auto s = Tensor<double>::scalar(7.0);
    CHECK(s.numel() == 1);
    CHECK(s[0] == 7.0);
}

TEST_CASE("from rejects data that does not fill the shape") {
    CHECK_THROWS_AS(Tensor<float>::from({2, 3}, {1.0f, 2.0f}), DataError);
}

TEST_CASE("row-major indexing") {
    auto t = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.at({0, 0}) == 1.0f);
    CHECK(t.at({0, 2}) == 3.0f);
    CHECK(t.at({1, 0}) == 4.0f);
    CHECK(t.offset({1, 2}) == 5);

    // The Eigen map must see the same layout.
    auto m = t.mat(2, 3);
    CHECK(m(1, 0) == 4.0f);
    CHECK(m(0, 1) == 2.0f);
}

TEST_CASE("cast preserves values and flags") {
    auto t = Tensor<float>::from({3}, {1.25f, -2.0f, 0.5f});
    t.set_grad_flag(true);
    auto d = t.cast<double>();
    CHECK(d[0] == 1.25);
    CHECK(d[2] == 0.5);
    CHECK(d.grad_flag());
}

TEST_CASE("all_finite flags NaN and infinity") {
    auto t = Tensor<double>::from({3}, {1.0, 2.0, 3.0});
    CHECK(t.all_finite());
    t[1] = std::nan("");
    CHECK(!t.all_finite());
    t[1] = 2.0;
    t[2] = std::numeric_limits<double>::infinity();
    CHECK(!t.all_finite());
}

TEST_CASE("shape checks name the offender") {
    Tensor<float> t{{2, 3}};
    CHECK_NOTHROW(mcnet::check_shape(t, {2, 3}, "x"));
    try {
        mcnet::check_shape(t, {3, 2}, "weights");
        CHECK(false);
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("weights") != std::string::npos);
        CHECK(std::string(e.what()).find("[3,2]") != std::string::npos);
    }
}
