#pragma once

#include "mcnet/common.hpp"
#include "mcnet/tensor.hpp"

namespace testutil {

template <class S>
mcnet::Tensor<S> randn(mcnet::Rng& rng, mcnet::Shape shape, double scale = 1.0) {
    mcnet::Tensor<S> t{std::move(shape)};
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(rng.normal() * scale);
    return t;
}

template <class S>
mcnet::Tensor<S> rand_uniform(mcnet::Rng& rng, mcnet::Shape shape, double lo = 0.0,
                              double hi = 1.0) {
    mcnet::Tensor<S> t{std::move(shape)};
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

}  // namespace testutil
