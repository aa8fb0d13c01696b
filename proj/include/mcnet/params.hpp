#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mcnet/ops.hpp"

namespace mcnet {

// Parameter containers are plain tensors owned outside any tape. Each
// forward pass lifts them onto the current tape as gradient-carrying leaves;
// the Lifter caches the mapping so a parameter used twice shares one leaf
// and its gradients accumulate.

template <class S>
using ParamFn = std::function<void(const std::string&, Tensor<S>&)>;

template <class S>
struct ConvParams {
    Tensor<S> w;  // [Co,Ci,k,k]
    Tensor<S> b;  // [Co]
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        fn(prefix + ".w", w);
        fn(prefix + ".b", b);
    }
};

template <class S>
struct LinearParams {
    Tensor<S> w;  // [Din,Dout]
    Tensor<S> b;  // [Dout]
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        fn(prefix + ".w", w);
        fn(prefix + ".b", b);
    }
};

template <class S>
struct MlpParams {
    std::vector<LinearParams<S>> layers;
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].visit(prefix + ".fc" + std::to_string(i), fn);
    }
};

template <class S>
ConvParams<S> make_conv(Rng& rng, int cin, int cout, int k) {
    ConvParams<S> p;
    p.w = Tensor<S>{{cout, cin, k, k}};
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    for (std::int64_t i = 0; i < p.w.numel(); ++i) p.w[i] = static_cast<S>(rng.normal() * std);
    p.b = Tensor<S>{{cout}};
    return p;
}

template <class S>
LinearParams<S> make_linear(Rng& rng, int din, int dout) {
    LinearParams<S> p;
    p.w = Tensor<S>{{din, dout}};
    const double std = std::sqrt(2.0 / static_cast<double>(din));
    for (std::int64_t i = 0; i < p.w.numel(); ++i) p.w[i] = static_cast<S>(rng.normal() * std);
    p.b = Tensor<S>{{dout}};
    return p;
}

template <class S>
MlpParams<S> make_mlp(Rng& rng, const std::vector<int>& widths) {
    MlpParams<S> p;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
        p.layers.push_back(make_linear<S>(rng, widths[i], widths[i + 1]));
    return p;
}

template <class S>
class Lifter {
public:
    explicit Lifter(bool train = true) : train_(train) {}

    Var<S> operator()(Tape<S>& t, Tensor<S>& param) {
        auto it = vars_.find(&param);
        if (it != vars_.end()) return it->second;
        Var<S> v = t.leaf(param, train_);
        vars_.emplace(&param, v);
        return v;
    }

    // Var for a parameter that took part in this forward pass, if any.
    Var<S> var_of(const Tensor<S>& param) const {
        auto it = vars_.find(&param);
        return it == vars_.end() ? Var<S>{} : it->second;
    }

private:
    std::unordered_map<const Tensor<S>*, Var<S>> vars_;
    bool train_;
};

template <class S>
Var<S> apply_conv(Tape<S>& t, Lifter<S>& L, Var<S> x, ConvParams<S>& p, int stride = 1,
                  int pad = -1) {
    if (pad < 0) pad = p.w.dim(2) / 2;  // same-size default for odd kernels
    return conv2d(t, x, L(t, p.w), L(t, p.b), stride, pad);
}

// ReLU between layers, linear output.
template <class S>
Var<S> apply_mlp(Tape<S>& t, Lifter<S>& L, Var<S> x, MlpParams<S>& p) {
    Var<S> h = x;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        h = linear(t, h, L(t, p.layers[i].w), L(t, p.layers[i].b));
        if (i + 1 < p.layers.size()) h = relu(t, h);
    }
    return h;
}

}  // namespace mcnet
