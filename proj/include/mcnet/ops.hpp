#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mcnet/tape.hpp"

// Differentiable primitives on tape variables. Every function records a
// forward value plus a pull closure; gradient flow is additive, so the same
// variable may feed several ops.

namespace mcnet {

namespace detail {

inline void check_axis(int axis, int rank, const char* op) {
    if (axis < 0 || axis >= rank)
        throw DataError(std::string(op) + ": axis " + std::to_string(axis) +
                        " out of range for rank " + std::to_string(rank));
}

inline std::int64_t prod_range(const Shape& s, int lo, int hi) {
    std::int64_t p = 1;
    for (int i = lo; i < hi; ++i) p *= s[static_cast<std::size_t>(i)];
    return p;
}

template <class S>
Tensor<S> permute_copy(const Tensor<S>& x, const std::vector<int>& perm) {
    int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw DataError("permute: bad axis list");
    Shape os(static_cast<std::size_t>(r));
    std::vector<std::int64_t> xstride(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        xstride[static_cast<std::size_t>(i)] =
            xstride[static_cast<std::size_t>(i + 1)] * x.dim(i + 1);
    std::vector<std::int64_t> srcstride(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        os[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);
        srcstride[static_cast<std::size_t>(i)] = xstride[static_cast<std::size_t>(
            perm[static_cast<std::size_t>(i)])];
    }
    Tensor<S> out{os};
    std::vector<int> idx(static_cast<std::size_t>(r), 0);
    std::int64_t src = 0;
    const std::int64_t n = out.numel();
    for (std::int64_t k = 0; k < n; ++k) {
        out[k] = x[src];
        for (int ax = r - 1; ax >= 0; --ax) {
            auto a = static_cast<std::size_t>(ax);
            ++idx[a];
            src += srcstride[a];
            if (idx[a] < os[a]) break;
            src -= static_cast<std::int64_t>(os[a]) * srcstride[a];
            idx[a] = 0;
        }
    }
    return out;
}

}  // namespace detail

template <class S>
Var<S> add(Tape<S>& t, Var<S> a, Var<S> b) {
    const Tensor<S>& av = t.val(a);
    const Tensor<S>& bv = t.val(b);
    if (!av.same_shape(bv))
        throw DataError("add: shape mismatch " + shape_str(av.shape()) + " vs " +
                        shape_str(bv.shape()));
    Tensor<S> out{av.shape()};
    out.vec() = av.vec() + bv.vec();
    return t.emplace("add", std::move(out), {a, b}, [a, b](Tape<S>& tp, Var<S> self) {
        const Tensor<S>& g = tp.grad(self);
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

template <class S>
Var<S> sub(Tape<S>& t, Var<S> a, Var<S> b) {
    const Tensor<S>& av = t.val(a);
    const Tensor<S>& bv = t.val(b);
    if (!av.same_shape(bv))
        throw DataError("sub: shape mismatch " + shape_str(av.shape()) + " vs " +
                        shape_str(bv.shape()));
    Tensor<S> out{av.shape()};
    out.vec() = av.vec() - bv.vec();
    return t.emplace("sub", std::move(out), {a, b}, [a, b](Tape<S>& tp, Var<S> self) {
        const Tensor<S>& g = tp.grad(self);
        tp.accumulate(a, g);
        if (Tensor<S>* gb = tp.grad_buf(b)) gb->vec() -= g.vec();
    });
}

template <class S>
Var<S> mul(Tape<S>& t, Var<S> a, Var<S> b) {
    const Tensor<S>& av = t.val(a);
    const Tensor<S>& bv = t.val(b);
    if (!av.same_shape(bv))
        throw DataError("mul: shape mismatch " + shape_str(av.shape()) + " vs " +
                        shape_str(bv.shape()));
    Tensor<S> out{av.shape()};
    out.vec() = av.vec().cwiseProduct(bv.vec());
    return t.emplace("mul", std::move(out), {a, b}, [a, b](Tape<S>& tp, Var<S> self) {
        const Tensor<S>& g = tp.grad(self);
        if (Tensor<S>* ga = tp.grad_buf(a)) ga->vec() += g.vec().cwiseProduct(tp.val(b).vec());
        if (Tensor<S>* gb = tp.grad_buf(b)) gb->vec() += g.vec().cwiseProduct(tp.val(a).vec());
    });
}

template <class S>
Var<S> scale(Tape<S>& t, Var<S> a, double c) {
    const Tensor<S>& av = t.val(a);
    Tensor<S> out{av.shape()};
    out.vec() = av.vec() * S(c);
    return t.emplace("scale", std::move(out), {a}, [a, c](Tape<S>& tp, Var<S> self) {
        if (Tensor<S>* ga = tp.grad_buf(a)) ga->vec() += tp.grad(self).vec() * S(c);
    });
}

template <class S>
Var<S> relu(Tape<S>& t, Var<S> x) {
    const Tensor<S>& xv = t.val(x);
    Tensor<S> out{xv.shape()};
    out.vec() = xv.vec().cwiseMax(S(0));
    return t.emplace("relu", std::move(out), {x}, [x](Tape<S>& tp, Var<S> self) {
        Tensor<S>* gx = tp.grad_buf(x);
        if (!gx) return;
        const Tensor<S>& g = tp.grad(self);
        const Tensor<S>& xv = tp.val(x);
        for (std::int64_t i = 0; i < xv.numel(); ++i)
            if (xv[i] > S(0)) (*gx)[i] += g[i];
    });
}

template <class S>
Var<S> sigmoid(Tape<S>& t, Var<S> x) {
    const Tensor<S>& xv = t.val(x);
    Tensor<S> out{xv.shape()};
    for (std::int64_t i = 0; i < xv.numel(); ++i)
        out[i] = S(1) / (S(1) + std::exp(-xv[i]));
    return t.emplace("sigmoid", std::move(out), {x}, [x](Tape<S>& tp, Var<S> self) {
        Tensor<S>* gx = tp.grad_buf(x);
        if (!gx) return;
        const Tensor<S>& g = tp.grad(self);
        const Tensor<S>& y = tp.val(self);
        for (std::int64_t i = 0; i < y.numel(); ++i)
            (*gx)[i] += g[i] * y[i] * (S(1) - y[i]);
    });
}

template <class S>
Var<S> concat(Tape<S>& t, const std::vector<Var<S>>& xs, int axis) {
    if (xs.empty()) throw DataError("concat: no inputs");
    const Tensor<S>& first = t.val(xs[0]);
    detail::check_axis(axis, first.rank(), "concat");
    Shape os = first.shape();
    std::vector<int> mids;
    mids.reserve(xs.size());
    int total_mid = 0;
    for (Var<S> v : xs) {
        const Tensor<S>& xv = t.val(v);
        if (xv.rank() != first.rank())
            throw DataError("concat: rank mismatch " + shape_str(xv.shape()));
        for (int d = 0; d < first.rank(); ++d)
            if (d != axis && xv.dim(d) != first.dim(d))
                throw DataError("concat: shape mismatch " + shape_str(xv.shape()) + " vs " +
                                shape_str(first.shape()));
        mids.push_back(xv.dim(axis));
        total_mid += xv.dim(axis);
    }
    os[static_cast<std::size_t>(axis)] = total_mid;
    const std::int64_t outer = detail::prod_range(os, 0, axis);
    const std::int64_t inner = detail::prod_range(os, axis + 1, static_cast<int>(os.size()));
    Tensor<S> out{os};
    std::int64_t off = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const Tensor<S>& xv = t.val(xs[i]);
        const std::int64_t chunk = mids[i] * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(xv.data() + o * chunk, xv.data() + (o + 1) * chunk,
                      out.data() + o * total_mid * inner + off);
        off += chunk;
    }
    std::vector<Var<S>> ins = xs;
    return t.emplace("concat", std::move(out), xs,
                     [ins, mids, outer, inner, total_mid](Tape<S>& tp, Var<S> self) {
                         const Tensor<S>& g = tp.grad(self);
                         std::int64_t off = 0;
                         for (std::size_t i = 0; i < ins.size(); ++i) {
                             const std::int64_t chunk = mids[i] * inner;
                             if (Tensor<S>* gi = tp.grad_buf(ins[i])) {
                                 for (std::int64_t o = 0; o < outer; ++o) {
                                     const S* src = g.data() + o * total_mid * inner + off;
                                     S* dst = gi->data() + o * chunk;
                                     for (std::int64_t j = 0; j < chunk; ++j) dst[j] += src[j];
                                 }
                             }
                             off += chunk;
                         }
                     });
}

template <class S>
Var<S> narrow(Tape<S>& t, Var<S> x, int axis, int start, int len) {
    const Tensor<S>& xv = t.val(x);
    detail::check_axis(axis, xv.rank(), "narrow");
    if (start < 0 || len <= 0 || start + len > xv.dim(axis))
        throw DataError("narrow: window [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") exceeds axis size " +
                        std::to_string(xv.dim(axis)));
    Shape os = xv.shape();
    os[static_cast<std::size_t>(axis)] = len;
    const std::int64_t outer = detail::prod_range(xv.shape(), 0, axis);
    const std::int64_t inner =
        detail::prod_range(xv.shape(), axis + 1, static_cast<int>(xv.shape().size()));
    const std::int64_t mid = xv.dim(axis);
    Tensor<S> out{os};
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(xv.data() + (o * mid + start) * inner, xv.data() + (o * mid + start + len) * inner,
                  out.data() + o * len * inner);
    return t.emplace("narrow", std::move(out), {x},
                     [x, axis, start, len, outer, inner, mid](Tape<S>& tp, Var<S> self) {
                         Tensor<S>* gx = tp.grad_buf(x);
                         if (!gx) return;
                         const Tensor<S>& g = tp.grad(self);
                         for (std::int64_t o = 0; o < outer; ++o) {
                             const S* src = g.data() + o * len * inner;
                             S* dst = gx->data() + (o * mid + start) * inner;
                             for (std::int64_t j = 0; j < len * inner; ++j) dst[j] += src[j];
                         }
                     });
}

template <class S>
Var<S> reshape(Tape<S>& t, Var<S> x, Shape shape) {
    const Tensor<S>& xv = t.val(x);
    if (shape_numel(shape) != xv.numel())
        throw DataError("reshape: cannot view " + shape_str(xv.shape()) + " as " +
                        shape_str(shape));
    Tensor<S> out{shape};
    out.vec() = xv.vec();
    return t.emplace("reshape", std::move(out), {x}, [x](Tape<S>& tp, Var<S> self) {
        if (Tensor<S>* gx = tp.grad_buf(x)) gx->vec() += tp.grad(self).vec();
    });
}

template <class S>
Var<S> permute(Tape<S>& t, Var<S> x, std::vector<int> perm) {
    Tensor<S> out = detail::permute_copy(t.val(x), perm);
    return t.emplace("permute", std::move(out), {x}, [x, perm](Tape<S>& tp, Var<S> self) {
        Tensor<S>* gx = tp.grad_buf(x);
        if (!gx) return;
        std::vector<int> inv(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i)
            inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
        Tensor<S> gp = detail::permute_copy(tp.grad(self), inv);
        gx->vec() += gp.vec();
    });
}

template <class S>
Var<S> matmul(Tape<S>& t, Var<S> a, Var<S> b) {
    const Tensor<S>& av = t.val(a);
    const Tensor<S>& bv = t.val(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw DataError("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                        shape_str(bv.shape()));
    const std::int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<S> out{{static_cast<int>(m), static_cast<int>(n)}};
    out.mat(m, n).noalias() = av.mat(m, k) * bv.mat(k, n);
    return t.emplace("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<S>& tp, Var<S> self) {
        const Tensor<S>& g = tp.grad(self);
        if (Tensor<S>* ga = tp.grad_buf(a))
            ga->mat(m, k).noalias() += g.mat(m, n) * tp.val(b).mat(k, n).transpose();
        if (Tensor<S>* gb = tp.grad_buf(b))
            gb->mat(k, n).noalias() += tp.val(a).mat(m, k).transpose() * g.mat(m, n);
    });
}

// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
template <class S>
Var<S> bmm(Tape<S>& t, Var<S> a, Var<S> b) {
    using CM = typename Tensor<S>::ConstMatMap;
    using MM = typename Tensor<S>::MatMap;
    const Tensor<S>& av = t.val(a);
    const Tensor<S>& bv = t.val(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
        throw DataError("bmm: incompatible shapes " + shape_str(av.shape()) + " x " +
                        shape_str(bv.shape()));
    const std::int64_t bs = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    Tensor<S> out{{static_cast<int>(bs), static_cast<int>(m), static_cast<int>(n)}};
    for (std::int64_t i = 0; i < bs; ++i)
        MM(out.data() + i * m * n, m, n).noalias() =
            CM(av.data() + i * m * k, m, k) * CM(bv.data() + i * k * n, k, n);
    return t.emplace("bmm", std::move(out), {a, b}, [a, b, bs, m, k, n](Tape<S>& tp, Var<S> self) {
        const Tensor<S>& g = tp.grad(self);
        const Tensor<S>& av = tp.val(a);
        const Tensor<S>& bv = tp.val(b);
        if (Tensor<S>* ga = tp.grad_buf(a))
            for (std::int64_t i = 0; i < bs; ++i)
                MM(ga->data() + i * m * k, m, k).noalias() +=
                    CM(g.data() + i * m * n, m, n) * CM(bv.data() + i * k * n, k, n).transpose();
        if (Tensor<S>* gb = tp.grad_buf(b))
            for (std::int64_t i = 0; i < bs; ++i)
                MM(gb->data() + i * k * n, k, n).noalias() +=
                    CM(av.data() + i * m * k, m, k).transpose() * CM(g.data() + i * m * n, m, n);
    });
}

// x:[B,D] w:[D,H] bias:[H] (optional, pass Var{} for none) -> [B,H].
template <class S>
Var<S> linear(Tape<S>& t, Var<S> x, Var<S> w, Var<S> bias) {
    const Tensor<S>& xv = t.val(x);
    const Tensor<S>& wv = t.val(w);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0))
        throw DataError("linear: incompatible shapes " + shape_str(xv.shape()) + " x " +
                        shape_str(wv.shape()));
    const std::int64_t bsz = xv.dim(0), d = xv.dim(1), h = wv.dim(1);
    Tensor<S> out{{static_cast<int>(bsz), static_cast<int>(h)}};
    out.mat(bsz, h).noalias() = xv.mat(bsz, d) * wv.mat(d, h);
    if (bias.valid()) {
        const Tensor<S>& bv = t.val(bias);
        if (bv.numel() != h) throw DataError("linear: bias length mismatch");
        out.mat(bsz, h).rowwise() += bv.vec().transpose();
    }
    auto pull = [x, w, bias, bsz, d, h](Tape<S>& tp, Var<S> self) {
        const Tensor<S>& g = tp.grad(self);
        if (Tensor<S>* gx = tp.grad_buf(x))
            gx->mat(bsz, d).noalias() += g.mat(bsz, h) * tp.val(w).mat(d, h).transpose();
        if (Tensor<S>* gw = tp.grad_buf(w))
            gw->mat(d, h).noalias() += tp.val(x).mat(bsz, d).transpose() * g.mat(bsz, h);
        if (bias.valid())
            if (Tensor<S>* gb = tp.grad_buf(bias))
                gb->vec() += g.mat(bsz, h).colwise().sum().transpose();
    };
    if (bias.valid()) return t.emplace("linear", std::move(out), {x, w, bias}, pull);
    return t.emplace("linear", std::move(out), {x, w}, pull);
}

template <class S>
Var<S> softmax(Tape<S>& t, Var<S> x, int axis) {
    const Tensor<S>& xv = t.val(x);
    detail::check_axis(axis, xv.rank(), "softmax");
    const std::int64_t outer = detail::prod_range(xv.shape(), 0, axis);
    const std::int64_t mid = xv.dim(axis);
    const std::int64_t inner =
        detail::prod_range(xv.shape(), axis + 1, static_cast<int>(xv.shape().size()));
    Tensor<S> out{xv.shape()};
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * mid * inner + i;
            S mx = xv[base];
            for (std::int64_t k = 1; k < mid; ++k) mx = std::max(mx, xv[base + k * inner]);
            S sum = S(0);
            for (std::int64_t k = 0; k < mid; ++k) {
                S e = std::exp(xv[base + k * inner] - mx);
                out[base + k * inner] = e;
                sum += e;
            }
            for (std::int64_t k = 0; k < mid; ++k) out[base + k * inner] /= sum;
        }
    return t.emplace("softmax", std::move(out), {x},
                     [x, outer, mid, inner](Tape<S>& tp, Var<S> self) {
                         Tensor<S>* gx = tp.grad_buf(x);
                         if (!gx) return;
                         const Tensor<S>& g = tp.grad(self);
                         const Tensor<S>& y = tp.val(self);
                         for (std::int64_t o = 0; o < outer; ++o)
                             for (std::int64_t i = 0; i < inner; ++i) {
                                 const std::int64_t base = o * mid * inner + i;
                                 S dot = S(0);
                                 for (std::int64_t k = 0; k < mid; ++k)
                                     dot += g[base + k * inner] * y[base + k * inner];
                                 for (std::int64_t k = 0; k < mid; ++k)
                                     (*gx)[base + k * inner] +=
                                         y[base + k * inner] * (g[base + k * inner] - dot);
                             }
                     });
}

// [B,C,H,W] -> [B,C] spatial mean.
template <class S>
Var<S> global_avg_pool(Tape<S>& t, Var<S> x) {
    const Tensor<S>& xv = t.val(x);
    check_rank(xv, 4, "global_avg_pool");
    const std::int64_t bc = static_cast<std::int64_t>(xv.dim(0)) * xv.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor<S> out{{xv.dim(0), xv.dim(1)}};
    for (std::int64_t i = 0; i < bc; ++i) {
        S acc = S(0);
        for (std::int64_t j = 0; j < hw; ++j) acc += xv[i * hw + j];
        out[i] = acc / S(hw);
    }
    return t.emplace("global_avg_pool", std::move(out), {x},
                     [x, bc, hw](Tape<S>& tp, Var<S> self) {
                         Tensor<S>* gx = tp.grad_buf(x);
                         if (!gx) return;
                         const Tensor<S>& g = tp.grad(self);
                         for (std::int64_t i = 0; i < bc; ++i) {
                             const S v = g[i] / S(hw);
                             for (std::int64_t j = 0; j < hw; ++j) (*gx)[i * hw + j] += v;
                         }
                     });
}

template <class S>
Var<S> sum(Tape<S>& t, Var<S> x) {
    const Tensor<S>& xv = t.val(x);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(xv.vec().template cast<double>().sum()));
    return t.emplace("sum", std::move(out), {x}, [x](Tape<S>& tp, Var<S> self) {
        if (Tensor<S>* gx = tp.grad_buf(x)) gx->vec().array() += tp.grad(self)[0];
    });
}

// Mean absolute difference.
template <class S>
Var<S> l1(Tape<S>& t, Var<S> a, Var<S> b) {
    const Tensor<S>& av = t.val(a);
    const Tensor<S>& bv = t.val(b);
    if (!av.same_shape(bv))
        throw DataError("l1: shape mismatch " + shape_str(av.shape()) + " vs " +
                        shape_str(bv.shape()));
    const std::int64_t n = av.numel();
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(av[i] - bv[i]));
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
    return t.emplace("l1", std::move(out), {a, b}, [a, b, n](Tape<S>& tp, Var<S> self) {
        const S g = tp.grad(self)[0] / S(n);
        const Tensor<S>& av = tp.val(a);
        const Tensor<S>& bv = tp.val(b);
        Tensor<S>* ga = tp.grad_buf(a);
        Tensor<S>* gb = tp.grad_buf(b);
        for (std::int64_t i = 0; i < n; ++i) {
            const S d = av[i] - bv[i];
            const S s = d > S(0) ? g : (d < S(0) ? -g : S(0));
            if (ga) (*ga)[i] += s;
            if (gb) (*gb)[i] -= s;
        }
    });
}

// x:[B,C,H,W] scaled per pixel by gate:[B,1,H,W].
template <class S>
Var<S> mul_channel_gate(Tape<S>& t, Var<S> x, Var<S> gate) {
    const Tensor<S>& xv = t.val(x);
    const Tensor<S>& gv = t.val(gate);
    check_rank(xv, 4, "mul_channel_gate input");
    if (gv.rank() != 4 || gv.dim(0) != xv.dim(0) || gv.dim(1) != 1 || gv.dim(2) != xv.dim(2) ||
        gv.dim(3) != xv.dim(3))
        throw DataError("mul_channel_gate: gate " + shape_str(gv.shape()) + " does not fit " +
                        shape_str(xv.shape()));
    const std::int64_t b = xv.dim(0), c = xv.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
    Tensor<S> out{xv.shape()};
    for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t p = 0; p < hw; ++p)
                out[(n * c + ch) * hw + p] = xv[(n * c + ch) * hw + p] * gv[n * hw + p];
    return t.emplace("mul_channel_gate", std::move(out), {x, gate},
                     [x, gate, b, c, hw](Tape<S>& tp, Var<S> self) {
                         const Tensor<S>& g = tp.grad(self);
                         const Tensor<S>& xv = tp.val(x);
                         const Tensor<S>& gv = tp.val(gate);
                         Tensor<S>* gx = tp.grad_buf(x);
                         Tensor<S>* gg = tp.grad_buf(gate);
                         for (std::int64_t n = 0; n < b; ++n)
                             for (std::int64_t ch = 0; ch < c; ++ch)
                                 for (std::int64_t p = 0; p < hw; ++p) {
                                     const std::int64_t i = (n * c + ch) * hw + p;
                                     if (gx) (*gx)[i] += g[i] * gv[n * hw + p];
                                     if (gg) (*gg)[n * hw + p] += g[i] * xv[i];
                                 }
                     });
}

// Cuts the graph: the result carries the same value but no history.
template <class S>
Var<S> detach(Tape<S>& t, Var<S> x) {
    Tensor<S> copy = t.val(x);
    copy.set_grad_flag(false);
    return t.leaf(std::move(copy), false);
}

}  // namespace mcnet
