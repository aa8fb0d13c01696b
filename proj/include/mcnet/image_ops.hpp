#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mcnet/ops.hpp"

// Convolution, sampling and pooling on [B,C,H,W] tensors. Convolutions are
// im2col + GEMM through Eigen; the column buffer is rebuilt in the backward
// pass instead of being stored, trading a little CPU for a flat memory
// profile. All sampling uses normalized coordinates in [-1,1] where -1 and
// +1 map to the centers of the border pixels, with border clamping.

namespace mcnet {

namespace detail {

inline int conv_out_size(int in, int k, int stride, int pad, const char* op) {
    const int out = (in + 2 * pad - k) / stride + 1;
    if (in + 2 * pad < k || out <= 0)
        throw DataError(std::string(op) + ": kernel " + std::to_string(k) +
                        " too large for input " + std::to_string(in));
    return out;
}

template <class S>
void im2col(const S* x, int c, int h, int w, int kh, int kw, int stride, int pad, int ho, int wo,
            S* cols) {
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                S* row = cols + ((static_cast<std::int64_t>(ci) * kh + ky) * kw + kx) *
                                    (static_cast<std::int64_t>(ho) * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < wo; ++ox) row[oy * wo + ox] = S(0);
                        continue;
                    }
                    const S* src = x + (static_cast<std::int64_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[oy * wo + ox] = (ix < 0 || ix >= w) ? S(0) : src[ix];
                    }
                }
            }
}

template <class S>
void col2im_add(const S* cols, int c, int h, int w, int kh, int kw, int stride, int pad, int ho,
                int wo, S* x) {
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const S* row = cols + ((static_cast<std::int64_t>(ci) * kh + ky) * kw + kx) *
                                          (static_cast<std::int64_t>(ho) * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    S* dst = x + (static_cast<std::int64_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
                    }
                }
            }
}

}  // namespace detail

// x:[B,Ci,H,W] w:[Co,Ci,kh,kw] bias:[Co] (optional) -> [B,Co,Ho,Wo].
template <class S>
Var<S> conv2d(Tape<S>& t, Var<S> x, Var<S> w, Var<S> bias, int stride = 1, int pad = 0) {
    using CM = typename Tensor<S>::ConstMatMap;
    using MM = typename Tensor<S>::MatMap;
    const Tensor<S>& xv = t.val(x);
    const Tensor<S>& wv = t.val(w);
    check_rank(xv, 4, "conv2d input");
    check_rank(wv, 4, "conv2d weight");
    if (xv.dim(1) != wv.dim(1))
        throw DataError("conv2d: input channels " + std::to_string(xv.dim(1)) +
                        " do not match weight " + shape_str(wv.shape()));
    const int b = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), w_in = xv.dim(3);
    const int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    const int ho = detail::conv_out_size(h, kh, stride, pad, "conv2d");
    const int wo = detail::conv_out_size(w_in, kw, stride, pad, "conv2d");
    const std::int64_t ckk = static_cast<std::int64_t>(ci) * kh * kw;
    const std::int64_t hw = static_cast<std::int64_t>(ho) * wo;
    Tensor<S> out{{b, co, ho, wo}};
    std::vector<S> cols(static_cast<std::size_t>(ckk * hw));
    for (int i = 0; i < b; ++i) {
        detail::im2col(xv.data() + static_cast<std::int64_t>(i) * ci * h * w_in, ci, h, w_in, kh,
                       kw, stride, pad, ho, wo, cols.data());
        MM om(out.data() + static_cast<std::int64_t>(i) * co * hw, co, hw);
        om.noalias() = CM(wv.data(), co, ckk) * CM(cols.data(), ckk, hw);
        if (bias.valid()) om.colwise() += t.val(bias).vec();
    }
    auto pull = [x, w, bias, b, ci, h, w_in, co, kh, kw, stride, pad, ho, wo, ckk,
                 hw](Tape<S>& tp, Var<S> self) {
        const Tensor<S>& g = tp.grad(self);
        const Tensor<S>& xv = tp.val(x);
        const Tensor<S>& wv = tp.val(w);
        Tensor<S>* gx = tp.grad_buf(x);
        Tensor<S>* gw = tp.grad_buf(w);
        Tensor<S>* gb = bias.valid() ? tp.grad_buf(bias) : nullptr;
        std::vector<S> cols(static_cast<std::size_t>(ckk * hw));
        for (int i = 0; i < b; ++i) {
            CM gm(g.data() + static_cast<std::int64_t>(i) * co * hw, co, hw);
            if (gw) {
                detail::im2col(xv.data() + static_cast<std::int64_t>(i) * ci * h * w_in, ci, h,
                               w_in, kh, kw, stride, pad, ho, wo, cols.data());
                MM(gw->data(), co, ckk).noalias() += gm * CM(cols.data(), ckk, hw).transpose();
            }
            if (gb) gb->vec() += gm.rowwise().sum();
            if (gx) {
                MM(cols.data(), ckk, hw).noalias() = CM(wv.data(), co, ckk).transpose() * gm;
                detail::col2im_add(cols.data(), ci, h, w_in, kh, kw, stride, pad, ho, wo,
                                   gx->data() + static_cast<std::int64_t>(i) * ci * h * w_in);
            }
        }
    };
    if (bias.valid()) return t.emplace("conv2d", std::move(out), {x, w, bias}, pull);
    return t.emplace("conv2d", std::move(out), {x, w}, pull);
}

// Convolution whose filter bank differs per batch element. x:[1,Ci,H,W] or
// [B,Ci,H,W], w:[B,Co,Ci,kh,kw] -> [B,Co,Ho,Wo]. A singleton input batch is
// broadcast across the weight batch.
template <class S>
Var<S> conv2d_per_sample(Tape<S>& t, Var<S> x, Var<S> w, int stride = 1, int pad = 0) {
    using CM = typename Tensor<S>::ConstMatMap;
    using MM = typename Tensor<S>::MatMap;
    const Tensor<S>& xv = t.val(x);
    const Tensor<S>& wv = t.val(w);
    check_rank(xv, 4, "conv2d_per_sample input");
    check_rank(wv, 5, "conv2d_per_sample weight");
    if (xv.dim(1) != wv.dim(2))
        throw DataError("conv2d_per_sample: input channels " + std::to_string(xv.dim(1)) +
                        " do not match weight " + shape_str(wv.shape()));
    const int b = wv.dim(0), ci = xv.dim(1), h = xv.dim(2), w_in = xv.dim(3);
    const int co = wv.dim(1), kh = wv.dim(3), kw = wv.dim(4);
    const bool bcast = xv.dim(0) == 1;
    if (!bcast && xv.dim(0) != b)
        throw DataError("conv2d_per_sample: batch mismatch " + shape_str(xv.shape()) + " vs " +
                        shape_str(wv.shape()));
    const int ho = detail::conv_out_size(h, kh, stride, pad, "conv2d_per_sample");
    const int wo = detail::conv_out_size(w_in, kw, stride, pad, "conv2d_per_sample");
    const std::int64_t ckk = static_cast<std::int64_t>(ci) * kh * kw;
    const std::int64_t hw = static_cast<std::int64_t>(ho) * wo;
    const std::int64_t wstep = static_cast<std::int64_t>(co) * ckk;
    Tensor<S> out{{b, co, ho, wo}};
    std::vector<S> cols(static_cast<std::size_t>(ckk * hw));
    for (int i = 0; i < b; ++i) {
        const S* xi = xv.data() + (bcast ? 0 : static_cast<std::int64_t>(i) * ci * h * w_in);
        if (i == 0 || !bcast)
            detail::im2col(xi, ci, h, w_in, kh, kw, stride, pad, ho, wo, cols.data());
        MM(out.data() + static_cast<std::int64_t>(i) * co * hw, co, hw).noalias() =
            CM(wv.data() + i * wstep, co, ckk) * CM(cols.data(), ckk, hw);
    }
    return t.emplace(
        "conv2d_per_sample", std::move(out), {x, w},
        [x, w, b, ci, h, w_in, co, kh, kw, stride, pad, ho, wo, ckk, hw, wstep,
         bcast](Tape<S>& tp, Var<S> self) {
            const Tensor<S>& g = tp.grad(self);
            const Tensor<S>& xv = tp.val(x);
            const Tensor<S>& wv = tp.val(w);
            Tensor<S>* gx = tp.grad_buf(x);
            Tensor<S>* gw = tp.grad_buf(w);
            std::vector<S> cols(static_cast<std::size_t>(ckk * hw));
            for (int i = 0; i < b; ++i) {
                const S* xi =
                    xv.data() + (bcast ? 0 : static_cast<std::int64_t>(i) * ci * h * w_in);
                CM gm(g.data() + static_cast<std::int64_t>(i) * co * hw, co, hw);
                if (gw) {
                    if (i == 0 || !bcast)
                        detail::im2col(xi, ci, h, w_in, kh, kw, stride, pad, ho, wo, cols.data());
                    MM(gw->data() + i * wstep, co, ckk).noalias() +=
                        gm * CM(cols.data(), ckk, hw).transpose();
                }
                if (gx) {
                    MM(cols.data(), ckk, hw).noalias() =
                        CM(wv.data() + i * wstep, co, ckk).transpose() * gm;
                    detail::col2im_add(
                        cols.data(), ci, h, w_in, kh, kw, stride, pad, ho, wo,
                        gx->data() + (bcast ? 0 : static_cast<std::int64_t>(i) * ci * h * w_in));
                    if (gw && bcast && i + 1 < b)
                        detail::im2col(xi, ci, h, w_in, kh, kw, stride, pad, ho, wo, cols.data());
                }
            }
        });
}

// x:[B,C,H,W] grid:[B,Hg,Wg,2] with (x,y) order in the last axis.
template <class S>
Var<S> grid_sample(Tape<S>& t, Var<S> x, Var<S> grid) {
    const Tensor<S>& xv = t.val(x);
    const Tensor<S>& gv = t.val(grid);
    check_rank(xv, 4, "grid_sample input");
    check_rank(gv, 4, "grid_sample grid");
    if (gv.dim(3) != 2 || gv.dim(0) != xv.dim(0))
        throw DataError("grid_sample: grid " + shape_str(gv.shape()) + " does not fit input " +
                        shape_str(xv.shape()));
    const int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int hg = gv.dim(1), wg = gv.dim(2);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t hwg = static_cast<std::int64_t>(hg) * wg;
    Tensor<S> out{{b, c, hg, wg}};
    auto clampf = [](S v, S hi) { return v < S(0) ? S(0) : (v > hi ? hi : v); };
    for (int i = 0; i < b; ++i) {
        const S* gp = gv.data() + static_cast<std::int64_t>(i) * hwg * 2;
        const S* xp = xv.data() + static_cast<std::int64_t>(i) * c * hw;
        S* op = out.data() + static_cast<std::int64_t>(i) * c * hwg;
        for (std::int64_t p = 0; p < hwg; ++p) {
            const S px = clampf((gp[p * 2] + S(1)) * S(0.5) * S(w - 1), S(w - 1));
            const S py = clampf((gp[p * 2 + 1] + S(1)) * S(0.5) * S(h - 1), S(h - 1));
            const int x0 = static_cast<int>(px), y0 = static_cast<int>(py);
            const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            const S wx = px - S(x0), wy = py - S(y0);
            for (int ch = 0; ch < c; ++ch) {
                const S* pl = xp + ch * hw;
                const S v00 = pl[y0 * w + x0], v01 = pl[y0 * w + x1];
                const S v10 = pl[y1 * w + x0], v11 = pl[y1 * w + x1];
                op[ch * hwg + p] = (S(1) - wy) * ((S(1) - wx) * v00 + wx * v01) +
                                   wy * ((S(1) - wx) * v10 + wx * v11);
            }
        }
    }
    return t.emplace(
        "grid_sample", std::move(out), {x, grid},
        [x, grid, b, c, h, w, hg, wg, hw, hwg](Tape<S>& tp, Var<S> self) {
            const Tensor<S>& g = tp.grad(self);
            const Tensor<S>& xv = tp.val(x);
            const Tensor<S>& gv = tp.val(grid);
            Tensor<S>* gx = tp.grad_buf(x);
            Tensor<S>* gg = tp.grad_buf(grid);
            auto clampf = [](S v, S hi) { return v < S(0) ? S(0) : (v > hi ? hi : v); };
            for (int i = 0; i < b; ++i) {
                const S* gp = gv.data() + static_cast<std::int64_t>(i) * hwg * 2;
                const S* xp = xv.data() + static_cast<std::int64_t>(i) * c * hw;
                const S* op = g.data() + static_cast<std::int64_t>(i) * c * hwg;
                for (std::int64_t p = 0; p < hwg; ++p) {
                    const S px = clampf((gp[p * 2] + S(1)) * S(0.5) * S(w - 1), S(w - 1));
                    const S py = clampf((gp[p * 2 + 1] + S(1)) * S(0.5) * S(h - 1), S(h - 1));
                    const int x0 = static_cast<int>(px), y0 = static_cast<int>(py);
                    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
                    const S wx = px - S(x0), wy = py - S(y0);
                    S dpx = S(0), dpy = S(0);
                    for (int ch = 0; ch < c; ++ch) {
                        const S go = op[ch * hwg + p];
                        if (go == S(0)) continue;
                        const S* pl = xp + ch * hw;
                        const S v00 = pl[y0 * w + x0], v01 = pl[y0 * w + x1];
                        const S v10 = pl[y1 * w + x0], v11 = pl[y1 * w + x1];
                        if (gx) {
                            S* gl = gx->data() + static_cast<std::int64_t>(i) * c * hw + ch * hw;
                            gl[y0 * w + x0] += go * (S(1) - wy) * (S(1) - wx);
                            gl[y0 * w + x1] += go * (S(1) - wy) * wx;
                            gl[y1 * w + x0] += go * wy * (S(1) - wx);
                            gl[y1 * w + x1] += go * wy * wx;
                        }
                        dpx += go * ((S(1) - wy) * (v01 - v00) + wy * (v11 - v10));
                        dpy += go * ((S(1) - wx) * (v10 - v00) + wx * (v11 - v01));
                    }
                    if (gg) {
                        // The chain through the clamp: zero gradient once the
                        // raw coordinate leaves [-1,1].
                        const S rx = (gp[p * 2] + S(1)) * S(0.5) * S(w - 1);
                        const S ry = (gp[p * 2 + 1] + S(1)) * S(0.5) * S(h - 1);
                        S* gl = gg->data() + static_cast<std::int64_t>(i) * hwg * 2;
                        if (rx > S(0) && rx < S(w - 1)) gl[p * 2] += dpx * S(0.5) * S(w - 1);
                        if (ry > S(0) && ry < S(h - 1)) gl[p * 2 + 1] += dpy * S(0.5) * S(h - 1);
                    }
                }
            }
        });
}

// Bilinear resize of [B,C,H,W] to [B,C,Ho,Wo]. A no-op resize reproduces the
// input exactly.
template <class S>
Var<S> bilinear_resize(Tape<S>& t, Var<S> x, int ho, int wo) {
    const Tensor<S>& xv = t.val(x);
    check_rank(xv, 4, "bilinear_resize");
    const int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (ho <= 0 || wo <= 0) throw DataError("bilinear_resize: target size must be positive");
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t hwo = static_cast<std::int64_t>(ho) * wo;
    const double sy = ho > 1 ? static_cast<double>(h - 1) / (ho - 1) : 0.0;
    const double sx = wo > 1 ? static_cast<double>(w - 1) / (wo - 1) : 0.0;
    Tensor<S> out{{b, c, ho, wo}};
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(b) * c; ++bc) {
        const S* src = xv.data() + bc * hw;
        S* dst = out.data() + bc * hwo;
        for (int oy = 0; oy < ho; ++oy) {
            const double py = sy * oy;
            const int y0 = static_cast<int>(py);
            const int y1 = std::min(y0 + 1, h - 1);
            const S wy = static_cast<S>(py - y0);
            for (int ox = 0; ox < wo; ++ox) {
                const double px = sx * ox;
                const int x0 = static_cast<int>(px);
                const int x1 = std::min(x0 + 1, w - 1);
                const S wx = static_cast<S>(px - x0);
                dst[oy * wo + ox] =
                    (S(1) - wy) * ((S(1) - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                    wy * ((S(1) - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
            }
        }
    }
    return t.emplace("bilinear_resize", std::move(out), {x},
                     [x, b, c, h, w, ho, wo, hw, hwo, sy, sx](Tape<S>& tp, Var<S> self) {
                         Tensor<S>* gx = tp.grad_buf(x);
                         if (!gx) return;
                         const Tensor<S>& g = tp.grad(self);
                         for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(b) * c; ++bc) {
                             const S* go = g.data() + bc * hwo;
                             S* gi = gx->data() + bc * hw;
                             for (int oy = 0; oy < ho; ++oy) {
                                 const double py = sy * oy;
                                 const int y0 = static_cast<int>(py);
                                 const int y1 = std::min(y0 + 1, h - 1);
                                 const S wy = static_cast<S>(py - y0);
                                 for (int ox = 0; ox < wo; ++ox) {
                                     const double px = sx * ox;
                                     const int x0 = static_cast<int>(px);
                                     const int x1 = std::min(x0 + 1, w - 1);
                                     const S wx = static_cast<S>(px - x0);
                                     const S v = go[oy * wo + ox];
                                     gi[y0 * w + x0] += v * (S(1) - wy) * (S(1) - wx);
                                     gi[y0 * w + x1] += v * (S(1) - wy) * wx;
                                     gi[y1 * w + x0] += v * wy * (S(1) - wx);
                                     gi[y1 * w + x1] += v * wy * wx;
                                 }
                             }
                         }
                     });
}

template <class S>
Var<S> upsample_nearest2x(Tape<S>& t, Var<S> x) {
    const Tensor<S>& xv = t.val(x);
    check_rank(xv, 4, "upsample_nearest2x");
    const int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor<S> out{{b, c, 2 * h, 2 * w}};
    const std::int64_t planes = static_cast<std::int64_t>(b) * c;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const S* src = xv.data() + pl * h * w;
        S* dst = out.data() + pl * 4 * h * w;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const S v = src[y * w + xx];
                S* d = dst + 2 * y * 2 * w + 2 * xx;
                d[0] = v;
                d[1] = v;
                d[2 * w] = v;
                d[2 * w + 1] = v;
            }
    }
    return t.emplace("upsample_nearest2x", std::move(out), {x},
                     [x, planes, h, w](Tape<S>& tp, Var<S> self) {
                         Tensor<S>* gx = tp.grad_buf(x);
                         if (!gx) return;
                         const Tensor<S>& g = tp.grad(self);
                         for (std::int64_t pl = 0; pl < planes; ++pl) {
                             const S* go = g.data() + pl * 4 * h * w;
                             S* gi = gx->data() + pl * h * w;
                             for (int y = 0; y < h; ++y)
                                 for (int xx = 0; xx < w; ++xx) {
                                     const S* s = go + 2 * y * 2 * w + 2 * xx;
                                     gi[y * w + xx] += s[0] + s[1] + s[2 * w] + s[2 * w + 1];
                                 }
                         }
                     });
}

template <class S>
Var<S> avg_pool2x(Tape<S>& t, Var<S> x) {
    const Tensor<S>& xv = t.val(x);
    check_rank(xv, 4, "avg_pool2x");
    const int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (h % 2 || w % 2)
        throw DataError("avg_pool2x: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                        " is not even");
    Tensor<S> out{{b, c, h / 2, w / 2}};
    const std::int64_t planes = static_cast<std::int64_t>(b) * c;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const S* src = xv.data() + pl * h * w;
        S* dst = out.data() + pl * (h / 2) * (w / 2);
        for (int y = 0; y < h / 2; ++y)
            for (int xx = 0; xx < w / 2; ++xx) {
                const S* s = src + 2 * y * w + 2 * xx;
                dst[y * (w / 2) + xx] = (s[0] + s[1] + s[w] + s[w + 1]) * S(0.25);
            }
    }
    return t.emplace("avg_pool2x", std::move(out), {x},
                     [x, planes, h, w](Tape<S>& tp, Var<S> self) {
                         Tensor<S>* gx = tp.grad_buf(x);
                         if (!gx) return;
                         const Tensor<S>& g = tp.grad(self);
                         for (std::int64_t pl = 0; pl < planes; ++pl) {
                             const S* go = g.data() + pl * (h / 2) * (w / 2);
                             S* gi = gx->data() + pl * h * w;
                             for (int y = 0; y < h / 2; ++y)
                                 for (int xx = 0; xx < w / 2; ++xx) {
                                     const S v = go[y * (w / 2) + xx] * S(0.25);
                                     S* d = gi + 2 * y * w + 2 * xx;
                                     d[0] += v;
                                     d[1] += v;
                                     d[w] += v;
                                     d[w + 1] += v;
                                 }
                         }
                     });
}

// Repeated 2x average pooling down to the requested size, which must divide
// the input by a power of two.
template <class S>
Var<S> downsample_to(Tape<S>& t, Var<S> x, int target) {
    int cur = t.val(x).dim(2);
    if (t.val(x).dim(3) != cur) throw DataError("downsample_to: input must be square");
    Var<S> out = x;
    while (cur > target) {
        if (cur % 2) throw DataError("downsample_to: cannot reach " + std::to_string(target) +
                                     " from " + std::to_string(cur));
        out = avg_pool2x(t, out);
        cur /= 2;
    }
    if (cur != target)
        throw DataError("downsample_to: cannot reach " + std::to_string(target) + " from " +
                        std::to_string(t.val(x).dim(2)));
    return out;
}

}  // namespace mcnet
