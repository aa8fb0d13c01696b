#pragma once

#include <array>

#include "mcnet/image_ops.hpp"
#include "mcnet/params.hpp"

// Keypoint detection and keypoint-driven dense motion. Keypoints live in
// normalized coordinates, (x,y) in [-1,1] with -1/+1 at the centers of the
// border pixels, matching the sampling convention of grid_sample.

namespace mcnet {

template <class S>
Tensor<S> make_identity_grid(int b, int h, int w) {
    Tensor<S> g{{b, h, w, 2}};
    for (int n = 0; n < b; ++n)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                g.at({n, y, x, 0}) = w > 1 ? S(2.0 * x / (w - 1) - 1.0) : S(0);
                g.at({n, y, x, 1}) = h > 1 ? S(2.0 * y / (h - 1) - 1.0) : S(0);
            }
    return g;
}

// heat:[B,K,H,W], rows already normalized to sum 1 -> [B,K,2] expected (x,y).
template <class S>
Var<S> spatial_expectation(Tape<S>& t, Var<S> heat) {
    const Tensor<S>& hv = t.val(heat);
    check_rank(hv, 4, "spatial_expectation");
    const int b = hv.dim(0), k = hv.dim(1), h = hv.dim(2), w = hv.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor<S> out{{b, k, 2}};
    for (std::int64_t plane = 0; plane < static_cast<std::int64_t>(b) * k; ++plane) {
        const S* hp = hv.data() + plane * hw;
        double ex = 0, ey = 0;
        for (int y = 0; y < h; ++y) {
            const double gy = h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0;
            for (int x = 0; x < w; ++x) {
                const double gx = w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0;
                const double v = hp[y * w + x];
                ex += gx * v;
                ey += gy * v;
            }
        }
        out[plane * 2] = static_cast<S>(ex);
        out[plane * 2 + 1] = static_cast<S>(ey);
    }
    return t.emplace("spatial_expectation", std::move(out), {heat},
                     [heat, b, k, h, w, hw](Tape<S>& tp, Var<S> self) {
                         Tensor<S>* gh = tp.grad_buf(heat);
                         if (!gh) return;
                         const Tensor<S>& g = tp.grad(self);
                         for (std::int64_t plane = 0; plane < static_cast<std::int64_t>(b) * k;
                              ++plane) {
                             const S gx_out = g[plane * 2], gy_out = g[plane * 2 + 1];
                             S* hp = gh->data() + plane * hw;
                             for (int y = 0; y < h; ++y) {
                                 const S gy = S(h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0);
                                 for (int x = 0; x < w; ++x) {
                                     const S gx = S(w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0);
                                     hp[y * w + x] += gx * gx_out + gy * gy_out;
                                 }
                             }
                         }
                     });
}

template <class S>
struct SoftArgmaxOut {
    Var<S> kp;    // [B,K,2]
    Var<S> heat;  // [B,K,H,W], rows sum to 1
};

// Temperature-scaled softmax over each map followed by the coordinate
// expectation. tau -> 0 approaches a hard argmax.
template <class S>
SoftArgmaxOut<S> soft_argmax(Tape<S>& t, Var<S> raw, double tau) {
    const Tensor<S>& rv = t.val(raw);
    check_rank(rv, 4, "soft_argmax");
    if (tau <= 0) throw DataError("soft_argmax: temperature must be positive");
    const int b = rv.dim(0), k = rv.dim(1), h = rv.dim(2), w = rv.dim(3);
    Var<S> flat = reshape(t, scale(t, raw, 1.0 / tau), {b, k, h * w});
    Var<S> sm = softmax(t, flat, 2);
    Var<S> heat = reshape(t, sm, {b, k, h, w});
    return {spatial_expectation(t, heat), heat};
}

// kp:[B,K,2] -> [B,K,H,W] unnormalized Gaussian bumps centered on each
// keypoint, unit peak, width sigma in normalized units.
template <class S>
Var<S> kp_gaussians(Tape<S>& t, Var<S> kp, int h, int w, double sigma) {
    const Tensor<S>& kv = t.val(kp);
    check_rank(kv, 3, "kp_gaussians");
    if (kv.dim(2) != 2) throw DataError("kp_gaussians: keypoints must be [B,K,2]");
    if (sigma <= 0) throw DataError("kp_gaussians: sigma must be positive");
    const int b = kv.dim(0), k = kv.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    Tensor<S> out{{b, k, h, w}};
    for (std::int64_t plane = 0; plane < static_cast<std::int64_t>(b) * k; ++plane) {
        const double kx = kv[plane * 2], ky = kv[plane * 2 + 1];
        S* op = out.data() + plane * hw;
        for (int y = 0; y < h; ++y) {
            const double gy = h > 1 ? 2.0 * y / (h - 1) - 1.0 : 0.0;
            for (int x = 0; x < w; ++x) {
                const double gx = w > 1 ? 2.0 * x / (w - 1) - 1.0 : 0.0;
                const double d2 = (gx - kx) * (gx - kx) + (gy - ky) * (gy - ky);
                op[y * w + x] = static_cast<S>(std::exp(-d2 * inv2s2));
            }
        }
    }
    return t.emplace(
        "kp_gaussians", std::move(out), {kp}, [kp, b, k, h, w, hw, inv2s2](Tape<S>& tp, Var<S> self) {
            Tensor<S>* gk = tp.grad_buf(kp);
            if (!gk) return;
            const Tensor<S>& g = tp.grad(self);
            const Tensor<S>& y_out = tp.val(self);
            const Tensor<S>& kv = tp.val(kp);
            for (std::int64_t plane = 0; plane < static_cast<std::int64_t>(b) * k; ++plane) {
                const double kx = kv[plane * 2], ky = kv[plane * 2 + 1];
                const S* gp = g.data() + plane * hw;
                const S* yp = y_out.data() + plane * hw;
                double dkx = 0, dky = 0;
                for (int yy = 0; yy < h; ++yy) {
                    const double gy = h > 1 ? 2.0 * yy / (h - 1) - 1.0 : 0.0;
                    for (int xx = 0; xx < w; ++xx) {
                        const double gx = w > 1 ? 2.0 * xx / (w - 1) - 1.0 : 0.0;
                        const double common =
                            static_cast<double>(gp[yy * w + xx]) * yp[yy * w + xx] * 2.0 * inv2s2;
                        dkx += common * (gx - kx);
                        dky += common * (gy - ky);
                    }
                }
                (*gk)[plane * 2] += static_cast<S>(dkx);
                (*gk)[plane * 2 + 1] += static_cast<S>(dky);
            }
        });
}

// Candidate backward-sampling grids, one per keypoint plus the identity.
// Candidate 0 is the identity grid; candidate m+1 shifts every coordinate by
// kp_s[m]-kp_d[m], so sampling the source with it moves the source content
// around keypoint m onto the driving location of that keypoint.
// kp_s,kp_d:[B,K,2] -> [B,K+1,H,W,2].
template <class S>
Var<S> sparse_motions(Tape<S>& t, Var<S> kp_s, Var<S> kp_d, int h, int w) {
    const Tensor<S>& sv = t.val(kp_s);
    const Tensor<S>& dv = t.val(kp_d);
    if (!sv.same_shape(dv))
        throw DataError("sparse_motions: keypoint sets differ " + shape_str(sv.shape()) + " vs " +
                        shape_str(dv.shape()));
    check_rank(sv, 3, "sparse_motions");
    const int b = sv.dim(0), k = sv.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const Tensor<S> grid = make_identity_grid<S>(1, h, w);
    Tensor<S> out{{b, k + 1, h, w, 2}};
    for (int n = 0; n < b; ++n) {
        S* base = out.data() + static_cast<std::int64_t>(n) * (k + 1) * hw * 2;
        std::copy(grid.data(), grid.data() + hw * 2, base);
        for (int m = 0; m < k; ++m) {
            const S dx = sv.at({n, m, 0}) - dv.at({n, m, 0});
            const S dy = sv.at({n, m, 1}) - dv.at({n, m, 1});
            S* cp = base + static_cast<std::int64_t>(m + 1) * hw * 2;
            for (std::int64_t p = 0; p < hw; ++p) {
                cp[p * 2] = grid[p * 2] + dx;
                cp[p * 2 + 1] = grid[p * 2 + 1] + dy;
            }
        }
    }
    return t.emplace("sparse_motions", std::move(out), {kp_s, kp_d},
                     [kp_s, kp_d, b, k, hw](Tape<S>& tp, Var<S> self) {
                         const Tensor<S>& g = tp.grad(self);
                         Tensor<S>* gs = tp.grad_buf(kp_s);
                         Tensor<S>* gd = tp.grad_buf(kp_d);
                         if (!gs && !gd) return;
                         for (int n = 0; n < b; ++n)
                             for (int m = 0; m < k; ++m) {
                                 const S* cp = g.data() +
                                               (static_cast<std::int64_t>(n) * (k + 1) + m + 1) *
                                                   hw * 2;
                                 double ax = 0, ay = 0;
                                 for (std::int64_t p = 0; p < hw; ++p) {
                                     ax += cp[p * 2];
                                     ay += cp[p * 2 + 1];
                                 }
                                 const std::int64_t o = (static_cast<std::int64_t>(n) * k + m) * 2;
                                 if (gs) {
                                     (*gs)[o] += static_cast<S>(ax);
                                     (*gs)[o + 1] += static_cast<S>(ay);
                                 }
                                 if (gd) {
                                     (*gd)[o] -= static_cast<S>(ax);
                                     (*gd)[o + 1] -= static_cast<S>(ay);
                                 }
                             }
                     });
}

// masks:[B,M,H,W] convex weights per pixel, cands:[B,M,H,W,2] -> [B,H,W,2].
template <class S>
Var<S> mask_flow_combine(Tape<S>& t, Var<S> masks, Var<S> cands) {
    const Tensor<S>& mv = t.val(masks);
    const Tensor<S>& cv = t.val(cands);
    check_rank(mv, 4, "mask_flow_combine masks");
    check_rank(cv, 5, "mask_flow_combine candidates");
    if (cv.dim(0) != mv.dim(0) || cv.dim(1) != mv.dim(1) || cv.dim(2) != mv.dim(2) ||
        cv.dim(3) != mv.dim(3) || cv.dim(4) != 2)
        throw DataError("mask_flow_combine: masks " + shape_str(mv.shape()) +
                        " do not fit candidates " + shape_str(cv.shape()));
    const int b = mv.dim(0), m = mv.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(mv.dim(2)) * mv.dim(3);
    Tensor<S> out{{b, mv.dim(2), mv.dim(3), 2}};
    for (int n = 0; n < b; ++n) {
        S* op = out.data() + static_cast<std::int64_t>(n) * hw * 2;
        for (int mm = 0; mm < m; ++mm) {
            const S* mp = mv.data() + (static_cast<std::int64_t>(n) * m + mm) * hw;
            const S* cp = cv.data() + (static_cast<std::int64_t>(n) * m + mm) * hw * 2;
            for (std::int64_t p = 0; p < hw; ++p) {
                op[p * 2] += mp[p] * cp[p * 2];
                op[p * 2 + 1] += mp[p] * cp[p * 2 + 1];
            }
        }
    }
    return t.emplace(
        "mask_flow_combine", std::move(out), {masks, cands},
        [masks, cands, b, m, hw](Tape<S>& tp, Var<S> self) {
            const Tensor<S>& g = tp.grad(self);
            const Tensor<S>& mv = tp.val(masks);
            const Tensor<S>& cv = tp.val(cands);
            Tensor<S>* gm = tp.grad_buf(masks);
            Tensor<S>* gc = tp.grad_buf(cands);
            for (int n = 0; n < b; ++n) {
                const S* gp = g.data() + static_cast<std::int64_t>(n) * hw * 2;
                for (int mm = 0; mm < m; ++mm) {
                    const std::int64_t off = (static_cast<std::int64_t>(n) * m + mm) * hw;
                    for (std::int64_t p = 0; p < hw; ++p) {
                        if (gm)
                            (*gm)[off + p] += gp[p * 2] * cv[(off + p) * 2] +
                                              gp[p * 2 + 1] * cv[(off + p) * 2 + 1];
                        if (gc) {
                            (*gc)[(off + p) * 2] += mv[off + p] * gp[p * 2];
                            (*gc)[(off + p) * 2 + 1] += mv[off + p] * gp[p * 2 + 1];
                        }
                    }
                }
            }
        });
}

// 2x3 affine on normalized keypoint coordinates:
// out = [a0*x + a1*y + a2, a3*x + a4*y + a5].
template <class S>
Var<S> affine_kp(Tape<S>& t, Var<S> kp, const std::array<double, 6>& a) {
    const Tensor<S>& kv = t.val(kp);
    check_rank(kv, 3, "affine_kp");
    if (kv.dim(2) != 2) throw DataError("affine_kp: keypoints must be [B,K,2]");
    const std::int64_t n = kv.numel() / 2;
    Tensor<S> out{kv.shape()};
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = kv[i * 2], y = kv[i * 2 + 1];
        out[i * 2] = static_cast<S>(a[0] * x + a[1] * y + a[2]);
        out[i * 2 + 1] = static_cast<S>(a[3] * x + a[4] * y + a[5]);
    }
    return t.emplace("affine_kp", std::move(out), {kp}, [kp, a, n](Tape<S>& tp, Var<S> self) {
        Tensor<S>* gk = tp.grad_buf(kp);
        if (!gk) return;
        const Tensor<S>& g = tp.grad(self);
        for (std::int64_t i = 0; i < n; ++i) {
            (*gk)[i * 2] += static_cast<S>(a[0]) * g[i * 2] + static_cast<S>(a[3]) * g[i * 2 + 1];
            (*gk)[i * 2 + 1] +=
                static_cast<S>(a[1]) * g[i * 2] + static_cast<S>(a[4]) * g[i * 2 + 1];
        }
    });
}

// Sampling grid that applies the same affine to the identity grid, for
// warping images consistently with affine_kp.
template <class S>
Tensor<S> affine_grid(const std::array<double, 6>& a, int b, int h, int w) {
    Tensor<S> g = make_identity_grid<S>(b, h, w);
    for (std::int64_t i = 0; i < g.numel() / 2; ++i) {
        const double x = g[i * 2], y = g[i * 2 + 1];
        g[i * 2] = static_cast<S>(a[0] * x + a[1] * y + a[2]);
        g[i * 2 + 1] = static_cast<S>(a[3] * x + a[4] * y + a[5]);
    }
    return g;
}

template <class S>
struct HourglassParams {
    ConvParams<S> in_conv;            // cin -> width
    std::vector<ConvParams<S>> down;  // width*2^i -> width*2^(i+1)
    std::vector<ConvParams<S>> up;    // width*2^(i+1)+width*2^i -> width*2^i
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        in_conv.visit(prefix + ".in", fn);
        for (std::size_t i = 0; i < down.size(); ++i)
            down[i].visit(prefix + ".down" + std::to_string(i), fn);
        for (std::size_t i = 0; i < up.size(); ++i)
            up[i].visit(prefix + ".up" + std::to_string(i), fn);
    }
};

template <class S>
HourglassParams<S> make_hourglass(Rng& rng, int cin, int width, int depth) {
    HourglassParams<S> p;
    p.in_conv = make_conv<S>(rng, cin, width, 3);
    for (int i = 0; i < depth; ++i)
        p.down.push_back(make_conv<S>(rng, width << i, width << (i + 1), 3));
    for (int i = 0; i < depth; ++i)
        p.up.push_back(make_conv<S>(rng, (width << (i + 1)) + (width << i), width << i, 3));
    return p;
}

// U-shaped encoder-decoder with skip connections; output keeps the input
// resolution and has `width` channels.
template <class S>
Var<S> hourglass(Tape<S>& t, Lifter<S>& L, Var<S> x, HourglassParams<S>& p) {
    Var<S> cur = relu(t, apply_conv(t, L, x, p.in_conv));
    std::vector<Var<S>> skips{cur};
    for (std::size_t i = 0; i < p.down.size(); ++i) {
        cur = relu(t, apply_conv(t, L, avg_pool2x(t, cur), p.down[i]));
        if (i + 1 < p.down.size()) skips.push_back(cur);
    }
    for (std::size_t i = p.down.size(); i-- > 0;) {
        cur = upsample_nearest2x(t, cur);
        cur = concat(t, {cur, skips[i]}, 1);
        cur = relu(t, apply_conv(t, L, cur, p.up[i]));
    }
    return cur;
}

template <class S>
struct KeypointDetectorParams {
    HourglassParams<S> trunk;
    ConvParams<S> head;  // width -> K
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        trunk.visit(prefix + ".trunk", fn);
        head.visit(prefix + ".head", fn);
    }
};

template <class S>
KeypointDetectorParams<S> make_keypoint_detector(Rng& rng, int k, int width, int depth) {
    return {make_hourglass<S>(rng, 3, width, depth), make_conv<S>(rng, width, k, 3)};
}

template <class S>
struct KeypointOut {
    Var<S> kp;    // [B,K,2]
    Var<S> heat;  // [B,K,Hh,Wh]
};

// image:[B,3,H,W] -> K keypoints from a soft argmax over detector heatmaps
// computed at heat_size x heat_size.
template <class S>
KeypointOut<S> detect_keypoints(Tape<S>& t, Lifter<S>& L, Var<S> image,
                                KeypointDetectorParams<S>& p, int heat_size, double tau) {
    Var<S> small = downsample_to(t, image, heat_size);
    Var<S> raw = apply_conv(t, L, hourglass(t, L, small, p.trunk), p.head);
    auto sa = soft_argmax(t, raw, tau);
    return {sa.kp, sa.heat};
}

template <class S>
struct DenseMotionParams {
    HourglassParams<S> trunk;  // input: K heat diffs + 3(K+1) warped candidates
    ConvParams<S> mask_head;   // width -> K+1
    ConvParams<S> occ_head;    // width -> 1
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        trunk.visit(prefix + ".trunk", fn);
        mask_head.visit(prefix + ".mask", fn);
        occ_head.visit(prefix + ".occ", fn);
    }
};

template <class S>
DenseMotionParams<S> make_dense_motion(Rng& rng, int k, int width, int depth) {
    return {make_hourglass<S>(rng, k + 3 * (k + 1), width, depth),
            make_conv<S>(rng, width, k + 1, 3), make_conv<S>(rng, width, 1, 3)};
}

template <class S>
struct DenseMotionOut {
    Var<S> flow;       // [B,Hf,Wf,2]
    Var<S> masks;      // [B,K+1,Hf,Wf]
    Var<S> occlusion;  // [B,1,Hf,Wf], invalid when disabled
};

// Combines per-keypoint candidate motions into one dense backward flow. The
// network sees the Gaussian heatmap difference of the two keypoint sets plus
// the source warped by every candidate, and predicts softmax mixing masks.
template <class S>
DenseMotionOut<S> dense_motion(Tape<S>& t, Lifter<S>& L, Var<S> source, Var<S> kp_s, Var<S> kp_d,
                               DenseMotionParams<S>& p, int flow_size, double sigma,
                               bool use_occlusion) {
    const int k = t.val(kp_s).dim(1);
    const int b = t.val(kp_s).dim(0);
    Var<S> src_small = downsample_to(t, source, flow_size);
    Var<S> heat_diff = sub(t, kp_gaussians(t, kp_d, flow_size, flow_size, sigma),
                           kp_gaussians(t, kp_s, flow_size, flow_size, sigma));
    Var<S> cands = sparse_motions(t, kp_s, kp_d, flow_size, flow_size);
    std::vector<Var<S>> warped;
    warped.reserve(static_cast<std::size_t>(k) + 1);
    for (int m = 0; m <= k; ++m) {
        Var<S> grid = reshape(t, narrow(t, cands, 1, m, 1), {b, flow_size, flow_size, 2});
        warped.push_back(grid_sample(t, src_small, grid));
    }
    Var<S> net_in = concat(t, {heat_diff, concat(t, warped, 1)}, 1);
    Var<S> features = hourglass(t, L, net_in, p.trunk);
    Var<S> masks = softmax(t, apply_conv(t, L, features, p.mask_head), 1);
    DenseMotionOut<S> out;
    out.flow = mask_flow_combine(t, masks, cands);
    out.masks = masks;
    if (use_occlusion) out.occlusion = sigmoid(t, apply_conv(t, L, features, p.occ_head));
    return out;
}

// Warps a feature map by a dense flow given at any resolution; the flow is
// bilinearly resized to the feature grid first (a no-op when sizes match).
// An optional occlusion map gates the result.
template <class S>
Var<S> warp_feature(Tape<S>& t, Var<S> feat, Var<S> flow, Var<S> occlusion = Var<S>{}) {
    const Tensor<S>& fv = t.val(feat);
    const Tensor<S>& wv = t.val(flow);
    check_rank(fv, 4, "warp_feature input");
    check_rank(wv, 4, "warp_feature flow");
    const int h = fv.dim(2), w = fv.dim(3);
    Var<S> grid = flow;
    if (wv.dim(1) != h || wv.dim(2) != w) {
        Var<S> planes = permute(t, flow, {0, 3, 1, 2});
        grid = permute(t, bilinear_resize(t, planes, h, w), {0, 2, 3, 1});
    }
    Var<S> warped = grid_sample(t, feat, grid);
    if (occlusion.valid()) {
        Var<S> occ = occlusion;
        const Tensor<S>& ov = t.val(occlusion);
        if (ov.dim(2) != h || ov.dim(3) != w) occ = bilinear_resize(t, occlusion, h, w);
        warped = mul_channel_gate(t, warped, occ);
    }
    return warped;
}

}  // namespace mcnet
