#pragma once

#include <array>

#include "mcnet/pipeline.hpp"

// Training objectives and evaluation metrics. Losses build on the tape and
// return scalars; metrics are plain functions over tensors.

namespace mcnet {

// ---------------------------------------------------------------------------
// Perceptual loss

// Frozen feature stack standing in for a pretrained perceptual network. The
// raw image rides along as feature zero, so even the identity setting keeps
// the loss well defined; the convolution features come from a fixed seed and
// never train.
template <class S>
struct PerceptualExtractor {
    std::vector<ConvParams<S>> convs;

    static PerceptualExtractor identity() { return {}; }

    static PerceptualExtractor make_default(std::uint64_t seed = 1234, int width = 8,
                                            int layers = 2) {
        PerceptualExtractor e;
        Rng rng(seed);
        int cin = 3;
        for (int i = 0; i < layers; ++i) {
            e.convs.push_back(make_conv<S>(rng, cin, width, 3));
            cin = width;
        }
        return e;
    }

    // Weights enter the tape as constants, so no gradient ever lands on the
    // extractor.
    std::vector<Var<S>> operator()(Tape<S>& t, Var<S> image) const {
        std::vector<Var<S>> feats{image};
        Var<S> h = image;
        for (const auto& c : convs) {
            h = relu(t, conv2d(t, h, t.constant(c.w), t.constant(c.b), 1, c.w.dim(2) / 2));
            feats.push_back(h);
        }
        return feats;
    }
};

// Sum over four pyramid levels (full, 1/2, 1/4, 1/8) of the mean L1 between
// extractor features of the two images.
template <class S>
Var<S> perceptual_loss(Tape<S>& t, const PerceptualExtractor<S>& extractor, Var<S> generated,
                       Var<S> target) {
    const Tensor<S>& gv = t.val(generated);
    check_rank(gv, 4, "perceptual_loss");
    if (!gv.same_shape(t.val(target)))
        throw DataError("perceptual_loss: image shapes differ");
    if (gv.dim(2) % 8 != 0 || gv.dim(3) % 8 != 0 || gv.dim(2) < 8 || gv.dim(3) < 8)
        throw DataError("perceptual_loss: image " + shape_str(gv.shape()) +
                        " cannot form a 4-level pyramid");
    Var<S> loss{};
    Var<S> g = generated, r = target;
    for (int level = 0; level < 4; ++level) {
        if (level > 0) {
            g = avg_pool2x(t, g);
            r = avg_pool2x(t, r);
        }
        auto gf = extractor(t, g);
        auto rf = extractor(t, r);
        for (std::size_t i = 0; i < gf.size(); ++i) {
            Var<S> term = l1(t, gf[i], rf[i]);
            loss = loss.valid() ? add(t, loss, term) : term;
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Equivariance loss

// Invertible 2-D affine map over normalized [-1,1] coordinates, used both on
// keypoints and (through its inverse) on images so the two views agree.
struct Affine {
    std::array<double, 6> a{1, 0, 0, 0, 1, 0};

    static Affine identity() { return {}; }

    static Affine random(Rng& rng) {
        const double ang = rng.uniform(-15.0, 15.0) * kPi / 180.0;
        const double s = rng.uniform(0.8, 1.2);
        const double tx = rng.uniform(-0.1, 0.1);
        const double ty = rng.uniform(-0.1, 0.1);
        Affine t;
        t.a = {s * std::cos(ang), -s * std::sin(ang), tx,
               s * std::sin(ang), s * std::cos(ang),  ty};
        return t;
    }

    Affine inverse() const {
        const double det = a[0] * a[4] - a[1] * a[3];
        if (std::abs(det) < 1e-12) throw DataError("affine transform is not invertible");
        Affine inv;
        inv.a[0] = a[4] / det;
        inv.a[1] = -a[1] / det;
        inv.a[3] = -a[3] / det;
        inv.a[4] = a[0] / det;
        inv.a[2] = -(inv.a[0] * a[2] + inv.a[1] * a[5]);
        inv.a[5] = -(inv.a[3] * a[2] + inv.a[4] * a[5]);
        return inv;
    }

    bool is_identity() const {
        return a == std::array<double, 6>{1, 0, 0, 0, 1, 0};
    }
};

// Warps the image so content moves forward under T: a keypoint at X lands at
// T(X). Sampling grids map output to input, hence the inverse.
template <class S>
Var<S> warp_image_affine(Tape<S>& t, Var<S> image, const Affine& T) {
    if (T.is_identity()) return image;
    const Tensor<S>& iv = t.val(image);
    check_rank(iv, 4, "warp_image_affine");
    Tensor<S> grid = affine_grid<S>(T.inverse().a, iv.dim(0), iv.dim(2), iv.dim(3));
    return grid_sample(t, image, t.constant(grid));
}

// Keypoints detected on the transformed image should equal the transformed
// keypoints of the original image.
template <class S>
Var<S> equivariance_loss(Tape<S>& t, Lifter<S>& L, Model<S>& m, Var<S> image, const Affine& T) {
    const int fs = m.cfg.resolved_flow_size();
    Var<S> kp = detect_keypoints(t, L, image, m.kp, fs, m.cfg.tau).kp;
    Var<S> kp_warped = detect_keypoints(t, L, warp_image_affine(t, image, T), m.kp, fs,
                                        m.cfg.tau).kp;
    return l1(t, affine_kp(t, kp, T.a), kp_warped);
}

// ---------------------------------------------------------------------------
// Keypoint distance loss

// Literal sign-based spread penalty, for monitoring only: each ordered pair
// closer than alpha (L1) contributes 2, pairs exactly at alpha contribute 1.
// Piecewise constant, so no gradient anywhere.
template <class S>
double keypoint_distance_exact(const Tensor<S>& kp, double alpha) {
    check_rank(kp, 3, "keypoint_distance_exact");
    const int b = kp.dim(0), k = kp.dim(1);
    double total = 0;
    for (int n = 0; n < b; ++n)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
                if (i == j) continue;
                const std::int64_t pi = (static_cast<std::int64_t>(n) * k + i) * 2;
                const std::int64_t pj = (static_cast<std::int64_t>(n) * k + j) * 2;
                const double d = std::abs(static_cast<double>(kp[pi]) - kp[pj]) +
                                 std::abs(static_cast<double>(kp[pi + 1]) - kp[pj + 1]);
                const double sign = d > alpha ? 1.0 : d < alpha ? -1.0 : 0.0;
                total += 1.0 - sign;
            }
    return total / b;
}

// Differentiable surrogate with the same zero set: hinge on the pairwise L1
// distance, summed over ordered pairs, averaged over the batch.
template <class S>
Var<S> keypoint_distance_loss(Tape<S>& t, Var<S> kp, double alpha) {
    const Tensor<S>& kv = t.val(kp);
    check_rank(kv, 3, "keypoint_distance_loss");
    if (kv.dim(2) != 2) throw DataError("keypoint_distance_loss: keypoints must be [B,K,2]");
    if (alpha <= 0) throw DataError("keypoint_distance_loss: alpha must be positive");
    const int b = kv.dim(0), k = kv.dim(1);
    double total = 0;
    for (int n = 0; n < b; ++n)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
                if (i == j) continue;
                const std::int64_t pi = (static_cast<std::int64_t>(n) * k + i) * 2;
                const std::int64_t pj = (static_cast<std::int64_t>(n) * k + j) * 2;
                const double d = std::abs(static_cast<double>(kv[pi]) - kv[pj]) +
                                 std::abs(static_cast<double>(kv[pi + 1]) - kv[pj + 1]);
                if (d < alpha) total += alpha - d;
            }
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / b));
    return t.emplace(
        "keypoint_distance", std::move(out), {kp}, [kp, alpha, b, k](Tape<S>& tp, Var<S> self) {
            Tensor<S>* gk = tp.grad_buf(kp);
            if (!gk) return;
            const double g = static_cast<double>(tp.grad(self)[0]) / b;
            const Tensor<S>& kv = tp.val(kp);
            for (int n = 0; n < b; ++n)
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) {
                        if (i == j) continue;
                        const std::int64_t pi = (static_cast<std::int64_t>(n) * k + i) * 2;
                        const std::int64_t pj = (static_cast<std::int64_t>(n) * k + j) * 2;
                        double d = 0;
                        for (int c = 0; c < 2; ++c)
                            d += std::abs(static_cast<double>(kv[pi + c]) - kv[pj + c]);
                        if (d >= alpha) continue;
                        for (int c = 0; c < 2; ++c) {
                            const double diff = static_cast<double>(kv[pi + c]) - kv[pj + c];
                            const double sgn = diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0;
                            (*gk)[pi + c] -= static_cast<S>(g * sgn);
                            (*gk)[pj + c] += static_cast<S>(g * sgn);
                        }
                    }
        });
}

// ---------------------------------------------------------------------------
// Consistency loss

// L1 between the memory value maps and the gradient-detached projected
// features; value maps live on the memory grid, so they are resampled onto
// the feature grid first. level -1 averages all levels.
template <class S>
Var<S> consistency_loss(Tape<S>& t, const std::vector<Var<S>>& fv,
                        const std::vector<Var<S>>& fproj, int level = -1) {
    if (fv.empty() || fv.size() != fproj.size())
        throw DataError("consistency_loss: level lists are empty or mismatched");
    const int n = static_cast<int>(fv.size());
    if (level < -1 || level >= n) throw DataError("consistency_loss: level out of range");
    const int lo = level == -1 ? 0 : level;
    const int hi = level == -1 ? n - 1 : level;
    Var<S> loss{};
    for (int l = lo; l <= hi; ++l) {
        const Tensor<S>& pv = t.val(fproj[static_cast<std::size_t>(l)]);
        Var<S> resized = bilinear_resize(t, fv[static_cast<std::size_t>(l)], pv.dim(2), pv.dim(3));
        Var<S> term = l1(t, resized, detach(t, fproj[static_cast<std::size_t>(l)]));
        loss = loss.valid() ? add(t, loss, term) : term;
    }
    return hi > lo ? scale(t, loss, 1.0 / (hi - lo + 1)) : loss;
}

// ---------------------------------------------------------------------------
// Total loss

template <class S>
struct LossParts {
    Var<S> perceptual, equivariance, distance, consistency;
};

template <class S>
Var<S> total_loss(Tape<S>& t, const LossParts<S>& parts, const LossConfig& w) {
    Var<S> total = t.constant(Tensor<S>::scalar(S(0)));
    if (parts.perceptual.valid()) total = add(t, total, scale(t, parts.perceptual, w.lambda_p));
    if (parts.equivariance.valid())
        total = add(t, total, scale(t, parts.equivariance, w.lambda_eq));
    if (parts.distance.valid()) total = add(t, total, scale(t, parts.distance, w.lambda_dist));
    if (parts.consistency.valid())
        total = add(t, total, scale(t, parts.consistency, w.lambda_con));
    return total;
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
    double l1 = 0;
    double psnr = 0;
    double ssim = 0;
};

template <class S>
double metric_l1(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw DataError("metric_l1: shapes differ");
    double s = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        s += std::abs(static_cast<double>(a[i]) - b[i]);
    return s / a.numel();
}

// 10*log10(1/MSE) for images in [0,1]; capped at 100 dB once MSE drops below
// 1e-10 so identical images report a finite number.
template <class S>
double metric_psnr(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw DataError("metric_psnr: shapes differ");
    double mse = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        mse += d * d;
    }
    mse /= a.numel();
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

inline const std::array<double, 11>& ssim_window() {
    static const std::array<double, 11> w = [] {
        std::array<double, 11> g{};
        double sum = 0;
        for (int i = 0; i < 11; ++i) {
            const double d = i - 5;
            g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            sum += g[static_cast<std::size_t>(i)];
        }
        for (double& v : g) v /= sum;
        return g;
    }();
    return w;
}

// Horizontal then vertical pass of the separable Gaussian, valid region only.
template <class S>
std::vector<double> gauss_filter_valid(const S* img, int h, int w, int& oh, int& ow) {
    const auto& g = ssim_window();
    oh = h - 10;
    ow = w - 10;
    std::vector<double> rows(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < 11; ++i) s += g[static_cast<std::size_t>(i)] * img[y * w + x + i];
            rows[static_cast<std::size_t>(y) * ow + x] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < 11; ++i)
                s += g[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>(y + i) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    return out;
}

}  // namespace detail

// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
// valid positions only, averaged over batch and channels.
template <class S>
double metric_ssim(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw DataError("metric_ssim: shapes differ");
    check_rank(a, 4, "metric_ssim");
    const int bsz = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    if (h < 11 || w < 11) throw DataError("metric_ssim: image smaller than the 11x11 window");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    double total = 0;
    for (int n = 0; n < bsz; ++n)
        for (int ch = 0; ch < c; ++ch) {
            const S* pa = a.data() + (static_cast<std::int64_t>(n) * c + ch) * plane;
            const S* pb = b.data() + (static_cast<std::int64_t>(n) * c + ch) * plane;
            std::vector<S> aa(static_cast<std::size_t>(plane)), bb(aa.size()), ab(aa.size());
            for (std::int64_t i = 0; i < plane; ++i) {
                aa[static_cast<std::size_t>(i)] = pa[i] * pa[i];
                bb[static_cast<std::size_t>(i)] = pb[i] * pb[i];
                ab[static_cast<std::size_t>(i)] = pa[i] * pb[i];
            }
            int oh = 0, ow = 0;
            auto mu_a = detail::gauss_filter_valid(pa, h, w, oh, ow);
            auto mu_b = detail::gauss_filter_valid(pb, h, w, oh, ow);
            auto m_aa = detail::gauss_filter_valid(aa.data(), h, w, oh, ow);
            auto m_bb = detail::gauss_filter_valid(bb.data(), h, w, oh, ow);
            auto m_ab = detail::gauss_filter_valid(ab.data(), h, w, oh, ow);
            double sum = 0;
            for (std::size_t i = 0; i < mu_a.size(); ++i) {
                const double va = m_aa[i] - mu_a[i] * mu_a[i];
                const double vb = m_bb[i] - mu_b[i] * mu_b[i];
                const double cov = m_ab[i] - mu_a[i] * mu_b[i];
                sum += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
                       ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
            }
            total += sum / mu_a.size();
        }
    return total / (static_cast<double>(bsz) * c);
}

template <class S>
Metrics compute_metrics(const Tensor<S>& generated, const Tensor<S>& target) {
    return {metric_l1(generated, target), metric_psnr(generated, target),
            metric_ssim(generated, target)};
}

}  // namespace mcnet
