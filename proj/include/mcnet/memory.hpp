#pragma once

#include "mcnet/image_ops.hpp"
#include "mcnet/params.hpp"

// Global meta memory with identity-conditioned retrieval and cross-attention
// compensation. One memory bank is shared across all identities; a per-image
// identity code turns it into an identity-specific memory via a modulated,
// demodulated 3x3 convolution, and warped features query it through
// attention to fill in what warping lost.

namespace mcnet {

template <class S>
struct MetaMemory {
    Tensor<S> bank;  // [Cm,Hm,Wm]
    void visit(const std::string& prefix, const ParamFn<S>& fn) { fn(prefix + ".bank", bank); }
};

template <class S>
MetaMemory<S> make_meta_memory(Rng& rng, int c, int h, int w) {
    MetaMemory<S> m;
    m.bank = Tensor<S>{{c, h, w}};
    for (std::int64_t i = 0; i < m.bank.numel(); ++i)
        m.bank[i] = static_cast<S>(rng.normal() * 0.02);
    return m;
}

// kp:[B,K,2] -> [B, 2K*(1+2L)]. Each coordinate v expands to
// [v, sin(pi v), cos(pi v), sin(2 pi v), cos(2 pi v), ...] up to 2^(L-1).
// L = 0 is a plain flatten.
template <class S>
Var<S> keypoint_pe(Tape<S>& t, Var<S> kp, int pe_l) {
    const Tensor<S>& kv = t.val(kp);
    check_rank(kv, 3, "keypoint_pe");
    if (kv.dim(2) != 2) throw DataError("keypoint_pe: keypoints must be [B,K,2]");
    if (pe_l < 0) throw DataError("keypoint_pe: negative frequency count");
    const int b = kv.dim(0), k = kv.dim(1), d = 1 + 2 * pe_l;
    Tensor<S> out{{b, 2 * k * d}};
    for (int n = 0; n < b; ++n)
        for (int c = 0; c < 2 * k; ++c) {
            const double v = kv[static_cast<std::int64_t>(n) * 2 * k + c];
            S* op = out.data() + (static_cast<std::int64_t>(n) * 2 * k + c) * d;
            op[0] = static_cast<S>(v);
            for (int l = 0; l < pe_l; ++l) {
                const double f = std::ldexp(kPi, l);  // 2^l * pi
                op[1 + 2 * l] = static_cast<S>(std::sin(f * v));
                op[2 + 2 * l] = static_cast<S>(std::cos(f * v));
            }
        }
    return t.emplace("keypoint_pe", std::move(out), {kp},
                     [kp, b, k, d, pe_l](Tape<S>& tp, Var<S> self) {
                         Tensor<S>* gk = tp.grad_buf(kp);
                         if (!gk) return;
                         const Tensor<S>& g = tp.grad(self);
                         const Tensor<S>& kv = tp.val(kp);
                         for (std::int64_t c = 0; c < static_cast<std::int64_t>(b) * 2 * k; ++c) {
                             const double v = kv[c];
                             const S* gp = g.data() + c * d;
                             double acc = gp[0];
                             for (int l = 0; l < pe_l; ++l) {
                                 const double f = std::ldexp(kPi, l);
                                 acc += f * (gp[1 + 2 * l] * std::cos(f * v) -
                                             gp[2 + 2 * l] * std::sin(f * v));
                             }
                             (*gk)[c] += static_cast<S>(acc);
                         }
                     });
}

// Per-sample style applied to a shared conv kernel, then re-normalized so
// each output channel's modulated kernel has unit energy:
//   m[j,i,k]   = s[i] * w[j,i,k]
//   out[j,i,k] = m[j,i,k] / sqrt(sum_{i,k} m[j,i,k]^2 + eps)
// w:[Co,Ci,kh,kw], s:[B,Ci] -> [B,Co,Ci,kh,kw].
template <class S>
Var<S> modulate_demodulate(Tape<S>& t, Var<S> w, Var<S> s, double eps = 1e-8) {
    const Tensor<S>& wv = t.val(w);
    const Tensor<S>& sv = t.val(s);
    check_rank(wv, 4, "modulate_demodulate weight");
    check_rank(sv, 2, "modulate_demodulate style");
    if (sv.dim(1) != wv.dim(1))
        throw DataError("modulate_demodulate: style width " + std::to_string(sv.dim(1)) +
                        " does not match input channels " + std::to_string(wv.dim(1)));
    const int b = sv.dim(0), co = wv.dim(0), ci = wv.dim(1);
    const std::int64_t kk = static_cast<std::int64_t>(wv.dim(2)) * wv.dim(3);
    const std::int64_t ikk = ci * kk;
    Tensor<S> out{{b, co, ci, wv.dim(2), wv.dim(3)}};
    for (int n = 0; n < b; ++n)
        for (int j = 0; j < co; ++j) {
            S* op = out.data() + (static_cast<std::int64_t>(n) * co + j) * ikk;
            const S* wp = wv.data() + j * ikk;
            double sq = 0;
            for (int i = 0; i < ci; ++i) {
                const double si = sv[static_cast<std::int64_t>(n) * ci + i];
                for (std::int64_t q = 0; q < kk; ++q) {
                    const double m = si * wp[i * kk + q];
                    op[i * kk + q] = static_cast<S>(m);
                    sq += m * m;
                }
            }
            const S inv = static_cast<S>(1.0 / std::sqrt(sq + eps));
            for (std::int64_t q = 0; q < ikk; ++q) op[q] *= inv;
        }
    return t.emplace(
        "modulate_demodulate", std::move(out), {w, s},
        [w, s, b, co, ci, kk, ikk, eps](Tape<S>& tp, Var<S> self) {
            const Tensor<S>& g = tp.grad(self);
            const Tensor<S>& wv = tp.val(w);
            const Tensor<S>& sv = tp.val(s);
            Tensor<S>* gw = tp.grad_buf(w);
            Tensor<S>* gs = tp.grad_buf(s);
            if (!gw && !gs) return;
            std::vector<double> m(static_cast<std::size_t>(ikk));
            for (int n = 0; n < b; ++n)
                for (int j = 0; j < co; ++j) {
                    const S* wp = wv.data() + j * ikk;
                    const S* gp = g.data() + (static_cast<std::int64_t>(n) * co + j) * ikk;
                    double sq = 0;
                    for (int i = 0; i < ci; ++i) {
                        const double si = sv[static_cast<std::int64_t>(n) * ci + i];
                        for (std::int64_t q = 0; q < kk; ++q) {
                            m[static_cast<std::size_t>(i * kk + q)] = si * wp[i * kk + q];
                            sq += m[static_cast<std::size_t>(i * kk + q)] *
                                  m[static_cast<std::size_t>(i * kk + q)];
                        }
                    }
                    const double denom = std::sqrt(sq + eps);
                    double dot = 0;
                    for (std::int64_t q = 0; q < ikk; ++q)
                        dot += static_cast<double>(gp[q]) * m[static_cast<std::size_t>(q)];
                    const double inv = 1.0 / denom;
                    const double inv3 = inv * inv * inv;
                    for (int i = 0; i < ci; ++i) {
                        const double si = sv[static_cast<std::int64_t>(n) * ci + i];
                        double dsi = 0;
                        for (std::int64_t q = 0; q < kk; ++q) {
                            const double dm = gp[i * kk + q] * inv -
                                              dot * m[static_cast<std::size_t>(i * kk + q)] * inv3;
                            if (gw) (*gw)[j * ikk + i * kk + q] += static_cast<S>(dm * si);
                            dsi += dm * wp[i * kk + q];
                        }
                        if (gs) (*gs)[static_cast<std::int64_t>(n) * ci + i] += static_cast<S>(dsi);
                    }
                }
        });
}

// Runs the shared memory bank through each sample's conditioned kernel.
// mem:[Cm,Hm,Wm], w:[B,Cm,Cm,kh,kw] -> [B,Cm,Hm,Wm].
template <class S>
Var<S> condition_memory(Tape<S>& t, Var<S> mem, Var<S> w) {
    const Tensor<S>& mv = t.val(mem);
    check_rank(mv, 3, "condition_memory");
    Var<S> m4 = reshape(t, mem, {1, mv.dim(0), mv.dim(1), mv.dim(2)});
    return conv2d_per_sample(t, m4, w, 1, t.val(w).dim(3) / 2);
}

template <class S>
struct DynConvParams {
    MlpParams<S> attn;  // gap width -> n
    Tensor<S> bank;     // [n,Co,Ci,k,k]
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        attn.visit(prefix + ".attn", fn);
        fn(prefix + ".bank", bank);
    }
};

template <class S>
DynConvParams<S> make_dyn_conv(Rng& rng, int gap_dim, int n, int cin, int cout, int k) {
    DynConvParams<S> p;
    p.attn = make_mlp<S>(rng, {gap_dim, std::max(gap_dim / 2, 4), n});
    p.bank = Tensor<S>{{n, cout, cin, k, k}};
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    for (std::int64_t i = 0; i < p.bank.numel(); ++i)
        p.bank[i] = static_cast<S>(rng.normal() * std);
    return p;
}

// Convolution with a kernel mixed on the fly: a softmax over n candidate
// kernels, attended from a per-sample code, yields one kernel per sample.
template <class S>
Var<S> dynamic_conv(Tape<S>& t, Lifter<S>& L, Var<S> x, Var<S> code, DynConvParams<S>& p) {
    const int n = p.bank.dim(0);
    Var<S> att = softmax(t, apply_mlp(t, L, code, p.attn), 1);  // [B,n]
    Var<S> bank = L(t, p.bank);
    Var<S> bank2d = reshape(t, bank, {n, static_cast<int>(p.bank.numel() / n)});
    Var<S> mixed = matmul(t, att, bank2d);
    Var<S> w5 = reshape(t, mixed, {t.val(att).dim(0), p.bank.dim(1), p.bank.dim(2), p.bank.dim(3),
                                   p.bank.dim(4)});
    return conv2d_per_sample(t, x, w5, 1, p.bank.dim(3) / 2);
}

// Attention read-out. fq:[B,C,Nq], fk:[B,C,Nk], fv:[B,C,Nk] -> [B,C,Nq];
// scores are fq.fk dot products over channels, optionally scaled by
// 1/sqrt(C), softmaxed over Nk.
template <class S>
Var<S> cross_attention(Tape<S>& t, Var<S> fq, Var<S> fk, Var<S> fv, bool scaled) {
    const Tensor<S>& qv = t.val(fq);
    const Tensor<S>& kv = t.val(fk);
    const Tensor<S>& vv = t.val(fv);
    check_rank(qv, 3, "cross_attention query");
    if (kv.rank() != 3 || vv.rank() != 3 || kv.dim(1) != qv.dim(1) || !kv.same_shape(vv))
        throw DataError("cross_attention: shapes " + shape_str(qv.shape()) + ", " +
                        shape_str(kv.shape()) + ", " + shape_str(vv.shape()) + " do not line up");
    const int channels = qv.dim(1);
    Var<S> scores = bmm(t, permute(t, fq, {0, 2, 1}), fk);  // [B,Nq,Nk]
    if (scaled) scores = scale(t, scores, 1.0 / std::sqrt(static_cast<double>(channels)));
    Var<S> att = softmax(t, scores, 2);
    return bmm(t, fv, permute(t, att, {0, 2, 1}));  // [B,C,Nq]
}

template <class S>
struct ConditionParams {
    ConvParams<S> proj;   // 1x1: level channels -> Cm
    MlpParams<S> id_mlp;  // Cm + kp code width -> Cm
    Tensor<S> mem_w;      // [Cm,Cm,3,3] shared conditioning kernel
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        proj.visit(prefix + ".proj", fn);
        id_mlp.visit(prefix + ".id", fn);
        fn(prefix + ".mem_w", mem_w);
    }
};

template <class S>
struct ReadoutParams {
    DynConvParams<S> key, value;
    ConvParams<S> query;  // 1x1: Cm -> Cm
    ConvParams<S> out;    // 1x1: Cm -> level channels
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        key.visit(prefix + ".key", fn);
        value.visit(prefix + ".value", fn);
        query.visit(prefix + ".query", fn);
        out.visit(prefix + ".out", fn);
    }
};

template <class S>
struct CompBlockParams {
    ConditionParams<S> cond;
    ReadoutParams<S> readout;
    void visit(const std::string& prefix, const ParamFn<S>& fn) {
        cond.visit(prefix + ".cond", fn);
        readout.visit(prefix + ".readout", fn);
    }
};

// Warped features are split by channel: the first half passes through
// untouched, the second half is projected and compensated from memory, and
// the two halves are concatenated back to the original channel count.
inline int split_keep_channels(int level_channels) { return (level_channels + 1) / 2; }

template <class S>
CompBlockParams<S> make_comp_block(Rng& rng, int level_channels, int cm, int kp_code_dim,
                                   int n_kernels) {
    if (level_channels < 2)
        throw DataError("make_comp_block: cannot channel-split " +
                        std::to_string(level_channels) + " channels");
    const int keep = split_keep_channels(level_channels);
    CompBlockParams<S> p;
    p.cond.proj = make_conv<S>(rng, level_channels - keep, cm, 1);
    p.cond.id_mlp = make_mlp<S>(rng, {cm + kp_code_dim, cm, cm, cm});
    p.cond.mem_w = Tensor<S>{{cm, cm, 3, 3}};
    const double std = std::sqrt(2.0 / (static_cast<double>(cm) * 9));
    for (std::int64_t i = 0; i < p.cond.mem_w.numel(); ++i)
        p.cond.mem_w[i] = static_cast<S>(rng.normal() * std);
    p.readout.key = make_dyn_conv<S>(rng, cm, n_kernels, cm, cm, 3);
    p.readout.value = make_dyn_conv<S>(rng, cm, n_kernels, cm, cm, 3);
    p.readout.query = make_conv<S>(rng, cm, cm, 1);
    p.readout.out = make_conv<S>(rng, cm, level_channels - keep, 1);
    return p;
}

// Identity code from globally pooled projected features plus the keypoint
// layout code. Both inputs are expected pre-detached by the caller when the
// code should not train the encoder.
template <class S>
Var<S> encode_identity(Tape<S>& t, Lifter<S>& L, Var<S> proj, Var<S> kp_code, MlpParams<S>& mlp) {
    Var<S> gap = global_avg_pool(t, proj);
    return apply_mlp(t, L, concat(t, {gap, kp_code}, 1), mlp);
}

template <class S>
struct CompensateOut {
    Var<S> fcpt;    // [B, level_channels, Hi, Wi]: compensation then kept half
    Var<S> fproj;   // [B, Cm, Hi, Wi]
    Var<S> fvalue;  // [B, Cm, Hm, Wm]
    Var<S> ms;      // [B, Cm, Hm, Wm] conditioned memory read at this level
};

struct CompensateOpts {
    double eps = 1e-8;
    bool attention_scaling = true;
    bool fq_bias = true;
    // Zeroes the retrieved compensation so only the kept half carries signal.
    // Ablation switch for measuring what the memory path contributes.
    bool ablate_compensation = false;
};

// One memory compensation block at one pyramid level. The identity code and
// the dynamic-kernel attention read the projected features through a detach,
// so the consistency objective trains the memory path only; the query path
// stays attached and trains the encoder through reconstruction.
template <class S>
CompensateOut<S> compensate_level(Tape<S>& t, Lifter<S>& L, Var<S> fw, Var<S> kp_code_detached,
                                  MetaMemory<S>& mem, CompBlockParams<S>& p,
                                  const CompensateOpts& opts = {}) {
    const Tensor<S>& fv = t.val(fw);
    check_rank(fv, 4, "compensate_level");
    const int b = fv.dim(0), c = fv.dim(1), hi = fv.dim(2), wi = fv.dim(3);
    const int keep_c = split_keep_channels(c);
    const int cm = p.cond.mem_w.dim(0);
    const int hm = mem.bank.dim(1), wm = mem.bank.dim(2);

    Var<S> keep = narrow(t, fw, 1, 0, keep_c);
    Var<S> modulated_half = narrow(t, fw, 1, keep_c, c - keep_c);
    Var<S> proj = apply_conv(t, L, modulated_half, p.cond.proj);
    Var<S> proj_d = detach(t, proj);

    Var<S> sid = encode_identity(t, L, proj_d, kp_code_detached, p.cond.id_mlp);
    Var<S> omega = modulate_demodulate(t, L(t, p.cond.mem_w), sid, opts.eps);
    Var<S> ms = condition_memory(t, L(t, mem.bank), omega);

    Var<S> gap_d = global_avg_pool(t, proj_d);
    Var<S> fk_map = dynamic_conv(t, L, ms, gap_d, p.readout.key);
    Var<S> fv_map = dynamic_conv(t, L, ms, gap_d, p.readout.value);

    Var<S> fq_pre = opts.fq_bias
                        ? conv2d(t, proj, L(t, p.readout.query.w), L(t, p.readout.query.b), 1, 0)
                        : conv2d(t, proj, L(t, p.readout.query.w), Var<S>{}, 1, 0);
    Var<S> fq = relu(t, fq_pre);

    Var<S> fq_flat = reshape(t, fq, {b, cm, hi * wi});
    Var<S> fk_flat = reshape(t, fk_map, {b, cm, hm * wm});
    Var<S> fv_flat = reshape(t, fv_map, {b, cm, hm * wm});
    Var<S> fca = cross_attention(t, fq_flat, fk_flat, fv_flat, opts.attention_scaling);
    Var<S> fca_map = reshape(t, fca, {b, cm, hi, wi});
    Var<S> compensation = apply_conv(t, L, fca_map, p.readout.out);
    if (opts.ablate_compensation) compensation = scale(t, compensation, S(0));

    return {concat(t, {compensation, keep}, 1), proj, fv_map, ms};
}

}  // namespace mcnet
