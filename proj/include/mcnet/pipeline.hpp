#pragma once

#include "mcnet/config.hpp"
#include "mcnet/memory.hpp"
#include "mcnet/motion.hpp"

// Full network assembly: keypoints on both images drive a dense flow, the
// source is encoded into a feature pyramid, each level is warped and then
// compensated from the shared memory, and a decoder walks back up from the
// deepest level to the synthesized frame.

namespace mcnet {

template <class S>
struct Model {
    ModelConfig cfg;
    KeypointDetectorParams<S> kp;
    DenseMotionParams<S> motion;
    std::vector<ConvParams<S>> enc;        // enc[0]: 3 -> c0, enc[l]: c_{l-1} -> c_l
    std::vector<CompBlockParams<S>> comp;  // one block per level, all on one memory
    std::vector<ConvParams<S>> dec;        // dec[j] consumes level N-1-j
    ConvParams<S> out_conv;
    MetaMemory<S> memory;

    // Stable, documented traversal order; checkpoints and the optimizer
    // both rely on it.
    void visit_params(const ParamFn<S>& fn) {
        kp.visit("kp", fn);
        motion.visit("motion", fn);
        for (std::size_t l = 0; l < enc.size(); ++l)
            enc[l].visit("enc" + std::to_string(l), fn);
        for (std::size_t l = 0; l < comp.size(); ++l)
            comp[l].visit("comp" + std::to_string(l), fn);
        for (std::size_t j = 0; j < dec.size(); ++j)
            dec[j].visit("dec" + std::to_string(j), fn);
        out_conv.visit("out", fn);
        memory.visit("memory", fn);
    }

    std::int64_t count_parameters() {
        std::int64_t n = 0;
        visit_params([&](const std::string&, Tensor<S>& p) { n += p.numel(); });
        return n;
    }
};

template <class S>
Model<S> make_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model<S> m;
    m.cfg = cfg;
    Rng rng(seed);
    const int n = cfg.levels;
    m.kp = make_keypoint_detector<S>(rng, cfg.keypoints, cfg.hg_width, cfg.hg_depth);
    m.motion = make_dense_motion<S>(rng, cfg.keypoints, cfg.hg_width, cfg.hg_depth);
    m.enc.push_back(make_conv<S>(rng, 3, cfg.level_channels(0), 3));
    for (int l = 1; l < n; ++l)
        m.enc.push_back(make_conv<S>(rng, cfg.level_channels(l - 1), cfg.level_channels(l), 3));
    for (int l = 0; l < n; ++l)
        m.comp.push_back(make_comp_block<S>(rng, cfg.level_channels(l), cfg.memory_c,
                                            cfg.kp_code_dim(), cfg.num_kernels));
    for (int l = n - 1; l >= 1; --l) {
        const int cin = l == n - 1 ? cfg.level_channels(l) : 2 * cfg.level_channels(l);
        m.dec.push_back(make_conv<S>(rng, cin, cfg.level_channels(l - 1), 3));
    }
    m.out_conv = make_conv<S>(rng, n > 1 ? 2 * cfg.level_channels(0) : cfg.level_channels(0), 3, 3);
    m.memory = make_meta_memory<S>(rng, cfg.memory_c, cfg.memory_h, cfg.memory_w);
    return m;
}

// Source feature pyramid: level l halves the spatial size l times and holds
// base_channels * 2^l channels.
template <class S>
std::vector<Var<S>> encode(Tape<S>& t, Lifter<S>& L, Model<S>& m, Var<S> image) {
    std::vector<Var<S>> feats;
    feats.reserve(m.enc.size());
    Var<S> f = relu(t, apply_conv(t, L, image, m.enc[0]));
    feats.push_back(f);
    for (std::size_t l = 1; l < m.enc.size(); ++l) {
        f = relu(t, apply_conv(t, L, avg_pool2x(t, f), m.enc[l]));
        feats.push_back(f);
    }
    return feats;
}

template <class S>
struct AnimateOut {
    Var<S> img;                 // [B,3,H,W] in [0,1]
    Var<S> kp_s, kp_d;          // [B,K,2]
    Var<S> flow;                // [B,Hf,Wf,2]
    Var<S> masks;               // [B,K+1,Hf,Wf]
    Var<S> occlusion;           // invalid unless enabled
    std::vector<Var<S>> fe;     // encoder features per level
    std::vector<Var<S>> fw;     // warped features per level
    std::vector<Var<S>> fcpt;   // compensated features per level
    std::vector<Var<S>> fproj;  // projected features per level (consistency target)
    std::vector<Var<S>> fv;     // memory value maps per level (consistency source)
    std::vector<Var<S>> ms;     // conditioned memory per level
};

// Decoder: the deepest compensated level starts the walk; every step is one
// 3x3 convolution + ReLU followed by a 2x upsample, with the level's
// compensated features concatenated in from the second step on. The final
// full-resolution pair feeds a convolution + sigmoid.
template <class S>
Var<S> decode(Tape<S>& t, Lifter<S>& L, Model<S>& m, const std::vector<Var<S>>& fcpt) {
    const int n = static_cast<int>(fcpt.size());
    if (n == 1) return sigmoid(t, apply_conv(t, L, fcpt[0], m.out_conv));
    Var<S> d = fcpt[n - 1];
    for (int l = n - 1; l >= 1; --l) {
        Var<S> x = l == n - 1 ? d : concat(t, {d, fcpt[l]}, 1);
        d = upsample_nearest2x(t, relu(t, apply_conv(t, L, x, m.dec[n - 1 - l])));
    }
    return sigmoid(t, apply_conv(t, L, concat(t, {d, fcpt[0]}, 1), m.out_conv));
}

// One full animation pass. The driving frame contributes only its keypoints;
// every appearance bit in the output comes from the source or the memory.
template <class S>
AnimateOut<S> animate(Tape<S>& t, Lifter<S>& L, Model<S>& m, Var<S> source, Var<S> driving) {
    const Tensor<S>& sv = t.val(source);
    const Tensor<S>& dv = t.val(driving);
    check_rank(sv, 4, "animate source");
    if (!sv.same_shape(dv))
        throw DataError("animate: source " + shape_str(sv.shape()) + " and driving " +
                        shape_str(dv.shape()) + " differ");
    if (sv.dim(1) != 3 || sv.dim(2) != m.cfg.image_size || sv.dim(3) != m.cfg.image_size)
        throw DataError("animate: expected [B,3," + std::to_string(m.cfg.image_size) + "," +
                        std::to_string(m.cfg.image_size) + "], got " + shape_str(sv.shape()));

    const int fs = m.cfg.resolved_flow_size();
    AnimateOut<S> out;
    out.kp_s = detect_keypoints(t, L, source, m.kp, fs, m.cfg.tau).kp;
    out.kp_d = detect_keypoints(t, L, driving, m.kp, fs, m.cfg.tau).kp;
    auto dm = dense_motion(t, L, source, out.kp_s, out.kp_d, m.motion, fs, m.cfg.sigma,
                           m.cfg.occlusion);
    out.flow = dm.flow;
    out.masks = dm.masks;
    out.occlusion = dm.occlusion;

    out.fe = encode(t, L, m, source);
    // The identity code never trains the keypoint detector; that path is for
    // the memory side only.
    Var<S> kp_code = detach(t, keypoint_pe(t, out.kp_s, m.cfg.pe_l));
    CompensateOpts opts;
    opts.eps = m.cfg.eps;
    opts.attention_scaling = m.cfg.attention_scaling;
    opts.fq_bias = m.cfg.fq_bias;
    opts.ablate_compensation = m.cfg.ablate_compensation;
    for (int l = 0; l < m.cfg.levels; ++l) {
        Var<S> w = warp_feature(t, out.fe[static_cast<std::size_t>(l)], dm.flow, dm.occlusion);
        auto comp = compensate_level(t, L, w, kp_code, m.memory, m.comp[static_cast<std::size_t>(l)],
                                     opts);
        out.fw.push_back(w);
        out.fcpt.push_back(comp.fcpt);
        out.fproj.push_back(comp.fproj);
        out.fv.push_back(comp.fvalue);
        out.ms.push_back(comp.ms);
    }
    out.img = decode(t, L, m, out.fcpt);
    return out;
}

}  // namespace mcnet
