#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mcnet/checkpoint.hpp"
#include "mcnet/dataset.hpp"
#include "mcnet/objectives.hpp"
#include "mcnet/pipeline.hpp"

// Optimization loop and model persistence. A checkpoint is self-describing:
// it carries the model description, the step counter, every parameter, and
// the optimizer moments, so a resumed run continues exactly where the
// previous one stopped.

namespace mcnet {

// ---------------------------------------------------------------------------
// Adam

template <class S>
class Adam {
  public:
    explicit Adam(double lr, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    std::int64_t steps_taken() const { return t_; }

    // One update over every model parameter, in traversal order. Parameters
    // that never entered the graph this step see a zero gradient.
    void step(Model<S>& model, Tape<S>& tape, const Lifter<S>& lift) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        model.visit_params([&](const std::string& name, Tensor<S>& p) {
            Tensor<S>& m = moment(m_, name, p);
            Tensor<S>& v = moment(v_, name, p);
            const Var<S> var = lift.var_of(p);
            const Tensor<S>* g = var.valid() ? &tape.grad(var) : nullptr;
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
                const double mi = b1_ * m[i] + (1.0 - b1_) * gi;
                const double vi = b2_ * v[i] + (1.0 - b2_) * gi * gi;
                m[i] = static_cast<S>(mi);
                v[i] = static_cast<S>(vi);
                p[i] -= static_cast<S>(lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
            }
            if (!p.all_finite())
                throw NumericError("parameter '" + name + "' became non-finite");
        });
    }

    void save_state(Checkpoint& ckpt, Model<S>& model) const {
        ckpt.add("opt.t", Tensor<double>{{1}, static_cast<double>(t_)});
        model.visit_params([&](const std::string& name, Tensor<S>&) {
            auto mi = m_.find(name);
            if (mi == m_.end()) return;
            ckpt.add("opt.m." + name, mi->second);
            ckpt.add("opt.v." + name, v_.at(name));
        });
    }

    void load_state(const Checkpoint& ckpt, Model<S>& model) {
        if (!ckpt.has("opt.t")) return;  // checkpoint from before the first step
        t_ = static_cast<std::int64_t>(ckpt.get<double>("opt.t")[0]);
        model.visit_params([&](const std::string& name, Tensor<S>& p) {
            if (!ckpt.has("opt.m." + name)) return;
            const Tensor<S>& m = ckpt.get<S>("opt.m." + name);
            const Tensor<S>& v = ckpt.get<S>("opt.v." + name);
            if (!m.same_shape(p) || !v.same_shape(p))
                throw DataError("optimizer state for '" + name + "' does not match the model");
            m_[name] = m;
            v_[name] = v;
        });
    }

  private:
    Tensor<S>& moment(std::unordered_map<std::string, Tensor<S>>& store, const std::string& name,
                      const Tensor<S>& p) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor<S>{p.shape()}).first;
        return it->second;
    }

    double lr_, b1_, b2_, eps_;
    std::int64_t t_ = 0;
    std::unordered_map<std::string, Tensor<S>> m_, v_;
};

// ---------------------------------------------------------------------------
// Model persistence

template <class S>
Checkpoint model_checkpoint(Model<S>& model, std::int64_t step) {
    Checkpoint ckpt;
    ckpt.add("__config__", Tensor<double>::from({static_cast<int>(model.cfg.to_slots().size())},
                                                model.cfg.to_slots()));
    ckpt.add("__step__", Tensor<double>{{1}, static_cast<double>(step)});
    model.visit_params([&](const std::string& name, Tensor<S>& p) { ckpt.add(name, p); });
    return ckpt;
}

inline ModelConfig checkpoint_config(const Checkpoint& ckpt) {
    if (!ckpt.has("__config__")) throw DataError("checkpoint has no model description");
    const Tensor<double>& slots = ckpt.get<double>("__config__");
    return ModelConfig::from_slots(
        std::vector<double>(slots.data(), slots.data() + slots.numel()));
}

inline std::int64_t checkpoint_step(const Checkpoint& ckpt) {
    return ckpt.has("__step__") ? static_cast<std::int64_t>(ckpt.get<double>("__step__")[0]) : 0;
}

// 0 when the parameters are stored as f32, 1 for f64.
inline int checkpoint_precision(const Checkpoint& ckpt) { return ckpt.dtype_of("memory.bank"); }

template <class S>
void load_model_params(const Checkpoint& ckpt, Model<S>& model) {
    model.visit_params([&](const std::string& name, Tensor<S>& p) {
        if (!ckpt.has(name)) throw DataError("checkpoint is missing tensor '" + name + "'");
        const Tensor<S>& src = ckpt.get<S>(name);
        if (!src.same_shape(p))
            throw DataError("checkpoint tensor '" + name + "' has shape " +
                            shape_str(src.shape()) + ", the model expects " +
                            shape_str(p.shape()));
        p = src;
    });
}

template <class S>
Model<S> model_from_checkpoint(const Checkpoint& ckpt) {
    Model<S> m = make_model<S>(checkpoint_config(ckpt), 0);
    load_model_params(ckpt, m);
    return m;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

// Shortest digit string that survives a text round trip, so identical runs
// write identical logs.
inline std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string step_ckpt_name(std::int64_t step) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "ckpt_%06lld.mcnc", static_cast<long long>(step));
    return buf;
}

}  // namespace detail

inline constexpr const char* kTrainCsvHeader =
    "step,l1,psnr,ssim,loss_total,loss_p,loss_eq,loss_dist,loss_con";

struct TrainResult {
    std::string csv_path;
    std::string ckpt_path;  // latest checkpoint
    std::int64_t start_step = 0, final_step = 0;
    double first_loss = 0, final_loss = 0;
    Metrics final_metrics;
};

// Runs cfg.train.steps optimization steps. Loss columns hold the raw part
// values; loss_total is the weighted sum that was optimized. Any NaN or
// infinity aborts with the offending step in the message.
template <class S>
TrainResult train_run(const RunConfig& cfg) {
    cfg.model.validate();
    cfg.loss.validate(cfg.model.levels);
    cfg.train.validate();
    if (cfg.data.manifest.empty()) throw UsageError("training needs data.manifest");
    namespace fs = std::filesystem;
    fs::create_directories(cfg.data.out_dir);

    const Manifest manifest = read_manifest(cfg.data.manifest);

    Model<S> model;
    Adam<S> adam(cfg.train.lr);
    std::int64_t start_step = 0;
    if (!cfg.train.resume.empty()) {
        const Checkpoint ckpt = load_checkpoint(cfg.train.resume);
        model = make_model<S>(checkpoint_config(ckpt), cfg.train.seed);
        load_model_params(ckpt, model);
        adam.load_state(ckpt, model);
        start_step = checkpoint_step(ckpt);
    } else {
        model = make_model<S>(cfg.model, cfg.train.seed);
    }

    const PerceptualExtractor<S> extractor = PerceptualExtractor<S>::make_default();
    // Separate streams for batches and augmentations; offset by the start
    // step so a resumed run does not replay the batches it already saw.
    Rng data_rng(cfg.train.seed + 1 + static_cast<std::uint64_t>(start_step));
    Rng aug_rng(cfg.train.seed + 2 + static_cast<std::uint64_t>(start_step));

    TrainResult result;
    result.start_step = start_step;
    result.csv_path = (fs::path(cfg.data.out_dir) / "train_log.csv").string();
    result.ckpt_path = (fs::path(cfg.data.out_dir) / "model.mcnc").string();

    const bool append = start_step > 0 && fs::exists(result.csv_path);
    std::ofstream csv(result.csv_path, append ? std::ios::app : std::ios::out);
    if (!csv) throw DataError("cannot write " + result.csv_path);
    if (!append) csv << kTrainCsvHeader << '\n';

    auto save = [&](std::int64_t step) {
        Checkpoint ckpt = model_checkpoint(model, step);
        adam.save_state(ckpt, model);
        save_checkpoint(result.ckpt_path, ckpt);
        save_checkpoint((fs::path(cfg.data.out_dir) / detail::step_ckpt_name(step)).string(),
                        ckpt);
    };

    if (cfg.train.steps == 0) {
        save(start_step);
        result.final_step = start_step;
        return result;
    }

    const std::int64_t last = start_step + cfg.train.steps;
    for (std::int64_t step = start_step + 1; step <= last; ++step) {
        try {
            std::vector<std::string> src_paths, drv_paths;
            for (int b = 0; b < cfg.train.batch; ++b) {
                const PairSample pair = sample_pair(manifest, PairMode::same, data_rng);
                src_paths.push_back(pair.source);
                drv_paths.push_back(pair.driving);
            }
            Tape<S> tape;
            Lifter<S> lift(true);
            const Var<S> src =
                tape.constant(stack_frames<S>(src_paths, cfg.model.image_size));
            const Var<S> drv =
                tape.constant(stack_frames<S>(drv_paths, cfg.model.image_size));

            AnimateOut<S> out = animate(tape, lift, model, src, drv);
            LossParts<S> parts;
            parts.perceptual = perceptual_loss(tape, extractor, out.img, drv);
            parts.equivariance =
                equivariance_loss(tape, lift, model, drv, Affine::random(aug_rng));
            parts.distance =
                scale(tape, add(tape, keypoint_distance_loss(tape, out.kp_s, cfg.loss.alpha),
                                keypoint_distance_loss(tape, out.kp_d, cfg.loss.alpha)),
                      S(0.5));
            parts.consistency = consistency_loss(tape, out.fv, out.fproj, cfg.loss.con_level);
            const Var<S> total = total_loss(tape, parts, cfg.loss);

            tape.backward(total);
            adam.step(model, tape, lift);

            const double total_v = static_cast<double>(tape.val(total)[0]);
            if (step == start_step + 1) result.first_loss = total_v;
            result.final_loss = total_v;

            if (step % cfg.train.log_every == 0 || step == last) {
                const Metrics m = compute_metrics(tape.val(out.img), tape.val(drv));
                result.final_metrics = m;
                csv << step << ',' << detail::g17(m.l1) << ',' << detail::g17(m.psnr) << ','
                    << detail::g17(m.ssim) << ',' << detail::g17(total_v) << ','
                    << detail::g17(static_cast<double>(tape.val(parts.perceptual)[0])) << ','
                    << detail::g17(static_cast<double>(tape.val(parts.equivariance)[0])) << ','
                    << detail::g17(static_cast<double>(tape.val(parts.distance)[0])) << ','
                    << detail::g17(static_cast<double>(tape.val(parts.consistency)[0])) << '\n';
                csv.flush();
            }
            if (step % cfg.train.ckpt_every == 0 || step == last) save(step);
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(step) + ": " + e.what());
        }
        result.final_step = step;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
    std::string csv_path;
    int pairs = 0;
    Metrics mean;  // same mode only
};

// same: frame 0 of each sequence drives against frames [driving_start..),
// which are ground truth, so the usual reconstruction metrics apply.
// cross: frame 0 of each sequence is driven by its successor sequence; with
// no ground truth the log keeps per-frame generation statistics instead.
template <class S>
EvalResult eval_run(Model<S>& model, const Manifest& manifest, PairMode mode,
                    const std::string& csv_path, int driving_start = 1) {
    std::ofstream csv(csv_path);
    if (!csv) throw DataError("cannot write " + csv_path);

    EvalResult result;
    result.csv_path = csv_path;
    double sum_l1 = 0, sum_psnr = 0, sum_ssim = 0;

    auto run_pair = [&](const std::string& src_path, const std::string& drv_path) {
        Tape<S> tape;
        Lifter<S> lift(false);
        const Var<S> src = tape.constant(stack_frames<S>({src_path}, model.cfg.image_size));
        const Var<S> drv = tape.constant(stack_frames<S>({drv_path}, model.cfg.image_size));
        return std::pair<Tensor<S>, Tensor<S>>(tape.val(animate(tape, lift, model, src, drv).img),
                                               tape.val(drv));
    };

    if (mode == PairMode::same) {
        csv << "seq,frame,l1,psnr,ssim\n";
        for (std::size_t s = 0; s < manifest.sequences.size(); ++s) {
            const auto& seq = manifest.sequences[s];
            if (static_cast<int>(seq.size()) <= driving_start)
                throw DataError("sequence " + std::to_string(s) + " has no frames past index " +
                                std::to_string(driving_start - 1));
            for (std::size_t k = static_cast<std::size_t>(driving_start); k < seq.size(); ++k) {
                const auto [img, truth] = run_pair(seq[0], seq[k]);
                const Metrics m = compute_metrics(img, truth);
                csv << s << ',' << k << ',' << detail::g17(m.l1) << ',' << detail::g17(m.psnr)
                    << ',' << detail::g17(m.ssim) << '\n';
                sum_l1 += m.l1;
                sum_psnr += m.psnr;
                sum_ssim += m.ssim;
                ++result.pairs;
            }
        }
        if (result.pairs > 0)
            result.mean = {sum_l1 / result.pairs, sum_psnr / result.pairs,
                           sum_ssim / result.pairs};
    } else {
        if (manifest.sequences.size() < 2)
            throw DataError("cross-sequence evaluation needs at least 2 sequences");
        csv << "source_seq,driving_seq,frame,gen_mean,gen_std\n";
        const std::size_t n = manifest.sequences.size();
        for (std::size_t s = 0; s < n; ++s) {
            const auto& drv_seq = manifest.sequences[(s + 1) % n];
            for (std::size_t k = 0; k < drv_seq.size(); ++k) {
                const auto [img, truth] = run_pair(manifest.sequences[s][0], drv_seq[k]);
                (void)truth;
                double mean = 0;
                for (std::int64_t i = 0; i < img.numel(); ++i) mean += img[i];
                mean /= static_cast<double>(img.numel());
                double var = 0;
                for (std::int64_t i = 0; i < img.numel(); ++i)
                    var += (img[i] - mean) * (img[i] - mean);
                var /= static_cast<double>(img.numel());
                csv << s << ',' << (s + 1) % n << ',' << k << ',' << detail::g17(mean) << ','
                    << detail::g17(std::sqrt(var)) << '\n';
                ++result.pairs;
            }
        }
    }
    return result;
}

}  // namespace mcnet
