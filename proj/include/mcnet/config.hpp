#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mcnet/common.hpp"

// Run configuration: a plain key=value file plus command-line overrides.
// Defaults follow the full-scale model; the desk profile in configs/ shrinks
// everything to CPU-trainable sizes.

namespace mcnet {

struct ModelConfig {
    int keypoints = 15;
    int levels = 4;
    int base_channels = 64;
    int memory_c = 512;
    int memory_h = 32;
    int memory_w = 32;
    int image_size = 256;
    int pe_l = 0;
    bool attention_scaling = true;
    bool occlusion = false;
    bool fq_bias = true;
    int flow_size = 0;  // 0 resolves to image_size / 4
    int num_kernels = 4;
    int hg_width = 32;
    int hg_depth = 3;
    double tau = 0.1;
    double sigma = 0.1;
    double eps = 1e-8;
    // Runtime ablation switch, deliberately kept out of the serialized
    // description: a checkpoint always reloads with the memory path on.
    bool ablate_compensation = false;

    int level_channels(int level) const { return base_channels << level; }
    int kp_code_dim() const { return 2 * keypoints * (1 + 2 * pe_l); }
    int resolved_flow_size() const {
        return flow_size > 0 ? flow_size : std::max(image_size / 4, 8);
    }

    void validate() const {
        if (levels < 1) throw UsageError("model.levels must be at least 1");
        if (keypoints < 1) throw UsageError("model.keypoints must be at least 1");
        if (base_channels < 2)
            throw UsageError("model.base_channels must be at least 2 for the channel split");
        if (memory_c < 1 || memory_h < 1 || memory_w < 1)
            throw UsageError("model.memory dims must be positive");
        if (image_size < 1 || image_size % (1 << levels) != 0)
            throw UsageError("model.image_size must be a positive multiple of 2^levels");
        if (pe_l < 0) throw UsageError("model.pe_L must be non-negative");
        if (num_kernels < 1) throw UsageError("model.num_kernels must be at least 1");
        if (tau <= 0) throw UsageError("model.tau must be positive");
        if (sigma <= 0) throw UsageError("model.sigma must be positive");
        if (eps <= 0) throw UsageError("model.eps must be positive");
        const int fs = resolved_flow_size();
        int ratio = image_size / std::max(fs, 1);
        if (fs < 4 || fs * ratio != image_size || (ratio & (ratio - 1)) != 0)
            throw UsageError("model.flow_size must divide model.image_size by a power of two");
        if (hg_depth < 1 || hg_width < 1)
            throw UsageError("model.hg_width and model.hg_depth must be positive");
        if (fs % (1 << hg_depth) != 0)
            throw UsageError("model.flow_size must be divisible by 2^hg_depth");
    }

    // Numeric footprint for embedding in checkpoints, so inference commands
    // can rebuild the network without the original config file.
    std::vector<double> to_slots() const {
        return {1.0,
                static_cast<double>(keypoints),
                static_cast<double>(levels),
                static_cast<double>(base_channels),
                static_cast<double>(memory_c),
                static_cast<double>(memory_h),
                static_cast<double>(memory_w),
                static_cast<double>(image_size),
                static_cast<double>(pe_l),
                attention_scaling ? 1.0 : 0.0,
                occlusion ? 1.0 : 0.0,
                fq_bias ? 1.0 : 0.0,
                static_cast<double>(flow_size),
                static_cast<double>(num_kernels),
                static_cast<double>(hg_width),
                static_cast<double>(hg_depth),
                tau,
                sigma,
                eps};
    }

    static ModelConfig from_slots(const std::vector<double>& s) {
        if (s.size() != 19 || s[0] != 1.0)
            throw DataError("checkpoint carries an unknown model description layout");
        ModelConfig m;
        m.keypoints = static_cast<int>(s[1]);
        m.levels = static_cast<int>(s[2]);
        m.base_channels = static_cast<int>(s[3]);
        m.memory_c = static_cast<int>(s[4]);
        m.memory_h = static_cast<int>(s[5]);
        m.memory_w = static_cast<int>(s[6]);
        m.image_size = static_cast<int>(s[7]);
        m.pe_l = static_cast<int>(s[8]);
        m.attention_scaling = s[9] != 0.0;
        m.occlusion = s[10] != 0.0;
        m.fq_bias = s[11] != 0.0;
        m.flow_size = static_cast<int>(s[12]);
        m.num_kernels = static_cast<int>(s[13]);
        m.hg_width = static_cast<int>(s[14]);
        m.hg_depth = static_cast<int>(s[15]);
        m.tau = s[16];
        m.sigma = s[17];
        m.eps = s[18];
        return m;
    }
};

struct LossConfig {
    double lambda_p = 10.0;
    double lambda_eq = 10.0;
    double lambda_dist = 10.0;
    double lambda_con = 10.0;
    double alpha = 0.2;
    int con_level = -1;  // -1 averages the consistency term over all levels

    void validate(int levels) const {
        if (lambda_p < 0 || lambda_eq < 0 || lambda_dist < 0 || lambda_con < 0)
            throw UsageError("loss weights must be non-negative");
        if (alpha <= 0) throw UsageError("loss.alpha must be positive");
        if (con_level < -1 || con_level >= levels)
            throw UsageError("loss.con_level out of range");
    }
};

struct TrainConfig {
    int steps = 100;
    int batch = 8;
    double lr = 2e-4;
    std::uint64_t seed = 1;
    std::string precision = "f32";
    int ckpt_every = 500;
    int log_every = 1;
    std::string resume;  // checkpoint path; empty starts from scratch

    void validate() const {
        if (steps < 0) throw UsageError("train.steps must be non-negative");
        if (batch < 1) throw UsageError("train.batch must be positive");
        if (lr <= 0) throw UsageError("train.lr must be positive");
        if (precision != "f32" && precision != "f64")
            throw UsageError("train.precision must be f32 or f64");
        if (ckpt_every < 1 || log_every < 1)
            throw UsageError("train.ckpt_every and train.log_every must be positive");
    }
};

struct DataConfig {
    std::string manifest;
    std::string out_dir = "out";
};

struct RunConfig {
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;
    DataConfig data;

    void validate() const {
        model.validate();
        loss.validate(model.levels);
        train.validate();
    }

    void set(const std::string& key, const std::string& value);
};

namespace detail {

inline std::string trim(const std::string& s) {
    const char* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline int parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return static_cast<int>(v);
    } catch (const std::exception&) {
        throw UsageError("config key " + key + " expects an integer, got '" + value + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config key " + key + " expects a number, got '" + value + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on") return true;
    if (value == "false" || value == "0" || value == "off") return false;
    throw UsageError("config key " + key + " expects a boolean, got '" + value + "'");
}

inline std::uint64_t parse_seed(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
        throw UsageError("config key " + key + " expects an unsigned integer, got '" + value +
                         "'");
    }
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_int;
    if (key == "model.keypoints") model.keypoints = parse_int(key, value);
    else if (key == "model.levels") model.levels = parse_int(key, value);
    else if (key == "model.base_channels") model.base_channels = parse_int(key, value);
    else if (key == "model.memory.c") model.memory_c = parse_int(key, value);
    else if (key == "model.memory.h") model.memory_h = parse_int(key, value);
    else if (key == "model.memory.w") model.memory_w = parse_int(key, value);
    else if (key == "model.image_size") model.image_size = parse_int(key, value);
    else if (key == "model.pe_L") model.pe_l = parse_int(key, value);
    else if (key == "model.attention_scaling") model.attention_scaling = parse_bool(key, value);
    else if (key == "model.occlusion") model.occlusion = parse_bool(key, value);
    else if (key == "model.fq_bias") model.fq_bias = parse_bool(key, value);
    else if (key == "model.flow_size") model.flow_size = parse_int(key, value);
    else if (key == "model.num_kernels") model.num_kernels = parse_int(key, value);
    else if (key == "model.hg_width") model.hg_width = parse_int(key, value);
    else if (key == "model.hg_depth") model.hg_depth = parse_int(key, value);
    else if (key == "model.tau") model.tau = parse_double(key, value);
    else if (key == "model.sigma") model.sigma = parse_double(key, value);
    else if (key == "model.eps") model.eps = parse_double(key, value);
    else if (key == "loss.lambda_p") loss.lambda_p = parse_double(key, value);
    else if (key == "loss.lambda_eq") loss.lambda_eq = parse_double(key, value);
    else if (key == "loss.lambda_dist") loss.lambda_dist = parse_double(key, value);
    else if (key == "loss.lambda_con") loss.lambda_con = parse_double(key, value);
    else if (key == "loss.alpha") loss.alpha = parse_double(key, value);
    else if (key == "loss.con_level") loss.con_level = parse_int(key, value);
    else if (key == "train.steps") train.steps = parse_int(key, value);
    else if (key == "train.batch") train.batch = parse_int(key, value);
    else if (key == "train.lr") train.lr = parse_double(key, value);
    else if (key == "train.seed") train.seed = detail::parse_seed(key, value);
    else if (key == "train.precision") train.precision = value;
    else if (key == "train.ckpt_every") train.ckpt_every = parse_int(key, value);
    else if (key == "train.log_every") train.log_every = parse_int(key, value);
    else if (key == "train.resume") train.resume = value;
    else if (key == "data.manifest") data.manifest = value;
    else if (key == "data.out_dir") data.out_dir = value;
    else throw UsageError("unknown config key: " + key);
}

// One "key = value" assignment; '#' starts a comment. Blank lines skipped.
inline bool parse_config_line(const std::string& line, std::string& key, std::string& value) {
    std::string body = line.substr(0, line.find('#'));
    body = detail::trim(body);
    if (body.empty()) return false;
    auto eq = body.find('=');
    if (eq == std::string::npos)
        throw UsageError("config line is not key=value: '" + detail::trim(line) + "'");
    key = detail::trim(body.substr(0, eq));
    value = detail::trim(body.substr(eq + 1));
    if (key.empty()) throw UsageError("config line has an empty key");
    return true;
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file: " + path);
    std::string line, key, value;
    while (std::getline(in, line))
        if (parse_config_line(line, key, value)) cfg.set(key, value);
}

// Command-line --set overrides, applied after the file so they win.
inline void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
    for (const auto& s : sets) {
        std::string key, value;
        if (!parse_config_line(s, key, value))
            throw UsageError("empty override: '" + s + "'");
        cfg.set(key, value);
    }
}

}  // namespace mcnet
