#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mcnet/common.hpp"
#include "mcnet/image_io.hpp"
#include "mcnet/synthetic.hpp"
#include "mcnet/tensor.hpp"

// Frame manifests: one frame path per line, a blank line between sequences.
// Relative paths are resolved against the manifest's own directory, so a
// corpus can be moved around as a unit.

namespace mcnet {

struct Manifest {
    std::vector<std::vector<std::string>> sequences;
};

inline Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();

    Manifest m;
    std::vector<std::string> cur;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) {
            if (!cur.empty()) m.sequences.push_back(std::move(cur));
            cur.clear();
            continue;
        }
        std::filesystem::path p(line);
        cur.push_back(p.is_absolute() ? p.string() : (base / p).string());
    }
    if (!cur.empty()) m.sequences.push_back(std::move(cur));
    if (m.sequences.empty()) throw DataError("empty manifest: " + path);
    return m;
}

inline void write_manifest(const std::string& path, const Manifest& m) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    for (std::size_t s = 0; s < m.sequences.size(); ++s) {
        if (s > 0) out << '\n';
        for (const std::string& frame : m.sequences[s]) out << frame << '\n';
    }
    if (!out) throw DataError("short write: " + path);
}

enum class PairMode { same, cross };

inline PairMode parse_pair_mode(const std::string& s) {
    if (s == "same") return PairMode::same;
    if (s == "cross") return PairMode::cross;
    throw UsageError("unknown mode '" + s + "' (want same or cross)");
}

struct PairSample {
    int source_seq = 0, driving_seq = 0;
    int source_frame = 0, driving_frame = 0;
    std::string source, driving;
};

// same: source and driving are two distinct frames of one sequence, so the
// driving frame doubles as ground truth. cross: one frame each from two
// distinct sequences.
inline PairSample sample_pair(const Manifest& m, PairMode mode, Rng& rng) {
    const int nseq = static_cast<int>(m.sequences.size());
    PairSample s;
    if (mode == PairMode::same) {
        for (const auto& seq : m.sequences)
            if (seq.size() < 2)
                throw DataError("same-sequence sampling needs at least 2 frames per sequence");
        s.source_seq = s.driving_seq = static_cast<int>(rng.below(nseq));
        const int len = static_cast<int>(m.sequences[s.source_seq].size());
        s.source_frame = static_cast<int>(rng.below(len));
        s.driving_frame = static_cast<int>(rng.below(len - 1));
        if (s.driving_frame >= s.source_frame) ++s.driving_frame;
    } else {
        if (nseq < 2) throw DataError("cross-sequence sampling needs at least 2 sequences");
        s.source_seq = static_cast<int>(rng.below(nseq));
        s.driving_seq = static_cast<int>(rng.below(nseq - 1));
        if (s.driving_seq >= s.source_seq) ++s.driving_seq;
        s.source_frame = static_cast<int>(rng.below(static_cast<int>(m.sequences[s.source_seq].size())));
        s.driving_frame =
            static_cast<int>(rng.below(static_cast<int>(m.sequences[s.driving_seq].size())));
    }
    s.source = m.sequences[s.source_seq][s.source_frame];
    s.driving = m.sequences[s.driving_seq][s.driving_frame];
    return s;
}

// Loads frames into one [B,3,H,W] batch. All frames must share one size; pass
// expect_size >= 0 to also pin that size.
template <class S>
Tensor<S> stack_frames(const std::vector<std::string>& paths, int expect_size = -1) {
    if (paths.empty()) throw DataError("stack_frames: no frames given");
    std::vector<Tensor<S>> imgs;
    imgs.reserve(paths.size());
    for (const std::string& p : paths) imgs.push_back(read_ppm<S>(p));
    const int h = imgs[0].dim(1), w = imgs[0].dim(2);
    if (expect_size >= 0 && (h != expect_size || w != expect_size))
        throw DataError("frame " + paths[0] + " is " + std::to_string(w) + "x" +
                        std::to_string(h) + ", expected " + std::to_string(expect_size) + "x" +
                        std::to_string(expect_size));
    const int b = static_cast<int>(paths.size());
    Tensor<S> batch{{b, 3, h, w}};
    for (int n = 0; n < b; ++n) {
        if (imgs[n].dim(1) != h || imgs[n].dim(2) != w)
            throw DataError("frame " + paths[n] + " does not match the batch size " +
                            std::to_string(w) + "x" + std::to_string(h));
        std::copy(imgs[n].data(), imgs[n].data() + imgs[n].numel(),
                  batch.data() + static_cast<std::int64_t>(n) * imgs[n].numel());
    }
    return batch;
}

// Renders a corpus under out_dir: seq_XXX/frame_XXX.ppm plus manifest.txt
// with paths relative to out_dir. Returns the manifest path.
inline std::string synthesize_dataset(const std::string& out_dir, int num_sequences,
                                      int frames_per_sequence, int size, std::uint64_t seed) {
    if (num_sequences < 1) throw DataError("need at least 1 sequence");
    namespace fs = std::filesystem;
    Rng rng(seed);
    Manifest rel;
    char name[64];
    for (int s = 0; s < num_sequences; ++s) {
        const SceneParams params = SceneParams::random(rng);
        const RenderedSequence seq = render_sequence(params, frames_per_sequence, size, rng);
        std::snprintf(name, sizeof(name), "seq_%03d", s);
        const fs::path dir = fs::path(out_dir) / name;
        fs::create_directories(dir);
        std::vector<std::string> frames;
        for (int k = 0; k < frames_per_sequence; ++k) {
            std::snprintf(name, sizeof(name), "frame_%03d.ppm", k);
            write_ppm((dir / name).string(), seq.frames[k]);
            std::snprintf(name, sizeof(name), "seq_%03d/frame_%03d.ppm", s, k);
            frames.push_back(name);
        }
        rel.sequences.push_back(std::move(frames));
    }
    const std::string manifest = (fs::path(out_dir) / "manifest.txt").string();
    write_manifest(manifest, rel);
    return manifest;
}

}  // namespace mcnet
