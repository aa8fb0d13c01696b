#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mcnet/common.hpp"
#include "mcnet/tensor.hpp"

// Procedural face scenes. Each sequence is one identity (fixed geometry and
// palette) animated by a sinusoidal pose sweep plus a random walk over
// expression state. Everything is a pure function of the caller's rng, so a
// seed reproduces the corpus bit for bit.

namespace mcnet {

struct SceneParams {
    // identity: face-local geometry (unit face frame, y down) and palette
    double face_rx = 0.30, face_ry = 0.38;
    double eye_dx = 0.13, eye_y = -0.12, eye_rx = 0.065;
    double mouth_y = 0.20, mouth_hw = 0.12;
    double nose_y = 0.05;
    std::array<double, 3> skin{0.80, 0.65, 0.55};
    std::array<double, 3> background{0.15, 0.18, 0.22};
    std::array<double, 3> lips{0.65, 0.20, 0.25};
    std::array<double, 3> pupil{0.10, 0.08, 0.08};

    // pose sweep: value = amp * sin(2*pi*freq*k/frames + phase)
    double amp_x = 0.06, freq_x = 1.0, phase_x = 0.0;
    double amp_y = 0.04, freq_y = 1.0, phase_y = 1.3;
    double amp_rot = 0.15, freq_rot = 1.0, phase_rot = 0.7;
    double amp_scale = 0.08, freq_scale = 1.0, phase_scale = 2.1;

    // expression random walk step scale
    double walk_sigma = 0.06;

    static SceneParams random(Rng& rng) {
        SceneParams p;
        p.face_rx = rng.uniform(0.26, 0.33);
        p.face_ry = rng.uniform(0.33, 0.42);
        p.eye_dx = rng.uniform(0.10, 0.16);
        p.eye_y = rng.uniform(-0.16, -0.08);
        p.eye_rx = rng.uniform(0.055, 0.075);
        p.mouth_y = rng.uniform(0.16, 0.24);
        p.mouth_hw = rng.uniform(0.09, 0.15);
        p.nose_y = rng.uniform(0.02, 0.08);
        p.skin = {rng.uniform(0.65, 0.90), rng.uniform(0.50, 0.75), rng.uniform(0.40, 0.65)};
        p.background = {rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35),
                        rng.uniform(0.05, 0.35)};
        p.lips = {rng.uniform(0.50, 0.80), rng.uniform(0.10, 0.30), rng.uniform(0.15, 0.35)};
        p.pupil = {rng.uniform(0.05, 0.18), rng.uniform(0.05, 0.18), rng.uniform(0.05, 0.18)};
        p.amp_x = rng.uniform(0.02, 0.09);
        p.amp_y = rng.uniform(0.02, 0.07);
        p.amp_rot = rng.uniform(0.05, 0.25);
        p.amp_scale = rng.uniform(0.02, 0.12);
        p.freq_x = rng.uniform(0.5, 1.5);
        p.freq_y = rng.uniform(0.5, 1.5);
        p.freq_rot = rng.uniform(0.5, 1.5);
        p.freq_scale = rng.uniform(0.5, 1.5);
        p.phase_x = rng.uniform(0.0, 2.0 * kPi);
        p.phase_y = rng.uniform(0.0, 2.0 * kPi);
        p.phase_rot = rng.uniform(0.0, 2.0 * kPi);
        p.phase_scale = rng.uniform(0.0, 2.0 * kPi);
        p.walk_sigma = rng.uniform(0.03, 0.09);
        return p;
    }
};

struct RenderedSequence {
    std::vector<Tensor<double>> frames;  // each [3, size, size], values in [0,1]
    // per frame: left eye, right eye, left mouth corner, right mouth corner,
    // nose tip, in normalized scene coordinates
    std::vector<std::array<std::array<double, 2>, 5>> landmarks;
};

namespace detail {

struct Pose {
    double cx, cy, rot, scale;
};

struct Expression {
    double eye_open, mouth_open, mouth_curve;
};

inline bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
    const double u = (x - cx) / rx, v = (y - cy) / ry;
    return u * u + v * v <= 1.0;
}

// Color of the scene at one face-local point, opaque layers back to front.
inline std::array<double, 3> shade(const SceneParams& p, const Expression& e, double x,
                                   double y) {
    if (!in_ellipse(x, y, 0.0, 0.0, p.face_rx, p.face_ry)) return p.background;
    // soft vertical shading keeps the face from being a flat blob
    const double tone = 1.0 - 0.12 * (y / p.face_ry);
    std::array<double, 3> c{p.skin[0] * tone, p.skin[1] * tone, p.skin[2] * tone};

    const double ery = 0.010 + 0.045 * e.eye_open;
    for (int side = -1; side <= 1; side += 2) {
        const double ex = side * p.eye_dx;
        if (in_ellipse(x, y, ex, p.eye_y, p.eye_rx, ery)) {
            c = {0.92, 0.92, 0.94};
            if (in_ellipse(x, y, ex, p.eye_y, 0.022, std::min(0.030, ery))) c = p.pupil;
        }
    }

    if (in_ellipse(x, y, 0.0, p.nose_y, 0.020, 0.030)) {
        c = {p.skin[0] * 0.75, p.skin[1] * 0.70, p.skin[2] * 0.70};
    }

    // mouth: a band around a parabolic centerline, corners bend with the curve
    if (std::abs(x) <= p.mouth_hw) {
        const double u = x / p.mouth_hw;
        const double mid = p.mouth_y + e.mouth_curve * 0.06 * (1.0 - u * u);
        const double half = 0.010 + 0.045 * e.mouth_open;
        if (std::abs(y - mid) <= half * (1.0 - 0.55 * u * u)) c = p.lips;
    }
    return c;
}

}  // namespace detail

// Renders one sequence. rng drives the expression walk only; pose comes from
// the params. size is the square frame edge in pixels.
inline RenderedSequence render_sequence(const SceneParams& p, int num_frames, int size,
                                        Rng& rng) {
    if (size < 32) throw DataError("scene size must be at least 32, got " + std::to_string(size));
    if (num_frames < 1) throw DataError("scene needs at least 1 frame");

    RenderedSequence out;
    out.frames.reserve(num_frames);
    out.landmarks.reserve(num_frames);

    detail::Expression e{0.8, 0.3, 0.2};
    const double inv = 1.0 / size;
    // 3x3 supersampling anti-aliases every primitive edge
    const double sub[3] = {1.0 / 6.0, 0.5, 5.0 / 6.0};

    for (int k = 0; k < num_frames; ++k) {
        const double t = 2.0 * kPi * k / num_frames;
        const detail::Pose pose{0.5 + p.amp_x * std::sin(p.freq_x * t + p.phase_x),
                                0.5 + p.amp_y * std::sin(p.freq_y * t + p.phase_y),
                                p.amp_rot * std::sin(p.freq_rot * t + p.phase_rot),
                                1.0 + p.amp_scale * std::sin(p.freq_scale * t + p.phase_scale)};
        if (k > 0 && p.walk_sigma > 0.0) {
            auto clampd = [](double v, double lo, double hi) {
                return v < lo ? lo : v > hi ? hi : v;
            };
            e.eye_open = clampd(e.eye_open + p.walk_sigma * rng.normal(), 0.15, 1.0);
            e.mouth_open = clampd(e.mouth_open + p.walk_sigma * rng.normal(), 0.05, 0.8);
            e.mouth_curve = clampd(e.mouth_curve + 2.0 * p.walk_sigma * rng.normal(), -1.0, 1.0);
        }

        const double cr = std::cos(pose.rot), sr = std::sin(pose.rot);
        Tensor<double> img{{3, size, size}};
        const std::int64_t plane = static_cast<std::int64_t>(size) * size;
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                double acc[3] = {0, 0, 0};
                for (int sy = 0; sy < 3; ++sy) {
                    for (int sx = 0; sx < 3; ++sx) {
                        const double px = (x + sub[sx]) * inv - pose.cx;
                        const double py = (y + sub[sy]) * inv - pose.cy;
                        // inverse pose: scene -> face-local
                        const double qx = (cr * px + sr * py) / pose.scale;
                        const double qy = (-sr * px + cr * py) / pose.scale;
                        const auto c = detail::shade(p, e, qx, qy);
                        acc[0] += c[0];
                        acc[1] += c[1];
                        acc[2] += c[2];
                    }
                }
                const std::int64_t i = static_cast<std::int64_t>(y) * size + x;
                img[0 * plane + i] = acc[0] / 9.0;
                img[1 * plane + i] = acc[1] / 9.0;
                img[2 * plane + i] = acc[2] / 9.0;
            }
        }
        out.frames.push_back(std::move(img));

        const double u = 1.0;  // mouth corners sit at x = +-mouth_hw where the bend is zero
        const double corner_y = p.mouth_y + e.mouth_curve * 0.06 * (1.0 - u * u);
        const std::array<std::array<double, 2>, 5> local{{{-p.eye_dx, p.eye_y},
                                                          {p.eye_dx, p.eye_y},
                                                          {-p.mouth_hw, corner_y},
                                                          {p.mouth_hw, corner_y},
                                                          {0.0, p.nose_y}}};
        std::array<std::array<double, 2>, 5> lm;
        for (int j = 0; j < 5; ++j) {
            const double qx = local[j][0] * pose.scale, qy = local[j][1] * pose.scale;
            lm[j] = {pose.cx + cr * qx - sr * qy, pose.cy + sr * qx + cr * qy};
        }
        out.landmarks.push_back(lm);
    }
    return out;
}

}  // namespace mcnet
