#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mcnet/gradcheck.hpp"
#include "mcnet/memory.hpp"
#include "mcnet/motion.hpp"
#include "mcnet/objectives.hpp"

// Finite-difference coverage for every differentiable op, each probed over at
// least three input shapes. All checks run in f64 with h=1e-5 against a
// relative tolerance of 1e-4 (absolute near zero).

namespace mcnet::tools {

struct OpCheck {
    std::string name;
    std::function<GradCheckReport()> run;
};

namespace detail {

inline constexpr double kEps = 1e-5;
inline constexpr double kTol = 1e-4;

inline Tensor<double> rnd(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    Tensor<double> t{std::move(shape)};
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Values at least 0.2 away from zero, clear of the relu kink.
inline Tensor<double> rnd_off_zero(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> t{std::move(shape)};
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
    return t;
}

// Sample coordinates clear of pixel-crossing kinks in bilinear sampling.
inline Tensor<double> safe_grid(int b, int hg, int wg, int in_h, int in_w, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> g{{b, hg, wg, 2}};
    for (std::int64_t p = 0; p < g.numel() / 2; ++p)
        for (int d = 0; d < 2; ++d) {
            const double denom = (d == 0 ? in_w : in_h) - 1;
            double pix = (rng.uniform(-0.6, 0.6) + 1.0) * 0.5 * denom;
            const double frac = pix - std::floor(pix);
            if (frac < 0.05) pix += 0.07;
            if (frac > 0.95) pix -= 0.07;
            g[p * 2 + d] = pix / denom * 2.0 - 1.0;
        }
    return g;
}

// Reduces any output to a scalar through fixed random weights, so a wrong
// element anywhere in the adjoint shows up in the comparison.
inline Var<double> wsum(Tape<double>& t, Var<double> v, std::uint64_t seed) {
    return sum(t, mul(t, v, t.constant(rnd(t.val(v).shape(), seed))));
}

inline void merge(GradCheckReport& into, const GradCheckReport& r) {
    into.max_abs_err = std::max(into.max_abs_err, r.max_abs_err);
    if (r.max_rel_err > into.max_rel_err) {
        into.max_rel_err = r.max_rel_err;
        into.worst = r.worst;
    }
    into.ok = into.ok && r.ok;
}

template <class Build>
GradCheckReport check_shapes(Build&& build, const std::vector<std::vector<Tensor<double>>>& cases) {
    GradCheckReport rep;
    for (const auto& inputs : cases) merge(rep, grad_check(build, inputs, kEps, kTol));
    return rep;
}

// Forward doubles, adjoint deliberately pulls 1.9x instead of 2x. The harness
// has to flag this; it exists to prove a broken gradient cannot slip through.
inline Var<double> wrong_adjoint_double(Tape<double>& t, Var<double> x) {
    Tensor<double> out = t.val(x);
    out.vec() *= 2.0;
    return t.emplace("negative_control", std::move(out), {x},
                     [x](Tape<double>& tp, Var<double> self) {
                         if (Tensor<double>* gx = tp.grad_buf(x))
                             gx->vec() += tp.grad(self).vec() * 1.9;
                     });
}

}  // namespace detail

inline std::vector<OpCheck> gradcheck_registry() {
    using namespace detail;
    std::vector<OpCheck> ops;
    auto reg = [&](std::string name, std::function<GradCheckReport()> run) {
        ops.push_back({std::move(name), std::move(run)});
    };

    reg("add", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, add(t, v[0], v[1]), 90);
            },
            {{rnd({2, 3}, 1), rnd({2, 3}, 2)},
             {rnd({4}, 3), rnd({4}, 4)},
             {rnd({2, 2, 2}, 5), rnd({2, 2, 2}, 6)}});
    });
    reg("sub", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, sub(t, v[0], v[1]), 91);
            },
            {{rnd({2, 3}, 1), rnd({2, 3}, 2)},
             {rnd({5}, 3), rnd({5}, 4)},
             {rnd({1, 2, 2, 2}, 5), rnd({1, 2, 2, 2}, 6)}});
    });
    reg("mul", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, mul(t, v[0], v[1]), 92);
            },
            {{rnd({2, 3}, 1), rnd({2, 3}, 2)},
             {rnd({6}, 3), rnd({6}, 4)},
             {rnd({2, 1, 3}, 5), rnd({2, 1, 3}, 6)}});
    });
    reg("scale", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, scale(t, v[0], -2.5), 93);
            },
            {{rnd({2, 3}, 1)}, {rnd({7}, 2)}, {rnd({2, 2, 2}, 3)}});
    });
    reg("relu", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, relu(t, v[0]), 94);
            },
            {{rnd_off_zero({2, 3}, 1)}, {rnd_off_zero({9}, 2)}, {rnd_off_zero({2, 2, 3}, 3)}});
    });
    reg("sigmoid", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, sigmoid(t, v[0]), 95);
            },
            {{rnd({2, 3}, 1)}, {rnd({8}, 2)}, {rnd({1, 2, 4}, 3)}});
    });
    reg("softmax", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, softmax(t, v[0], 1), 96);
            },
            {{rnd({2, 5}, 1)}, {rnd({3, 4}, 2)}, {rnd({2, 3, 4}, 3)}});
    });
    reg("concat", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, concat(t, {v[0], v[1]}, 1), 97);
            },
            {{rnd({2, 2}, 1), rnd({2, 3}, 2)},
             {rnd({1, 4, 2}, 3), rnd({1, 1, 2}, 4)},
             {rnd({2, 1, 2, 2}, 5), rnd({2, 2, 2, 2}, 6)}});
    });
    reg("narrow", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, narrow(t, v[0], 1, 1, 2), 98);
            },
            {{rnd({2, 4}, 1)}, {rnd({1, 3, 2}, 2)}, {rnd({2, 5, 2, 2}, 3)}});
    });
    reg("reshape", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                const std::int64_t n = t.val(v[0]).numel();
                return wsum(t, reshape(t, v[0], {static_cast<int>(n)}), 99);
            },
            {{rnd({2, 3}, 1)}, {rnd({2, 2, 2}, 2)}, {rnd({1, 4, 2, 1}, 3)}});
    });
    reg("permute", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                std::vector<int> perm(t.val(v[0]).rank());
                for (std::size_t i = 0; i < perm.size(); ++i)
                    perm[i] = static_cast<int>(perm.size()) - 1 - static_cast<int>(i);
                return wsum(t, permute(t, v[0], perm), 100);
            },
            {{rnd({2, 3}, 1)}, {rnd({2, 3, 4}, 2)}, {rnd({2, 2, 3, 2}, 3)}});
    });
    reg("matmul", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, matmul(t, v[0], v[1]), 101);
            },
            {{rnd({2, 3}, 1), rnd({3, 4}, 2)},
             {rnd({1, 5}, 3), rnd({5, 1}, 4)},
             {rnd({4, 4}, 5), rnd({4, 4}, 6)}});
    });
    reg("bmm", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, bmm(t, v[0], v[1]), 102);
            },
            {{rnd({2, 2, 3}, 1), rnd({2, 3, 4}, 2)},
             {rnd({1, 3, 3}, 3), rnd({1, 3, 3}, 4)},
             {rnd({3, 1, 4}, 5), rnd({3, 4, 2}, 6)}});
    });
    reg("linear", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, linear(t, v[0], v[1], v[2]), 103);
            },
            {{rnd({2, 3}, 1), rnd({3, 4}, 2), rnd({4}, 3)},
             {rnd({1, 5}, 4), rnd({5, 2}, 5), rnd({2}, 6)},
             {rnd({3, 2}, 7), rnd({2, 2}, 8), rnd({2}, 9)}});
    });
    reg("global_avg_pool", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, global_avg_pool(t, v[0]), 104);
            },
            {{rnd({1, 2, 3, 3}, 1)}, {rnd({2, 3, 2, 2}, 2)}, {rnd({2, 1, 4, 2}, 3)}});
    });
    reg("sum", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) { return sum(t, v[0]); },
            {{rnd({2, 3}, 1)}, {rnd({7}, 2)}, {rnd({2, 2, 2}, 3)}});
    });
    reg("l1", [] {
        // operands kept on opposite sides of zero, clear of the |.| kink
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return l1(t, v[0], v[1]);
            },
            {{rnd({2, 3}, 1, 1.0, 2.0), rnd({2, 3}, 2, -2.0, -1.0)},
             {rnd({5}, 3, 1.0, 2.0), rnd({5}, 4, -2.0, -1.0)},
             {rnd({2, 2, 2}, 5, 1.0, 2.0), rnd({2, 2, 2}, 6, -2.0, -1.0)}});
    });
    reg("mul_channel_gate", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, mul_channel_gate(t, v[0], v[1]), 105);
            },
            {{rnd({1, 2, 3, 3}, 1), rnd({1, 1, 3, 3}, 2)},
             {rnd({2, 3, 2, 2}, 3), rnd({2, 1, 2, 2}, 4)},
             {rnd({2, 1, 4, 4}, 5), rnd({2, 1, 4, 4}, 6)}});
    });
    reg("detach", [] {
        // A gradient barrier cannot be checked against finite differences:
        // the forward pass is the identity, so a difference quotient sees a
        // slope of one while the adjoint must deliver exactly zero. The
        // contract checked here is that pair: value untouched, gradient zero.
        GradCheckReport rep;
        for (const Tensor<double>& input : {rnd({2, 3}, 1), rnd({4}, 2), rnd({2, 2}, 3)}) {
            Tape<double> t;
            const Var<double> x = t.leaf(input, true);
            const Var<double> y = detach(t, x);
            t.backward(wsum(t, y, 106));
            for (std::int64_t i = 0; i < input.numel(); ++i) {
                if (t.val(y)[i] != input[i]) {
                    rep.ok = false;
                    rep.worst = "value changed across detach";
                }
                const double g = std::abs(t.grad(x)[i]);
                if (g > 0.0) {
                    rep.ok = false;
                    rep.max_rel_err = std::max(rep.max_rel_err, g);
                    rep.worst = "gradient leaked through detach";
                }
            }
        }
        return rep;
    });
    reg("conv2d", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                const int k = t.val(v[1]).dim(2);
                return wsum(t, conv2d(t, v[0], v[1], v[2], 1, k / 2), 107);
            },
            {{rnd({1, 2, 5, 5}, 1), rnd({3, 2, 3, 3}, 2), rnd({3}, 3)},
             {rnd({2, 3, 4, 4}, 4), rnd({2, 3, 1, 1}, 5), rnd({2}, 6)},
             {rnd({1, 1, 6, 6}, 7), rnd({2, 1, 3, 3}, 8), rnd({2}, 9)}});
    });
    reg("conv2d_strided", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, conv2d(t, v[0], v[1], v[2], 2, 1), 108);
            },
            {{rnd({1, 2, 5, 5}, 1), rnd({2, 2, 3, 3}, 2), rnd({2}, 3)},
             {rnd({2, 1, 6, 6}, 4), rnd({3, 1, 3, 3}, 5), rnd({3}, 6)},
             {rnd({1, 3, 4, 4}, 7), rnd({1, 3, 3, 3}, 8), rnd({1}, 9)}});
    });
    reg("conv2d_per_sample", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                const int k = t.val(v[1]).dim(3);
                return wsum(t, conv2d_per_sample(t, v[0], v[1], 1, k / 2), 109);
            },
            {{rnd({2, 2, 4, 4}, 1), rnd({2, 3, 2, 3, 3}, 2)},
             {rnd({1, 3, 3, 3}, 3), rnd({1, 2, 3, 1, 1}, 4)},
             {rnd({3, 1, 4, 4}, 5), rnd({3, 2, 1, 3, 3}, 6)}});
    });
    reg("grid_sample", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, grid_sample(t, v[0], v[1]), 110);
            },
            {{rnd({1, 2, 5, 5}, 1), safe_grid(1, 3, 3, 5, 5, 2)},
             {rnd({2, 1, 4, 6}, 3), safe_grid(2, 2, 4, 4, 6, 4)},
             {rnd({1, 3, 6, 4}, 5), safe_grid(1, 4, 2, 6, 4, 6)}});
    });
    reg("bilinear_resize", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                const int h = t.val(v[0]).dim(2), w = t.val(v[0]).dim(3);
                return wsum(t, bilinear_resize(t, v[0], h + 2, w * 2), 111);
            },
            {{rnd({1, 2, 3, 3}, 1)}, {rnd({2, 1, 4, 2}, 2)}, {rnd({1, 3, 2, 5}, 3)}});
    });
    reg("bilinear_shrink", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, bilinear_resize(t, v[0], 3, 3), 112);
            },
            {{rnd({1, 2, 5, 5}, 1)}, {rnd({2, 1, 7, 4}, 2)}, {rnd({1, 1, 4, 6}, 3)}});
    });
    reg("upsample_nearest2x", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, upsample_nearest2x(t, v[0]), 113);
            },
            {{rnd({1, 2, 2, 2}, 1)}, {rnd({2, 1, 3, 2}, 2)}, {rnd({1, 3, 2, 4}, 3)}});
    });
    reg("avg_pool2x", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, avg_pool2x(t, v[0]), 114);
            },
            {{rnd({1, 2, 4, 4}, 1)}, {rnd({2, 1, 2, 6}, 2)}, {rnd({1, 3, 6, 2}, 3)}});
    });
    reg("downsample_to", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, downsample_to(t, v[0], 2), 115);
            },
            {{rnd({1, 2, 8, 8}, 1)}, {rnd({2, 1, 4, 4}, 2)}, {rnd({1, 1, 16, 16}, 3)}});
    });
    reg("spatial_expectation", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                Var<double> heat = softmax(t, reshape(t, v[0], {t.val(v[0]).dim(0),
                                                                t.val(v[0]).dim(1),
                                                                t.val(v[0]).dim(2) *
                                                                    t.val(v[0]).dim(3)}),
                                           2);
                heat = reshape(t, heat, t.val(v[0]).shape());
                return wsum(t, spatial_expectation(t, heat), 116);
            },
            {{rnd({1, 2, 3, 3}, 1)}, {rnd({2, 1, 4, 2}, 2)}, {rnd({1, 3, 2, 4}, 3)}});
    });
    reg("soft_argmax", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                auto sa = soft_argmax(t, v[0], 0.5);
                return add(t, wsum(t, sa.kp, 117), wsum(t, sa.heat, 118));
            },
            {{rnd({1, 2, 3, 3}, 1)}, {rnd({2, 1, 4, 4}, 2)}, {rnd({1, 3, 2, 5}, 3)}});
    });
    reg("kp_gaussians", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, kp_gaussians(t, v[0], 5, 5, 0.2), 119);
            },
            {{rnd({1, 2, 2}, 1, -0.7, 0.7)},
             {rnd({2, 3, 2}, 2, -0.7, 0.7)},
             {rnd({3, 1, 2}, 3, -0.7, 0.7)}});
    });
    reg("sparse_motions", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, sparse_motions(t, v[0], v[1], 4, 4), 120);
            },
            {{rnd({1, 2, 2}, 1, -0.7, 0.7), rnd({1, 2, 2}, 2, -0.7, 0.7)},
             {rnd({2, 1, 2}, 3, -0.7, 0.7), rnd({2, 1, 2}, 4, -0.7, 0.7)},
             {rnd({1, 3, 2}, 5, -0.7, 0.7), rnd({1, 3, 2}, 6, -0.7, 0.7)}});
    });
    reg("mask_flow_combine", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                Var<double> masks = softmax(t, v[0], 1);
                return wsum(t, mask_flow_combine(t, masks, v[1]), 121);
            },
            {{rnd({1, 3, 2, 2}, 1), rnd({1, 3, 2, 2, 2}, 2)},
             {rnd({2, 2, 3, 3}, 3), rnd({2, 2, 3, 3, 2}, 4)},
             {rnd({1, 4, 2, 3}, 5), rnd({1, 4, 2, 3, 2}, 6)}});
    });
    reg("affine_kp", [] {
        const std::array<double, 6> a{0.9, -0.2, 0.05, 0.15, 1.1, -0.1};
        return check_shapes(
            [a](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, affine_kp(t, v[0], a), 122);
            },
            {{rnd({1, 2, 2}, 1)}, {rnd({2, 3, 2}, 2)}, {rnd({3, 1, 2}, 3)}});
    });
    reg("keypoint_pe", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, keypoint_pe(t, v[0], 2), 123);
            },
            {{rnd({1, 2, 2}, 1)}, {rnd({2, 3, 2}, 2)}, {rnd({1, 1, 2}, 3)}});
    });
    reg("modulate_demodulate", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, modulate_demodulate(t, v[0], v[1]), 124);
            },
            {{rnd({2, 3, 3, 3}, 1), rnd({1, 3}, 2, 0.5, 1.5)},
             {rnd({1, 2, 1, 1}, 3), rnd({2, 2}, 4, 0.5, 1.5)},
             {rnd({3, 1, 3, 3}, 5), rnd({1, 1}, 6, 0.5, 1.5)}});
    });
    reg("keypoint_distance", [] {
        // spreads chosen so no pair sits on the hinge threshold
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return keypoint_distance_loss(t, v[0], 0.37);
            },
            {{rnd({1, 3, 2}, 1)}, {rnd({2, 2, 2}, 2)}, {rnd({1, 4, 2}, 3)}});
    });
    reg("negative-control", [] {
        return check_shapes(
            [](Tape<double>& t, const std::vector<Var<double>>& v) {
                return wsum(t, wrong_adjoint_double(t, v[0]), 125);
            },
            {{rnd({2, 3}, 1)}, {rnd({4}, 2)}, {rnd({2, 2}, 3)}});
    });

    return ops;
}

}  // namespace mcnet::tools
