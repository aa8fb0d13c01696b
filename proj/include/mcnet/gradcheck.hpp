#pragma once

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mcnet/tape.hpp"

namespace mcnet {

struct GradCheckReport {
    double max_abs_err = 0;
    double max_rel_err = 0;
    std::string worst;
    bool ok = true;
};

// Validates reverse-mode gradients of a scalar-valued builder against central
// finite differences, element by element. The builder is re-run on a fresh
// tape for every probe, so it must be a pure function of its inputs.
//
//   build(tape, vars) -> scalar Var
//
// `stride` probes every stride-th element of each input, which keeps large
// tensors affordable; 1 checks everything. Relative error uses a unit floor
// so near-zero gradients are compared absolutely.
template <class Build>
GradCheckReport grad_check(Build&& build, std::vector<Tensor<double>> inputs, double eps = 1e-6,
                           double tol = 1e-7, std::int64_t stride = 1) {
    auto run = [&](const std::vector<Tensor<double>>& ins, Tape<double>* tape_out,
                   std::vector<Var<double>>* vars_out) {
        Tape<double> local;
        Tape<double>& t = tape_out ? *tape_out : local;
        std::vector<Var<double>> vars;
        vars.reserve(ins.size());
        for (const auto& in : ins) vars.push_back(t.leaf(in, true));
        Var<double> loss = build(t, vars);
        if (t.val(loss).numel() != 1) throw DataError("grad_check: builder must return a scalar");
        if (vars_out) *vars_out = vars;
        if (tape_out) {
            t.backward(loss);
            return 0.0;
        }
        return static_cast<double>(t.val(loss)[0]);
    };

    Tape<double> tape;
    std::vector<Var<double>> vars;
    run(inputs, &tape, &vars);

    GradCheckReport rep;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor<double>& analytic = tape.grad(vars[i]);
        for (std::int64_t j = 0; j < inputs[i].numel(); j += stride) {
            std::vector<Tensor<double>> probe = inputs;
            const double orig = probe[i][j];
            probe[i][j] = orig + eps;
            const double fp = run(probe, nullptr, nullptr);
            probe[i][j] = orig - eps;
            const double fm = run(probe, nullptr, nullptr);
            const double numeric = (fp - fm) / (2 * eps);
            const double a = analytic[j];
            const double abs_err = std::abs(a - numeric);
            const double rel_err = abs_err / std::max(1.0, std::max(std::abs(a), std::abs(numeric)));
            if (rel_err > rep.max_rel_err) {
                rep.max_rel_err = rel_err;
                std::ostringstream os;
                os << "input " << i << " elem " << j << ": analytic " << a << " numeric "
                   << numeric;
                rep.worst = os.str();
            }
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
        }
    }
    rep.ok = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace mcnet
