#pragma once

// Central finite-difference oracle for the CNN gradients. It only ever
// evaluates the forward pass; the analytic gradients under test come from
// the backward pass in the library.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "bonesound/model.hpp"

namespace bonesound::testing {

struct GradCheckReport {
  double max_rel_error = 0.0;
  Eigen::Index worst_param = -1;
  Eigen::Index checked = 0;
  // Parameters whose +/-eps probe crossed a ReLU or pool kink at the nominal
  // step, so the step had to shrink to stay in one linear region.
  Eigen::Index kink_reduced = 0;
  // Largest relative error seen with the nominal step on every parameter,
  // kinks included. Informational.
  double max_rel_error_nominal = 0.0;
  std::vector<double> per_param;
};

// Gradients below the floor are compared on an absolute scale; beneath it
// double-precision roundoff of an O(10) loss dominates the difference quotient.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Every parameter is probed with central differences of step `eps` and
/// eps/2, combined by Richardson extrapolation. When
/// the activation pattern at theta +/- eps differs from the one at theta the
/// difference quotient straddles a non-differentiable point; the step is
/// halved until both probes stay in the base region (down to `min_eps`).
inline GradCheckReport check_gradients(Model model, std::span<const Eigen::MatrixXd> inputs,
                                       std::span<const int> labels, double eps = 1e-3,
                                       double min_eps = 1e-9, Eigen::Index stride = 1) {
  const auto analytic = loss_and_gradients<double>(model, inputs, labels).grads;
  const StagedForward<double> staged(model, inputs);

  std::vector<StagedForward<double>::Result> base(staged.stage_count());
  for (std::size_t s = 0; s < staged.stage_count(); ++s) base[s] = staged.evaluate_from(model, s, labels);

  GradCheckReport rep;
  rep.per_param.assign(static_cast<std::size_t>(model.params.size()), 0.0);
  for (Eigen::Index i = 0; i < model.params.size(); i += stride) {
    const std::size_t stage = StagedForward<double>::stage_of(model, i);
    const double theta = model.params[i];
    double h = eps;
    double numeric = 0.0;
    bool first = true;
    for (;;) {
      auto probe = [&](double step) {
        model.params[i] = theta + step;
        const auto plus = staged.evaluate_from(model, stage, labels);
        model.params[i] = theta - step;
        const auto minus = staged.evaluate_from(model, stage, labels);
        model.params[i] = theta;
        const bool same = plus.signature == base[stage].signature && minus.signature == base[stage].signature;
        return std::pair{(plus.loss - minus.loss) / (2.0 * step), same};
      };
      const auto [coarse, smooth_coarse] = probe(h);
      const auto [fine, smooth_fine] = probe(h / 2.0);
      // Richardson extrapolation cancels the O(h^2) truncation term.
      numeric = (4.0 * fine - coarse) / 3.0;
      if (first) {
        rep.max_rel_error_nominal = std::max(rep.max_rel_error_nominal, relative_error(analytic[i], coarse));
        first = false;
      }
      if ((smooth_coarse && smooth_fine) || h / 2.0 < min_eps) break;
      if (h == eps) ++rep.kink_reduced;
      h /= 2.0;
    }
    const double rel = relative_error(analytic[i], numeric);
    rep.per_param[static_cast<std::size_t>(i)] = rel;
    ++rep.checked;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_param = i;
    }
  }
  return rep;
}

}  // namespace bonesound::testing
