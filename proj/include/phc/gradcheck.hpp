#pragma once

// Central-difference gradient checking against the reverse-mode tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "phc/autodiff.hpp"

namespace phc::ad {

struct GradientCheck {
  double max_relative_error = 0.0;
  // Entries where one-sided differences disagree (kinks such as relu at 0).
  // They are excluded from max_relative_error.
  std::size_t unreliable_points = 0;
  std::size_t checked = 0;
};

/// Relative error with denominator max(|a|, |b|, 1e-8).
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares the tape gradient of `f` with central differences of step `h`,
/// entry by entry over every leaf.
///
/// `f(tape, leaves)` must build a scalar on `tape` from the given leaves; it
/// is also called with `tape == nullptr` and detached leaves for the
/// perturbed evaluations.
///
/// With `fourth_order` the reference is the five-point stencil
/// (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, meant for smooth
/// functions and larger h; kink detection is skipped in that mode.
template <class F>
GradientCheck check_gradient(F&& f, const std::vector<Matrix>& leaves, double h,
                             bool fourth_order = false) {
  if (!(h > 0.0)) throw std::invalid_argument("check_gradient: step must be positive");

  Tape tape;
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const Matrix& l : leaves) vars.push_back(tape.leaf(l));
  const Var root = f(&tape, std::span<const Var>(vars));
  const std::vector<Matrix> analytic = grad(root, std::span<const Var>(vars));

  auto evaluate = [&](const std::vector<Matrix>& at) {
    std::vector<Var> detached;
    detached.reserve(at.size());
    for (const Matrix& m : at) detached.emplace_back(m);
    return f(nullptr, std::span<const Var>(detached)).scalar();
  };

  GradientCheck out;
  std::vector<Matrix> point = leaves;
  const double f0 = evaluate(point);
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    for (Eigen::Index i = 0; i < leaves[l].size(); ++i) {
      const double x0 = leaves[l](i);
      if (fourth_order) {
        auto at = [&](double dx) {
          point[l](i) = x0 + dx;
          return evaluate(point);
        };
        const double numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
        point[l](i) = x0;
        ++out.checked;
        out.max_relative_error =
            std::max(out.max_relative_error, relative_error(analytic[l](i), numeric));
        continue;
      }
      point[l](i) = x0 + h;
      const double fp = evaluate(point);
      point[l](i) = x0 - h;
      const double fm = evaluate(point);
      point[l](i) = x0;

      const double forward = (fp - f0) / h;
      const double backward = (f0 - fm) / h;
      ++out.checked;
      if (std::abs(forward - backward) >
          1e-2 * std::max(std::abs(forward), std::abs(backward)) + 1e-6) {
        ++out.unreliable_points;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      out.max_relative_error =
          std::max(out.max_relative_error, relative_error(analytic[l](i), numeric));
    }
  }
  return out;
}

}  // namespace phc::ad
