#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "fedrec/types.hpp"

namespace fedrec {

// Independent numeric oracles. Nothing in here shares differentiation logic
// with the analytic gradient path: derivatives come from finite differences
// or from closed-form surrogates supplied by the caller.

using ScalarOfVector = std::function<double(const Vector&)>;
using ScalarOfMatrix = std::function<double(const Matrix&)>;
using GradOfMatrix = std::function<Matrix(const Matrix&)>;

// Central difference (F(a + h e_j) - F(a - h e_j)) / 2h.
double finite_diff_alpha_grad(const ScalarOfVector& loss_of_alpha, const Vector& alpha, int j,
                              double h = 1e-5);

struct SpanFit {
  Vector coefficients;
  double residual_norm = 0.0;
  bool degenerate = false;  // rank-deficient Gram matrix, minimum-norm solution returned
};

// Least squares min over coefficients of ||sum_j a_j D_j - target||_F on
// flattened matrices.
SpanFit span_coordinates(const std::vector<Matrix>& directions, const Matrix& target);

struct SharedFit {
  Vector beta;           // shared combination coefficients
  Vector per_target_scale;
  double residual_norm = 0.0;  // sqrt of total squared residual over targets
  bool converged = false;
  int iterations = 0;
};

// Best fit of the constrained model target_i ~ c_i * (sum_j beta_j D_j) by
// alternating least squares over (beta, {c_i}).
SharedFit shared_direction_residual(const std::vector<Matrix>& directions,
                                    const std::vector<Matrix>& targets, double tol = 1e-10,
                                    int max_iterations = 500);

struct SignCheckRecord {
  double inner_at_iterate = 0.0;
  double inner_at_base = 0.0;
  double alpha_before = 0.0;
  double alpha_after = 0.0;
  bool skipped = false;  // sign-consistency hypothesis failed at the iterate
  bool consistent = false;
};

// One gradient step on alpha_j of F(W0 + sum alpha_k D_k); checks that a
// positive alignment decreases alpha_j and a negative one increases it.
// Cases where sign(inner at iterate) != sign(g at W0) are skipped, not failed.
SignCheckRecord descent_sign_check(const GradOfMatrix& grad, const Matrix& w0,
                                   const std::vector<Matrix>& directions, const Vector& alpha,
                                   double eta, int j);

struct FirstOrderResult {
  std::vector<double> scales;
  std::vector<double> residuals;
  double dir_deriv = 0.0;
  double slope = 0.0;  // log-log fit of residual vs scale
  int points_used = 0;
};

// residual(t) = |F(W0 + t dW) - F(W0) - t <grad F(W0), dW>|; the directional
// derivative comes from a central difference unless supplied in closed form.
FirstOrderResult first_order_residual(const ScalarOfMatrix& loss, const Matrix& w0,
                                      const Matrix& delta,
                                      std::vector<double> scales = {1e-1, 1e-2, 1e-3},
                                      std::optional<double> dir_deriv = std::nullopt);

}  // namespace fedrec
