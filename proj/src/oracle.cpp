#include "fedrec/oracle.hpp"

#include <cmath>

#include "fedrec/errors.hpp"
#include "fedrec/lowrank.hpp"

namespace fedrec {

namespace {

Matrix stack_flattened(const std::vector<Matrix>& directions) {
  if (directions.empty()) throw ContractViolation("oracle: need >= 1 direction");
  const Eigen::Index m = directions[0].size();
  Matrix p(m, static_cast<Eigen::Index>(directions.size()));
  for (std::size_t j = 0; j < directions.size(); ++j) {
    if (directions[j].size() != m) throw DimensionError("oracle: direction shape mismatch");
    p.col(static_cast<Eigen::Index>(j)) =
        Eigen::Map<const Vector>(directions[j].data(), m);
  }
  return p;
}

}  // namespace

double finite_diff_alpha_grad(const ScalarOfVector& loss_of_alpha, const Vector& alpha, int j,
                              double h) {
  if (h <= 0.0) throw ConfigError("finite_diff_alpha_grad: h must be > 0");
  Vector plus = alpha, minus = alpha;
  plus(j) += h;
  minus(j) -= h;
  const double fp = loss_of_alpha(plus);
  const double fm = loss_of_alpha(minus);
  if (!std::isfinite(fp) || !std::isfinite(fm))
    throw NumericError("finite_diff_alpha_grad: non-finite loss evaluation");
  return (fp - fm) / (2.0 * h);
}

SpanFit span_coordinates(const std::vector<Matrix>& directions, const Matrix& target) {
  const Matrix p = stack_flattened(directions);
  if (target.size() != p.rows()) throw DimensionError("span_coordinates: target shape mismatch");
  const Vector y = Eigen::Map<const Vector>(target.data(), target.size());

  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(p);
  SpanFit fit;
  fit.coefficients = cod.solve(y);
  fit.residual_norm = (p * fit.coefficients - y).norm();
  fit.degenerate = cod.rank() < p.cols();
  return fit;
}

SharedFit shared_direction_residual(const std::vector<Matrix>& directions,
                                    const std::vector<Matrix>& targets, double tol,
                                    int max_iterations) {
  if (targets.empty())
    throw ContractViolation("shared_direction_residual: need >= 1 target");
  const Matrix p = stack_flattened(directions);
  const Eigen::Index n_dir = p.cols();
  const Eigen::Index n_tgt = static_cast<Eigen::Index>(targets.size());
  Matrix y(p.rows(), n_tgt);
  for (Eigen::Index i = 0; i < n_tgt; ++i) {
    if (targets[i].size() != p.rows())
      throw DimensionError("shared_direction_residual: target shape mismatch");
    y.col(i) = Eigen::Map<const Vector>(targets[i].data(), targets[i].size());
  }

  SharedFit fit;
  fit.per_target_scale = Vector::Ones(n_tgt);
  const Matrix gram = p.transpose() * p;
  double prev_res = std::numeric_limits<double>::infinity();

  Vector beta = Vector::Zero(n_dir);
  for (int it = 0; it < max_iterations; ++it) {
    // beta step: min over beta of sum_i || c_i P beta - y_i ||^2
    const double c_sq = fit.per_target_scale.squaredNorm();
    Vector rhs = Vector::Zero(n_dir);
    for (Eigen::Index i = 0; i < n_tgt; ++i)
      rhs += fit.per_target_scale(i) * (p.transpose() * y.col(i));
    beta = (c_sq * gram).ldlt().solve(rhs);

    // c step: per target projection onto u = P beta
    const Vector u = p * beta;
    const double uu = u.squaredNorm();
    if (uu > 0.0)
      for (Eigen::Index i = 0; i < n_tgt; ++i) fit.per_target_scale(i) = u.dot(y.col(i)) / uu;

    double res_sq = 0.0;
    for (Eigen::Index i = 0; i < n_tgt; ++i)
      res_sq += (fit.per_target_scale(i) * u - y.col(i)).squaredNorm();
    fit.residual_norm = std::sqrt(res_sq);
    fit.iterations = it + 1;
    if (std::abs(prev_res - fit.residual_norm) < tol) {
      fit.converged = true;
      break;
    }
    prev_res = fit.residual_norm;
  }
  fit.beta = beta;
  return fit;
}

SignCheckRecord descent_sign_check(const GradOfMatrix& grad, const Matrix& w0,
                                   const std::vector<Matrix>& directions, const Vector& alpha,
                                   double eta, int j) {
  if (eta <= 0.0) throw ConfigError("descent_sign_check: eta must be > 0");
  Matrix w = w0;
  for (std::size_t k = 0; k < directions.size(); ++k)
    w += alpha(static_cast<Eigen::Index>(k)) * directions[k];

  SignCheckRecord rec;
  rec.inner_at_iterate = frob_inner(grad(w), directions[static_cast<std::size_t>(j)]);
  rec.inner_at_base = frob_inner(grad(w0), directions[static_cast<std::size_t>(j)]);
  rec.alpha_before = alpha(j);
  rec.alpha_after = alpha(j) - eta * rec.inner_at_iterate;

  // hypothesis: the alignment sign at the iterate matches the sign at W0
  if (rec.inner_at_iterate == 0.0 || rec.inner_at_base == 0.0 ||
      std::signbit(rec.inner_at_iterate) != std::signbit(rec.inner_at_base)) {
    rec.skipped = true;
    return rec;
  }
  rec.consistent = rec.inner_at_iterate > 0.0 ? rec.alpha_after < rec.alpha_before
                                              : rec.alpha_after > rec.alpha_before;
  return rec;
}

FirstOrderResult first_order_residual(const ScalarOfMatrix& loss, const Matrix& w0,
                                      const Matrix& delta, std::vector<double> scales,
                                      std::optional<double> dir_deriv) {
  FirstOrderResult res;
  res.scales = std::move(scales);
  const double f0 = loss(w0);
  if (dir_deriv) {
    res.dir_deriv = *dir_deriv;
  } else {
    // fourth-order stencil: an error here shows up as a spurious linear term
    // in the residual, so it has to be far below the smallest t^2 measured
    const double h = 1e-3;
    res.dir_deriv = (-loss(w0 + 2 * h * delta) + 8.0 * loss(w0 + h * delta) -
                     8.0 * loss(w0 - h * delta) + loss(w0 - 2 * h * delta)) /
                    (12.0 * h);
  }

  std::vector<double> log_t, log_r;
  for (double t : res.scales) {
    const double r = std::abs(loss(w0 + t * delta) - f0 - t * res.dir_deriv);
    if (!std::isfinite(r)) throw NumericError("first_order_residual: non-finite residual");
    res.residuals.push_back(r);
    if (r > 1e-14) {  // below this the residual is floating-point noise
      log_t.push_back(std::log(t));
      log_r.push_back(std::log(r));
    }
  }
  res.points_used = static_cast<int>(log_t.size());
  if (res.points_used >= 2) {
    double mt = 0, mr = 0;
    for (int i = 0; i < res.points_used; ++i) {
      mt += log_t[i];
      mr += log_r[i];
    }
    mt /= res.points_used;
    mr /= res.points_used;
    double num = 0, den = 0;
    for (int i = 0; i < res.points_used; ++i) {
      num += (log_t[i] - mt) * (log_r[i] - mr);
      den += (log_t[i] - mt) * (log_t[i] - mt);
    }
    res.slope = num / den;
  }
  return res;
}

}  // namespace fedrec
