#include "fedrec/lowrank.hpp"

#include <cmath>
#include <string>

#include "fedrec/errors.hpp"

namespace fedrec {

void AdapterPair::validate() const {
  if (rank < 1) throw DimensionError("AdapterPair " + layer_id + ": rank must be >= 1");
  if (a_mat.rows() != rank)
    throw DimensionError("AdapterPair " + layer_id + ": a_mat must have rank rows");
  if (b_mat.cols() != rank)
    throw DimensionError("AdapterPair " + layer_id + ": b_mat must have rank columns");
  if (rank > std::min(a_mat.cols(), b_mat.rows()))
    throw DimensionError("AdapterPair " + layer_id + ": rank exceeds min(d_in, d_out)");
  if (!a_mat.allFinite() || !b_mat.allFinite())
    throw DimensionError("AdapterPair " + layer_id + ": non-finite entries");
}

Matrix compose(const AdapterPair& adapter) {
  adapter.validate();
  return adapter.b_mat * adapter.a_mat;
}

double frob_inner(const Matrix& m1, const Matrix& m2) {
  if (m1.rows() != m2.rows() || m1.cols() != m2.cols())
    throw DimensionError("frob_inner: shape mismatch");
  return m1.cwiseProduct(m2).sum();
}

double frob_norm(const Matrix& m) { return std::sqrt(frob_inner(m, m)); }

DirectionalComponent normalize_direction(const AdapterPair& adapter, ClientId source_client,
                                         int round) {
  const Matrix product = compose(adapter);
  const double norm = frob_norm(product);
  if (norm <= kZeroUpdateThreshold)
    throw ZeroUpdateError("normalize_direction: ||BA||_F = " + std::to_string(norm) +
                          " for layer " + adapter.layer_id);
  const double s = 1.0 / std::sqrt(norm);
  DirectionalComponent dir;
  dir.source_client = source_client;
  dir.round = round;
  dir.layer_id = adapter.layer_id;
  dir.a_tilde = s * adapter.a_mat;
  dir.b_tilde = s * adapter.b_mat;
  dir.source_magnitude = norm;
  return dir;
}

Matrix weighted_combine(const std::vector<DirectionalComponent>& components,
                        const std::vector<double>& weights) {
  if (components.empty() || components.size() != weights.size())
    throw ContractViolation("weighted_combine: component/weight lists must be nonempty and equal");
  Matrix out = weights[0] * components[0].compose();
  for (std::size_t j = 1; j < components.size(); ++j) {
    if (components[j].layer_id != components[0].layer_id)
      throw DimensionError("weighted_combine: mixed layer_ids");
    Matrix term = components[j].compose();
    if (term.rows() != out.rows() || term.cols() != out.cols())
      throw DimensionError("weighted_combine: shape mismatch across components");
    out += weights[j] * term;
  }
  return out;
}

}  // namespace fedrec
