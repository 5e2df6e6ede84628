#pragma once

#include <vector>

#include "fedrec/types.hpp"

namespace fedrec {

// One layer's raw low-rank update factors for one client. The composed
// update is b_mat * a_mat (d_out x d_in).
struct AdapterPair {
  LayerId layer_id;
  Matrix a_mat;  // r x d_in
  Matrix b_mat;  // d_out x r
  int rank = 0;

  void validate() const;  // throws DimensionError on shape/finiteness issues
};

// A jointly rescaled adapter pair whose composed product has unit Frobenius
// norm. This is the value broadcast by the server; it is never mutated after
// publication. source_magnitude is diagnostic only and never leaves the server.
struct DirectionalComponent {
  ClientId source_client = -1;
  int round = -1;
  LayerId layer_id;
  Matrix a_tilde;
  Matrix b_tilde;
  double source_magnitude = 0.0;

  Matrix compose() const { return b_tilde * a_tilde; }
};

constexpr double kZeroUpdateThreshold = 1e-12;

Matrix compose(const AdapterPair& adapter);

double frob_inner(const Matrix& m1, const Matrix& m2);
double frob_norm(const Matrix& m);

// Joint rescaling by s = ||BA||_F^{-1/2}; throws ZeroUpdateError when the
// composed norm is at or below kZeroUpdateThreshold.
DirectionalComponent normalize_direction(const AdapterPair& adapter, ClientId source_client,
                                         int round);

Matrix weighted_combine(const std::vector<DirectionalComponent>& components,
                        const std::vector<double>& weights);

}  // namespace fedrec
