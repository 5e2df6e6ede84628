#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace fedrec {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ItemId = std::int64_t;
using ClientId = int;
using LayerId = std::string;

}  // namespace fedrec
