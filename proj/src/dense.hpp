#pragma once

#include <Eigen/Core>

namespace arwkv::dense {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap view(const double* p, Eigen::Index r, Eigen::Index c) {
  return ConstMatMap(p, r, c);
}
inline MatMap view(double* p, Eigen::Index r, Eigen::Index c) { return MatMap(p, r, c); }

}  // namespace arwkv::dense
