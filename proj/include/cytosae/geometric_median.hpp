#pragma once

#include "cytosae/common.hpp"

namespace cytosae {

struct GeometricMedianResult {
  Vector<double> point;
  std::size_t iterations = 0;
  bool converged = false;
};

// Weiszfeld iterations with the Vardi-Zhang correction for iterates that land
// on a data point. Rows of `points` are the samples. Starts from the
// coordinate-wise mean and stops once an update moves less than `tol`.
inline GeometricMedianResult geometric_median(const RowMatrix<double>& points, double tol = 1e-6,
                                              std::size_t max_iter = 1000) {
  if (points.rows() == 0) throw DataError("geometric median of empty point set");
  if (!points.allFinite()) throw DataError("geometric median input contains non-finite values");
  if (!(tol > 0)) throw ConfigError("geometric median tolerance must be positive");

  GeometricMedianResult r;
  r.point = points.colwise().mean().transpose();
  if (points.rows() == 1) {
    r.point = points.row(0).transpose();
    r.converged = true;
    return r;
  }

  constexpr double coincide = 1e-12;
  const Eigen::Index d = points.cols();
  for (r.iterations = 0; r.iterations < max_iter;) {
    ++r.iterations;
    Vector<double> weighted = Vector<double>::Zero(d);
    double weight_sum = 0;
    std::size_t on_point = 0;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      const double dist = (points.row(i).transpose() - r.point).norm();
      if (dist < coincide) {
        ++on_point;
        continue;
      }
      weighted += points.row(i).transpose() / dist;
      weight_sum += 1.0 / dist;
    }
    if (weight_sum == 0) {  // every sample coincides with the iterate
      r.converged = true;
      break;
    }
    Vector<double> next = weighted / weight_sum;
    if (on_point > 0) {
      const Vector<double> pull = (weighted - weight_sum * r.point);
      const double pull_norm = pull.norm();
      if (pull_norm <= static_cast<double>(on_point)) {  // data point is optimal
        r.converged = true;
        break;
      }
      const double gamma = static_cast<double>(on_point) / pull_norm;
      next = (1.0 - gamma) * next + gamma * r.point;
    }
    const double moved = (next - r.point).norm();
    r.point = std::move(next);
    if (moved < tol) {
      r.converged = true;
      break;
    }
  }
  return r;
}

inline double sum_of_distances(const RowMatrix<double>& points, const Vector<double>& m) {
  return (points.rowwise() - m.transpose()).rowwise().norm().sum();
}

}  // namespace cytosae
