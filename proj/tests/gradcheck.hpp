#pragma once

// Finite-difference gradient checking shared by the unit and acceptance tests.

#include "volrep/autodiff.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace volrep::testing {

/// ||analytic - numeric|| / (||analytic|| + ||numeric||) over all entries of
/// all inputs, numeric gradients by central differences.
inline double gradcheck(const std::function<ad::Var()>& f, std::vector<ad::Var> inputs, double h = 1e-6) {
  for (auto& v : inputs) v.zero_grad();
  ad::backward(f());
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (auto& v : inputs) {
    ad::Matrix analytic = v.has_grad() ? v.grad() : ad::Matrix::Zero(v.rows(), v.cols());
    for (ad::Index i = 0; i < v.value().size(); ++i) {
      const double orig = v.value().data()[i];
      v.mutable_value().data()[i] = orig + h;
      const double up = f().item();
      v.mutable_value().data()[i] = orig - h;
      const double down = f().item();
      v.mutable_value().data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.data()[i];
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
    }
  }
  const double denom = std::sqrt(na) + std::sqrt(nn);
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

}  // namespace volrep::testing
