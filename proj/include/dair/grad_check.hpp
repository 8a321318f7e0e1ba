#pragma once

// Central-difference gradient checking for tensor functions.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dair/tensor.hpp"

namespace dair {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_coord = 0;
  bool finite = true;
  std::string failure;  // set when a probe was non-finite

  bool ok(double tol) const { return finite && max_rel_error <= tol; }
};

/// Compares the tape gradient of a scalar function with central differences.
///
/// The error per coordinate is |analytic - numeric| / max(1, |numeric|); the
/// result holds the maximum over every coordinate of every input. When
/// `coords` is non-empty only those flat coordinates of each input are probed.
template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                           const std::vector<Tensor<T>>& points, T h,
                           const std::vector<std::size_t>& coords = {}) {
  GradCheckResult result;
  std::vector<Tensor<T>> leaves;
  leaves.reserve(points.size());
  for (const auto& p : points) leaves.push_back(p.as_parameter());

  Gradients<T> grads;
  {
    Tape<T> tape;
    Tensor<T> loss = f(leaves);
    if (!all_finite(loss)) {
      result.finite = false;
      result.failure = "non-finite value at the base point";
      return result;
    }
    grads = tape.backward(loss);
  }

  for (std::size_t k = 0; k < points.size(); ++k) {
    Tensor<T> analytic = grads[leaves[k]];
    std::vector<T> base = points[k].to_vector();
    auto probe = [&](std::size_t i, T delta) {
      std::vector<Tensor<T>> args(points.begin(), points.end());
      std::vector<T> moved = base;
      moved[i] += delta;
      args[k] = Tensor<T>(points[k].shape(), std::move(moved));
      return f(args).item();
    };
    auto check = [&](std::size_t i) {
      T up = probe(i, h);
      T down = probe(i, -h);
      if (!std::isfinite(up) || !std::isfinite(down)) {
        result.finite = false;
        result.failure = "non-finite value probing input " + std::to_string(k) + " coordinate " + std::to_string(i);
        result.worst_input = k;
        result.worst_coord = i;
        return false;
      }
      double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * static_cast<double>(h));
      double err = std::abs(static_cast<double>(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = k;
        result.worst_coord = i;
      }
      return true;
    };
    if (coords.empty()) {
      for (std::size_t i = 0; i < base.size(); ++i)
        if (!check(i)) return result;
    } else {
      for (std::size_t i : coords)
        if (i < base.size() && !check(i)) return result;
    }
  }
  return result;
}

template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& point, T h) {
  return grad_check<T>([&](const std::vector<Tensor<T>>& xs) { return f(xs[0]); }, std::vector<Tensor<T>>{point}, h);
}

}  // namespace dair
