#pragma once

// Shared test utilities: independent oracles (finite differences, brute
// force) live here, never in the library they check.

#include <cmath>
#include <random>
#include <vector>

#include "sureid/rng.hpp"
#include "sureid/tensor.hpp"

namespace testing_support {

inline std::mt19937_64 rng(uint64_t seed) { return std::mt19937_64(seed); }

template <typename T>
sureid::Tensor<T> random_tensor(sureid::Shape shape, std::mt19937_64& g, T lo = T(-1),
                                T hi = T(1)) {
  auto t = sureid::Tensor<T>::zeros(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(d(g));
  return t;
}

template <typename T>
sureid::Tensor<T> random_param(sureid::Shape shape, std::mt19937_64& g, T lo = T(-1), T hi = T(1)) {
  auto t = random_tensor<T>(std::move(shape), g, lo, hi);
  auto p = sureid::Tensor<T>::param_from(t.shape(), std::vector<T>(t.data(), t.data() + t.numel()));
  return p;
}

struct GradCheckReport {
  double max_err = 0.0;  // worst scaled error over checked coordinates
  int checked = 0;
};

/// Central finite-difference oracle. `forward` must be a deterministic pure
/// function of the parameter values; it receives a tape pointer (non-null for
/// the analytic pass, null for the perturbed value-only passes) and returns a
/// scalar tensor. Error per coordinate is |analytic - fd| / max(|analytic|,
/// |fd|), reported as 0 when the absolute gap is below `atol` (finite
/// difference noise floor).
template <typename F>
GradCheckReport grad_check(std::vector<sureid::Tensor<double>*> params, F&& forward,
                           int num_coords, std::mt19937_64& g, double h = 1e-5,
                           double atol = 1e-7) {
  using sureid::Tape;
  for (auto* p : params) p->zero_grad();
  Tape<double> tape;
  auto loss = forward(&tape);
  tape.backward(loss);

  std::vector<std::pair<int, int64_t>> coords;
  int64_t total = 0;
  for (auto* p : params) total += p->numel();
  std::uniform_int_distribution<int64_t> pick(0, total - 1);
  for (int i = 0; i < num_coords; ++i) {
    int64_t flat = pick(g);
    int pi = 0;
    while (flat >= params[static_cast<size_t>(pi)]->numel()) {
      flat -= params[static_cast<size_t>(pi)]->numel();
      ++pi;
    }
    coords.emplace_back(pi, flat);
  }

  GradCheckReport rep;
  for (auto [pi, idx] : coords) {
    auto* p = params[static_cast<size_t>(pi)];
    const double saved = p->data()[idx];
    p->data()[idx] = saved + h;
    const double fp = forward(nullptr).item();
    p->data()[idx] = saved - h;
    const double fm = forward(nullptr).item();
    p->data()[idx] = saved;
    const double fd = (fp - fm) / (2.0 * h);
    const double an = p->grad()[idx];
    const double gap = std::abs(an - fd);
    const double err = gap <= atol ? 0.0 : gap / std::max(std::abs(an), std::abs(fd));
    rep.max_err = std::max(rep.max_err, err);
    ++rep.checked;
  }
  return rep;
}

}  // namespace testing_support
