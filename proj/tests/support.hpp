#pragma once

// Test-only oracles: central finite differences and random model/input
// generators. Nothing here calls into the backward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mute/model.hpp"

namespace mute::testing {

/// Model with weights scaled up from the default init so gradients are not
/// vanishingly small; LN scales and biases also randomized.
inline MicroModel<double> random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  MicroModel<double> m = init_model<double>(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  m.params.for_each([&](const ParamKey& k, Matrix<double>& t) {
    const bool ln = k.name.find("ln") != std::string::npos;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (ln && k.name.ends_with("scale"))
        t.data()[i] = 1.0 + 0.2 * n(rng) / scale;
      else
        t.data()[i] = n(rng);
    }
  });
  return m;
}

inline std::vector<int> random_tokens(int len, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, vocab - 1);
  std::vector<int> t(static_cast<std::size_t>(len));
  for (int& x : t) x = u(rng);
  return t;
}

/// Central-difference derivative of f w.r.t. every entry of tensor `key`.
inline Matrix<double> fd_gradient(MicroModel<double> model, const ParamKey& key,
                                  const std::function<double(const MicroModel<double>&)>& f, double step = 1e-5) {
  Matrix<double>* target = nullptr;
  model.params.for_each([&](const ParamKey& k, Matrix<double>& t) {
    if (k == key) target = &t;
  });
  Matrix<double> g(target->rows(), target->cols());
  for (Eigen::Index i = 0; i < target->size(); ++i) {
    const double orig = target->data()[i];
    target->data()[i] = orig + step;
    const double fp = f(model);
    target->data()[i] = orig - step;
    const double fm = f(model);
    target->data()[i] = orig;
    g.data()[i] = (fp - fm) / (2 * step);
  }
  return g;
}

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor). The floor keeps entries
/// whose true gradient is zero from dividing round-off by round-off.
inline double max_rel_error(const Matrix<double>& analytic, const Matrix<double>& numeric, double floor = 1e-5) {
  double worst = 0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i], n = numeric.data()[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

}  // namespace mute::testing
