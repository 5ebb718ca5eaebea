#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance suite. Deliberately naive: explicit sums and enumerations.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/QR>

#include "mute/common.hpp"

namespace mute::oracle {

/// tr(K H L H) / (n-1)^2 with H materialized and every product summed by hand.
inline double hsic_bruteforce(const Matrix<double>& K, const Matrix<double>& L) {
  const int n = static_cast<int>(K.rows());
  auto H = [n](int i, int j) { return (i == j ? 1.0 : 0.0) - 1.0 / n; };
  double tr = 0;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c)
        for (int d = 0; d < n; ++d) tr += K(a, b) * H(b, c) * L(c, d) * H(d, a);
  return tr / ((n - 1.0) * (n - 1.0));
}

inline double cka_bruteforce(const Matrix<double>& X, const Matrix<double>& Y) {
  const Matrix<double> K = X * X.transpose(), L = Y * Y.transpose();
  return hsic_bruteforce(K, L) / std::sqrt(hsic_bruteforce(K, K) * hsic_bruteforce(L, L));
}

inline double cosine(const Matrix<double>& X, int i, int j) {
  return X.row(i).dot(X.row(j)) / (X.row(i).norm() * X.row(j).norm());
}

/// Explicit enumeration of all unordered pairs.
inline double lrds_enumerate(const Matrix<double>& X, const std::vector<std::string>& lang, const std::vector<int>& sem) {
  double intra = 0, inter = 0;
  long n_intra = 0, n_inter = 0;
  const int n = static_cast<int>(X.rows());
  for (int p = 0; p < n; ++p)
    for (int q = p + 1; q < n; ++q) {
      if (sem[p] == sem[q]) continue;
      const double s = cosine(X, p, q);
      if (lang[p] == lang[q]) {
        intra += s;
        ++n_intra;
      } else {
        inter += s;
        ++n_inter;
      }
    }
  return intra / static_cast<double>(n_intra) - inter / static_cast<double>(n_inter);
}

inline Matrix<double> random_matrix(int rows, int cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0, sd);
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Matrix<double> random_orthogonal(int d, std::mt19937_64& rng) {
  const Eigen::MatrixXd a = random_matrix(d, d, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  return Eigen::MatrixXd(qr.householderQ());
}

/// Layers l (1-based) with align[l] >= tau_align and lrds[l] <= tau_spec,
/// thresholds recomputed from scratch.
inline std::vector<int> region_bruteforce(const std::vector<double>& align, const std::vector<double>& lrds,
                                          double alpha) {
  double mean = 0, mn = lrds[0];
  for (double a : align) mean += a;
  mean /= static_cast<double>(align.size());
  for (double v : lrds) mn = std::min(mn, v);
  std::vector<int> out;
  for (std::size_t i = 0; i < align.size(); ++i)
    if (align[i] >= mean && lrds[i] <= alpha * mn) out.push_back(static_cast<int>(i) + 1);
  return out;
}

}  // namespace mute::oracle
