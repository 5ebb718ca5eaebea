#pragma once

// Layer profiling: linear CKA alignment across languages and the
// language-specificity score (intra- minus inter-language cosine).

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mute/actv.hpp"
#include "mute/common.hpp"

namespace mute {

inline constexpr double kDegenerateHsic = 1e-12;

/// Biased HSIC: tr(K H L H) / (n-1)^2 with H the centering matrix.
inline double hsic(const Matrix<double>& K, const Matrix<double>& L) {
  const Eigen::Index n = K.rows();
  require(n >= 2, "hsic needs n >= 2");
  require(K.cols() == n && L.rows() == n && L.cols() == n, "hsic needs two n x n matrices");
  // H K H = K - row means - col means + grand mean
  const Eigen::VectorXd rm = K.rowwise().mean();
  const Eigen::RowVectorXd cm = K.colwise().mean();
  const double gm = K.mean();
  double tr = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) tr += (K(i, j) - rm(i) - cm(j) + gm) * L(j, i);
  const double d = static_cast<double>(n - 1);
  return tr / (d * d);
}

inline Matrix<double> gram(const Matrix<double>& X) { return X * X.transpose(); }

/// Linear CKA between two row-aligned representation matrices.
inline double cka(const Matrix<double>& X, const Matrix<double>& Y) {
  require(X.rows() == Y.rows(), "cka needs equal row counts");
  require(X.rows() >= 2, "cka needs n >= 2");
  const Matrix<double> K = gram(X), L = gram(Y);
  const double kk = hsic(K, K), ll = hsic(L, L);
  if (kk < kDegenerateHsic || ll < kDegenerateHsic)
    throw DegeneracyError("degenerate representation: HSIC self-similarity below 1e-12");
  return hsic(K, L) / std::sqrt(kk * ll);
}

namespace detail {

// language -> row indices sorted by semantic_id, languages in first-seen order
inline std::vector<std::pair<std::string, std::vector<int>>> rows_by_language(const ActivationSet& a) {
  std::vector<std::pair<std::string, std::vector<int>>> groups;
  std::map<std::string, std::size_t> slot;
  for (int i = 0; i < a.n_samples; ++i) {
    const auto& lang = a.language[static_cast<std::size_t>(i)];
    auto [it, fresh] = slot.try_emplace(lang, groups.size());
    if (fresh) groups.push_back({lang, {}});
    groups[it->second].second.push_back(i);
  }
  return groups;
}

inline Matrix<double> gather_rows(const Matrix<double>& X, const std::vector<int>& rows) {
  Matrix<double> out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
  return out;
}

}  // namespace detail

/// Align_l: unweighted mean of CKA over all language pairs, per layer.
inline std::vector<double> align_profile(const ActivationSet& a) {
  require(a.pooling == Pooling::last_token, "alignment uses last_token activations");
  auto groups = detail::rows_by_language(a);
  require(groups.size() >= 2, "alignment needs at least 2 languages");
  for (auto& [lang, rows] : groups)
    std::stable_sort(rows.begin(), rows.end(), [&](int x, int y) {
      return a.semantic_id[static_cast<std::size_t>(x)] < a.semantic_id[static_cast<std::size_t>(y)];
    });
  auto ids = [&](const std::vector<int>& rows) {
    std::vector<int> out;
    for (int r : rows) out.push_back(a.semantic_id[static_cast<std::size_t>(r)]);
    return out;
  };
  const auto ref = ids(groups[0].second);
  for (const auto& [lang, rows] : groups)
    if (ids(rows) != ref)
      throw AlignmentError("language '" + lang + "' does not cover the same semantic ids as '" + groups[0].first +
                           "'");

  std::vector<double> out;
  for (const auto& X : a.layers) {
    std::vector<Matrix<double>> grams;
    for (const auto& [lang, rows] : groups) grams.push_back(gram(detail::gather_rows(X, rows)));
    std::vector<double> self;
    for (const auto& K : grams) {
      self.push_back(hsic(K, K));
      if (self.back() < kDegenerateHsic)
        throw DegeneracyError("degenerate representation: HSIC self-similarity below 1e-12");
    }
    double sum = 0;
    int pairs = 0;
    for (std::size_t j = 0; j < grams.size(); ++j)
      for (std::size_t k = j + 1; k < grams.size(); ++k, ++pairs)
        sum += hsic(grams[j], grams[k]) / std::sqrt(self[j] * self[k]);
    out.push_back(sum / pairs);
  }
  return out;
}

struct LrdsTerms {
  double intra = 0;  // mean cosine, same language, different semantics
  double inter = 0;  // mean cosine, different language, different semantics
  double value() const { return intra - inter; }
};

/// Pair means via group sums. Unit vectors are shifted by the first row,
/// u_i = c + r_i, so a pair cosine is |c|^2 + c.r_i + c.r_j + r_i.r_j and
/// over any class the pair total is (|sum r|^2 - sum |r|^2) / 2 plus
/// (m - 1) * sum c.r. The constant |c|^2 cancels in the difference, and
/// near-identical rows lose no precision to it.
inline LrdsTerms lrds_terms(const Matrix<double>& X, const std::vector<std::string>& lang,
                            const std::vector<int>& sem) {
  const Eigen::Index n = X.rows();
  require(n >= 1, "LRDS needs at least one row");
  Matrix<double> U = X;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = X.row(i).norm();
    if (norm > 0) U.row(i) /= norm;
  }
  const RowVector<double> c = U.row(0);
  struct Group {
    RowVector<double> r;
    double sq = 0, lin = 0, count = 0;
    double pairs() const { return count * (count - 1) / 2; }
    double pair_sum() const { return (r.squaredNorm() - sq) / 2 + (count - 1) * lin; }
  };
  const Group empty{RowVector<double>::Zero(X.cols())};
  Group all = empty;
  std::map<std::string, Group> by_lang;
  std::map<int, Group> by_sem;
  std::map<std::pair<std::string, int>, Group> by_both;
  auto add = [&](Group& g, const RowVector<double>& r, double a) {
    g.r += r;
    g.sq += r.squaredNorm();
    g.lin += a;
    g.count += 1;
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& l = lang[static_cast<std::size_t>(i)];
    const int s = sem[static_cast<std::size_t>(i)];
    const RowVector<double> r = U.row(i) - c;
    const double a = c.dot(r);
    add(all, r, a);
    add(by_lang.try_emplace(l, empty).first->second, r, a);
    add(by_sem.try_emplace(s, empty).first->second, r, a);
    add(by_both.try_emplace(std::pair{l, s}, empty).first->second, r, a);
  }
  double same_l = 0, n_same_l = 0, same_s = 0, n_same_s = 0, same_ls = 0, n_same_ls = 0;
  for (const auto& [k, g] : by_lang) same_l += g.pair_sum(), n_same_l += g.pairs();
  for (const auto& [k, g] : by_sem) same_s += g.pair_sum(), n_same_s += g.pairs();
  for (const auto& [k, g] : by_both) same_ls += g.pair_sum(), n_same_ls += g.pairs();

  // same language, different semantics
  const double intra_sum = same_l - same_ls, intra_n = n_same_l - n_same_ls;
  // different language, different semantics (inclusion-exclusion)
  const double inter_sum = all.pair_sum() - same_l - same_s + same_ls;
  const double inter_n = all.pairs() - n_same_l - n_same_s + n_same_ls;
  if (intra_n < 0.5) throw ParameterError("no same-language, different-semantics pairs");
  if (inter_n < 0.5) throw ParameterError("no cross-language, different-semantics pairs");
  const double base = c.squaredNorm();
  return {base + intra_sum / intra_n, base + inter_sum / inter_n};
}

/// LRDS_l per layer from token_mean activations.
inline std::vector<double> lrds_profile(const ActivationSet& a) {
  require(a.pooling == Pooling::token_mean, "LRDS uses token_mean activations");
  std::vector<double> out;
  for (const auto& X : a.layers) out.push_back(lrds_terms(X, a.language, a.semantic_id).value());
  return out;
}

/// 1-based index of the maximum; ties go to the earlier layer.
inline int argmax_layer(const std::vector<double>& v) {
  require(!v.empty(), "empty profile");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int>(best) + 1;
}

inline int argmin_layer(const std::vector<double>& v) {
  require(!v.empty(), "empty profile");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] < v[best]) best = i;
  return static_cast<int>(best) + 1;
}

struct LayerProfile {
  std::vector<double> align;
  std::vector<double> lrds;
  int n_languages = 0;

  int n_layers() const { return static_cast<int>(align.size()); }
  int argmax_cka_layer() const { return argmax_layer(align); }
  int argmin_lrds_layer() const { return argmin_layer(lrds); }
};

inline LayerProfile layer_profile(const ActivationSet& last_token, const ActivationSet& token_mean) {
  require(last_token.n_layers == token_mean.n_layers, "activation sets disagree on layer count");
  LayerProfile p;
  p.align = align_profile(last_token);
  p.lrds = lrds_profile(token_mean);
  p.n_languages = static_cast<int>(detail::rows_by_language(last_token).size());
  return p;
}

inline nlohmann::json to_json(const LayerProfile& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < p.n_layers(); ++l)
    layers.push_back({{"index", l + 1},
                      {"align", p.align[static_cast<std::size_t>(l)]},
                      {"lrds", p.lrds[static_cast<std::size_t>(l)]}});
  return {{"layers", layers},
          {"n_languages", p.n_languages},
          {"pooling", {{"cka", "last_token"}, {"lrds", "token_mean"}}}};
}

inline LayerProfile layer_profile_from_json(const nlohmann::json& j) {
  LayerProfile p;
  for (const auto& l : j.at("layers")) {
    p.align.push_back(l.at("align").get<double>());
    p.lrds.push_back(l.at("lrds").get<double>());
  }
  p.n_languages = j.at("n_languages").get<int>();
  return p;
}

}  // namespace mute
