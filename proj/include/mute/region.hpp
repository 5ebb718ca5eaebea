#pragma once

// Language-agnostic region and intervention-layer selection from a profile.

#include <algorithm>
#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "mute/common.hpp"
#include "mute/metrics.hpp"

namespace mute {

struct Thresholds {
  double tau_align = 0;
  double tau_spec = 0;
  double alpha = 0;
};

inline Thresholds compute_thresholds(const LayerProfile& p, double alpha) {
  require(p.n_layers() >= 1 && p.lrds.size() == p.align.size(), "profile must be non-empty");
  require(alpha > 0, "alpha must be > 0");
  // Neumaier summation keeps the mean of equal values exact
  double sum = 0, comp = 0;
  for (double a : p.align) {
    const double t = sum + a;
    comp += std::abs(sum) >= std::abs(a) ? (sum - t) + a : (a - t) + sum;
    sum = t;
  }
  return {(sum + comp) / p.n_layers(), alpha * *std::min_element(p.lrds.begin(), p.lrds.end()), alpha};
}

inline bool in_region(const LayerProfile& p, const Thresholds& t, int layer) {
  const auto i = static_cast<std::size_t>(layer - 1);
  return p.align[i] >= t.tau_align && p.lrds[i] <= t.tau_spec;
}

/// Sorted 1-based layers satisfying both threshold predicates.
inline std::vector<int> agnostic_region(const LayerProfile& p, const Thresholds& t) {
  std::vector<int> out;
  for (int l = 1; l <= p.n_layers(); ++l)
    if (in_region(p, t, l)) out.push_back(l);
  return out;
}

inline bool is_contiguous(const std::vector<int>& region) {
  for (std::size_t i = 1; i < region.size(); ++i)
    if (region[i] != region[i - 1] + 1) return false;
  return true;
}

/// Earliest layer of the region whose alignment is within a relative
/// epsilon of the region's peak.
inline int select_param_layer(const LayerProfile& p, const std::vector<int>& region, double epsilon_align) {
  if (region.empty()) throw SelectionError("no language-agnostic region");
  require(epsilon_align >= 0 && epsilon_align < 1, "epsilon_align must lie in [0, 1)");
  double peak = p.align[static_cast<std::size_t>(region[0] - 1)];
  for (int l : region) peak = std::max(peak, p.align[static_cast<std::size_t>(l - 1)]);
  const double cut = (1 - epsilon_align) * peak;
  for (int l : region)
    if (p.align[static_cast<std::size_t>(l - 1)] >= cut) return l;
  return region.back();  // unreachable: the peak itself passes
}

inline int select_activation_layer(const std::vector<int>& region) {
  if (region.empty()) throw SelectionError("no language-agnostic region");
  return *std::max_element(region.begin(), region.end());
}

struct AgnosticRegion {
  Thresholds thresholds;
  std::vector<int> layers;
  int l_star_param = 0;       // 0 when the region is empty
  int l_star_activation = 0;
  double epsilon_align = 0.01;

  bool empty() const { return layers.empty(); }
  bool contiguous() const { return is_contiguous(layers); }
};

inline AgnosticRegion select_region(const LayerProfile& p, double alpha, double epsilon_align = 0.01) {
  AgnosticRegion r;
  r.thresholds = compute_thresholds(p, alpha);
  r.layers = agnostic_region(p, r.thresholds);
  r.epsilon_align = epsilon_align;
  if (!r.layers.empty()) {
    r.l_star_param = select_param_layer(p, r.layers, epsilon_align);
    r.l_star_activation = select_activation_layer(r.layers);
  }
  return r;
}

struct SweepEntry {
  double alpha;
  std::vector<int> layers;
};

inline std::vector<SweepEntry> sensitivity_sweep(const LayerProfile& p, const std::vector<double>& alphas) {
  require(!alphas.empty(), "alpha sweep needs at least one value");
  std::vector<SweepEntry> out;
  for (double a : alphas) out.push_back({a, agnostic_region(p, compute_thresholds(p, a))});
  return out;
}

/// Region report. The selected layers are null when the region is empty.
inline nlohmann::json to_json(const AgnosticRegion& r) {
  nlohmann::json j = {{"tau_align", r.thresholds.tau_align},
                      {"tau_spec", r.thresholds.tau_spec},
                      {"alpha", r.thresholds.alpha},
                      {"region", r.layers},
                      {"contiguous", r.contiguous()},
                      {"epsilon_align", r.epsilon_align}};
  if (r.empty()) {
    j["l_star_param"] = nullptr;
    j["l_star_activation"] = nullptr;
  } else {
    j["l_star_param"] = r.l_star_param;
    j["l_star_activation"] = r.l_star_activation;
  }
  return j;
}

inline AgnosticRegion region_from_json(const nlohmann::json& j) {
  AgnosticRegion r;
  r.thresholds = {j.at("tau_align").get<double>(), j.at("tau_spec").get<double>(), j.at("alpha").get<double>()};
  r.layers = j.at("region").get<std::vector<int>>();
  r.epsilon_align = j.at("epsilon_align").get<double>();
  if (!j.at("l_star_param").is_null()) r.l_star_param = j.at("l_star_param").get<int>();
  if (!j.at("l_star_activation").is_null()) r.l_star_activation = j.at("l_star_activation").get<int>();
  return r;
}

}  // namespace mute
