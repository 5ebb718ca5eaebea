#pragma once

// Layer-targeted unlearning: RMU (MLP of one layer), SLUG (attention of one
// layer, single step), SimNPO (one whole block) and all-layer gradient ascent.

#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mute/corpus.hpp"
#include "mute/losses.hpp"
#include "mute/model.hpp"

namespace mute {

struct RmuHyper {
  int layer = 1;
  double lr = 1e-3;
  int steps = 200;
  std::optional<double> steering_coeff{};
  double retain_weight = 1.0;
  std::uint64_t u_seed = 0;
};

struct SlugHyper {
  int layer = 1;
  double step_size = 1.0;   // lambda
  double alpha_slug = 1.0;  // retain weight
};

struct SimnpoHyper {
  int layer = 1;
  double lr = 1e-3;
  int steps = 200;
  double beta = 1.0;
  double gamma = 1.0;
};

struct GaHyper {
  double lr = 1e-3;
  int steps = 10;
  std::vector<int> languages{};  // empty: forget_src; otherwise forget samples of these languages
};

// Settings used for 7-8B models; far too weak or too strong for the toy model.
namespace presets {
inline RmuHyper rmu_large_model(int layer) { return {layer, 1e-5, 500, {}, 1.0, 0}; }
inline SlugHyper slug_large_model(int layer) { return {layer, 32.0, 1.0}; }
inline SimnpoHyper simnpo_large_model(int layer) { return {layer, 5e-5, 200, 1.0, 1.0}; }
}  // namespace presets

template <typename T>
struct UnlearnOutcome {
  std::string algo;
  std::optional<int> layer;
  nlohmann::json hyper;
  MicroModel<T> model;
  std::vector<double> loss_history;
  std::vector<ParamKey> changed;
  nlohmann::json extra = nlohmann::json::object();
};

template <typename T>
nlohmann::json to_json(const UnlearnOutcome<T>& o) {
  nlohmann::json changed = nlohmann::json::array();
  for (const auto& k : o.changed) changed.push_back({layer_label(k.layer), k.name});
  nlohmann::json j = {{"algo", o.algo},          {"hyper", o.hyper}, {"loss_history", o.loss_history},
                      {"changed_params", changed}};
  j["layer"] = o.layer ? nlohmann::json(*o.layer) : nlohmann::json(nullptr);
  for (const auto& [k, v] : o.extra.items()) j[k] = v;
  return j;
}

namespace detail {

inline void require_layer(int layer, int n_layers) {
  if (layer < 1 || layer > n_layers)
    throw ParameterError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(n_layers) + "]");
}

/// params += scale * grads over the tensors present in `grads`.
template <typename T>
void add_scaled(Params<T>& params, const Params<T>& grads, double scale) {
  auto g = Params<T>::flat(grads);
  std::size_t i = 0;
  params.for_each([&](const ParamKey&, Matrix<T>& p) {
    const Matrix<T>& gi = *g[i++];
    if (gi.size() > 0) p += static_cast<T>(scale) * gi;
  });
}

template <typename T>
std::string vector_hash(const RowVector<T>& v) {
  std::string bytes(static_cast<std::size_t>(v.size()) * sizeof(T), '\0');
  std::memcpy(bytes.data(), v.data(), bytes.size());
  return hex64(fnv1a(bytes));
}

}  // namespace detail

/// Steers forget-token states at `layer` toward c * u while pinning retain
/// states to the input model; only that layer's MLP is trained.
template <typename T>
UnlearnOutcome<T> rmu_unlearn(const MicroModel<T>& model, const DatasetSplits& splits, const RmuHyper& h) {
  detail::require_layer(h.layer, model.n_layers());
  require(!splits.forget_src.empty() && !splits.retain_src.empty(), "RMU needs non-empty forget_src and retain_src");
  require(h.lr >= 0 && h.steps >= 1, "RMU needs lr >= 0 and steps >= 1");
  require(!h.steering_coeff || *h.steering_coeff > 0, "steering coefficient must be > 0");
  require(h.retain_weight >= 0, "retain weight must be >= 0");

  typename RmuLoss<T>::Config cfg;
  cfg.layer = h.layer;
  cfg.steering_coeff = h.steering_coeff;
  cfg.retain_weight = h.retain_weight;
  cfg.u_seed = h.u_seed;
  cfg.special_size = special::lang_tag_base + splits.n_languages;
  const RmuLoss<T> loss(model, splits.forget_src, splits.retain_src, cfg);

  UnlearnOutcome<T> out{"rmu", h.layer, {}, model, {}, {}};
  const std::string u_hash = detail::vector_hash(loss.direction());
  const Scope scope = Scope::at(h.layer, ParamSubset::mlp_only);
  Adam<T> opt({h.lr});
  for (int step = 0; step < h.steps; ++step) {
    auto lg = loss.value_and_grad(out.model, scope);
    out.loss_history.push_back(static_cast<double>(lg.value));
    opt.step(out.model.params, lg.grads);
  }
  if (detail::vector_hash(loss.direction()) != u_hash) throw Error("steering direction changed during the run");
  out.hyper = {{"layer", h.layer},
               {"lr", h.lr},
               {"steps", h.steps},
               {"steering_coeff", loss.steering_coeff()},
               {"retain_weight", h.retain_weight},
               {"u_seed", h.u_seed}};
  out.extra["u_hash"] = u_hash;
  out.changed = changed_params(model, out.model);
  return out;
}

/// The combined SLUG direction: grad CE(forget) - alpha * grad CE(retain),
/// restricted to the attention matrices of `layer`.
template <typename T>
Params<T> slug_direction(const MicroModel<T>& model, const DatasetSplits& splits, const SlugHyper& h,
                         double* forget_loss = nullptr) {
  detail::require_layer(h.layer, model.n_layers());
  require(!splits.forget_src.empty(), "SLUG needs non-empty forget_src");
  require(h.step_size >= 0 && h.alpha_slug >= 0, "SLUG needs step_size >= 0 and alpha_slug >= 0");
  const Scope scope = Scope::at(h.layer, ParamSubset::attention_only);
  CrossEntropyLoss<T> forget(splits.forget_src);
  forget.cache_prefix(model, h.layer);
  auto delta = forget.value_and_grad(model, scope);
  if (forget_loss) *forget_loss = static_cast<double>(delta.value);
  if (h.alpha_slug != 0) {
    require(!splits.retain_src.empty(), "SLUG with alpha_slug > 0 needs non-empty retain_src");
    CrossEntropyLoss<T> retain(splits.retain_src);
    retain.cache_prefix(model, h.layer);
    detail::add_scaled(delta.grads, retain.value_and_grad(model, scope).grads, -h.alpha_slug);
  }
  return std::move(delta.grads);
}

template <typename T>
UnlearnOutcome<T> slug_unlearn(const MicroModel<T>& model, const DatasetSplits& splits, const SlugHyper& h) {
  double f0 = 0;
  const Params<T> delta = slug_direction(model, splits, h, &f0);
  UnlearnOutcome<T> out{"slug", h.layer, {}, model, {f0}, {}};
  if (h.step_size != 0) detail::add_scaled(out.model.params, delta, h.step_size);
  out.hyper = {{"layer", h.layer}, {"step_size", h.step_size}, {"alpha_slug", h.alpha_slug}};
  out.changed = changed_params(model, out.model);
  return out;
}

/// Minimizes the length-normalized SimNPO loss on forget_src, training the
/// whole block at `layer`.
template <typename T>
UnlearnOutcome<T> simnpo_unlearn(const MicroModel<T>& model, const DatasetSplits& splits, const SimnpoHyper& h) {
  detail::require_layer(h.layer, model.n_layers());
  require(!splits.forget_src.empty(), "SimNPO needs non-empty forget_src");
  require(h.beta > 0 && h.lr >= 0 && h.steps >= 1, "SimNPO needs beta > 0, lr >= 0 and steps >= 1");
  SimNpoLoss<T> loss(splits.forget_src, {h.beta, h.gamma});
  loss.cache_prefix(model, h.layer);
  UnlearnOutcome<T> out{"simnpo", h.layer, {}, model, {}, {}};
  const Scope scope = Scope::at(h.layer);
  Adam<T> opt({h.lr});
  for (int step = 0; step < h.steps; ++step) {
    auto lg = loss.value_and_grad(out.model, scope);
    out.loss_history.push_back(static_cast<double>(lg.value));
    opt.step(out.model.params, lg.grads);
  }
  out.hyper = {{"layer", h.layer}, {"lr", h.lr}, {"steps", h.steps}, {"beta", h.beta}, {"gamma", h.gamma}};
  out.changed = changed_params(model, out.model);
  return out;
}

template <typename T>
std::vector<Sample> ga_forget_batch(const DatasetSplits& splits, const GaHyper& h) {
  if (h.languages.empty()) return splits.forget_src;
  std::vector<Sample> out;
  for (const Sample& s : splits.all_samples)
    if (s.domain == Domain::forget && std::find(h.languages.begin(), h.languages.end(), s.lang_id) != h.languages.end())
      out.push_back(s);
  return out;
}

/// Plain gradient ascent on forget cross-entropy over every parameter.
template <typename T>
UnlearnOutcome<T> ga_all_unlearn(const MicroModel<T>& model, const DatasetSplits& splits, const GaHyper& h) {
  require(h.lr >= 0 && h.steps >= 1, "GA needs lr >= 0 and steps >= 1");
  const auto batch = ga_forget_batch<T>(splits, h);
  require(!batch.empty(), "GA forget batch is empty");
  CrossEntropyLoss<T> loss(batch);
  UnlearnOutcome<T> out{"ga_all", std::nullopt, {}, model, {}, {}};
  for (int step = 0; step < h.steps; ++step) {
    auto lg = loss.value_and_grad(out.model, Scope::everything());
    out.loss_history.push_back(static_cast<double>(lg.value));
    if (h.lr != 0) detail::add_scaled(out.model.params, lg.grads, h.lr);
  }
  out.hyper = {{"lr", h.lr}, {"steps", h.steps}, {"languages", h.languages}};
  out.changed = changed_params(model, out.model);
  return out;
}

}  // namespace mute
