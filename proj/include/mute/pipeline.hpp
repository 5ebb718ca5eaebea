#pragma once

// End-to-end orchestration: configuration schema, seeds and provenance,
// layer selectors, and the corpus -> model -> region -> unlearn stages.

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mute/actv.hpp"
#include "mute/corpus.hpp"
#include "mute/eval.hpp"
#include "mute/metrics.hpp"
#include "mute/region.hpp"
#include "mute/train.hpp"
#include "mute/unlearn.hpp"

namespace mute {

// --- JSON helpers ---------------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
  if (!j.is_object()) throw ParameterError(where + " must be a JSON object");
  const std::set<std::string> ok(known.begin(), known.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ParameterError("unknown key '" + k + "' in " + where);
}

template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os << j.dump(2) << '\n';
}

// --- config sections ------------------------------------------------------

inline nlohmann::json to_json(const CorpusSpec& s) {
  return {{"n_languages", s.n_languages},
          {"n_source", s.n_source},
          {"n_forget_facts", s.n_forget_facts},
          {"n_retain_facts", s.n_retain_facts},
          {"answer_len", s.answer_len},
          {"seed", s.seed},
          {"n_relations", s.n_relations},
          {"n_answer_values", s.n_answer_values},
          {"permute_positions", s.permute_positions}};
}

inline CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"n_languages", "n_source", "n_forget_facts", "n_retain_facts", "answer_len", "seed",
                               "n_relations", "n_answer_values", "permute_positions"},
                              "corpus spec");
  CorpusSpec s;
  try {
    detail::read_opt(j, "n_languages", s.n_languages);
    detail::read_opt(j, "n_source", s.n_source);
    detail::read_opt(j, "n_forget_facts", s.n_forget_facts);
    detail::read_opt(j, "n_retain_facts", s.n_retain_facts);
    detail::read_opt(j, "answer_len", s.answer_len);
    detail::read_opt(j, "seed", s.seed);
    detail::read_opt(j, "n_relations", s.n_relations);
    detail::read_opt(j, "n_answer_values", s.n_answer_values);
    detail::read_opt(j, "permute_positions", s.permute_positions);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("corpus spec: ") + e.what());
  }
  validate(s);
  return s;
}

inline nlohmann::json to_json(const TrainHyper& h) {
  return {{"lr", h.lr}, {"steps", h.steps}, {"batch_size", h.batch_size}, {"seed", h.seed}};
}

inline TrainHyper train_hyper_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"lr", "steps", "batch_size", "seed"}, "train");
  TrainHyper h;
  try {
    detail::read_opt(j, "lr", h.lr);
    detail::read_opt(j, "steps", h.steps);
    detail::read_opt(j, "batch_size", h.batch_size);
    detail::read_opt(j, "seed", h.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("train: ") + e.what());
  }
  return h;
}

/// Model dimensions; vocab_size and max_len come from the corpus.
struct ModelShape {
  int n_layers = 6;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const ModelShape& m) {
  return {{"n_layers", m.n_layers}, {"d_model", m.d_model}, {"n_heads", m.n_heads}, {"d_ff", m.d_ff}, {"seed", m.seed}};
}

inline ModelShape model_shape_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"n_layers", "d_model", "n_heads", "d_ff", "seed"}, "model");
  ModelShape m;
  try {
    detail::read_opt(j, "n_layers", m.n_layers);
    detail::read_opt(j, "d_model", m.d_model);
    detail::read_opt(j, "n_heads", m.n_heads);
    detail::read_opt(j, "d_ff", m.d_ff);
    detail::read_opt(j, "seed", m.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("model: ") + e.what());
  }
  return m;
}

inline ModelConfig model_config_for(const ModelShape& shape, const Corpus& corpus) {
  ModelConfig c;
  c.n_layers = shape.n_layers;
  c.d_model = shape.d_model;
  c.n_heads = shape.n_heads;
  c.d_ff = shape.d_ff;
  c.seed = shape.seed;
  c.vocab_size = corpus.header.vocab_size;
  c.max_len = 1;
  for (const Sample& s : corpus.samples) c.max_len = std::max(c.max_len, static_cast<int>(s.tokens.size()));
  validate(c);
  return c;
}

inline int special_size(const DatasetSplits& s) { return special::lang_tag_base + s.n_languages; }

// --- layer selectors ------------------------------------------------------

struct LayerSelector {
  enum class Kind { auto_default, auto_param, auto_activation, fixed };
  Kind kind = Kind::auto_param;
  int layer = 0;

  bool operator==(const LayerSelector&) const = default;
};

inline LayerSelector parse_layer_selector(const std::string& s) {
  using K = LayerSelector::Kind;
  if (s == "auto") return {K::auto_default, 0};
  if (s == "auto-param") return {K::auto_param, 0};
  if (s == "auto-activation") return {K::auto_activation, 0};
  std::size_t used = 0;
  int l = 0;
  try {
    l = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size())
    throw ParameterError("layer must be auto, auto-param, auto-activation or an integer, got '" + s + "'");
  if (l < 1) throw ParameterError("layer must be >= 1, got " + s);
  return {K::fixed, l};
}

inline std::string to_string(const LayerSelector& sel) {
  switch (sel.kind) {
    case LayerSelector::Kind::auto_default: return "auto";
    case LayerSelector::Kind::auto_param: return "auto-param";
    case LayerSelector::Kind::auto_activation: return "auto-activation";
    case LayerSelector::Kind::fixed: return std::to_string(sel.layer);
  }
  return {};
}

inline std::vector<LayerSelector> parse_layer_list(const std::string& csv) {
  std::vector<LayerSelector> out;
  std::size_t begin = 0;
  while (begin <= csv.size()) {
    const auto end = std::min(csv.find(',', begin), csv.size());
    out.push_back(parse_layer_selector(csv.substr(begin, end - begin)));
    begin = end + 1;
  }
  return out;
}

/// Plain "auto" means the weight-update layer for RMU/SimNPO and the
/// activation layer for SLUG, which reads gradients at that depth.
inline int resolve_layer(const LayerSelector& sel, const AgnosticRegion& region, const std::string& algo) {
  using K = LayerSelector::Kind;
  if (sel.kind == K::fixed) return sel.layer;
  if (region.empty())
    throw SelectionError("no language-agnostic region: cannot resolve --layer " + to_string(sel) +
                         " (lower the threshold scale or pass an explicit layer)");
  K k = sel.kind;
  if (k == K::auto_default) k = algo == "slug" ? K::auto_activation : K::auto_param;
  return k == K::auto_param ? region.l_star_param : region.l_star_activation;
}

// --- algorithms -----------------------------------------------------------

// Toy-scale settings for the 6-layer reference model. A fully memorized
// model has near-zero forget loss, so the single SLUG step needs a large
// scale before any answer flips.
namespace presets {
inline RmuHyper rmu_toy(int layer) { return {layer, 1e-3, 200, {}, 1.0, 0}; }
inline SlugHyper slug_toy(int layer) { return {layer, 1e4, 1.0}; }
inline SimnpoHyper simnpo_toy(int layer) { return {layer, 5e-4, 50, 1.0, 1.0}; }
inline GaHyper ga_toy() { return {1e-3, 10, {}}; }
}  // namespace presets

inline const std::vector<std::string>& algo_names() {
  static const std::vector<std::string> names{"rmu", "slug", "simnpo", "ga-all"};
  return names;
}

/// An algorithm name plus overrides applied on top of its toy preset.
struct AlgoSpec {
  std::string name = "rmu";
  nlohmann::json hyper = nlohmann::json::object();
};

inline void validate(const AlgoSpec& a) {
  const auto& n = algo_names();
  if (std::find(n.begin(), n.end(), a.name) == n.end())
    throw ParameterError("unknown algorithm '" + a.name + "' (expected rmu, slug, simnpo or ga-all)");
  if (!a.hyper.is_object()) throw ParameterError("algorithm hyperparameters must be a JSON object");
  static const std::map<std::string, std::set<std::string>> keys{
      {"rmu", {"lr", "steps", "steering_coeff", "retain_weight", "u_seed"}},
      {"slug", {"step_size", "alpha_slug"}},
      {"simnpo", {"lr", "steps", "beta", "gamma"}},
      {"ga-all", {"lr", "steps", "languages"}}};
  for (const auto& [k, v] : a.hyper.items())
    if (!keys.at(a.name).count(k)) throw ParameterError("'" + k + "' is not a hyperparameter of " + a.name);
}

inline RmuHyper rmu_hyper(const AlgoSpec& a, int layer) {
  RmuHyper h = presets::rmu_toy(layer);
  detail::read_opt(a.hyper, "lr", h.lr);
  detail::read_opt(a.hyper, "steps", h.steps);
  if (a.hyper.contains("steering_coeff") && !a.hyper["steering_coeff"].is_null())
    h.steering_coeff = a.hyper["steering_coeff"].get<double>();
  detail::read_opt(a.hyper, "retain_weight", h.retain_weight);
  detail::read_opt(a.hyper, "u_seed", h.u_seed);
  return h;
}

inline SlugHyper slug_hyper(const AlgoSpec& a, int layer) {
  SlugHyper h = presets::slug_toy(layer);
  detail::read_opt(a.hyper, "step_size", h.step_size);
  detail::read_opt(a.hyper, "alpha_slug", h.alpha_slug);
  return h;
}

inline SimnpoHyper simnpo_hyper(const AlgoSpec& a, int layer) {
  SimnpoHyper h = presets::simnpo_toy(layer);
  detail::read_opt(a.hyper, "lr", h.lr);
  detail::read_opt(a.hyper, "steps", h.steps);
  detail::read_opt(a.hyper, "beta", h.beta);
  detail::read_opt(a.hyper, "gamma", h.gamma);
  return h;
}

inline GaHyper ga_hyper(const AlgoSpec& a) {
  GaHyper h = presets::ga_toy();
  detail::read_opt(a.hyper, "lr", h.lr);
  detail::read_opt(a.hyper, "steps", h.steps);
  detail::read_opt(a.hyper, "languages", h.languages);
  return h;
}

template <typename T>
UnlearnOutcome<T> run_unlearn(const MicroModel<T>& model, const DatasetSplits& splits, const AlgoSpec& a, int layer) {
  validate(a);
  try {
    if (a.name == "rmu") return rmu_unlearn(model, splits, rmu_hyper(a, layer));
    if (a.name == "slug") return slug_unlearn(model, splits, slug_hyper(a, layer));
    if (a.name == "simnpo") return simnpo_unlearn(model, splits, simnpo_hyper(a, layer));
    return ga_all_unlearn(model, splits, ga_hyper(a));
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(a.name + " hyperparameters: " + e.what());
  }
}

template <typename T>
UnlearnFn<T> unlearn_fn(const AlgoSpec& a) {
  validate(a);
  return [a](const MicroModel<T>& m, const DatasetSplits& s, int layer) { return run_unlearn(m, s, a, layer); };
}

// --- pipeline config ------------------------------------------------------

struct PipelineConfig {
  CorpusSpec corpus;
  ModelShape model;
  TrainHyper train;
  double alpha_region = 2.5;
  double epsilon_align = 0.01;
  AlgoSpec algo;
  std::vector<LayerSelector> layers;
  std::uint64_t seed = 0;
};

/// The end-to-end reference setup: 6 languages (3 source), 50 forget and
/// 150 retain facts, a 6-layer d=64 model trained for 3000 steps.
inline PipelineConfig reference_config(std::uint64_t seed = 0) {
  PipelineConfig c;
  c.corpus.n_languages = 6;
  c.corpus.n_source = 3;
  c.corpus.n_forget_facts = 50;
  c.corpus.n_retain_facts = 150;
  c.corpus.answer_len = 1;
  c.train = {1e-3, 3000, 64, 0};
  c.layers = {{LayerSelector::Kind::fixed, 1}, {LayerSelector::Kind::auto_param, 0}, {LayerSelector::Kind::fixed, 6}};
  c.corpus.seed = c.model.seed = c.train.seed = c.seed = seed;
  return c;
}

/// Every seed in the config follows `seed`.
inline void apply_seed(PipelineConfig& c, std::uint64_t seed) {
  c.seed = c.corpus.seed = c.model.seed = c.train.seed = seed;
  if (c.algo.name == "rmu") c.algo.hyper["u_seed"] = seed;
}

inline std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MUTE_SEED");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (errno != 0 || *end != '\0' || *v == '-') throw ParameterError(std::string("MUTE_SEED is not a seed: '") + v + "'");
  return static_cast<std::uint64_t>(s);
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.layers) layers.push_back(to_string(l));
  return {{"corpus", to_json(c.corpus)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"alpha_region", c.alpha_region},
          {"epsilon_align", c.epsilon_align},
          {"algo", c.algo.name},
          {"hyper", c.algo.hyper},
          {"layers", layers},
          {"seed", c.seed}};
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"corpus", "model", "train", "alpha_region", "epsilon_align", "algo", "hyper", "layers", "seed"}, "config");
  PipelineConfig c;
  if (j.contains("corpus")) c.corpus = corpus_spec_from_json(j["corpus"]);
  if (j.contains("model")) c.model = model_shape_from_json(j["model"]);
  if (j.contains("train")) c.train = train_hyper_from_json(j["train"]);
  try {
    detail::read_opt(j, "alpha_region", c.alpha_region);
    detail::read_opt(j, "epsilon_align", c.epsilon_align);
    detail::read_opt(j, "algo", c.algo.name);
    if (j.contains("hyper")) c.algo.hyper = j["hyper"];
    if (j.contains("layers"))
      for (const auto& l : j["layers"])
        c.layers.push_back(parse_layer_selector(l.is_number() ? std::to_string(l.get<int>()) : l.get<std::string>()));
    if (j.contains("seed")) apply_seed(c, j["seed"].get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("config: ") + e.what());
  }
  validate(c.algo);
  require(c.alpha_region > 0, "alpha_region must be > 0");
  require(c.epsilon_align >= 0 && c.epsilon_align < 1, "epsilon_align must lie in [0, 1)");
  return c;
}

// --- provenance -----------------------------------------------------------

inline std::string config_hash(const nlohmann::json& config) { return hex64(fnv1a(config.dump())); }

inline nlohmann::json provenance(const nlohmann::json& config, std::uint64_t seed) {
  return {{"tool_version", std::string(kToolVersion)}, {"config_hash", config_hash(config)}, {"seed", seed}};
}

// --- stages ---------------------------------------------------------------

struct Finetuned {
  Corpus corpus;
  DatasetSplits splits;
  MicroModel<float> model;
  TrainResult train;
};

inline Finetuned finetune(const PipelineConfig& c) {
  Finetuned f;
  f.corpus = generate_corpus(c.corpus);
  f.splits = split(f.corpus);
  f.model = init_model<float>(model_config_for(c.model, f.corpus));
  f.train = mute::train(f.model, f.splits, c.train);
  return f;
}

inline std::vector<ActivationSet> pool_both(const MicroModel<float>& model, const DatasetSplits& splits) {
  return {pool_activations(model, std::span<const Sample>(splits.all_samples), Pooling::last_token, special_size(splits)),
          pool_activations(model, std::span<const Sample>(splits.all_samples), Pooling::token_mean, special_size(splits))};
}

struct Analysis {
  LayerProfile profile;
  AgnosticRegion region;
};

inline Analysis analyze_activations(std::span<const ActivationSet> sets, double alpha, double epsilon) {
  Analysis a;
  a.profile = layer_profile(find_pooling(sets, Pooling::last_token), find_pooling(sets, Pooling::token_mean));
  a.region = select_region(a.profile, alpha, epsilon);
  return a;
}

inline Analysis analyze_model(const MicroModel<float>& model, const DatasetSplits& splits, double alpha,
                              double epsilon) {
  const auto sets = pool_both(model, splits);
  return analyze_activations(sets, alpha, epsilon);
}

inline std::vector<int> resolve_layers(const std::vector<LayerSelector>& sels, const AgnosticRegion& region,
                                       const std::string& algo, int n_layers) {
  require(!sels.empty(), "no layers requested");
  std::vector<int> out;
  for (const auto& s : sels) {
    const int l = resolve_layer(s, region, algo);
    detail::require_layer(l, n_layers);
    out.push_back(l);
  }
  return out;
}

/// Accuracy summaries used by the failure-mode criteria.
struct GroupAccuracy {
  double forget_all = 0;
  double forget_src = 0;
  double forget_held = 0;
  double retain_src = 0;
  double retain_held = 0;
};

inline GroupAccuracy group_accuracy(const AccuracyTable& t, const DatasetSplits& s) {
  const auto src = source_languages(s), held = held_languages(s);
  std::vector<int> all = src;
  all.insert(all.end(), held.begin(), held.end());
  GroupAccuracy g;
  g.forget_all = t.mean(all, Domain::forget);
  g.forget_src = t.mean(src, Domain::forget);
  g.retain_src = t.mean(src, Domain::retain);
  if (!held.empty()) {
    g.forget_held = t.mean(held, Domain::forget);
    g.retain_held = t.mean(held, Domain::retain);
  }
  return g;
}

inline nlohmann::json to_json(const GroupAccuracy& g) {
  return {{"forget_all", g.forget_all},
          {"forget_src", g.forget_src},
          {"forget_held", g.forget_held},
          {"retain_src", g.retain_src},
          {"retain_held", g.retain_held}};
}

}  // namespace mute
