#pragma once

// Behavioral (exact-answer accuracy, erasure/retention deltas) and
// mechanistic (logit-lens recall) evaluation.

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mute/corpus.hpp"
#include "mute/losses.hpp"
#include "mute/model.hpp"
#include "mute/unlearn.hpp"

namespace mute {

struct AccuracyRow {
  int lang = 0;
  Domain split = Domain::forget;
  long correct = 0;
  long n = 0;
  double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n); }
};

/// Rows sorted by (lang, split); forget before retain.
struct AccuracyTable {
  std::vector<AccuracyRow> rows;

  const AccuracyRow* find(int lang, Domain split) const {
    for (const auto& r : rows)
      if (r.lang == lang && r.split == split) return &r;
    return nullptr;
  }
  double accuracy(int lang, Domain split) const {
    const auto* r = find(lang, split);
    if (!r) throw AlignmentError("no accuracy row for language " + std::to_string(lang));
    return r->accuracy();
  }
  std::vector<int> languages() const {
    std::set<int> s;
    for (const auto& r : rows) s.insert(r.lang);
    return {s.begin(), s.end()};
  }
  /// Unweighted mean over the given languages.
  double mean(const std::vector<int>& langs, Domain split) const {
    require(!langs.empty(), "mean over an empty language group");
    double sum = 0;
    for (int l : langs) sum += accuracy(l, split);
    return sum / static_cast<double>(langs.size());
  }
};

/// Per-sample exact-match under teacher forcing: every answer position's
/// argmax over the full vocabulary must be the answer token.
template <typename T>
std::vector<bool> answer_correct(const MicroModel<T>& model, std::span<const Sample> samples,
                                 std::size_t chunk = 512) {
  require(!samples.empty(), "accuracy needs at least one sample");
  std::vector<bool> out;
  out.reserve(samples.size());
  for (std::size_t begin = 0; begin < samples.size(); begin += chunk) {
    const auto part = samples.subspan(begin, std::min(chunk, samples.size() - begin));
    const Batch batch = make_batch(part);
    const AnswerIndex idx = AnswerIndex::build(part, batch);
    RunOptions opt;
    opt.rows = idx.rows;
    const Activations<T> a = run(model, batch, opt);
    std::vector<bool> ok(part.size(), true);
    for (std::size_t i = 0; i < idx.rows.size(); ++i) {
      Eigen::Index arg;
      a.logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
      if (static_cast<int>(arg) != idx.targets[i]) ok[static_cast<std::size_t>(idx.sample[i])] = false;
    }
    out.insert(out.end(), ok.begin(), ok.end());
  }
  return out;
}

template <typename T>
AccuracyTable qa_accuracy(const MicroModel<T>& model, std::span<const Sample> samples) {
  const auto ok = answer_correct(model, samples);
  std::map<std::pair<int, int>, AccuracyRow> acc;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& r = acc[{samples[i].lang_id, static_cast<int>(samples[i].domain)}];
    r.lang = samples[i].lang_id;
    r.split = samples[i].domain;
    r.n += 1;
    r.correct += ok[i] ? 1 : 0;
  }
  AccuracyTable t;
  for (auto& [k, r] : acc) t.rows.push_back(r);
  return t;
}

struct LanguageDelta {
  int lang = 0;
  bool is_source = false;
  double forget_before = 0, forget_after = 0;
  double retain_before = 0, retain_after = 0;
  double forget_drop = 0;  // before - after, as a fraction
  double retain_drop = 0;
};

struct UnlearnReport {
  double ue_source = 0;
  double ue_transfer = 0;  // 0 when there are no held-out languages
  double mi = 0;
  std::vector<LanguageDelta> per_language;
};

namespace detail {

// (a - b) from the integer counts, so whole-percent inputs give exact drops
inline double count_drop(const AccuracyRow& a, const AccuracyRow& b) {
  if (a.n == b.n) return static_cast<double>(a.correct - b.correct) / static_cast<double>(a.n);
  return a.accuracy() - b.accuracy();
}

}  // namespace detail

inline UnlearnReport unlearning_report(const AccuracyTable& finetuned, const AccuracyTable& unlearned,
                                       const std::vector<int>& source_langs) {
  const auto langs = finetuned.languages();
  if (langs != unlearned.languages()) throw AlignmentError("accuracy tables cover different languages");
  UnlearnReport rep;
  std::vector<double> src, held, retain;
  for (int l : langs) {
    const AccuracyRow *fb = finetuned.find(l, Domain::forget), *fa = unlearned.find(l, Domain::forget);
    const AccuracyRow *rb = finetuned.find(l, Domain::retain), *ra = unlearned.find(l, Domain::retain);
    if (!fb != !fa || !rb != !ra) throw AlignmentError("accuracy tables cover different splits");
    LanguageDelta d;
    d.lang = l;
    d.is_source = std::find(source_langs.begin(), source_langs.end(), l) != source_langs.end();
    if (fb) {
      d.forget_before = fb->accuracy();
      d.forget_after = fa->accuracy();
      d.forget_drop = detail::count_drop(*fb, *fa);
      (d.is_source ? src : held).push_back(d.forget_drop);
    }
    if (rb) {
      d.retain_before = rb->accuracy();
      d.retain_after = ra->accuracy();
      d.retain_drop = detail::count_drop(*rb, *ra);
      retain.push_back(d.retain_after);
    }
    rep.per_language.push_back(d);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  rep.ue_source = mean(src);
  rep.ue_transfer = mean(held);
  rep.mi = mean(retain);
  return rep;
}

inline nlohmann::json to_json(const AccuracyTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"lang", r.lang}, {"split", to_string(r.split)}, {"accuracy", r.accuracy()}, {"n", r.n}});
  return rows;
}

inline nlohmann::json to_json(const UnlearnReport& r) {
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& d : r.per_language)
    deltas.push_back({{"lang", d.lang},
                      {"source", d.is_source},
                      {"forget_before", d.forget_before},
                      {"forget_after", d.forget_after},
                      {"forget_drop", d.forget_drop},
                      {"retain_before", d.retain_before},
                      {"retain_after", d.retain_after},
                      {"retain_drop", d.retain_drop}});
  return {{"ue_source", r.ue_source}, {"ue_transfer", r.ue_transfer}, {"mi", r.mi}, {"per_language_delta", deltas}};
}

/// Evaluation report: unlearned accuracies plus the deltas.
inline nlohmann::json eval_json(const AccuracyTable& unlearned, const AccuracyTable& baseline, const UnlearnReport& r) {
  nlohmann::json j = to_json(r);
  j["per_language"] = to_json(unlearned);
  j["baseline"] = to_json(baseline);
  return j;
}

/// Grid with one line per language: forget/retain accuracy before and after, in percent.
inline std::string eval_csv(const UnlearnReport& r) {
  std::ostringstream os;
  os << "lang,source,forget_before,forget_after,retain_before,retain_after\n";
  os.setf(std::ios::fixed);
  os.precision(1);
  for (const auto& d : r.per_language)
    os << d.lang << ',' << (d.is_source ? 1 : 0) << ',' << 100 * d.forget_before << ',' << 100 * d.forget_after << ','
       << 100 * d.retain_before << ',' << 100 * d.retain_after << '\n';
  return os.str();
}

// --- logit lens -----------------------------------------------------------

struct LensRow {
  int lang = 0;
  Domain split = Domain::forget;
  int layer = 0;
  double recall = 0;  // mean probability of the correct answer token
  long n = 0;
};

struct LensTable {
  std::vector<LensRow> rows;

  double recall(int lang, Domain split, int layer) const {
    for (const auto& r : rows)
      if (r.lang == lang && r.split == split && r.layer == layer) return r.recall;
    throw ParameterError("no lens row for the requested cell");
  }
};

/// Per-sample lens recall at each requested layer: recall[s][k] for layers[k].
template <typename T>
std::vector<std::vector<double>> lens_recall_per_sample(const MicroModel<T>& model, std::span<const Sample> samples,
                                                        const std::vector<int>& layers, std::size_t chunk = 512) {
  require(!samples.empty(), "lens recall needs at least one sample");
  require(!layers.empty(), "lens recall needs at least one layer");
  for (int l : layers) detail::require_layer(l, model.n_layers());
  std::vector<std::vector<double>> out;
  for (std::size_t begin = 0; begin < samples.size(); begin += chunk) {
    const auto part = samples.subspan(begin, std::min(chunk, samples.size() - begin));
    const Batch batch = make_batch(part);
    const AnswerIndex idx = AnswerIndex::build(part, batch);
    const Activations<T> a = run(model, batch, RunOptions{1, -1, false, {}});
    std::vector<std::vector<double>> local(part.size(), std::vector<double>(layers.size(), 0.0));
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const Matrix<T>& h = a.hidden(layers[k]);
      Matrix<T> sel(static_cast<Eigen::Index>(idx.rows.size()), h.cols());
      for (std::size_t i = 0; i < idx.rows.size(); ++i) sel.row(static_cast<Eigen::Index>(i)) = h.row(idx.rows[i]);
      const Matrix<T> p = logit_lens_rows(model, sel);
      for (std::size_t i = 0; i < idx.rows.size(); ++i) {
        const auto s = static_cast<std::size_t>(idx.sample[i]);
        local[s][k] += static_cast<double>(p(static_cast<Eigen::Index>(i), idx.targets[i])) /
                       static_cast<double>(part[s].answer_len());
      }
    }
    out.insert(out.end(), local.begin(), local.end());
  }
  return out;
}

template <typename T>
LensTable lens_recall(const MicroModel<T>& model, std::span<const Sample> samples, const std::vector<int>& layers) {
  const auto per = lens_recall_per_sample(model, samples, layers);
  std::map<std::tuple<int, int, int>, LensRow> acc;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t k = 0; k < layers.size(); ++k) {
      auto& r = acc[{samples[i].lang_id, static_cast<int>(samples[i].domain), layers[k]}];
      r.lang = samples[i].lang_id;
      r.split = samples[i].domain;
      r.layer = layers[k];
      r.recall += per[i][k];
      r.n += 1;
    }
  LensTable t;
  for (auto& [key, r] : acc) {
    r.recall /= static_cast<double>(r.n);
    t.rows.push_back(r);
  }
  return t;
}

inline nlohmann::json to_json(const LensTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back(
        {{"lang", r.lang}, {"split", to_string(r.split)}, {"layer", r.layer}, {"recall", r.recall}, {"n", r.n}});
  return {{"rows", rows}};
}

// --- failure-mode battery ---------------------------------------------------

inline std::vector<int> source_languages(const DatasetSplits& s) {
  std::vector<int> out;
  for (int l = 0; l < s.n_source; ++l) out.push_back(l);
  return out;
}

inline std::vector<int> held_languages(const DatasetSplits& s) {
  std::vector<int> out;
  for (int l = s.n_source; l < s.n_languages; ++l) out.push_back(l);
  return out;
}

template <typename T>
struct BatteryRow {
  int layer = 0;
  AccuracyTable accuracy;
  UnlearnReport report;
  nlohmann::json outcome;
};

template <typename T>
struct BatteryResult {
  AccuracyTable finetuned;
  std::vector<BatteryRow<T>> rows;
};

template <typename T>
using UnlearnFn = std::function<UnlearnOutcome<T>(const MicroModel<T>&, const DatasetSplits&, int layer)>;

/// One unlearn + evaluate cycle per layer with the same algorithm settings.
template <typename T>
BatteryResult<T> failure_mode_battery(const MicroModel<T>& finetuned, const DatasetSplits& splits,
                                      const std::vector<int>& layers, const UnlearnFn<T>& algo) {
  require(!layers.empty(), "battery needs at least one layer");
  BatteryResult<T> out;
  out.finetuned = qa_accuracy(finetuned, splits.all_samples);
  const auto src = source_languages(splits);
  for (int l : layers) {
    const UnlearnOutcome<T> o = algo(finetuned, splits, l);
    BatteryRow<T> row;
    row.layer = l;
    row.accuracy = qa_accuracy(o.model, splits.all_samples);
    row.report = unlearning_report(out.finetuned, row.accuracy, src);
    row.outcome = to_json(o);
    out.rows.push_back(std::move(row));
  }
  return out;
}

template <typename T>
nlohmann::json to_json(const BatteryResult<T>& b) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : b.rows) {
    nlohmann::json j = to_json(r.report);
    j["layer"] = r.layer;
    j["per_language"] = to_json(r.accuracy);
    j["changed_params"] = r.outcome.at("changed_params");
    rows.push_back(j);
  }
  return {{"finetuned", to_json(b.finetuned)}, {"rows", rows}};
}

}  // namespace mute
