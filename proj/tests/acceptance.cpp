// Acceptance suite: one PASS/FAIL line per criterion, details indented below.
// Exit status is non-zero when any criterion fails.
//
//   acceptance            run everything
//   acceptance A1,A3      run a subset

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "mute/pipeline.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mute;

namespace {

struct Verdict {
  bool pass = true;
  std::vector<std::string> log;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      log.push_back("violated: " + what);
    }
  }
  void note(const std::string& s) { log.push_back(s); }
};

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

// --- A1 -------------------------------------------------------------------

Verdict metric_properties() {
  Verdict v;
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> rows(4, 30), cols(2, 12);
  double self = 0, sym = 0, orth = 0, scale = 0, shift = 0, lo = 1, hi = 0;
  for (int t = 0; t < 200; ++t) {
    const int n = rows(rng), dx = cols(rng), dy = cols(rng);
    const Matrix<double> X = oracle::random_matrix(n, dx, rng), Y = oracle::random_matrix(n, dy, rng);
    const double c = cka(X, Y);
    self = std::max(self, std::abs(cka(X, X) - 1.0));
    sym = std::max(sym, std::abs(c - cka(Y, X)));
    const Matrix<double> Q = oracle::random_orthogonal(dx, rng);
    orth = std::max(orth, std::abs(cka(X * Q, Y) - c));
    const double s = std::exp(std::uniform_real_distribution<double>(-3, 3)(rng));
    scale = std::max(scale, std::abs(cka(s * X, Y) - c));
    const RowVector<double> b = oracle::random_matrix(1, dx, rng, 5.0);
    shift = std::max(shift, std::abs(cka(X.rowwise() + b, Y) - c));
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  v.check(self <= 1e-10, "CKA(X,X) = 1 within 1e-10 (worst " + sci(self) + ")");
  v.check(sym <= 1e-12, "CKA symmetric (worst " + sci(sym) + ")");
  v.check(orth <= 1e-8, "orthogonal invariance within 1e-8 (worst " + sci(orth) + ")");
  v.check(scale <= 1e-10, "isotropic scaling within 1e-10 (worst " + sci(scale) + ")");
  v.check(shift <= 1e-8, "translation invariance within 1e-8 (worst " + sci(shift) + ")");
  v.check(lo >= -1e-6 && hi <= 1 + 1e-6, "CKA range [" + num(lo) + ", " + num(hi) + "]");

  double ident = 0, onehot = 0, enumerate = 0;
  for (int t = 0; t < 200; ++t) {
    const int n_lang = std::uniform_int_distribution<int>(2, 5)(rng);
    const int n_sem = std::uniform_int_distribution<int>(2, 50 / n_lang)(rng);
    const int n = n_lang * n_sem, d = std::uniform_int_distribution<int>(n_lang, 16)(rng);
    std::vector<std::string> lang;
    std::vector<int> sem;
    for (int l = 0; l < n_lang; ++l)
      for (int s = 0; s < n_sem; ++s) {
        lang.push_back("L" + std::to_string(l));
        sem.push_back(s);
      }
    // shuffle row order so grouping does not rely on layout
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::string> plang;
    std::vector<int> psem;
    for (int i : perm) {
      plang.push_back(lang[static_cast<std::size_t>(i)]);
      psem.push_back(sem[static_cast<std::size_t>(i)]);
    }
    const RowVector<double> row = oracle::random_matrix(1, d, rng);
    const Matrix<double> same = row.replicate(n, 1);
    ident = std::max(ident, std::abs(lrds_terms(same, plang, psem).value()));
    Matrix<double> hot = Matrix<double>::Zero(n, d);
    for (int i = 0; i < n; ++i) hot(i, std::stoi(plang[static_cast<std::size_t>(i)].substr(1))) = 1.0;
    onehot = std::max(onehot, std::abs(lrds_terms(hot, plang, psem).value() - 1.0));
    const Matrix<double> X = oracle::random_matrix(n, d, rng);
    enumerate =
        std::max(enumerate, std::abs(lrds_terms(X, plang, psem).value() - oracle::lrds_enumerate(X, plang, psem)));
  }
  v.check(ident == 0.0, "LRDS of identical rows is exactly 0 (worst " + sci(ident) + ")");
  v.check(onehot <= 1e-12, "LRDS of per-language one-hots is 1 within 1e-12 (worst " + sci(onehot) + ")");
  v.check(enumerate <= 1e-12, "LRDS equals pair enumeration within 1e-12 (worst " + sci(enumerate) + ")");
  v.note("200 trials per property; worst CKA errors " + sci(self) + " / " + sci(orth) + " / " + sci(shift) +
         ", LRDS enumeration " + sci(enumerate));
  return v;
}

// --- A2 -------------------------------------------------------------------

Verdict reference_thresholds() {
  Verdict v;
  struct Row {
    const char* model;
    double mean_cka, min_lrds, alpha, reported;
  };
  const Row rows[] = {{"Llama-3.1-8B", 0.647, 0.0039, 2.5, 0.0096},
                      {"BLOOM-7b1", 0.642, 0.0017, 4.4, 0.0073},
                      {"Qwen-2.5-7B", 0.512, 0.0287, 1.5, 0.0441}};
  const double expected[] = {0.00975, 0.00748, 0.04305};
  for (std::size_t i = 0; i < 3; ++i) {
    const Row& r = rows[i];
    // 32 layers whose align mean is the reference value
    LayerProfile p;
    p.n_languages = 7;
    p.align.assign(32, r.mean_cka);
    p.lrds.assign(32, 0.05);
    p.lrds[10] = r.min_lrds;
    const Thresholds t = compute_thresholds(p, r.alpha);
    const double rel = std::abs(t.tau_spec - r.reported) / r.reported;
    v.check(std::abs(t.tau_spec - expected[i]) <= 1e-12,
            std::string(r.model) + " recomputed tau_spec " + num(t.tau_spec, 6) + " == " + num(expected[i], 6));
    v.check(rel <= 0.05, std::string(r.model) + " within 5% of reported");
    v.note(std::string(r.model) + ": alpha " + num(r.alpha, 1) + " x min LRDS " + num(r.min_lrds) + " = " +
           num(t.tau_spec, 5) + " vs reported " + num(r.reported) + " (relative gap " + num(100 * rel, 2) +
           "%, the reported figure is rounded)");
    if (i == 0) v.check(t.tau_align == 0.647, "Llama tau_align is exactly 0.647 (got " + num(t.tau_align, 17) + ")");
  }
  return v;
}

// --- A3 -------------------------------------------------------------------

Verdict region_oracle() {
  Verdict v;
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0, 1);
  int mismatches = 0, monotone_fail = 0, selection_fail = 0, nonempty = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + static_cast<int>(u(rng) * 32);
    LayerProfile p;
    p.n_languages = 3;
    for (int i = 0; i < n; ++i) {
      p.align.push_back(u(rng));
      p.lrds.push_back(0.001 + 0.1 * u(rng));
    }
    const double a1 = 0.5 + 4 * u(rng), a2 = a1 + 3 * u(rng);
    const double eps = 0.05 * u(rng);
    const auto r = select_region(p, a1, eps);
    if (r.layers != oracle::region_bruteforce(p.align, p.lrds, a1)) ++mismatches;
    const auto wide = agnostic_region(p, compute_thresholds(p, a2));
    if (!std::includes(wide.begin(), wide.end(), r.layers.begin(), r.layers.end())) ++monotone_fail;
    if (r.empty()) continue;
    ++nonempty;
    // weight-update layer: earliest member within eps of the best align in the region
    double best = -1;
    for (int l : r.layers) best = std::max(best, p.align[static_cast<std::size_t>(l - 1)]);
    int earliest = 0;
    for (int l : r.layers)
      if (p.align[static_cast<std::size_t>(l - 1)] >= (1 - eps) * best) {
        earliest = l;
        break;
      }
    const bool member = std::find(r.layers.begin(), r.layers.end(), r.l_star_param) != r.layers.end();
    if (!member || r.l_star_param != earliest) ++selection_fail;
    if (r.l_star_activation != *std::max_element(r.layers.begin(), r.layers.end())) ++selection_fail;
  }
  v.check(mismatches == 0, std::to_string(mismatches) + " region mismatches vs brute force");
  v.check(monotone_fail == 0, std::to_string(monotone_fail) + " alpha-monotonicity violations");
  v.check(selection_fail == 0, std::to_string(selection_fail) + " layer-selection violations");
  v.check(nonempty > 100, "enough non-empty regions exercised (" + std::to_string(nonempty) + ")");
  v.note("1000 profiles, " + std::to_string(nonempty) + " with a non-empty region");
  return v;
}

// --- A4 -------------------------------------------------------------------

struct GradFixture {
  DatasetSplits splits;
  ModelConfig cfg;
  int special = 0;

  explicit GradFixture(int answer_len) {
    CorpusSpec spec;
    spec.n_languages = 2;
    spec.n_source = 1;
    spec.n_forget_facts = 2;
    spec.n_retain_facts = 2;
    spec.answer_len = answer_len;
    spec.n_relations = 2;
    spec.n_answer_values = 3;
    spec.seed = 5;
    const Corpus c = generate_corpus(spec);
    splits = split(c);
    special = special::lang_tag_base + c.header.n_languages;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.vocab_size = 40;
    cfg.max_len = 10;
  }
};

template <typename Loss>
double fd_worst(const MicroModel<double>& model, const Loss& loss, const Scope& scope) {
  const Gradients<double> g = grad(model, loss, scope);
  double worst = 0;
  for (const auto& [key, analytic] : g.tensors) {
    const auto numeric =
        testing::fd_gradient(model, key, [&](const MicroModel<double>& m) { return loss.value(m); }, 1e-5);
    worst = std::max(worst, testing::max_rel_error(analytic, numeric));
  }
  return worst;
}

std::vector<Scope> every_scope(int n_layers) {
  std::vector<Scope> s{Scope::everything()};
  for (int l = 1; l <= n_layers; ++l)
    for (auto sub : {ParamSubset::all, ParamSubset::attention_only, ParamSubset::mlp_only}) s.push_back(Scope::at(l, sub));
  return s;
}

Verdict gradient_correctness() {
  Verdict v;
  double ce = 0, simnpo = 0, rmu = 0, slug = 0;
  {
    GradFixture f(1);
    const auto model = testing::random_model(f.cfg, 11);
    CrossEntropyLoss<double> loss(f.splits.all_samples);
    for (const Scope& s : every_scope(2)) ce = std::max(ce, fd_worst(model, loss, s));
  }
  {
    GradFixture f(2);
    const auto model = testing::random_model(f.cfg, 12);
    for (double gamma : {0.0, 1.0}) {
      SimNpoLoss<double> loss(f.splits.forget_src, {1.0, gamma});
      for (const Scope& s : every_scope(2)) simnpo = std::max(simnpo, fd_worst(model, loss, s));
    }
  }
  {
    GradFixture f(1);
    const auto frozen = testing::random_model(f.cfg, 13), other = testing::random_model(f.cfg, 14);
    for (int layer : {1, 2}) {
      RmuLoss<double>::Config rc;
      rc.layer = layer;
      rc.u_seed = 3;
      rc.special_size = f.special;
      RmuLoss<double> loss(frozen, f.splits.forget_src, f.splits.retain_src, rc);
      auto m = frozen;
      m.params.layers[static_cast<std::size_t>(layer - 1)] = other.params.layers[static_cast<std::size_t>(layer - 1)];
      for (auto sub : {ParamSubset::all, ParamSubset::attention_only, ParamSubset::mlp_only})
        rmu = std::max(rmu, fd_worst(m, loss, Scope::at(layer, sub)));
    }
  }
  {
    GradFixture f(1);
    const auto model = testing::random_model(f.cfg, 15);
    CrossEntropyLoss<double> forget(f.splits.forget_src), retain(f.splits.retain_src);
    for (int layer : {1, 2}) {
      const SlugHyper h{layer, 1.0, 0.8};
      const Params<double> dir = slug_direction(model, f.splits, h);
      Params<double>::flat(dir);
      std::size_t i = 0;
      const auto flat = Params<double>::flat(dir);
      model.params.for_each([&](const ParamKey& k, const Matrix<double>&) {
        const Matrix<double>& d = *flat[i++];
        if (d.size() == 0) return;
        const auto numeric = testing::fd_gradient(
            model, k, [&](const MicroModel<double>& m) { return forget.value(m) - 0.8 * retain.value(m); }, 1e-5);
        slug = std::max(slug, testing::max_rel_error(d, numeric));
      });
    }
  }
  v.check(ce < 1e-4, "cross-entropy max relative error " + sci(ce));
  v.check(simnpo < 1e-4, "SimNPO max relative error " + sci(simnpo));
  v.check(rmu < 1e-4, "RMU max relative error " + sci(rmu));
  v.check(slug < 1e-4, "SLUG direction max relative error " + sci(slug));
  v.note("central differences, step 1e-5, d=8 N=2 vocab=40: CE " + sci(ce) + ", SimNPO " + sci(simnpo) + ", RMU " +
         sci(rmu) + ", SLUG " + sci(slug));
  return v;
}

// --- A5 -------------------------------------------------------------------

// Independent tensor diff: byte comparison of every tensor in checkpoint order.
std::set<ParamKey> bitwise_diff(const MicroModel<float>& a, const MicroModel<float>& b) {
  std::vector<std::pair<ParamKey, const Matrix<float>*>> ta, tb;
  a.params.for_each([&](const ParamKey& k, const Matrix<float>& m) { ta.emplace_back(k, &m); });
  b.params.for_each([&](const ParamKey& k, const Matrix<float>& m) { tb.emplace_back(k, &m); });
  std::set<ParamKey> out;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    const auto& x = *ta[i].second;
    const auto& y = *tb[i].second;
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())))
      out.insert(ta[i].first);
  }
  return out;
}

Verdict frozen_parameters() {
  Verdict v;
  PipelineConfig cfg;
  cfg.corpus.n_languages = 3;
  cfg.corpus.n_source = 2;
  cfg.corpus.n_forget_facts = 8;
  cfg.corpus.n_retain_facts = 8;
  cfg.corpus.answer_len = 2;
  cfg.corpus.n_relations = 2;
  cfg.corpus.n_answer_values = 4;
  cfg.model = {3, 16, 2, 32, 0};
  cfg.train = {3e-3, 200, 32, 0};
  const Finetuned f = finetune(cfg);
  const std::map<std::string, std::set<std::string>> declared{
      {"rmu", {"W_1", "b_1", "W_2", "b_2"}},
      {"slug", {"W_q", "W_k", "W_v", "W_o"}},
      {"simnpo",
       {"ln1_scale", "ln1_bias", "W_q", "W_k", "W_v", "W_o", "ln2_scale", "ln2_bias", "W_1", "b_1", "W_2", "b_2"}}};
  const std::map<std::string, nlohmann::json> hyper{
      {"rmu", {{"lr", 1e-2}, {"steps", 20}}}, {"slug", {{"step_size", 50.0}}}, {"simnpo", {{"lr", 1e-2}, {"steps", 20}}}};
  int runs = 0;
  for (const auto& [algo, names] : declared)
    for (int layer = 1; layer <= 3; ++layer) {
      const auto out = run_unlearn(f.model, f.splits, AlgoSpec{algo, hyper.at(algo)}, layer);
      const auto diff = bitwise_diff(f.model, out.model);
      bool inside = !diff.empty();
      for (const auto& k : diff) inside = inside && k.layer == layer && names.count(k.name);
      v.check(inside, algo + " at layer " + std::to_string(layer) + " changed " + std::to_string(diff.size()) +
                          " tensors, all inside the declared set");
      v.check(std::set<ParamKey>(out.changed.begin(), out.changed.end()) == diff,
              algo + " manifest matches the tensor diff");
      ++runs;
    }
  v.note(std::to_string(runs) + " runs (rmu, slug, simnpo at layers 1-3), diff by raw tensor bytes");
  return v;
}

// --- A6 -------------------------------------------------------------------

Verdict lens_consistency() {
  Verdict v;
  double worst = 0;
  for (int m = 0; m < 5; ++m) {
    ModelConfig cfg;
    cfg.n_layers = 2 + m % 3;
    cfg.d_model = 8 * (1 + m % 2);
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.vocab_size = 30 + 5 * m;
    cfg.max_len = 12;
    const auto model = testing::random_model(cfg, 600 + static_cast<std::uint64_t>(m), 0.4);
    std::mt19937_64 rng(700 + static_cast<std::uint64_t>(m));
    for (int i = 0; i < 100; ++i) {
      const int len = std::uniform_int_distribution<int>(1, cfg.max_len)(rng);
      const auto tokens = testing::random_tokens(len, cfg.vocab_size, rng);
      const auto tr = forward(model, std::span<const int>(tokens));
      const int pos = std::uniform_int_distribution<int>(0, len - 1)(rng);
      const RowVector<double> lens = logit_lens<double>(model, tr.hidden.back().row(pos));
      const RowVector<double> out = softmax<double>(tr.logits.row(pos));
      worst = std::max(worst, (lens - out).cwiseAbs().maxCoeff());
    }
  }
  v.check(worst <= 1e-6, "lens at the last layer matches the output distribution (worst " + sci(worst) + ")");
  v.note("5 models x 100 random inputs, worst abs difference " + sci(worst));
  return v;
}

// --- A7 -------------------------------------------------------------------

Verdict simnpo_fixture() {
  Verdict v;
  const double at_one = simnpo_sample_loss(0.0, 2, 1.0, 0.0);
  v.check(std::abs(at_one - 2 * std::log(2.0)) <= 1e-9, "loss at probability 1 is 2 ln 2 (got " + num(at_one, 12) + ")");
  bool mono = true;
  for (double lp : {-20.0, -3.0, -0.5, 0.0})
    for (int len : {1, 2, 3}) {
      double prev = -1;
      for (double g : {0.0, 0.25, 0.5, 1.0, 2.0, 4.0}) {
        const double l = simnpo_sample_loss(lp, len, 1.0, g);
        mono = mono && l > prev;
        prev = l;
      }
    }
  v.check(mono, "loss strictly increasing in gamma");
  double prev = 1e300;
  bool decreasing = true;
  for (double lp : {-1.0, -10.0, -100.0, -300.0, -1400.0}) {
    const double l = simnpo_sample_loss(lp, 2, 1.0, 1.0);
    decreasing = decreasing && l > 0 && l < prev;
    prev = l;
  }
  v.check(decreasing && prev < 1e-300, "loss decreases to 0+ as log-probability goes to -inf (" + sci(prev) + ")");
  // the model-level loss agrees with the per-sample formula
  GradFixture f(2);
  const auto model = testing::random_model(f.cfg, 70);
  SimNpoLoss<double> loss(f.splits.forget_src, {1.0, 0.0});
  double manual = 0;
  for (const Sample& s : f.splits.forget_src) {
    const auto tr = forward(model, std::span<const int>(s.tokens));
    double lp = 0;
    for (int k = 0; k < s.answer_len(); ++k) {
      const RowVector<double> p = softmax<double>(tr.logits.row(s.answer_start - 1 + k));
      lp += std::log(p(s.answer_tokens[static_cast<std::size_t>(k)]));
    }
    manual += simnpo_sample_loss(lp, s.answer_len(), 1.0, 0.0);
  }
  manual /= static_cast<double>(f.splits.forget_src.size());
  v.check(std::abs(loss.value(model) - manual) <= 1e-9, "batch loss equals the mean per-sample formula");
  return v;
}

// --- A8 -------------------------------------------------------------------

struct SeedOutcome {
  bool gate = false, region = false;
  bool rmu_target = false, deep_fails = false, shallow_collapse = false;
  bool simnpo_target = false, slug_target = false;
};

Verdict end_to_end() {
  Verdict v;
  constexpr int kSeeds = 5;
  std::vector<SeedOutcome> seeds;
  const auto t0 = std::chrono::steady_clock::now();
  for (int seed = 0; seed < kSeeds; ++seed) {
    SeedOutcome o;
    const PipelineConfig cfg = reference_config(static_cast<std::uint64_t>(seed));
    const Finetuned f = finetune(cfg);
    const AccuracyTable ft_table = qa_accuracy(f.model, std::span<const Sample>(f.splits.all_samples));
    double lowest = 1;
    for (const auto& r : ft_table.rows) lowest = std::min(lowest, r.accuracy());
    o.gate = lowest >= 0.90;
    const GroupAccuracy ft = group_accuracy(ft_table, f.splits);
    const Analysis an = analyze_model(f.model, f.splits, cfg.alpha_region, cfg.epsilon_align);
    o.region = !an.region.empty();
    std::string region_str = nlohmann::json(an.region.layers).dump();
    v.note("seed " + std::to_string(seed) + ": finetuned min cell accuracy " + num(lowest, 3) + ", region " +
           region_str + (o.region ? " l*_param " + std::to_string(an.region.l_star_param) + " l*_activation " +
                                        std::to_string(an.region.l_star_activation)
                                  : std::string()));
    if (o.region && o.gate) {
      const auto layers = resolve_layers(cfg.layers, an.region, "rmu", f.model.n_layers());
      const AlgoSpec rmu{"rmu", {{"u_seed", seed}}};
      const auto bat = failure_mode_battery(f.model, f.splits, layers, unlearn_fn<float>(rmu));
      const GroupAccuracy shallow = group_accuracy(bat.rows[0].accuracy, f.splits);
      const GroupAccuracy target = group_accuracy(bat.rows[1].accuracy, f.splits);
      const GroupAccuracy deep = group_accuracy(bat.rows[2].accuracy, f.splits);
      o.rmu_target = target.forget_all <= 0.15 && target.retain_held >= 0.75 * ft.retain_held;
      o.deep_fails = deep.forget_all >= 0.5 * ft.forget_all;
      o.shallow_collapse = shallow.retain_held <= target.retain_held - 0.15;
      for (std::size_t i = 0; i < 3; ++i) {
        const GroupAccuracy g = group_accuracy(bat.rows[i].accuracy, f.splits);
        v.note("  rmu L" + std::to_string(layers[i]) + " (" + to_string(cfg.layers[i]) + "): forget_all " +
               num(g.forget_all, 3) + " forget_src " + num(g.forget_src, 3) + " forget_held " +
               num(g.forget_held, 3) + " retain_src " + num(g.retain_src, 3) + " retain_held " +
               num(g.retain_held, 3));
      }
      const int lp = an.region.l_star_param, la = an.region.l_star_activation;
      const auto sim = run_unlearn(f.model, f.splits, AlgoSpec{"simnpo", nlohmann::json::object()}, lp);
      const GroupAccuracy gs = group_accuracy(qa_accuracy(sim.model, std::span<const Sample>(f.splits.all_samples)), f.splits);
      o.simnpo_target = gs.forget_all <= 0.15 && gs.retain_held >= 0.75 * ft.retain_held;
      const auto sl = run_unlearn(f.model, f.splits, AlgoSpec{"slug", nlohmann::json::object()}, la);
      const GroupAccuracy gl = group_accuracy(qa_accuracy(sl.model, std::span<const Sample>(f.splits.all_samples)), f.splits);
      o.slug_target = gl.forget_all <= 0.5 * ft.forget_all && gl.retain_held >= 0.75 * ft.retain_held;
      v.note("  simnpo L" + std::to_string(lp) + ": forget_all " + num(gs.forget_all, 3) + " retain_held " +
             num(gs.retain_held, 3) + "; slug L" + std::to_string(la) + ": forget_all " + num(gl.forget_all, 3) +
             " retain_held " + num(gl.retain_held, 3));
    }
    v.note("  seed " + std::to_string(seed) + " criteria: target " + (o.rmu_target ? "yes" : "no") +
           ", deep-layer erasure failure " + (o.deep_fails ? "yes" : "no") + ", shallow utility collapse " +
           (o.shallow_collapse ? "yes" : "no") + ", simnpo target " + (o.simnpo_target ? "yes" : "no") +
           ", slug target " + (o.slug_target ? "yes" : "no"));
    seeds.push_back(o);
  }
  auto count = [&](auto pred) {
    int n = 0;
    for (const auto& s : seeds) n += pred(s) ? 1 : 0;
    return n;
  };
  const int gate = count([](const SeedOutcome& s) { return s.gate; });
  const int region = count([](const SeedOutcome& s) { return s.region; });
  const int rmu = count([](const SeedOutcome& s) {
    return s.gate && s.region && s.rmu_target && s.deep_fails && s.shallow_collapse;
  });
  const int sim = count([](const SeedOutcome& s) { return s.gate && s.region && s.simnpo_target; });
  const int slug = count([](const SeedOutcome& s) { return s.gate && s.region && s.slug_target; });
  v.check(gate == kSeeds, "finetuned accuracy >= 0.90 on every cell (" + std::to_string(gate) + "/5 seeds)");
  v.check(region >= 3, "non-empty language-agnostic region (" + std::to_string(region) + "/5 seeds)");
  v.check(rmu >= 3, "RMU target success with deep and shallow failure modes (" + std::to_string(rmu) + "/5 seeds)");
  v.check(sim >= 3, "SimNPO target success (" + std::to_string(sim) + "/5 seeds)");
  v.check(slug >= 3, "SLUG target success (" + std::to_string(slug) + "/5 seeds)");
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  v.check(sec <= 15 * 60, "runtime within 15 minutes (" + num(sec, 0) + " s)");
  v.note("runtime " + num(sec, 0) + " s");
  return v;
}

// --- A9 -------------------------------------------------------------------

Verdict report_arithmetic() {
  Verdict v;
  AccuracyTable ft, un;
  ft.rows = {{0, Domain::forget, 86, 100}, {1, Domain::forget, 50, 100}};
  un.rows = {{0, Domain::forget, 2, 100}, {1, Domain::forget, 50, 100}};
  const auto r = unlearning_report(ft, un, {0});
  const double pts = 100 * r.per_language[0].forget_drop;
  v.check(r.per_language[0].forget_drop == 0.84, "forget drop is exactly 0.84 (got " + num(r.per_language[0].forget_drop, 17) + ")");
  v.check(pts == 84.0, "delta renders as 84 points (got " + num(pts, 12) + ")");
  v.check(r.ue_source == 0.84, "UE on the source group is 0.84");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::pair<std::string, std::function<Verdict()>>>> all{
      {"A1", {"metric properties", metric_properties}},
      {"A2", {"reference-model threshold fixtures", reference_thresholds}},
      {"A3", {"region selection vs brute force", region_oracle}},
      {"A4", {"gradients vs finite differences", gradient_correctness}},
      {"A5", {"frozen-parameter guarantee", frozen_parameters}},
      {"A6", {"logit lens consistency", lens_consistency}},
      {"A7", {"SimNPO analytic fixture", simnpo_fixture}},
      {"A8", {"end-to-end failure modes and target-layer success", end_to_end}},
      {"A9", {"report arithmetic", report_arithmetic}},
  };
  std::set<std::string> only;
  if (argc > 1) {
    std::stringstream ss(argv[1]);
    for (std::string id; std::getline(ss, id, ',');) only.insert(id);
  }
  int failed = 0;
  for (const auto& [id, entry] : all) {
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = entry.second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.log.push_back(std::string("exception: ") + e.what());
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << id << ' ' << (v.pass ? "PASS" : "FAIL") << "  " << entry.first << " (" << num(sec, 1) << " s)\n";
    for (const auto& l : v.log) std::cout << "    " << l << '\n';
    std::cout.flush();
    failed += v.pass ? 0 : 1;
  }
  std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : std::string("all criteria passed")) << '\n';
  return failed ? 1 : 0;
}
