// mute: file-staged pipeline driver.
//
//   gen-corpus -> train -> dump-acts -> analyze -> unlearn -> eval / probe
//   battery runs the whole chain for a list of layers.
//
// Exit status: 0 success, 1 invalid usage or configuration, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mute/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mute;

namespace {

enum class Format { json, table };

struct Common {
  std::string format = "json";
  Format fmt() const { return format == "table" ? Format::table : Format::json; }
};

std::string file_hash(const std::string& path) { return hex64(fnv1a(detail::read_file(path))); }

std::uint64_t effective_seed(std::uint64_t flag) { return env_seed().value_or(flag); }

// Column-aligned text table.
void print_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) w[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) w[c] = std::max(w[c], r[c].size());
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) std::cout << (c ? "  " : "") << std::setw(static_cast<int>(w[c])) << r[c];
    std::cout << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

std::string fixed(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string pct(double v) { return fixed(100 * v, 1); }

Corpus load_corpus_checked(const std::string& path) {
  Corpus c = read_corpus(path);
  if (c.samples.empty()) throw DataError("corpus '" + path + "' has no samples");
  return c;
}

// --- gen-corpus -----------------------------------------------------------

struct GenCorpusArgs {
  std::string spec, out;
};

int gen_corpus(const GenCorpusArgs& a) {
  CorpusSpec spec = corpus_spec_from_json(read_json_file(a.spec));
  if (auto s = env_seed()) spec.seed = *s;
  const Corpus c = generate_corpus(spec);
  write_corpus(c, a.out);
  std::cout << "wrote " << c.samples.size() << " samples (vocab " << c.header.vocab_size << ") to " << a.out << '\n';
  return 0;
}

// --- train ----------------------------------------------------------------

struct TrainArgs {
  std::string corpus, model_out, report;
  TrainHyper hyper;
  ModelShape shape;
};

int train_cmd(TrainArgs a) {
  a.hyper.seed = a.shape.seed = effective_seed(a.hyper.seed);
  const Corpus c = load_corpus_checked(a.corpus);
  const DatasetSplits s = split(c);
  auto model = init_model<float>(model_config_for(a.shape, c));
  const auto result = mute::train(model, s, a.hyper);
  save_model(model, a.model_out);
  const json config = {{"command", "train"},
                       {"corpus", file_hash(a.corpus)},
                       {"model", to_json(model.config)},
                       {"train", to_json(a.hyper)}};
  const auto acc = qa_accuracy(model, std::span<const Sample>(s.all_samples));
  if (!a.report.empty()) {
    json r = provenance(config, a.hyper.seed);
    r["loss_history"] = result.loss_history;
    r["accuracy"] = to_json(acc);
    write_json_file(r, a.report);
  }
  double lo = 1;
  for (const auto& row : acc.rows) lo = std::min(lo, row.accuracy());
  std::cout << "final loss " << fixed(result.loss_history.empty() ? 0.0 : result.loss_history.back(), 5)
            << ", lowest per-cell accuracy " << pct(lo) << "%\n";
  return 0;
}

// --- dump-acts ------------------------------------------------------------

struct DumpArgs {
  std::string model, corpus, pooling = "both", out;
};

int dump_acts(const DumpArgs& a) {
  std::vector<Pooling> modes;
  if (a.pooling == "both")
    modes = {Pooling::last_token, Pooling::token_mean};
  else
    modes = {pooling_from_string(a.pooling)};
  const auto model = load_model<float>(a.model);
  const DatasetSplits s = split(load_corpus_checked(a.corpus));
  std::vector<ActivationSet> sets;
  for (Pooling p : modes)
    sets.push_back(pool_activations(model, std::span<const Sample>(s.all_samples), p, special_size(s)));
  write_actv_file(sets, a.out);
  std::cout << "wrote " << sets.size() << " record(s), " << model.n_layers() << " layers x " << s.all_samples.size()
            << " samples to " << a.out << '\n';
  return 0;
}

// --- analyze --------------------------------------------------------------

struct AnalyzeArgs {
  std::string acts, report;
  double alpha = 2.5;
  std::vector<double> sweep;
  double epsilon = 0.01;
};

int analyze(const AnalyzeArgs& a, const Common& common) {
  const auto sets = read_actv_file(a.acts);
  const Analysis an = analyze_activations(sets, a.alpha, a.epsilon);
  const json config = {{"command", "analyze"},
                       {"acts", file_hash(a.acts)},
                       {"alpha", a.alpha},
                       {"alpha_sweep", a.sweep},
                       {"epsilon_align", a.epsilon}};
  json r = provenance(config, effective_seed(0));
  r.update(to_json(an.region));
  r["profile"] = to_json(an.profile);
  if (!a.sweep.empty()) {
    json sw = json::array();
    for (const auto& e : sensitivity_sweep(an.profile, a.sweep)) sw.push_back({{"alpha", e.alpha}, {"region", e.layers}});
    r["alpha_sweep"] = sw;
  }
  write_json_file(r, a.report);
  if (common.fmt() == Format::table) {
    std::vector<std::vector<std::string>> rows;
    for (int l = 1; l <= an.profile.n_layers(); ++l) {
      const bool in = std::find(an.region.layers.begin(), an.region.layers.end(), l) != an.region.layers.end();
      rows.push_back({std::to_string(l), fixed(an.profile.align[static_cast<std::size_t>(l - 1)]),
                      fixed(an.profile.lrds[static_cast<std::size_t>(l - 1)], 5), in ? "*" : ""});
    }
    print_table({"layer", "align", "lrds", "region"}, rows);
    std::cout << "tau_align " << fixed(an.region.thresholds.tau_align) << "  tau_spec "
              << fixed(an.region.thresholds.tau_spec, 5) << '\n';
  }
  if (an.region.empty())
    std::cout << "region: empty\n";
  else
    std::cout << "region: " << r["region"].dump() << "  l*_param " << an.region.l_star_param << "  l*_activation "
              << an.region.l_star_activation << '\n';
  return 0;
}

// --- unlearn --------------------------------------------------------------

struct UnlearnArgs {
  std::string algo = "rmu", model, corpus, layer, region, out, manifest;
  double alpha = 2.5, epsilon = 0.01;
  std::optional<double> lr, steering_coeff, retain_weight, step_size, alpha_slug, beta, gamma;
  std::optional<int> steps;
  std::optional<std::uint64_t> u_seed;
  std::vector<int> languages;
};

json hyper_overrides(const UnlearnArgs& a) {
  json h = json::object();
  auto put = [&](const char* k, const auto& v) {
    if (v) h[k] = *v;
  };
  put("lr", a.lr);
  put("steps", a.steps);
  put("steering_coeff", a.steering_coeff);
  put("retain_weight", a.retain_weight);
  put("step_size", a.step_size);
  put("alpha_slug", a.alpha_slug);
  put("beta", a.beta);
  put("gamma", a.gamma);
  if (a.algo == "rmu") {
    if (auto s = env_seed())
      h["u_seed"] = *s;
    else
      put("u_seed", a.u_seed);
  } else {
    put("u_seed", a.u_seed);
  }
  if (!a.languages.empty()) h["languages"] = a.languages;
  return h;
}

int unlearn_cmd(const UnlearnArgs& a) {
  const AlgoSpec spec{a.algo, hyper_overrides(a)};
  validate(spec);
  const LayerSelector sel = parse_layer_selector(a.layer);
  const auto model = load_model<float>(a.model);
  const DatasetSplits s = split(load_corpus_checked(a.corpus));

  AgnosticRegion region;
  if (sel.kind != LayerSelector::Kind::fixed && a.algo != "ga-all") {
    if (!a.region.empty()) {
      try {
        region = region_from_json(read_json_file(a.region));
      } catch (const nlohmann::json::exception& e) {
        throw ParameterError("'" + a.region + "' is not a region report: " + e.what());
      }
    } else {
      region = analyze_model(model, s, a.alpha, a.epsilon).region;
    }
  }
  const int layer = a.algo == "ga-all" ? 1 : resolve_layer(sel, region, a.algo);
  const auto outcome = run_unlearn(model, s, spec, layer);
  save_model(outcome.model, a.out);

  const json config = {{"command", "unlearn"},    {"algo", a.algo},  {"model", file_hash(a.model)},
                       {"corpus", file_hash(a.corpus)}, {"layer", a.layer}, {"hyper", spec.hyper}};
  if (!a.manifest.empty()) {
    json m = provenance(config, effective_seed(outcome.hyper.value("u_seed", std::uint64_t{0})));
    m.update(to_json(outcome));
    m["layer_selector"] = a.layer;
    write_json_file(m, a.manifest);
  }
  std::cout << a.algo << (outcome.layer ? " at layer " + std::to_string(*outcome.layer) : std::string(" on all layers"))
            << ": " << outcome.changed.size() << " tensors changed, wrote " << a.out << '\n';
  return 0;
}

// --- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string model, baseline, corpus, report;
};

int eval_cmd(const EvalArgs& a, const Common& common) {
  const auto un = load_model<float>(a.model), base = load_model<float>(a.baseline);
  const DatasetSplits s = split(load_corpus_checked(a.corpus));
  const auto t_un = qa_accuracy(un, std::span<const Sample>(s.all_samples));
  const auto t_base = qa_accuracy(base, std::span<const Sample>(s.all_samples));
  const auto rep = unlearning_report(t_base, t_un, source_languages(s));
  const json config = {{"command", "eval"},
                       {"model", file_hash(a.model)},
                       {"baseline", file_hash(a.baseline)},
                       {"corpus", file_hash(a.corpus)}};
  json r = provenance(config, effective_seed(0));
  r.update(eval_json(t_un, t_base, rep));
  write_json_file(r, a.report);
  if (common.fmt() == Format::table) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& d : rep.per_language)
      rows.push_back({std::to_string(d.lang) + (d.is_source ? "*" : ""), pct(d.forget_before), pct(d.forget_after),
                      pct(d.retain_before), pct(d.retain_after)});
    print_table({"lang", "forget_before", "forget_after", "retain_before", "retain_after"}, rows);
  }
  std::cout << "UE_source " << pct(rep.ue_source) << "  UE_transfer " << pct(rep.ue_transfer) << "  MI "
            << pct(rep.mi) << '\n';
  return 0;
}

// --- probe ----------------------------------------------------------------

struct ProbeArgs {
  std::string model, corpus, layers = "all", report;
};

std::vector<int> parse_probe_layers(const std::string& spec, int n_layers) {
  std::vector<int> out;
  if (spec == "all") {
    for (int l = 1; l <= n_layers; ++l) out.push_back(l);
    return out;
  }
  for (const auto& sel : parse_layer_list(spec)) {
    if (sel.kind != LayerSelector::Kind::fixed) throw ParameterError("probe layers must be integers or 'all'");
    out.push_back(sel.layer);
  }
  return out;
}

int probe(const ProbeArgs& a, const Common& common) {
  const auto model = load_model<float>(a.model);
  const DatasetSplits s = split(load_corpus_checked(a.corpus));
  const auto layers = parse_probe_layers(a.layers, model.n_layers());
  const auto t = lens_recall(model, std::span<const Sample>(s.all_samples), layers);
  const json config = {
      {"command", "probe"}, {"model", file_hash(a.model)}, {"corpus", file_hash(a.corpus)}, {"layers", layers}};
  json r = provenance(config, effective_seed(0));
  r.update(to_json(t));
  write_json_file(r, a.report);
  if (common.fmt() == Format::table) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& row : t.rows)
      rows.push_back({std::to_string(row.lang), std::string(to_string(row.split)), std::to_string(row.layer),
                      fixed(row.recall)});
    print_table({"lang", "split", "layer", "recall"}, rows);
  }
  std::cout << "wrote " << t.rows.size() << " lens rows to " << a.report << '\n';
  return 0;
}

// --- battery --------------------------------------------------------------

struct BatteryArgs {
  std::string config, layers, out;
};

json finetune_key(const PipelineConfig& c) {
  return {{"corpus", to_json(c.corpus)}, {"model", to_json(c.model)}, {"train", to_json(c.train)}};
}

int battery_cmd(const BatteryArgs& a, const Common& common) {
  PipelineConfig cfg = pipeline_config_from_json(read_json_file(a.config));
  if (auto s = env_seed()) apply_seed(cfg, *s);
  if (!a.layers.empty()) cfg.layers = parse_layer_list(a.layers);
  require(!cfg.layers.empty(), "battery needs --layers or a 'layers' entry in the config");
  fs::create_directories(a.out);
  const std::string corpus_path = (fs::path(a.out) / "corpus.jsonl").string();
  const std::string model_path = (fs::path(a.out) / "finetuned.mck").string();
  const std::string stamp_path = (fs::path(a.out) / "finetuned.json").string();

  // Reuse a checkpoint produced by an identical corpus/model/train config.
  const json key = finetune_key(cfg);
  Finetuned f;
  bool reused = false;
  if (fs::exists(model_path) && fs::exists(stamp_path) && fs::exists(corpus_path)) {
    const json stamp = read_json_file(stamp_path);
    if (stamp.value("config_hash", std::string()) == config_hash(key)) {
      f.corpus = read_corpus(corpus_path);
      f.splits = split(f.corpus);
      f.model = load_model<float>(model_path);
      reused = true;
    }
  }
  if (!reused) {
    f = finetune(cfg);
    write_corpus(f.corpus, corpus_path);
    save_model(f.model, model_path);
    json stamp = provenance(key, cfg.seed);
    stamp["loss_history"] = f.train.loss_history;
    write_json_file(stamp, stamp_path);
  }

  const Analysis an = analyze_model(f.model, f.splits, cfg.alpha_region, cfg.epsilon_align);
  const json cfg_json = to_json(cfg);
  json region = provenance(cfg_json, cfg.seed);
  region.update(to_json(an.region));
  region["profile"] = to_json(an.profile);
  write_json_file(region, (fs::path(a.out) / "region.json").string());

  const auto layers = resolve_layers(cfg.layers, an.region, cfg.algo.name, f.model.n_layers());
  const auto result = failure_mode_battery(f.model, f.splits, layers, unlearn_fn<float>(cfg.algo));

  json r = provenance(cfg_json, cfg.seed);
  r.update(to_json(result));
  r["config"] = cfg_json;
  r["algo"] = cfg.algo.name;
  r["region"] = to_json(an.region);
  r["finetuned_groups"] = to_json(group_accuracy(result.finetuned, f.splits));
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    r["rows"][i]["selector"] = to_string(cfg.layers[i]);
    r["rows"][i]["groups"] = to_json(group_accuracy(result.rows[i].accuracy, f.splits));
  }
  write_json_file(r, (fs::path(a.out) / "battery.json").string());

  std::vector<std::vector<std::string>> rows;
  std::ostringstream csv;
  csv << "selector,layer,ue_source,ue_transfer,mi,forget_all,retain_src,retain_held\n";
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const auto& row = result.rows[i];
    const auto g = group_accuracy(row.accuracy, f.splits);
    std::vector<std::string> cells{to_string(cfg.layers[i]), std::to_string(row.layer), pct(row.report.ue_source),
                                   pct(row.report.ue_transfer), pct(row.report.mi), pct(g.forget_all),
                                   pct(g.retain_src), pct(g.retain_held)};
    for (std::size_t c = 0; c < cells.size(); ++c) csv << (c ? "," : "") << cells[c];
    csv << '\n';
    rows.push_back(std::move(cells));
  }
  {
    std::ofstream os((fs::path(a.out) / "battery.csv").string());
    os << csv.str();
  }
  if (common.fmt() == Format::table)
    print_table({"selector", "layer", "UE_src", "UE_transfer", "MI", "forget_all", "retain_src", "retain_held"}, rows);
  std::cout << (reused ? "reused " : "trained ") << model_path << "; wrote battery for " << layers.size()
            << " layer(s) to " << a.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-targeted multilingual unlearning pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  Common common;
  auto add_format = [&](CLI::App* sub) {
    sub->add_option("--format", common.format, "stdout rendering")->check(CLI::IsMember({"json", "table"}));
  };

  GenCorpusArgs gen;
  auto* c_gen = app.add_subcommand("gen-corpus", "Generate a synthetic parallel corpus");
  c_gen->add_option("--spec", gen.spec, "corpus spec JSON")->required()->check(CLI::ExistingFile);
  c_gen->add_option("--out", gen.out, "output JSONL")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Fine-tune a micro model on a corpus");
  c_train->add_option("--corpus", tr.corpus)->required()->check(CLI::ExistingFile);
  c_train->add_option("--model-out", tr.model_out)->required();
  c_train->add_option("--lr", tr.hyper.lr)->required();
  c_train->add_option("--steps", tr.hyper.steps)->required();
  c_train->add_option("--seed", tr.hyper.seed)->required();
  c_train->add_option("--batch-size", tr.hyper.batch_size)->capture_default_str();
  c_train->add_option("--n-layers", tr.shape.n_layers)->capture_default_str();
  c_train->add_option("--d-model", tr.shape.d_model)->capture_default_str();
  c_train->add_option("--n-heads", tr.shape.n_heads)->capture_default_str();
  c_train->add_option("--d-ff", tr.shape.d_ff)->capture_default_str();
  c_train->add_option("--report", tr.report, "optional training log JSON");

  DumpArgs dump;
  auto* c_dump = app.add_subcommand("dump-acts", "Write pooled per-layer activations (ACTV1)");
  c_dump->add_option("--model", dump.model)->required()->check(CLI::ExistingFile);
  c_dump->add_option("--corpus", dump.corpus)->required()->check(CLI::ExistingFile);
  c_dump->add_option("--pooling", dump.pooling)
      ->check(CLI::IsMember({"last_token", "token_mean", "both"}))
      ->capture_default_str();
  c_dump->add_option("--out", dump.out)->required();

  AnalyzeArgs an;
  auto* c_an = app.add_subcommand("analyze", "Layer profile and language-agnostic region");
  c_an->add_option("--acts", an.acts)->required()->check(CLI::ExistingFile);
  c_an->add_option("--alpha", an.alpha, "threshold scale on min LRDS")->capture_default_str();
  c_an->add_option("--alpha-sweep", an.sweep)->delimiter(',');
  c_an->add_option("--epsilon-align", an.epsilon)->capture_default_str();
  c_an->add_option("--report", an.report)->required();
  add_format(c_an);

  UnlearnArgs un;
  auto* c_un = app.add_subcommand("unlearn", "Unlearn the forget set at one layer");
  c_un->add_option("--algo", un.algo)->required()->check(CLI::IsMember(algo_names()));
  c_un->add_option("--model", un.model)->required()->check(CLI::ExistingFile);
  c_un->add_option("--corpus", un.corpus)->required()->check(CLI::ExistingFile);
  c_un->add_option("--layer", un.layer, "auto, auto-param, auto-activation or a layer index")->required();
  c_un->add_option("--region", un.region, "region report from analyze")->check(CLI::ExistingFile);
  c_un->add_option("--alpha", un.alpha, "threshold scale when no --region is given")->capture_default_str();
  c_un->add_option("--epsilon-align", un.epsilon)->capture_default_str();
  c_un->add_option("--out", un.out)->required();
  c_un->add_option("--manifest", un.manifest, "hyperparameters, losses and changed tensors as JSON");
  c_un->add_option("--lr", un.lr);
  c_un->add_option("--steps", un.steps);
  c_un->add_option("--steering-coeff", un.steering_coeff);
  c_un->add_option("--retain-weight", un.retain_weight);
  c_un->add_option("--u-seed", un.u_seed);
  c_un->add_option("--step-size", un.step_size);
  c_un->add_option("--alpha-slug", un.alpha_slug);
  c_un->add_option("--beta", un.beta);
  c_un->add_option("--gamma", un.gamma);
  c_un->add_option("--languages", un.languages, "ga-all forget languages")->delimiter(',');

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Accuracy and unlearning deltas against a baseline");
  c_ev->add_option("--model", ev.model)->required()->check(CLI::ExistingFile);
  c_ev->add_option("--baseline", ev.baseline)->required()->check(CLI::ExistingFile);
  c_ev->add_option("--corpus", ev.corpus)->required()->check(CLI::ExistingFile);
  c_ev->add_option("--report", ev.report)->required();
  add_format(c_ev);

  ProbeArgs pr;
  auto* c_pr = app.add_subcommand("probe", "Logit-lens recall per layer");
  c_pr->add_option("--model", pr.model)->required()->check(CLI::ExistingFile);
  c_pr->add_option("--corpus", pr.corpus)->required()->check(CLI::ExistingFile);
  c_pr->add_option("--layers", pr.layers)->capture_default_str();
  c_pr->add_option("--report", pr.report)->required();
  add_format(c_pr);

  BatteryArgs bt;
  auto* c_bt = app.add_subcommand("battery", "Train, analyze and unlearn at each listed layer");
  c_bt->add_option("--config", bt.config, "pipeline config JSON")->required()->check(CLI::ExistingFile);
  c_bt->add_option("--layers", bt.layers, "e.g. 1,auto-param,6");
  c_bt->add_option("--out", bt.out, "output directory")->required();
  add_format(c_bt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (c_gen->parsed()) return gen_corpus(gen);
    if (c_train->parsed()) return train_cmd(tr);
    if (c_dump->parsed()) return dump_acts(dump);
    if (c_an->parsed()) return analyze(an, common);
    if (c_un->parsed()) return unlearn_cmd(un);
    if (c_ev->parsed()) return eval_cmd(ev, common);
    if (c_pr->parsed()) return probe(pr, common);
    if (c_bt->parsed()) return battery_cmd(bt, common);
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const SelectionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
