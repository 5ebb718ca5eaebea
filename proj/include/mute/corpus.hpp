#pragma once

// Synthetic multilingual fact corpus.
//
// Every language is a vocabulary cipher: it owns a disjoint block of token
// ids and renders each fact as
//
//   [BOS, lang_tag, slot_a, slot_b, slot_c, QRY, answer...]
//
// where the three content slots hold (subject, relation, particle) under the
// language's position permutation. BOS, QRY and the language tags live in a
// shared special block at the bottom of the vocabulary.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mute/common.hpp"

namespace mute {

enum class Domain { forget, retain };

inline std::string_view to_string(Domain d) { return d == Domain::forget ? "forget" : "retain"; }

inline Domain domain_from_string(std::string_view s) {
  if (s == "forget") return Domain::forget;
  if (s == "retain") return Domain::retain;
  throw ParameterError("unknown domain '" + std::string(s) + "'");
}

struct Fact {
  int semantic_id = 0;
  Domain domain = Domain::forget;
  int subject_concept = 0;
  int relation_concept = 0;
  int answer_concept = 0;
  int answer_len = 1;
};

inline constexpr int kContentSlots = 3;

struct Language {
  int lang_id = 0;
  int token_offset = 0;
  std::array<int, kContentSlots> position_perm{0, 1, 2};
  bool is_source = false;
};

struct Sample {
  int lang_id = 0;
  int semantic_id = 0;
  Domain domain = Domain::forget;
  std::vector<int> tokens;
  int answer_start = 0;
  std::vector<int> answer_tokens;

  int answer_len() const { return static_cast<int>(answer_tokens.size()); }
  bool operator==(const Sample&) const = default;
};

struct CorpusSpec {
  int n_languages = 2;
  int n_source = 1;
  int n_forget_facts = 1;
  int n_retain_facts = 1;
  int answer_len = 1;
  std::uint64_t seed = 0;
  // Shape of the concept inventory. Forget and retain facts draw subjects
  // from disjoint pools; relations and answer values are shared.
  int n_relations = 5;
  int n_answer_values = 16;
  bool permute_positions = true;
};

struct CorpusHeader {
  int n_languages = 0;
  int n_source = 0;
  int vocab_size = 0;
  std::uint64_t seed = 0;
  bool operator==(const CorpusHeader&) const = default;
};

/// A rendered corpus. Equality compares the header and samples, i.e. what
/// the JSONL file carries; `facts` and `languages` are generator metadata.
struct Corpus {
  CorpusHeader header;
  std::vector<Sample> samples;
  std::vector<Fact> facts;
  std::vector<Language> languages;

  bool is_source(int lang_id) const { return lang_id >= 0 && lang_id < header.n_source; }
  bool operator==(const Corpus& o) const { return header == o.header && samples == o.samples; }
};

struct DatasetSplits {
  std::vector<Sample> forget_src, forget_held, retain_src, retain_held;
  std::vector<Sample> all_samples;
  int n_languages = 0;
  int n_source = 0;
};

namespace special {
inline constexpr int bos = 0;
inline constexpr int qry = 1;
inline constexpr int lang_tag_base = 2;
}  // namespace special

/// Token-id layout derived from a spec; shared by the generator and tests.
struct VocabLayout {
  int n_languages = 0;
  int n_subjects = 0;
  int n_relations = 0;
  int n_answer_values = 0;
  int answer_len = 1;

  int special_size() const { return special::lang_tag_base + n_languages; }
  int block_size() const { return n_subjects + n_relations + 1 + n_answer_values * answer_len; }
  int offset(int lang) const { return special_size() + lang * block_size(); }
  int vocab_size() const { return special_size() + n_languages * block_size(); }
  int subject_token(int lang, int s) const { return offset(lang) + s; }
  int relation_token(int lang, int r) const { return offset(lang) + n_subjects + r; }
  int particle_token(int lang) const { return offset(lang) + n_subjects + n_relations; }
  int answer_token(int lang, int pos, int digit) const {
    return offset(lang) + n_subjects + n_relations + 1 + pos * n_answer_values + digit;
  }
  bool is_special(int tok) const { return tok < special_size(); }
};

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

inline VocabLayout vocab_layout(const CorpusSpec& spec) {
  VocabLayout v;
  v.n_languages = spec.n_languages;
  v.n_relations = std::min(spec.n_relations, std::max(spec.n_forget_facts, spec.n_retain_facts));
  v.n_subjects = ceil_div(spec.n_forget_facts, v.n_relations) + ceil_div(spec.n_retain_facts, v.n_relations);
  v.n_answer_values = spec.n_answer_values;
  v.answer_len = spec.answer_len;
  return v;
}

inline void validate(const CorpusSpec& spec) {
  require(spec.n_languages >= 1, "n_languages must be >= 1");
  require(spec.n_source >= 1 && spec.n_source <= spec.n_languages, "n_source must lie in [1, n_languages]");
  require(spec.n_forget_facts >= 1 && spec.n_retain_facts >= 1, "fact counts must be >= 1");
  require(spec.answer_len >= 1 && spec.answer_len <= 3, "answer_len must lie in [1, 3]");
  require(spec.n_relations >= 1, "n_relations must be >= 1");
  require(spec.n_answer_values >= 2, "n_answer_values must be >= 2");
}

inline Corpus generate_corpus(const CorpusSpec& spec) {
  validate(spec);
  const VocabLayout vl = vocab_layout(spec);
  std::mt19937_64 rng(spec.seed);

  Corpus c;
  c.header = {spec.n_languages, spec.n_source, vl.vocab_size(), spec.seed};

  for (int l = 0; l < spec.n_languages; ++l) {
    Language lang;
    lang.lang_id = l;
    lang.token_offset = vl.offset(l);
    lang.is_source = l < spec.n_source;
    if (spec.permute_positions) std::shuffle(lang.position_perm.begin(), lang.position_perm.end(), rng);
    c.languages.push_back(lang);
  }

  // Facts: forget subjects occupy [0, n_forget_subjects), retain subjects the
  // rest; within a pool, (subject, relation) pairs are enumerated in order so
  // they are unique by construction.
  const int n_forget_subjects = ceil_div(spec.n_forget_facts, vl.n_relations);
  int answer_space = 1;
  for (int i = 0; i < spec.answer_len; ++i) answer_space *= spec.n_answer_values;
  std::uniform_int_distribution<int> answer_dist(0, answer_space - 1);
  auto add_facts = [&](Domain d, int count, int subject_base) {
    for (int i = 0; i < count; ++i) {
      Fact f;
      f.semantic_id = static_cast<int>(c.facts.size());
      f.domain = d;
      f.subject_concept = subject_base + i / vl.n_relations;
      f.relation_concept = i % vl.n_relations;
      f.answer_concept = answer_dist(rng);
      f.answer_len = spec.answer_len;
      c.facts.push_back(f);
    }
  };
  add_facts(Domain::forget, spec.n_forget_facts, 0);
  add_facts(Domain::retain, spec.n_retain_facts, n_forget_subjects);

  for (const Language& lang : c.languages) {
    for (const Fact& f : c.facts) {
      Sample s;
      s.lang_id = lang.lang_id;
      s.semantic_id = f.semantic_id;
      s.domain = f.domain;
      const std::array<int, kContentSlots> content{vl.subject_token(lang.lang_id, f.subject_concept),
                                                   vl.relation_token(lang.lang_id, f.relation_concept),
                                                   vl.particle_token(lang.lang_id)};
      s.tokens = {special::bos, special::lang_tag_base + lang.lang_id};
      for (int slot = 0; slot < kContentSlots; ++slot) s.tokens.push_back(content[lang.position_perm[slot]]);
      s.tokens.push_back(special::qry);
      s.answer_start = static_cast<int>(s.tokens.size());
      int v = f.answer_concept;
      for (int p = 0; p < f.answer_len; ++p) {
        const int tok = vl.answer_token(lang.lang_id, p, v % spec.n_answer_values);
        v /= spec.n_answer_values;
        s.answer_tokens.push_back(tok);
        s.tokens.push_back(tok);
      }
      c.samples.push_back(std::move(s));
    }
  }
  return c;
}

inline DatasetSplits split(const Corpus& corpus) {
  DatasetSplits out;
  out.n_languages = corpus.header.n_languages;
  out.n_source = corpus.header.n_source;
  out.all_samples = corpus.samples;
  for (const Sample& s : corpus.samples) {
    const bool src = corpus.is_source(s.lang_id);
    if (s.domain == Domain::forget)
      (src ? out.forget_src : out.forget_held).push_back(s);
    else
      (src ? out.retain_src : out.retain_held).push_back(s);
  }
  return out;
}

// --- JSON Lines I/O --------------------------------------------------------

inline nlohmann::json to_json(const Sample& s) {
  return {{"lang", s.lang_id},       {"fact", s.semantic_id},      {"domain", to_string(s.domain)},
          {"tokens", s.tokens},      {"answer_start", s.answer_start}, {"answer", s.answer_tokens}};
}

inline void write_corpus(const Corpus& c, std::ostream& os) {
  nlohmann::json h = {{"header", true},
                      {"n_languages", c.header.n_languages},
                      {"n_source", c.header.n_source},
                      {"vocab_size", c.header.vocab_size},
                      {"seed", c.header.seed}};
  os << h.dump() << '\n';
  for (const Sample& s : c.samples) os << to_json(s).dump() << '\n';
}

inline void write_corpus(const Corpus& c, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_corpus(c, os);
}

inline Corpus read_corpus(std::istream& is) {
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, std::string("invalid JSON: ") + e.what());
    }
    try {
      if (j.contains("header")) {
        if (have_header) throw ParseError(lineno, "duplicate header");
        c.header.n_languages = j.at("n_languages").get<int>();
        c.header.n_source = j.at("n_source").get<int>();
        c.header.vocab_size = j.at("vocab_size").get<int>();
        c.header.seed = j.at("seed").get<std::uint64_t>();
        have_header = true;
        continue;
      }
      Sample s;
      s.lang_id = j.at("lang").get<int>();
      s.semantic_id = j.at("fact").get<int>();
      s.domain = domain_from_string(j.at("domain").get<std::string>());
      s.tokens = j.at("tokens").get<std::vector<int>>();
      s.answer_start = j.at("answer_start").get<int>();
      s.answer_tokens = j.at("answer").get<std::vector<int>>();
      const auto n = static_cast<int>(s.tokens.size());
      if (s.answer_start < 0 || s.answer_start + s.answer_len() > n ||
          !std::equal(s.answer_tokens.begin(), s.answer_tokens.end(), s.tokens.begin() + s.answer_start))
        throw ParseError(lineno, "answer tokens do not match tokens[answer_start..]");
      if (have_header)
        for (int t : s.tokens)
          if (t < 0 || t >= c.header.vocab_size) throw ParseError(lineno, "token id out of range");
      c.samples.push_back(std::move(s));
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return c;
}

inline Corpus read_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  return read_corpus(is);
}

}  // namespace mute
