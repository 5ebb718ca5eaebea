#pragma once

// Per-layer pooled hidden states and the ACTV1 binary container.
//
// ACTV1 record layout (little-endian):
//   "ACTV" | u32 version = 1 | u32 J | J bytes JSON metadata
//   | L blocks of n x d float32, row-major, layers 1..L
// A file may hold several records back to back (e.g. one per pooling).

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mute/corpus.hpp"
#include "mute/losses.hpp"
#include "mute/model.hpp"

namespace mute {

enum class Pooling { last_token, token_mean };

inline std::string_view to_string(Pooling p) { return p == Pooling::last_token ? "last_token" : "token_mean"; }

inline Pooling pooling_from_string(std::string_view s) {
  if (s == "last_token") return Pooling::last_token;
  if (s == "token_mean") return Pooling::token_mean;
  throw ParameterError("unknown pooling '" + std::string(s) + "'");
}

struct ActivationSet {
  Pooling pooling = Pooling::last_token;
  int n_layers = 0;
  int n_samples = 0;
  int dim = 0;
  std::vector<Matrix<double>> layers;  // layers[l-1]: n_samples x dim
  std::vector<std::string> language;
  std::vector<int> semantic_id;
  std::vector<std::string> split;

  void validate() const {
    if (static_cast<int>(layers.size()) != n_layers) throw FormatError("layer count mismatch");
    for (const auto& m : layers)
      if (m.rows() != n_samples || m.cols() != dim) throw FormatError("activation block shape mismatch");
    if (static_cast<int>(language.size()) != n_samples || static_cast<int>(semantic_id.size()) != n_samples ||
        static_cast<int>(split.size()) != n_samples)
      throw FormatError("label arrays must have one entry per sample");
  }
};

/// Pools each block's output over the prompt (positions before the answer):
/// the final prompt position's raw state (last_token), or the l2-normalized
/// mean over prompt positions holding non-special tokens (token_mean).
/// Tokens below `special_size` are special; 0 treats every token as content.
template <typename T>
ActivationSet pool_activations(const MicroModel<T>& model, std::span<const Sample> samples, Pooling pooling,
                               int special_size = 0, std::size_t chunk = 256) {
  require(!samples.empty(), "pool_activations needs at least one sample");
  for (const Sample& s : samples) require(s.answer_start >= 1, "samples need a non-empty prompt");
  ActivationSet out;
  out.pooling = pooling;
  out.n_layers = model.n_layers();
  out.n_samples = static_cast<int>(samples.size());
  out.dim = model.d_model();
  out.layers.assign(static_cast<std::size_t>(out.n_layers), Matrix<double>(out.n_samples, out.dim));
  for (const Sample& s : samples) {
    out.language.push_back(std::to_string(s.lang_id));
    out.semantic_id.push_back(s.semantic_id);
    out.split.emplace_back(to_string(s.domain));
  }
  for (std::size_t begin = 0; begin < samples.size(); begin += chunk) {
    const auto part = samples.subspan(begin, std::min(chunk, samples.size() - begin));
    const Batch batch = make_batch(part);
    const Activations<T> acts = run(model, batch, RunOptions{1, -1, false, {}});
    for (int l = 0; l < out.n_layers; ++l) {
      const Matrix<T>& h = acts.outputs[static_cast<std::size_t>(l)];
      for (int s = 0; s < batch.n_seq(); ++s) {
        const Sample& smp = part[static_cast<std::size_t>(s)];
        const int o = batch.seq_offsets[static_cast<std::size_t>(s)];
        RowVector<double> row;
        if (pooling == Pooling::last_token) {
          row = h.row(o + smp.answer_start - 1).template cast<double>();
        } else {
          row = RowVector<double>::Zero(h.cols());
          int n = 0;
          for (int p = 0; p < smp.answer_start; ++p)
            if (smp.tokens[static_cast<std::size_t>(p)] >= special_size) {
              row += h.row(o + p).template cast<double>();
              ++n;
            }
          if (n == 0) throw DataError("sample has no content tokens to average");
          row /= n;
          const double norm = row.norm();
          if (norm > 0) row /= norm;
        }
        out.layers[static_cast<std::size_t>(l)].row(static_cast<Eigen::Index>(begin) + s) = row;
      }
    }
  }
  return out;
}

inline constexpr std::uint32_t kActvVersion = 1;

inline nlohmann::json actv_metadata(const ActivationSet& a) {
  return {{"layers", a.n_layers},         {"samples", a.n_samples},     {"dim", a.dim},
          {"pooling", to_string(a.pooling)}, {"language", a.language}, {"semantic_id", a.semantic_id},
          {"split", a.split}};
}

inline void write_actv(const ActivationSet& a, std::ostream& os) {
  a.validate();
  const std::string meta = actv_metadata(a).dump();
  os.write("ACTV", 4);
  detail::put_u32(os, kActvVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  std::string body;
  body.reserve(static_cast<std::size_t>(a.n_layers) * a.n_samples * a.dim * 4);
  for (const auto& m : a.layers)
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(body, static_cast<float>(m.data()[i]));
  os.write(body.data(), static_cast<std::streamsize>(body.size()));
}

inline void write_actv_file(std::span<const ActivationSet> sets, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  for (const auto& a : sets) write_actv(a, os);
}

/// Parses every ACTV1 record in `bytes`.
inline std::vector<ActivationSet> parse_actv(const std::string& bytes) {
  std::vector<ActivationSet> out;
  std::size_t pos = 0;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  while (pos < bytes.size()) {
    if (bytes.size() - pos < 12)
      throw FormatError("truncated ACTV header: expected 12 bytes, got " + std::to_string(bytes.size() - pos));
    if (bytes.compare(pos, 4, "ACTV") != 0) throw FormatError("bad magic: expected \"ACTV\"");
    const std::uint32_t version = detail::get_u32(p + pos + 4);
    if (version != kActvVersion) throw FormatError("unsupported ACTV version " + std::to_string(version));
    const std::uint32_t jlen = detail::get_u32(p + pos + 8);
    pos += 12;
    if (bytes.size() - pos < jlen) throw FormatError("truncated ACTV metadata");
    ActivationSet a;
    try {
      const auto j = nlohmann::json::parse(bytes.substr(pos, jlen));
      a.n_layers = j.at("layers").get<int>();
      a.n_samples = j.at("samples").get<int>();
      a.dim = j.at("dim").get<int>();
      a.pooling = pooling_from_string(j.at("pooling").get<std::string>());
      a.language = j.at("language").get<std::vector<std::string>>();
      a.semantic_id = j.at("semantic_id").get<std::vector<int>>();
      a.split = j.at("split").get<std::vector<std::string>>();
    } catch (const std::exception& e) {
      throw FormatError(std::string("bad ACTV metadata: ") + e.what());
    }
    if (a.n_layers < 1 || a.n_samples < 1 || a.dim < 1) throw FormatError("ACTV dimensions must be >= 1");
    pos += jlen;
    const std::size_t block = static_cast<std::size_t>(a.n_samples) * a.dim * 4;
    const std::size_t need = block * a.n_layers;
    if (bytes.size() - pos < need)
      throw FormatError("truncated ACTV tensor data: expected " + std::to_string(need) + " bytes, got " +
                        std::to_string(bytes.size() - pos));
    for (int l = 0; l < a.n_layers; ++l) {
      Matrix<double> m(a.n_samples, a.dim);
      for (Eigen::Index i = 0; i < m.size(); ++i, pos += 4) m.data()[i] = detail::get_f32(p + pos);
      a.layers.push_back(std::move(m));
    }
    a.validate();
    out.push_back(std::move(a));
  }
  return out;
}

inline std::vector<ActivationSet> read_actv_file(const std::string& path) {
  return parse_actv(detail::read_file(path));
}

/// The record with the requested pooling, or a ParameterError.
inline const ActivationSet& find_pooling(std::span<const ActivationSet> sets, Pooling p) {
  for (const auto& a : sets)
    if (a.pooling == p) return a;
  throw ParameterError("no activation record with pooling " + std::string(to_string(p)));
}

}  // namespace mute
