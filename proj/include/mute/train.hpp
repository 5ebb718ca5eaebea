#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "mute/corpus.hpp"
#include "mute/losses.hpp"
#include "mute/model.hpp"

namespace mute {

struct TrainHyper {
  double lr = 1e-3;
  int steps = 100;
  int batch_size = 64;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_history;  // batch loss before each update
};

/// Fine-tunes every parameter with Adam on answer-position cross-entropy over
/// all samples (all languages, both domains). Batches are drawn from a
/// seeded reshuffle of the sample list, one pass at a time.
template <typename T>
TrainResult train(MicroModel<T>& model, const DatasetSplits& splits, const TrainHyper& hyper) {
  require(hyper.steps >= 0 && hyper.batch_size >= 1, "steps must be >= 0 and batch_size >= 1");
  require(hyper.lr >= 0, "learning rate must be >= 0");
  require(!splits.all_samples.empty(), "no training samples");
  for (const Sample& s : splits.all_samples)
    for (int t : s.tokens)
      if (t >= model.config.vocab_size) throw ParameterError("corpus vocabulary exceeds model vocab_size");

  std::mt19937_64 rng(hyper.seed);
  std::vector<std::size_t> order(splits.all_samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  Adam<T> opt({hyper.lr});
  TrainResult out;
  out.loss_history.reserve(static_cast<std::size_t>(hyper.steps));
  const auto bs = std::min<std::size_t>(static_cast<std::size_t>(hyper.batch_size), order.size());
  std::vector<Sample> batch;
  for (int step = 0; step < hyper.steps; ++step) {
    batch.clear();
    while (batch.size() < bs) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(splits.all_samples[order[cursor++]]);
    }
    CrossEntropyLoss<T> loss(batch);
    auto lg = loss.value_and_grad(model, Scope::everything());
    out.loss_history.push_back(static_cast<double>(lg.value));
    opt.step(model.params, lg.grads);
  }
  return out;
}

}  // namespace mute
