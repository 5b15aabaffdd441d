#pragma once

#include "camrw/model.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace camrw {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-2;
  // Global gradient-norm clip; <= 0 disables.
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  // Stop early once an epoch's mean loss falls below this.
  double target_loss = 0.0;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  std::int64_t steps = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Plain SGD over seeded per-epoch shuffles. Deterministic given the model
// seed, data order and config.
std::vector<EpochStats> train(Seq2SeqModel& model, const std::vector<EncodedExample>& data, const TrainConfig& config,
                              const EpochCallback& on_epoch = {});

}  // namespace camrw
