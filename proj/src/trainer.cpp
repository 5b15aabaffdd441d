#include "camrw/trainer.hpp"

#include "camrw/rng.hpp"

#include <numeric>
#include <stdexcept>

namespace camrw {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
}

std::vector<EpochStats> train(Seq2SeqModel& model, const std::vector<EncodedExample>& data, const TrainConfig& config,
                              const EpochCallback& on_epoch) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  Rng order_rng(config.seed);
  Rng dropout_rng(config.seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochStats> history;
  std::vector<EncodedExample> batch;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    double weighted = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);
      const double loss = model.train_step(batch, config.learning_rate, config.clip_norm, &dropout_rng);
      weighted += loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    EpochStats s{epoch, weighted / static_cast<double>(seen), model.step_counter()};
    history.push_back(s);
    if (on_epoch) on_epoch(s);
    if (config.target_loss > 0.0 && s.mean_loss < config.target_loss) break;
  }
  return history;
}

}  // namespace camrw
