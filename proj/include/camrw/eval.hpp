#pragma once

// ROUGE-1/2/L F1, the relative outperformance rate, robustness protocols and
// the ablation and placement runners.

#include "camrw/data.hpp"
#include "camrw/model.hpp"
#include "camrw/trainer.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace camrw {

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct RougeScores {
  double rouge1_f = 0.0;
  double rouge2_f = 0.0;
  double rougeL_f = 0.0;
};

// Tokens are compared verbatim. Leading and trailing kPadId tokens are
// stripped. ROUGE-L uses one LCS over the whole sequence.
PrecisionRecall rouge_n(std::vector<int> candidate, std::vector<int> reference, int n);
PrecisionRecall rouge_l(std::vector<int> candidate, std::vector<int> reference);
RougeScores rouge(const std::vector<int>& candidate, const std::vector<int>& reference);
RougeScores rouge(const Tokens& candidate, const Tokens& reference);

// (score_cam - score_baseline) / score_baseline; throws std::invalid_argument
// unless score_baseline > 0.
double ror(double score_cam, double score_baseline);

// Text scored by ROUGE: target tokens without reserved markers.
Tokens scoring_tokens(const Tokens& tokens);

// Fraction of annotated gold sentences whose generated counterpart (same
// index, split at sentence markers) opens with the gold transitional token.
// nullopt when the example carries no transition annotations.
std::optional<double> transition_accuracy(const Tokens& generated, const GenerationExample& gold);

// Anything that turns an example into target-side tokens.
struct Generator {
  std::string name;
  std::function<Tokens(const GenerationExample&)> generate;
};

// Holds references; model and vocab must outlive the generator.
Generator model_generator(const std::string& name, const Seq2SeqModel& model, const Vocabulary& vocab,
                          const BeamConfig& beam);
// Echoes the concatenated references; a sanity fixture.
Generator echo_generator();

struct ExampleScore {
  RougeScores rouge;
  std::optional<double> transition_accuracy;
  std::string output;
};

struct Aggregate {
  RougeScores rouge;
  // Micro average over annotated sentences; nullopt without annotations.
  std::optional<double> transition_accuracy;
  int examples = 0;
  int annotated_sentences = 0;
};

struct GeneratorResult {
  std::string name;
  std::vector<ExampleScore> per_example;
  Aggregate aggregate;
};

GeneratorResult evaluate(const Generator& generator, const std::vector<GenerationExample>& examples);

enum class Protocol { standard, reordered, migrated };
const char* protocol_name(Protocol p);
Protocol parse_protocol(const std::string& name);

struct ProtocolConfig {
  Protocol protocol = Protocol::standard;
  std::uint64_t seed = 1;
  // Migrated corpora whose in-vocabulary token share falls below this floor
  // get a warning in the report.
  double coverage_floor = 0.9;
  std::string config_hash;
};

struct RorEntry {
  std::string metric;
  double cam = 0.0;
  double baseline = 0.0;
  std::optional<double> ror;  // nullopt when the baseline score is 0
};

struct ProtocolReport {
  ProtocolConfig config;
  GeneratorResult cam;
  GeneratorResult baseline;
  std::vector<RorEntry> ror_table;
  std::optional<double> vocabulary_coverage;
  std::vector<std::string> warnings;

  std::string to_json() const;
  std::string summary() const;
};

// Share of source and target tokens present in the vocabulary.
double vocabulary_coverage(const std::vector<GenerationExample>& examples, const Vocabulary& vocab);

// The examples actually decoded under a protocol (reordered applies
// reorder_perturb to every example with at least two references).
std::vector<GenerationExample> protocol_examples(const std::vector<GenerationExample>& examples,
                                                 const ProtocolConfig& config);

ProtocolReport run_protocol(const Generator& cam, const Generator& baseline,
                            const std::vector<GenerationExample>& examples, const ProtocolConfig& config,
                            const Vocabulary* vocab = nullptr);

// ---- training sweeps ----

struct AblationSetting {
  bool use_pi = true;
  bool use_rmp = true;
  bool use_opt = true;

  void validate() const;
  std::string name() const;
};

struct ExperimentSetup {
  ModelConfig base;  // num_cams used for every CaM row
  TrainConfig train;
  BeamConfig beam;
  std::uint64_t model_seed = 1;
};

struct ScoreRow {
  std::string name;
  int num_cams = 0;
  AblationSetting setting;
  double final_loss = 0.0;
  Aggregate scores;
};

struct ScoreTable {
  std::string kind;
  std::vector<ScoreRow> rows;
  std::uint64_t seed = 0;
  std::string config_hash;

  std::string to_json() const;
  std::string summary() const;
};

using RowCallback = std::function<void(const ScoreRow&)>;

// One model per setting with identical seed and data order; the k=0
// baseline is always the first row.
ScoreTable run_ablation(const std::vector<AblationSetting>& settings, const ExperimentSetup& setup,
                        const std::vector<EncodedExample>& train_data, const std::vector<GenerationExample>& eval_data,
                        const Vocabulary& vocab, const RowCallback& on_row = {});

ScoreTable run_placement_sweep(const std::vector<int>& cam_counts, const ExperimentSetup& setup,
                               const std::vector<EncodedExample>& train_data,
                               const std::vector<GenerationExample>& eval_data, const Vocabulary& vocab,
                               const RowCallback& on_row = {});

}  // namespace camrw
