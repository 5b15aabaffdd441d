#pragma once

// Causal Intervention Module.
//
// Three stages act on the decoder's hidden states, but only at positions the
// model predicts to be sentence starts:
//   1. primitive intervention: a backdoor-adjusted mixture over order-enhanced
//      copies of each embedding, weighted by a predicted sentence-slot
//      distribution computed from the intervened prefix;
//   2. context-aware remapping: windowed multi-head self-attention that renews
//      each window's center embedding;
//   3. optimal intensity: sigmoid gates on the original embedding, softmaxed
//      into convex weights over the original, intervened and remapped rows.
// Every other position is restored bit-exactly from the input.
//
// Two routes compute the same function. The free functions below work on
// plain matrices and are used for inference and incremental decoding; the
// CamModule::forward tape route is used for training.

#include "camrw/autodiff.hpp"
#include "camrw/rng.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace camrw::cam {

using ad::Matrix;
using ad::RowVector;

struct CamConfig {
  int embed_dim = 64;
  int num_sentences = 6;
  int window_size = 4;
  int vocab_size = 1;
  int cls_token_id = 0;
  int remap_heads = 4;
  bool causal_window = false;

  // Stage toggles for ablation. use_opt requires use_pi or use_rmp.
  bool use_pi = true;
  bool use_rmp = true;
  bool use_opt = true;
  // Experimental: g_itv reads e_itv and g_rmp reads e_rmp instead of e_ori.
  bool gate_inputs_per_stage = false;

  void validate() const;
};

enum class Stage { ori, odr, itv, rmp, opm };

const char* stage_name(Stage s);

struct EmbeddingSequence {
  Matrix values;
  Stage stage = Stage::ori;

  Eigen::Index length() const { return values.rows(); }
  // Throws std::logic_error on an out-of-order transition.
  EmbeddingSequence advanced(Matrix next_values, Stage next) const;
};

struct OrderVector {
  int sentence_index = 1;
  RowVector values;
};

struct PositionDistribution {
  RowVector probs;
};

struct GateCoefficients {
  double ori = 1.0 / 3.0;
  double itv = 1.0 / 3.0;
  double rmp = 1.0 / 3.0;
};

struct SentenceStartMask {
  std::vector<std::uint8_t> flags;

  std::size_t size() const { return flags.size(); }
  std::size_t count() const;
  std::vector<int> positions() const;
  static SentenceStartMask zeros(std::size_t n) { return {std::vector<std::uint8_t>(n, 0)}; }
  static SentenceStartMask ones(std::size_t n) { return {std::vector<std::uint8_t>(n, 1)}; }
};

// Inclusive row range attended when renewing a center position.
struct Window {
  int lo = 0;
  int hi = 0;
};

// Window used to renew `pos` in a sequence of `len` rows, or nullopt if the
// position is never a window center.
std::optional<Window> remap_window(int pos, int len, const CamConfig& config);

// Learned weights of one module instance. Pointers refer into a
// ParameterStore owned by the enclosing model.
struct CamWeights {
  ad::Parameter* order_w = nullptr;  // (2d x d) on [e_ori | o_j]
  ad::Parameter* order_b = nullptr;  // (1 x d)
  ad::Parameter* pos_w1 = nullptr;   // (d x d)
  ad::Parameter* pos_b1 = nullptr;
  ad::Parameter* pos_w2 = nullptr;   // (d x s)
  ad::Parameter* pos_b2 = nullptr;
  ad::Parameter* rmp_wq = nullptr;
  ad::Parameter* rmp_bq = nullptr;
  ad::Parameter* rmp_wk = nullptr;
  ad::Parameter* rmp_bk = nullptr;
  ad::Parameter* rmp_wv = nullptr;
  ad::Parameter* rmp_bv = nullptr;
  ad::Parameter* rmp_wo = nullptr;
  ad::Parameter* rmp_bo = nullptr;
  ad::Parameter* gate_w = nullptr;  // (d x 3), columns ori, itv, rmp
};

// Parameter name groups, one per learned submodule.
inline constexpr const char* kSubmoduleOrder = "order";
inline constexpr const char* kSubmodulePosition = "position";
inline constexpr const char* kSubmoduleRemap = "remap";
inline constexpr const char* kSubmoduleGate = "gate";

// ---- plain-matrix operations ----

OrderVector make_order_vector(int sentence_index, int dim, int num_sentences);
// All s order vectors stacked, (s x dim).
Matrix order_matrix(int num_sentences, int dim);

RowVector order_enhance(const RowVector& e_ori, const OrderVector& order, const Matrix& projection_w,
                        const Matrix& projection_b);

// Biases are 1-row matrices.
struct PositionHead {
  const Matrix& w1;
  const Matrix& b1;
  const Matrix& w2;
  const Matrix& b2;
};

// prefix: rows 1..i-1 of the intervened sequence (may have zero rows).
PositionDistribution position_probabilities(const Matrix& prefix, const PositionHead& head);
PositionDistribution position_probabilities_from_sum(const RowVector& prefix_sum, const PositionHead& head);

GateCoefficients intensity_gates(const RowVector& e_ori, const Matrix& gate_w);
GateCoefficients intensity_gates(const RowVector& in_ori, const RowVector& in_itv, const RowVector& in_rmp,
                                 const Matrix& gate_w);

RowVector optimal_combine(const RowVector& e_ori, const RowVector& e_itv, const RowVector& e_rmp,
                          const GateCoefficients& c);

using VocabProjection = std::function<Matrix(const Matrix&)>;

SentenceStartMask sentence_start_mask(const Matrix& e_ori, const VocabProjection& vocab_projection, int cls_token_id);
// Lowest index wins ties.
SentenceStartMask mask_from_logits(const Matrix& logits, int cls_token_id);

EmbeddingSequence fuse_mask(const EmbeddingSequence& e_opm, const EmbeddingSequence& e_ori,
                            const SentenceStartMask& mask);

class CamModule;

EmbeddingSequence primitive_intervene(const EmbeddingSequence& e_ori, const SentenceStartMask& mask,
                                      const CamModule& module);
// Renews every eligible center. Positions in `only` (when non-empty) are the
// only ones computed; the rest keep their intervened value.
EmbeddingSequence context_remap(const EmbeddingSequence& e_itv, const CamModule& module,
                                const std::vector<int>& only = {});
EmbeddingSequence cam_forward(const EmbeddingSequence& e_ori, const SentenceStartMask& mask,
                              const CamModule& module);

// Per-stream state for left-to-right decoding with causal windows.
struct CamStreamState {
  RowVector itv_sum;
  std::vector<RowVector> keys;
  std::vector<RowVector> values;
};

class CamModule {
 public:
  // Registers weights under "<prefix>.<submodule>.<name>".
  static CamModule create(ad::ParameterStore& store, const std::string& prefix, const CamConfig& config, Rng& rng);
  static std::vector<ad::ParamSpec> layout(const std::string& prefix, const CamConfig& config);
  // Rebinds to weights already present in the store.
  static CamModule bind(ad::ParameterStore& store, const std::string& prefix, const CamConfig& config);

  const CamConfig& config() const { return config_; }
  CamConfig& mutable_config() { return config_; }
  const CamWeights& weights() const { return weights_; }
  const std::string& prefix() const { return prefix_; }
  std::vector<ad::Parameter*> submodule_parameters(const std::string& submodule) const;
  PositionHead position_head() const;

  // Training route; e_ori is (M x d).
  ad::Var forward(ad::Tape& tape, ad::Var e_ori, const SentenceStartMask& mask) const;

  // One decoding step in causal-window mode; returns the module output row.
  RowVector step(const RowVector& e_ori, bool masked, CamStreamState& state) const;
  CamStreamState initial_state() const;

 private:
  CamConfig config_;
  CamWeights weights_;
  std::string prefix_;
};

}  // namespace camrw::cam
