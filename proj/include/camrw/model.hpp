#pragma once

// Encoder-decoder transformer with causal intervention modules interleaved
// in the decoder stack.

#include "camrw/autodiff.hpp"
#include "camrw/cam.hpp"
#include "camrw/rng.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace camrw {

using ad::Matrix;
using ad::RowVector;

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 64;
  int num_encoder_layers = 2;
  int num_decoder_layers = 4;
  int num_heads = 4;
  int ffn_dim = 128;
  int num_cams = 2;
  int max_source_length = 512;
  int max_target_length = 256;
  double dropout = 0.0;

  int num_sentences = 6;
  int window_size = 4;
  int remap_heads = 4;
  int cls_token_id = 4;
  // Remapping windows during teacher-forced training. Decoding always clips
  // windows to the prefix. Off in the paper preset, on in the desk preset.
  bool train_causal_window = false;
  bool use_pi = true;
  bool use_rmp = true;
  bool use_opt = true;
  bool gate_inputs_per_stage = false;
  // Substitute ground-truth sentence-start flags for the predicted mask while training.
  bool teacher_mask = false;

  static ModelConfig paper(int vocab_size);
  static ModelConfig desk(int vocab_size);

  void validate() const;
  cam::CamConfig cam_config(bool causal) const;

  // Canonical "key = value" lines; hash() is computed over this text.
  std::string to_manifest() const;
  static ModelConfig from_manifest(const std::map<std::string, std::string>& kv);
  std::uint64_t hash() const;
};

// 1-based decoder layer indices after which a module sits.
std::vector<int> cam_placement(int num_layers, int num_cams);

struct EncodedExample {
  std::vector<int> source;
  // Full target including begin and end markers.
  std::vector<int> target;
};

struct BeamConfig {
  int beam_width = 4;
  int max_steps = 200;
  double length_penalty = 1.0;

  void validate() const;
};

// Cross-attention weights recorded during a teacher-forced pass.
struct AttentionTrace {
  // [layer][head] -> (target_len x source_len)
  std::vector<std::vector<Matrix>> cross;
};

class Seq2SeqModel {
 public:
  Seq2SeqModel(const ModelConfig& config, std::uint64_t seed);
  // Binds to an externally populated parameter store (checkpoint loading).
  Seq2SeqModel(const ModelConfig& config, ad::ParameterStore store);
  Seq2SeqModel(const Seq2SeqModel&) = delete;
  Seq2SeqModel& operator=(const Seq2SeqModel&) = delete;

  // Every parameter of a model with this configuration, in creation order.
  static std::vector<ad::ParamSpec> layout(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ad::ParameterStore& parameters() { return store_; }
  const ad::ParameterStore& parameters() const { return store_; }
  const std::vector<int>& placement() const { return placement_; }
  const std::vector<cam::CamModule>& cams() const { return cams_train_; }

  std::int64_t step_counter() const { return steps_; }
  void set_step_counter(std::int64_t s) { steps_ = s; }
  std::uint64_t seed() const { return seed_; }
  void set_seed(std::uint64_t s) { seed_ = s; }

  struct Forward {
    ad::Var logits;
    ad::Var loss_sum;
    int tokens = 0;
  };
  // Teacher-forced pass over one example. dropout_rng may be null.
  Forward forward(ad::Tape& tape, const EncodedExample& example, Rng* dropout_rng = nullptr,
                  AttentionTrace* trace = nullptr, bool inference_windows = false) const;

  // Mean token-level cross-entropy over the batch, no gradient.
  double loss(std::span<const EncodedExample> batch) const;
  // Full teacher-forced logits (target_len-1 x vocab), no gradient.
  Matrix logits(const EncodedExample& example, bool inference_windows = false) const;

  // Gradient of sum over examples of per-sequence summed cross-entropy,
  // divided by the batch size. Returns the mean token cross-entropy.
  double gradients(std::span<const EncodedExample> batch, ad::GradientBuffer& grads, Rng* dropout_rng) const;
  // One plain SGD step. Parameters are kept at 32-bit precision.
  double train_step(std::span<const EncodedExample> batch, double learning_rate, double clip_norm, Rng* dropout_rng);

  // ---- incremental decoding ----
  struct Memory {
    std::vector<Matrix> keys;    // per layer, (src_len x d)
    std::vector<Matrix> values;
  };
  struct DecoderState {
    int position = 0;
    std::vector<Matrix> self_keys;    // per layer, grows by one row per step
    std::vector<Matrix> self_values;
    std::vector<cam::CamStreamState> cams;
  };
  Memory encode_memory(std::span<const int> source) const;
  DecoderState initial_state() const;
  RowVector step(const Memory& memory, DecoderState& state, int token) const;

  std::vector<int> beam_search(std::span<const int> source, const BeamConfig& beam) const;
  std::vector<int> greedy(std::span<const int> source, int max_steps) const;

  // Final norm + vocabulary projection applied to plain rows.
  Matrix vocab_logits(const Matrix& hidden) const;

 private:
  struct AttentionWeights {
    ad::Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  };
  struct Norm {
    ad::Parameter *gain, *bias;
  };
  struct FeedForward {
    ad::Parameter *w1, *b1, *w2, *b2;
  };
  struct EncoderLayer {
    Norm ln1, ln2;
    AttentionWeights attn;
    FeedForward ffn;
  };
  struct DecoderLayer {
    Norm ln1, ln2, ln3;
    AttentionWeights self_attn, cross_attn;
    FeedForward ffn;
  };

  void initialize(Rng& rng);
  void bind();
  void check_tokens(std::span<const int> ids, const char* what) const;
  ad::Var encode(ad::Tape& tape, std::span<const int> source, Rng* dropout_rng) const;

  ModelConfig config_;
  ad::ParameterStore store_;
  std::vector<int> placement_;
  std::vector<cam::CamModule> cams_train_;
  std::vector<cam::CamModule> cams_infer_;
  // cam index for a decoder layer (0-based), or -1.
  std::vector<int> cam_after_layer_;
  ad::Parameter* embedding_ = nullptr;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Norm encoder_norm_{}, decoder_norm_{};
  ad::Parameter* out_w_ = nullptr;
  ad::Parameter* out_b_ = nullptr;
  std::int64_t steps_ = 0;
  std::uint64_t seed_ = 0;
};

Matrix sinusoidal_positions(int length, int dim, int offset = 0);

}  // namespace camrw
