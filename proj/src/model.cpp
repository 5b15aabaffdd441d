#include "camrw/model.hpp"

#include "camrw/errors.hpp"
#include "camrw/tokens.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace camrw {

using ad::Tape;
using ad::Var;

namespace {

constexpr double kMaskedScore = -1e30;

void round_to_float(Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

Matrix causal_mask(int n) {
  Matrix m = Matrix::Zero(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = r + 1; c < n; ++c) m(r, c) = kMaskedScore;
  }
  return m;
}

RowVector layer_norm_row(const RowVector& x, const Matrix& gain, const Matrix& bias) {
  const double mean = x.mean();
  const RowVector centered = x.array() - mean;
  const double var = centered.array().square().mean();
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  return (centered * inv).cwiseProduct(gain.row(0)) + bias.row(0);
}

RowVector attend_rows(const RowVector& q, const Matrix& keys, const Matrix& values, int heads) {
  const Eigen::Index d = q.cols();
  const Eigen::Index dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  RowVector out(d);
  for (int h = 0; h < heads; ++h) {
    RowVector scores = (keys.middleCols(h * dh, dh) * q.middleCols(h * dh, dh).transpose()).transpose() * inv;
    scores = (scores.array() - scores.maxCoeff()).exp().matrix();
    scores /= scores.sum();
    out.middleCols(h * dh, dh) = scores * values.middleCols(h * dh, dh);
  }
  return out;
}

RowVector affine(const RowVector& x, const ad::Parameter* w, const ad::Parameter* b) {
  return x * w->value + b->value.row(0);
}

void append_row(Matrix& m, const RowVector& r) {
  m.conservativeResize(m.rows() + 1, r.cols());
  m.row(m.rows() - 1) = r;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

RowVector log_softmax(const RowVector& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return RowVector(logits.array() - lse);
}

Var dropout_maybe(Var x, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  Matrix u(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = rng->uniform();
  return ad::dropout(x, rate, u);
}

}  // namespace

Matrix sinusoidal_positions(int length, int dim, int offset) {
  Matrix pe(length, dim);
  for (int p = 0; p < length; ++p) {
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(p + offset) / rate;
      pe(p, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------

ModelConfig ModelConfig::paper(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.embed_dim = 768;
  c.num_encoder_layers = 12;
  c.num_decoder_layers = 12;
  c.num_heads = 12;
  c.ffn_dim = 3072;
  c.num_cams = 4;
  c.max_source_length = 512;
  c.max_target_length = 256;
  c.dropout = 0.1;
  c.remap_heads = 12;
  return c;
}

ModelConfig ModelConfig::desk(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.train_causal_window = true;
  return c;
}

void ModelConfig::validate() const {
  if (vocab_size <= kNumReserved) throw std::invalid_argument("ModelConfig: vocabulary too small");
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    throw std::invalid_argument("ModelConfig: embed_dim must be divisible by num_heads");
  }
  if (num_encoder_layers < 1 || num_decoder_layers < 1) throw std::invalid_argument("ModelConfig: layer counts");
  if (ffn_dim <= 0) throw std::invalid_argument("ModelConfig: ffn_dim");
  if (num_cams < 0 || num_cams > num_decoder_layers) {
    throw std::invalid_argument("ModelConfig: need 0 <= num_cams <= num_decoder_layers");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ModelConfig: dropout");
  if (max_source_length < 2 || max_target_length < 2) throw std::invalid_argument("ModelConfig: max lengths");
  cam_config(false).validate();
}

cam::CamConfig ModelConfig::cam_config(bool causal) const {
  cam::CamConfig c;
  c.embed_dim = embed_dim;
  c.num_sentences = num_sentences;
  c.window_size = window_size;
  c.vocab_size = vocab_size;
  c.cls_token_id = cls_token_id;
  c.remap_heads = remap_heads;
  c.causal_window = causal;
  c.use_pi = use_pi;
  c.use_rmp = use_rmp;
  c.use_opt = use_opt;
  c.gate_inputs_per_stage = gate_inputs_per_stage;
  return c;
}

std::string ModelConfig::to_manifest() const {
  std::ostringstream os;
  os.precision(17);
  os << "vocab_size = " << vocab_size << "\n"
     << "embed_dim = " << embed_dim << "\n"
     << "num_encoder_layers = " << num_encoder_layers << "\n"
     << "num_decoder_layers = " << num_decoder_layers << "\n"
     << "num_heads = " << num_heads << "\n"
     << "ffn_dim = " << ffn_dim << "\n"
     << "num_cams = " << num_cams << "\n"
     << "max_source_length = " << max_source_length << "\n"
     << "max_target_length = " << max_target_length << "\n"
     << "dropout = " << dropout << "\n"
     << "num_sentences = " << num_sentences << "\n"
     << "window_size = " << window_size << "\n"
     << "remap_heads = " << remap_heads << "\n"
     << "cls_token_id = " << cls_token_id << "\n"
     << "train_causal_window = " << (train_causal_window ? 1 : 0) << "\n"
     << "use_pi = " << (use_pi ? 1 : 0) << "\n"
     << "use_rmp = " << (use_rmp ? 1 : 0) << "\n"
     << "use_opt = " << (use_opt ? 1 : 0) << "\n"
     << "gate_inputs_per_stage = " << (gate_inputs_per_stage ? 1 : 0) << "\n"
     << "teacher_mask = " << (teacher_mask ? 1 : 0) << "\n";
  return os.str();
}

ModelConfig ModelConfig::from_manifest(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw CheckpointFormatError(std::string("manifest missing key ") + key);
    return it->second;
  };
  auto as_int = [&](const char* key) {
    try {
      return std::stoi(get(key));
    } catch (const std::logic_error&) {
      throw CheckpointFormatError(std::string("manifest key ") + key + " is not an integer");
    }
  };
  ModelConfig c;
  c.vocab_size = as_int("vocab_size");
  c.embed_dim = as_int("embed_dim");
  c.num_encoder_layers = as_int("num_encoder_layers");
  c.num_decoder_layers = as_int("num_decoder_layers");
  c.num_heads = as_int("num_heads");
  c.ffn_dim = as_int("ffn_dim");
  c.num_cams = as_int("num_cams");
  c.max_source_length = as_int("max_source_length");
  c.max_target_length = as_int("max_target_length");
  try {
    c.dropout = std::stod(get("dropout"));
  } catch (const std::logic_error&) {
    throw CheckpointFormatError("manifest key dropout is not a number");
  }
  c.num_sentences = as_int("num_sentences");
  c.window_size = as_int("window_size");
  c.remap_heads = as_int("remap_heads");
  c.cls_token_id = as_int("cls_token_id");
  c.train_causal_window = as_int("train_causal_window") != 0;
  c.use_pi = as_int("use_pi") != 0;
  c.use_rmp = as_int("use_rmp") != 0;
  c.use_opt = as_int("use_opt") != 0;
  c.gate_inputs_per_stage = as_int("gate_inputs_per_stage") != 0;
  c.teacher_mask = as_int("teacher_mask") != 0;
  return c;
}

std::uint64_t ModelConfig::hash() const { return fnv1a(to_manifest()); }

std::vector<int> cam_placement(int num_layers, int num_cams) {
  if (num_layers < 1) throw std::invalid_argument("cam_placement: need at least one layer");
  if (num_cams < 0 || num_cams > num_layers) {
    throw std::invalid_argument("cam_placement: need 0 <= k <= L (k=" + std::to_string(num_cams) +
                                ", L=" + std::to_string(num_layers) + ")");
  }
  std::vector<int> out;
  for (int m = 1; m <= num_cams; ++m) {
    out.push_back(static_cast<int>(std::lround(static_cast<double>(m) * num_layers / num_cams)));
  }
  if (num_cams > 0) out.back() = num_layers;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void BeamConfig::validate() const {
  if (beam_width < 1) throw std::invalid_argument("beam_width must be >= 1");
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
}

// ---------------------------------------------------------------------------

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  Rng rng(seed);
  initialize(rng);
  bind();
}

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config, ad::ParameterStore store)
    : config_(config), store_(std::move(store)) {
  config_.validate();
  bind();
}

std::vector<ad::ParamSpec> Seq2SeqModel::layout(const ModelConfig& config) {
  using Init = ad::ParamSpec::Init;
  const int d = config.embed_dim;
  const int V = config.vocab_size;
  std::vector<ad::ParamSpec> out;
  out.push_back({"embedding", V, d, Init::normal});
  auto add_norm = [&](const std::string& p) {
    out.push_back({p + ".gain", 1, d, Init::ones});
    out.push_back({p + ".bias", 1, d, Init::zeros});
  };
  auto add_attn = [&](const std::string& p) {
    for (const char* n : {"q", "k", "v", "o"}) {
      out.push_back({p + ".w" + n, d, d, Init::xavier});
      out.push_back({p + ".b" + n, 1, d, Init::zeros});
    }
  };
  auto add_ffn = [&](const std::string& p) {
    out.push_back({p + ".w1", d, config.ffn_dim, Init::xavier});
    out.push_back({p + ".b1", 1, config.ffn_dim, Init::zeros});
    out.push_back({p + ".w2", config.ffn_dim, d, Init::xavier});
    out.push_back({p + ".b2", 1, d, Init::zeros});
  };
  for (int l = 0; l < config.num_encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    add_norm(p + ".ln1");
    add_attn(p + ".attn");
    add_norm(p + ".ln2");
    add_ffn(p + ".ffn");
  }
  add_norm("encoder.norm");
  for (int l = 0; l < config.num_decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    add_norm(p + ".ln1");
    add_attn(p + ".self");
    add_norm(p + ".ln2");
    add_attn(p + ".cross");
    add_norm(p + ".ln3");
    add_ffn(p + ".ffn");
  }
  add_norm("decoder.norm");
  out.push_back({"output.w", d, V, Init::xavier});
  out.push_back({"output.b", 1, V, Init::zeros});
  const std::vector<int> placement = cam_placement(config.num_decoder_layers, config.num_cams);
  for (std::size_t c = 0; c < placement.size(); ++c) {
    for (auto& spec : cam::CamModule::layout("cam" + std::to_string(c), config.cam_config(false))) {
      out.push_back(std::move(spec));
    }
  }
  return out;
}

void Seq2SeqModel::initialize(Rng& rng) {
  for (const auto& spec : layout(config_)) store_.add(spec.name, ad::materialize(spec, rng));
}

void Seq2SeqModel::bind() {
  auto get = [&](const std::string& name) {
    ad::Parameter* p = store_.find(name);
    if (p == nullptr) throw CheckpointFormatError("missing tensor " + name);
    return p;
  };
  auto norm = [&](const std::string& p) { return Norm{get(p + ".gain"), get(p + ".bias")}; };
  auto attn = [&](const std::string& p) {
    return AttentionWeights{get(p + ".wq"), get(p + ".bq"), get(p + ".wk"), get(p + ".bk"),
                            get(p + ".wv"), get(p + ".bv"), get(p + ".wo"), get(p + ".bo")};
  };
  auto ffn = [&](const std::string& p) {
    return FeedForward{get(p + ".w1"), get(p + ".b1"), get(p + ".w2"), get(p + ".b2")};
  };
  embedding_ = get("embedding");
  if (embedding_->value.rows() != config_.vocab_size || embedding_->value.cols() != config_.embed_dim) {
    throw CheckpointFormatError("embedding shape does not match the configuration");
  }
  encoder_.clear();
  decoder_.clear();
  for (int l = 0; l < config_.num_encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    encoder_.push_back(EncoderLayer{norm(p + ".ln1"), norm(p + ".ln2"), attn(p + ".attn"), ffn(p + ".ffn")});
  }
  encoder_norm_ = norm("encoder.norm");
  for (int l = 0; l < config_.num_decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    decoder_.push_back(DecoderLayer{norm(p + ".ln1"), norm(p + ".ln2"), norm(p + ".ln3"), attn(p + ".self"),
                                    attn(p + ".cross"), ffn(p + ".ffn")});
  }
  decoder_norm_ = norm("decoder.norm");
  out_w_ = get("output.w");
  out_b_ = get("output.b");
  placement_ = cam_placement(config_.num_decoder_layers, config_.num_cams);
  cams_train_.clear();
  cams_infer_.clear();
  cam_after_layer_.assign(static_cast<std::size_t>(config_.num_decoder_layers), -1);
  for (std::size_t c = 0; c < placement_.size(); ++c) {
    const std::string prefix = "cam" + std::to_string(c);
    cams_train_.push_back(cam::CamModule::bind(store_, prefix, config_.cam_config(config_.train_causal_window)));
    cams_infer_.push_back(cam::CamModule::bind(store_, prefix, config_.cam_config(true)));
    cam_after_layer_[static_cast<std::size_t>(placement_[c] - 1)] = static_cast<int>(c);
  }
}

void Seq2SeqModel::check_tokens(std::span<const int> ids, const char* what) const {
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw std::invalid_argument(std::string(what) + ": token id " + std::to_string(id) + " outside vocabulary of " +
                                  std::to_string(config_.vocab_size));
    }
  }
}

namespace {

struct AttnVars {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

Var multi_head(Var q_in, Var kv_in, const AttnVars& w, int heads, const Matrix* mask, std::vector<Matrix>* record) {
  const int d = static_cast<int>(q_in.cols());
  const int dh = d / heads;
  Var q = ad::linear(q_in, w.wq, w.bq);
  Var k = ad::linear(kv_in, w.wk, w.bk);
  Var v = ad::linear(kv_in, w.wv, w.bv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var scores = ad::scale(ad::matmul_bt(ad::slice_cols(q, h * dh, dh), ad::slice_cols(k, h * dh, dh)), inv);
    if (mask != nullptr) scores = ad::add_constant(scores, *mask);
    Var att = ad::softmax_rows(scores);
    if (record != nullptr) record->push_back(att.value());
    outs.push_back(ad::matmul(att, ad::slice_cols(v, h * dh, dh)));
  }
  return ad::linear(ad::concat_cols(outs), w.wo, w.bo);
}

}  // namespace

Var Seq2SeqModel::encode(Tape& tape, std::span<const int> source, Rng* dropout_rng) const {
  const int n = static_cast<int>(source.size());
  if (n < 1) throw std::invalid_argument("encode: empty source");
  if (n > config_.max_source_length) throw std::invalid_argument("encode: source longer than max_source_length");
  check_tokens(source, "source");
  auto P = [&](ad::Parameter* p) { return tape.param(*p); };
  Var x = ad::add_constant(ad::gather_rows(P(embedding_), source), sinusoidal_positions(n, config_.embed_dim));
  x = dropout_maybe(x, config_.dropout, dropout_rng);
  for (const auto& layer : encoder_) {
    const AttnVars a{P(layer.attn.wq), P(layer.attn.bq), P(layer.attn.wk), P(layer.attn.bk),
                     P(layer.attn.wv), P(layer.attn.bv), P(layer.attn.wo), P(layer.attn.bo)};
    Var h = ad::layer_norm(x, P(layer.ln1.gain), P(layer.ln1.bias));
    x = ad::add(x, dropout_maybe(multi_head(h, h, a, config_.num_heads, nullptr, nullptr), config_.dropout, dropout_rng));
    h = ad::layer_norm(x, P(layer.ln2.gain), P(layer.ln2.bias));
    Var f = ad::linear(ad::relu(ad::linear(h, P(layer.ffn.w1), P(layer.ffn.b1))), P(layer.ffn.w2), P(layer.ffn.b2));
    x = ad::add(x, dropout_maybe(f, config_.dropout, dropout_rng));
  }
  return ad::layer_norm(x, P(encoder_norm_.gain), P(encoder_norm_.bias));
}

Seq2SeqModel::Forward Seq2SeqModel::forward(Tape& tape, const EncodedExample& example, Rng* dropout_rng,
                                            AttentionTrace* trace, bool inference_windows) const {
  // Trailing padding is not part of the sequence.
  std::size_t tlen = example.target.size();
  while (tlen > 0 && example.target[tlen - 1] == kPadId) --tlen;
  if (tlen < 2) throw std::invalid_argument("forward: target needs at least two tokens");
  const std::span<const int> target(example.target.data(), tlen);
  check_tokens(target, "target");
  if (static_cast<int>(tlen) > config_.max_target_length) {
    throw std::invalid_argument("forward: target longer than max_target_length");
  }
  const int n = static_cast<int>(tlen) - 1;
  const std::span<const int> inputs = target.first(static_cast<std::size_t>(n));
  std::vector<int> labels(target.begin() + 1, target.end());
  for (int& l : labels) {
    if (l == kPadId) l = -1;
  }

  auto P = [&](ad::Parameter* p) { return tape.param(*p); };
  Var memory = encode(tape, example.source, dropout_rng);
  Var x = ad::add_constant(ad::gather_rows(P(embedding_), inputs), sinusoidal_positions(n, config_.embed_dim));
  x = dropout_maybe(x, config_.dropout, dropout_rng);
  const Matrix mask = causal_mask(n);
  if (trace != nullptr) trace->cross.assign(decoder_.size(), {});
  const auto& cams = inference_windows ? cams_infer_ : cams_train_;
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const auto& layer = decoder_[l];
    const AttnVars sa{P(layer.self_attn.wq), P(layer.self_attn.bq), P(layer.self_attn.wk), P(layer.self_attn.bk),
                      P(layer.self_attn.wv), P(layer.self_attn.bv), P(layer.self_attn.wo), P(layer.self_attn.bo)};
    const AttnVars ca{P(layer.cross_attn.wq), P(layer.cross_attn.bq), P(layer.cross_attn.wk), P(layer.cross_attn.bk),
                      P(layer.cross_attn.wv), P(layer.cross_attn.bv), P(layer.cross_attn.wo), P(layer.cross_attn.bo)};
    Var h = ad::layer_norm(x, P(layer.ln1.gain), P(layer.ln1.bias));
    x = ad::add(x, dropout_maybe(multi_head(h, h, sa, config_.num_heads, &mask, nullptr), config_.dropout, dropout_rng));
    h = ad::layer_norm(x, P(layer.ln2.gain), P(layer.ln2.bias));
    x = ad::add(x, dropout_maybe(multi_head(h, memory, ca, config_.num_heads, nullptr,
                                            trace != nullptr ? &trace->cross[l] : nullptr),
                                 config_.dropout, dropout_rng));
    h = ad::layer_norm(x, P(layer.ln3.gain), P(layer.ln3.bias));
    Var f = ad::linear(ad::relu(ad::linear(h, P(layer.ffn.w1), P(layer.ffn.b1))), P(layer.ffn.w2), P(layer.ffn.b2));
    x = ad::add(x, dropout_maybe(f, config_.dropout, dropout_rng));
    const int c = cam_after_layer_[l];
    if (c >= 0) {
      cam::SentenceStartMask m;
      if (config_.teacher_mask && !inference_windows) {
        m.flags.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) m.flags[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == config_.cls_token_id;
      } else {
        m = cam::mask_from_logits(vocab_logits(x.value()), config_.cls_token_id);
      }
      x = cams[static_cast<std::size_t>(c)].forward(tape, x, m);
    }
  }
  Var logits = ad::linear(ad::layer_norm(x, P(decoder_norm_.gain), P(decoder_norm_.bias)), P(out_w_), P(out_b_));
  Var loss = ad::cross_entropy_sum(logits, labels);
  int tokens = 0;
  for (int l : labels) tokens += l >= 0 ? 1 : 0;
  return Forward{logits, loss, tokens};
}

Matrix Seq2SeqModel::vocab_logits(const Matrix& hidden) const {
  Matrix normed(hidden.rows(), hidden.cols());
  for (Eigen::Index r = 0; r < hidden.rows(); ++r) {
    normed.row(r) = layer_norm_row(hidden.row(r), decoder_norm_.gain->value, decoder_norm_.bias->value);
  }
  Matrix out = normed * out_w_->value;
  out.rowwise() += out_b_->value.row(0);
  return out;
}

double Seq2SeqModel::loss(std::span<const EncodedExample> batch) const {
  double total = 0.0;
  int tokens = 0;
  for (const auto& ex : batch) {
    Tape tape(false);
    const Forward f = forward(tape, ex);
    total += f.loss_sum.value()(0, 0);
    tokens += f.tokens;
  }
  return tokens > 0 ? total / tokens : 0.0;
}

Matrix Seq2SeqModel::logits(const EncodedExample& example, bool inference_windows) const {
  Tape tape(false);
  return forward(tape, example, nullptr, nullptr, inference_windows).logits.value();
}

double Seq2SeqModel::gradients(std::span<const EncodedExample> batch, ad::GradientBuffer& grads, Rng* dropout_rng) const {
  if (batch.empty()) throw std::invalid_argument("gradients: empty batch");
  double total = 0.0;
  int tokens = 0;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    Tape tape(true);
    const Forward f = forward(tape, ex, dropout_rng);
    total += f.loss_sum.value()(0, 0);
    tokens += f.tokens;
    tape.backward(ad::scale(f.loss_sum, inv), grads);
  }
  return tokens > 0 ? total / tokens : 0.0;
}

double Seq2SeqModel::train_step(std::span<const EncodedExample> batch, double learning_rate, double clip_norm,
                                Rng* dropout_rng) {
  ad::GradientBuffer grads;
  const double loss = gradients(batch, grads, dropout_rng);
  if (clip_norm > 0.0) {
    const double norm = std::sqrt(grads.squared_norm());
    if (norm > clip_norm) grads.scale(clip_norm / norm);
  }
  for (auto& p : store_.all()) {
    const Matrix& g = grads.get(&p);
    if (g.size() == 0) continue;
    p.value -= learning_rate * g;
    round_to_float(p.value);
  }
  ++steps_;
  return loss;
}

// ---------------------------------------------------------------------------

Seq2SeqModel::Memory Seq2SeqModel::encode_memory(std::span<const int> source) const {
  Tape tape(false);
  const Matrix mem = encode(tape, source, nullptr).value();
  Memory m;
  for (const auto& layer : decoder_) {
    Matrix k = mem * layer.cross_attn.wk->value;
    k.rowwise() += layer.cross_attn.bk->value.row(0);
    Matrix v = mem * layer.cross_attn.wv->value;
    v.rowwise() += layer.cross_attn.bv->value.row(0);
    m.keys.push_back(std::move(k));
    m.values.push_back(std::move(v));
  }
  return m;
}

Seq2SeqModel::DecoderState Seq2SeqModel::initial_state() const {
  DecoderState s;
  s.self_keys.assign(decoder_.size(), Matrix(0, config_.embed_dim));
  s.self_values.assign(decoder_.size(), Matrix(0, config_.embed_dim));
  for (const auto& c : cams_infer_) s.cams.push_back(c.initial_state());
  return s;
}

RowVector Seq2SeqModel::step(const Memory& memory, DecoderState& state, int token) const {
  if (token < 0 || token >= config_.vocab_size) throw std::invalid_argument("step: token outside vocabulary");
  RowVector x = embedding_->value.row(token) + sinusoidal_positions(1, config_.embed_dim, state.position).row(0);
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const auto& layer = decoder_[l];
    RowVector h = layer_norm_row(x, layer.ln1.gain->value, layer.ln1.bias->value);
    append_row(state.self_keys[l], affine(h, layer.self_attn.wk, layer.self_attn.bk));
    append_row(state.self_values[l], affine(h, layer.self_attn.wv, layer.self_attn.bv));
    RowVector a = attend_rows(affine(h, layer.self_attn.wq, layer.self_attn.bq), state.self_keys[l],
                              state.self_values[l], config_.num_heads);
    x += affine(a, layer.self_attn.wo, layer.self_attn.bo);
    h = layer_norm_row(x, layer.ln2.gain->value, layer.ln2.bias->value);
    a = attend_rows(affine(h, layer.cross_attn.wq, layer.cross_attn.bq), memory.keys[l], memory.values[l],
                    config_.num_heads);
    x += affine(a, layer.cross_attn.wo, layer.cross_attn.bo);
    h = layer_norm_row(x, layer.ln3.gain->value, layer.ln3.bias->value);
    x += affine(affine(h, layer.ffn.w1, layer.ffn.b1).cwiseMax(0.0), layer.ffn.w2, layer.ffn.b2);
    const int c = cam_after_layer_[l];
    if (c >= 0) {
      const Matrix row = x;
      const bool masked = cam::mask_from_logits(vocab_logits(row), config_.cls_token_id).flags[0] != 0;
      x = cams_infer_[static_cast<std::size_t>(c)].step(x, masked, state.cams[static_cast<std::size_t>(c)]);
    }
  }
  ++state.position;
  return vocab_logits(Matrix(x)).row(0);
}

std::vector<int> Seq2SeqModel::greedy(std::span<const int> source, int max_steps) const {
  if (max_steps < 1) throw std::invalid_argument("greedy: max_steps must be >= 1");
  const Memory memory = encode_memory(source);
  DecoderState state = initial_state();
  std::vector<int> out;
  int token = kBosId;
  for (int t = 0; t < max_steps; ++t) {
    const RowVector lp = log_softmax(step(memory, state, token));
    Eigen::Index best = 0;
    for (Eigen::Index v = 1; v < lp.cols(); ++v) {
      if (lp(v) > lp(best)) best = v;
    }
    token = static_cast<int>(best);
    if (token == kEosId) break;
    out.push_back(token);
  }
  return out;
}

std::vector<int> Seq2SeqModel::beam_search(std::span<const int> source, const BeamConfig& beam) const {
  beam.validate();
  struct Hyp {
    std::vector<int> tokens;
    double logp = 0.0;
    DecoderState state;
    RowVector next;  // log-probabilities of the next token
  };
  struct Done {
    std::vector<int> tokens;
    double score;
  };
  auto normalized = [&](double logp, std::size_t len) {
    return logp / std::pow(static_cast<double>(std::max<std::size_t>(len, 1)), beam.length_penalty);
  };

  const Memory memory = encode_memory(source);
  std::vector<Hyp> live;
  {
    Hyp h;
    h.state = initial_state();
    h.next = log_softmax(step(memory, h.state, kBosId));
    live.push_back(std::move(h));
  }
  std::vector<Done> finished;
  const int W = beam.beam_width;
  for (int t = 0; t < beam.max_steps && !live.empty(); ++t) {
    struct Cand {
      std::size_t beam;
      int token;
      double logp;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const RowVector& lp = live[b].next;
      std::vector<int> idx(static_cast<std::size_t>(lp.cols()));
      std::iota(idx.begin(), idx.end(), 0);
      const std::size_t take = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(W + 1));
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                        [&](int a, int c) { return lp(a) > lp(c) || (lp(a) == lp(c) && a < c); });
      for (std::size_t i = 0; i < take; ++i) cands.push_back(Cand{b, idx[i], live[b].logp + lp(idx[i])});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& c) { return a.logp > c.logp; });
    std::vector<Hyp> next_live;
    const bool last_step = t + 1 == beam.max_steps;
    for (std::size_t r = 0; r < cands.size() && static_cast<int>(next_live.size()) < W; ++r) {
      const Cand& c = cands[r];
      const Hyp& parent = live[c.beam];
      if (c.token == kEosId) {
        if (static_cast<int>(r) < W) {
          finished.push_back(Done{parent.tokens, normalized(c.logp, parent.tokens.size() + 1)});
        }
        continue;
      }
      Hyp h;
      h.tokens = parent.tokens;
      h.tokens.push_back(c.token);
      h.logp = c.logp;
      h.state = parent.state;
      if (!last_step) h.next = log_softmax(step(memory, h.state, c.token));
      next_live.push_back(std::move(h));
    }
    live = std::move(next_live);
    if (static_cast<int>(finished.size()) >= W) break;
  }
  if (finished.empty()) {
    for (const auto& h : live) finished.push_back(Done{h.tokens, normalized(h.logp, h.tokens.size())});
  }
  if (finished.empty()) return {};
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    if (finished[i].score > finished[best].score) best = i;
  }
  return finished[best].tokens;
}

}  // namespace camrw
