#include "camrw/cam.hpp"

#include "camrw/errors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace camrw::cam {

namespace {

RowVector softmax(const RowVector& x) {
  RowVector e = (x.array() - x.maxCoeff()).exp().matrix();
  return e / e.sum();
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void require_row(const RowVector& v, Eigen::Index n, const char* what) {
  if (v.cols() != n) {
    throw ShapeError(std::string(what) + ": expected length " + std::to_string(n) + ", got " +
                     std::to_string(v.cols()));
  }
}

// Multi-head attention of one query row over key/value rows [lo, hi].
RowVector attend(const RowVector& q, const Matrix& keys, const Matrix& values, int heads) {
  const Eigen::Index d = q.cols();
  const Eigen::Index dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  RowVector out(d);
  for (int h = 0; h < heads; ++h) {
    const RowVector scores = (keys.middleCols(h * dh, dh) * q.middleCols(h * dh, dh).transpose()).transpose() * inv;
    const RowVector w = softmax(scores);
    out.middleCols(h * dh, dh) = w * values.middleCols(h * dh, dh);
  }
  return out;
}

}  // namespace

void CamConfig::validate() const {
  if (embed_dim <= 0) throw std::invalid_argument("CamConfig: embed_dim must be positive");
  if (num_sentences <= 0) throw std::invalid_argument("CamConfig: num_sentences must be positive");
  if (window_size < 2 || window_size % 2 != 0) {
    throw std::invalid_argument("CamConfig: window_size must be even and >= 2");
  }
  if (vocab_size <= 0) throw std::invalid_argument("CamConfig: vocab_size must be positive");
  if (cls_token_id < 0 || cls_token_id >= vocab_size) {
    throw std::invalid_argument("CamConfig: cls_token_id must be < vocab_size");
  }
  if (remap_heads <= 0 || embed_dim % remap_heads != 0) {
    throw std::invalid_argument("CamConfig: embed_dim must be divisible by remap_heads");
  }
  if (use_opt && !use_pi && !use_rmp) {
    throw std::invalid_argument("CamConfig: intensity gating needs primitive intervention or remapping");
  }
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::ori: return "ori";
    case Stage::odr: return "odr";
    case Stage::itv: return "itv";
    case Stage::rmp: return "rmp";
    case Stage::opm: return "opm";
  }
  return "?";
}

EmbeddingSequence EmbeddingSequence::advanced(Matrix next_values, Stage next) const {
  if (static_cast<int>(next) <= static_cast<int>(stage)) {
    throw std::logic_error(std::string("stage transition ") + stage_name(stage) + " -> " + stage_name(next));
  }
  if (next_values.rows() != values.rows() || next_values.cols() != values.cols()) {
    throw ShapeError("stage transition changed the sequence shape");
  }
  return EmbeddingSequence{std::move(next_values), next};
}

std::size_t SentenceStartMask::count() const {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), std::uint8_t{1}));
}

std::vector<int> SentenceStartMask::positions() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i] != 0) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::optional<Window> remap_window(int pos, int len, const CamConfig& config) {
  if (pos < 0 || pos >= len) return std::nullopt;
  const int half = config.window_size / 2;
  if (config.causal_window) {
    return Window{std::max(0, pos - half), pos};
  }
  if (len >= config.window_size + 1) {
    if (pos < half || pos > len - 1 - half) return std::nullopt;
    return Window{pos - half, pos + half};
  }
  // Short sequence: one window over everything, renewing its middle row.
  if (pos != (len - 1) / 2) return std::nullopt;
  return Window{0, len - 1};
}

OrderVector make_order_vector(int sentence_index, int dim, int num_sentences) {
  if (sentence_index < 1 || sentence_index > num_sentences) {
    throw std::invalid_argument("sentence index " + std::to_string(sentence_index) + " outside [1, " +
                                std::to_string(num_sentences) + "]");
  }
  if (dim <= 0) throw std::invalid_argument("order vector dimension must be positive");
  return OrderVector{sentence_index, RowVector::Constant(dim, std::log10(static_cast<double>(sentence_index) + 1.0))};
}

Matrix order_matrix(int num_sentences, int dim) {
  Matrix o(num_sentences, dim);
  for (int j = 1; j <= num_sentences; ++j) o.row(j - 1) = make_order_vector(j, dim, num_sentences).values;
  return o;
}

RowVector order_enhance(const RowVector& e_ori, const OrderVector& order, const Matrix& projection_w,
                        const Matrix& projection_b) {
  const Eigen::Index d = e_ori.cols();
  require_row(order.values, d, "order_enhance: order vector");
  if (projection_w.rows() != 2 * d || projection_b.rows() != 1 || projection_b.cols() != projection_w.cols()) {
    throw ShapeError("order_enhance: projection must map 2*embed_dim to embed_dim");
  }
  return e_ori * projection_w.topRows(d) + order.values * projection_w.bottomRows(d) + projection_b.row(0);
}

PositionDistribution position_probabilities_from_sum(const RowVector& prefix_sum, const PositionHead& head) {
  require_row(prefix_sum, head.w1.rows(), "position_probabilities");
  const RowVector hidden = (prefix_sum.cwiseMax(0.0) * head.w1 + head.b1.row(0)).cwiseMax(0.0);
  const RowVector logits = hidden * head.w2 + head.b2.row(0);
  return PositionDistribution{softmax(logits)};
}

PositionDistribution position_probabilities(const Matrix& prefix, const PositionHead& head) {
  RowVector sum = RowVector::Zero(head.w1.rows());
  if (prefix.rows() > 0) {
    if (prefix.cols() != head.w1.rows()) throw ShapeError("position_probabilities: prefix width");
    sum = prefix.colwise().sum();
  }
  return position_probabilities_from_sum(sum, head);
}

GateCoefficients intensity_gates(const RowVector& e_ori, const Matrix& gate_w) {
  return intensity_gates(e_ori, e_ori, e_ori, gate_w);
}

GateCoefficients intensity_gates(const RowVector& in_ori, const RowVector& in_itv, const RowVector& in_rmp,
                                 const Matrix& gate_w) {
  if (gate_w.cols() != 3) throw ShapeError("intensity_gates: gate weights must have three columns");
  require_row(in_ori, gate_w.rows(), "intensity_gates");
  require_row(in_itv, gate_w.rows(), "intensity_gates");
  require_row(in_rmp, gate_w.rows(), "intensity_gates");
  RowVector g(3);
  g(0) = sigmoid(in_ori.dot(gate_w.col(0)));
  g(1) = sigmoid(in_itv.dot(gate_w.col(1)));
  g(2) = sigmoid(in_rmp.dot(gate_w.col(2)));
  const RowVector c = softmax(g);
  return GateCoefficients{c(0), c(1), c(2)};
}

RowVector optimal_combine(const RowVector& e_ori, const RowVector& e_itv, const RowVector& e_rmp,
                          const GateCoefficients& c) {
  require_row(e_itv, e_ori.cols(), "optimal_combine");
  require_row(e_rmp, e_ori.cols(), "optimal_combine");
  return c.ori * e_ori + c.itv * e_itv + c.rmp * e_rmp;
}

SentenceStartMask mask_from_logits(const Matrix& logits, int cls_token_id) {
  if (cls_token_id < 0 || cls_token_id >= logits.cols()) {
    throw std::invalid_argument("sentence_start_mask: cls id outside vocabulary");
  }
  SentenceStartMask mask;
  mask.flags.resize(static_cast<std::size_t>(logits.rows()), 0);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    mask.flags[static_cast<std::size_t>(r)] = best == cls_token_id ? 1 : 0;
  }
  return mask;
}

SentenceStartMask sentence_start_mask(const Matrix& e_ori, const VocabProjection& vocab_projection,
                                      int cls_token_id) {
  const Matrix logits = vocab_projection(e_ori);
  if (logits.rows() != e_ori.rows()) throw ShapeError("sentence_start_mask: projection changed row count");
  return mask_from_logits(logits, cls_token_id);
}

EmbeddingSequence fuse_mask(const EmbeddingSequence& e_opm, const EmbeddingSequence& e_ori,
                            const SentenceStartMask& mask) {
  if (e_opm.values.rows() != e_ori.values.rows() || e_opm.values.cols() != e_ori.values.cols() ||
      static_cast<Eigen::Index>(mask.size()) != e_ori.values.rows()) {
    throw ShapeError("fuse_mask: lengths disagree");
  }
  Matrix out = e_ori.values;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.flags[i] != 0) out.row(static_cast<Eigen::Index>(i)) = e_opm.values.row(static_cast<Eigen::Index>(i));
  }
  return EmbeddingSequence{std::move(out), Stage::opm};
}

EmbeddingSequence primitive_intervene(const EmbeddingSequence& e_ori, const SentenceStartMask& mask,
                                      const CamModule& module) {
  const CamConfig& cfg = module.config();
  if (static_cast<Eigen::Index>(mask.size()) != e_ori.length()) throw ShapeError("primitive_intervene: mask length");
  if (e_ori.values.cols() != cfg.embed_dim) throw ShapeError("primitive_intervene: embedding width");
  const auto& w = module.weights();
  const PositionHead head = module.position_head();
  Matrix itv = e_ori.values;
  RowVector prefix_sum = RowVector::Zero(cfg.embed_dim);
  for (Eigen::Index i = 0; i < itv.rows(); ++i) {
    if (mask.flags[static_cast<std::size_t>(i)] != 0) {
      const PositionDistribution h = position_probabilities_from_sum(prefix_sum, head);
      const RowVector e = e_ori.values.row(i);
      RowVector mixed = RowVector::Zero(cfg.embed_dim);
      for (int j = 1; j <= cfg.num_sentences; ++j) {
        const OrderVector o = make_order_vector(j, cfg.embed_dim, cfg.num_sentences);
        mixed += h.probs(j - 1) * order_enhance(e, o, w.order_w->value, w.order_b->value);
      }
      itv.row(i) = mixed;
    }
    prefix_sum += itv.row(i);
  }
  return e_ori.advanced(std::move(itv), Stage::itv);
}

EmbeddingSequence context_remap(const EmbeddingSequence& e_itv, const CamModule& module,
                                const std::vector<int>& only) {
  const CamConfig& cfg = module.config();
  const auto& w = module.weights();
  const Matrix& x = e_itv.values;
  const int len = static_cast<int>(x.rows());
  if (len < 1) throw ShapeError("context_remap: empty sequence");
  if (x.cols() != cfg.embed_dim) throw ShapeError("context_remap: embedding width");
  const Matrix keys = (x * w.rmp_wk->value).rowwise() + w.rmp_bk->value.row(0);
  const Matrix values = (x * w.rmp_wv->value).rowwise() + w.rmp_bv->value.row(0);
  Matrix out = x;
  auto renew = [&](int pos) {
    const auto win = remap_window(pos, len, cfg);
    if (!win) return;
    const int n = win->hi - win->lo + 1;
    const RowVector q = x.row(pos) * w.rmp_wq->value + w.rmp_bq->value.row(0);
    const RowVector heads = attend(q, keys.middleRows(win->lo, n), values.middleRows(win->lo, n), cfg.remap_heads);
    out.row(pos) = x.row(pos) + heads * w.rmp_wo->value + w.rmp_bo->value.row(0);
  };
  if (only.empty()) {
    for (int p = 0; p < len; ++p) renew(p);
  } else {
    for (int p : only) renew(p);
  }
  return e_itv.advanced(std::move(out), Stage::rmp);
}

EmbeddingSequence cam_forward(const EmbeddingSequence& e_ori, const SentenceStartMask& mask,
                              const CamModule& module) {
  const CamConfig& cfg = module.config();
  if (e_ori.stage != Stage::ori) throw std::logic_error("cam_forward: input must be at stage ori");
  if (static_cast<Eigen::Index>(mask.size()) != e_ori.length()) throw ShapeError("cam_forward: mask length");
  const std::vector<int> masked = mask.positions();
  const EmbeddingSequence itv =
      cfg.use_pi ? primitive_intervene(e_ori, mask, module) : e_ori.advanced(e_ori.values, Stage::itv);
  const EmbeddingSequence rmp =
      cfg.use_rmp && !masked.empty() ? context_remap(itv, module, masked) : itv.advanced(itv.values, Stage::rmp);
  Matrix opm = rmp.values;
  if (cfg.use_opt) {
    const Matrix& gw = module.weights().gate_w->value;
    for (int p : masked) {
      const RowVector o = e_ori.values.row(p);
      const RowVector i = itv.values.row(p);
      const RowVector r = rmp.values.row(p);
      const GateCoefficients c = cfg.gate_inputs_per_stage ? intensity_gates(o, i, r, gw) : intensity_gates(o, gw);
      opm.row(p) = optimal_combine(o, i, r, c);
    }
  }
  return fuse_mask(rmp.advanced(std::move(opm), Stage::opm), e_ori, mask);
}

std::vector<ad::ParamSpec> CamModule::layout(const std::string& prefix, const CamConfig& config) {
  using Init = ad::ParamSpec::Init;
  const int d = config.embed_dim;
  const int s = config.num_sentences;
  auto name = [&](const char* sub, const char* n) { return prefix + "." + sub + "." + n; };
  return {
      {name(kSubmoduleOrder, "w"), 2 * d, d, Init::xavier},
      {name(kSubmoduleOrder, "b"), 1, d, Init::zeros},
      {name(kSubmodulePosition, "w1"), d, d, Init::xavier},
      {name(kSubmodulePosition, "b1"), 1, d, Init::zeros},
      {name(kSubmodulePosition, "w2"), d, s, Init::xavier},
      {name(kSubmodulePosition, "b2"), 1, s, Init::zeros},
      {name(kSubmoduleRemap, "wq"), d, d, Init::xavier},
      {name(kSubmoduleRemap, "bq"), 1, d, Init::zeros},
      {name(kSubmoduleRemap, "wk"), d, d, Init::xavier},
      {name(kSubmoduleRemap, "bk"), 1, d, Init::zeros},
      {name(kSubmoduleRemap, "wv"), d, d, Init::xavier},
      {name(kSubmoduleRemap, "bv"), 1, d, Init::zeros},
      // Zero output projection: remapping starts as the identity through its residual.
      {name(kSubmoduleRemap, "wo"), d, d, Init::zeros},
      {name(kSubmoduleRemap, "bo"), 1, d, Init::zeros},
      {name(kSubmoduleGate, "w"), d, 3, Init::small_normal},
  };
}

CamModule CamModule::create(ad::ParameterStore& store, const std::string& prefix, const CamConfig& config, Rng& rng) {
  config.validate();
  for (const auto& spec : layout(prefix, config)) store.add(spec.name, ad::materialize(spec, rng));
  return bind(store, prefix, config);
}

CamModule CamModule::bind(ad::ParameterStore& store, const std::string& prefix, const CamConfig& config) {
  config.validate();
  auto get = [&](const char* sub, const char* n) {
    ad::Parameter* p = store.find(prefix + "." + sub + "." + n);
    if (p == nullptr) throw std::invalid_argument("missing parameter " + prefix + "." + sub + "." + n);
    return p;
  };
  CamModule m;
  m.config_ = config;
  m.prefix_ = prefix;
  auto& w = m.weights_;
  w.order_w = get(kSubmoduleOrder, "w");
  w.order_b = get(kSubmoduleOrder, "b");
  w.pos_w1 = get(kSubmodulePosition, "w1");
  w.pos_b1 = get(kSubmodulePosition, "b1");
  w.pos_w2 = get(kSubmodulePosition, "w2");
  w.pos_b2 = get(kSubmodulePosition, "b2");
  w.rmp_wq = get(kSubmoduleRemap, "wq");
  w.rmp_bq = get(kSubmoduleRemap, "bq");
  w.rmp_wk = get(kSubmoduleRemap, "wk");
  w.rmp_bk = get(kSubmoduleRemap, "bk");
  w.rmp_wv = get(kSubmoduleRemap, "wv");
  w.rmp_bv = get(kSubmoduleRemap, "bv");
  w.rmp_wo = get(kSubmoduleRemap, "wo");
  w.rmp_bo = get(kSubmoduleRemap, "bo");
  w.gate_w = get(kSubmoduleGate, "w");
  const int d = config.embed_dim;
  if (w.order_w->value.rows() != 2 * d || w.order_w->value.cols() != d || w.pos_w2->value.cols() != config.num_sentences ||
      w.gate_w->value.rows() != d || w.gate_w->value.cols() != 3) {
    throw ShapeError("CamModule::bind: stored weights do not match the configuration");
  }
  return m;
}

std::vector<ad::Parameter*> CamModule::submodule_parameters(const std::string& submodule) const {
  const auto& w = weights_;
  if (submodule == kSubmoduleOrder) return {w.order_w, w.order_b};
  if (submodule == kSubmodulePosition) return {w.pos_w1, w.pos_b1, w.pos_w2, w.pos_b2};
  if (submodule == kSubmoduleRemap) return {w.rmp_wq, w.rmp_bq, w.rmp_wk, w.rmp_bk, w.rmp_wv, w.rmp_bv, w.rmp_wo, w.rmp_bo};
  if (submodule == kSubmoduleGate) return {w.gate_w};
  throw std::invalid_argument("unknown CaM submodule " + submodule);
}

PositionHead CamModule::position_head() const {
  return PositionHead{weights_.pos_w1->value, weights_.pos_b1->value, weights_.pos_w2->value, weights_.pos_b2->value};
}

ad::Var CamModule::forward(ad::Tape& tape, ad::Var e_ori, const SentenceStartMask& mask) const {
  using namespace camrw::ad;
  const CamConfig& cfg = config_;
  const int len = static_cast<int>(e_ori.rows());
  const int d = cfg.embed_dim;
  if (e_ori.cols() != d) throw ShapeError("CamModule::forward: embedding width");
  if (static_cast<int>(mask.size()) != len) throw ShapeError("CamModule::forward: mask length");
  const std::vector<int> masked = mask.positions();
  if (masked.empty()) return e_ori;
  const int k = static_cast<int>(masked.size());

  Var ori_rows = gather_rows(e_ori, masked);

  // Primitive intervention, left to right over masked rows.
  std::vector<Var> itv_rows;
  Var e_itv = e_ori;
  if (cfg.use_pi) {
    Var ow = tape.param(*weights_.order_w);
    Var projected = matmul(ori_rows, slice_rows(ow, 0, d));
    Var slot_terms = add_row(matmul(tape.constant(order_matrix(cfg.num_sentences, d)), slice_rows(ow, d, d)),
                             tape.param(*weights_.order_b));
    Var w1 = tape.param(*weights_.pos_w1);
    Var b1 = tape.param(*weights_.pos_b1);
    Var w2 = tape.param(*weights_.pos_w2);
    Var b2 = tape.param(*weights_.pos_b2);
    Var acc = tape.constant(Matrix::Zero(1, d));
    std::vector<Var> pieces;
    int cursor = 0;
    for (int m = 0; m < k; ++m) {
      const int p = masked[static_cast<std::size_t>(m)];
      if (p > cursor) {
        Var between = slice_rows(e_ori, cursor, p - cursor);
        pieces.push_back(between);
        acc = add(acc, sum_rows(between));
      }
      Var probs = softmax_rows(linear(relu(linear(relu(acc), w1, b1)), w2, b2));
      Var odr = add_row(slot_terms, slice_rows(projected, m, 1));
      Var row = matmul(probs, odr);
      itv_rows.push_back(row);
      pieces.push_back(row);
      acc = add(acc, row);
      cursor = p + 1;
    }
    if (cursor < len) pieces.push_back(slice_rows(e_ori, cursor, len - cursor));
    e_itv = concat_rows(pieces);
  } else {
    for (int m = 0; m < k; ++m) itv_rows.push_back(slice_rows(ori_rows, m, 1));
  }

  // Context-aware remapping at masked centers.
  std::vector<Var> rmp_rows = itv_rows;
  if (cfg.use_rmp) {
    const int heads = cfg.remap_heads;
    const int dh = d / heads;
    Var keys = linear(e_itv, tape.param(*weights_.rmp_wk), tape.param(*weights_.rmp_bk));
    Var values = linear(e_itv, tape.param(*weights_.rmp_wv), tape.param(*weights_.rmp_bv));
    Var wq = tape.param(*weights_.rmp_wq);
    Var bq = tape.param(*weights_.rmp_bq);
    Var wo = tape.param(*weights_.rmp_wo);
    Var bo = tape.param(*weights_.rmp_bo);
    std::vector<Var> key_heads, value_heads;
    for (int h = 0; h < heads; ++h) {
      key_heads.push_back(slice_cols(keys, h * dh, dh));
      value_heads.push_back(slice_cols(values, h * dh, dh));
    }
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int m = 0; m < k; ++m) {
      const auto win = remap_window(masked[static_cast<std::size_t>(m)], len, cfg);
      if (!win) continue;
      const int n = win->hi - win->lo + 1;
      Var q = linear(itv_rows[static_cast<std::size_t>(m)], wq, bq);
      std::vector<Var> outs;
      for (int h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * dh, dh);
        Var att = softmax_rows(scale(matmul_bt(qh, slice_rows(key_heads[h], win->lo, n)), inv));
        outs.push_back(matmul(att, slice_rows(value_heads[h], win->lo, n)));
      }
      rmp_rows[static_cast<std::size_t>(m)] = add(itv_rows[static_cast<std::size_t>(m)], linear(concat_cols(outs), wo, bo));
    }
  }

  Var itv_block = concat_rows(itv_rows);
  Var rmp_block = concat_rows(rmp_rows);
  Var opm_block = rmp_block;
  if (cfg.use_opt) {
    Var gw = tape.param(*weights_.gate_w);
    Var gates;
    if (cfg.gate_inputs_per_stage) {
      std::vector<Var> cols{matmul(ori_rows, slice_cols(gw, 0, 1)), matmul(itv_block, slice_cols(gw, 1, 1)),
                            matmul(rmp_block, slice_cols(gw, 2, 1))};
      gates = sigmoid(concat_cols(cols));
    } else {
      gates = sigmoid(matmul(ori_rows, gw));
    }
    Var c = softmax_rows(gates);
    opm_block = add(add(scale_rows(ori_rows, slice_cols(c, 0, 1)), scale_rows(itv_block, slice_cols(c, 1, 1))),
                    scale_rows(rmp_block, slice_cols(c, 2, 1)));
  }

  // Mask fusion: unmasked rows are the input rows themselves.
  std::vector<Var> pieces;
  int cursor = 0;
  for (int m = 0; m < k; ++m) {
    const int p = masked[static_cast<std::size_t>(m)];
    if (p > cursor) pieces.push_back(slice_rows(e_ori, cursor, p - cursor));
    pieces.push_back(slice_rows(opm_block, m, 1));
    cursor = p + 1;
  }
  if (cursor < len) pieces.push_back(slice_rows(e_ori, cursor, len - cursor));
  return concat_rows(pieces);
}

CamStreamState CamModule::initial_state() const {
  CamStreamState s;
  s.itv_sum = RowVector::Zero(config_.embed_dim);
  return s;
}

RowVector CamModule::step(const RowVector& e_ori, bool masked, CamStreamState& state) const {
  const CamConfig& cfg = config_;
  if (!cfg.causal_window) throw std::logic_error("CamModule::step requires causal_window");
  require_row(e_ori, cfg.embed_dim, "CamModule::step");
  const auto& w = weights_;
  RowVector itv = e_ori;
  if (masked && cfg.use_pi) {
    const PositionDistribution h = position_probabilities_from_sum(state.itv_sum, position_head());
    RowVector mixed = RowVector::Zero(cfg.embed_dim);
    for (int j = 1; j <= cfg.num_sentences; ++j) {
      const OrderVector o = make_order_vector(j, cfg.embed_dim, cfg.num_sentences);
      mixed += h.probs(j - 1) * order_enhance(e_ori, o, w.order_w->value, w.order_b->value);
    }
    itv = mixed;
  }
  state.itv_sum += itv;
  RowVector out = e_ori;
  if (cfg.use_rmp) {
    const std::size_t keep = static_cast<std::size_t>(cfg.window_size / 2 + 1);
    state.keys.push_back(itv * w.rmp_wk->value + w.rmp_bk->value.row(0));
    state.values.push_back(itv * w.rmp_wv->value + w.rmp_bv->value.row(0));
    if (state.keys.size() > keep) {
      state.keys.erase(state.keys.begin());
      state.values.erase(state.values.begin());
    }
  }
  if (!masked) return out;
  RowVector rmp = itv;
  if (cfg.use_rmp) {
    const Eigen::Index n = static_cast<Eigen::Index>(state.keys.size());
    Matrix keys(n, cfg.embed_dim);
    Matrix values(n, cfg.embed_dim);
    for (Eigen::Index i = 0; i < n; ++i) {
      keys.row(i) = state.keys[static_cast<std::size_t>(i)];
      values.row(i) = state.values[static_cast<std::size_t>(i)];
    }
    const RowVector q = itv * w.rmp_wq->value + w.rmp_bq->value.row(0);
    rmp = itv + attend(q, keys, values, cfg.remap_heads) * w.rmp_wo->value + w.rmp_bo->value.row(0);
  }
  if (!cfg.use_opt) return rmp;
  const GateCoefficients c = cfg.gate_inputs_per_stage ? intensity_gates(e_ori, itv, rmp, w.gate_w->value)
                                                       : intensity_gates(e_ori, w.gate_w->value);
  return optimal_combine(e_ori, itv, rmp, c);
}

}  // namespace camrw::cam
