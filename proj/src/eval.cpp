#include "camrw/eval.hpp"

#include "camrw/tokens.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace camrw {

namespace {

using ordered_json = nlohmann::ordered_json;

template <typename T>
std::vector<T> strip_padding(std::vector<T> seq, const T& pad) {
  auto first = std::find_if(seq.begin(), seq.end(), [&](const T& t) { return t != pad; });
  seq.erase(seq.begin(), first);
  while (!seq.empty() && seq.back() == pad) seq.pop_back();
  return seq;
}

PrecisionRecall from_counts(double overlap, double cand_total, double ref_total) {
  PrecisionRecall pr;
  pr.precision = cand_total > 0 ? overlap / cand_total : 0.0;
  pr.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  const double s = pr.precision + pr.recall;
  pr.f1 = s > 0 ? 2.0 * pr.precision * pr.recall / s : 0.0;
  return pr;
}

std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& seq, int n) {
  std::map<std::vector<int>, int> counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
    ++counts[std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                              seq.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return counts;
}

// Maps both token sequences onto shared integer ids so the id-based scorers
// can be reused for text.
std::pair<std::vector<int>, std::vector<int>> intern(const Tokens& a, const Tokens& b) {
  std::map<std::string, int> ids;
  ids.emplace(kReservedTokens[kPadId], kPadId);
  auto map = [&](const Tokens& t) {
    std::vector<int> out;
    out.reserve(t.size());
    for (const auto& tok : t) out.push_back(ids.emplace(tok, static_cast<int>(ids.size()) + kNumReserved).first->second);
    return out;
  };
  auto ia = map(a);
  auto ib = map(b);
  return {std::move(ia), std::move(ib)};
}

bool is_reserved(const std::string& tok) {
  for (const char* r : kReservedTokens) {
    if (tok == r) return true;
  }
  return false;
}

// Generated sentences split at sentence markers; text before the first
// marker is dropped.
std::vector<Tokens> generated_sentences(const Tokens& generated) {
  std::vector<Tokens> out;
  for (const auto& tok : generated) {
    if (tok == kReservedTokens[kClsId]) {
      out.emplace_back();
    } else if (!out.empty()) {
      out.back().push_back(tok);
    }
  }
  return out;
}

struct TransitionCount {
  int correct = 0;
  int total = 0;
};

TransitionCount count_transitions(const Tokens& generated, const GenerationExample& gold) {
  TransitionCount c;
  const auto sentences = generated_sentences(generated);
  for (std::size_t j = 0; j < gold.meta.transitions.size(); ++j) {
    const std::string& want = gold.meta.transitions[j];
    if (want.empty()) continue;
    ++c.total;
    if (j < sentences.size() && !sentences[j].empty() && sentences[j].front() == want) ++c.correct;
  }
  return c;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

ordered_json rouge_json(const RougeScores& r) {
  ordered_json j;
  j["rouge1_f"] = r.rouge1_f;
  j["rouge2_f"] = r.rouge2_f;
  j["rougeL_f"] = r.rougeL_f;
  return j;
}

template <typename T>
ordered_json optional_json(const std::optional<T>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

ordered_json aggregate_json(const Aggregate& a) {
  ordered_json j = rouge_json(a.rouge);
  j["transition_accuracy"] = optional_json(a.transition_accuracy);
  j["examples"] = a.examples;
  j["annotated_sentences"] = a.annotated_sentences;
  return j;
}

ordered_json result_json(const GeneratorResult& r) {
  ordered_json j;
  j["name"] = r.name;
  j["aggregate"] = aggregate_json(r.aggregate);
  ordered_json per = ordered_json::array();
  for (const auto& e : r.per_example) {
    ordered_json row = rouge_json(e.rouge);
    row["transition_accuracy"] = optional_json(e.transition_accuracy);
    row["output"] = e.output;
    per.push_back(std::move(row));
  }
  j["per_example"] = std::move(per);
  return j;
}

std::string fmt_score(const std::optional<double>& v, int width = 10) {
  char buf[64];
  if (v) {
    std::snprintf(buf, sizeof buf, "%*.4f", width, *v);
  } else {
    std::snprintf(buf, sizeof buf, "%*s", width, "-");
  }
  return buf;
}

}  // namespace

PrecisionRecall rouge_n(std::vector<int> candidate, std::vector<int> reference, int n) {
  if (n < 1) throw std::invalid_argument("rouge_n: n must be >= 1");
  candidate = strip_padding(std::move(candidate), kPadId);
  reference = strip_padding(std::move(reference), kPadId);
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  double overlap = 0.0, cand_total = 0.0, ref_total = 0.0;
  for (const auto& [gram, c] : cand) {
    cand_total += c;
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  for (const auto& kv : ref) ref_total += kv.second;
  return from_counts(overlap, cand_total, ref_total);
}

PrecisionRecall rouge_l(std::vector<int> candidate, std::vector<int> reference) {
  candidate = strip_padding(std::move(candidate), kPadId);
  reference = strip_padding(std::move(reference), kPadId);
  const std::size_t m = candidate.size(), n = reference.size();
  std::vector<int> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return from_counts(prev[n], static_cast<double>(m), static_cast<double>(n));
}

RougeScores rouge(const std::vector<int>& candidate, const std::vector<int>& reference) {
  RougeScores r;
  r.rouge1_f = rouge_n(candidate, reference, 1).f1;
  r.rouge2_f = rouge_n(candidate, reference, 2).f1;
  r.rougeL_f = rouge_l(candidate, reference).f1;
  return r;
}

RougeScores rouge(const Tokens& candidate, const Tokens& reference) {
  const auto [c, r] = intern(candidate, reference);
  return rouge(c, r);
}

double ror(double score_cam, double score_baseline) {
  if (!(score_baseline > 0.0)) throw std::invalid_argument("ror: baseline score must be positive");
  return (score_cam - score_baseline) / score_baseline;
}

Tokens scoring_tokens(const Tokens& tokens) {
  Tokens out;
  for (const auto& t : tokens) {
    if (!is_reserved(t)) out.push_back(t);
  }
  return out;
}

std::optional<double> transition_accuracy(const Tokens& generated, const GenerationExample& gold) {
  const auto c = count_transitions(generated, gold);
  if (c.total == 0) return std::nullopt;
  return static_cast<double>(c.correct) / c.total;
}

Generator model_generator(const std::string& name, const Seq2SeqModel& model, const Vocabulary& vocab,
                          const BeamConfig& beam) {
  beam.validate();
  return Generator{name, [&model, &vocab, beam](const GenerationExample& ex) {
                     const EncodedExample enc = encode(ex, vocab);
                     return vocab.decode(model.beam_search(enc.source, beam));
                   }};
}

Generator echo_generator() {
  return Generator{"echo", [](const GenerationExample& ex) {
                     Tokens out;
                     for (const auto& r : ex.references) out.insert(out.end(), r.begin(), r.end());
                     return out;
                   }};
}

GeneratorResult evaluate(const Generator& generator, const std::vector<GenerationExample>& examples) {
  GeneratorResult res;
  res.name = generator.name;
  res.per_example.reserve(examples.size());
  RougeScores sum;
  TransitionCount trans;
  for (const auto& ex : examples) {
    const Tokens out = generator.generate(ex);
    ExampleScore s;
    s.rouge = rouge(scoring_tokens(out), scoring_tokens(ex.target));
    const auto c = count_transitions(out, ex);
    if (c.total > 0) s.transition_accuracy = static_cast<double>(c.correct) / c.total;
    trans.correct += c.correct;
    trans.total += c.total;
    s.output = detokenize(out);
    sum.rouge1_f += s.rouge.rouge1_f;
    sum.rouge2_f += s.rouge.rouge2_f;
    sum.rougeL_f += s.rouge.rougeL_f;
    res.per_example.push_back(std::move(s));
  }
  Aggregate& a = res.aggregate;
  a.examples = static_cast<int>(examples.size());
  if (a.examples > 0) {
    a.rouge.rouge1_f = sum.rouge1_f / a.examples;
    a.rouge.rouge2_f = sum.rouge2_f / a.examples;
    a.rouge.rougeL_f = sum.rougeL_f / a.examples;
  }
  a.annotated_sentences = trans.total;
  if (trans.total > 0) a.transition_accuracy = static_cast<double>(trans.correct) / trans.total;
  return res;
}

const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::standard: return "standard";
    case Protocol::reordered: return "reordered";
    case Protocol::migrated: return "migrated";
  }
  return "?";
}

Protocol parse_protocol(const std::string& name) {
  for (Protocol p : {Protocol::standard, Protocol::reordered, Protocol::migrated}) {
    if (name == protocol_name(p)) return p;
  }
  throw std::invalid_argument("unknown protocol '" + name + "' (standard, reordered, migrated)");
}

double vocabulary_coverage(const std::vector<GenerationExample>& examples, const Vocabulary& vocab) {
  std::size_t known = 0, total = 0;
  auto count = [&](const Tokens& t) {
    for (const auto& tok : t) {
      if (is_reserved(tok)) continue;
      ++total;
      if (vocab.contains(tok)) ++known;
    }
  };
  for (const auto& ex : examples) {
    for (const auto& r : ex.references) count(r);
    count(ex.target);
  }
  return total == 0 ? 1.0 : static_cast<double>(known) / static_cast<double>(total);
}

std::vector<GenerationExample> protocol_examples(const std::vector<GenerationExample>& examples,
                                                 const ProtocolConfig& config) {
  if (config.protocol != Protocol::reordered) return examples;
  std::vector<GenerationExample> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].num_references() >= 2) {
      out.push_back(reorder_perturb(examples[i], mix_seed(config.seed, i)));
    } else {
      out.push_back(examples[i]);
    }
  }
  return out;
}

ProtocolReport run_protocol(const Generator& cam, const Generator& baseline,
                            const std::vector<GenerationExample>& examples, const ProtocolConfig& config,
                            const Vocabulary* vocab) {
  ProtocolReport rep;
  rep.config = config;
  const auto data = protocol_examples(examples, config);
  if (config.protocol == Protocol::reordered) {
    const auto skipped = std::count_if(examples.begin(), examples.end(),
                                       [](const GenerationExample& e) { return e.num_references() < 2; });
    if (skipped > 0) {
      rep.warnings.push_back(std::to_string(skipped) + " example(s) with a single reference left unperturbed");
    }
  }
  if (vocab != nullptr) {
    rep.vocabulary_coverage = vocabulary_coverage(data, *vocab);
    if (config.protocol == Protocol::migrated && *rep.vocabulary_coverage < config.coverage_floor) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "vocabulary coverage %.4f below floor %.4f", *rep.vocabulary_coverage,
                    config.coverage_floor);
      rep.warnings.emplace_back(buf);
    }
  }
  rep.cam = evaluate(cam, data);
  rep.baseline = evaluate(baseline, data);

  auto add = [&](const std::string& metric, double c, double b) {
    RorEntry e{metric, c, b, std::nullopt};
    if (b > 0.0) {
      e.ror = ror(c, b);
    } else {
      rep.warnings.push_back("ROR undefined for " + metric + ": baseline score is 0");
    }
    rep.ror_table.push_back(e);
  };
  const auto& ca = rep.cam.aggregate;
  const auto& ba = rep.baseline.aggregate;
  add("rouge1_f", ca.rouge.rouge1_f, ba.rouge.rouge1_f);
  add("rouge2_f", ca.rouge.rouge2_f, ba.rouge.rouge2_f);
  add("rougeL_f", ca.rouge.rougeL_f, ba.rouge.rougeL_f);
  if (ca.transition_accuracy && ba.transition_accuracy) {
    add("transition_accuracy", *ca.transition_accuracy, *ba.transition_accuracy);
  }
  return rep;
}

std::string ProtocolReport::to_json() const {
  ordered_json j;
  j["protocol"] = protocol_name(config.protocol);
  j["seed"] = config.seed;
  j["config_hash"] = config.config_hash;
  j["coverage_floor"] = config.coverage_floor;
  j["vocabulary_coverage"] = optional_json(vocabulary_coverage);
  j["warnings"] = warnings;
  ordered_json table = ordered_json::array();
  for (const auto& e : ror_table) {
    ordered_json row;
    row["metric"] = e.metric;
    row["cam"] = e.cam;
    row["baseline"] = e.baseline;
    row["ror"] = optional_json(e.ror);
    table.push_back(std::move(row));
  }
  j["ror"] = std::move(table);
  j["cam"] = result_json(cam);
  j["baseline"] = result_json(baseline);
  return j.dump(2) + "\n";
}

std::string ProtocolReport::summary() const {
  std::ostringstream os;
  os << "protocol " << protocol_name(config.protocol) << "  seed " << config.seed;
  if (!config.config_hash.empty()) os << "  config " << config.config_hash;
  os << "\n";
  os << "cam: " << cam.name << " (" << cam.aggregate.examples << " examples)  baseline: " << baseline.name << "\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-22s%10s%10s%10s\n", "metric", "cam", "baseline", "ror");
  os << line;
  for (const auto& e : ror_table) {
    std::snprintf(line, sizeof line, "%-22s%10.4f%10.4f%s\n", e.metric.c_str(), e.cam, e.baseline,
                  fmt_score(e.ror).c_str());
    os << line;
  }
  if (vocabulary_coverage) {
    std::snprintf(line, sizeof line, "vocabulary coverage %.4f\n", *vocabulary_coverage);
    os << line;
  }
  for (const auto& w : warnings) os << "warning: " << w << "\n";
  return os.str();
}

// ---- training sweeps ----

void AblationSetting::validate() const {
  if (use_opt && !use_pi && !use_rmp) {
    throw std::invalid_argument("ablation setting: OPT needs PI or RMP");
  }
}

std::string AblationSetting::name() const {
  std::string s;
  auto add = [&](bool on, const char* part) {
    if (!on) return;
    if (!s.empty()) s += "+";
    s += part;
  };
  add(use_pi, "PI");
  add(use_rmp, "RMP");
  add(use_opt, "OPT");
  return s.empty() ? "none" : s;
}

namespace {

ScoreRow train_and_score(const std::string& name, const ModelConfig& cfg, const AblationSetting& setting,
                         const ExperimentSetup& setup, const std::vector<EncodedExample>& train_data,
                         const std::vector<GenerationExample>& eval_data, const Vocabulary& vocab) {
  Seq2SeqModel model(cfg, setup.model_seed);
  const auto history = train(model, train_data, setup.train);
  ScoreRow row;
  row.name = name;
  row.num_cams = cfg.num_cams;
  row.setting = setting;
  row.final_loss = history.empty() ? 0.0 : history.back().mean_loss;
  row.scores = evaluate(model_generator(name, model, vocab, setup.beam), eval_data).aggregate;
  return row;
}

std::string setup_text(const ExperimentSetup& setup, const std::string& extra) {
  std::ostringstream os;
  os << setup.base.to_manifest();
  os << "train.epochs = " << setup.train.epochs << "\n"
     << "train.batch_size = " << setup.train.batch_size << "\n"
     << "train.learning_rate = " << setup.train.learning_rate << "\n"
     << "train.clip_norm = " << setup.train.clip_norm << "\n"
     << "train.seed = " << setup.train.seed << "\n"
     << "train.target_loss = " << setup.train.target_loss << "\n"
     << "beam.width = " << setup.beam.beam_width << "\n"
     << "beam.max_steps = " << setup.beam.max_steps << "\n"
     << "beam.length_penalty = " << setup.beam.length_penalty << "\n"
     << "model_seed = " << setup.model_seed << "\n"
     << extra;
  return os.str();
}

void check_inputs(const ExperimentSetup& setup, const std::vector<EncodedExample>& train_data,
                  const std::vector<GenerationExample>& eval_data, const Vocabulary& vocab) {
  setup.train.validate();
  setup.beam.validate();
  if (train_data.empty()) throw std::invalid_argument("empty training set");
  if (eval_data.empty()) throw std::invalid_argument("empty evaluation set");
  if (setup.base.vocab_size != vocab.size()) {
    throw std::invalid_argument("model vocab_size does not match the vocabulary");
  }
}

}  // namespace

ScoreTable run_ablation(const std::vector<AblationSetting>& settings, const ExperimentSetup& setup,
                        const std::vector<EncodedExample>& train_data, const std::vector<GenerationExample>& eval_data,
                        const Vocabulary& vocab, const RowCallback& on_row) {
  std::string extra;
  for (const auto& s : settings) {
    s.validate();
    extra += "setting = " + s.name() + "\n";
  }
  check_inputs(setup, train_data, eval_data, vocab);
  ModelConfig cam_cfg = setup.base;
  if (cam_cfg.num_cams < 1) throw std::invalid_argument("ablation needs num_cams >= 1 for the CaM rows");
  cam_cfg.validate();

  ScoreTable table;
  table.kind = "ablation";
  table.seed = setup.model_seed;
  table.config_hash = hex16(fnv1a(setup_text(setup, extra)));

  ModelConfig base_cfg = setup.base;
  base_cfg.num_cams = 0;
  table.rows.push_back(train_and_score("baseline", base_cfg, AblationSetting{false, false, false}, setup, train_data,
                                       eval_data, vocab));
  if (on_row) on_row(table.rows.back());
  for (const auto& s : settings) {
    ModelConfig cfg = cam_cfg;
    cfg.use_pi = s.use_pi;
    cfg.use_rmp = s.use_rmp;
    cfg.use_opt = s.use_opt;
    table.rows.push_back(train_and_score(s.name(), cfg, s, setup, train_data, eval_data, vocab));
    if (on_row) on_row(table.rows.back());
  }
  return table;
}

ScoreTable run_placement_sweep(const std::vector<int>& cam_counts, const ExperimentSetup& setup,
                               const std::vector<EncodedExample>& train_data,
                               const std::vector<GenerationExample>& eval_data, const Vocabulary& vocab,
                               const RowCallback& on_row) {
  if (cam_counts.empty()) throw std::invalid_argument("placement sweep: no module counts given");
  std::string extra;
  for (int k : cam_counts) {
    if (k < 0 || k > setup.base.num_decoder_layers) {
      throw std::invalid_argument("placement sweep: k=" + std::to_string(k) + " outside [0, " +
                                  std::to_string(setup.base.num_decoder_layers) + "]");
    }
    extra += "k = " + std::to_string(k) + "\n";
  }
  check_inputs(setup, train_data, eval_data, vocab);

  ScoreTable table;
  table.kind = "placement";
  table.seed = setup.model_seed;
  table.config_hash = hex16(fnv1a(setup_text(setup, extra)));
  const AblationSetting full{setup.base.use_pi, setup.base.use_rmp, setup.base.use_opt};
  for (int k : cam_counts) {
    ModelConfig cfg = setup.base;
    cfg.num_cams = k;
    table.rows.push_back(train_and_score("k=" + std::to_string(k), cfg, full, setup, train_data, eval_data, vocab));
    if (on_row) on_row(table.rows.back());
  }
  return table;
}

std::string ScoreTable::to_json() const {
  ordered_json j;
  j["kind"] = kind;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  ordered_json rows_json = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json row;
    row["name"] = r.name;
    row["num_cams"] = r.num_cams;
    row["use_pi"] = r.setting.use_pi;
    row["use_rmp"] = r.setting.use_rmp;
    row["use_opt"] = r.setting.use_opt;
    row["final_loss"] = r.final_loss;
    row["scores"] = aggregate_json(r.scores);
    rows_json.push_back(std::move(row));
  }
  j["rows"] = std::move(rows_json);
  return j.dump(2) + "\n";
}

std::string ScoreTable::summary() const {
  std::ostringstream os;
  os << kind << "  seed " << seed << "  config " << config_hash << "\n";
  char line[200];
  std::snprintf(line, sizeof line, "%-14s%6s%10s%10s%10s%10s%10s\n", "row", "k", "loss", "R-1", "R-2", "R-L",
                "trans");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-14s%6d%10.4f%10.4f%10.4f%10.4f%s\n", r.name.c_str(), r.num_cams,
                  r.final_loss, r.scores.rouge.rouge1_f, r.scores.rouge.rouge2_f, r.scores.rouge.rougeL_f,
                  fmt_score(r.scores.transition_accuracy).c_str());
    os << line;
  }
  return os.str();
}

}  // namespace camrw
