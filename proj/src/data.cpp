#include "camrw/data.hpp"

#include "camrw/checkpoint.hpp"
#include "camrw/errors.hpp"
#include "camrw/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace camrw {

namespace {

const std::string kCls = kReservedTokens[kClsId];
const std::string kSep = kReservedTokens[kSepId];

bool ends_sentence(const std::string& t) {
  return !t.empty() && (t.back() == '.' || t.back() == '!' || t.back() == '?');
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

Tokens tokenize(const std::string& text) {
  Tokens out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string detokenize(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) add(t);
}

void Vocabulary::add(const std::string& token) {
  if (index_.count(token) != 0) return;
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<Tokens>& texts) {
  std::set<std::string> all;
  for (const auto& t : texts) all.insert(t.begin(), t.end());
  Vocabulary v;
  for (const auto& t : all) v.add(t);
  return v;
}

int Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const Tokens& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Tokens Vocabulary::decode(const std::vector<int>& ids) const {
  Tokens out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ostringstream os;
  os << "#camrw-vocab v1\n";
  for (const auto& t : tokens_) os << t << "\n";
  write_text(path, os.str());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != "#camrw-vocab v1") {
    throw MalformedRecordError("vocabulary file " + path.string() + " lacks the version header");
  }
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (v.index_.count(line) != 0) throw MalformedRecordError("duplicate vocabulary entry " + line);
    v.add(line);
  }
  for (int i = 0; i < kNumReserved; ++i) {
    if (v.size() <= i || v.tokens_[static_cast<std::size_t>(i)] != kReservedTokens[i]) {
      throw MalformedRecordError("vocabulary file does not start with the reserved tokens");
    }
  }
  return v;
}

// ---------------------------------------------------------------------------

std::vector<Tokens> GenerationExample::sentences() const {
  std::vector<Tokens> out;
  for (const auto& t : target) {
    if (t == kCls) {
      out.emplace_back();
    } else {
      if (out.empty()) out.emplace_back();
      out.back().push_back(t);
    }
  }
  return out;
}

int reference_budget(int num_references, const IngestLimits& limits) {
  if (num_references < 1) throw std::invalid_argument("reference_budget: need at least one reference");
  return limits.total_budget / num_references;
}

std::vector<Tokens> split_sentences(const Tokens& tokens) {
  std::vector<Tokens> out;
  Tokens cur;
  for (const auto& t : tokens) {
    cur.push_back(t);
    if (ends_sentence(t)) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

GenerationExample ingest(const RawRecord& record, const IngestLimits& limits) {
  const int n = static_cast<int>(record.refs.size());
  if (n < 1) throw MalformedRecordError("record has no references");
  if (n > limits.max_references) {
    throw MalformedRecordError("record has " + std::to_string(n) + " references, limit " +
                               std::to_string(limits.max_references));
  }
  const Tokens target_tokens = tokenize(record.related_work);
  if (target_tokens.empty()) throw MalformedRecordError("record has an empty target");
  const int budget = reference_budget(n, limits);
  GenerationExample ex;
  for (const auto& r : record.refs) {
    Tokens t = tokenize(r);
    if (static_cast<int>(t.size()) > budget) t.resize(static_cast<std::size_t>(budget));
    ex.references.push_back(std::move(t));
  }
  auto sentences = split_sentences(target_tokens);
  if (static_cast<int>(sentences.size()) > limits.max_sentences) {
    sentences.resize(static_cast<std::size_t>(limits.max_sentences));
  }
  for (const auto& s : sentences) {
    ex.target.push_back(kCls);
    ex.target.insert(ex.target.end(), s.begin(), s.end());
  }
  return ex;
}

Tokens source_tokens(const GenerationExample& example) {
  Tokens out{kReservedTokens[kBosId]};
  for (std::size_t i = 0; i < example.references.size(); ++i) {
    if (i > 0) out.push_back(kSep);
    out.insert(out.end(), example.references[i].begin(), example.references[i].end());
  }
  out.push_back(kReservedTokens[kEosId]);
  return out;
}

EncodedExample encode(const GenerationExample& example, const Vocabulary& vocab) {
  EncodedExample e;
  e.source = vocab.encode(source_tokens(example));
  e.target.push_back(kBosId);
  for (int id : vocab.encode(example.target)) e.target.push_back(id);
  e.target.push_back(kEosId);
  return e;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json meta_to_json(const ExampleMeta& m) {
  nlohmann::json j = nlohmann::json::object();
  if (!m.corpus.empty()) j["corpus"] = m.corpus;
  if (!m.split.empty()) j["split"] = m.split;
  if (!m.relations.empty()) j["relations"] = m.relations;
  if (!m.alignment.empty()) j["alignment"] = m.alignment;
  if (!m.position_determined.empty()) j["position_determined"] = m.position_determined;
  if (!m.transitions.empty()) j["transitions"] = m.transitions;
  if (m.unperturbed) j["unperturbed"] = true;
  return j;
}

ExampleMeta meta_from_json(const nlohmann::json& j) {
  ExampleMeta m;
  m.corpus = j.value("corpus", std::string());
  m.split = j.value("split", std::string());
  m.relations = j.value("relations", std::vector<int>{});
  m.alignment = j.value("alignment", std::vector<int>{});
  m.position_determined = j.value("position_determined", std::vector<std::uint8_t>{});
  m.transitions = j.value("transitions", std::vector<std::string>{});
  m.unperturbed = j.value("unperturbed", false);
  return m;
}

}  // namespace

void write_corpus(const std::filesystem::path& path, const std::vector<GenerationExample>& examples) {
  std::ostringstream os;
  os << kCorpusHeader << "\n";
  for (const auto& ex : examples) {
    nlohmann::json j;
    std::vector<std::string> refs;
    for (const auto& r : ex.references) refs.push_back(detokenize(r));
    j["refs"] = refs;
    Tokens plain;
    for (const auto& t : ex.target) {
      if (t != kCls) plain.push_back(t);
    }
    j["related_work"] = detokenize(plain);
    j["meta"] = meta_to_json(ex.meta);
    os << j.dump() << "\n";
  }
  write_text(path, os.str());
}

std::vector<GenerationExample> read_corpus(const std::filesystem::path& path, const IngestLimits& limits) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != kCorpusHeader) {
    throw MalformedRecordError(path.string() + ": missing header '" + kCorpusHeader + "'");
  }
  std::vector<GenerationExample> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw MalformedRecordError(where + ": " + e.what());
    }
    RawRecord r;
    try {
      r.refs = j.at("refs").get<std::vector<std::string>>();
      r.related_work = j.at("related_work").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw MalformedRecordError(where + ": " + e.what());
    }
    GenerationExample ex;
    try {
      ex = ingest(r, limits);
      if (j.contains("meta")) ex.meta = meta_from_json(j.at("meta"));
    } catch (const MalformedRecordError& e) {
      throw MalformedRecordError(where + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw MalformedRecordError(where + ": meta: " + e.what());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  if (num_train < 0 || num_valid < 0 || num_test < 0) throw std::invalid_argument("synthetic: negative split size");
  if (num_relations < 4 || num_relations > kMaxRelations) {
    throw std::invalid_argument("synthetic: num_relations must be in [4, " + std::to_string(kMaxRelations) + "]");
  }
  if (!(confound_strength >= 0.0 && confound_strength <= 1.0)) {
    throw std::invalid_argument("synthetic: confound_strength must be in [0, 1]");
  }
  if (!(alternate_cue_rate >= 0.0 && alternate_cue_rate <= 1.0)) {
    throw std::invalid_argument("synthetic: alternate_cue_rate must be in [0, 1]");
  }
  if (min_references < 1 || max_references < min_references) throw std::invalid_argument("synthetic: reference range");
  if (doc_length < 1) throw std::invalid_argument("synthetic: doc_length must be >= 1");
  if (min_sentence_length < 1 || max_sentence_length < min_sentence_length || max_sentence_length > doc_length) {
    throw std::invalid_argument("synthetic: sentence length range must lie in [1, doc_length]");
  }
  const int fixed = kNumReserved + 3 * num_relations + 1;
  if (vocab_size < fixed + doc_length) {
    throw std::invalid_argument("synthetic: vocab_size too small for the lexicon (need >= " +
                                std::to_string(fixed + doc_length) + ")");
  }
}

std::string SyntheticSpec::to_text() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << kSyntheticSpecHeader << "\n"
     << "num_train = " << num_train << "\n"
     << "num_valid = " << num_valid << "\n"
     << "num_test = " << num_test << "\n"
     << "num_relations = " << num_relations << "\n"
     << "confound_strength = " << confound_strength << "\n"
     << "vocab_size = " << vocab_size << "\n"
     << "min_references = " << min_references << "\n"
     << "max_references = " << max_references << "\n"
     << "doc_length = " << doc_length << "\n"
     << "min_sentence_length = " << min_sentence_length << "\n"
     << "max_sentence_length = " << max_sentence_length << "\n"
     << "alternate_cue_rate = " << alternate_cue_rate << "\n"
     << "domain = " << domain << "\n"
     << "seed = " << seed << "\n";
  return os.str();
}

SyntheticSpec SyntheticSpec::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string first;
  std::getline(in, first);
  if (first != kSyntheticSpecHeader) {
    throw MalformedRecordError(std::string("synthetic spec lacks the header '") + kSyntheticSpecHeader + "'");
  }
  SyntheticSpec s;
  for (const auto& [key, value] : parse_key_values(text)) {
    try {
      if (key == "num_train") s.num_train = std::stoi(value);
      else if (key == "num_valid") s.num_valid = std::stoi(value);
      else if (key == "num_test") s.num_test = std::stoi(value);
      else if (key == "num_relations") s.num_relations = std::stoi(value);
      else if (key == "confound_strength") s.confound_strength = std::stod(value);
      else if (key == "vocab_size") s.vocab_size = std::stoi(value);
      else if (key == "min_references") s.min_references = std::stoi(value);
      else if (key == "max_references") s.max_references = std::stoi(value);
      else if (key == "doc_length") s.doc_length = std::stoi(value);
      else if (key == "min_sentence_length") s.min_sentence_length = std::stoi(value);
      else if (key == "max_sentence_length") s.max_sentence_length = std::stoi(value);
      else if (key == "alternate_cue_rate") s.alternate_cue_rate = std::stod(value);
      else if (key == "domain") s.domain = value;
      else if (key == "seed") s.seed = std::stoull(value);
      else throw MalformedRecordError("synthetic spec: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw MalformedRecordError("synthetic spec: bad value for " + key + ": '" + value + "'");
    }
  }
  return s;
}

SyntheticSpec SyntheticSpec::load(const std::filesystem::path& path) { return from_text(read_text(path)); }

void SyntheticSpec::save(const std::filesystem::path& path) const { write_text(path, to_text()); }

Tokens SyntheticLexicon::all_tokens() const {
  Tokens t;
  for (const auto* group : {&cues, &alternate_cues, &transitions, &content}) t.insert(t.end(), group->begin(), group->end());
  t.push_back(period);
  return t;
}

SyntheticLexicon synthetic_lexicon(const SyntheticSpec& spec) {
  static const char* names[kMaxRelations] = {"contrast", "extend", "parallel", "follow", "compare", "support"};
  static const char* cues[kMaxRelations] = {"contrasts", "extends", "parallels", "follows", "compares", "supports"};
  static const char* alts[kMaxRelations] = {"opposes", "broadens", "mirrors", "succeeds", "weighs", "confirms"};
  static const char* trans[kMaxRelations] = {"however", "furthermore", "similarly", "subsequently", "comparably",
                                             "indeed"};
  SyntheticLexicon lx;
  for (int r = 0; r < spec.num_relations; ++r) {
    lx.relation_names.emplace_back(names[r]);
    lx.cues.emplace_back(cues[r]);
    lx.alternate_cues.emplace_back(alts[r]);
    lx.transitions.emplace_back(trans[r]);
  }
  const int content = spec.vocab_size - kNumReserved - 3 * spec.num_relations - 1;
  for (int i = 0; i < content; ++i) {
    std::ostringstream os;
    os << "w" << std::setw(3) << std::setfill('0') << i;
    lx.content.push_back(os.str());
  }
  return lx;
}

namespace {

GenerationExample synth_example(Rng& rng, const SyntheticSpec& spec, const SyntheticLexicon& lx, bool confounded,
                                const char* split) {
  const int n = rng.range(spec.min_references, spec.max_references);
  GenerationExample ex;
  ex.meta.corpus = spec.domain;
  ex.meta.split = split;
  for (int j = 0; j < n; ++j) {
    const bool by_position = confounded && rng.bernoulli(spec.confound_strength);
    const int rel = by_position ? j % spec.num_relations : static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_relations)));
    const bool alt = rng.bernoulli(spec.alternate_cue_rate);
    Tokens doc{alt ? lx.alternate_cues[static_cast<std::size_t>(rel)] : lx.cues[static_cast<std::size_t>(rel)]};
    for (int t = 0; t < spec.doc_length; ++t) {
      doc.push_back(lx.content[rng.below(lx.content.size())]);
    }
    const int len = rng.range(spec.min_sentence_length, spec.max_sentence_length);
    ex.target.push_back(kCls);
    ex.target.push_back(lx.transitions[static_cast<std::size_t>(rel)]);
    ex.target.insert(ex.target.end(), doc.begin() + 1, doc.begin() + 1 + len);
    ex.target.push_back(lx.period);
    ex.references.push_back(std::move(doc));
    ex.meta.relations.push_back(rel);
    ex.meta.alignment.push_back(j);
    ex.meta.position_determined.push_back(by_position ? 1 : 0);
    ex.meta.transitions.push_back(lx.transitions[static_cast<std::size_t>(rel)]);
  }
  return ex;
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticCorpus c;
  c.lexicon = synthetic_lexicon(spec);
  // Independent streams per split so resizing one split leaves the others intact.
  Rng train_rng(spec.seed * 3 + 0), valid_rng(spec.seed * 3 + 1), test_rng(spec.seed * 3 + 2);
  for (int i = 0; i < spec.num_train; ++i) c.train.push_back(synth_example(train_rng, spec, c.lexicon, true, "train"));
  for (int i = 0; i < spec.num_valid; ++i) c.valid.push_back(synth_example(valid_rng, spec, c.lexicon, true, "valid"));
  for (int i = 0; i < spec.num_test; ++i) c.test.push_back(synth_example(test_rng, spec, c.lexicon, false, "test"));
  return c;
}

// ---------------------------------------------------------------------------

GenerationExample apply_reference_permutation(const GenerationExample& example, const std::vector<int>& perm) {
  const std::size_t n = example.references.size();
  if (perm.size() != n) throw std::invalid_argument("permutation size does not match the reference count");
  std::vector<int> where(n, -1);  // old index -> new index
  for (std::size_t i = 0; i < n; ++i) {
    const int old = perm[i];
    if (old < 0 || static_cast<std::size_t>(old) >= n || where[static_cast<std::size_t>(old)] != -1) {
      throw std::invalid_argument("not a permutation");
    }
    where[static_cast<std::size_t>(old)] = static_cast<int>(i);
  }
  GenerationExample out;
  out.meta = example.meta;
  for (std::size_t i = 0; i < n; ++i) out.references.push_back(example.references[static_cast<std::size_t>(perm[i])]);

  const auto sentences = example.sentences();
  const auto& m = example.meta;
  auto align = [&](std::size_t s) -> int {
    if (s < m.alignment.size()) return m.alignment[s];
    return s < n ? static_cast<int>(s) : -1;
  };
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < sentences.size(); ++s) {
      if (align(s) == perm[i]) order.push_back(s);
    }
  }
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const int a = align(s);
    if (a < 0 || static_cast<std::size_t>(a) >= n) order.push_back(s);
  }

  auto pick = [&](const auto& v, std::size_t s, auto fallback) { return s < v.size() ? v[s] : fallback; };
  out.meta.relations.clear();
  out.meta.alignment.clear();
  out.meta.position_determined.clear();
  out.meta.transitions.clear();
  for (std::size_t s : order) {
    Tokens sent = sentences[s];
    const std::string trans = pick(m.transitions, s, std::string());
    if (!trans.empty() && !sent.empty() && sent.front() == trans) sent.erase(sent.begin());
    out.target.push_back(kCls);
    out.target.insert(out.target.end(), sent.begin(), sent.end());
    out.meta.relations.push_back(pick(m.relations, s, -1));
    const int a = align(s);
    out.meta.alignment.push_back(a >= 0 && static_cast<std::size_t>(a) < n ? where[static_cast<std::size_t>(a)] : -1);
    out.meta.position_determined.push_back(0);
    out.meta.transitions.push_back(std::string());
  }
  return out;
}

GenerationExample reorder_perturb(const GenerationExample& example, std::uint64_t seed) {
  const std::size_t n = example.references.size();
  if (n < 2) {
    GenerationExample out = example;
    out.meta.unperturbed = true;
    return out;
  }
  Rng rng(seed);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  if (n == 2) {
    std::swap(perm[0], perm[1]);
  } else {
    // Uniform over non-identity permutations by rejection.
    do {
      rng.shuffle(std::span<int>(perm));
    } while (std::is_sorted(perm.begin(), perm.end()));
  }
  return apply_reference_permutation(example, perm);
}

}  // namespace camrw
