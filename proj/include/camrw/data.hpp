#pragma once

// Tokenization, corpus records, the synthetic confounded corpus and the
// reference-reordering perturbation.

#include "camrw/model.hpp"
#include "camrw/tokens.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace camrw {

using Tokens = std::vector<std::string>;

// Lowercased whitespace tokenization.
Tokens tokenize(const std::string& text);
std::string detokenize(const Tokens& tokens);

class Vocabulary {
 public:
  // Reserved tokens only.
  Vocabulary();
  // Reserved tokens followed by every other token in lexicographic order.
  static Vocabulary build(const std::vector<Tokens>& texts);

  int size() const { return static_cast<int>(tokens_.size()); }
  // Unknown tokens map to kUnkId.
  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int id) const;
  std::vector<int> encode(const Tokens& tokens) const;
  Tokens decode(const std::vector<int>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  void add(const std::string& token);
  Tokens tokens_;
  std::unordered_map<std::string, int> index_;
};

// Per-sentence annotations. Vectors are indexed by target sentence; -1 and
// "" mean unknown.
struct ExampleMeta {
  std::string corpus;
  std::string split;
  std::vector<int> relations;
  std::vector<int> alignment;  // reference index each sentence draws from
  std::vector<std::uint8_t> position_determined;
  std::vector<std::string> transitions;
  // Set when a perturbation could not be applied.
  bool unperturbed = false;
};

struct GenerationExample {
  std::vector<Tokens> references;
  // Related-work tokens with kReservedTokens[kClsId] before every sentence.
  Tokens target;
  ExampleMeta meta;

  std::size_t num_references() const { return references.size(); }
  // Target sentences without their markers.
  std::vector<Tokens> sentences() const;
};

struct IngestLimits {
  int total_budget = 440;
  int max_references = 5;
  int max_sentences = 6;
};

struct RawRecord {
  std::vector<std::string> refs;
  std::string related_work;
};

int reference_budget(int num_references, const IngestLimits& limits);

// Splits text tokens into sentences at tokens ending in '.', '!' or '?'.
std::vector<Tokens> split_sentences(const Tokens& tokens);

GenerationExample ingest(const RawRecord& record, const IngestLimits& limits);

// <s> ref_1 <sep> ref_2 ... ref_n </s>
Tokens source_tokens(const GenerationExample& example);
EncodedExample encode(const GenerationExample& example, const Vocabulary& vocab);

// Corpus files: a version header line, then one JSON object per line with
// "refs", "related_work" and optional "meta".
inline constexpr const char* kCorpusHeader = "#camrw-corpus v1";
void write_corpus(const std::filesystem::path& path, const std::vector<GenerationExample>& examples);
std::vector<GenerationExample> read_corpus(const std::filesystem::path& path, const IngestLimits& limits = {});

// ---- synthetic confounded corpus ----

struct SyntheticSpec {
  int num_train = 2000;
  int num_valid = 400;  // held out, same law as train
  int num_test = 400;   // relation independent of position
  int num_relations = 4;
  double confound_strength = 0.9;
  int vocab_size = 300;
  int min_references = 2;
  int max_references = 5;
  int doc_length = 4;  // content tokens per reference, after the cue word
  int min_sentence_length = 1;  // content tokens copied per target sentence
  int max_sentence_length = 2;
  // Probability of using each relation's alternate cue word.
  double alternate_cue_rate = 0.0;
  std::string domain = "synthetic";
  std::uint64_t seed = 1;

  void validate() const;
  std::string to_text() const;
  static SyntheticSpec from_text(const std::string& text);
  static SyntheticSpec load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

inline constexpr const char* kSyntheticSpecHeader = "#camrw-synth v1";
inline constexpr int kMaxRelations = 6;

struct SyntheticLexicon {
  std::vector<std::string> relation_names;
  std::vector<std::string> cues;
  std::vector<std::string> alternate_cues;
  std::vector<std::string> transitions;
  std::vector<std::string> content;
  std::string period = ".";

  // Every token the generator can emit.
  Tokens all_tokens() const;
};

SyntheticLexicon synthetic_lexicon(const SyntheticSpec& spec);

struct SyntheticCorpus {
  std::vector<GenerationExample> train;
  std::vector<GenerationExample> valid;
  std::vector<GenerationExample> test;
  SyntheticLexicon lexicon;
};

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

// ---- reordering ----

// New reference i is old reference perm[i]; aligned sentences follow their
// references and transitional tokens are removed.
GenerationExample apply_reference_permutation(const GenerationExample& example, const std::vector<int>& perm);
// Random non-identity permutation. With a single reference the example is
// returned unchanged and meta.unperturbed is set.
GenerationExample reorder_perturb(const GenerationExample& example, std::uint64_t seed);

}  // namespace camrw
