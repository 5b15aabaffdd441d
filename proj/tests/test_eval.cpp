#include "camrw/eval.hpp"
#include "camrw/tokens.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace camrw;
using camrw::testing::brute_rouge;
using camrw::testing::random_sequence;

namespace {

SyntheticCorpus small_corpus(std::uint64_t seed = 3) {
  SyntheticSpec spec;
  spec.num_train = 24;
  spec.num_valid = 4;
  spec.num_test = 12;
  spec.seed = seed;
  return generate_synthetic(spec);
}

Vocabulary lexicon_vocab(const SyntheticCorpus& c) { return Vocabulary::build({c.lexicon.all_tokens()}); }

ExperimentSetup tiny_setup(int vocab) {
  ExperimentSetup s;
  s.base = ModelConfig::desk(vocab);
  s.base.embed_dim = 16;
  s.base.num_heads = 2;
  s.base.remap_heads = 2;
  s.base.ffn_dim = 24;
  s.base.num_encoder_layers = 1;
  s.base.num_decoder_layers = 2;
  s.base.num_cams = 1;
  s.train.epochs = 1;
  s.train.batch_size = 8;
  s.beam.beam_width = 2;
  s.beam.max_steps = 12;
  return s;
}

}  // namespace

TEST(Rouge, WorkedExamples) {
  const auto same = rouge(tokenize("a b c"), tokenize("a b c"));
  EXPECT_DOUBLE_EQ(same.rouge1_f, 1.0);
  EXPECT_DOUBLE_EQ(same.rouge2_f, 1.0);
  EXPECT_DOUBLE_EQ(same.rougeL_f, 1.0);
  EXPECT_NEAR(rouge(tokenize("a b c"), tokenize("a b d")).rouge2_f, 0.5, 1e-12);
  EXPECT_NEAR(rouge(tokenize("c a b"), tokenize("a b c")).rougeL_f, 2.0 / 3.0, 1e-12);
}

TEST(Rouge, EmptyInputsScoreZero) {
  const auto a = rouge(Tokens{}, tokenize("a b"));
  const auto b = rouge(tokenize("a b"), Tokens{});
  const auto c = rouge(Tokens{}, Tokens{});
  for (const auto& s : {a, b, c}) {
    EXPECT_EQ(s.rouge1_f, 0.0);
    EXPECT_EQ(s.rouge2_f, 0.0);
    EXPECT_EQ(s.rougeL_f, 0.0);
  }
  // Single tokens have no bigrams.
  EXPECT_EQ(rouge(tokenize("a"), tokenize("a")).rouge2_f, 0.0);
}

TEST(Rouge, PrecisionRecallAndClipping) {
  const auto pr = rouge_n({7, 7, 7}, {7, 8}, 1);
  EXPECT_NEAR(pr.precision, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(pr.recall, 0.5, 1e-12);
  EXPECT_NEAR(pr.f1, 2 * (1.0 / 3.0) * 0.5 / (1.0 / 3.0 + 0.5), 1e-12);
  const auto l = rouge_l({7, 9, 8}, {7, 8, 10, 11});
  EXPECT_NEAR(l.precision, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(l.recall, 0.5, 1e-12);
  EXPECT_THROW(rouge_n({7}, {7}, 0), std::invalid_argument);
}

TEST(Rouge, MatchesBruteForceOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const auto c = random_sequence(rng, 12, 6);
    const auto r = random_sequence(rng, 12, 6);
    const auto got = rouge(c, r);
    const auto want = brute_rouge(c, r);
    ASSERT_NEAR(got.rouge1_f, want.rouge1_f, 1e-12) << trial;
    ASSERT_NEAR(got.rouge2_f, want.rouge2_f, 1e-12) << trial;
    ASSERT_NEAR(got.rougeL_f, want.rougeL_f, 1e-12) << trial;
  }
}

TEST(Rouge, BoundedAndF1Symmetric) {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const auto c = random_sequence(rng, 10, 4);
    const auto r = random_sequence(rng, 10, 4);
    const auto ab = rouge(c, r);
    const auto ba = rouge(r, c);
    for (double v : {ab.rouge1_f, ab.rouge2_f, ab.rougeL_f}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_NEAR(ab.rouge1_f, ba.rouge1_f, 1e-12);
    EXPECT_NEAR(ab.rouge2_f, ba.rouge2_f, 1e-12);
    EXPECT_NEAR(ab.rougeL_f, ba.rougeL_f, 1e-12);
  }
}

TEST(Rouge, PaddingInvariance) {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = random_sequence(rng, 8, 5);
    const auto r = random_sequence(rng, 8, 5);
    auto pc = c;
    auto pr = r;
    pc.insert(pc.begin(), static_cast<std::size_t>(rng.range(0, 3)), kPadId);
    pc.insert(pc.end(), static_cast<std::size_t>(rng.range(0, 3)), kPadId);
    pr.insert(pr.end(), static_cast<std::size_t>(rng.range(0, 3)), kPadId);
    const auto a = rouge(c, r);
    const auto b = rouge(pc, pr);
    EXPECT_EQ(a.rouge1_f, b.rouge1_f);
    EXPECT_EQ(a.rouge2_f, b.rouge2_f);
    EXPECT_EQ(a.rougeL_f, b.rougeL_f);
  }
  EXPECT_DOUBLE_EQ(rouge(tokenize("<pad> a b"), tokenize("a b <pad> <pad>")).rougeL_f, 1.0);
}

TEST(Ror, Examples) {
  EXPECT_NEAR(ror(1.1, 1.0), 0.1, 1e-12);
  EXPECT_EQ(ror(0.37, 0.37), 0.0);
  EXPECT_THROW(ror(0.5, 0.0), std::invalid_argument);
  EXPECT_THROW(ror(0.5, -0.1), std::invalid_argument);
}

TEST(Ror, ScaleInvariance) {
  Rng rng(14);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform() + 0.01, y = rng.uniform() + 0.01, a = 0.01 + 10 * rng.uniform();
    EXPECT_NEAR(ror(a * x, a * y), ror(x, y), 1e-9 * (1 + std::abs(ror(x, y))));
  }
}

TEST(TransitionAccuracy, ComparesSentenceOpeners) {
  GenerationExample gold;
  gold.target = tokenize("<cls> however w1 . <cls> indeed w2 . <cls> w3 .");
  gold.meta.transitions = {"however", "indeed", ""};
  EXPECT_DOUBLE_EQ(*transition_accuracy(tokenize("<cls> however w9 . <cls> similarly w2 ."), gold), 0.5);
  EXPECT_DOUBLE_EQ(*transition_accuracy(tokenize("however <cls> however <cls> indeed"), gold), 1.0);
  EXPECT_DOUBLE_EQ(*transition_accuracy(Tokens{}, gold), 0.0);
  gold.meta.transitions.clear();
  EXPECT_FALSE(transition_accuracy(tokenize("<cls> however"), gold).has_value());
}

TEST(ScoringTokens, DropsReservedMarkers) {
  EXPECT_EQ(scoring_tokens(tokenize("<s> <cls> a . <cls> b <unk> </s>")), tokenize("a . b"));
}

TEST(Protocol, ParseNames) {
  EXPECT_EQ(parse_protocol("reordered"), Protocol::reordered);
  EXPECT_STREQ(protocol_name(Protocol::migrated), "migrated");
  EXPECT_THROW(parse_protocol("shuffled"), std::invalid_argument);
}

TEST(Protocol, EchoGeneratorScoresBoundedAndAggregatesAreMeans) {
  const auto corpus = small_corpus();
  for (Protocol p : {Protocol::standard, Protocol::reordered, Protocol::migrated}) {
    ProtocolConfig cfg;
    cfg.protocol = p;
    const auto rep = run_protocol(echo_generator(), echo_generator(), corpus.test, cfg);
    ASSERT_EQ(rep.cam.per_example.size(), corpus.test.size());
    double s1 = 0, s2 = 0, sl = 0;
    for (const auto& e : rep.cam.per_example) {
      for (double v : {e.rouge.rouge1_f, e.rouge.rouge2_f, e.rouge.rougeL_f}) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      s1 += e.rouge.rouge1_f;
      s2 += e.rouge.rouge2_f;
      sl += e.rouge.rougeL_f;
    }
    const double n = static_cast<double>(corpus.test.size());
    EXPECT_NEAR(rep.cam.aggregate.rouge.rouge1_f, s1 / n, 1e-9);
    EXPECT_NEAR(rep.cam.aggregate.rouge.rouge2_f, s2 / n, 1e-9);
    EXPECT_NEAR(rep.cam.aggregate.rouge.rougeL_f, sl / n, 1e-9);
    // Same generator on both sides.
    for (const auto& e : rep.ror_table) {
      if (e.ror) EXPECT_EQ(*e.ror, 0.0) << e.metric;
    }
  }
}

TEST(Protocol, ReorderedPerturbsEveryMultiReferenceExample) {
  const auto corpus = small_corpus();
  ProtocolConfig cfg;
  cfg.protocol = Protocol::reordered;
  cfg.seed = 5;
  const auto data = protocol_examples(corpus.test, cfg);
  ASSERT_EQ(data.size(), corpus.test.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    ASSERT_GE(corpus.test[i].num_references(), 2u);
    EXPECT_FALSE(data[i].meta.unperturbed);
    EXPECT_NE(data[i].references, corpus.test[i].references) << i;
    for (const auto& t : data[i].meta.transitions) EXPECT_TRUE(t.empty());
  }
  EXPECT_EQ(protocol_examples(corpus.test, cfg).front().references, data.front().references);

  auto single = corpus.test;
  single[0].references.resize(1);
  const auto rep = run_protocol(echo_generator(), echo_generator(), single, cfg);
  ASSERT_FALSE(rep.warnings.empty());
}

TEST(Protocol, MigratedCoverageWarning) {
  const auto corpus = small_corpus();
  ProtocolConfig cfg;
  cfg.protocol = Protocol::migrated;
  const Vocabulary full = lexicon_vocab(corpus);
  auto ok = run_protocol(echo_generator(), echo_generator(), corpus.test, cfg, &full);
  ASSERT_TRUE(ok.vocabulary_coverage.has_value());
  EXPECT_DOUBLE_EQ(*ok.vocabulary_coverage, 1.0);
  for (const auto& w : ok.warnings) EXPECT_EQ(w.find("coverage"), std::string::npos) << w;

  const Vocabulary reserved_only;
  const auto low = run_protocol(echo_generator(), echo_generator(), corpus.test, cfg, &reserved_only);
  EXPECT_DOUBLE_EQ(*low.vocabulary_coverage, 0.0);
  int coverage_warnings = 0;
  for (const auto& w : low.warnings) coverage_warnings += w.find("coverage") != std::string::npos;
  EXPECT_EQ(coverage_warnings, 1);
}

TEST(Protocol, ZeroBaselineGivesNullRor) {
  const auto corpus = small_corpus();
  const Generator silent{"silent", [](const GenerationExample&) { return Tokens{}; }};
  const auto rep = run_protocol(echo_generator(), silent, corpus.test, ProtocolConfig{});
  for (const auto& e : rep.ror_table) EXPECT_FALSE(e.ror.has_value()) << e.metric;
  EXPECT_FALSE(rep.warnings.empty());
  EXPECT_NE(rep.to_json().find("\"ror\": null"), std::string::npos);
}

TEST(Protocol, ReportIsDeterministicJson) {
  const auto corpus = small_corpus();
  ProtocolConfig cfg;
  cfg.protocol = Protocol::reordered;
  cfg.config_hash = "abc";
  const auto a = run_protocol(echo_generator(), echo_generator(), corpus.test, cfg).to_json();
  const auto b = run_protocol(echo_generator(), echo_generator(), corpus.test, cfg).to_json();
  EXPECT_EQ(a, b);
  EXPECT_NE(a.find("\"config_hash\": \"abc\""), std::string::npos);
  EXPECT_NE(a.find("\"per_example\""), std::string::npos);
}

TEST(Ablation, SettingValidationAndNames) {
  EXPECT_THROW((AblationSetting{false, false, true}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((AblationSetting{true, false, false}.validate()));
  EXPECT_EQ((AblationSetting{true, false, false}.name()), "PI");
  EXPECT_EQ((AblationSetting{true, true, false}.name()), "PI+RMP");
  EXPECT_EQ((AblationSetting{true, true, true}.name()), "PI+RMP+OPT");
}

TEST(Ablation, FourRowTableIsDeterministic) {
  const auto corpus = small_corpus();
  const Vocabulary vocab = lexicon_vocab(corpus);
  std::vector<EncodedExample> train_data;
  for (const auto& ex : corpus.train) train_data.push_back(encode(ex, vocab));
  const std::vector<GenerationExample> eval_data(corpus.test.begin(), corpus.test.begin() + 4);
  const auto setup = tiny_setup(vocab.size());
  const std::vector<AblationSetting> settings{{true, false, false}, {true, true, false}, {true, true, true}};
  int callbacks = 0;
  const auto a = run_ablation(settings, setup, train_data, eval_data, vocab, [&](const ScoreRow&) { ++callbacks; });
  ASSERT_EQ(a.rows.size(), 4u);
  EXPECT_EQ(callbacks, 4);
  EXPECT_EQ(a.rows[0].name, "baseline");
  EXPECT_EQ(a.rows[0].num_cams, 0);
  EXPECT_EQ(a.rows[1].name, "PI");
  EXPECT_EQ(a.rows[2].name, "PI+RMP");
  EXPECT_EQ(a.rows[3].name, "PI+RMP+OPT");
  const auto b = run_ablation(settings, setup, train_data, eval_data, vocab);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_NE(a.summary().find("PI+RMP+OPT"), std::string::npos);

  EXPECT_THROW(run_ablation({{false, false, true}}, setup, train_data, eval_data, vocab), std::invalid_argument);
}

TEST(Placement, SweepRowsAndBounds) {
  const auto corpus = small_corpus();
  const Vocabulary vocab = lexicon_vocab(corpus);
  std::vector<EncodedExample> train_data;
  for (const auto& ex : corpus.train) train_data.push_back(encode(ex, vocab));
  const std::vector<GenerationExample> eval_data(corpus.test.begin(), corpus.test.begin() + 3);
  const auto setup = tiny_setup(vocab.size());
  const auto t = run_placement_sweep({1, 2}, setup, train_data, eval_data, vocab);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].num_cams, 1);
  EXPECT_EQ(t.rows[1].num_cams, 2);
  EXPECT_EQ(t.rows[1].name, "k=2");
  EXPECT_THROW(run_placement_sweep({1, 3}, setup, train_data, eval_data, vocab), std::invalid_argument);
}
