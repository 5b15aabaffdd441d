#include "camrw/errors.hpp"
#include "camrw/tokens.hpp"
#include "camrw/viz.hpp"
#include "png_reader.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace camrw;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  SyntheticCorpus corpus;
  Vocabulary vocab;
  std::unique_ptr<Seq2SeqModel> model;
  EncodedExample example;
  std::vector<int> generated;

  Fixture() {
    SyntheticSpec spec;
    spec.num_train = 4;
    spec.num_valid = 1;
    spec.num_test = 2;
    spec.min_references = 3;
    spec.max_references = 3;
    corpus = generate_synthetic(spec);
    vocab = Vocabulary::build({corpus.lexicon.all_tokens()});
    ModelConfig c = ModelConfig::desk(vocab.size());
    c.embed_dim = 16;
    c.num_heads = 2;
    c.remap_heads = 2;
    c.ffn_dim = 24;
    c.num_encoder_layers = 1;
    c.num_decoder_layers = 2;
    c.num_cams = 1;
    model = std::make_unique<Seq2SeqModel>(c, 9);
    example = encode(corpus.test[0], vocab);
    BeamConfig beam;
    beam.max_steps = 10;
    generated = {kBosId};
    for (int t : model->beam_search(example.source, beam)) generated.push_back(t);
  }
};

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "camrw_viz_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<int> all_positions(const std::vector<int>& generated) {
  std::vector<int> p(generated.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<int>(i);
  return p;
}

}  // namespace

TEST(Capture, WeightsAreDistributions) {
  Fixture f;
  const auto recs = capture(*f.model, f.vocab, f.example.source, f.generated, all_positions(f.generated));
  ASSERT_EQ(recs.size(), f.generated.size());
  EXPECT_EQ(recs[0].token, "<s>");
  for (const auto& r : recs) {
    ASSERT_EQ(r.weights.size(), f.example.source.size());
    double sum = 0;
    for (double w : r.weights) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_EQ(r.layer, 1);
    EXPECT_EQ(r.head, -1);
  }
  EXPECT_EQ(recs.back().next_token, "");
}

TEST(Capture, BoundariesAreSeparators) {
  Fixture f;
  const auto r = capture(*f.model, f.vocab, f.example.source, f.generated, {0}).front();
  ASSERT_EQ(r.boundaries.size(), f.corpus.test[0].num_references() - 1);
  for (int b : r.boundaries) EXPECT_EQ(r.source_tokens[static_cast<std::size_t>(b)], "<sep>");
}

TEST(Capture, HeadMeanAndLayerSelection) {
  Fixture f;
  const std::vector<int> pos{0, 1};
  const auto mean = capture(*f.model, f.vocab, f.example.source, f.generated, pos);
  const auto h0 = capture(*f.model, f.vocab, f.example.source, f.generated, pos, {-1, 0});
  const auto h1 = capture(*f.model, f.vocab, f.example.source, f.generated, pos, {-1, 1});
  for (std::size_t i = 0; i < pos.size(); ++i) {
    for (std::size_t s = 0; s < mean[i].weights.size(); ++s) {
      EXPECT_NEAR(mean[i].weights[s], 0.5 * (h0[i].weights[s] + h1[i].weights[s]), 1e-12);
    }
  }
  const auto first = capture(*f.model, f.vocab, f.example.source, f.generated, pos, {0, -1});
  EXPECT_EQ(first[0].layer, 0);
  EXPECT_NE(first[0].weights, mean[0].weights);
}

TEST(Capture, DeterministicAndRejectsBadArguments) {
  Fixture f;
  const auto pos = all_positions(f.generated);
  const auto a = capture(*f.model, f.vocab, f.example.source, f.generated, pos);
  const auto b = capture(*f.model, f.vocab, f.example.source, f.generated, pos);
  EXPECT_EQ(records_to_json(a), records_to_json(b));
  const int n = static_cast<int>(f.generated.size());
  EXPECT_THROW(capture(*f.model, f.vocab, f.example.source, f.generated, {n}), std::invalid_argument);
  EXPECT_THROW(capture(*f.model, f.vocab, f.example.source, f.generated, {-1}), std::invalid_argument);
  EXPECT_THROW(capture(*f.model, f.vocab, f.example.source, f.generated, {0}, {2, -1}), std::invalid_argument);
  EXPECT_THROW(capture(*f.model, f.vocab, f.example.source, f.generated, {0}, {-1, 2}), std::invalid_argument);
  EXPECT_THROW(capture(*f.model, f.vocab, f.example.source, {7, 8}, {0}), std::invalid_argument);
}

TEST(TopK, OrderAndTies) {
  EXPECT_EQ(top_k({0.1, 0.4, 0.2, 0.4, 0.0}, 3), (std::vector<int>{1, 3, 2}));
  EXPECT_EQ(top_k({0.5, 0.5}, 5), (std::vector<int>{0, 1}));
  EXPECT_TRUE(top_k({}, 5).empty());
}

TEST(Render, DataFileRoundTripsExactly) {
  Fixture f;
  const auto recs = capture(*f.model, f.vocab, f.example.source, f.generated, all_positions(f.generated));
  const auto out = render(recs, scratch("roundtrip"));
  const auto back = read_records(out.data);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].weights, recs[i].weights);
    EXPECT_EQ(back[i].boundaries, recs[i].boundaries);
    EXPECT_EQ(back[i].source_tokens, recs[i].source_tokens);
    EXPECT_EQ(back[i].token, recs[i].token);
    EXPECT_EQ(back[i].position, recs[i].position);
  }
  const auto again = render(back, scratch("roundtrip2"));
  EXPECT_EQ(slurp(out.data), slurp(again.data));
  EXPECT_EQ(slurp(out.image), slurp(again.image));
}

TEST(Render, ImageAnnotatesTopWeightsAndSeparators) {
  Fixture f;
  const auto recs = capture(*f.model, f.vocab, f.example.source, f.generated, all_positions(f.generated));
  const RenderOptions opts;
  const auto out = render(recs, scratch("annot"), opts);
  const auto img = camrw::testing::read_png(out.image);
  const RenderLayout L = render_layout(opts);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const int cells = static_cast<int>(recs[i].weights.size());
    EXPECT_EQ(camrw::testing::decode_ticks(img, L, static_cast<int>(i), cells), top_k(recs[i].weights, 5)) << i;
    EXPECT_EQ(camrw::testing::decode_separators(img, L, static_cast<int>(i), cells), recs[i].boundaries) << i;
  }
}

TEST(Render, Errors) {
  EXPECT_THROW(render({}, scratch("empty")), std::invalid_argument);
  AttentionRecord r;
  r.weights = {1.0};
  r.source_tokens = {"a"};
  EXPECT_THROW(render({r}, fs::path("/nonexistent-dir/sub/out")), IoError);
  EXPECT_THROW(read_records(scratch("missing.json")), IoError);
}
