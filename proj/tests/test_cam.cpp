#include "camrw/cam.hpp"
#include "camrw/errors.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace camrw;
using namespace camrw::cam;
using camrw::testing::random_cam;
using camrw::testing::random_mask;
using camrw::testing::random_matrix;
using camrw::testing::small_cam_config;

TEST(OrderVector, ValuesAreLogOfIndexPlusOne) {
  const OrderVector o = make_order_vector(1, 4, 6);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(o.values(i), std::log10(2.0));
  EXPECT_DOUBLE_EQ(make_order_vector(6, 3, 6).values(2), std::log10(7.0));
  EXPECT_NEAR(make_order_vector(9, 2, 9).values(0), 1.0, 1e-15);
}

TEST(OrderVector, RejectsOutOfRangeIndex) {
  EXPECT_THROW(make_order_vector(0, 4, 6), std::invalid_argument);
  EXPECT_THROW(make_order_vector(7, 4, 6), std::invalid_argument);
}

TEST(OrderEnhance, MatchesConcatenatedProjection) {
  Rng rng(3);
  const int d = 5;
  const RowVector e = random_matrix(rng, 1, d);
  const Matrix w = random_matrix(rng, 2 * d, d);
  const Matrix b = random_matrix(rng, 1, d);
  const OrderVector o = make_order_vector(3, d, 6);
  RowVector cat(2 * d);
  cat << e, o.values;
  const RowVector expect = cat * w + b;
  EXPECT_LT((order_enhance(e, o, w, b) - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(order_enhance(e, o, random_matrix(rng, d, d), b), ShapeError);
}

TEST(PositionDistribution, SumsToOneWithEmptyPrefix) {
  Rng rng(4);
  ad::ParameterStore store;
  const CamModule m = random_cam(store, small_cam_config(), rng);
  const PositionDistribution p = position_probabilities(Matrix(0, 8), m.position_head());
  EXPECT_EQ(p.probs.cols(), 6);
  EXPECT_NEAR(p.probs.sum(), 1.0, 1e-12);
  EXPECT_GE(p.probs.minCoeff(), 0.0);
}

TEST(Gates, ZeroWeightsGiveEqualThirds) {
  const GateCoefficients c = intensity_gates(RowVector::Ones(4), Matrix::Zero(4, 3));
  EXPECT_NEAR(c.ori, 1.0 / 3, 1e-15);
  EXPECT_NEAR(c.itv, 1.0 / 3, 1e-15);
  EXPECT_NEAR(c.rmp, 1.0 / 3, 1e-15);
}

TEST(Gates, ConvexCombination) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const GateCoefficients c = intensity_gates(random_matrix(rng, 1, 6, 3.0), random_matrix(rng, 6, 3, 3.0));
    EXPECT_NEAR(c.ori + c.itv + c.rmp, 1.0, 1e-12);
    EXPECT_GE(std::min({c.ori, c.itv, c.rmp}), 0.0);
    // Sigmoid outputs lie in (0,1), so no coefficient can exceed e/(e+2).
    EXPECT_LE(std::max({c.ori, c.itv, c.rmp}), std::exp(1.0) / (std::exp(1.0) + 2.0) + 1e-12);
  }
}

TEST(Mask, LowestIndexWinsTies) {
  Matrix logits(3, 5);
  logits << 0, 0, 0, 0, 1,   //
      1, 0, 0, 0, 1,         //
      0, 0, 0, 0, 0;
  EXPECT_EQ(mask_from_logits(logits, 4).flags, (std::vector<std::uint8_t>{1, 0, 0}));
  EXPECT_EQ(mask_from_logits(logits, 0).flags, (std::vector<std::uint8_t>{0, 1, 1}));
}

TEST(Mask, ProjectionRoute) {
  Matrix e = Matrix::Zero(2, 3);
  e(1, 0) = 1.0;
  const VocabProjection proj = [](const Matrix& x) {
    Matrix l = Matrix::Zero(x.rows(), 6);
    l.col(4) = x.col(0) * 2.0 - Matrix::Ones(x.rows(), 1) * 0.5;
    return l;
  };
  EXPECT_EQ(sentence_start_mask(e, proj, 4).flags, (std::vector<std::uint8_t>{0, 1}));
}

TEST(Stages, OutOfOrderTransitionThrows) {
  const EmbeddingSequence e{Matrix::Zero(2, 2), Stage::itv};
  EXPECT_THROW(e.advanced(Matrix::Zero(2, 2), Stage::odr), std::logic_error);
  EXPECT_THROW(e.advanced(Matrix::Zero(3, 2), Stage::rmp), ShapeError);
  EXPECT_EQ(e.advanced(Matrix::Zero(2, 2), Stage::opm).stage, Stage::opm);
}

TEST(Windows, SymmetricWindowsCoverCenters) {
  CamConfig c = small_cam_config();
  // n_w = 4: centers 2..len-3 of a length-9 sequence.
  EXPECT_FALSE(remap_window(1, 9, c));
  const auto w = remap_window(2, 9, c);
  ASSERT_TRUE(w);
  EXPECT_EQ(w->lo, 0);
  EXPECT_EQ(w->hi, 4);
  EXPECT_TRUE(remap_window(6, 9, c));
  EXPECT_FALSE(remap_window(7, 9, c));
}

TEST(Windows, ShortSequenceUsesOneWindow) {
  CamConfig c = small_cam_config();
  for (int len = 1; len <= 4; ++len) {
    int centers = 0;
    for (int p = 0; p < len; ++p) {
      if (const auto w = remap_window(p, len, c)) {
        ++centers;
        EXPECT_EQ(w->lo, 0);
        EXPECT_EQ(w->hi, len - 1);
      }
    }
    EXPECT_EQ(centers, 1);
  }
}

TEST(Windows, CausalWindowsEndAtCenter) {
  CamConfig c = small_cam_config();
  c.causal_window = true;
  for (int p = 0; p < 10; ++p) {
    const auto w = remap_window(p, 10, c);
    ASSERT_TRUE(w);
    EXPECT_EQ(w->hi, p);
    EXPECT_EQ(w->lo, std::max(0, p - 2));
  }
}

TEST(CamForward, ZeroMaskIsIdentity) {
  Rng rng(6);
  ad::ParameterStore store;
  const CamModule m = random_cam(store, small_cam_config(), rng);
  const EmbeddingSequence e{random_matrix(rng, 7, 8), Stage::ori};
  const EmbeddingSequence out = cam_forward(e, SentenceStartMask::zeros(7), m);
  EXPECT_EQ(out.values, e.values);
  EXPECT_EQ(out.stage, Stage::opm);
}

TEST(CamForward, RestoresUnmaskedRowsExactly) {
  Rng rng(7);
  ad::ParameterStore store;
  const CamModule m = random_cam(store, small_cam_config(), rng);
  for (int t = 0; t < 50; ++t) {
    const int len = rng.range(1, 12);
    const EmbeddingSequence e{random_matrix(rng, len, 8), Stage::ori};
    const SentenceStartMask mask = random_mask(rng, static_cast<std::size_t>(len));
    const EmbeddingSequence out = cam_forward(e, mask, m);
    ASSERT_EQ(out.values.rows(), len);
    ASSERT_EQ(out.values.cols(), 8);
    for (int i = 0; i < len; ++i) {
      if (mask.flags[static_cast<std::size_t>(i)] == 0) EXPECT_TRUE(out.values.row(i) == e.values.row(i));
    }
  }
}

TEST(CamForward, WrongInputStageThrows) {
  Rng rng(8);
  ad::ParameterStore store;
  const CamModule m = random_cam(store, small_cam_config(), rng);
  const EmbeddingSequence e{random_matrix(rng, 3, 8), Stage::itv};
  EXPECT_THROW(cam_forward(e, SentenceStartMask::ones(3), m), std::logic_error);
}

TEST(CamForward, AblationTogglesSelectStreams) {
  Rng rng(9);
  ad::ParameterStore store;
  CamConfig cfg = small_cam_config();
  const CamModule full = random_cam(store, cfg, rng);
  const EmbeddingSequence e{random_matrix(rng, 6, 8), Stage::ori};
  const SentenceStartMask mask = SentenceStartMask::ones(6);

  auto with = [&](bool pi, bool rmp, bool opt) {
    CamConfig c = cfg;
    c.use_pi = pi;
    c.use_rmp = rmp;
    c.use_opt = opt;
    return CamModule::bind(store, "cam", c);
  };
  // PI only: output is the intervened stream.
  const EmbeddingSequence pi = cam_forward(e, mask, with(true, false, false));
  EXPECT_LT((pi.values - primitive_intervene(e, mask, full).values).cwiseAbs().maxCoeff(), 1e-12);
  // RMP without PI remaps the original rows.
  const EmbeddingSequence rmp = cam_forward(e, mask, with(false, true, false));
  const EmbeddingSequence expect = context_remap(e.advanced(e.values, Stage::itv), full);
  EXPECT_LT((rmp.values - expect.values).cwiseAbs().maxCoeff(), 1e-12);
  CamConfig bad = cfg;
  bad.use_pi = bad.use_rmp = false;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(CamForward, MaskedPositionsIgnoreFutureRowsWithCausalWindows) {
  Rng rng(10);
  ad::ParameterStore store;
  CamConfig cfg = small_cam_config();
  cfg.causal_window = true;
  const CamModule m = random_cam(store, cfg, rng);
  for (int t = 0; t < 50; ++t) {
    const int len = rng.range(2, 12);
    Matrix a = random_matrix(rng, len, 8);
    const int cut = rng.range(0, len - 2);
    Matrix b = a;
    b.bottomRows(len - cut - 1) = random_matrix(rng, len - cut - 1, 8);
    const SentenceStartMask mask = SentenceStartMask::ones(static_cast<std::size_t>(len));
    const Matrix oa = cam_forward({a, Stage::ori}, mask, m).values;
    const Matrix ob = cam_forward({b, Stage::ori}, mask, m).values;
    EXPECT_LT((oa.topRows(cut + 1) - ob.topRows(cut + 1)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

namespace {

void expect_routes_agree(const CamConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ad::ParameterStore store;
  const CamModule m = random_cam(store, cfg, rng);
  for (int t = 0; t < 40; ++t) {
    const int len = rng.range(1, 11);
    const Matrix x = random_matrix(rng, len, cfg.embed_dim);
    const SentenceStartMask mask = random_mask(rng, static_cast<std::size_t>(len), 0.5);
    ad::Tape tape(false);
    const Matrix tape_out = m.forward(tape, tape.constant(x), mask).value();
    const Matrix plain = cam_forward({x, Stage::ori}, mask, m).values;
    ASSERT_LT((tape_out - plain).cwiseAbs().maxCoeff(), 1e-12) << "len " << len;
  }
}

}  // namespace

TEST(CamModule, TapeRouteMatchesPlainRoute) {
  CamConfig cfg = small_cam_config();
  expect_routes_agree(cfg, 11);
  cfg.causal_window = true;
  expect_routes_agree(cfg, 12);
  cfg.gate_inputs_per_stage = true;
  expect_routes_agree(cfg, 13);
  for (auto [pi, rmp, opt] : {std::tuple{true, false, false}, {false, true, false}, {true, true, false},
                              {true, false, true}, {false, true, true}}) {
    cfg.use_pi = pi;
    cfg.use_rmp = rmp;
    cfg.use_opt = opt;
    expect_routes_agree(cfg, 14);
  }
}

TEST(CamModule, StepMatchesFullCausalForward) {
  Rng rng(15);
  ad::ParameterStore store;
  CamConfig cfg = small_cam_config();
  cfg.causal_window = true;
  const CamModule m = random_cam(store, cfg, rng);
  for (int t = 0; t < 30; ++t) {
    const int len = rng.range(1, 12);
    const Matrix x = random_matrix(rng, len, 8);
    const SentenceStartMask mask = random_mask(rng, static_cast<std::size_t>(len), 0.5);
    const Matrix full = cam_forward({x, Stage::ori}, mask, m).values;
    CamStreamState st = m.initial_state();
    for (int i = 0; i < len; ++i) {
      const RowVector r = m.step(x.row(i), mask.flags[static_cast<std::size_t>(i)] != 0, st);
      ASSERT_LT((r - full.row(i)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(CamModule, StepRequiresCausalWindows) {
  Rng rng(16);
  ad::ParameterStore store;
  const CamModule m = random_cam(store, small_cam_config(), rng);
  CamStreamState st = m.initial_state();
  EXPECT_THROW(m.step(RowVector::Zero(8), true, st), std::logic_error);
}

TEST(CamModule, EverySubmodulePassesGradientCheck) {
  Rng rng(17);
  ad::ParameterStore store;
  CamConfig cfg = small_cam_config();
  const CamModule m = random_cam(store, cfg, rng);
  const Matrix x = random_matrix(rng, 9, 8);
  const Matrix w = random_matrix(rng, 9, 8);
  SentenceStartMask mask = SentenceStartMask::zeros(9);
  mask.flags[0] = mask.flags[3] = mask.flags[4] = mask.flags[7] = 1;
  auto f = [&](ad::Tape& t) {
    return ad::sum_all(ad::hadamard(m.forward(t, t.constant(x), mask), t.constant(w)));
  };
  for (const char* sub : {kSubmoduleOrder, kSubmodulePosition, kSubmoduleRemap, kSubmoduleGate}) {
    const auto res = camrw::testing::gradient_check(f, m.submodule_parameters(sub));
    EXPECT_LT(res.worst, 1e-4) << sub << " at " << res.where;
  }
}

TEST(CamModule, CreateUsesNamedLayout) {
  Rng rng(18);
  ad::ParameterStore store;
  const CamModule m = CamModule::create(store, "dec.cam0", small_cam_config(), rng);
  EXPECT_NE(store.find("dec.cam0.order.w"), nullptr);
  EXPECT_NE(store.find("dec.cam0.gate.w"), nullptr);
  EXPECT_EQ(store.find("dec.cam0.remap.wo")->value.norm(), 0.0);
  EXPECT_EQ(store.size(), CamModule::layout("x", small_cam_config()).size());
  EXPECT_THROW(m.submodule_parameters("nope"), std::invalid_argument);
}
