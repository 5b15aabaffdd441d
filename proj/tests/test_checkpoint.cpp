#include "camrw/checkpoint.hpp"
#include "camrw/errors.hpp"
#include "camrw/tokens.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace camrw;
namespace fs = std::filesystem;

namespace {

ModelConfig small() {
  ModelConfig c = ModelConfig::desk(20);
  c.embed_dim = 8;
  c.num_heads = 2;
  c.remap_heads = 2;
  c.ffn_dim = 8;
  c.num_decoder_layers = 2;
  c.num_encoder_layers = 1;
  return c;
}

class CheckpointTest : public ::testing::Test {
 protected:
  fs::path dir;
  void SetUp() override {
    dir = fs::temp_directory_path() / ("camrw_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                       "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::vector<char> bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  void write(const fs::path& p, const std::vector<char>& b) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  }
};

const EncodedExample kExample{{6, 7, 8, 9}, {kBosId, kClsId, 10, 11, kClsId, 12, kEosId}};

}  // namespace

TEST_F(CheckpointTest, RoundTripGivesIdenticalLogits) {
  Seq2SeqModel m(small(), 3);
  std::vector<EncodedExample> batch{kExample};
  for (int i = 0; i < 3; ++i) m.train_step(batch, 1e-2, 0.0, nullptr);
  save_checkpoint(m, dir / "m.ckpt");
  const auto back = load_checkpoint(dir / "m.ckpt", m.config());
  EXPECT_EQ(back->step_counter(), 3);
  EXPECT_EQ(back->seed(), 3u);
  EXPECT_TRUE(back->logits(kExample) == m.logits(kExample));
  EXPECT_TRUE(back->logits(kExample, true) == m.logits(kExample, true));
  BeamConfig b;
  b.max_steps = 10;
  EXPECT_EQ(back->beam_search(kExample.source, b), m.beam_search(kExample.source, b));
  EXPECT_FALSE(fs::exists(dir / "m.ckpt.tmp"));
}

TEST_F(CheckpointTest, SavingTwiceIsByteIdentical) {
  Seq2SeqModel m(small(), 4);
  save_checkpoint(m, dir / "a.ckpt");
  save_checkpoint(*load_checkpoint(dir / "a.ckpt"), dir / "b.ckpt");
  EXPECT_EQ(bytes(dir / "a.ckpt"), bytes(dir / "b.ckpt"));
}

TEST_F(CheckpointTest, ManifestIsReadable) {
  Seq2SeqModel m(small(), 5);
  save_checkpoint(m, dir / "m.ckpt");
  const auto kv = read_checkpoint_manifest(dir / "m.ckpt");
  EXPECT_EQ(kv.at("embed_dim"), "8");
  EXPECT_EQ(kv.at("format_version"), std::to_string(kCheckpointVersion));
  EXPECT_EQ(kv.at("seed"), "5");
}

TEST_F(CheckpointTest, MismatchedConfigRejected) {
  Seq2SeqModel m(small(), 6);
  save_checkpoint(m, dir / "m.ckpt");
  ModelConfig other = small();
  other.num_cams = 1;
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", other), CheckpointFormatError);
}

TEST_F(CheckpointTest, CorruptionDetected) {
  Seq2SeqModel m(small(), 7);
  save_checkpoint(m, dir / "m.ckpt");
  const auto good = bytes(dir / "m.ckpt");
  // Flip a byte inside the tensor payload.
  auto flipped = good;
  flipped[good.size() / 2] ^= 0x5A;
  write(dir / "flip.ckpt", flipped);
  EXPECT_THROW(load_checkpoint(dir / "flip.ckpt"), CheckpointFormatError);
  // Every truncation is rejected, never partially loaded.
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{20}, good.size() / 3, good.size() - 1}) {
    write(dir / "cut.ckpt", std::vector<char>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut)));
    EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), CheckpointFormatError) << cut;
  }
  auto version = good;
  version[8] = 9;
  write(dir / "ver.ckpt", version);
  EXPECT_THROW(load_checkpoint(dir / "ver.ckpt"), CheckpointFormatError);
}

TEST_F(CheckpointTest, InterruptedWriteLeavesPreviousFileLoadable) {
  Seq2SeqModel m(small(), 8);
  save_checkpoint(m, dir / "m.ckpt");
  // A crash mid-save leaves only a partial temporary file behind.
  const auto good = bytes(dir / "m.ckpt");
  write(dir / "m.ckpt.tmp", std::vector<char>(good.begin(), good.begin() + 100));
  EXPECT_TRUE(load_checkpoint(dir / "m.ckpt")->logits(kExample) == m.logits(kExample));
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt.tmp"), CheckpointFormatError);
}

TEST_F(CheckpointTest, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), IoError);
}
