#pragma once

// Cross-attention capture over a fixed decoded sequence and heatmap export.

#include "camrw/data.hpp"
#include "camrw/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace camrw {

struct AttentionRecord {
  // Index into the decoder input sequence (0 is the begin marker). The
  // weights are those of the decoder step reading `token`; that step emits
  // `next_token` ("" past the end).
  int position = 0;
  std::string token;
  std::string next_token;
  int layer = 0;
  int head = -1;  // -1: mean over heads
  std::vector<std::string> source_tokens;
  std::vector<double> weights;  // one per source position, sums to 1
  // Source positions of document separators.
  std::vector<int> boundaries;
};

struct CaptureOptions {
  int layer = -1;  // -1: last decoder layer
  int head = -1;   // -1: mean over heads
};

// Replays `generated` (begin marker first, as returned by beam search with
// kBosId prepended) through a teacher-forced pass with decoding-time
// windows. Throws std::invalid_argument on out-of-range positions, layers or
// heads.
std::vector<AttentionRecord> capture(const Seq2SeqModel& model, const Vocabulary& vocab,
                                     const std::vector<int>& source, const std::vector<int>& generated,
                                     const std::vector<int>& positions, const CaptureOptions& options = {});

// Indices of the k largest weights, largest first; ties go to the lower index.
std::vector<int> top_k(const std::vector<double>& weights, int k);

struct RenderOptions {
  int cell_width = 8;
  int strip_height = 24;
  int tick_unit = 3;  // tick height per rank step
  int top = 5;
};

// Image geometry, shared with anything that decodes the picture.
struct RenderLayout {
  int margin = 4;
  int cell_width = 8;
  int strip_height = 24;
  int tick_band = 15;
  int gap = 6;
  int tick_unit = 3;

  int row_height() const { return strip_height + tick_band + gap; }
  int strip_top(int record) const { return margin + record * row_height(); }
  int tick_top(int record) const { return strip_top(record) + strip_height; }
  int cell_left(int index) const { return margin + index * cell_width; }
};

RenderLayout render_layout(const RenderOptions& options);

struct RenderOutput {
  std::filesystem::path image;
  std::filesystem::path data;
};

// Writes <stem>.png and <stem>.json. Every record becomes a strip of source
// cells shaded by weight (white to dark blue, relative to the record's
// maximum). Separator positions get a black center line. Under each strip
// the top weights get red ticks, the tallest for the largest weight.
// Throws IoError when a file cannot be written.
RenderOutput render(const std::vector<AttentionRecord>& records, const std::filesystem::path& stem,
                    const RenderOptions& options = {});

std::string records_to_json(const std::vector<AttentionRecord>& records, const RenderOptions& options = {});
std::vector<AttentionRecord> read_records(const std::filesystem::path& data_file);

}  // namespace camrw
