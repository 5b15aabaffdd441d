#include "camrw/viz.hpp"

#include "camrw/errors.hpp"
#include "camrw/tokens.hpp"

#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace camrw {

namespace {

using ordered_json = nlohmann::ordered_json;

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr Rgb kWhite{255, 255, 255};
constexpr Rgb kDeep{8, 48, 107};
constexpr Rgb kSeparator{0, 0, 0};
constexpr Rgb kTick{200, 0, 0};

Rgb shade(double t) {
  t = std::clamp(t, 0.0, 1.0);
  auto mix = [t](std::uint8_t a, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround(a + (static_cast<double>(b) - a) * t));
  };
  return Rgb{mix(kWhite.r, kDeep.r), mix(kWhite.g, kDeep.g), mix(kWhite.b, kDeep.b)};
}

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3, 255) {}
  void fill(int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = std::max(0, y0); y < std::min(h_, y1); ++y) {
      for (int x = std::max(0, x0); x < std::min(w_, x1); ++x) {
        std::uint8_t* p = &px_[(static_cast<std::size_t>(y) * w_ + x) * 3];
        p[0] = c.r;
        p[1] = c.g;
        p[2] = c.b;
      }
    }
  }
  void write_png(const std::filesystem::path& path) const {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w_);
    img.height = static_cast<png_uint_32>(h_);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, px_.data(), w_ * 3, nullptr)) {
      const std::string msg = img.message;
      png_image_free(&img);
      throw IoError("cannot write image " + path.string() + ": " + msg);
    }
  }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

}  // namespace

std::vector<AttentionRecord> capture(const Seq2SeqModel& model, const Vocabulary& vocab,
                                     const std::vector<int>& source, const std::vector<int>& generated,
                                     const std::vector<int>& positions, const CaptureOptions& options) {
  const ModelConfig& cfg = model.config();
  if (generated.empty() || generated.front() != kBosId) {
    throw std::invalid_argument("capture: generated sequence must start with the begin marker");
  }
  const int layer = options.layer < 0 ? cfg.num_decoder_layers - 1 : options.layer;
  if (layer >= cfg.num_decoder_layers) throw std::invalid_argument("capture: layer out of range");
  if (options.head < -1 || options.head >= cfg.num_heads) throw std::invalid_argument("capture: head out of range");
  for (int p : positions) {
    if (p < 0 || p >= static_cast<int>(generated.size())) {
      throw std::invalid_argument("capture: position " + std::to_string(p) + " outside generated length " +
                                  std::to_string(generated.size()));
    }
  }

  // One extra end marker so every generated position is a decoder input.
  EncodedExample ex;
  ex.source = source;
  ex.target = generated;
  ex.target.push_back(kEosId);
  AttentionTrace trace;
  {
    ad::Tape tape(false);
    model.forward(tape, ex, nullptr, &trace, true);
  }
  const auto& heads = trace.cross.at(static_cast<std::size_t>(layer));

  std::vector<std::string> src_tokens;
  std::vector<int> boundaries;
  for (std::size_t i = 0; i < source.size(); ++i) {
    src_tokens.push_back(vocab.token(source[i]));
    if (source[i] == kSepId) boundaries.push_back(static_cast<int>(i));
  }

  std::vector<AttentionRecord> out;
  for (int p : positions) {
    AttentionRecord rec;
    rec.position = p;
    rec.token = vocab.token(generated[static_cast<std::size_t>(p)]);
    if (p + 1 < static_cast<int>(generated.size())) rec.next_token = vocab.token(generated[static_cast<std::size_t>(p) + 1]);
    rec.layer = layer;
    rec.head = options.head;
    rec.source_tokens = src_tokens;
    rec.boundaries = boundaries;
    rec.weights.assign(source.size(), 0.0);
    if (options.head >= 0) {
      const Matrix& m = heads[static_cast<std::size_t>(options.head)];
      for (std::size_t s = 0; s < source.size(); ++s) rec.weights[s] = m(p, static_cast<Eigen::Index>(s));
    } else {
      for (const Matrix& m : heads) {
        for (std::size_t s = 0; s < source.size(); ++s) rec.weights[s] += m(p, static_cast<Eigen::Index>(s));
      }
      for (double& w : rec.weights) w /= static_cast<double>(heads.size());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<int> top_k(const std::vector<double>& weights, int k) {
  std::vector<int> idx(weights.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto take = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(k, 0)));
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(), [&](int a, int b) {
    return weights[static_cast<std::size_t>(a)] > weights[static_cast<std::size_t>(b)] ||
           (weights[static_cast<std::size_t>(a)] == weights[static_cast<std::size_t>(b)] && a < b);
  });
  idx.resize(take);
  return idx;
}

RenderLayout render_layout(const RenderOptions& o) {
  if (o.cell_width < 3 || o.strip_height < 1 || o.tick_unit < 1 || o.top < 0) {
    throw std::invalid_argument("render: bad image geometry");
  }
  RenderLayout l;
  l.cell_width = o.cell_width;
  l.strip_height = o.strip_height;
  l.tick_unit = o.tick_unit;
  l.tick_band = o.tick_unit * std::max(o.top, 1);
  return l;
}

std::string records_to_json(const std::vector<AttentionRecord>& records, const RenderOptions& options) {
  ordered_json j;
  j["format"] = "camrw-attention v1";
  j["top"] = options.top;
  ordered_json arr = ordered_json::array();
  for (const auto& r : records) {
    ordered_json o;
    o["position"] = r.position;
    o["token"] = r.token;
    o["next_token"] = r.next_token;
    o["layer"] = r.layer;
    o["head"] = r.head;
    o["boundaries"] = r.boundaries;
    o["top"] = top_k(r.weights, options.top);
    o["source_tokens"] = r.source_tokens;
    o["weights"] = r.weights;
    arr.push_back(std::move(o));
  }
  j["records"] = std::move(arr);
  return j.dump(1) + "\n";
}

std::vector<AttentionRecord> read_records(const std::filesystem::path& data_file) {
  std::ifstream in(data_file);
  if (!in) throw IoError("cannot open " + data_file.string());
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw MalformedRecordError(data_file.string() + ": " + e.what());
  }
  std::vector<AttentionRecord> out;
  try {
    for (const auto& o : j.at("records")) {
      AttentionRecord r;
      r.position = o.at("position").get<int>();
      r.token = o.at("token").get<std::string>();
      r.next_token = o.at("next_token").get<std::string>();
      r.layer = o.at("layer").get<int>();
      r.head = o.at("head").get<int>();
      r.boundaries = o.at("boundaries").get<std::vector<int>>();
      r.source_tokens = o.at("source_tokens").get<std::vector<std::string>>();
      r.weights = o.at("weights").get<std::vector<double>>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw MalformedRecordError(data_file.string() + ": " + e.what());
  }
  return out;
}

RenderOutput render(const std::vector<AttentionRecord>& records, const std::filesystem::path& stem,
                    const RenderOptions& options) {
  if (records.empty()) throw std::invalid_argument("render: no records");
  const RenderLayout L = render_layout(options);
  std::size_t widest = 1;
  for (const auto& r : records) widest = std::max(widest, r.weights.size());
  const int width = 2 * L.margin + static_cast<int>(widest) * L.cell_width;
  const int height = 2 * L.margin + static_cast<int>(records.size()) * L.row_height() - L.gap;
  Canvas canvas(width, height);

  for (std::size_t ri = 0; ri < records.size(); ++ri) {
    const auto& r = records[ri];
    const int rec = static_cast<int>(ri);
    double peak = 0.0;
    for (double w : r.weights) peak = std::max(peak, w);
    for (std::size_t s = 0; s < r.weights.size(); ++s) {
      const int x = L.cell_left(static_cast<int>(s));
      canvas.fill(x, L.strip_top(rec), x + L.cell_width, L.strip_top(rec) + L.strip_height,
                  shade(peak > 0 ? r.weights[s] / peak : 0.0));
    }
    for (int b : r.boundaries) {
      if (b < 0 || b >= static_cast<int>(r.weights.size())) continue;
      const int cx = L.cell_left(b) + L.cell_width / 2;
      canvas.fill(cx, L.strip_top(rec), cx + 1, L.strip_top(rec) + L.strip_height, kSeparator);
    }
    const auto top = top_k(r.weights, options.top);
    for (std::size_t rank = 0; rank < top.size(); ++rank) {
      const int x = L.cell_left(top[rank]);
      const int h = L.tick_unit * (static_cast<int>(top.size()) - static_cast<int>(rank));
      canvas.fill(x + 1, L.tick_top(rec), x + L.cell_width - 1, L.tick_top(rec) + h, kTick);
    }
  }

  RenderOutput out;
  out.image = stem;
  out.image += ".png";
  out.data = stem;
  out.data += ".json";
  const std::string data = records_to_json(records, options);
  {
    std::ofstream f(out.data, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + out.data.string());
    f << data;
    if (!f.flush()) throw IoError("cannot write " + out.data.string());
  }
  canvas.write_png(out.image);
  return out;
}

}  // namespace camrw
