#include "camrw/config.hpp"

#include "camrw/checkpoint.hpp"
#include "camrw/errors.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace camrw {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

template <typename T, typename F>
T parse_number(const std::string& key, const std::string& v, F f) {
  try {
    std::size_t used = 0;
    T x = f(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return x;
  } catch (const std::logic_error&) {
    throw std::invalid_argument("option " + key + ": cannot parse '" + v + "'");
  }
}

}  // namespace

const std::vector<OptionSpec>& model_options() {
  static const std::vector<OptionSpec> specs{
      {"preset", "desk", "model preset: desk or paper"},
      {"cams", "", "number of causal intervention modules (k)"},
      {"embed-dim", "", "embedding width"},
      {"heads", "", "attention heads"},
      {"encoder-layers", "", "encoder depth"},
      {"decoder-layers", "", "decoder depth (L)"},
      {"ffn-dim", "", "feed-forward width"},
      {"dropout", "", "dropout rate"},
      {"window-size", "", "remapping window size"},
      {"remap-heads", "", "remapping attention heads"},
      {"num-sentences", "", "sentence-position classes"},
      {"max-source-length", "", "longest accepted source"},
      {"max-target-length", "", "longest accepted target"},
      {"causal-window", "", "clip remapping windows to the prefix while training"},
      {"use-pi", "true", "primitive intervention stream"},
      {"use-rmp", "true", "remapping stream"},
      {"use-opt", "true", "learned intensity gates"},
  };
  return specs;
}

const std::vector<OptionSpec>& train_options() {
  static const std::vector<OptionSpec> specs{
      {"epochs", "8", "training epochs"},
      {"batch-size", "16", "examples per SGD step"},
      {"lr", "0.01", "SGD learning rate"},
      {"clip", "5", "global gradient-norm clip, 0 disables"},
      {"target-loss", "0", "stop once an epoch's mean loss is below this, 0 disables"},
  };
  return specs;
}

const std::vector<OptionSpec>& beam_options() {
  static const std::vector<OptionSpec> specs{
      {"beam-width", "4", "beam width"},
      {"max-steps", "", "decoding step limit"},
      {"length-penalty", "1", "length normalization exponent"},
  };
  return specs;
}

RunConfig RunConfig::resolve(const std::vector<OptionSpec>& specs, const Settings& file, const Settings& flags) {
  std::set<std::string> known{"command"};
  Settings values;
  for (const auto& s : specs) {
    known.insert(s.key);
    if (!s.default_value.empty()) values[s.key] = s.default_value;
  }
  for (const Settings* layer : {&file, &flags}) {
    for (const auto& [k, v] : *layer) {
      if (!known.count(k)) throw std::invalid_argument("unknown option '" + k + "'");
      if (k == "command") continue;
      values[k] = v;
    }
  }
  return RunConfig(std::move(values));
}

Settings RunConfig::read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_key_values(os.str());
}

bool RunConfig::has(const std::string& key) const {
  auto it = values_.find(key);
  return it != values_.end() && !it->second.empty();
}

std::string RunConfig::str(const std::string& key) const {
  auto it = values_.find(key);
  return it == values_.end() ? std::string() : it->second;
}

int RunConfig::integer(const std::string& key) const {
  return parse_number<int>(key, str(key), [](const std::string& s, std::size_t* n) { return std::stoi(s, n); });
}

double RunConfig::real(const std::string& key) const {
  return parse_number<double>(key, str(key), [](const std::string& s, std::size_t* n) { return std::stod(s, n); });
}

bool RunConfig::boolean(const std::string& key) const {
  const std::string v = lower(str(key));
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("option " + key + ": expected a boolean, got '" + str(key) + "'");
}

std::uint64_t RunConfig::seed() const {
  const std::string v = str("seed");
  if (v.empty() || v[0] == '-') throw std::invalid_argument("option seed: expected a non-negative integer");
  return parse_number<std::uint64_t>("seed", v,
                                     [](const std::string& s, std::size_t* n) { return std::stoull(s, n); });
}

std::vector<int> RunConfig::int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    out.push_back(parse_number<int>(key, item, [](const std::string& s, std::size_t* n) { return std::stoi(s, n); }));
  }
  if (out.empty()) throw std::invalid_argument("option " + key + ": expected a comma-separated integer list");
  return out;
}

ModelConfig RunConfig::model(int vocab_size) const {
  const std::string preset = str("preset").empty() ? "desk" : str("preset");
  ModelConfig c;
  if (preset == "desk") {
    c = ModelConfig::desk(vocab_size);
  } else if (preset == "paper") {
    c = ModelConfig::paper(vocab_size);
  } else {
    throw std::invalid_argument("option preset: expected desk or paper, got '" + preset + "'");
  }
  auto set_int = [&](const char* key, int& field) {
    if (has(key)) field = integer(key);
  };
  set_int("cams", c.num_cams);
  set_int("embed-dim", c.embed_dim);
  set_int("heads", c.num_heads);
  set_int("encoder-layers", c.num_encoder_layers);
  set_int("decoder-layers", c.num_decoder_layers);
  set_int("ffn-dim", c.ffn_dim);
  set_int("window-size", c.window_size);
  set_int("remap-heads", c.remap_heads);
  set_int("num-sentences", c.num_sentences);
  set_int("max-source-length", c.max_source_length);
  set_int("max-target-length", c.max_target_length);
  if (has("dropout")) c.dropout = real("dropout");
  if (has("causal-window")) c.train_causal_window = boolean("causal-window");
  if (has("use-pi")) c.use_pi = boolean("use-pi");
  if (has("use-rmp")) c.use_rmp = boolean("use-rmp");
  if (has("use-opt")) c.use_opt = boolean("use-opt");
  c.validate();
  return c;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  if (has("epochs")) t.epochs = integer("epochs");
  if (has("batch-size")) t.batch_size = integer("batch-size");
  if (has("lr")) t.learning_rate = real("lr");
  if (has("clip")) t.clip_norm = real("clip");
  if (has("target-loss")) t.target_loss = real("target-loss");
  if (has("seed")) t.seed = seed();
  t.validate();
  return t;
}

BeamConfig RunConfig::beam() const {
  BeamConfig b;
  b.max_steps = str("preset") == "paper" ? 200 : 100;
  if (has("beam-width")) b.beam_width = integer("beam-width");
  if (has("max-steps")) b.max_steps = integer("max-steps");
  if (has("length-penalty")) b.length_penalty = real("length-penalty");
  b.validate();
  return b;
}

std::string RunConfig::snapshot(const std::string& command) const {
  std::ostringstream os;
  os << "# camrw run configuration\n";
  os << "command = " << command << "\n";
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

std::filesystem::path output_directory(const std::string& explicit_dir, const std::string& command) {
  if (!explicit_dir.empty()) return explicit_dir;
  const char* root = std::getenv("CAMRW_OUTPUT_ROOT");
  const std::filesystem::path base = (root != nullptr && *root != '\0') ? root : "runs";
  return base / command;
}

}  // namespace camrw
