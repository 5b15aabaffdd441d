#pragma once

// Flat "key = value" run configuration shared by every subcommand. Keys are
// the kebab-case flag names. Precedence: built-in defaults, then a config
// file, then explicit flags.

#include "camrw/data.hpp"
#include "camrw/eval.hpp"
#include "camrw/model.hpp"
#include "camrw/trainer.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace camrw {

using Settings = std::map<std::string, std::string>;

struct OptionSpec {
  std::string key;
  std::string default_value;  // "" means unset
  std::string help;
};

// Model, training and decoding keys understood by model-building commands.
const std::vector<OptionSpec>& model_options();
const std::vector<OptionSpec>& train_options();
const std::vector<OptionSpec>& beam_options();

class RunConfig {
 public:
  RunConfig() = default;
  explicit RunConfig(Settings values) : values_(std::move(values)) {}

  // Defaults < file < flags. Keys in `file` or `flags` that no spec names
  // throw std::invalid_argument; "command" is accepted and ignored.
  static RunConfig resolve(const std::vector<OptionSpec>& specs, const Settings& file, const Settings& flags);
  static Settings read_file(const std::filesystem::path& path);

  const Settings& values() const { return values_; }
  bool has(const std::string& key) const;
  std::string str(const std::string& key) const;
  int integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;
  std::uint64_t seed() const;
  std::vector<int> int_list(const std::string& key) const;
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // Preset first, then explicit model keys on top.
  ModelConfig model(int vocab_size) const;
  TrainConfig train() const;
  BeamConfig beam() const;

  // Sorted "key = value" lines, loadable with read_file.
  std::string snapshot(const std::string& command) const;

 private:
  Settings values_;
};

// Directory for a run: the explicit path when given, else
// $CAMRW_OUTPUT_ROOT (or "runs") / <command>.
std::filesystem::path output_directory(const std::string& explicit_dir, const std::string& command);

}  // namespace camrw
