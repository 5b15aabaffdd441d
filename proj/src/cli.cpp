#include "camrw/cli.hpp"

#include "camrw/checkpoint.hpp"
#include "camrw/config.hpp"
#include "camrw/errors.hpp"
#include "camrw/eval.hpp"
#include "camrw/tokens.hpp"
#include "camrw/viz.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace camrw {

namespace {

namespace fs = std::filesystem;

struct Context {
  RunConfig cfg;
  fs::path out_dir;
  std::ostream& out;
};

struct Command {
  std::string name;
  std::string description;
  std::vector<OptionSpec> specs;
  std::function<void(Context&)> run;
};

std::vector<OptionSpec> join(std::initializer_list<std::vector<OptionSpec>> parts) {
  std::vector<OptionSpec> all;
  for (const auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  return all;
}

std::vector<OptionSpec> without(std::vector<OptionSpec> specs, const std::string& key) {
  specs.erase(std::remove_if(specs.begin(), specs.end(), [&](const OptionSpec& s) { return s.key == key; }),
              specs.end());
  return specs;
}

std::string require(const RunConfig& cfg, const std::string& key) {
  if (!cfg.has(key)) throw std::invalid_argument("missing required option --" + key);
  return cfg.str(key);
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f.flush()) throw IoError("cannot write " + path.string());
}

void write_snapshot(const Context& ctx, const std::string& command) {
  write_file(ctx.out_dir / "run.cfg", ctx.cfg.snapshot(command));
  write_file(ctx.out_dir / "seed.txt", ctx.cfg.str("seed") + "\n");
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

Vocabulary corpus_vocabulary(const std::vector<GenerationExample>& corpus) {
  std::vector<Tokens> texts;
  for (const auto& ex : corpus) {
    texts.push_back(source_tokens(ex));
    texts.push_back(ex.target);
  }
  return Vocabulary::build(texts);
}

std::vector<GenerationExample> limited(std::vector<GenerationExample> v, const RunConfig& cfg) {
  const int limit = cfg.has("limit") ? cfg.integer("limit") : 0;
  if (limit < 0) throw std::invalid_argument("option limit must be >= 0");
  if (limit > 0 && static_cast<std::size_t>(limit) < v.size()) v.resize(static_cast<std::size_t>(limit));
  return v;
}

std::vector<EncodedExample> encode_all(const std::vector<GenerationExample>& corpus, const Vocabulary& vocab) {
  std::vector<EncodedExample> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus) out.push_back(encode(ex, vocab));
  return out;
}

AblationSetting parse_setting(const std::string& text) {
  AblationSetting s{false, false, false};
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "PI") {
      s.use_pi = true;
    } else if (part == "RMP") {
      s.use_rmp = true;
    } else if (part == "OPT") {
      s.use_opt = true;
    } else {
      throw std::invalid_argument("ablation setting '" + text + "': parts are PI, RMP and OPT joined by '+'");
    }
  }
  s.validate();
  return s;
}

// ---- subcommands ----

void cmd_synth(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  SyntheticSpec spec = cfg.has("spec") ? SyntheticSpec::load(cfg.str("spec")) : SyntheticSpec{};
  if (cfg.has("seed")) spec.seed = cfg.seed();
  if (cfg.has("confound-strength")) spec.confound_strength = cfg.real("confound-strength");
  if (cfg.has("alternate-cue-rate")) spec.alternate_cue_rate = cfg.real("alternate-cue-rate");
  if (cfg.has("num-train")) spec.num_train = cfg.integer("num-train");
  if (cfg.has("num-test")) spec.num_test = cfg.integer("num-test");
  spec.validate();
  ctx.cfg.set("seed", std::to_string(spec.seed));
  const SyntheticCorpus corpus = generate_synthetic(spec);
  make_dir(ctx.out_dir);
  write_corpus(ctx.out_dir / "train.jsonl", corpus.train);
  write_corpus(ctx.out_dir / "valid.jsonl", corpus.valid);
  write_corpus(ctx.out_dir / "test.jsonl", corpus.test);
  Vocabulary::build({corpus.lexicon.all_tokens()}).save(ctx.out_dir / "vocab.txt");
  spec.save(ctx.out_dir / "spec.cfg");
  write_snapshot(ctx, "synth");
  ctx.out << "wrote " << corpus.train.size() << " train, " << corpus.valid.size() << " valid, " << corpus.test.size()
          << " test examples to " << ctx.out_dir.string() << "\n";
}

void cmd_train(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const auto corpus = read_corpus(require(cfg, "train"));
  const Vocabulary vocab = cfg.has("vocab") ? Vocabulary::load(cfg.str("vocab")) : corpus_vocabulary(corpus);
  const ModelConfig mc = cfg.model(vocab.size());
  const TrainConfig tc = cfg.train();
  std::vector<EncodedExample> valid;
  if (cfg.has("valid")) valid = encode_all(read_corpus(cfg.str("valid")), vocab);
  const auto data = encode_all(corpus, vocab);
  make_dir(ctx.out_dir);

  Seq2SeqModel model(mc, cfg.seed());
  std::ostringstream log;
  log << "epoch\ttrain_loss\tvalid_loss\tsteps\n";
  train(model, data, tc, [&](const EpochStats& s) {
    char line[160];
    const double vl = valid.empty() ? 0.0 : model.loss(valid);
    std::snprintf(line, sizeof line, "%d\t%.6f\t%s\t%lld\n", s.epoch, s.mean_loss,
                  valid.empty() ? "-" : std::to_string(vl).c_str(), static_cast<long long>(s.steps));
    log << line;
    ctx.out << "epoch " << line;
  });
  save_checkpoint(model, ctx.out_dir / "model.ckpt");
  vocab.save(ctx.out_dir / "vocab.txt");
  write_file(ctx.out_dir / "train_log.tsv", log.str());
  write_snapshot(ctx, "train");
  ctx.out << "checkpoint " << (ctx.out_dir / "model.ckpt").string() << " config " << hex(mc.hash()) << "\n";
}

void cmd_generate(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const auto model = load_checkpoint(require(cfg, "checkpoint"));
  const Vocabulary vocab = Vocabulary::load(require(cfg, "vocab"));
  const auto corpus = limited(read_corpus(require(cfg, "input")), cfg);
  const BeamConfig beam = cfg.beam();
  make_dir(ctx.out_dir);
  const Generator gen = model_generator("model", *model, vocab, beam);
  std::ostringstream os;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    nlohmann::ordered_json j;
    j["index"] = i;
    j["output"] = detokenize(gen.generate(corpus[i]));
    os << j.dump() << "\n";
  }
  write_file(ctx.out_dir / "generations.jsonl", os.str());
  write_snapshot(ctx, "generate");
  ctx.out << "decoded " << corpus.size() << " examples\n";
}

void cmd_evaluate(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const auto cam = load_checkpoint(require(cfg, "cam"));
  const auto baseline = cfg.has("baseline") ? load_checkpoint(cfg.str("baseline")) : nullptr;
  const Vocabulary vocab = Vocabulary::load(require(cfg, "vocab"));
  const auto corpus = limited(read_corpus(require(cfg, "test")), cfg);
  const BeamConfig beam = cfg.beam();
  ProtocolConfig pc;
  pc.protocol = parse_protocol(cfg.str("protocol"));
  pc.seed = cfg.seed();
  pc.coverage_floor = cfg.real("coverage-floor");
  pc.config_hash = hex(cam->config().hash());
  if (baseline) pc.config_hash += "/" + hex(baseline->config().hash());
  make_dir(ctx.out_dir);
  const Generator g_cam = model_generator("cam", *cam, vocab, beam);
  const Generator g_base = model_generator("baseline", baseline ? *baseline : *cam, vocab, beam);
  const ProtocolReport rep = run_protocol(g_cam, g_base, corpus, pc, &vocab);
  write_file(ctx.out_dir / "report.json", rep.to_json());
  write_file(ctx.out_dir / "summary.txt", rep.summary());
  write_snapshot(ctx, "evaluate");
  ctx.out << rep.summary();
}

ExperimentSetup experiment_setup(const RunConfig& cfg, int vocab_size) {
  ExperimentSetup s;
  s.base = cfg.model(vocab_size);
  s.train = cfg.train();
  s.beam = cfg.beam();
  s.model_seed = cfg.seed();
  return s;
}

struct SweepInputs {
  Vocabulary vocab;
  std::vector<EncodedExample> train;
  std::vector<GenerationExample> test;
};

SweepInputs sweep_inputs(const RunConfig& cfg) {
  SweepInputs in;
  const auto corpus = read_corpus(require(cfg, "train"));
  in.vocab = cfg.has("vocab") ? Vocabulary::load(cfg.str("vocab")) : corpus_vocabulary(corpus);
  in.train = encode_all(corpus, in.vocab);
  in.test = limited(read_corpus(require(cfg, "test")), cfg);
  return in;
}

void print_row(std::ostream& out, const ScoreRow& r) {
  char line[200];
  std::snprintf(line, sizeof line, "row %-12s k=%d loss %.4f R-1 %.4f R-2 %.4f R-L %.4f\n", r.name.c_str(), r.num_cams,
                r.final_loss, r.scores.rouge.rouge1_f, r.scores.rouge.rouge2_f, r.scores.rouge.rougeL_f);
  out << line << std::flush;
}

void cmd_ablate(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  std::vector<AblationSetting> settings;
  std::stringstream ss(cfg.str("settings"));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) settings.push_back(parse_setting(item));
  }
  const SweepInputs in = sweep_inputs(cfg);
  const ExperimentSetup setup = experiment_setup(cfg, in.vocab.size());
  make_dir(ctx.out_dir);
  const ScoreTable t =
      run_ablation(settings, setup, in.train, in.test, in.vocab, [&](const ScoreRow& r) { print_row(ctx.out, r); });
  write_file(ctx.out_dir / "ablation.json", t.to_json());
  write_file(ctx.out_dir / "ablation.txt", t.summary());
  write_snapshot(ctx, "ablate");
  ctx.out << t.summary();
}

void cmd_sweep(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const std::vector<int> ks = cfg.int_list("cams");
  RunConfig model_cfg = cfg;
  model_cfg.set("cams", "");
  const SweepInputs in = sweep_inputs(cfg);
  const ExperimentSetup setup = experiment_setup(model_cfg, in.vocab.size());
  make_dir(ctx.out_dir);
  const ScoreTable t =
      run_placement_sweep(ks, setup, in.train, in.test, in.vocab, [&](const ScoreRow& r) { print_row(ctx.out, r); });
  write_file(ctx.out_dir / "placement.json", t.to_json());
  write_file(ctx.out_dir / "placement.txt", t.summary());
  write_snapshot(ctx, "sweep-placement");
  ctx.out << t.summary();
}

void cmd_perturb(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const fs::path input = require(cfg, "input");
  const auto corpus = read_corpus(input);
  ProtocolConfig pc;
  pc.protocol = Protocol::reordered;
  pc.seed = cfg.seed();
  const auto perturbed = protocol_examples(corpus, pc);
  make_dir(ctx.out_dir);
  const fs::path target = ctx.out_dir / "reordered.jsonl";
  std::error_code ec;
  if (fs::exists(target) && fs::equivalent(target, input, ec)) {
    throw std::invalid_argument("perturb: output would overwrite the input corpus");
  }
  write_corpus(target, perturbed);
  write_snapshot(ctx, "perturb");
  const auto single = std::count_if(corpus.begin(), corpus.end(),
                                    [](const GenerationExample& e) { return e.num_references() < 2; });
  ctx.out << "reordered " << corpus.size() - static_cast<std::size_t>(single) << " examples";
  if (single > 0) ctx.out << "; warning: " << single << " single-reference example(s) left unchanged";
  ctx.out << "\n";
}

void cmd_visualize(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const auto model = load_checkpoint(require(cfg, "checkpoint"));
  const Vocabulary vocab = Vocabulary::load(require(cfg, "vocab"));
  const auto corpus = read_corpus(require(cfg, "input"));
  const int index = cfg.integer("index");
  if (index < 0 || static_cast<std::size_t>(index) >= corpus.size()) {
    throw std::invalid_argument("option index out of range for the input corpus");
  }
  const EncodedExample ex = encode(corpus[static_cast<std::size_t>(index)], vocab);
  std::vector<int> generated{kBosId};
  for (int t : model->beam_search(ex.source, cfg.beam())) generated.push_back(t);

  std::vector<int> positions;
  if (cfg.has("positions")) {
    positions = cfg.int_list("positions");
  } else if (cfg.has("token")) {
    // Steps that emitted the requested token.
    for (std::size_t p = 0; p + 1 < generated.size(); ++p) {
      if (vocab.token(generated[p + 1]) == cfg.str("token")) positions.push_back(static_cast<int>(p));
    }
    if (positions.empty()) throw std::invalid_argument("token '" + cfg.str("token") + "' was not generated");
  } else {
    for (std::size_t p = 0; p < generated.size(); ++p) positions.push_back(static_cast<int>(p));
  }
  CaptureOptions co;
  co.layer = cfg.integer("layer");
  co.head = cfg.integer("head");
  const auto records = capture(*model, vocab, ex.source, generated, positions, co);
  make_dir(ctx.out_dir);
  RenderOptions ro;
  ro.cell_width = cfg.integer("cell-width");
  const auto files = render(records, ctx.out_dir / "attention", ro);
  write_snapshot(ctx, "visualize");
  ctx.out << "generated: " << detokenize(vocab.decode(generated)) << "\n"
          << "wrote " << files.image.string() << " and " << files.data.string() << "\n";
}

std::vector<Command> commands() {
  const OptionSpec seed{"seed", "1", "random seed"};
  const OptionSpec out{"out", "", "output directory (default $CAMRW_OUTPUT_ROOT/<command>)"};
  const OptionSpec limit{"limit", "0", "score only the first N examples, 0 for all"};
  const auto models = model_options();
  const auto training = train_options();
  const auto beams = beam_options();
  return {
      {"synth",
       "generate the synthetic confounded corpus",
       {{"spec", "", "synthetic spec file"},
        {"seed", "", "overrides the spec seed"},
        out,
        {"confound-strength", "", "probability that relation follows position in train/valid"},
        {"alternate-cue-rate", "", "share of references using alternate cue words"},
        {"num-train", "", "training examples"},
        {"num-test", "", "shifted test examples"}},
       cmd_synth},
      {"train",
       "train a model and write a checkpoint",
       join({{{"train", "", "training corpus (jsonl)"},
              {"valid", "", "validation corpus"},
              {"vocab", "", "vocabulary file, built from the training corpus when absent"},
              seed,
              out},
             models,
             training}),
       cmd_train},
      {"generate",
       "decode a corpus with a checkpoint",
       join({{{"checkpoint", "", "model checkpoint"},
              {"vocab", "", "vocabulary file"},
              {"input", "", "corpus to decode"},
              limit,
              seed,
              out},
             beams}),
       cmd_generate},
      {"evaluate",
       "score a model against a baseline under a robustness protocol",
       join({{{"cam", "", "checkpoint of the model under test"},
              {"baseline", "", "baseline checkpoint (the model itself when absent)"},
              {"vocab", "", "vocabulary file"},
              {"test", "", "test corpus"},
              {"protocol", "standard", "standard, reordered or migrated"},
              {"coverage-floor", "0.9", "warn when vocabulary coverage falls below this"},
              limit,
              seed,
              out},
             beams}),
       cmd_evaluate},
      {"ablate",
       "train the baseline and one model per PI/RMP/OPT setting",
       join({{{"train", "", "training corpus"},
              {"test", "", "evaluation corpus"},
              {"vocab", "", "vocabulary file"},
              {"settings", "PI,PI+RMP,PI+RMP+OPT", "comma-separated settings"},
              limit,
              seed,
              out},
             models,
             training,
             beams}),
       cmd_ablate},
      {"sweep-placement",
       "train one model per module count k",
       join({{{"train", "", "training corpus"},
              {"test", "", "evaluation corpus"},
              {"vocab", "", "vocabulary file"},
              {"cams", "1,2,4", "comma-separated module counts"},
              limit,
              seed,
              out},
             without(models, "cams"),
             training,
             beams}),
       cmd_sweep},
      {"perturb",
       "write a reference-reordered copy of a corpus",
       {{"input", "", "corpus to perturb"}, seed, out},
       cmd_perturb},
      {"visualize",
       "render cross-attention for tokens of one decoded example",
       join({{{"checkpoint", "", "model checkpoint"},
              {"vocab", "", "vocabulary file"},
              {"input", "", "corpus holding the example"},
              {"index", "0", "example index"},
              {"positions", "", "decoder positions (0 = begin marker), comma-separated"},
              {"token", "", "capture the steps that emitted this token"},
              {"layer", "-1", "decoder layer, -1 for the last"},
              {"head", "-1", "attention head, -1 for the mean"},
              {"cell-width", "8", "pixels per source token"},
              seed,
              out},
             beams}),
       cmd_visualize},
  };
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"causal intervention seq2seq lab"};
  app.require_subcommand(1);
  const auto cmds = commands();
  struct Bound {
    CLI::App* sub;
    std::map<std::string, std::string> storage;
    std::map<std::string, CLI::Option*> options;
    std::string config;
  };
  std::vector<Bound> bound(cmds.size());
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    Bound& b = bound[i];
    b.sub = app.add_subcommand(cmds[i].name, cmds[i].description);
    b.sub->add_option("--config", b.config, "key = value file; explicit flags win");
    for (const auto& spec : cmds[i].specs) {
      std::string help = spec.help;
      if (!spec.default_value.empty()) help += " [" + spec.default_value + "]";
      b.options[spec.key] = b.sub->add_option("--" + spec.key, b.storage[spec.key], help);
    }
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  for (std::size_t i = 0; i < cmds.size(); ++i) {
    Bound& b = bound[i];
    if (!b.sub->parsed()) continue;
    try {
      Settings flags;
      for (const auto& [key, opt] : b.options) {
        if (opt->count() > 0) flags[key] = b.storage[key];
      }
      const Settings file = b.config.empty() ? Settings{} : RunConfig::read_file(b.config);
      RunConfig cfg = RunConfig::resolve(cmds[i].specs, file, flags);
      Context ctx{cfg, output_directory(cfg.str("out"), cmds[i].name), out};
      cmds[i].run(ctx);
      return kExitOk;
    } catch (const std::invalid_argument& e) {
      err << "error: " << e.what() << "\n";
      return kExitValidation;
    } catch (const MalformedRecordError& e) {
      err << "error: " << e.what() << "\n";
      return kExitValidation;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kExitRuntime;
    }
  }
  return kExitValidation;
}

}  // namespace camrw
