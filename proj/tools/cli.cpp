#include "cli.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "flat/error.hpp"

namespace flat::cli {

namespace fs = std::filesystem;

namespace {

const char* const kCommands[] = {"gen-data", "pretrain", "finetune", "evaluate"};

template <typename T>
T field(const json& config, const std::string& section, const std::string& key) {
  try {
    return config.at(section).at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + section + "." + key + "' is missing or has the wrong type");
  }
}

std::uint64_t seed_of(const json& config) {
  try {
    return config.at("seed").get<std::uint64_t>();
  } catch (const json::exception&) {
    throw ConfigError("config field 'seed' must be a non-negative integer");
  }
}

fs::path out_dir(const json& config) {
  const auto out = config.at("out").get<std::string>();
  if (out.empty()) throw ConfigError("config field 'out' must not be empty");
  return out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text << '\n';
}

bool same_json_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    if (a.is_number_float()) return true;
    if (b.is_number_float()) return false;
    return !(a.is_number_unsigned() && b.is_number_integer() && b.get<std::int64_t>() < 0);
  }
  return a.type() == b.type();
}

void merge_into(json& base, const json& overrides, const std::string& prefix) {
  if (!overrides.is_object()) {
    throw ConfigError("config section '" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be a JSON object");
  }
  for (const auto& [key, value] : overrides.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config field '" + path + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_into(slot, value, path);
    } else if (!same_json_kind(slot, value)) {
      throw ConfigError("config field '" + path + "' expects a " + std::string(slot.type_name()) + ", got " +
                        value.dump());
    } else if (slot.is_number_float()) {
      slot = value.get<double>();
    } else {
      slot = value;
    }
  }
}

void collect_paths(const json& node, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [key, value] : node.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      collect_paths(value, path, out);
    } else {
      out.push_back(path);
    }
  }
}

json::json_pointer pointer_for(const std::string& path) {
  std::string p;
  std::size_t start = 0;
  while (start <= path.size()) {
    const auto dot = path.find('.', start);
    p += "/" + path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return json::json_pointer(p);
}

template <typename T>
bool parse_number(const std::string& text, T& value) {
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  return ec == std::errc{} && ptr == end;
}

json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

class MetricsSink {
 public:
  MetricsSink(std::ostream& out, const fs::path& file) : out_(out), file_(file) {
    if (!file_) throw DataError("cannot write " + file.string());
  }
  void line(const std::string& text) {
    out_ << text << '\n' << std::flush;
    file_ << text << '\n' << std::flush;
  }

 private:
  std::ostream& out_;
  std::ofstream file_;
};

void check_geometry(const FlatModel& model, const ImageDataset& dataset) {
  const auto& enc = model.config().encoder;
  if (enc.input_channels != dataset.channels() || enc.input_size != dataset.height() ||
      dataset.height() != dataset.width()) {
    throw DataError("checkpoint expects " + std::to_string(enc.input_channels) + "x" + std::to_string(enc.input_size) +
                    "x" + std::to_string(enc.input_size) + " images, dataset has " +
                    std::to_string(dataset.channels()) + "x" + std::to_string(dataset.height()) + "x" +
                    std::to_string(dataset.width()));
  }
}

std::string required_path(const json& config, const std::string& section, const std::string& key) {
  auto path = field<std::string>(config, section, key);
  if (path.empty()) throw ConfigError(section + "." + key + " is required (path to a checkpoint directory)");
  return path;
}

}  // namespace

json default_config() {
  const SyntheticShapesConfig synth;
  const ModelConfig model;
  const PretrainConfig pre;
  const FinetuneConfig ft;
  const EpisodeProtocol ep;
  return {
      {"seed", std::uint64_t{0}},
      {"out", "out"},
      {"data",
       {{"source", "folder"},
        {"root", "data"},
        {"image_size", synth.image_size},
        {"synthetic_seed", std::uint64_t{0}},
        {"n_base_classes", synth.n_base_classes},
        {"n_novel_classes", synth.n_novel_classes},
        {"examples_per_class", synth.examples_per_class},
        {"test_fraction", synth.test_fraction}}},
      {"model",
       {{"stages", static_cast<int>(model.encoder.stages.size())},
        {"filters", model.encoder.stages.front().filters},
        {"kernel", model.encoder.stages.front().kernel},
        {"stride", model.encoder.stages.front().stride},
        {"decoder_hidden", model.decoder_hidden},
        {"scale_init", model.scale_init}}},
      {"pretrain",
       {{"epochs", pre.epochs},
        {"batch_size", pre.batch_size},
        {"base_lr", pre.base_lr},
        {"decay_rate", pre.decay_rate},
        {"decay_every", pre.decay_every},
        {"momentum", pre.momentum},
        {"weight_decay", pre.weight_decay},
        {"lambda", pre.lambda},
        {"transform_magnitude", pre.transform_magnitude},
        {"mode", to_string(pre.mode)},
        {"crop_pad", pre.crop_pad},
        {"flip_prob", pre.flip_prob},
        {"resume", ""}}},
      {"finetune",
       {{"checkpoint", ""},
        {"epochs", ft.epochs},
        {"batch_size", ft.batch_size},
        {"lr", ft.lr},
        {"momentum", ft.momentum},
        {"weight_decay", ft.weight_decay},
        {"setting", to_string(ft.setting)},
        {"freeze_encoder", ft.freeze_encoder},
        {"init", to_string(ft.init)},
        {"k_shot", ft.k_shot},
        {"crop_pad", ft.crop_pad},
        {"flip_prob", ft.flip_prob}}},
      {"eval",
       {{"checkpoint", ""},
        {"protocol", "episodic"},
        {"setting", ""},
        {"n_way", ep.n_way},
        {"k_shot", ep.k_shot},
        {"n_query", ep.n_query},
        {"n_runs", ep.n_runs},
        {"finetune_epochs", ep.finetune_epochs},
        {"batch_size", ep.batch_size},
        {"lr", ep.lr},
        {"momentum", ep.momentum},
        {"weight_decay", ep.weight_decay},
        {"freeze_encoder", ep.freeze_encoder},
        {"crop_pad", ep.crop_pad},
        {"flip_prob", ep.flip_prob}}},
  };
}

json merge_config(json base, const json& overrides) {
  merge_into(base, overrides, "");
  return base;
}

std::vector<std::string> field_paths(const json& config) {
  std::vector<std::string> out;
  collect_paths(config, "", out);
  return out;
}

json parse_field_value(const json& defaults, const std::string& path, const std::string& text) {
  const auto ptr = pointer_for(path);
  if (!defaults.contains(ptr)) throw ConfigError("unknown config field '" + path + "'");
  const json& slot = defaults.at(ptr);
  auto bad = [&](const char* kind) {
    return ConfigError("--" + path + " expects " + kind + ", got '" + text + "'");
  };
  if (slot.is_boolean()) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw bad("true or false");
  }
  if (slot.is_number_unsigned()) {
    std::uint64_t v = 0;
    if (!parse_number(text, v)) throw bad("a non-negative integer");
    return v;
  }
  if (slot.is_number_integer()) {
    std::int64_t v = 0;
    if (!parse_number(text, v)) throw bad("an integer");
    return v;
  }
  if (slot.is_number_float()) {
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size()) throw bad("a number");
    return v;
  }
  return text;
}

SyntheticShapesConfig synthetic_config(const json& config) {
  SyntheticShapesConfig c;
  c.n_base_classes = field<int>(config, "data", "n_base_classes");
  c.n_novel_classes = field<int>(config, "data", "n_novel_classes");
  c.examples_per_class = field<int>(config, "data", "examples_per_class");
  c.image_size = field<int>(config, "data", "image_size");
  c.test_fraction = field<double>(config, "data", "test_fraction");
  c.seed = field<std::uint64_t>(config, "data", "synthetic_seed");
  c.validate();
  return c;
}

PretrainConfig pretrain_config(const json& config) {
  PretrainConfig c;
  c.epochs = field<int>(config, "pretrain", "epochs");
  c.batch_size = field<int>(config, "pretrain", "batch_size");
  c.base_lr = field<double>(config, "pretrain", "base_lr");
  c.decay_rate = field<double>(config, "pretrain", "decay_rate");
  c.decay_every = field<int>(config, "pretrain", "decay_every");
  c.momentum = field<double>(config, "pretrain", "momentum");
  c.weight_decay = field<double>(config, "pretrain", "weight_decay");
  c.lambda = field<double>(config, "pretrain", "lambda");
  c.transform_magnitude = field<double>(config, "pretrain", "transform_magnitude");
  c.mode = parse_pretrain_mode(field<std::string>(config, "pretrain", "mode"));
  c.crop_pad = field<int>(config, "pretrain", "crop_pad");
  c.flip_prob = field<double>(config, "pretrain", "flip_prob");
  c.seed = seed_of(config);
  c.validate();
  return c;
}

FinetuneConfig finetune_config(const json& config) {
  FinetuneConfig c;
  c.epochs = field<int>(config, "finetune", "epochs");
  c.batch_size = field<int>(config, "finetune", "batch_size");
  c.lr = field<double>(config, "finetune", "lr");
  c.momentum = field<double>(config, "finetune", "momentum");
  c.weight_decay = field<double>(config, "finetune", "weight_decay");
  c.setting = parse_setting(field<std::string>(config, "finetune", "setting"));
  c.freeze_encoder = field<bool>(config, "finetune", "freeze_encoder");
  c.init = parse_head_init(field<std::string>(config, "finetune", "init"));
  c.k_shot = field<int>(config, "finetune", "k_shot");
  c.crop_pad = field<int>(config, "finetune", "crop_pad");
  c.flip_prob = field<double>(config, "finetune", "flip_prob");
  c.seed = seed_of(config);
  c.validate();
  return c;
}

EpisodeProtocol episode_protocol(const json& config) {
  EpisodeProtocol p;
  p.n_way = field<int>(config, "eval", "n_way");
  p.k_shot = field<int>(config, "eval", "k_shot");
  p.n_query = field<int>(config, "eval", "n_query");
  p.n_runs = field<int>(config, "eval", "n_runs");
  p.finetune_epochs = field<int>(config, "eval", "finetune_epochs");
  p.batch_size = field<int>(config, "eval", "batch_size");
  p.lr = field<double>(config, "eval", "lr");
  p.momentum = field<double>(config, "eval", "momentum");
  p.weight_decay = field<double>(config, "eval", "weight_decay");
  p.freeze_encoder = field<bool>(config, "eval", "freeze_encoder");
  p.crop_pad = field<int>(config, "eval", "crop_pad");
  p.flip_prob = field<double>(config, "eval", "flip_prob");
  p.seed = seed_of(config);
  p.validate();
  return p;
}

ModelConfig model_config(const json& config, int channels, int image_size, int n_base) {
  ModelConfig m;
  const int stages = field<int>(config, "model", "stages");
  if (stages < 1) throw ConfigError("model.stages must be >= 1");
  const EncoderStage stage{field<int>(config, "model", "filters"), field<int>(config, "model", "kernel"),
                           field<int>(config, "model", "stride")};
  m.encoder.input_channels = channels;
  m.encoder.input_size = image_size;
  m.encoder.stages.assign(static_cast<std::size_t>(stages), stage);
  m.encoder.feature_dim = stage.filters;
  m.n_base_classes = n_base;
  m.decoder_hidden = field<int>(config, "model", "decoder_hidden");
  m.scale_init = field<double>(config, "model", "scale_init");
  m.validate();
  return m;
}

ImageDataset load_dataset(const json& config) {
  const auto source = field<std::string>(config, "data", "source");
  if (source == "synthetic") return generate_synthetic(synthetic_config(config));
  if (source != "folder") throw ConfigError("data.source must be folder or synthetic, got '" + source + "'");
  const fs::path root = field<std::string>(config, "data", "root");
  const int size = field<int>(config, "data", "image_size");
  if (size < 8) throw ConfigError("data.image_size must be >= 8");
  return load_image_folder(root, SplitSpec::read(root / "split_spec.json"), size);
}

void cmd_gen_data(const json& config, std::ostream& out, std::ostream& log) {
  SyntheticShapesConfig synth = synthetic_config(config);
  synth.seed = seed_of(config);
  const fs::path root = out_dir(config);
  const ImageDataset dataset = generate_synthetic(synth);
  write_image_folder(dataset, root, synth.test_fraction);

  json summary{{"out", root.string()},
               {"images", dataset.size()},
               {"base_classes", dataset.n_base()},
               {"novel_classes", dataset.n_novel()},
               {"seed", synth.seed}};
  const int n_way = std::min(5, dataset.n_novel());
  const int n_query = std::min(15, synth.examples_per_class - 1);
  try {
    summary["nn_1shot_accuracy"] = nearest_neighbor_one_shot_accuracy(dataset, n_way, n_query, 200, synth.seed);
    summary["nn_1shot_chance"] = 1.0 / n_way;
    summary["nn_1shot_n_way"] = n_way;
  } catch (const DataError& e) {
    log << "note: nearest-neighbour check skipped: " << e.what() << '\n';
  }
  out << summary.dump() << '\n';
}

void cmd_pretrain(const json& config, std::ostream& out, std::ostream& log) {
  const PretrainConfig pre = pretrain_config(config);
  const std::uint64_t seed = seed_of(config);
  const ImageDataset dataset = load_dataset(config);
  if (dataset.height() != dataset.width()) throw DataError("pretraining needs square images");
  const ModelConfig mcfg = model_config(config, dataset.channels(), dataset.height(), dataset.n_base());
  const fs::path root = out_dir(config);
  const auto resume_path = field<std::string>(config, "pretrain", "resume");

  std::optional<FlatModel> model;
  std::optional<TrainState> state;
  if (!resume_path.empty()) {
    LoadedCheckpoint loaded = load_checkpoint(resume_path, mcfg);
    state = restore_train_state(loaded.meta, loaded.model);
    model.emplace(std::move(loaded.model));
    log << "resuming from " << resume_path << " at epoch " << state->epoch << '\n';
  } else {
    model.emplace(mcfg, seed);
  }

  ensure_dir(root);
  write_text(root / "config.json", config.dump(2));
  MetricsSink sink(out, root / "metrics.jsonl");
  const std::string run_config = config.dump();
  auto save = [&](const FlatModel& m, const TrainState& s, const char* name) {
    CheckpointMeta meta;
    meta.seed = seed;
    meta.run_config_json = run_config;
    store_train_state(s, m, meta);
    save_checkpoint(m, root / name, meta);
  };
  bool saved_best = false;
  PretrainResult result = pretrain(*model, dataset, pre, std::move(state),
                                   [&](const FlatModel& m, const TrainState& s, const EpochMetrics& metrics) {
                                     sink.line(metrics.to_json());
                                     save(m, s, "last");
                                     if (s.best_epoch == metrics.epoch) {
                                       save(m, s, "best");
                                       saved_best = true;
                                     }
                                   });
  save(*model, result.state, "final");
  if (!saved_best && !fs::exists(root / "best")) save(*model, result.state, "best");
  log << "wrote " << (root / "final").string() << '\n';
}

void cmd_finetune(const json& config, std::ostream& out, std::ostream& log) {
  const FinetuneConfig ft = finetune_config(config);
  const std::uint64_t seed = seed_of(config);
  const std::string ckpt = required_path(config, "finetune", "checkpoint");
  const ImageDataset dataset = load_dataset(config);
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  FlatModel& model = loaded.model;
  check_geometry(model, dataset);
  if (ft.setting != Setting::transfer && model.n_base() != dataset.n_base()) {
    throw DataError("checkpoint has " + std::to_string(model.n_base()) + " base classes, dataset has " +
                    std::to_string(dataset.n_base()));
  }

  const fs::path root = out_dir(config);
  ensure_dir(root);
  write_text(root / "config.json", config.dump(2));
  MetricsSink sink(out, root / "metrics.jsonl");

  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 4u};
  Rng rng(seq);
  const KShotDraw draw = sample_k_shot(dataset, ft.k_shot, rng);
  finetune(model, dataset, draw.support, ft, [&](const EpochMetrics& m) { sink.line(m.to_json()); });

  const EvalReport report = evaluate_setting(model, dataset, ft.setting, ft.k_shot);
  sink.line(json{{"stage", "finetune_eval"}, {"setting", report.setting}, {"k_shot", report.k_shot}, {"test_acc", report.mean}}
                .dump());

  CheckpointMeta meta;
  meta.seed = seed;
  meta.epoch = ft.epochs;
  meta.run_config_json = config.dump();
  meta.state_json = json{{"stage", "finetune"},
                         {"setting", to_string(ft.setting)},
                         {"init", to_string(ft.init)},
                         {"k_shot", ft.k_shot},
                         {"support", draw.support}}
                        .dump();
  save_checkpoint(model, root / "checkpoint", meta);
  log << "wrote " << (root / "checkpoint").string() << '\n';
}

void cmd_evaluate(const json& config, std::ostream& out, std::ostream& log) {
  const auto protocol = field<std::string>(config, "eval", "protocol");
  if (protocol != "episodic" && protocol != "setting") {
    throw ConfigError("eval.protocol must be episodic or setting, got '" + protocol + "'");
  }
  const auto setting_name = field<std::string>(config, "eval", "setting");
  std::optional<Setting> setting;
  std::optional<EpisodeProtocol> episodic;
  if (protocol == "setting") {
    if (setting_name.empty()) throw ConfigError("eval.protocol=setting requires --eval.setting");
    setting = parse_setting(setting_name);
  } else {
    episodic = episode_protocol(config);
  }
  const std::string ckpt = required_path(config, "eval", "checkpoint");
  const ImageDataset dataset = load_dataset(config);
  const LoadedCheckpoint loaded = load_checkpoint(ckpt);
  check_geometry(loaded.model, dataset);

  EvalReport report;
  if (episodic) {
    report = run_episodes(loaded.model, dataset, *episodic);
  } else {
    int k_shot = field<int>(config, "eval", "k_shot");
    const json state = json::parse(loaded.meta.state_json);
    if (state.contains("k_shot")) k_shot = state.at("k_shot").get<int>();
    report = evaluate_setting(loaded.model, dataset, *setting, k_shot);
  }
  const fs::path root = out_dir(config);
  ensure_dir(root);
  write_text(root / "config.json", config.dump(2));
  write_text(root / "report.json", report.to_json());
  out << report.to_json() << '\n';
  log << "mean accuracy " << report.mean << " +/- " << report.ci95 << " over " << report.n_runs << " run(s)\n";
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& log) {
  const json defaults = default_config();
  CLI::App app{"Few-shot learning with transformation-decoding regularisation"};
  app.require_subcommand(1);

  struct Sub {
    CLI::App* app = nullptr;
    std::string config_path;
    std::string seed;
    std::string out;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
  };
  std::map<std::string, Sub> subs;
  for (const char* name : kCommands) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, std::string("run ") + name);
    s.app->add_option("--config", s.config_path, "JSON config file (fields override the defaults)");
    s.app->add_option("--seed", s.seed, "seed for every random stream");
    s.app->add_option("--out", s.out, "output directory");
    for (const std::string& path : field_paths(defaults)) {
      if (path == "seed" || path == "out") continue;
      s.options[path] =
          s.app->add_option("--" + path, s.values[path], "default " + defaults.at(pointer_for(path)).dump());
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, log);
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, log);
    return kOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, log);
    return kConfigError;
  }

  std::string command;
  for (auto& [name, s] : subs) {
    if (s.app->parsed()) command = name;
  }
  Sub& s = subs.at(command);

  try {
    json config = defaults;
    if (!s.config_path.empty()) config = merge_config(config, read_config_file(s.config_path));
    if (!s.seed.empty()) config["seed"] = parse_field_value(defaults, "seed", s.seed);
    if (!s.out.empty()) config["out"] = s.out;
    for (const auto& [path, option] : s.options) {
      if (option->count() > 0) config[pointer_for(path)] = parse_field_value(defaults, path, s.values.at(path));
    }
    log << json{{"command", command}, {"resolved_config", config}}.dump() << '\n';

    if (command == "gen-data") cmd_gen_data(config, out, log);
    if (command == "pretrain") cmd_pretrain(config, out, log);
    if (command == "finetune") cmd_finetune(config, out, log);
    if (command == "evaluate") cmd_evaluate(config, out, log);
    return kOk;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const StateError& e) {
    log << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    log << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const LoadError& e) {
    log << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const IndexError& e) {
    log << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    log << "runtime error: " << e.what() << '\n';
    return kRuntimeError;
  }
}

}  // namespace flat::cli
