#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "flat/data.hpp"
#include "flat/evaluation.hpp"
#include "flat/model.hpp"
#include "flat/training.hpp"
#include "json.hpp"

namespace flat::cli {

using json = nlohmann::json;

enum ExitCode : int { kOk = 0, kConfigError = 1, kDataError = 2, kRuntimeError = 3 };

/// Every configurable field with its default. Sections: data, model,
/// pretrain, finetune, eval; plus top-level seed and out.
json default_config();

/// Recursively overlays `overrides` on `base`. Unknown keys and values
/// whose JSON type differs from the default raise ConfigError naming the
/// field.
json merge_config(json base, const json& overrides);

/// Parses a flag value for the field at dotted `path` using the type of
/// its default, e.g. "pretrain.epochs" -> integer.
json parse_field_value(const json& defaults, const std::string& path, const std::string& text);

/// Dotted paths of every leaf field, e.g. "pretrain.lambda".
std::vector<std::string> field_paths(const json& config);

// Typed views of a resolved config. Each throws ConfigError naming the
// offending field.
SyntheticShapesConfig synthetic_config(const json& config);
PretrainConfig pretrain_config(const json& config);
FinetuneConfig finetune_config(const json& config);
EpisodeProtocol episode_protocol(const json& config);
/// Architecture for a dataset with the given geometry and base classes.
ModelConfig model_config(const json& config, int channels, int image_size, int n_base);

/// Dataset named by the data section: a PNG folder or an in-memory
/// synthetic set.
ImageDataset load_dataset(const json& config);

void cmd_gen_data(const json& config, std::ostream& out, std::ostream& log);
void cmd_pretrain(const json& config, std::ostream& out, std::ostream& log);
void cmd_finetune(const json& config, std::ostream& out, std::ostream& log);
void cmd_evaluate(const json& config, std::ostream& out, std::ostream& log);

/// Full command-line entry point; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& log);

}  // namespace flat::cli
