#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace inmars::cli {

using json = nlohmann::json;

enum ExitCode { kOk = 0, kConfigError = 2, kMissingPrerequisite = 3, kRuntimeError = 4 };

/// Built-in defaults for every documented key.
json default_config();

/// Applies `a.b.c=value`; the value is parsed as JSON when possible, else taken as a string.
void apply_override(json& config, const std::string& assignment);

/// Reads a config file (or a run manifest, whose embedded config is used), merges it over
/// the defaults and applies the overrides. Unknown keys are config errors.
json load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

/// Entry point; returns the process exit code.
int run(int argc, char** argv);

}  // namespace inmars::cli
