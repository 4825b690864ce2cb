#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "lrlab/dataset.hpp"
#include "lrlab/net.hpp"
#include "lrlab/trainer.hpp"

namespace lrlab {

struct OutputConfig {
  std::string dir;  // empty: resolved by the CLI
};

// A parsed run configuration. Unknown keys are rejected; every default is
// filled in so materialize_config() records exactly what ran.
struct RunConfig {
  NetworkSpec model;
  TrainConfig train;
  std::optional<SwitchPolicy> switch_policy;
  DatasetSpec data;
  OutputConfig output;
};

// Affine layers without an explicit "low_rank" flag are eligible for
// factorization except the first and the last affine layer.
void apply_default_eligibility(NetworkSpec& spec, const std::vector<bool>& explicit_flags);

// Throws ConfigError naming the offending key. Relative dataset paths are
// resolved against base_dir when it is non-empty.
RunConfig parse_config(std::string_view json_text, const std::string& base_dir = "");
RunConfig load_config(const std::string& path);

// Pretty-printed JSON with all defaults resolved; parse_config() of the
// result yields the same configuration.
std::string materialize_config(const RunConfig& config);

// SwitchPolicy used when a config has no "switch" section: unfactorized
// training for the first sixth of the steps.
SwitchPolicy default_switch_policy(std::size_t total_steps);

}  // namespace lrlab
