#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sm3/eval.hpp"
#include "sm3/synthdata.hpp"
#include "sm3/train.hpp"

namespace sm3 {

/// Process exit codes, one per failure class.
enum ExitCode : int {
  kExitOk = 0,
  kExitError = 1,
  kExitValidation = 2,
  kExitIo = 3,
  kExitVersion = 4,
  kExitChecksum = 5,
  kExitFormat = 6,
  kExitNonFinite = 7,
};

int exit_code_for(const std::exception& e);

/// Everything one run needs. Sub-config seeds are derived from `seed`:
/// derive_seed(seed, "data" | "train" | "eval").
struct RunConfig {
  std::uint64_t seed = 0;
  GeneratorConfig generator;
  TrainConfig train;
  EvalConfig eval;
  /// Relative artifact paths resolve against this directory; the
  /// SM3_OUTPUT_ROOT environment variable takes precedence.
  std::string output_root = ".";

  /// Pushes the run seed into every sub-config and checks all fields.
  void resolve();
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Applies "a.b.c=value" to a JSON tree; the value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& tree, const std::string& assignment);

/// Runs one subcommand (args exclude the program name) and returns its exit
/// code. Diagnostics go to `err`, progress to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sm3
