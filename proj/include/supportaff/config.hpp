#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "supportaff/data.hpp"
#include "supportaff/harness.hpp"
#include "supportaff/learning.hpp"

namespace supportaff {

/// Every tunable of a run. Keys are flat dotted names in four namespaces:
/// env.*, physics.*, train.*, collect.* and eval.*.
struct RunConfig {
  EnvConfig env;
  TrainConfig train;
  CollectConfig collect;
  LoopConfig loop;  // eval.max_rounds, eval.top_k, eval.n_dirs, eval.adapt
  int eval_episodes = 100;
  std::vector<std::uint64_t> eval_seeds{1, 2, 3};

  /// Copies the shared fields (physics into env, train into loop and collect).
  void sync();
  void validate() const;
};

/// Sets one key; throws InvalidArgument for unknown keys or malformed values.
void apply_setting(RunConfig& config, std::string_view key, std::string_view value);

/// Lines of `key = value`; blank lines and lines starting with # are ignored.
void apply_config_text(RunConfig& config, std::string_view text);
void apply_config_file(RunConfig& config, const std::string& path);  // IoError when unreadable

std::vector<std::string> config_keys();

/// Sorted `key=value` lines of every key with doubles at full precision.
std::string canonical_config(const RunConfig& config);
std::uint64_t config_hash(const RunConfig& config);

}  // namespace supportaff
