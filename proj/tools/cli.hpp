#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mmfm/config.hpp"
#include "mmfm/train.hpp"

namespace mmfm::cli {

inline constexpr const char* kRunsEnv = "MMFM_RUNS";

/// Settings from the key-value config file; command-line flags override them.
///
///   [paths]   runs, data
///   [seeds]   init, data, order
///   [train]   vocab_size, batch_size, steps_stage1, steps_stage2, lr_stage1,
///             lr_stage2, pretrain_samples, instruct_samples, mix
///   [vision]  steps, batch_size, corpus_size, seed
///   [eval]    n, seed
struct CliConfig {
  std::filesystem::path runs = "runs";
  std::filesystem::path data = "data";
  RunManifest base;
  int vision_steps = 300;
  int vision_batch = 32;
  int vision_corpus = 4000;
  std::uint64_t vision_seed = 17;
  int eval_n = 200;
  std::uint64_t eval_seed = 99;

  /// Precedence for the runs root: --runs flag, then MMFM_RUNS, then the file.
  static CliConfig from_file(const KeyValueFile& kv);
};

/// Entry point; returns the process exit code (0 ok, 1 failure, 2 usage).
int run(int argc, char** argv);

}  // namespace mmfm::cli
