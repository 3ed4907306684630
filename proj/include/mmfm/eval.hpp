#pragma once

// Benchmark evaluation: greedy answers, exact match after normalization,
// one correctness record per item for the effect analysis.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfm/data.hpp"
#include "mmfm/train.hpp"

namespace mmfm {

inline constexpr int kMaxAnswerTokens = 8;

struct EvalRecord {
  std::string run_id;
  std::string benchmark;
  std::string item_id;
  std::string predicted;  // normalized
  std::string gold;       // normalized
  int correct = 0;
  DesignFlags flags;

  nlohmann::json to_json() const;
  static EvalRecord from_json(const nlohmann::json& j);
};

struct MetricSummary {
  std::string benchmark;
  double accuracy = 0;
  std::size_t n_items = 0;
  // toy-pope only, "yes" is the positive class
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;

  nlohmann::json to_json() const;
};

/// Lowercase, punctuation stripped, whitespace collapsed. When the question
/// lists lettered options "(a) x (b) y", an answer "(b)" or "b)" maps to "y".
std::string normalize_answer(std::string_view text, std::string_view question = {});

struct BinaryMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0;
};
/// Confusion counts with "yes" positive; any prediction other than "yes"
/// counts as a negative. Throws InputError when a gold answer is not yes/no.
BinaryMetrics f1_from_records(std::span<const EvalRecord> records);

/// Accuracy and, for toy-pope, precision/recall/F1. Throws InputError on
/// an empty record set.
MetricSummary summarize(const std::string& benchmark, std::span<const EvalRecord> records);

/// Produces the raw answer text for one item.
using Answerer = std::function<std::string(std::size_t index, const Sample& item)>;

struct EvalOutput {
  std::vector<EvalRecord> records;
  MetricSummary summary;
};

/// Scores `items` in order with `answer`. When `out_dir` is given, records
/// stream to <out_dir>/<benchmark>.jsonl as they are produced and the
/// summary goes to <benchmark>.summary.json.
EvalOutput evaluate_with(const std::string& run_id, const DesignFlags& flags, const std::string& benchmark,
                         std::span<const Sample> items, const Answerer& answer,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Greedy decoding (at most kMaxAnswerTokens, stopping at <eoa>) with the
/// checkpoint's model. Throws ConfigError when the tokenizer's vocabulary
/// differs from the checkpoint's.
EvalOutput evaluate(const Checkpoint& checkpoint, const Tokenizer& tokenizer, const std::string& benchmark,
                    std::span<const Sample> items, const std::optional<std::filesystem::path>& out_dir = std::nullopt);

std::vector<EvalRecord> load_records(const std::filesystem::path& jsonl);

}  // namespace mmfm
