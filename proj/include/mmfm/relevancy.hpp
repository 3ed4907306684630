#pragma once

// Gradient-weighted attention relevancy for the decoder: per layer
// Ā = mean_h (∇A ⊙ A)⁺ (row-normalized by default), R ← R + Ā·R from R = I,
// layers consumed in forward order. The target row of R over the image
// positions is the patch heatmap.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfm/data.hpp"
#include "mmfm/model.hpp"
#include "mmfm/png.hpp"

namespace mmfm {

/// Dense row-major N×N matrix in double precision.
struct SquareMatrix {
  int n = 0;
  std::vector<double> data;

  static SquareMatrix identity(int n);
  static SquareMatrix zeros(int n);
  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * n + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * n + c]; }
};

struct AttentionTrace {
  int layers = 0;
  int heads = 0;
  int n = 0;             // sequence length, image tokens + text tokens
  int image_tokens = 0;  // positions [0, image_tokens) are image patches
  int grid = 0;          // g, with g² == image_tokens
  std::vector<double> attention;  // layers × heads × n × n
  std::vector<double> gradient;   // same shape
  int target_row = 0;             // sequence position whose logit is the target
  int target_token = 0;           // token id whose logit was differentiated
  std::vector<int> generated;     // greedy continuation the target was drawn from

  std::size_t offset(int layer, int head) const {
    return (static_cast<std::size_t>(layer) * heads + head) * static_cast<std::size_t>(n) * n;
  }
  double a(int layer, int head, int i, int j) const { return attention[offset(layer, head) + static_cast<std::size_t>(i) * n + j]; }
  double g(int layer, int head, int i, int j) const { return gradient[offset(layer, head) + static_cast<std::size_t>(i) * n + j]; }
  /// Throws DimensionError unless both arrays are layers × heads × n × n.
  void validate() const;
};

/// Greedily continues `prompt` (at most max_new tokens; a terminating <eoa>
/// counts as a generated token), then differentiates the logit of generated
/// token `position` at the row that predicted it. Throws InputError when
/// `position` is outside the generated range.
AttentionTrace capture_trace(const MultimodalModel& model, const Image& image, std::span<const int> prompt, int position,
                             int max_new = 8);

struct RelevancyMap {
  SquareMatrix r;
  int target_row = 0;
  int image_tokens = 0;
  int grid = 0;
  bool normalized = true;
};

/// Ā for one layer: head mean of the positive part of ∇A ⊙ A, each row
/// divided by its sum when `normalize` (all-zero rows stay zero).
SquareMatrix layer_relevance(const AttentionTrace& trace, int layer, bool normalize = true);

/// Throws NumericError if any Ā entry is NaN.
RelevancyMap propagate(const AttentionTrace& trace, bool normalize = true);

struct Heatmap {
  int grid = 0;
  std::vector<double> values;  // g×g, row-major, min-max normalized to [0, 1]
  bool degenerate = false;     // constant target row: uniform 0.5
  double at(int row, int col) const { return values[static_cast<std::size_t>(row) * grid + col]; }
};

/// Target row over the image positions, reshaped to g×g and min-max scaled.
Heatmap image_heatmap(const RelevancyMap& map);

/// Heatmap upscaled to the image size and blended 50/50 with the image.
Canvas render_overlay(const Heatmap& heatmap, const Image& image, int scale = 8);

struct AttentionStats {
  double image_mass = 0;  // share of the target row's relevancy on image positions
  double entropy = 0;     // of the image slice normalized to sum 1, nats
  nlohmann::json to_json() const;
};
AttentionStats attention_stats(const RelevancyMap& map);
/// Entropy of a non-negative g×g slice normalized to sum 1 (0 for an all-zero slice).
double slice_entropy(std::span<const double> slice);

struct CompareInput {
  std::string label;  // usually the run id
  const MultimodalModel* model = nullptr;
  int vocab_size = 0;
};

/// Traces the item through every run (one panel each) and writes
/// <out_dir>/relevancy.png and relevancy.json. Throws ConfigError when the
/// runs use different tokenizers.
nlohmann::json relevancy_report(std::span<const CompareInput> runs, const Sample& item, int position,
                                const std::filesystem::path& out_dir, bool normalize = true);

/// Traces the same item through two runs and writes
/// <out_dir>/relevancy.png (side by side) and relevancy.json. Throws
/// ConfigError when the runs use different tokenizers.
nlohmann::json compare_runs(const CompareInput& a, const CompareInput& b, const Sample& item, int position,
                            const std::filesystem::path& out_dir, bool normalize = true);

/// Optional offline format: "MMRT", u16 version, u32 header length, JSON
/// header (layers, heads, n, image_tokens, grid, target_row, target_token,
/// generated), then attention and gradient as little-endian f64.
void save_trace(const std::filesystem::path& path, const AttentionTrace& trace);
AttentionTrace load_trace(const std::filesystem::path& path);

}  // namespace mmfm
