#pragma once

// Linear probability models of answer correctness on the three design flags,
// the effect plot, and markdown results tables with per-column highlighting.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfm/errors.hpp"
#include "mmfm/eval.hpp"
#include "mmfm/png.hpp"

namespace mmfm {

/// Rank-deficient design; the message names the collinear columns.
struct SingularDesignError : NumericError {
  SingularDesignError(const std::string& what, std::vector<std::string> cols)
      : NumericError(what), columns(std::move(cols)) {}
  std::vector<std::string> columns;
};

inline constexpr double kCiZ = 1.96;

/// Regressor names: intercept and the three flags, plus all their products
/// when `interactions` (8 columns, saturated over the 8 cells).
std::vector<std::string> regressor_names(bool interactions);

struct DesignMatrix {
  std::vector<std::string> columns;
  std::size_t rows = 0;
  std::vector<double> x;  // rows × columns, row-major, entries 0/1
  std::vector<double> y;  // correct bits

  double at(std::size_t r, std::size_t c) const { return x[r * columns.size() + c]; }
  /// Rows follow the records sorted by (item_id, run_id, flags, correct), so
  /// every fit is independent of input order.
  static DesignMatrix from_records(std::span<const EvalRecord> records, bool interactions = false);
};

struct OlsFit {
  std::vector<double> beta;
  std::vector<double> se;  // classical, σ² = RSS / (n − p)
  double r2 = 0;           // 1 when the response has no variance and is fit exactly
  double sigma2 = 0;
  std::size_t n = 0;
};

/// Normal equations XᵀX β = Xᵀy solved by an LDLᵀ factorization. Throws
/// SingularDesignError on rank deficiency and InputError when n ≤ p.
OlsFit ols(const DesignMatrix& design);

struct Coefficient {
  std::string name;
  double beta = 0, se = 0, ci_low = 0, ci_high = 0;
};

struct EffectEstimate {
  std::string benchmark;
  std::vector<Coefficient> coefficients;  // intercept first
  std::size_t n = 0;
  double r2 = 0;

  const Coefficient& at(std::string_view name) const;
  nlohmann::json to_json() const;
};

/// One model per benchmark, benchmarks in name order.
std::vector<EffectEstimate> fit_effects(std::span<const EvalRecord> records, bool interactions = false);
EffectEstimate fit_benchmark(const std::string& benchmark, std::span<const EvalRecord> records, bool interactions = false);

/// effects.json document: estimator metadata plus every estimate.
nlohmann::json effects_document(std::span<const EffectEstimate> estimates, bool interactions);

struct PlotPanel {
  std::string benchmark;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // plot area
  int zero_y = 0;
  double half_range = 0;  // the y axis spans [−half_range, half_range]
  std::vector<std::string> labels;
  std::vector<int> point_x, point_y;
};

struct EffectPlot {
  Canvas canvas{1, 1};
  std::vector<PlotPanel> panels;
};

inline constexpr Rgb kPointColor{200, 30, 30};

/// One panel per estimate: point ± CI whisker for every non-intercept
/// regressor over a dashed zero line. Throws InputError when empty.
EffectPlot render_effect_plot(std::span<const EffectEstimate> estimates);

struct TableRow {
  std::vector<std::string> labels;
  std::vector<std::optional<double>> values;  // nullopt renders as "-"
};

struct TableLayout {
  std::vector<std::string> label_headers;
  std::vector<std::string> value_headers;
  std::vector<int> decimals;  // per value column
};

struct ResultsTable {
  std::string markdown;
  std::vector<std::vector<bool>> highlighted;  // rows × value columns
};

/// Bold per-column maxima, compared at the displayed precision; ties are all
/// bold. Throws InputError without rows and DimensionError on ragged rows.
ResultsTable render_results_table(const TableLayout& layout, std::span<const TableRow> rows);

/// Rows for every run in the records (S/L, A/B, pretrain Yes/No, baseline
/// first), columns accuracy per benchmark plus toy-pope F1.
ResultsTable results_table_from_records(std::span<const EvalRecord> records);

struct AnalysisPaths {
  std::filesystem::path effects_json, effects_png, results_table;
};

/// Writes effects.json, effects.png and results_table.md under out_dir.
AnalysisPaths analyze(std::span<const EvalRecord> records, const std::filesystem::path& out_dir, bool interactions = false);

}  // namespace mmfm
