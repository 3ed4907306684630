#include "mmfm/analysis.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <tuple>

namespace mmfm {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kFlagNames[3] = {"skip_pretrain", "dino_like", "large_lm"};
constexpr double kPivotTolerance = 1e-10;

std::array<int, 3> flag_bits(const DesignFlags& f) { return {f.skip_pretrain, f.dino_like, f.large_lm}; }

// Subsets of the three flags in regressor order: {}, {0}, {1}, {2}, {0,1}, {0,2}, {1,2}, {0,1,2}.
const std::vector<std::vector<int>>& column_terms(bool interactions) {
  static const std::vector<std::vector<int>> main = {{}, {0}, {1}, {2}};
  static const std::vector<std::vector<int>> full = {{}, {0}, {1}, {2}, {0, 1}, {0, 2}, {1, 2}, {0, 1, 2}};
  return interactions ? full : main;
}

/// LDLᵀ of a symmetric p×p matrix. Returns the index of the first pivot that
/// falls below tolerance relative to its diagonal entry, or p on success.
struct Ldl {
  std::size_t p = 0;
  std::vector<double> l, d;

  std::size_t factor(const std::vector<double>& g, std::size_t size) {
    p = size;
    l.assign(p * p, 0.0);
    d.assign(p, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
      double dj = g[j * p + j];
      for (std::size_t k = 0; k < j; ++k) dj -= l[j * p + k] * l[j * p + k] * d[k];
      if (!(dj > kPivotTolerance * std::max(1.0, g[j * p + j]))) return j;
      d[j] = dj;
      l[j * p + j] = 1.0;
      for (std::size_t i = j + 1; i < p; ++i) {
        double v = g[i * p + j];
        for (std::size_t k = 0; k < j; ++k) v -= l[i * p + k] * l[j * p + k] * d[k];
        l[i * p + j] = v / dj;
      }
    }
    return p;
  }

  /// Solves with the leading `m` × `m` block of the factorization.
  std::vector<double> solve(std::vector<double> b, std::size_t m) const {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < i; ++k) b[i] -= l[i * p + k] * b[k];
    for (std::size_t i = 0; i < m; ++i) b[i] /= d[i];
    for (std::size_t i = m; i-- > 0;)
      for (std::size_t k = i + 1; k < m; ++k) b[i] -= l[k * p + i] * b[k];
    return b;
  }
};

void write_atomic(const fs::path& path, const std::string& bytes) {
  fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  fs::rename(tmp, path);
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace

std::vector<std::string> regressor_names(bool interactions) {
  std::vector<std::string> names;
  for (const auto& term : column_terms(interactions)) {
    if (term.empty()) {
      names.emplace_back("intercept");
      continue;
    }
    std::string n;
    for (int f : term) n += (n.empty() ? "" : ":") + std::string(kFlagNames[f]);
    names.push_back(n);
  }
  return names;
}

DesignMatrix DesignMatrix::from_records(std::span<const EvalRecord> records, bool interactions) {
  std::vector<const EvalRecord*> order;
  order.reserve(records.size());
  for (const auto& r : records) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const EvalRecord* a, const EvalRecord* b) {
    return std::tie(a->item_id, a->run_id, a->flags.skip_pretrain, a->flags.dino_like, a->flags.large_lm, a->correct) <
           std::tie(b->item_id, b->run_id, b->flags.skip_pretrain, b->flags.dino_like, b->flags.large_lm, b->correct);
  });
  DesignMatrix m;
  m.columns = regressor_names(interactions);
  m.rows = order.size();
  const auto& terms = column_terms(interactions);
  m.x.reserve(m.rows * terms.size());
  m.y.reserve(m.rows);
  for (const EvalRecord* r : order) {
    const auto bits = flag_bits(r->flags);
    for (int b : bits)
      if (b != 0 && b != 1) throw InputError("record " + r->item_id + " of run " + r->run_id + " has a non-binary design flag");
    if (r->correct != 0 && r->correct != 1) throw InputError("record " + r->item_id + " has a non-binary correct bit");
    for (const auto& term : terms) {
      int v = 1;
      for (int f : term) v *= bits[static_cast<std::size_t>(f)];
      m.x.push_back(v);
    }
    m.y.push_back(r->correct);
  }
  return m;
}

OlsFit ols(const DesignMatrix& dm) {
  const std::size_t p = dm.columns.size(), n = dm.rows;
  if (n <= p)
    throw InputError("linear model needs more observations (" + std::to_string(n) + ") than regressors (" +
                     std::to_string(p) + ")");
  std::vector<double> g(p * p, 0.0), xty(p, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < p; ++i) {
      const double xi = dm.at(r, i);
      if (xi == 0) continue;
      xty[i] += xi * dm.y[r];
      for (std::size_t j = 0; j < p; ++j) g[i * p + j] += xi * dm.at(r, j);
    }
  }
  Ldl f;
  const std::size_t bad = f.factor(g, p);
  if (bad < p) {
    // Column `bad` lies in the span of the columns before it; name the ones it depends on.
    std::vector<double> rhs(p, 0.0);
    for (std::size_t i = 0; i < bad; ++i) rhs[i] = g[i * p + bad];
    const auto c = f.solve(rhs, bad);
    std::vector<std::string> cols;
    for (std::size_t i = 0; i < bad; ++i)
      if (std::abs(c[i]) > 1e-8) cols.push_back(dm.columns[i]);
    cols.push_back(dm.columns[bad]);
    std::string msg = "design matrix is rank deficient: ";
    if (cols.size() == 1) {
      msg += "column " + cols[0] + " is identically zero";
    } else {
      msg += "columns ";
      for (std::size_t i = 0; i < cols.size(); ++i) msg += (i ? ", " : "") + cols[i];
      msg += " are collinear";
    }
    throw SingularDesignError(msg, cols);
  }
  OlsFit fit;
  fit.n = n;
  fit.beta = f.solve(xty, p);
  double rss = 0, ysum = 0;
  for (std::size_t r = 0; r < n; ++r) {
    double yhat = 0;
    for (std::size_t j = 0; j < p; ++j) yhat += dm.at(r, j) * fit.beta[j];
    const double e = dm.y[r] - yhat;
    rss += e * e;
    ysum += dm.y[r];
  }
  const double ybar = ysum / static_cast<double>(n);
  double tss = 0;
  for (std::size_t r = 0; r < n; ++r) tss += (dm.y[r] - ybar) * (dm.y[r] - ybar);
  fit.sigma2 = rss / static_cast<double>(n - p);
  fit.r2 = tss > 0 ? 1.0 - rss / tss : (rss == 0 ? 1.0 : 0.0);
  fit.se.resize(p);
  for (std::size_t j = 0; j < p; ++j) {
    std::vector<double> e(p, 0.0);
    e[j] = 1.0;
    fit.se[j] = std::sqrt(fit.sigma2 * f.solve(e, p)[j]);
  }
  return fit;
}

const Coefficient& EffectEstimate::at(std::string_view name) const {
  for (const auto& c : coefficients)
    if (c.name == name) return c;
  throw InputError("no coefficient named " + std::string(name));
}

json EffectEstimate::to_json() const {
  json cs = json::array();
  for (const auto& c : coefficients)
    cs.push_back({{"name", c.name}, {"beta", c.beta}, {"se", c.se}, {"ci_low", c.ci_low}, {"ci_high", c.ci_high}});
  return {{"benchmark", benchmark}, {"n", n}, {"r2", r2}, {"coefficients", cs}};
}

EffectEstimate fit_benchmark(const std::string& benchmark, std::span<const EvalRecord> records, bool interactions) {
  const auto dm = DesignMatrix::from_records(records, interactions);
  OlsFit fit;
  try {
    fit = ols(dm);
  } catch (const SingularDesignError& e) {
    throw SingularDesignError(benchmark + ": " + e.what(), e.columns);
  }
  EffectEstimate est;
  est.benchmark = benchmark;
  est.n = fit.n;
  est.r2 = fit.r2;
  for (std::size_t j = 0; j < dm.columns.size(); ++j) {
    const double b = fit.beta[j], se = fit.se[j];
    est.coefficients.push_back({dm.columns[j], b, se, b - kCiZ * se, b + kCiZ * se});
  }
  return est;
}

std::vector<EffectEstimate> fit_effects(std::span<const EvalRecord> records, bool interactions) {
  if (records.empty()) throw InputError("no evaluation records to analyze");
  std::map<std::string, std::vector<EvalRecord>> by_bench;
  for (const auto& r : records) by_bench[r.benchmark].push_back(r);
  std::vector<EffectEstimate> out;
  for (const auto& [name, rs] : by_bench) out.push_back(fit_benchmark(name, rs, interactions));
  return out;
}

json effects_document(std::span<const EffectEstimate> estimates, bool interactions) {
  json list = json::array();
  for (const auto& e : estimates) list.push_back(e.to_json());
  return {{"estimator",
           {{"model", "linear probability (OLS)"},
            {"solver", "normal equations, LDL^T"},
            {"standard_errors", "classical homoskedastic, sigma^2 = RSS/(n-p)"},
            {"ci", "beta +/- 1.96 se"},
            {"interactions", interactions},
            {"baseline", {{"lm", "S"}, {"vision", "A"}, {"pretrain", true}}},
            {"fitted_probabilities_clipped", false}}},
          {"regressors", regressor_names(interactions)},
          {"benchmarks", list}};
}

// ---------------------------------------------------------------------------
// Effect plot

namespace {

constexpr int kPanelW = 260, kPanelH = 240;
constexpr int kLeft = 52, kRight = 12, kTop = 30, kBottom = 40;
constexpr Rgb kBlack{0, 0, 0}, kGrey{150, 150, 150}, kFrame{90, 90, 90};

std::string short_label(const std::string& name) {
  if (name == "skip_pretrain") return "SKIP";
  if (name == "dino_like") return "DINO";
  if (name == "large_lm") return "LARGE";
  std::string s;
  for (std::size_t i = 0; i < name.size(); ++i)
    if (i == 0 || name[i - 1] == ':') s += static_cast<char>(std::toupper(static_cast<unsigned char>(name[i])));
  return s;
}

std::string signed_fixed(double v) {
  if (v == 0) return "0";
  return (v > 0 ? "+" : "") + fixed(v, 2);
}

}  // namespace

EffectPlot render_effect_plot(std::span<const EffectEstimate> estimates) {
  if (estimates.empty()) throw InputError("effect plot needs at least one estimate");
  const int n = static_cast<int>(estimates.size());
  const int cols = std::min(n, 4), rows = (n + cols - 1) / cols;
  EffectPlot plot;
  plot.canvas = Canvas(cols * kPanelW, rows * kPanelH);
  Canvas& cv = plot.canvas;
  for (int e = 0; e < n; ++e) {
    const EffectEstimate& est = estimates[static_cast<std::size_t>(e)];
    const int px = (e % cols) * kPanelW, py = (e / cols) * kPanelH;
    PlotPanel panel;
    panel.benchmark = est.benchmark;
    panel.x0 = px + kLeft;
    panel.x1 = px + kPanelW - kRight;
    panel.y0 = py + kTop;
    panel.y1 = py + kPanelH - kBottom;
    const int half = (panel.y1 - panel.y0) / 2;
    panel.zero_y = panel.y0 + half;

    std::vector<const Coefficient*> effects;
    for (const auto& c : est.coefficients)
      if (c.name != "intercept") effects.push_back(&c);
    double m = 0.05;
    for (const auto* c : effects) m = std::max({m, std::abs(c->ci_low), std::abs(c->ci_high), std::abs(c->beta)});
    m = std::ceil(m / 0.05 - 1e-9) * 0.05;
    panel.half_range = m;
    const auto to_y = [&](double v) { return panel.zero_y - static_cast<int>(std::lround(v / m * half)); };

    cv.text(px + (kPanelW - Canvas::text_width(est.benchmark)) / 2, py + 10, est.benchmark, kBlack);
    cv.hline(panel.x0, panel.x1, panel.y0, kFrame);
    cv.hline(panel.x0, panel.x1, panel.y1, kFrame);
    cv.vline(panel.x0, panel.y0, panel.y1, kFrame);
    cv.vline(panel.x1, panel.y0, panel.y1, kFrame);
    cv.dashed_hline(panel.x0 + 1, panel.x1 - 1, panel.zero_y, kGrey);
    for (double t : {m, 0.0, -m}) {
      const std::string s = signed_fixed(t);
      const int y = to_y(t);
      cv.hline(panel.x0 - 3, panel.x0, y, kFrame);
      cv.text(panel.x0 - 5 - Canvas::text_width(s), y - 3, s, kBlack);
    }

    const int k = static_cast<int>(effects.size());
    for (int i = 0; i < k; ++i) {
      const Coefficient& c = *effects[static_cast<std::size_t>(i)];
      const int x = panel.x0 + (2 * i + 1) * (panel.x1 - panel.x0) / (2 * k);
      const int y = to_y(c.beta), ylo = to_y(c.ci_low), yhi = to_y(c.ci_high);
      cv.vline(x, std::min(ylo, yhi), std::max(ylo, yhi), kPointColor);
      cv.hline(x - 4, x + 4, ylo, kPointColor);
      cv.hline(x - 4, x + 4, yhi, kPointColor);
      cv.fill_rect(x - 2, y - 2, x + 3, y + 3, kPointColor);
      const std::string label = short_label(c.name);
      cv.text(x - Canvas::text_width(label) / 2, panel.y1 + 8, label, kBlack);
      panel.labels.push_back(label);
      panel.point_x.push_back(x);
      panel.point_y.push_back(y);
    }
    plot.panels.push_back(std::move(panel));
  }
  return plot;
}

// ---------------------------------------------------------------------------
// Results tables

ResultsTable render_results_table(const TableLayout& layout, std::span<const TableRow> rows) {
  if (rows.empty()) throw InputError("results table needs at least one row");
  const std::size_t nl = layout.label_headers.size(), nv = layout.value_headers.size();
  if (layout.decimals.size() != nv) throw DimensionError("results table: decimals per value column do not match headers");
  for (const auto& r : rows)
    if (r.labels.size() != nl || r.values.size() != nv) throw DimensionError("results table: ragged row");

  const auto key = [&](double v, std::size_t c) { return std::llround(v * std::pow(10.0, layout.decimals[c])); };
  ResultsTable t;
  t.highlighted.assign(rows.size(), std::vector<bool>(nv, false));
  for (std::size_t c = 0; c < nv; ++c) {
    std::optional<long long> best;
    for (const auto& r : rows)
      if (r.values[c]) best = std::max(best.value_or(key(*r.values[c], c)), key(*r.values[c], c));
    if (!best) continue;
    for (std::size_t i = 0; i < rows.size(); ++i)
      t.highlighted[i][c] = rows[i].values[c] && key(*rows[i].values[c], c) == *best;
  }

  std::string md = "|";
  for (const auto& h : layout.label_headers) md += " " + h + " |";
  for (const auto& h : layout.value_headers) md += " " + h + " |";
  md += "\n|";
  for (std::size_t i = 0; i < nl; ++i) md += "---|";
  for (std::size_t i = 0; i < nv; ++i) md += "---:|";
  md += "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    md += "|";
    for (const auto& l : rows[i].labels) md += " " + l + " |";
    for (std::size_t c = 0; c < nv; ++c) {
      const auto& v = rows[i].values[c];
      if (!v) {
        md += " - |";
        continue;
      }
      const std::string s = fixed(*v, layout.decimals[c]);
      md += t.highlighted[i][c] ? " **" + s + "** |" : " " + s + " |";
    }
    md += "\n";
  }
  t.markdown = std::move(md);
  return t;
}

ResultsTable results_table_from_records(std::span<const EvalRecord> records) {
  if (records.empty()) throw InputError("no evaluation records to tabulate");
  std::map<std::string, DesignFlags> runs;
  std::map<std::pair<std::string, std::string>, std::vector<EvalRecord>> cells;
  std::vector<std::string> benchmarks;
  for (const auto& r : records) {
    runs[r.run_id] = r.flags;
    cells[{r.run_id, r.benchmark}].push_back(r);
    if (std::find(benchmarks.begin(), benchmarks.end(), r.benchmark) == benchmarks.end()) benchmarks.push_back(r.benchmark);
  }
  std::sort(benchmarks.begin(), benchmarks.end());

  TableLayout layout;
  layout.label_headers = {"Run", "Language", "Vision", "Pretrain"};
  for (const auto& b : benchmarks) {
    layout.value_headers.push_back(b + " Acc.");
    layout.decimals.push_back(3);
    if (b == "toy-pope") {
      layout.value_headers.push_back(b + " F1");
      layout.decimals.push_back(3);
    }
  }

  std::vector<std::string> order;
  for (const auto& [id, f] : runs) order.push_back(id);
  std::sort(order.begin(), order.end(), [&](const std::string& a, const std::string& b) {
    const auto& fa = runs[a];
    const auto& fb = runs[b];
    return std::tie(fa.large_lm, fa.dino_like, fa.skip_pretrain, a) < std::tie(fb.large_lm, fb.dino_like, fb.skip_pretrain, b);
  });

  std::vector<TableRow> rows;
  for (const auto& id : order) {
    const DesignFlags& f = runs[id];
    TableRow row;
    row.labels = {id, f.large_lm ? "L" : "S", f.dino_like ? "B" : "A", f.skip_pretrain ? "No" : "Yes"};
    for (const auto& b : benchmarks) {
      const auto it = cells.find({id, b});
      if (it == cells.end()) {
        row.values.emplace_back();
        if (b == "toy-pope") row.values.emplace_back();
        continue;
      }
      const MetricSummary s = summarize(b, it->second);
      row.values.push_back(s.accuracy);
      if (b == "toy-pope") row.values.push_back(s.f1);
    }
    rows.push_back(std::move(row));
  }
  return render_results_table(layout, rows);
}

AnalysisPaths analyze(std::span<const EvalRecord> records, const fs::path& out_dir, bool interactions) {
  const auto estimates = fit_effects(records, interactions);
  AnalysisPaths paths{out_dir / "effects.json", out_dir / "effects.png", out_dir / "results_table.md"};
  write_atomic(paths.effects_json, effects_document(estimates, interactions).dump(2) + "\n");
  const auto png = render_effect_plot(estimates).canvas.encode_png();
  write_atomic(paths.effects_png, std::string(png.begin(), png.end()));
  write_atomic(paths.results_table, results_table_from_records(records).markdown);
  return paths;
}

}  // namespace mmfm
