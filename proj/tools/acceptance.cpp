// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned here.
// Exit status is nonzero when any gated criterion fails; the ablation
// direction check is reported but never gates.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "grad_cases.hpp"
#include "mmfm/analysis.hpp"
#include "mmfm/eval.hpp"
#include "mmfm/relevancy.hpp"
#include "mmfm/train.hpp"
#include "mmfm/vision_pretrain.hpp"
#include "ols_oracle.hpp"
#include "relevancy_oracle.hpp"
#include "table1.hpp"

using namespace mmfm;
namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

// Criterion 1
constexpr double kGradRelTol = 1e-4;
constexpr int kGradInstances = 10;
constexpr double kGradSeconds = 60.0;
// Criterion 3
constexpr double kRelevancyTol = 1e-10;
// Criterion 4
constexpr double kOlsTol = 1e-8;
constexpr std::size_t kMonteCarloN = 10000;
constexpr std::uint64_t kMonteCarloSeed = 7;
constexpr double kPlantedSkip = -0.1;
// Criterion 6
constexpr int kOverfitSamples = 64;
constexpr int kOverfitMaxSteps = 2000;
constexpr int kOverfitEvalEvery = 100;
constexpr double kOverfitAccuracy = 0.95;
constexpr double kReferencePope = 0.75;
constexpr double kMajorityBaseline = 0.5;
constexpr int kBenchmarkSize = 200;
constexpr std::uint64_t kBenchmarkSeed = 99;
// Criterion 9
constexpr std::uint64_t kDirectionSeeds[] = {17, 18, 19};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Report {
  int failures = 0;
  void line(int id, const std::string& name, const Outcome& o, bool gated = true) {
    const std::string tag = o.pass ? "PASS" : (gated ? "FAIL" : "WARN");
    if (!o.pass && gated) ++failures;
    std::cout << "[" << tag << "] " << id << " " << name << ": " << o.detail << (gated ? "" : " (reported, not gated)") << std::endl;
  }
};

Outcome guarded(const std::function<Outcome()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, std::string("threw: ") + e.what()};
  }
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::map<std::string, double> worst;
  std::map<std::string, int> count;
  for (int i = 1; i <= kGradInstances; ++i)
    for (auto& c : gradcheck::primitive_cases(static_cast<std::uint64_t>(i) * 7919)) {
      worst[c.op] = std::max(worst[c.op], gradcheck::check(c.build, c.inputs).max_rel_error);
      ++count[c.op];
    }
  const double secs = seconds_since(t0);
  double max_err = 0;
  std::string worst_op;
  bool ok = secs < kGradSeconds;
  for (const auto& [op, e] : worst) {
    ok = ok && e < kGradRelTol && count[op] >= kGradInstances;
    if (e >= max_err) max_err = e, worst_op = op;
  }
  std::ostringstream s;
  s << worst.size() << " primitives x " << kGradInstances << " instances, max rel err " << fmt("%.2e", max_err) << " ("
    << worst_op << ") < " << kGradRelTol << ", " << fmt("%.2f", secs) << " s < " << kGradSeconds << " s";
  return {ok, s.str()};
}

// ---------------------------------------------------------------------------
// Tiny ablation matrix shared by the freeze and determinism checks.

RunManifest tiny_manifest() {
  RunManifest m;
  m.seeds = {5, 5, 5};
  m.hp.batch_size = 4;
  m.hp.steps_stage1 = 5;
  m.hp.steps_stage2 = 10;
  m.pretrain_samples = 64;
  m.instruct_samples = 64;
  return m;
}

void tiny_vision_caches(const fs::path& root) {
  for (VisionVariant v : {VisionVariant::A, VisionVariant::B}) {
    VisionPretrainOptions o;
    o.steps = 3;
    o.corpus_size = 64;
    o.batch_size = 16;
    o.seed = 5;
    const auto cfg = vision_preset(v);
    const auto r = toy_pretrain_vision(cfg, gen_vision_corpus(o.corpus_size, o.seed), o);
    fs::create_directories(vision_cache_path(root, v).parent_path());
    save_checkpoint(vision_cache_path(root, v), vision_checkpoint(cfg, r, o));
  }
}

/// gen → short train (all 8 cells) → eval 20 items per benchmark → analyze.
std::vector<RunResult> smoke_pipeline(const fs::path& root) {
  fs::remove_all(root);
  tiny_vision_caches(root);
  const auto runs = run_ablation_matrix(root, tiny_manifest());
  std::vector<EvalRecord> all;
  for (const auto& r : runs) {
    const Checkpoint ck = load_run(r.dir);
    const Tokenizer tok(RunManifest::from_json(ck.manifest).vocab_size);
    for (const auto& b : benchmark_names()) {
      const auto out = evaluate(ck, tok, b, gen_benchmark({b, 20, kBenchmarkSeed}), r.dir / "eval");
      all.insert(all.end(), out.records.begin(), out.records.end());
    }
  }
  analyze(all, root / "analysis");
  return runs;
}

bool same_floats(const ParamStore& a, const ParamStore& b, std::string_view prefix) {
  std::vector<std::string> na, nb;
  for (const auto& n : a.names())
    if (n.rfind(prefix, 0) == 0) na.push_back(n);
  for (const auto& n : b.names())
    if (n.rfind(prefix, 0) == 0) nb.push_back(n);
  if (na != nb || na.empty()) return false;
  for (const auto& n : na) {
    const auto& x = a.at(n).data;
    const auto& y = b.at(n).data;
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

Outcome freeze_invariants(const fs::path& root, const std::vector<RunResult>& runs) {
  int cells = 0, violations = 0;
  std::set<std::string> seen;
  std::string first_problem;
  auto fail = [&](const std::string& why) {
    ++violations;
    if (first_problem.empty()) first_problem = why;
  };
  for (const auto& r : runs) {
    const auto m = RunManifest::from_json(json::parse(std::ifstream(r.dir / "manifest.json")));
    seen.insert(to_string(m.lm) + to_string(m.vision) + (m.pretrain_connector ? "pt" : "skip"));
    // the initial state, rebuilt independently of the training code
    MultimodalModel init(m.model_config(), m.seeds.init);
    init.params().assign(load_vision_cache(root, m.vision).params, "vision.");
    const Checkpoint s2 = load_checkpoint(r.dir / "stage2.ckpt");
    if (!same_floats(init.params(), s2.params, "vision.")) fail(r.run_id + ": stage 2 moved the vision tower");
    if (m.pretrain_connector) {
      const Checkpoint s1 = load_checkpoint(r.dir / "stage1.ckpt");
      if (!same_floats(init.params(), s1.params, "vision.")) fail(r.run_id + ": stage 1 moved the vision tower");
      if (!same_floats(init.params(), s1.params, "lm.")) fail(r.run_id + ": stage 1 moved the language tower");
      if (same_floats(init.params(), s1.params, "connector.")) fail(r.run_id + ": stage 1 left the connector untouched");
    } else {
      if (fs::exists(r.dir / "stage1.ckpt")) fail(r.run_id + ": skip-pretrain run has a stage-1 checkpoint");
      const auto audit = json::parse(std::ifstream(r.dir / "manifest.json")).at("audit");
      if (audit.at("stage2_start").at("connector") != init.params().hash("connector."))
        fail(r.run_id + ": stage 2 did not start from the init connector");
    }
    ++cells;
  }
  const bool ok = violations == 0 && cells == 8 && seen.size() == 8;
  return {ok, std::to_string(cells) + " cells (" + std::to_string(seen.size()) + " distinct), " + std::to_string(violations) +
                  " violations" + (first_problem.empty() ? "" : "; first: " + first_problem) +
                  "; stage 1 " + std::to_string(tiny_manifest().hp.steps_stage1) + " steps, stage 2 " +
                  std::to_string(tiny_manifest().hp.steps_stage2) + " steps"};
}

// ---------------------------------------------------------------------------

Outcome relevancy_oracle_check() {
  using namespace relevancy_oracle;
  std::mt19937_64 gen(2024);
  double worst = 0;
  int fixtures = 0;
  bool nonneg = true, identity = true;
  for (int layers = 1; layers <= 3; ++layers)
    for (int n = 1; n <= 6; ++n)
      for (int heads = 1; heads <= 3; ++heads)
        for (bool norm : {true, false}) {
          auto t = random_trace(gen, layers, heads, n);
          worst = std::max(worst, max_diff(propagate(t, norm).r, oracle_product(t, norm)));
          for (int l = 0; l < layers; ++l)
            for (double v : layer_relevance(t, l, norm).data) nonneg = nonneg && v >= 0.0;
          std::fill(t.gradient.begin(), t.gradient.end(), 0.0);
          identity = identity && propagate(t, norm).r.data == SquareMatrix::identity(n).data;
          ++fixtures;
        }
  const bool ok = worst < kRelevancyTol && nonneg && identity;
  return {ok, std::to_string(fixtures) + " fixtures (<=3 layers, <=6 tokens), max |R - oracle| " + fmt("%.2e", worst) + " < " +
                  fmt("%.0e", kRelevancyTol) + "; zero-gradient R == I exactly: " + (identity ? "yes" : "no") +
                  "; all entries of every layer's relevance >= 0: " + (nonneg ? "yes" : "no")};
}

Outcome ols_check() {
  std::mt19937_64 gen(11);
  double worst = 0;
  int fits = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const bool inter = trial % 4 == 0;
    const auto rs = ols_oracle::synthetic(100 + gen() % 2000, gen(), 0.3 + 0.4 * (gen() % 1000) / 1000.0, -0.15, 0.05, 0.1);
    const auto est = fit_benchmark("toy-gqa", rs, inter);
    const auto ref = ols_oracle::solve(rs, inter);
    for (std::size_t j = 0; j < ref.beta.size(); ++j)
      worst = std::max({worst, std::abs(est.coefficients[j].beta - ref.beta[j]), std::abs(est.coefficients[j].se - ref.se[j])});
    ++fits;
  }
  const auto mc = ols_oracle::synthetic(kMonteCarloN, kMonteCarloSeed, 0.6, kPlantedSkip);
  const auto est = fit_benchmark("toy-pope", mc);
  const auto ref = ols_oracle::solve(mc);
  for (std::size_t j = 0; j < ref.beta.size(); ++j) worst = std::max(worst, std::abs(est.coefficients[j].beta - ref.beta[j]));
  ++fits;
  const auto& skip = est.at("skip_pretrain");
  const bool covered = skip.ci_low <= kPlantedSkip && kPlantedSkip <= skip.ci_high;
  return {worst < kOlsTol && covered,
          std::to_string(fits) + " fits vs Gauss-Jordan normal equations, max diff " + fmt("%.2e", worst) + " < " +
              fmt("%.0e", kOlsTol) + "; Monte Carlo (n=10000, seed 7) beta_skip " + fmt("%.4f", skip.beta) + ", 95% CI [" +
              fmt("%.4f", skip.ci_low) + ", " + fmt("%.4f", skip.ci_high) + "] " + (covered ? "covers" : "misses") + " -0.1"};
}

Outcome table_check() {
  const auto layout = table1::layout();
  const auto rows = table1::rows();
  const auto t = render_results_table(layout, rows);
  std::set<std::pair<int, int>> published;
  for (const auto& p : table1::published_highlights()) published.insert(p);
  bool gqa = true, mmvp = true, all_published = true, extras_are_ties = true;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    gqa = gqa && t.highlighted[r][0] == (r == 2);
    mmvp = mmvp && t.highlighted[r][7] == (r == 4 || r == 6);
  }
  gqa = gqa && *rows[2].values[0] == 0.587 && rows[2].labels == std::vector<std::string>{"2b", "DinoV2", "Yes"};
  std::vector<std::string> extras;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < layout.value_headers.size(); ++c) {
      const std::pair<int, int> cell{static_cast<int>(r), static_cast<int>(c)};
      if (published.count(cell) && !t.highlighted[r][c]) all_published = false;
      if (!published.count(cell) && t.highlighted[r][c]) {
        // allowed only when it ties a published highlight of the same column
        bool tie = false;
        for (const auto& [pr, pc] : published)
          if (pc == cell.second && *rows[static_cast<std::size_t>(pr)].values[c] == *rows[r].values[c]) tie = true;
        extras_are_ties = extras_are_ties && tie;
        extras.push_back(layout.value_headers[c] + " " + fmt("%g", *rows[r].values[c]) + " at (" + rows[r].labels[0] + ", " +
                         rows[r].labels[1] + ", " + rows[r].labels[2] + ")");
      }
    }
  std::string extra_text;
  for (const auto& e : extras) extra_text += (extra_text.empty() ? "" : "; ") + e;
  return {gqa && mmvp && all_published && extras_are_ties,
          std::string("GQA best 0.587 at (2b, DinoV2, Yes): ") + (gqa ? "yes" : "no") + "; MMVP 0.327 double highlight: " +
              (mmvp ? "yes" : "no") + "; published highlights reproduced: " + (all_published ? "10/10" : "no") +
              (extras.empty() ? "" : "; tie-rule extras (the published table bolds only one of the tied cells): " + extra_text)};
}

// ---------------------------------------------------------------------------

struct StopTraining {};

Outcome overfit_check(const fs::path& root) {
  RunManifest m;
  MultimodalModel model(m.model_config(), m.seeds.init);
  model.params().assign(load_vision_cache(root, VisionVariant::A).params, "vision.");
  model.frozen = {true, false, false};
  const auto corpus = gen_instruction_corpus(kOverfitSamples, m.seeds.data, parse_mix(m.mix));
  const auto feats = encode_corpus(model, corpus);
  const Tokenizer tok(m.vocab_size);
  const auto accuracy = [&] {
    int ok = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      // long enough for the longest caption: train accuracy, not the benchmark cap
      const int budget = static_cast<int>(corpus[i].gold_answer.size()) + 1;
      const auto out = generate_from_features(model, feats.of(i), corpus[i].prompt(), budget, Tokenizer::kEndOfAnswer);
      ok += normalize_answer(tok.decode(out), corpus[i].question) == normalize_answer(corpus[i].answer, corpus[i].question);
    }
    return static_cast<double>(ok) / static_cast<double>(corpus.size());
  };
  int reached = -1;
  double acc = 0;
  try {
    train_steps(model, corpus, feats, m.hp, StageOptions{2, m.hp.lr_stage2, kOverfitMaxSteps, m.hp.batch_size, m.seeds.order},
                [&](const StepInfo& s) {
                  if ((s.step + 1) % kOverfitEvalEvery) return;
                  acc = accuracy();
                  if (acc >= kOverfitAccuracy) {
                    reached = s.step + 1;
                    throw StopTraining{};
                  }
                });
  } catch (const StopTraining&) {
  }
  return {reached > 0, "train accuracy " + fmt("%.3f", acc) + (reached > 0 ? " >= 0.95 after " + std::to_string(reached) : " after 2000") +
                           " steps (64 samples, preset S, batch " + std::to_string(m.hp.batch_size) + ")"};
}

Outcome reference_check(const fs::path& root, double* seconds) {
  const auto t0 = Clock::now();
  RunManifest m;  // defaults, seed 17: the (S, A, pretrain) cell
  const auto res = run_cell(root, m, [](const StepInfo& s) {
    if (s.step % 500 == 0) std::cerr << "  reference stage " << s.stage << " step " << s.step << " loss " << s.loss << '\n';
  });
  const Checkpoint ck = load_run(res.dir);
  const auto out = evaluate(ck, Tokenizer(m.vocab_size), "toy-pope", gen_benchmark({"toy-pope", kBenchmarkSize, kBenchmarkSeed}),
                            res.dir / "eval");
  *seconds = seconds_since(t0);
  const double acc = out.summary.accuracy;
  return {acc >= kReferencePope && acc > kMajorityBaseline,
          "toy-POPE accuracy " + fmt("%.3f", acc) + " >= 0.75 (majority baseline 0.5), F1 " + fmt("%.3f", *out.summary.f1) +
              ", run " + res.run_id + ", " + fmt("%.0f", *seconds) + " s on " + hardware_description()};
}

Outcome throughput_check() {
  const Workload w;
  const auto s = measure_throughput(LmPreset::S, w);
  const auto l = measure_throughput(LmPreset::L, w);
  const double train_ratio = l.steps_per_second / s.steps_per_second;
  const double infer_ratio = l.tokens_per_second / s.tokens_per_second;
  return {train_ratio < 1.0 && infer_ratio < 1.0,
          "L/S training steps/s ratio " + fmt("%.3f", train_ratio) + " < 1, greedy inference tokens/s ratio " +
              fmt("%.3f", infer_ratio) + " < 1 (S " + fmt("%.2f", s.steps_per_second) + " steps/s, L " +
              fmt("%.2f", l.steps_per_second) + " steps/s)"};
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Outcome determinism_check(const fs::path& a, const fs::path& b, const std::vector<RunResult>& runs_a) {
  const auto runs_b = smoke_pipeline(b);
  int files = 0, differing = 0;
  for (std::size_t i = 0; i < runs_a.size(); ++i) {
    for (const auto& bench : benchmark_names()) {
      const fs::path rel = fs::relative(runs_a[i].dir, a) / "eval" / (bench + ".jsonl");
      ++files;
      const std::string x = file_bytes(a / rel);
      if (x.empty() || x != file_bytes(b / rel)) ++differing;
    }
  }
  const bool effects_same = file_bytes(a / "analysis" / "effects.json") == file_bytes(b / "analysis" / "effects.json") &&
                            !file_bytes(a / "analysis" / "effects.json").empty();
  return {differing == 0 && effects_same && runs_b.size() == runs_a.size(),
          std::to_string(files - differing) + "/" + std::to_string(files) + " record files byte-identical, effects.json " +
              (effects_same ? "identical" : "differs") + " across two executions"};
}

Outcome direction_check(const fs::path& root) {
  std::vector<double> pt, skip;
  std::string per_seed;
  for (std::uint64_t seed : kDirectionSeeds) {
    RunManifest base;  // default budget; seed 17 with pretraining is the reference run
    base.seeds = {seed, seed, seed};
    double f1[2] = {0, 0};
    for (bool pretrain : {true, false}) {
      RunManifest m = base;
      m.pretrain_connector = pretrain;
      const auto res = run_cell(root, m);
      const auto out = evaluate(load_run(res.dir), Tokenizer(m.vocab_size), "toy-pope",
                                gen_benchmark({"toy-pope", kBenchmarkSize, kBenchmarkSeed}), res.dir / "eval");
      f1[pretrain ? 0 : 1] = *out.summary.f1;
    }
    pt.push_back(f1[0]);
    skip.push_back(f1[1]);
    per_seed += (per_seed.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) + " " + fmt("%.3f", f1[0]) + "/" +
                fmt("%.3f", f1[1]);
  }
  const auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const auto sd = [&](const std::vector<double>& v) {
    const double mu = mean(v);
    double s = 0;
    for (double x : v) s += (x - mu) * (x - mu);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
  };
  return {mean(pt) > mean(skip),
          "mean toy-POPE F1 pretrain " + fmt("%.3f", mean(pt)) + " (sd " + fmt("%.3f", sd(pt)) + ") vs skip " +
              fmt("%.3f", mean(skip)) + " (sd " + fmt("%.3f", sd(skip)) + "); pt/skip per seed: " + per_seed +
              "; cells (S, A), default budget"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = (fs::temp_directory_path() / "mmfm_acceptance").string();
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory (reused: finished runs are not retrained)");
  app.add_option("--only", only, "run just these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  const fs::path root = work;
  fs::create_directories(root);
  Report report;

  if (want(1)) report.line(1, "gradient suite", guarded(gradient_suite));

  std::vector<RunResult> smoke;
  if (want(2) || want(8)) {
    try {
      smoke = smoke_pipeline(root / "smoke-a");
    } catch (const std::exception& e) {
      std::cerr << "smoke pipeline failed: " << e.what() << '\n';
    }
  }
  if (want(2)) report.line(2, "freeze invariants", guarded([&] { return freeze_invariants(root / "smoke-a", smoke); }));
  if (want(3)) report.line(3, "relevancy oracle", guarded(relevancy_oracle_check));
  if (want(4)) report.line(4, "OLS oracle", guarded(ols_check));
  if (want(5)) report.line(5, "table highlights", guarded(table_check));

  if (want(6) || want(9)) {
    const fs::path ref = root / "reference";
    if (!fs::exists(vision_cache_path(ref, VisionVariant::A))) {
      const VisionPretrainOptions o;
      const auto cfg = vision_preset(VisionVariant::A);
      const auto r = toy_pretrain_vision(cfg, gen_vision_corpus(o.corpus_size, o.seed), o);
      fs::create_directories(vision_cache_path(ref, VisionVariant::A).parent_path());
      save_checkpoint(vision_cache_path(ref, VisionVariant::A), vision_checkpoint(cfg, r, o));
    }
    if (want(6)) {
      const Outcome overfit = guarded([&] { return overfit_check(ref); });
      double secs = 0;
      const Outcome full = guarded([&] { return reference_check(ref, &secs); });
      report.line(6, "training sanity", {overfit.pass && full.pass, overfit.detail + "; " + full.detail});
    }
    if (want(7)) report.line(7, "throughput direction", guarded(throughput_check));
    if (want(8)) report.line(8, "end-to-end determinism", guarded([&] { return determinism_check(root / "smoke-a", root / "smoke-b", smoke); }));
    if (want(9)) report.line(9, "ablation direction", guarded([&] { return direction_check(ref); }), false);
  } else {
    if (want(7)) report.line(7, "throughput direction", guarded(throughput_check));
    if (want(8)) report.line(8, "end-to-end determinism", guarded([&] { return determinism_check(root / "smoke-a", root / "smoke-b", smoke); }));
  }

  std::cout << (report.failures == 0 ? "ALL GATED CRITERIA PASS" : std::to_string(report.failures) + " GATED CRITERIA FAIL") << std::endl;
  return report.failures == 0 ? 0 : 1;
}
