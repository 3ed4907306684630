#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmfm/analysis.hpp"
#include "mmfm/errors.hpp"
#include "mmfm/eval.hpp"
#include "mmfm/relevancy.hpp"
#include "mmfm/vision_pretrain.hpp"

namespace mmfm::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

double get_double(const KeyValueFile& kv, const std::string& s, const std::string& k, double fallback) {
  if (!kv.has(s, k)) return fallback;
  try {
    return std::stod(kv.get(s, k, ""));
  } catch (const std::exception&) {
    throw ConfigError("[" + s + "] " + k + " is not a number");
  }
}

std::uint64_t get_u64(const KeyValueFile& kv, const std::string& s, const std::string& k, std::uint64_t fallback) {
  if (!kv.has(s, k)) return fallback;
  try {
    return std::stoull(kv.get(s, k, ""));
  } catch (const std::exception&) {
    throw ConfigError("[" + s + "] " + k + " is not an unsigned integer");
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw InputError("cannot write " + tmp.string());
    f << text;
  }
  fs::rename(tmp, path);
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "no" || s == "0") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

/// Training hyperparameter flags shared by `train` and `ablate`.
struct TrainFlags {
  std::optional<int> steps1, steps2, batch, vocab, pretrain_samples, instruct_samples;
  std::optional<double> lr1, lr2;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mix;

  void attach(CLI::App* app) {
    app->add_option("--steps1", steps1, "stage-1 optimizer steps");
    app->add_option("--steps2", steps2, "stage-2 optimizer steps");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--lr1", lr1, "stage-1 peak learning rate");
    app->add_option("--lr2", lr2, "stage-2 peak learning rate");
    app->add_option("--vocab", vocab, "tokenizer vocabulary size");
    app->add_option("--pretrain-samples", pretrain_samples, "caption corpus size");
    app->add_option("--instruct-samples", instruct_samples, "instruction corpus size");
    app->add_option("--mix", mix, "instruction task mix, e.g. count=0.5,spatial=0.5");
    app->add_option("--seed", seed, "sets the init, data and order seeds");
  }

  RunManifest apply(RunManifest m) const {
    if (steps1) m.hp.steps_stage1 = *steps1;
    if (steps2) m.hp.steps_stage2 = *steps2;
    if (batch) m.hp.batch_size = *batch;
    if (lr1) m.hp.lr_stage1 = *lr1;
    if (lr2) m.hp.lr_stage2 = *lr2;
    if (vocab) m.vocab_size = *vocab;
    if (pretrain_samples) m.pretrain_samples = *pretrain_samples;
    if (instruct_samples) m.instruct_samples = *instruct_samples;
    if (mix) {
      validate_mix(parse_mix(*mix));
      m.mix = mix_string(parse_mix(*mix));
    }
    if (seed) m.seeds = {*seed, *seed, *seed};
    return m;
  }
};

StepCallback progress_printer(const std::string& label) {
  return [label](const StepInfo& s) {
    if (s.step % 50 == 0)
      std::cerr << label << " stage " << s.stage << " step " << s.step << " loss " << s.loss << " lr " << s.lr << '\n';
  };
}

fs::path run_dir(const fs::path& runs, const std::string& run_id) {
  const fs::path d = runs / run_id;
  if (!fs::exists(d / "manifest.json")) throw InputError("no run " + run_id + " under " + runs.string());
  return d;
}

Checkpoint load_finished(const fs::path& dir) {
  if (!fs::exists(dir / "stage2.ckpt")) throw InputError("run " + dir.filename().string() + " has not finished training");
  return load_checkpoint(dir / "stage2.ckpt");
}

std::vector<std::string> finished_runs(const fs::path& runs) {
  std::vector<std::string> out;
  if (!fs::exists(runs)) return out;
  for (const auto& e : fs::directory_iterator(runs))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json") && fs::exists(e.path() / "stage2.ckpt"))
      out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<EvalRecord> collect_records(const fs::path& runs) {
  std::vector<EvalRecord> all;
  for (const auto& id : finished_runs(runs)) {
    const fs::path eval = runs / id / "eval";
    if (!fs::exists(eval)) continue;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(eval))
      if (e.path().extension() == ".jsonl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto rs = load_records(f);
      all.insert(all.end(), rs.begin(), rs.end());
    }
  }
  if (all.empty()) throw InputError("no evaluation records under " + runs.string() + "; run `mmfm eval` first");
  return all;
}

/// "toy-pope-99-000012" → ("toy-pope", 99)
std::pair<std::string, std::uint64_t> parse_item_id(const std::string& id) {
  const auto b = id.rfind('-');
  const auto a = b == std::string::npos || b == 0 ? std::string::npos : id.rfind('-', b - 1);
  if (a == std::string::npos) throw InputError("malformed item id '" + id + "'");
  try {
    return {id.substr(0, a), std::stoull(id.substr(a + 1, b - a - 1))};
  } catch (const std::exception&) {
    throw InputError("malformed item id '" + id + "'");
  }
}

}  // namespace

CliConfig CliConfig::from_file(const KeyValueFile& kv) {
  CliConfig c;
  c.runs = kv.get("paths", "runs", c.runs.string());
  c.data = kv.get("paths", "data", c.data.string());
  RunManifest& m = c.base;
  m.seeds.init = get_u64(kv, "seeds", "init", m.seeds.init);
  m.seeds.data = get_u64(kv, "seeds", "data", m.seeds.data);
  m.seeds.order = get_u64(kv, "seeds", "order", m.seeds.order);
  m.vocab_size = kv.get_int("train", "vocab_size", m.vocab_size);
  m.hp.batch_size = kv.get_int("train", "batch_size", m.hp.batch_size);
  m.hp.steps_stage1 = kv.get_int("train", "steps_stage1", m.hp.steps_stage1);
  m.hp.steps_stage2 = kv.get_int("train", "steps_stage2", m.hp.steps_stage2);
  m.hp.lr_stage1 = get_double(kv, "train", "lr_stage1", m.hp.lr_stage1);
  m.hp.lr_stage2 = get_double(kv, "train", "lr_stage2", m.hp.lr_stage2);
  m.pretrain_samples = kv.get_int("train", "pretrain_samples", m.pretrain_samples);
  m.instruct_samples = kv.get_int("train", "instruct_samples", m.instruct_samples);
  if (kv.has("train", "mix")) {
    const auto mix = parse_mix(kv.get("train", "mix", ""));
    validate_mix(mix);
    m.mix = mix_string(mix);
  }
  c.vision_steps = kv.get_int("vision", "steps", c.vision_steps);
  c.vision_batch = kv.get_int("vision", "batch_size", c.vision_batch);
  c.vision_corpus = kv.get_int("vision", "corpus_size", c.vision_corpus);
  c.vision_seed = get_u64(kv, "vision", "seed", c.vision_seed);
  c.eval_n = kv.get_int("eval", "n", c.eval_n);
  c.eval_seed = get_u64(kv, "eval", "seed", c.eval_seed);
  return c;
}

int run(int argc, char** argv) {
  CLI::App app{"Desk-scale multimodal training, evaluation and analysis"};
  app.require_subcommand(1);
  std::optional<std::string> config_path, runs_flag;
  app.add_option("--config", config_path, "key-value config file")->check(CLI::ExistingFile);
  app.add_option("--runs", runs_flag, std::string("runs root (default: $") + kRunsEnv + ", then the config file)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a corpus or benchmark");
  std::string kind, bench_name, mix_text, out_dir;
  int gen_n = 0;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--kind", kind, "pretrain | instruct | benchmark")->required()->check(
      CLI::IsMember({"pretrain", "instruct", "benchmark"}));
  gen->add_option("--n", gen_n, "number of samples")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--name", bench_name, "benchmark name (toy-gqa | toy-pope | toy-vqa)");
  gen->add_option("--mix", mix_text, "task mix for instruct corpora");
  gen->add_option("--out", out_dir, "output directory");

  // pretrain-vision
  auto* pv = app.add_subcommand("pretrain-vision", "toy-pretrain a vision tower into the runs cache");
  std::string variant = "A";
  std::optional<int> pv_steps, pv_corpus, pv_batch;
  std::optional<std::uint64_t> pv_seed;
  pv->add_option("--variant", variant, "A (contrastive) | B (self-distillation)")->check(CLI::IsMember({"A", "B"}));
  pv->add_option("--steps", pv_steps, "optimizer steps");
  pv->add_option("--corpus", pv_corpus, "training images");
  pv->add_option("--batch", pv_batch, "batch size");
  pv->add_option("--seed", pv_seed, "seed");

  // train / ablate
  auto* train = app.add_subcommand("train", "train one ablation cell");
  std::string lm = "S", vision = "A", pretrain = "true";
  train->add_option("--lm", lm, "language preset")->check(CLI::IsMember({"S", "L"}));
  train->add_option("--vision", vision, "vision variant")->check(CLI::IsMember({"A", "B"}));
  train->add_option("--pretrain-connector", pretrain, "run stage 1 (true | false)");
  TrainFlags train_flags;
  train_flags.attach(train);

  auto* ablate = app.add_subcommand("ablate", "train every ablation cell, skipping finished ones");
  std::vector<std::string> lm_filter;
  ablate->add_option("--lm", lm_filter, "restrict to these language presets")->delimiter(',');
  TrainFlags ablate_flags;
  ablate_flags.attach(ablate);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate finished runs on the benchmarks");
  std::vector<std::string> eval_runs, eval_benches;
  std::optional<int> eval_n;
  std::optional<std::uint64_t> eval_seed;
  ev->add_option("--run", eval_runs, "run ids (default: every finished run)")->delimiter(',');
  ev->add_option("--benchmark", eval_benches, "benchmarks (default: all)")->delimiter(',');
  ev->add_option("--n", eval_n, "items per benchmark");
  ev->add_option("--seed", eval_seed, "benchmark seed");

  // relevancy
  auto* rel = app.add_subcommand("relevancy", "relevancy heatmap for one benchmark item");
  std::string rel_run, rel_item, rel_token = "first";
  std::optional<std::string> rel_compare, rel_out, rel_dump;
  std::optional<int> rel_n;
  bool no_normalize = false;
  rel->add_option("--run", rel_run, "run id")->required();
  rel->add_option("--compare", rel_compare, "second run id for a side-by-side figure");
  rel->add_option("--item", rel_item, "benchmark item id, e.g. toy-pope-99-000003")->required();
  rel->add_option("--token", rel_token, "first, or the index of the generated token");
  rel->add_option("--n", rel_n, "benchmark size the item was drawn from");
  rel->add_flag("--no-normalize", no_normalize, "skip row normalization of each layer's relevance");
  rel->add_option("--out", rel_out, "output directory");
  rel->add_option("--dump-trace", rel_dump, "also write the first run's attention trace here");

  // analyze / report
  auto* an = app.add_subcommand("analyze", "fit design effects over all evaluation records");
  bool interactions = false;
  std::optional<std::string> an_out;
  an->add_flag("--interactions", interactions, "include all flag interactions");
  an->add_option("--out", an_out, "output directory (default: <runs>/analysis)");

  auto* rep = app.add_subcommand("report", "markdown results table with per-column highlights");
  std::optional<std::string> rep_out;
  rep->add_option("--out", rep_out, "output file (default: <runs>/analysis/results_table.md)");

  // bench-speed
  auto* bs = app.add_subcommand("bench-speed", "training and inference throughput per preset");
  std::vector<std::string> presets = {"S", "L"};
  Workload wl;
  std::optional<std::string> bs_out;
  bs->add_option("--presets", presets, "presets to measure")->delimiter(',')->check(CLI::IsMember({"S", "L"}));
  bs->add_option("--batch", wl.batch_size, "batch size");
  bs->add_option("--warmup", wl.warmup_steps, "untimed steps");
  bs->add_option("--steps", wl.measured_steps, "timed steps");
  bs->add_option("--items", wl.generate_items, "greedy generations timed");
  bs->add_option("--tokens", wl.generate_tokens, "tokens per generation");
  bs->add_option("--seed", wl.seed, "workload seed");
  bs->add_option("--out", bs_out, "output file (default: <runs>/throughput.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    CliConfig cfg = config_path ? CliConfig::from_file(KeyValueFile::load(*config_path)) : CliConfig{};
    if (const char* env = std::getenv(kRunsEnv); env && *env) cfg.runs = env;
    if (runs_flag) cfg.runs = *runs_flag;
    const fs::path runs = cfg.runs;

    if (*gen) {
      const std::uint64_t seed = gen_seed.value_or(cfg.base.seeds.data);
      CorpusInfo info{kind, kind, gen_n, seed, ""};
      std::vector<Sample> samples;
      if (kind == "pretrain") {
        samples = gen_pretrain_corpus(gen_n, seed);
      } else if (kind == "instruct") {
        const TaskMix mix = mix_text.empty() ? parse_mix(cfg.base.mix) : parse_mix(mix_text);
        validate_mix(mix);
        info.mix = mix_string(mix);
        samples = gen_instruction_corpus(gen_n, seed, mix);
      } else {
        if (bench_name.empty()) throw ConfigError("--kind benchmark needs --name");
        info.name = bench_name;
        samples = gen_benchmark({bench_name, gen_n, seed});
      }
      const fs::path dir = out_dir.empty() ? cfg.data / (info.name + "-n" + std::to_string(gen_n) + "-s" + std::to_string(seed))
                                           : fs::path(out_dir);
      std::cout << save_corpus(dir, info, samples).string() << '\n';
      return 0;
    }

    if (*pv) {
      VisionPretrainOptions o;
      o.steps = pv_steps.value_or(cfg.vision_steps);
      o.corpus_size = pv_corpus.value_or(cfg.vision_corpus);
      o.batch_size = pv_batch.value_or(cfg.vision_batch);
      o.seed = pv_seed.value_or(cfg.vision_seed);
      const VisionVariant v = parse_vision_variant(variant);
      const auto tower = vision_preset(v);
      const auto result = toy_pretrain_vision(tower, gen_vision_corpus(o.corpus_size, o.seed), o, [&](const StepInfo& s) {
        if (s.step % 50 == 0) std::cerr << "vision-" << variant << " step " << s.step << " loss " << s.loss << '\n';
      });
      const fs::path path = vision_cache_path(runs, v);
      fs::create_directories(path.parent_path());
      save_checkpoint(path, vision_checkpoint(tower, result, o));
      std::cout << path.string() << '\n';
      return 0;
    }

    if (*train) {
      RunManifest m = train_flags.apply(cfg.base);
      m.lm = parse_lm_preset(lm);
      m.vision = parse_vision_variant(vision);
      m.pretrain_connector = parse_bool(pretrain);
      const auto res = run_cell(runs, m, progress_printer(m.run_id()));
      write_run_index(runs);
      std::cerr << res.run_id << (res.trained ? " trained, " : " already complete, ") << res.steps << " steps\n";
      std::cout << res.dir.string() << '\n';
      return 0;
    }

    if (*ablate) {
      const RunManifest base = ablate_flags.apply(cfg.base);
      std::vector<Cell> cells;
      for (const auto& c : canonical_cells())
        if (lm_filter.empty() || std::find(lm_filter.begin(), lm_filter.end(), to_string(c.lm)) != lm_filter.end())
          cells.push_back(c);
      const auto results = run_ablation_matrix(runs, base, cells, progress_printer("ablate"));
      for (const auto& r : results) std::cout << r.dir.string() << (r.trained ? "" : " (already complete)") << '\n';
      return 0;
    }

    if (*ev) {
      const auto ids = eval_runs.empty() ? finished_runs(runs) : eval_runs;
      if (ids.empty()) throw InputError("no finished runs under " + runs.string());
      const auto benches = eval_benches.empty() ? benchmark_names() : eval_benches;
      const int n = eval_n.value_or(cfg.eval_n);
      const std::uint64_t seed = eval_seed.value_or(cfg.eval_seed);
      for (const auto& id : ids) {
        const fs::path dir = run_dir(runs, id);
        const Checkpoint ck = load_finished(dir);
        const Tokenizer tok(RunManifest::from_json(ck.manifest).vocab_size);
        for (const auto& b : benches) {
          const auto items = gen_benchmark({b, n, seed});
          const auto out = evaluate(ck, tok, b, items, dir / "eval");
          std::cerr << id << " " << b << " accuracy " << out.summary.accuracy
                    << (out.summary.f1 ? " f1 " + std::to_string(*out.summary.f1) : "") << '\n';
          std::cout << (dir / "eval" / (b + ".jsonl")).string() << '\n';
        }
      }
      return 0;
    }

    if (*rel) {
      const auto [bench, seed] = parse_item_id(rel_item);
      const auto items = gen_benchmark({bench, rel_n.value_or(cfg.eval_n), seed});
      const auto it = std::find_if(items.begin(), items.end(), [&](const Sample& s) { return s.id == rel_item; });
      if (it == items.end()) throw InputError("item " + rel_item + " is not in " + bench + " (try --n)");
      int position = 0;
      if (rel_token != "first") {
        try {
          position = std::stoi(rel_token);
        } catch (const std::exception&) {
          throw ConfigError("--token must be 'first' or an integer");
        }
      }
      std::vector<std::string> ids = {rel_run};
      if (rel_compare) ids.push_back(*rel_compare);
      std::vector<Checkpoint> cks;
      std::vector<MultimodalModel> models;
      for (const auto& id : ids) cks.push_back(load_finished(run_dir(runs, id)));
      models.reserve(cks.size());
      std::vector<CompareInput> inputs;
      for (std::size_t i = 0; i < cks.size(); ++i) {
        models.emplace_back(cks[i].config, cks[i].params);
        inputs.push_back({ids[i], nullptr, RunManifest::from_json(cks[i].manifest).vocab_size});
      }
      for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i].model = &models[i];
      const fs::path out = rel_out ? fs::path(*rel_out) : runs / rel_run / "relevancy" / rel_item;
      relevancy_report(inputs, *it, position, out, !no_normalize);
      if (rel_dump) {
        const Image image = Image::from_bytes(kCanvas, kCanvas, it->scene.render());
        save_trace(*rel_dump, capture_trace(models[0], image, it->prompt(), position));
      }
      std::cout << (out / "relevancy.png").string() << '\n' << (out / "relevancy.json").string() << '\n';
      return 0;
    }

    if (*an) {
      const auto records = collect_records(runs);
      const fs::path out = an_out ? fs::path(*an_out) : runs / "analysis";
      const auto paths = analyze(records, out, interactions);
      std::cout << paths.effects_json.string() << '\n' << paths.effects_png.string() << '\n' << paths.results_table.string() << '\n';
      return 0;
    }

    if (*rep) {
      const auto table = results_table_from_records(collect_records(runs));
      const fs::path out = rep_out ? fs::path(*rep_out) : runs / "analysis" / "results_table.md";
      write_text_atomic(out, table.markdown);
      std::cout << table.markdown;
      return 0;
    }

    if (*bs) {
      json reports = json::array();
      std::map<std::string, ThroughputReport> by;
      for (const auto& p : presets) {
        std::cerr << "measuring preset " << p << '\n';
        by[p] = measure_throughput(parse_lm_preset(p), wl, VisionVariant::A, cfg.base.vocab_size);
        reports.push_back(by[p].to_json());
      }
      json doc = {{"workload",
                   {{"batch_size", wl.batch_size},
                    {"warmup_steps", wl.warmup_steps},
                    {"measured_steps", wl.measured_steps},
                    {"generate_items", wl.generate_items},
                    {"generate_tokens", wl.generate_tokens},
                    {"seed", wl.seed}}},
                  {"hardware", hardware_description()},
                  {"reports", reports}};
      if (by.count("S") && by.count("L")) {
        doc["ratio_L_over_S"] = {{"train", by["L"].steps_per_second / by["S"].steps_per_second},
                                 {"inference", by["L"].tokens_per_second / by["S"].tokens_per_second}};
      }
      const fs::path out = bs_out ? fs::path(*bs_out) : runs / "throughput.json";
      write_text_atomic(out, doc.dump(2) + "\n");
      std::cout << out.string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "mmfm: error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace mmfm::cli
