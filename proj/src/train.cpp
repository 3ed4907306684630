#include "mmfm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <thread>

#include "mmfm/errors.hpp"
#include "mmfm/hash.hpp"
#include "mmfm/rng.hpp"

namespace mmfm {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Manifest

ModelConfig RunManifest::model_config() const { return make_model_config(lm, vision, vocab_size); }

json RunManifest::fields_json() const {
  return {
      {"lm_preset", to_string(lm)},
      {"vision_variant", to_string(vision)},
      {"pretrain_connector", pretrain_connector},
      {"vocab_size", vocab_size},
      {"seeds", {{"init", seeds.init}, {"data", seeds.data}, {"order", seeds.order}}},
      {"hyperparameters",
       {{"lr_stage1", hp.lr_stage1},
        {"lr_stage2", hp.lr_stage2},
        {"batch_size", hp.batch_size},
        {"steps_stage1", hp.steps_stage1},
        {"steps_stage2", hp.steps_stage2},
        {"beta1", hp.beta1},
        {"beta2", hp.beta2},
        {"eps", hp.eps},
        {"weight_decay", hp.weight_decay},
        {"grad_clip", hp.grad_clip},
        {"schedule", "cosine"},
        {"optimizer", "adamw"}}},
      {"pretrain_samples", pretrain_samples},
      {"instruct_samples", instruct_samples},
      {"mix", mix},
      {"vision_params_hash", vision_params_hash},
      {"model", mmfm::to_json(model_config())},
  };
}

std::string RunManifest::config_hash() const { return git_blob_hash(fields_json().dump()); }

std::string RunManifest::run_id() const {
  return to_string(lm) + "-" + to_string(vision) + "-" + (pretrain_connector ? "pt" : "skip") + "-V" +
         std::to_string(vocab_size) + "-" + config_hash().substr(0, 10);
}

json RunManifest::to_json() const {
  json j = fields_json();
  j["run_id"] = run_id();
  j["config_hash"] = config_hash();
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    RunManifest m;
    m.lm = parse_lm_preset(j.at("lm_preset").get<std::string>());
    m.vision = parse_vision_variant(j.at("vision_variant").get<std::string>());
    m.pretrain_connector = j.at("pretrain_connector").get<bool>();
    m.vocab_size = j.at("vocab_size").get<int>();
    const auto& s = j.at("seeds");
    m.seeds = {s.at("init").get<std::uint64_t>(), s.at("data").get<std::uint64_t>(), s.at("order").get<std::uint64_t>()};
    const auto& h = j.at("hyperparameters");
    m.hp.lr_stage1 = h.at("lr_stage1").get<double>();
    m.hp.lr_stage2 = h.at("lr_stage2").get<double>();
    m.hp.batch_size = h.at("batch_size").get<int>();
    m.hp.steps_stage1 = h.at("steps_stage1").get<int>();
    m.hp.steps_stage2 = h.at("steps_stage2").get<int>();
    m.hp.beta1 = h.at("beta1").get<double>();
    m.hp.beta2 = h.at("beta2").get<double>();
    m.hp.eps = h.at("eps").get<double>();
    m.hp.weight_decay = h.at("weight_decay").get<double>();
    m.hp.grad_clip = h.at("grad_clip").get<double>();
    m.pretrain_samples = j.at("pretrain_samples").get<int>();
    m.instruct_samples = j.at("instruct_samples").get<int>();
    m.mix = j.at("mix").get<std::string>();
    m.vision_params_hash = j.at("vision_params_hash").get<std::string>();
    if (j.contains("run_id") && j.at("run_id").get<std::string>() != m.run_id())
      throw ConfigError("manifest run_id " + j.at("run_id").get<std::string>() + " does not match its fields (" + m.run_id() + ")");
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run manifest: ") + e.what());
  }
}

DesignFlags design_flags(const RunManifest& m) {
  return {m.pretrain_connector ? 0 : 1, m.vision == VisionVariant::B ? 1 : 0, m.lm == LmPreset::L ? 1 : 0};
}

// ---------------------------------------------------------------------------
// Batches and loss

FeatureBank encode_corpus(const MultimodalModel& model, std::span<const Sample> corpus) {
  const auto& vc = model.config().vision;
  FeatureBank fb;
  fb.tokens = vc.tokens();
  fb.width = vc.embed_dim;
  fb.data.reserve(corpus.size() * static_cast<std::size_t>(fb.tokens) * fb.width);
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < corpus.size(); i += kChunk) {
    std::vector<Image> images;
    for (std::size_t k = i; k < std::min(corpus.size(), i + kChunk); ++k)
      images.push_back(Image::from_bytes(kCanvas, kCanvas, corpus[k].scene.render()));
    const auto f = encode_images(model, images);
    fb.data.insert(fb.data.end(), f.begin(), f.end());
  }
  return fb;
}

Supervision answer_supervision(std::span<const int> seq) {
  Supervision s;
  const auto it = std::find(seq.rbegin(), seq.rend(), Tokenizer::kAssistant);
  if (it == seq.rend()) throw InputError("sequence has no ASSISTANT: turn to supervise");
  const int a = static_cast<int>(seq.rend() - it) - 1;
  for (int i = a; i + 1 < static_cast<int>(seq.size()); ++i) {
    s.rows.push_back(i);
    s.targets.push_back(seq[static_cast<std::size_t>(i) + 1]);
  }
  if (s.rows.empty()) throw InputError("sequence has an empty answer");
  return s;
}

double batch_loss_and_grads(const MultimodalModel& model, std::span<const Sample* const> batch,
                            std::span<const std::span<const float>> features, std::map<std::string, std::vector<float>>* grads) {
  if (batch.empty()) throw InputError("empty batch");
  const auto& cfg = model.config();
  const int g2 = cfg.vision.tokens(), dv = cfg.vision.embed_dim;
  Tape<float> tape;
  const auto p = bind_params<float>(tape, model.params(), [&](const std::string& n) { return model.trainable(n); });
  std::vector<float> feats;
  feats.reserve(batch.size() * static_cast<std::size_t>(g2) * dv);
  std::vector<std::vector<int>> texts;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (features[b].size() != static_cast<std::size_t>(g2) * dv) throw DimensionError("feature block has the wrong size");
    feats.insert(feats.end(), features[b].begin(), features[b].end());
    texts.push_back(batch[b]->sequence());
  }
  const auto layout = PackedLayout::build(g2, texts, cfg.language.context_length);
  std::vector<int> rows, targets;
  for (std::size_t b = 0; b < texts.size(); ++b) {
    const auto sup = answer_supervision(texts[b]);
    for (std::size_t k = 0; k < sup.rows.size(); ++k) {
      rows.push_back(layout.text_row(static_cast<int>(b), sup.rows[k]));
      targets.push_back(sup.targets[k]);
    }
  }
  const auto embeds = connector_forward(p, tape.view({static_cast<int>(batch.size()) * g2, dv}, std::span<const float>(feats)));
  const auto logits = language_forward(p, cfg.language, embeds, layout, rows);
  const auto loss = cross_entropy(logits, std::span<const int>(targets));
  if (grads) {
    grads->clear();
    if (loss.requires_grad()) {
      tape.backward(loss);
      for (const auto& [name, var] : p.vars()) {
        if (!var.requires_grad()) continue;
        const auto g = var.grad();
        if (g.empty()) continue;
        grads->emplace(name, std::vector<float>(g.begin(), g.end()));
      }
    }
  }
  return loss.item();
}

double cosine_lr(double lr, int step, int total) {
  if (total <= 0) return lr;
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

std::vector<int> batch_indices(std::size_t n, int batch_size, int step, std::uint64_t order_seed, int stage) {
  if (n == 0) throw InputError("empty corpus");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<int> perm(n);
  for (int k = 0; k < batch_size; ++k) {
    const std::uint64_t global = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch_size) + static_cast<std::uint64_t>(k);
    const std::uint64_t epoch = global / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      CounterRng rng(derive_key(derive_key(order_seed, static_cast<std::uint64_t>(stage)), epoch));
      for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
      cached_epoch = epoch;
    }
    out.push_back(perm[global % n]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// AdamW

double AdamW::step(ParamStore& params, const std::map<std::string, std::vector<float>>& grads, double lr) {
  if (grads.empty()) return 0.0;
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (float x : g) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  const double clip = hp_.grad_clip > 0 && norm > hp_.grad_clip ? hp_.grad_clip / norm : 1.0;
  ++state_.t;
  const double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(state_.t));
  const double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(state_.t));
  for (const auto& [name, g] : grads) {
    Param& p = params.at(name);
    if (!state_.m.contains(name)) {
      state_.m.add(name, p.shape, std::vector<float>(p.data.size(), 0.0f));
      state_.v.add(name, p.shape, std::vector<float>(p.data.size(), 0.0f));
    }
    auto& m = state_.m.at(name).data;
    auto& v = state_.v.at(name).data;
    const bool decay = p.shape.size() == 2;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double gi = clip * g[i];
      const double mi = hp_.beta1 * m[i] + (1.0 - hp_.beta1) * gi;
      const double vi = hp_.beta2 * v[i] + (1.0 - hp_.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double update = (mi / bc1) / (std::sqrt(vi / bc2) + hp_.eps);
      if (decay) update += hp_.weight_decay * p.data[i];
      p.data[i] = static_cast<float>(p.data[i] - lr * update);
    }
  }
  return norm;
}

AdamState train_steps(MultimodalModel& model, std::span<const Sample> corpus, const FeatureBank& features,
                      const Hyperparams& hp, const StageOptions& opts, const StepCallback& on_step) {
  if (corpus.empty()) throw InputError("training corpus is empty");
  if (opts.batch_size < 1) throw ConfigError("batch size must be >= 1");
  AdamW opt(hp);
  std::map<std::string, std::vector<float>> grads;
  for (int step = 0; step < opts.steps; ++step) {
    const auto idx = batch_indices(corpus.size(), opts.batch_size, step, opts.order_seed, opts.stage);
    std::vector<const Sample*> batch;
    std::vector<std::span<const float>> feats;
    for (int i : idx) {
      batch.push_back(&corpus[static_cast<std::size_t>(i)]);
      feats.push_back(features.of(static_cast<std::size_t>(i)));
    }
    StepInfo info;
    info.stage = opts.stage;
    info.step = step;
    info.loss = batch_loss_and_grads(model, batch, feats, &grads);
    info.lr = cosine_lr(opts.lr, step, opts.schedule_steps > 0 ? opts.schedule_steps : opts.steps);
    info.grad_norm = opt.step(model.params(), grads, info.lr);
    if (on_step) on_step(info);
  }
  return opt.state();
}

// ---------------------------------------------------------------------------
// Stages

namespace {

Checkpoint snapshot(const MultimodalModel& model, const RunManifest& manifest, Stage stage, AdamState opt, long long step) {
  Checkpoint ck;
  ck.manifest = manifest.to_json();
  ck.stage = stage;
  ck.config = model.config();
  ck.params = model.params();
  ck.optimizer = std::move(opt);
  ck.step = step;
  return ck;
}

void require_unchanged(const std::string& before, const std::string& after, const std::string& what) {
  if (before != after) throw ContractError(what + " parameters changed while frozen");
}

}  // namespace

Checkpoint stage1_pretrain_connector(MultimodalModel& model, std::span<const Sample> corpus, const FeatureBank& features,
                                     const RunManifest& manifest, const StepCallback& on_step) {
  for (const auto& s : corpus)
    if (s.task != TaskTag::Caption)
      throw InputError("stage 1 trains on captions only; sample " + s.id + " is tagged " + std::string(name_of(s.task)));
  model.frozen = {true, false, true};
  const std::string vision = model.params().hash("vision."), lm = model.params().hash("lm.");
  StageOptions opts{1, manifest.hp.lr_stage1, manifest.hp.steps_stage1, manifest.hp.batch_size, manifest.seeds.order};
  auto state = train_steps(model, corpus, features, manifest.hp, opts, on_step);
  require_unchanged(vision, model.params().hash("vision."), "vision");
  require_unchanged(lm, model.params().hash("lm."), "language");
  return snapshot(model, manifest, Stage::Stage1, std::move(state), manifest.hp.steps_stage1);
}

Checkpoint stage2_finetune(MultimodalModel& model, std::span<const Sample> corpus, const FeatureBank& features,
                           const RunManifest& manifest, const Checkpoint& from, const StepCallback& on_step) {
  if (from.stage != Stage::Init && from.stage != Stage::Stage1)
    throw ContractError("stage 2 starts from an init or stage1 checkpoint, not " + to_string(from.stage));
  if (!manifest.pretrain_connector && from.stage != Stage::Init)
    throw ContractError("run skips connector pretraining, so stage 2 must start from the init checkpoint");
  if (manifest.pretrain_connector && from.stage != Stage::Stage1)
    throw ContractError("run pretrains the connector, so stage 2 must start from the stage1 checkpoint");
  model.params().assign(from.params, "");
  model.frozen = {true, false, false};
  const std::string vision = model.params().hash("vision.");
  StageOptions opts{2, manifest.hp.lr_stage2, manifest.hp.steps_stage2, manifest.hp.batch_size, manifest.seeds.order};
  auto state = train_steps(model, corpus, features, manifest.hp, opts, on_step);
  require_unchanged(vision, model.params().hash("vision."), "vision");
  return snapshot(model, manifest, Stage::Stage2, std::move(state), manifest.hp.steps_stage2);
}

// ---------------------------------------------------------------------------
// Runs

fs::path vision_cache_path(const fs::path& root, VisionVariant v) { return root / "vision" / ("vision-" + to_string(v) + ".ckpt"); }

Checkpoint load_vision_cache(const fs::path& root, VisionVariant v) {
  const auto path = vision_cache_path(root, v);
  if (!fs::exists(path))
    throw InputError("no pretrained vision tower for variant " + to_string(v) + " at " + path.string() +
                     "; run `mmfm pretrain-vision --variant " + to_string(v) + "` first");
  return load_checkpoint(path);
}

std::vector<Cell> canonical_cells() {
  std::vector<Cell> out;
  for (LmPreset lm : {LmPreset::S, LmPreset::L})
    for (VisionVariant v : {VisionVariant::A, VisionVariant::B})
      for (bool pt : {true, false}) out.push_back({lm, v, pt});
  return out;
}

RunManifest manifest_for(const RunManifest& base, const Cell& cell) {
  RunManifest m = base;
  m.lm = cell.lm;
  m.pretrain_connector = cell.pretrain_connector;
  if (m.vision != cell.vision) m.vision_params_hash.clear();
  m.vision = cell.vision;
  return m;
}

namespace {

json hashes_of(const ParamStore& ps) {
  return {{"vision", ps.hash("vision.")}, {"connector", ps.hash("connector.")}, {"lm", ps.hash("lm.")}};
}

void write_json_atomic(const fs::path& path, const json& j) {
  auto tmp = path;
  tmp += ".tmp";
  std::ofstream(tmp) << j.dump(2) << '\n';
  fs::rename(tmp, path);
}

bool complete(const fs::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) return false;
  try {
    return json::parse(f).value("status", "") == "complete" && fs::exists(dir / "stage2.ckpt");
  } catch (const json::exception&) {
    return false;
  }
}

/// Keeps log lines of stages that are already checkpointed.
void trim_log(const fs::path& log, int keep_through_stage) {
  std::vector<std::string> kept;
  {
    std::ifstream in(log);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        if (json::parse(line).value("stage", 0) <= keep_through_stage) kept.push_back(line);
      } catch (const json::exception&) {
      }
    }
  }
  std::ofstream out(log, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
}

}  // namespace

RunResult run_cell(const fs::path& root, RunManifest manifest, const StepCallback& progress) {
  const Checkpoint vision = load_vision_cache(root, manifest.vision);
  const std::string vision_hash = vision.params.hash("vision.");
  if (manifest.vision_params_hash.empty()) manifest.vision_params_hash = vision_hash;
  if (manifest.vision_params_hash != vision_hash)
    throw ConfigError("cached vision tower " + vision_hash.substr(0, 12) + " does not match the manifest's " +
                      manifest.vision_params_hash.substr(0, 12));
  RunResult res;
  res.run_id = manifest.run_id();
  res.dir = root / res.run_id;
  if (complete(res.dir)) return res;
  fs::create_directories(res.dir);
  res.trained = true;

  json record = manifest.to_json();
  const auto flags = design_flags(manifest);
  record["design_flags"] = {{"skip_pretrain", flags.skip_pretrain}, {"dino_like", flags.dino_like}, {"large_lm", flags.large_lm}};
  record["status"] = "running";
  record["audit"] = json::object();

  MultimodalModel model(manifest.model_config(), manifest.seeds.init);
  if (vision.config.vision.embed_dim != model.config().vision.embed_dim || vision.config.vision.layers != model.config().vision.layers)
    throw ConfigError("cached vision tower does not match the " + to_string(manifest.vision) + " preset");
  model.params().assign(vision.params, "vision.");
  Checkpoint init = snapshot(model, manifest, Stage::Init, {}, 0);
  record["audit"]["init"] = hashes_of(model.params());
  write_json_atomic(res.dir / "manifest.json", record);

  const fs::path log_path = res.dir / "train_log.jsonl";
  const bool have_stage1 = manifest.pretrain_connector && fs::exists(res.dir / "stage1.ckpt");
  trim_log(log_path, have_stage1 ? 1 : 0);
  std::ofstream log(log_path, std::ios::app);
  auto on_step = [&](const StepInfo& s) {
    log << json{{"stage", s.stage}, {"step", s.step}, {"loss", s.loss}, {"lr", s.lr}, {"grad_norm", s.grad_norm}}.dump() << '\n';
    if (progress) progress(s);
  };

  Checkpoint start = init;
  if (manifest.pretrain_connector) {
    if (have_stage1) {
      start = load_checkpoint(res.dir / "stage1.ckpt");
      if (start.stage != Stage::Stage1) throw FormatError("stage1.ckpt holds a " + to_string(start.stage) + " checkpoint");
    } else {
      const auto corpus = gen_pretrain_corpus(manifest.pretrain_samples, manifest.seeds.data);
      const auto feats = encode_corpus(model, corpus);
      start = stage1_pretrain_connector(model, corpus, feats, manifest, on_step);
      log.flush();
      save_checkpoint(res.dir / "stage1.ckpt", start);
      res.steps += manifest.hp.steps_stage1;
    }
    record["audit"]["stage1"] = hashes_of(start.params);
  }
  record["audit"]["stage2_start"] = hashes_of(start.params);

  const auto corpus = gen_instruction_corpus(manifest.instruct_samples, manifest.seeds.data, parse_mix(manifest.mix));
  const auto feats = encode_corpus(model, corpus);
  const Checkpoint final_ck = stage2_finetune(model, corpus, feats, manifest, start, on_step);
  log.flush();
  save_checkpoint(res.dir / "stage2.ckpt", final_ck);
  res.steps += manifest.hp.steps_stage2;
  record["audit"]["stage2"] = hashes_of(final_ck.params);
  record["status"] = "complete";
  write_json_atomic(res.dir / "manifest.json", record);
  return res;
}

void write_run_index(const fs::path& root) {
  json runs = json::array();
  if (fs::exists(root)) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      std::ifstream f(d / "manifest.json");
      const auto m = json::parse(f);
      runs.push_back({{"run_id", m.at("run_id")},
                      {"lm_preset", m.at("lm_preset")},
                      {"vision_variant", m.at("vision_variant")},
                      {"pretrain_connector", m.at("pretrain_connector")},
                      {"status", m.value("status", "unknown")},
                      {"dir", d.filename().string()}});
    }
  }
  fs::create_directories(root);
  write_json_atomic(root / "index.json", {{"runs", runs}});
}

std::vector<RunResult> run_ablation_matrix(const fs::path& root, const RunManifest& base, const std::vector<Cell>& cells,
                                           const StepCallback& progress) {
  for (const auto& c : cells) load_vision_cache(root, c.vision);  // fail before any training
  std::vector<RunResult> out;
  for (const auto& c : cells) {
    out.push_back(run_cell(root, manifest_for(base, c), progress));
    write_run_index(root);
  }
  write_run_index(root);
  return out;
}

Checkpoint load_run(const fs::path& dir) {
  for (const char* name : {"stage2.ckpt", "stage1.ckpt"})
    if (fs::exists(dir / name)) return load_checkpoint(dir / name);
  throw InputError("no checkpoint in " + dir.string());
}

// ---------------------------------------------------------------------------
// Throughput

json ThroughputReport::to_json() const {
  return {{"preset", preset},
          {"steps_per_second", steps_per_second},
          {"tokens_per_second", tokens_per_second},
          {"wall_seconds", wall_seconds},
          {"hardware", hardware}};
}

std::string hardware_description() {
  std::string cpu = "unknown cpu";
  std::ifstream f("/proc/cpuinfo");
  std::string line;
  while (std::getline(f, line)) {
    if (line.rfind("model name", 0) == 0) {
      cpu = line.substr(line.find(':') + 2);
      break;
    }
  }
  return cpu + ", " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads, single-threaded kernels";
}

ThroughputReport measure_throughput(LmPreset preset, const Workload& w, VisionVariant vision, int vocab_size) {
  if (w.measured_steps < 50 || w.warmup_steps < 5)
    throw MeasurementError("throughput needs >= 5 warmup and >= 50 measured steps, got " + std::to_string(w.warmup_steps) +
                           " and " + std::to_string(w.measured_steps));
  if (w.batch_size < 1 || w.generate_items < 1 || w.generate_tokens < 1)
    throw MeasurementError("throughput workload has nothing to measure");
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  MultimodalModel model(make_model_config(preset, vision, vocab_size), w.seed);
  model.frozen = {true, false, false};
  const auto corpus = gen_instruction_corpus(std::max(w.batch_size, w.generate_items), w.seed, default_instruction_mix());
  const auto feats = encode_corpus(model, corpus);
  Hyperparams hp;
  AdamW opt(hp);
  std::map<std::string, std::vector<float>> grads;
  std::vector<const Sample*> batch;
  std::vector<std::span<const float>> fspans;
  for (int i = 0; i < w.batch_size; ++i) {
    batch.push_back(&corpus[static_cast<std::size_t>(i)]);
    fspans.push_back(feats.of(static_cast<std::size_t>(i)));
  }
  auto train_step = [&] {
    batch_loss_and_grads(model, batch, fspans, &grads);
    opt.step(model.params(), grads, 1e-4);
  };
  for (int i = 0; i < w.warmup_steps; ++i) train_step();
  const auto t1 = clock::now();
  for (int i = 0; i < w.measured_steps; ++i) train_step();
  const auto t2 = clock::now();

  // Greedy decoding of a fixed token budget: the end token is disabled so
  // both presets emit exactly the same number of tokens.
  auto gen = [&](int i) {
    const auto& s = corpus[static_cast<std::size_t>(i)];
    return generate_from_features(model, feats.of(static_cast<std::size_t>(i)), s.prompt(), w.generate_tokens, -1).size();
  };
  gen(0);
  const auto t3 = clock::now();
  std::size_t tokens = 0;
  for (int i = 0; i < w.generate_items; ++i) tokens += gen(i);
  const auto t4 = clock::now();

  ThroughputReport r;
  r.preset = to_string(preset);
  r.steps_per_second = w.measured_steps / std::chrono::duration<double>(t2 - t1).count();
  r.tokens_per_second = static_cast<double>(tokens) / std::chrono::duration<double>(t4 - t3).count();
  r.wall_seconds = std::chrono::duration<double>(t4 - t0).count();
  r.hardware = hardware_description();
  return r;
}

}  // namespace mmfm
