#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "mmfm/errors.hpp"
#include "mmfm/hash.hpp"
#include "mmfm/train.hpp"
#include "mmfm/vision_pretrain.hpp"

using namespace mmfm;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

ModelConfig small_config() {
  ModelConfig c = make_model_config(LmPreset::S, VisionVariant::A, 512);
  c.vision.embed_dim = 8;
  c.vision.layers = 1;
  c.vision.heads = 2;
  c.language.embed_dim = 16;
  c.language.layers = 1;
  c.language.heads = 2;
  c.language.context_length = 96;
  c.connector.hidden_dim = 16;
  return c;
}

RunManifest small_manifest() {
  RunManifest m;
  m.hp.batch_size = 4;
  m.hp.steps_stage1 = 3;
  m.hp.steps_stage2 = 3;
  m.pretrain_samples = 8;
  m.instruct_samples = 8;
  return m;
}

Image probe_image(std::uint64_t seed) { return Image::from_bytes(kCanvas, kCanvas, Scene::generate(seed).render()); }

std::vector<float> probe_logits(const MultimodalModel& model) {
  const auto s = gen_instruction_corpus(1, 5, default_instruction_mix()).front();
  const auto fp = forward_multimodal(model, probe_image(5), s.sequence());
  auto v = fp.logits.value();
  return {v.begin(), v.end()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mmfm_test_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  return json::parse(f);
}

json fixture() { return read_json(fs::path(MMFM_FIXTURE_DIR) / "reference_values.json"); }

/// Vision caches holding the untrained towers, enough for plumbing tests.
void seed_vision_caches(const fs::path& root) {
  for (VisionVariant v : {VisionVariant::A, VisionVariant::B}) {
    VisionPretrainOptions o;
    o.steps = 0;
    const auto cfg = vision_preset(v);
    const auto r = toy_pretrain_vision(cfg, gen_vision_corpus(4, 1), o);
    fs::create_directories(vision_cache_path(root, v).parent_path());
    save_checkpoint(vision_cache_path(root, v), vision_checkpoint(cfg, r, o));
  }
}

}  // namespace

TEST_CASE("checkpoint round trip reproduces logits bit for bit") {
  MultimodalModel model(small_config(), 3);
  Checkpoint ck;
  ck.manifest = {{"note", "probe"}};
  ck.stage = Stage::Stage1;
  ck.config = model.config();
  ck.params = model.params();
  ck.optimizer.t = 7;
  ck.optimizer.m.add("connector.fc1.w", {2, 3}, {1, 2, 3, 4, 5, 6});
  ck.optimizer.v.add("connector.fc1.w", {2, 3}, {6, 5, 4, 3, 2, 1});
  ck.step = 42;

  const fs::path dir = fresh_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", ck);
  CHECK_FALSE(fs::exists(dir / "a.ckpt.tmp"));
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.stage == Stage::Stage1);
  CHECK(back.step == 42);
  CHECK(back.optimizer.t == 7);
  CHECK(back.manifest == ck.manifest);
  CHECK(back.optimizer.m.at("connector.fc1.w").data == ck.optimizer.m.at("connector.fc1.w").data);
  CHECK(back.optimizer.v.at("connector.fc1.w").shape == Shape{2, 3});
  CHECK(back.params.hash() == model.params().hash());
  CHECK(back.params.names() == model.params().names());

  const MultimodalModel restored(back.config, back.params);
  const auto a = probe_logits(model), b = probe_logits(restored);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("truncated or corrupted checkpoints raise format errors") {
  MultimodalModel model(small_config(), 3);
  Checkpoint ck;
  ck.config = model.config();
  ck.params = model.params();
  const auto bytes = encode_checkpoint(ck);
  for (std::size_t cut = 0; cut < bytes.size(); cut += 211) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(decode_checkpoint(part), FormatError);
  }
  auto chopped = bytes;
  chopped.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(chopped), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(extra), FormatError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad_magic), doctest::Contains("magic"), FormatError);

  auto bumped = bytes;
  bumped[4] = static_cast<std::uint8_t>(kCheckpointVersion + 1);
  CHECK_THROWS_WITH_AS(decode_checkpoint(bumped), doctest::Contains("unsupported checkpoint version 2"), FormatError);

  const fs::path dir = fresh_dir("trunc");
  {
    std::ofstream f(dir / "t.ckpt", std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), InputError);
}

TEST_CASE("AdamW first steps match a scalar reference") {
  Hyperparams hp;
  hp.grad_clip = 0;
  ParamStore ps;
  ps.add("w", {1, 2}, {0.5f, -0.25f});
  ps.add("b", {2}, {0.1f, 0.2f});
  AdamW opt(hp);
  const std::vector<std::vector<float>> gw = {{0.3f, -0.1f}, {-0.2f, 0.4f}};
  const std::vector<std::vector<float>> gb = {{1.0f, 0.0f}, {0.5f, -0.5f}};
  double w[2] = {0.5f, -0.25f}, b[2] = {0.1f, 0.2f};
  double mw[2] = {}, vw[2] = {}, mb[2] = {}, vb[2] = {};
  const double lr = 0.01;
  for (int t = 1; t <= 2; ++t) {
    opt.step(ps, {{"w", gw[static_cast<std::size_t>(t - 1)]}, {"b", gb[static_cast<std::size_t>(t - 1)]}}, lr);
    const double c1 = 1 - std::pow(0.9, t), c2 = 1 - std::pow(0.999, t);
    for (int i = 0; i < 2; ++i) {
      const double g = gw[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(i)];
      mw[i] = 0.9 * mw[i] + 0.1 * g;
      vw[i] = 0.999 * vw[i] + 0.001 * g * g;
      w[i] -= lr * ((mw[i] / c1) / (std::sqrt(vw[i] / c2) + 1e-8) + 0.01 * w[i]);
      const double h = gb[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(i)];
      mb[i] = 0.9 * mb[i] + 0.1 * h;
      vb[i] = 0.999 * vb[i] + 0.001 * h * h;
      b[i] -= lr * (mb[i] / c1) / (std::sqrt(vb[i] / c2) + 1e-8);  // vectors are not decayed
    }
  }
  for (int i = 0; i < 2; ++i) {
    CHECK(ps.at("w").data[static_cast<std::size_t>(i)] == doctest::Approx(w[i]).epsilon(1e-5));
    CHECK(ps.at("b").data[static_cast<std::size_t>(i)] == doctest::Approx(b[i]).epsilon(1e-5));
  }
  CHECK(opt.state().t == 2);
}

TEST_CASE("AdamW clips by global norm and reports the raw norm") {
  Hyperparams hp;
  hp.grad_clip = 1.0;
  hp.weight_decay = 0;
  ParamStore a, b;
  a.add("x", {2}, {0, 0});
  b.add("x", {2}, {0, 0});
  AdamW clipped(hp), scaled(hp);
  const double norm = clipped.step(a, {{"x", {30.0f, 40.0f}}}, 0.1);
  CHECK(norm == doctest::Approx(50.0));
  scaled.step(b, {{"x", {0.6f, 0.8f}}}, 0.1);  // the clipped gradient itself
  CHECK(a.at("x").data == b.at("x").data);
  CHECK(clipped.state().m.at("x").data[0] == doctest::Approx(0.06).epsilon(1e-6));
}

TEST_CASE("a step with every component frozen changes nothing") {
  MultimodalModel model(small_config(), 9);
  model.frozen = {true, true, true};
  const auto corpus = gen_instruction_corpus(4, 9, default_instruction_mix());
  const auto feats = encode_corpus(model, corpus);
  const std::string before = model.params().hash();
  Hyperparams hp;
  const auto state = train_steps(model, corpus, feats, hp, {2, 1e-2, 1, 4, 9});
  CHECK(model.params().hash() == before);
  CHECK(state.t == 0);
  CHECK(state.m.names().empty());
}

TEST_CASE("same checkpoint and batch give the same next checkpoint") {
  const auto corpus = gen_instruction_corpus(8, 4, default_instruction_mix());
  std::string hashes[2];
  for (auto& h : hashes) {
    MultimodalModel model(small_config(), 4);
    const auto feats = encode_corpus(model, corpus);
    const auto state = train_steps(model, corpus, feats, Hyperparams{}, {2, 1e-3, 2, 4, 4});
    Checkpoint ck;
    ck.config = model.config();
    ck.params = model.params();
    ck.optimizer = state;
    ck.step = 2;
    const auto bytes = encode_checkpoint(ck);
    h = sha256_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  }
  CHECK(hashes[0] == hashes[1]);
}

TEST_CASE("cosine schedule and batch order") {
  CHECK(cosine_lr(0.1, 0, 100) == doctest::Approx(0.1));
  CHECK(cosine_lr(0.1, 50, 100) == doctest::Approx(0.05));
  CHECK(cosine_lr(0.1, 100, 100) == doctest::Approx(0.0));

  const int n = 10, bs = 4;
  std::vector<int> stream;
  for (int step = 0; step < 5; ++step) {
    const auto b = batch_indices(n, bs, step, 17, 2);
    CHECK(b == batch_indices(n, bs, step, 17, 2));
    stream.insert(stream.end(), b.begin(), b.end());
  }
  for (int e = 0; e < 2; ++e) {
    std::set<int> epoch(stream.begin() + e * n, stream.begin() + (e + 1) * n);
    CHECK(epoch.size() == static_cast<std::size_t>(n));
  }
  CHECK(batch_indices(1000, 8, 0, 17, 1) != batch_indices(1000, 8, 0, 17, 2));
  CHECK(batch_indices(1000, 8, 0, 17, 1) != batch_indices(1000, 8, 0, 18, 1));
  CHECK_THROWS_AS(batch_indices(0, 4, 0, 17, 1), InputError);
}

TEST_CASE("supervision covers the answer and the end token") {
  const std::vector<int> seq = {Tokenizer::kUser, 40, 41, Tokenizer::kAssistant, 50, 51, Tokenizer::kEndOfAnswer};
  const auto s = answer_supervision(seq);
  CHECK(s.rows == std::vector<int>{3, 4, 5});
  CHECK(s.targets == std::vector<int>{50, 51, Tokenizer::kEndOfAnswer});
  CHECK_THROWS_AS(answer_supervision(std::vector<int>{Tokenizer::kUser, 40}), InputError);
  CHECK_THROWS_AS(answer_supervision(std::vector<int>{Tokenizer::kUser, Tokenizer::kAssistant}), InputError);
}

TEST_CASE("stage 1 trains only the connector") {
  MultimodalModel model(small_config(), 11);
  const auto corpus = gen_pretrain_corpus(16, 11);
  const auto feats = encode_corpus(model, corpus);
  const std::string vision = model.params().hash("vision."), conn = model.params().hash("connector."),
                    lm = model.params().hash("lm.");
  RunManifest m = small_manifest();
  m.hp.steps_stage1 = 5;
  std::vector<double> losses;
  const auto ck = stage1_pretrain_connector(model, corpus, feats, m, [&](const StepInfo& s) {
    CHECK(s.stage == 1);
    losses.push_back(s.loss);
  });
  CHECK(losses.size() == 5);
  CHECK(ck.stage == Stage::Stage1);
  CHECK(ck.params.hash("vision.") == vision);
  CHECK(ck.params.hash("lm.") == lm);
  CHECK(ck.params.hash("connector.") != conn);
  CHECK(ck.optimizer.m.contains("connector.fc1.w"));
  CHECK_FALSE(ck.optimizer.m.contains("lm.tok_embed"));

  const auto mixed = gen_instruction_corpus(16, 11, default_instruction_mix());
  CHECK_THROWS_AS(stage1_pretrain_connector(model, mixed, encode_corpus(model, mixed), m), InputError);
}

TEST_CASE("stage 2 contracts and freeze") {
  MultimodalModel model(small_config(), 12);
  const auto corpus = gen_instruction_corpus(16, 12, default_instruction_mix());
  const auto feats = encode_corpus(model, corpus);
  Checkpoint init;
  init.config = model.config();
  init.params = model.params();
  RunManifest skip = small_manifest();
  skip.pretrain_connector = false;
  RunManifest pt = small_manifest();

  CHECK_THROWS_AS(stage2_finetune(model, corpus, feats, pt, init), ContractError);
  Checkpoint fake_stage1 = init;
  fake_stage1.stage = Stage::Stage1;
  CHECK_THROWS_AS(stage2_finetune(model, corpus, feats, skip, fake_stage1), ContractError);

  const auto ck = stage2_finetune(model, corpus, feats, skip, init);
  CHECK(ck.stage == Stage::Stage2);
  CHECK(ck.params.hash("vision.") == init.params.hash("vision."));
  CHECK(ck.params.hash("connector.") != init.params.hash("connector."));
  CHECK(ck.params.hash("lm.") != init.params.hash("lm."));
  CHECK_THROWS_AS(stage2_finetune(model, corpus, feats, skip, ck), ContractError);
  CHECK_THROWS_AS(stage2_finetune(model, corpus, feats, pt, ck), ContractError);
}

TEST_CASE("run id is a pure function of the manifest fields") {
  const RunManifest a;
  RunManifest b;
  CHECK(a.run_id() == b.run_id());
  CHECK(a.run_id().rfind("S-A-pt-V512-", 0) == 0);
  CHECK(a.run_id().size() == std::string("S-A-pt-V512-").size() + 10);
  std::set<std::string> ids{a.run_id()};
  b.seeds.order = 18;
  ids.insert(b.run_id());
  b = a;
  b.hp.lr_stage2 = 1e-4;
  ids.insert(b.run_id());
  b = a;
  b.vocab_size = 1024;
  ids.insert(b.run_id());
  b = a;
  b.vision_params_hash = "abc";
  ids.insert(b.run_id());
  b = a;
  b.mix = "existence=1";
  ids.insert(b.run_id());
  CHECK(ids.size() == 6);

  const auto back = RunManifest::from_json(a.to_json());
  CHECK(back.run_id() == a.run_id());
  CHECK(back.fields_json() == a.fields_json());
  auto tampered = a.to_json();
  tampered["run_id"] = "S-A-pt-V512-0000000000";
  CHECK_THROWS_AS(RunManifest::from_json(tampered), ConfigError);
  CHECK_THROWS_AS(RunManifest::from_json(json{{"lm_preset", "S"}}), ConfigError);
}

TEST_CASE("canonical cells and design flags") {
  const auto cells = canonical_cells();
  REQUIRE(cells.size() == 8);
  std::set<std::string> ids;
  for (const auto& c : cells) ids.insert(manifest_for(RunManifest{}, c).run_id());
  CHECK(ids.size() == 8);
  RunManifest m;
  m.lm = LmPreset::L;
  m.vision = VisionVariant::B;
  m.pretrain_connector = false;
  const auto f = design_flags(m);
  CHECK(f.skip_pretrain == 1);
  CHECK(f.dino_like == 1);
  CHECK(f.large_lm == 1);
  const auto base = design_flags(RunManifest{});
  CHECK(base.skip_pretrain + base.dino_like + base.large_lm == 0);
}

TEST_CASE("ablation matrix: missing vision cache is reported before training") {
  const fs::path root = fresh_dir("novision");
  CHECK_THROWS_WITH_AS(run_ablation_matrix(root, small_manifest()), doctest::Contains("pretrain-vision"), InputError);
  CHECK_FALSE(fs::exists(root / "index.json"));
}

TEST_CASE("ablation matrix: eight cells, filters, audits and idempotent reruns") {
  const fs::path root = fresh_dir("matrix");
  seed_vision_caches(root);
  const RunManifest base = small_manifest();

  std::vector<Cell> s_only;
  for (const auto& c : canonical_cells())
    if (c.lm == LmPreset::S) s_only.push_back(c);
  const auto first = run_ablation_matrix(root, base, s_only);
  CHECK(first.size() == 4);
  CHECK(read_json(root / "index.json").at("runs").size() == 4);

  const auto all = run_ablation_matrix(root, base);
  REQUIRE(all.size() == 8);
  int dirs = 0;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) ++dirs;
  CHECK(dirs == 8);
  long long new_steps = 0;
  for (const auto& r : all) new_steps += r.trained ? r.steps : 0;
  CHECK(new_steps == 2 * 6 + 2 * 3);  // only the L cells were new: two pretrain, two skip
  for (const auto& r : all) {
    const json m = read_json(r.dir / "manifest.json");
    CHECK(m.at("status") == "complete");
    CHECK(m.at("run_id") == r.run_id);
    const auto& audit = m.at("audit");
    CHECK(audit.at("stage2").at("vision") == audit.at("init").at("vision"));
    if (m.at("pretrain_connector").get<bool>()) {
      CHECK(audit.at("stage1").at("vision") == audit.at("init").at("vision"));
      CHECK(audit.at("stage1").at("lm") == audit.at("init").at("lm"));
      CHECK(audit.at("stage1").at("connector") != audit.at("init").at("connector"));
      CHECK(fs::exists(r.dir / "stage1.ckpt"));
    } else {
      CHECK(audit.at("stage2_start").at("connector") == audit.at("init").at("connector"));
      CHECK_FALSE(fs::exists(r.dir / "stage1.ckpt"));
    }
    const auto flags = m.at("design_flags");
    CHECK(flags.at("large_lm") == (m.at("lm_preset") == "L" ? 1 : 0));
    CHECK(flags.at("dino_like") == (m.at("vision_variant") == "B" ? 1 : 0));
    CHECK(flags.at("skip_pretrain") == (m.at("pretrain_connector").get<bool>() ? 0 : 1));
    CHECK(load_run(r.dir).stage == Stage::Stage2);
  }

  const auto again = run_ablation_matrix(root, base);
  long long rerun_steps = 0;
  for (const auto& r : again) {
    rerun_steps += r.steps;
    CHECK_FALSE(r.trained);
  }
  CHECK(rerun_steps == 0);
}

TEST_CASE("an interrupted run resumes from its stage-1 checkpoint to the same result") {
  const fs::path root = fresh_dir("resume");
  seed_vision_caches(root);
  const auto done = run_cell(root, small_manifest());
  CHECK(done.steps == 6);
  const std::string final_hash = load_run(done.dir).params.hash();
  std::ifstream log_in(done.dir / "train_log.jsonl");
  const std::string full_log((std::istreambuf_iterator<char>(log_in)), std::istreambuf_iterator<char>());

  fs::remove(done.dir / "stage2.ckpt");
  const auto resumed = run_cell(root, small_manifest());
  CHECK(resumed.trained);
  CHECK(resumed.steps == 3);
  CHECK(load_run(resumed.dir).params.hash() == final_hash);
  std::ifstream log_again(done.dir / "train_log.jsonl");
  CHECK(std::string((std::istreambuf_iterator<char>(log_again)), std::istreambuf_iterator<char>()) == full_log);
}

TEST_CASE("a cached tower that disagrees with the manifest is rejected") {
  const fs::path root = fresh_dir("mismatch");
  seed_vision_caches(root);
  RunManifest m = small_manifest();
  m.vision_params_hash = "deadbeef";
  CHECK_THROWS_AS(run_cell(root, m), ConfigError);
}

TEST_CASE("throughput workloads that are too short are rejected") {
  Workload w;
  w.measured_steps = 0;
  CHECK_THROWS_AS(measure_throughput(LmPreset::S, w), MeasurementError);
  w = Workload{};
  w.warmup_steps = 4;
  CHECK_THROWS_AS(measure_throughput(LmPreset::S, w), MeasurementError);
  w = Workload{};
  w.generate_items = 0;
  CHECK_THROWS_AS(measure_throughput(LmPreset::S, w), MeasurementError);
  const auto r = ThroughputReport{"S", 2.0, 3.0, 4.0, "cpu"}.to_json();
  CHECK(r.at("preset") == "S");
  CHECK(r.at("steps_per_second") == 2.0);
}

TEST_CASE("vision pretraining: zero steps, empty data, widths") {
  VisionPretrainOptions o;
  o.steps = 0;
  const auto cfg = vision_preset(VisionVariant::A);
  const auto r = toy_pretrain_vision(cfg, gen_vision_corpus(8, 1), o);
  CHECK(r.params.hash() == init_vision_params(cfg, o.seed).hash());
  CHECK(r.losses.empty());
  CHECK_THROWS_AS(toy_pretrain_vision(cfg, std::vector<Sample>{}, o), InputError);
  CHECK(vision_preset(VisionVariant::A).embed_dim != vision_preset(VisionVariant::B).embed_dim);
  for (const auto& n : r.params.names()) CHECK(n.rfind("vision.", 0) == 0);

  const auto ck = vision_checkpoint(cfg, r, o);
  CHECK(ck.stage == Stage::Vision);
  CHECK(ck.config.vision.embed_dim == cfg.embed_dim);
  CHECK(ck.manifest.at("params_hash") == r.params.hash());
}

TEST_CASE("vision pretraining: self-distillation runs and is deterministic") {
  VisionPretrainOptions o;
  o.steps = 3;
  o.batch_size = 8;
  const auto cfg = vision_preset(VisionVariant::B);
  const auto corpus = gen_vision_corpus(32, 2);
  const auto a = toy_pretrain_vision(cfg, corpus, o);
  const auto b = toy_pretrain_vision(cfg, corpus, o);
  CHECK(a.losses.size() == 3);
  for (double l : a.losses) CHECK(std::isfinite(l));
  CHECK(a.params.hash() == b.params.hash());
  CHECK(a.params.hash() != init_vision_params(cfg, o.seed).hash());
}

TEST_CASE("vision pretraining: contrastive loss falls over 200 steps on seed 17") {
  VisionPretrainOptions o;
  o.steps = 201;
  const auto cfg = vision_preset(VisionVariant::A);
  const auto r = toy_pretrain_vision(cfg, gen_vision_corpus(o.corpus_size, o.seed), o);
  const auto fx = fixture().at("vision_contrastive_seed17");
  CHECK(r.losses[200] < r.losses[0]);
  CHECK(r.losses[0] == doctest::Approx(fx.at("loss_step0").get<double>()).epsilon(1e-3));
  CHECK(r.losses[200] == doctest::Approx(fx.at("loss_step200").get<double>()).epsilon(2e-2));
}

TEST_CASE("stage 1 loss falls over the first 200 steps of the reference schedule") {
  RunManifest m;
  MultimodalModel model(m.model_config(), m.seeds.init);
  const fs::path root = fresh_dir("stage1_ref");
  VisionPretrainOptions vo;
  const auto vr = toy_pretrain_vision(vision_preset(VisionVariant::A), gen_vision_corpus(vo.corpus_size, vo.seed), vo);
  model.params().assign(vr.params, "vision.");
  model.frozen = {true, false, true};
  const auto corpus = gen_pretrain_corpus(m.pretrain_samples, m.seeds.data);
  const auto feats = encode_corpus(model, corpus);
  StageOptions opts{1, m.hp.lr_stage1, 201, m.hp.batch_size, m.seeds.order, m.hp.steps_stage1};
  std::vector<double> losses;
  train_steps(model, corpus, feats, m.hp, opts, [&](const StepInfo& s) { losses.push_back(s.loss); });
  const auto fx = fixture().at("stage1_seed17");
  CHECK(losses[200] < losses[0]);
  CHECK(losses[0] == doctest::Approx(fx.at("loss_step0").get<double>()).epsilon(1e-3));
  CHECK(losses[200] == doctest::Approx(fx.at("loss_step200").get<double>()).epsilon(2e-2));
}
