#include "mmfm/vision_pretrain.hpp"

#include <algorithm>
#include <cmath>

#include "mmfm/errors.hpp"
#include "mmfm/hash.hpp"
#include "mmfm/rng.hpp"

namespace mmfm {

nlohmann::json VisionPretrainOptions::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"seed", seed},
          {"corpus_size", corpus_size},
          {"temperature", temperature},
          {"joint_dim", joint_dim},
          {"prototypes", prototypes},
          {"teacher_temperature", teacher_temperature},
          {"student_temperature", student_temperature},
          {"teacher_momentum", teacher_momentum},
          {"center_momentum", center_momentum},
          {"max_shift", max_shift}};
}

namespace {

void add_head(ParamStore& ps, std::uint64_t seed, const std::string& name, Shape shape, bool zero = false) {
  CounterRng rng(derive_key(seed, fnv1a64(name)));
  std::vector<float> d(numel(shape));
  if (!zero)
    for (float& x : d) x = static_cast<float>(0.02 * rng.normal());
  ps.add(name, std::move(shape), std::move(d));
}

/// Mean over each image's g² token rows: B × d.
Var<float> pooled(const Bound<float>& p, const VisionTowerConfig& cfg, Tape<float>& tape, std::vector<float> patches, int batch) {
  const int g2 = cfg.tokens();
  const auto feats = vision_forward(p, cfg, tape.leaf({batch * g2, cfg.patch_dim()}, std::move(patches)));
  std::vector<float> pool(static_cast<std::size_t>(batch) * batch * g2, 0.0f);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < g2; ++i) pool[static_cast<std::size_t>(b) * batch * g2 + b * g2 + i] = 1.0f / g2;
  return matmul(tape.leaf({batch, batch * g2}, std::move(pool)), feats);
}

std::vector<float> patches_of(const Sample& s, const VisionTowerConfig& cfg) {
  return patchify(Image::from_bytes(kCanvas, kCanvas, s.scene.render()), cfg);
}

/// Random translation (zero fill) and brightness scaling.
std::vector<float> augmented_patches(const Sample& s, const VisionTowerConfig& cfg, CounterRng& rng, int max_shift) {
  const auto px = s.scene.render();
  const int span = 2 * max_shift + 1;
  const int dy = static_cast<int>(rng.below(static_cast<std::uint64_t>(span))) - max_shift;
  const int dx = static_cast<int>(rng.below(static_cast<std::uint64_t>(span))) - max_shift;
  const float bright = static_cast<float>(0.7 + 0.3 * rng.uniform());
  Image im{kCanvas, kCanvas, std::vector<float>(px.size(), 0.0f)};
  for (int y = 0; y < kCanvas; ++y)
    for (int x = 0; x < kCanvas; ++x) {
      const int sy = y - dy, sx = x - dx;
      if (sy < 0 || sy >= kCanvas || sx < 0 || sx >= kCanvas) continue;
      for (int c = 0; c < 3; ++c)
        im.rgb[(static_cast<std::size_t>(y) * kCanvas + x) * 3 + c] =
            bright * static_cast<float>(px[(static_cast<std::size_t>(sy) * kCanvas + sx) * 3 + c]) / 255.0f;
    }
  return patchify(im, cfg);
}

std::map<std::string, std::vector<float>> collect_grads(const Bound<float>& p) {
  std::map<std::string, std::vector<float>> grads;
  for (const auto& [name, var] : p.vars()) {
    if (!var.requires_grad()) continue;
    const auto g = var.grad();
    if (!g.empty()) grads.emplace(name, std::vector<float>(g.begin(), g.end()));
  }
  return grads;
}

std::vector<const Sample*> batch_of(std::span<const Sample> data, const VisionPretrainOptions& o, int step) {
  std::vector<const Sample*> out;
  for (int i : batch_indices(data.size(), o.batch_size, step, o.seed, 100)) out.push_back(&data[static_cast<std::size_t>(i)]);
  return out;
}

Hyperparams optimizer_settings() {
  Hyperparams hp;
  hp.grad_clip = 1.0;
  return hp;
}

void contrastive(const VisionTowerConfig& cfg, std::span<const Sample> data, const VisionPretrainOptions& o, ParamStore& ps,
                 VisionPretrainResult& res, const StepCallback& on_step) {
  const Tokenizer tok(Tokenizer::closed_size());
  const int e = o.joint_dim;
  add_head(ps, o.seed, "head.img.w", {cfg.embed_dim, e});
  add_head(ps, o.seed, "head.txt.embed", {Tokenizer::closed_size(), e});
  add_head(ps, o.seed, "head.txt.w", {e, e});
  AdamW opt(optimizer_settings());
  for (int step = 0; step < o.steps; ++step) {
    const auto batch = batch_of(data, o, step);
    const int B = static_cast<int>(batch.size());
    Tape<float> tape;
    const auto p = bind_params<float>(tape, ps, [](const std::string&) { return true; });
    std::vector<float> patches;
    std::vector<int> ids, diag(static_cast<std::size_t>(B));
    std::vector<int> lengths;
    for (int b = 0; b < B; ++b) {
      const auto pb = patches_of(*batch[static_cast<std::size_t>(b)], cfg);
      patches.insert(patches.end(), pb.begin(), pb.end());
      const auto t = tok.encode(batch[static_cast<std::size_t>(b)]->answer);
      ids.insert(ids.end(), t.begin(), t.end());
      lengths.push_back(static_cast<int>(t.size()));
      diag[static_cast<std::size_t>(b)] = b;
    }
    std::vector<float> avg(static_cast<std::size_t>(B) * ids.size(), 0.0f);
    for (int b = 0, off = 0; b < B; off += lengths[static_cast<std::size_t>(b)], ++b)
      for (int k = 0; k < lengths[static_cast<std::size_t>(b)]; ++k)
        avg[static_cast<std::size_t>(b) * ids.size() + static_cast<std::size_t>(off + k)] = 1.0f / static_cast<float>(lengths[static_cast<std::size_t>(b)]);
    const auto img = normalize_rows(matmul(pooled(p, cfg, tape, std::move(patches), B), p["head.img.w"]));
    const auto words = embedding(p["head.txt.embed"], std::span<const int>(ids));
    const auto txt = normalize_rows(matmul(matmul(tape.leaf({B, static_cast<int>(ids.size())}, std::move(avg)), words), p["head.txt.w"]));
    const auto logits = scale(matmul_nt(img, txt), 1.0 / o.temperature);
    const auto loss = scale(add(cross_entropy(logits, std::span<const int>(diag)), cross_entropy(transpose(logits), std::span<const int>(diag))), 0.5);
    tape.backward(loss);
    const double lr = cosine_lr(o.lr, step, o.steps);
    const double norm = opt.step(ps, collect_grads(p), lr);
    res.losses.push_back(loss.item());
    if (on_step) on_step({0, step, loss.item(), lr, norm});
  }
}

void self_distillation(const VisionTowerConfig& cfg, std::span<const Sample> data, const VisionPretrainOptions& o, ParamStore& ps,
                       VisionPretrainResult& res, const StepCallback& on_step) {
  const int K = o.prototypes;
  add_head(ps, o.seed, "head.proto.w", {cfg.embed_dim, K});
  ParamStore teacher = ps;
  std::vector<double> center(static_cast<std::size_t>(K), 0.0);
  AdamW opt(optimizer_settings());
  for (int step = 0; step < o.steps; ++step) {
    const auto batch = batch_of(data, o, step);
    const int B = static_cast<int>(batch.size());
    CounterRng rng(derive_key(derive_key(o.seed, 0xA06), static_cast<std::uint64_t>(step)));
    std::vector<float> v1, v2;
    for (const auto* s : batch) {
      const auto a = augmented_patches(*s, cfg, rng, o.max_shift);
      const auto b = augmented_patches(*s, cfg, rng, o.max_shift);
      v1.insert(v1.end(), a.begin(), a.end());
      v2.insert(v2.end(), b.begin(), b.end());
    }
    // Teacher targets: softmax((t - center) / τ_t), no gradient.
    std::vector<double> t_mean(static_cast<std::size_t>(K), 0.0);
    auto teacher_probs = [&](const std::vector<float>& views) {
      Tape<float> tape;
      const auto p = bind_params<float>(tape, teacher, nullptr);
      const auto t = matmul(normalize_rows(pooled(p, cfg, tape, views, B)), p["head.proto.w"]);
      const auto tv = t.value();
      std::vector<float> probs(tv.size());
      for (int b = 0; b < B; ++b) {
        double mx = -1e300;
        for (int k = 0; k < K; ++k) {
          const double z = (tv[static_cast<std::size_t>(b * K + k)] - center[static_cast<std::size_t>(k)]) / o.teacher_temperature;
          mx = std::max(mx, z);
        }
        double sum = 0;
        for (int k = 0; k < K; ++k) {
          const double z = (tv[static_cast<std::size_t>(b * K + k)] - center[static_cast<std::size_t>(k)]) / o.teacher_temperature;
          sum += (probs[static_cast<std::size_t>(b * K + k)] = static_cast<float>(std::exp(z - mx)));
        }
        for (int k = 0; k < K; ++k) probs[static_cast<std::size_t>(b * K + k)] /= static_cast<float>(sum);
        for (int k = 0; k < K; ++k) t_mean[static_cast<std::size_t>(k)] += tv[static_cast<std::size_t>(b * K + k)] / (2.0 * B);
      }
      return probs;
    };
    const auto p1 = teacher_probs(v1);
    const auto p2 = teacher_probs(v2);

    Tape<float> tape;
    const auto p = bind_params<float>(tape, ps, [](const std::string&) { return true; });
    const auto s1 = scale(matmul(normalize_rows(pooled(p, cfg, tape, std::move(v1), B)), p["head.proto.w"]), 1.0 / o.student_temperature);
    const auto s2 = scale(matmul(normalize_rows(pooled(p, cfg, tape, std::move(v2), B)), p["head.proto.w"]), 1.0 / o.student_temperature);
    const auto loss = scale(add(soft_cross_entropy(s2, std::span<const float>(p1)), soft_cross_entropy(s1, std::span<const float>(p2))), 0.5);
    tape.backward(loss);
    const double lr = cosine_lr(o.lr, step, o.steps);
    const double norm = opt.step(ps, collect_grads(p), lr);

    for (const auto& name : ps.names()) {
      auto& t = teacher.at(name).data;
      const auto& s = ps.at(name).data;
      for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<float>(o.teacher_momentum * t[i] + (1.0 - o.teacher_momentum) * s[i]);
    }
    for (int k = 0; k < K; ++k)
      center[static_cast<std::size_t>(k)] = o.center_momentum * center[static_cast<std::size_t>(k)] + (1.0 - o.center_momentum) * t_mean[static_cast<std::size_t>(k)];
    res.losses.push_back(loss.item());
    if (on_step) on_step({0, step, loss.item(), lr, norm});
  }
}

}  // namespace

VisionPretrainResult toy_pretrain_vision(const VisionTowerConfig& cfg, std::span<const Sample> dataset,
                                         const VisionPretrainOptions& opts, const StepCallback& on_step) {
  if (dataset.empty()) throw InputError("vision pretraining needs a non-empty dataset");
  if (opts.steps < 0 || opts.batch_size < 1) throw ConfigError("vision pretraining steps/batch out of range");
  ParamStore ps = init_vision_params(cfg, opts.seed);
  VisionPretrainResult res;
  if (opts.steps > 0) {
    if (cfg.variant == VisionVariant::A) contrastive(cfg, dataset, opts, ps, res, on_step);
    else self_distillation(cfg, dataset, opts, ps, res, on_step);
  }
  res.params = ps.subset("vision.");
  return res;
}

Checkpoint vision_checkpoint(const VisionTowerConfig& cfg, const VisionPretrainResult& result, const VisionPretrainOptions& opts) {
  Checkpoint ck;
  ck.stage = Stage::Vision;
  ck.config = make_model_config(LmPreset::S, cfg.variant);
  ck.config.vision = cfg;
  ck.params = result.params;
  ck.step = static_cast<long long>(result.losses.size());
  ck.manifest = {{"objective", cfg.variant == VisionVariant::A ? "contrastive" : "self-distillation"},
                 {"options", opts.to_json()},
                 {"loss_first", result.losses.empty() ? 0.0 : result.losses.front()},
                 {"loss_last", result.losses.empty() ? 0.0 : result.losses.back()},
                 {"params_hash", result.params.hash("vision.")}};
  return ck;
}

}  // namespace mmfm
