#include <cstring>

#include "doctest.h"
#include "gradcheck.hpp"
#include "mmfm/data.hpp"
#include "mmfm/errors.hpp"
#include "mmfm/model.hpp"

using namespace mmfm;

namespace {

Image scene_image(std::uint64_t seed) {
  const auto px = Scene::generate(seed).render();
  return Image::from_bytes(kCanvas, kCanvas, px);
}

Image blank_image() { return Image{kCanvas, kCanvas, std::vector<float>(kCanvas * kCanvas * 3, 0.0f)}; }

std::size_t block_params(std::size_t d, std::size_t r) { return (4 + 2 * r) * d * d + (9 + r) * d; }

std::size_t expected_vision(const VisionTowerConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.embed_dim);
  return static_cast<std::size_t>(c.patch_dim()) * d + d + static_cast<std::size_t>(c.tokens()) * d +
         static_cast<std::size_t>(c.layers) * block_params(d, static_cast<std::size_t>(c.mlp_ratio)) + 2 * d;
}

std::size_t expected_connector(const ModelConfig& c) {
  const std::size_t in = static_cast<std::size_t>(c.vision.embed_dim), h = static_cast<std::size_t>(c.connector.hidden_dim),
                    out = static_cast<std::size_t>(c.language.embed_dim);
  return in * h + h + h * out + out;
}

std::size_t expected_language(const LanguageTowerConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.embed_dim);
  return static_cast<std::size_t>(c.vocab_size) * d + static_cast<std::size_t>(c.context_length) * d +
         static_cast<std::size_t>(c.layers) * block_params(d, static_cast<std::size_t>(c.mlp_ratio)) + 2 * d;
}

ModelConfig tiny_config() {
  ModelConfig c = make_model_config(LmPreset::S, VisionVariant::A, 64);
  c.vision.embed_dim = 8;
  c.vision.layers = 1;
  c.vision.heads = 2;
  c.language.embed_dim = 8;
  c.language.layers = 2;
  c.language.heads = 2;
  c.language.context_length = 24;
  c.connector.hidden_dim = 8;
  return c;
}

std::vector<float> row_of(const Var<float>& logits, int r) {
  const int v = logits.cols();
  auto all = logits.value();
  return {all.begin() + static_cast<std::ptrdiff_t>(r) * v, all.begin() + static_cast<std::ptrdiff_t>(r + 1) * v};
}

}  // namespace

TEST_CASE("encode_image shape and determinism") {
  const MultimodalModel model(make_model_config(LmPreset::S, VisionVariant::A), 3);
  const auto img = scene_image(11);
  const Matrix a = encode_image(model, img);
  CHECK(a.rows == 16);
  CHECK(a.cols == 32);
  const Matrix b = encode_image(model, img);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);

  const MultimodalModel model_b(make_model_config(LmPreset::S, VisionVariant::B), 3);
  CHECK(encode_image(model_b, img).cols == 64);
}

TEST_CASE("identical patches give identical rows without position signal") {
  SUBCASE("zero-initialized tower") {
    MultimodalModel model(make_model_config(LmPreset::S, VisionVariant::A), 3);
    for (const auto& name : model.params().names())
      if (name.starts_with("vision.")) std::fill(model.params().at(name).data.begin(), model.params().at(name).data.end(), 0.0f);
    const Matrix m = encode_image(model, blank_image());
    for (int r = 1; r < m.rows; ++r)
      for (int c = 0; c < m.cols; ++c) CHECK(m.at(r, c) == m.at(0, c));
  }
  SUBCASE("random weights, zero position table") {
    MultimodalModel model(make_model_config(LmPreset::S, VisionVariant::B), 5);
    auto& pos = model.params().at("vision.pos").data;
    std::fill(pos.begin(), pos.end(), 0.0f);
    const Matrix m = encode_image(model, blank_image());
    for (int r = 1; r < m.rows; ++r)
      for (int c = 0; c < m.cols; ++c) CHECK(m.at(r, c) == doctest::Approx(m.at(0, c)).epsilon(1e-5));
  }
}

TEST_CASE("patchify rejects incompatible images") {
  const auto cfg = vision_preset(VisionVariant::A);
  CHECK_THROWS_AS(patchify(Image{30, 30, std::vector<float>(30 * 30 * 3)}, cfg), ConfigError);
  auto odd = cfg;
  odd.image_size = 30;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
  const auto p = patchify(blank_image(), cfg);
  CHECK(p.size() == static_cast<std::size_t>(16 * 192));
}

TEST_CASE("patchify reading order") {
  Image im = blank_image();
  // mark pixel (y=9, x=17): patch row 1, col 2 → patch 6, local (1, 1)
  im.rgb[(9 * 32 + 17) * 3 + 1] = 1.0f;
  const auto p = patchify(im, vision_preset(VisionVariant::A));
  const std::size_t idx = 6 * 192 + (1 * 8 + 1) * 3 + 1;
  CHECK(p[idx] == 1.0f);
  CHECK(std::count(p.begin(), p.end(), 1.0f) == 1);
}

TEST_CASE("connector") {
  ModelConfig cfg = make_model_config(LmPreset::S, VisionVariant::A);
  cfg.language.embed_dim = 48;
  cfg.language.heads = 4;
  cfg.connector.hidden_dim = 48;
  MultimodalModel model(cfg, 9);
  const auto xv = gradcheck::random_values(16 * 32, 1);
  const Matrix x{16, 32, std::vector<float>(xv.begin(), xv.end())};
  const Matrix y = connect(model, x);
  CHECK(y.rows == 16);
  CHECK(y.cols == 48);

  for (const auto& name : model.params().names())
    if (name.starts_with("connector.")) std::fill(model.params().at(name).data.begin(), model.params().at(name).data.end(), 0.0f);
  for (float v : connect(model, x).data) CHECK(v == 0.0f);

  CHECK_THROWS_AS(connect(model, Matrix{16, 64, std::vector<float>(16 * 64, 0.0f)}), DimensionError);
}

TEST_CASE("connector gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::vector<std::string> names = {"connector.fc1.w", "connector.fc1.b", "connector.fc2.w", "connector.fc2.b"};
    const auto r = gradcheck::check(
        [&](Tape<double>&, const std::vector<Var<double>>& v) {
          Bound<double> p;
          for (std::size_t i = 0; i < names.size(); ++i) p.set(names[i], v[i]);
          return gradcheck::weighted_sum(connector_forward(p, v[4]), seed);
        },
        {gradcheck::random_input({6, 5}, seed + 1, 0.5), gradcheck::random_input({5}, seed + 2, 0.5),
         gradcheck::random_input({5, 7}, seed + 3, 0.5), gradcheck::random_input({7}, seed + 4, 0.5),
         gradcheck::random_input({4, 6}, seed + 5)});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("whole-model gradients match finite differences") {
  const ModelConfig cfg = tiny_config();
  const MultimodalModel model(cfg, 21);
  const auto& names = model.params().names();
  std::vector<gradcheck::Input> inputs;
  std::uint64_t salt = 0;
  for (const auto& name : names) {
    const auto& p = model.params().at(name);
    // larger than the init scale so that every path carries signal
    inputs.push_back(gradcheck::random_input(p.shape, 1000 + salt++, 0.3));
    if (name.ends_with(".g"))
      for (double& v : inputs.back().data) v += 1.0;
  }
  const auto patches = patchify(scene_image(5), cfg.vision);
  const std::vector<std::vector<int>> texts = {{2, 10, 20, 3, 37, 4}, {2, 14, 15, 3, 29}};
  const auto layout = PackedLayout::build(cfg.vision.tokens(), texts, cfg.language.context_length);
  std::vector<int> rows, targets;
  for (int b = 0; b < 2; ++b)
    for (std::size_t t = 3; t + 1 < texts[static_cast<std::size_t>(b)].size(); ++t) {
      rows.push_back(layout.text_row(b, static_cast<int>(t)));
      targets.push_back(texts[static_cast<std::size_t>(b)][t + 1]);
    }
  const auto r = gradcheck::check(
      [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
        Bound<double> p;
        for (std::size_t i = 0; i < names.size(); ++i) p.set(names[i], v[i]);
        std::vector<double> px;
        for (int b = 0; b < 2; ++b) px.insert(px.end(), patches.begin(), patches.end());
        const auto feats = vision_forward(p, cfg.vision, tape.leaf({2 * cfg.vision.tokens(), cfg.vision.patch_dim()}, px));
        const auto logits = language_forward(p, cfg.language, connector_forward(p, feats), layout, rows);
        return cross_entropy(logits, std::span<const int>(targets));
      },
      inputs);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("forward_multimodal shapes and errors") {
  const MultimodalModel model(make_model_config(LmPreset::S, VisionVariant::A), 2);
  const auto img = scene_image(3);
  const auto empty = forward_multimodal(model, img, {});
  CHECK(empty.logits.shape() == Shape{16, 512});
  const std::vector<int> ids = {2, 14, 15, 11, 3};
  const auto fp = forward_multimodal(model, img, ids);
  CHECK(fp.logits.shape() == Shape{21, 512});
  CHECK(model.params().at("lm.embed").shape[0] == 512);
  CHECK_THROWS_AS(forward_multimodal(model, img, std::vector<int>(241, 6)), LengthError);
  CHECK_NOTHROW(forward_multimodal(model, img, std::vector<int>(240, 6)));
}

TEST_CASE("text logits are causal and depend on the image") {
  const MultimodalModel model(make_model_config(LmPreset::S, VisionVariant::B), 4);
  const auto img = scene_image(3);
  std::vector<int> ids = {2, 14, 15, 20, 21, 11, 3, 38};
  const auto base = forward_multimodal(model, img, ids);
  for (int t = 0; t < static_cast<int>(ids.size()); ++t) {
    auto changed = ids;
    for (std::size_t k = static_cast<std::size_t>(t) + 1; k < changed.size(); ++k) changed[k] = 40 + static_cast<int>(k);
    const auto fp = forward_multimodal(model, img, changed);
    for (int u = 0; u <= 16 + t; ++u) REQUIRE(row_of(fp.logits, u) == row_of(base.logits, u));
  }
  const auto other = forward_multimodal(model, scene_image(4), ids);
  for (int t = 0; t < static_cast<int>(ids.size()); ++t) CHECK(row_of(other.logits, 16 + t) != row_of(base.logits, 16 + t));
}

TEST_CASE("packed batches match single-sequence forwards") {
  const ModelConfig cfg = make_model_config(LmPreset::S, VisionVariant::A);
  const MultimodalModel model(cfg, 8);
  const std::vector<Image> images = {scene_image(1), scene_image(2), scene_image(3)};
  const std::vector<std::vector<int>> texts = {{2, 14, 15, 3, 38, 4}, {2, 16, 17, 18, 19, 3, 41, 4}, {2, 8, 3, 4}};
  const auto feats = encode_images(model, images);
  Tape<float> tape;
  const auto p = bind_params<float>(tape, model.params(), nullptr);
  const auto layout = PackedLayout::build(cfg.vision.tokens(), texts, cfg.language.context_length);
  std::vector<int> rows;
  for (int r = 0; r < layout.total_rows; ++r) rows.push_back(r);
  const auto embeds = connector_forward(p, tape.view({48, cfg.vision.embed_dim}, std::span<const float>(feats)));
  const auto packed = language_forward(p, cfg.language, embeds, layout, rows);
  for (int b = 0; b < 3; ++b) {
    const auto single = forward_multimodal(model, images[static_cast<std::size_t>(b)], texts[static_cast<std::size_t>(b)]);
    for (int r = 0; r < single.logits.rows(); ++r) {
      const auto a = row_of(single.logits, r);
      const auto c = row_of(packed, layout.segments[static_cast<std::size_t>(b)].row0 + r);
      for (std::size_t k = 0; k < a.size(); ++k) REQUIRE(a[k] == doctest::Approx(c[k]).epsilon(1e-4).scale(1e-4));
    }
  }
}

TEST_CASE("retained attention") {
  const MultimodalModel model(make_model_config(LmPreset::S, VisionVariant::A), 8);
  const std::vector<int> ids = {2, 14, 15, 3};
  auto run = [&] {
    auto fp = forward_multimodal(model, scene_image(9), ids, true);
    fp.tape->backward(pick(fp.logits, fp.logits.rows() - 1, 38));
    return fp;
  };
  const auto a = run();
  const auto b = run();
  const auto& ret = a.tape->retained();
  REQUIRE(ret.size() == 16);  // 4 layers x 4 heads
  for (std::size_t i = 0; i < ret.size(); ++i) {
    const auto va = a.tape->value(ret[i].id);
    const auto vb = b.tape->value(b.tape->retained()[i].id);
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
    CHECK(a.tape->grad(ret[i].id).size() == va.size());
    const int n = 20;
    for (int r = 0; r < n; ++r) {
      double s = 0;
      for (int c = 0; c < n; ++c) s += va[static_cast<std::size_t>(r * n + c)];
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
  }
  // vision is frozen by default: no gradient reaches it
  CHECK(a.params["vision.patch.w"].grad().empty());
  CHECK_FALSE(a.params["lm.embed"].grad().empty());
}

TEST_CASE("generation") {
  const MultimodalModel model(make_model_config(LmPreset::S, VisionVariant::A), 6);
  const auto img = scene_image(12);
  const std::vector<int> prompt = {2, 14, 15, 3};
  CHECK(generate(model, img, prompt, 0, Tokenizer::kEndOfAnswer).empty());
  const auto a = generate(model, img, prompt, 6, Tokenizer::kEndOfAnswer);
  const auto b = generate(model, img, prompt, 6, Tokenizer::kEndOfAnswer);
  CHECK(a == b);
  CHECK(a.size() <= 6);
}

TEST_CASE("parameter counts in closed form") {
  for (auto lm : {LmPreset::S, LmPreset::L})
    for (auto vis : {VisionVariant::A, VisionVariant::B})
      for (int v : {512, 8192}) {
        const auto cfg = make_model_config(lm, vis, v);
        const MultimodalModel m(cfg, 1);
        CHECK(m.params().count("vision.") == expected_vision(cfg.vision));
        CHECK(m.params().count("connector.") == expected_connector(cfg));
        CHECK(m.params().count("lm.") == expected_language(cfg.language));
        CHECK(m.params().at("lm.embed").shape == Shape{v, cfg.language.embed_dim});
      }
  const MultimodalModel s(make_model_config(LmPreset::S, VisionVariant::A), 1), l(make_model_config(LmPreset::L, VisionVariant::A), 1);
  CHECK(l.params().count("lm.") > s.params().count("lm."));
  // S/A: 12·64²+13·64 = 49984 per LM block
  CHECK(block_params(64, 4) == 49984u);
  CHECK(s.params().count("lm.") == 512u * 64 + 256u * 64 + 4u * 49984 + 128);
}

TEST_CASE("swapping the vision variant leaves the language tower untouched") {
  const MultimodalModel a(make_model_config(LmPreset::S, VisionVariant::A), 17), b(make_model_config(LmPreset::S, VisionVariant::B), 17);
  CHECK(a.params().count("lm.") == b.params().count("lm."));
  CHECK(a.params().hash("lm.") == b.params().hash("lm."));
  CHECK(a.params().at("connector.fc1.w").shape == Shape{32, 64});
  CHECK(b.params().at("connector.fc1.w").shape == Shape{64, 64});
  CHECK(a.params().at("connector.fc2.w").shape == b.params().at("connector.fc2.w").shape);
}

TEST_CASE("initialization is deterministic per seed") {
  const auto cfg = make_model_config(LmPreset::S, VisionVariant::A);
  CHECK(MultimodalModel(cfg, 1).params().hash() == MultimodalModel(cfg, 1).params().hash());
  CHECK(MultimodalModel(cfg, 1).params().hash() != MultimodalModel(cfg, 2).params().hash());
}
