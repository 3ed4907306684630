#include "mmfm/model.hpp"

#include <algorithm>
#include <cmath>

#include "mmfm/errors.hpp"
#include "mmfm/hash.hpp"
#include "mmfm/rng.hpp"

namespace mmfm {

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(std::string name, Shape shape, std::vector<float> data) {
  if (numel(shape) != data.size()) throw DimensionError("parameter " + name + ": shape " + shape_str(shape) + " mismatch");
  if (index_.count(name)) throw ContractError("duplicate parameter " + name);
  index_.emplace(name, params_.size());
  order_.push_back(name);
  params_.push_back({std::move(shape), std::move(data)});
}

Param& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return params_[it->second];
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return params_[it->second];
}

std::size_t ParamStore::count(std::string_view prefix) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < order_.size(); ++i)
    if (order_[i].starts_with(prefix)) n += params_[i].data.size();
  return n;
}

std::string ParamStore::hash(std::string_view prefix) const {
  Sha256 h;
  for (std::size_t i = 0; i < order_.size(); ++i) {
    if (!order_[i].starts_with(prefix)) continue;
    h.update(order_[i]);
    h.update(shape_str(params_[i].shape));
    const auto& d = params_[i].data;
    h.update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(d.data()), d.size() * sizeof(float)));
  }
  return h.hex();
}

void ParamStore::assign(const ParamStore& other, std::string_view prefix) {
  for (const auto& name : other.names()) {
    if (!name.starts_with(prefix)) continue;
    const Param& src = other.at(name);
    if (contains(name)) {
      Param& dst = at(name);
      if (dst.shape != src.shape)
        throw DimensionError("parameter " + name + ": cannot assign " + shape_str(src.shape) + " onto " + shape_str(dst.shape));
      dst.data = src.data;
    } else {
      add(name, src.shape, src.data);
    }
  }
}

ParamStore ParamStore::subset(std::string_view prefix) const {
  ParamStore out;
  out.assign(*this, prefix);
  return out;
}

std::string_view prefix_of(Component c) {
  switch (c) {
    case Component::Vision: return "vision.";
    case Component::Connector: return "connector.";
    case Component::Language: return "lm.";
  }
  return "";
}

// ---------------------------------------------------------------------------
// Initialization. Each parameter draws from its own stream keyed by name, so
// changing one component leaves the others' initial values untouched.

namespace {

constexpr double kInitStd = 0.02;

void add_normal(ParamStore& ps, std::uint64_t seed, const std::string& name, Shape shape) {
  CounterRng rng(derive_key(seed, fnv1a64(name)));
  std::vector<float> d(numel(shape));
  for (float& x : d) x = static_cast<float>(kInitStd * rng.normal());
  ps.add(name, std::move(shape), std::move(d));
}

void add_const(ParamStore& ps, const std::string& name, Shape shape, float v) {
  ps.add(name, shape, std::vector<float>(numel(shape), v));
}

void add_linear(ParamStore& ps, std::uint64_t seed, const std::string& name, int in, int out) {
  add_normal(ps, seed, name + ".w", {in, out});
  add_const(ps, name + ".b", {out}, 0.0f);
}

void add_layer_norm(ParamStore& ps, const std::string& name, int d) {
  add_const(ps, name + ".g", {d}, 1.0f);
  add_const(ps, name + ".b", {d}, 0.0f);
}

void add_block(ParamStore& ps, std::uint64_t seed, const std::string& pre, int d, int mlp_ratio) {
  add_layer_norm(ps, pre + "ln1", d);
  add_linear(ps, seed, pre + "attn.qkv", d, 3 * d);
  add_linear(ps, seed, pre + "attn.out", d, d);
  add_layer_norm(ps, pre + "ln2", d);
  add_linear(ps, seed, pre + "mlp.fc1", d, mlp_ratio * d);
  add_linear(ps, seed, pre + "mlp.fc2", mlp_ratio * d, d);
}

}  // namespace

ParamStore init_vision_params(const VisionTowerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore ps;
  const int d = cfg.embed_dim;
  add_linear(ps, seed, "vision.patch", cfg.patch_dim(), d);
  add_normal(ps, seed, "vision.pos", {cfg.tokens(), d});
  for (int i = 0; i < cfg.layers; ++i) add_block(ps, seed, "vision.block" + std::to_string(i) + ".", d, cfg.mlp_ratio);
  add_layer_norm(ps, "vision.ln_f", d);
  return ps;
}

ParamStore init_connector_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore ps;
  add_linear(ps, seed, "connector.fc1", cfg.vision.embed_dim, cfg.connector.hidden_dim);
  add_linear(ps, seed, "connector.fc2", cfg.connector.hidden_dim, cfg.language.embed_dim);
  return ps;
}

ParamStore init_language_params(const LanguageTowerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore ps;
  const int d = cfg.embed_dim;
  add_normal(ps, seed, "lm.embed", {cfg.vocab_size, d});
  add_normal(ps, seed, "lm.pos", {cfg.context_length, d});
  for (int i = 0; i < cfg.layers; ++i) add_block(ps, seed, "lm.block" + std::to_string(i) + ".", d, cfg.mlp_ratio);
  add_layer_norm(ps, "lm.ln_f", d);
  return ps;
}

MultimodalModel::MultimodalModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  params_.assign(init_vision_params(cfg_.vision, init_seed), "");
  params_.assign(init_connector_params(cfg_, init_seed), "");
  params_.assign(init_language_params(cfg_.language, init_seed), "");
}

MultimodalModel::MultimodalModel(ModelConfig cfg, ParamStore params) : MultimodalModel(cfg, 0) {
  for (const auto& name : params_.names())
    if (!params.contains(name)) throw ContractError("parameter set is missing " + name);
  params_.assign(params, "");
}

bool MultimodalModel::trainable(const std::string& name) const {
  if (name.starts_with(prefix_of(Component::Vision))) return !frozen.vision;
  if (name.starts_with(prefix_of(Component::Connector))) return !frozen.connector;
  if (name.starts_with(prefix_of(Component::Language))) return !frozen.language;
  return true;
}

Image Image::from_bytes(int height, int width, std::span<const std::uint8_t> rgb) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) throw DimensionError("image byte count mismatch");
  Image im;
  im.height = height;
  im.width = width;
  im.rgb.resize(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) im.rgb[i] = static_cast<float>(rgb[i]) / 255.0f;
  return im;
}

std::vector<float> patchify(const Image& image, const VisionTowerConfig& cfg) {
  if (image.height != cfg.image_size || image.width != cfg.image_size)
    throw ConfigError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                      ", vision tower expects " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  if (image.height % cfg.patch_grid != 0 || image.width % cfg.patch_grid != 0)
    throw ConfigError("image dimensions not divisible into a " + std::to_string(cfg.patch_grid) + "x" +
                      std::to_string(cfg.patch_grid) + " patch grid");
  if (image.rgb.size() != static_cast<std::size_t>(image.height) * image.width * 3)
    throw DimensionError("image pixel buffer does not match its dimensions");
  const int p = cfg.patch_size(), g = cfg.patch_grid;
  std::vector<float> out;
  out.reserve(image.rgb.size());
  for (int pr = 0; pr < g; ++pr)
    for (int pc = 0; pc < g; ++pc)
      for (int y = 0; y < p; ++y) {
        const float* src = image.rgb.data() + (static_cast<std::size_t>(pr * p + y) * image.width + pc * p) * 3;
        out.insert(out.end(), src, src + static_cast<std::size_t>(p) * 3);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Tape-level building blocks

template <typename T>
const Var<T>& Bound<T>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ContractError("parameter " + name + " is not bound");
  return it->second;
}

template <typename T>
Bound<T> bind_params(Tape<T>& tape, const ParamStore& params, const std::function<bool(const std::string&)>& trainable) {
  Bound<T> b;
  for (const auto& name : params.names()) {
    const Param& p = params.at(name);
    const bool rg = trainable ? trainable(name) : false;
    if constexpr (std::is_same_v<T, float>) {
      b.set(name, tape.view(p.shape, std::span<const float>(p.data), rg));
    } else {
      b.set(name, tape.leaf(p.shape, std::vector<T>(p.data.begin(), p.data.end()), rg));
    }
  }
  return b;
}

template <typename T>
Var<T> linear(const Bound<T>& p, const std::string& name, const Var<T>& x) {
  return add(matmul(x, p[name + ".w"]), p[name + ".b"]);
}

template <typename T>
Var<T> transformer_block(const Bound<T>& p, const std::string& pre, const Var<T>& x, std::span<const Segment> segments,
                         int heads, int layer) {
  const int d = x.cols();
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Var<T> h = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]);
  const Var<T> qkv = linear(p, pre + "attn.qkv", h);
  Tape<T>& tape = *x.tape();
  std::vector<Var<T>> seg_out;
  seg_out.reserve(segments.size());
  std::vector<Var<T>> head_out(static_cast<std::size_t>(heads));
  for (const Segment& s : segments) {
    for (int hd = 0; hd < heads; ++hd) {
      const Var<T> q = slice(qkv, s.row0, s.length, hd * dh, dh);
      const Var<T> k = slice(qkv, s.row0, s.length, d + hd * dh, dh);
      const Var<T> v = slice(qkv, s.row0, s.length, 2 * d + hd * dh, dh);
      Var<T> scores = scale(matmul_nt(q, k), inv_sqrt);
      if (s.prefix < s.length) scores = causal_mask(scores, s.prefix);
      const Var<T> attn = softmax_rows(scores);
      if (segments.size() == 1 && layer >= 0) tape.retain_attention(layer, hd, attn);
      head_out[static_cast<std::size_t>(hd)] = matmul(attn, v);
    }
    seg_out.push_back(heads == 1 ? head_out[0] : concat_cols<T>(head_out));
  }
  const Var<T> attn_all = seg_out.size() == 1 ? seg_out[0] : concat_rows<T>(seg_out);
  const Var<T> x1 = add(x, linear(p, pre + "attn.out", attn_all));
  const Var<T> h2 = layer_norm(x1, p[pre + "ln2.g"], p[pre + "ln2.b"]);
  return add(x1, linear(p, pre + "mlp.fc2", gelu(linear(p, pre + "mlp.fc1", h2))));
}

template <typename T>
Var<T> vision_forward(const Bound<T>& p, const VisionTowerConfig& cfg, const Var<T>& patches) {
  const int g2 = cfg.tokens();
  if (patches.cols() != cfg.patch_dim())
    throw DimensionError("vision_forward: patch width " + std::to_string(patches.cols()) + " != " + std::to_string(cfg.patch_dim()));
  if (patches.rows() % g2 != 0) throw DimensionError("vision_forward: rows not a multiple of the patch count");
  const int batch = patches.rows() / g2;
  std::vector<Segment> segs;
  std::vector<int> pos;
  for (int b = 0; b < batch; ++b) {
    segs.push_back({b * g2, g2, g2});
    for (int i = 0; i < g2; ++i) pos.push_back(i);
  }
  Var<T> x = linear(p, "vision.patch", patches);
  x = add(x, batch == 1 ? p["vision.pos"] : gather_rows(p["vision.pos"], std::span<const int>(pos)));
  for (int l = 0; l < cfg.layers; ++l)
    x = transformer_block(p, "vision.block" + std::to_string(l) + ".", x, std::span<const Segment>(segs), cfg.heads, -1);
  return layer_norm(x, p["vision.ln_f.g"], p["vision.ln_f.b"]);
}

template <typename T>
Var<T> connector_forward(const Bound<T>& p, const Var<T>& x) {
  const int in = p["connector.fc1.w"].rows();
  if (x.cols() != in)
    throw DimensionError("connect: input width " + std::to_string(x.cols()) + " does not match vision width " + std::to_string(in));
  return linear(p, "connector.fc2", gelu(linear(p, "connector.fc1", x)));
}

PackedLayout PackedLayout::build(int image_tokens, std::span<const std::vector<int>> texts, int context_length) {
  PackedLayout L;
  L.image_tokens = image_tokens;
  const int batch = static_cast<int>(texts.size());
  const int image_rows = image_tokens * batch;
  int text_off = 0;
  for (int b = 0; b < batch; ++b) {
    const int t = static_cast<int>(texts[static_cast<std::size_t>(b)].size());
    const int n = image_tokens + t;
    if (n > context_length)
      throw LengthError("sequence of " + std::to_string(n) + " tokens exceeds context length " + std::to_string(context_length));
    if (n == 0) throw LengthError("empty sequence");
    L.segments.push_back({L.total_rows, n, image_tokens});
    for (int i = 0; i < image_tokens; ++i) L.gather.push_back(b * image_tokens + i);
    for (int i = 0; i < t; ++i) L.gather.push_back(image_rows + text_off + i);
    for (int i = 0; i < n; ++i) L.positions.push_back(i);
    L.text_ids.insert(L.text_ids.end(), texts[static_cast<std::size_t>(b)].begin(), texts[static_cast<std::size_t>(b)].end());
    text_off += t;
    L.total_rows += n;
  }
  return L;
}

template <typename T>
Var<T> language_forward(const Bound<T>& p, const LanguageTowerConfig& cfg, const Var<T>& image_embeds,
                        const PackedLayout& layout, std::span<const int> logit_rows) {
  const Var<T>& table = p["lm.embed"];
  Var<T> combined;
  if (layout.image_tokens > 0) {
    if (!image_embeds.valid()) throw ContractError("language_forward: image tokens declared but no embeddings given");
    if (image_embeds.cols() != cfg.embed_dim)
      throw DimensionError("language_forward: image embedding width " + std::to_string(image_embeds.cols()) +
                           " != d_lm " + std::to_string(cfg.embed_dim));
    if (layout.text_ids.empty()) {
      combined = image_embeds;
    } else {
      const Var<T> parts[2] = {image_embeds, embedding(table, std::span<const int>(layout.text_ids))};
      combined = concat_rows<T>(parts);
    }
  } else {
    combined = embedding(table, std::span<const int>(layout.text_ids));
  }
  Var<T> x = gather_rows(combined, std::span<const int>(layout.gather));
  x = add(x, gather_rows(p["lm.pos"], std::span<const int>(layout.positions)));
  for (int l = 0; l < cfg.layers; ++l)
    x = transformer_block(p, "lm.block" + std::to_string(l) + ".", x, std::span<const Segment>(layout.segments), cfg.heads, l);
  x = layer_norm(x, p["lm.ln_f.g"], p["lm.ln_f.b"]);
  const bool all_rows = static_cast<int>(logit_rows.size()) == layout.total_rows &&
                        std::equal(logit_rows.begin(), logit_rows.end(), layout.positions.begin()) && layout.segments.size() == 1;
  const Var<T> sel = all_rows ? x : gather_rows(x, logit_rows);
  return matmul_nt(sel, table);
}

#define MMFM_INSTANTIATE_MODEL(T)                                                                                   \
  template class Bound<T>;                                                                                          \
  template Bound<T> bind_params(Tape<T>&, const ParamStore&, const std::function<bool(const std::string&)>&);              \
  template Var<T> linear(const Bound<T>&, const std::string&, const Var<T>&);                                       \
  template Var<T> transformer_block(const Bound<T>&, const std::string&, const Var<T>&, std::span<const Segment>, int, \
                                    int);                                                                           \
  template Var<T> vision_forward(const Bound<T>&, const VisionTowerConfig&, const Var<T>&);                         \
  template Var<T> connector_forward(const Bound<T>&, const Var<T>&);                                                \
  template Var<T> language_forward(const Bound<T>&, const LanguageTowerConfig&, const Var<T>&, const PackedLayout&,  \
                                   std::span<const int>);

MMFM_INSTANTIATE_MODEL(float)
MMFM_INSTANTIATE_MODEL(double)

// ---------------------------------------------------------------------------
// Model-level operations

namespace {

std::function<bool(const std::string&)> none_trainable() {
  return [](const std::string&) { return false; };
}

}  // namespace

std::vector<float> encode_images(const MultimodalModel& model, std::span<const Image> images) {
  if (images.empty()) return {};
  const auto& cfg = model.config().vision;
  std::vector<float> patches;
  for (const auto& im : images) {
    auto p = patchify(im, cfg);
    patches.insert(patches.end(), p.begin(), p.end());
  }
  Tape<float> tape;
  const auto bound = bind_params<float>(tape, model.params(), none_trainable());
  const int rows = cfg.tokens() * static_cast<int>(images.size());
  const auto out = vision_forward(bound, cfg, tape.leaf({rows, cfg.patch_dim()}, std::move(patches)));
  return {out.value().begin(), out.value().end()};
}

Matrix encode_image(const MultimodalModel& model, const Image& image) {
  const auto& cfg = model.config().vision;
  return {cfg.tokens(), cfg.embed_dim, encode_images(model, std::span<const Image>(&image, 1))};
}

Matrix connect(const MultimodalModel& model, const Matrix& patches) {
  Tape<float> tape;
  const auto bound = bind_params<float>(tape, model.params(), none_trainable());
  const auto out = connector_forward(bound, tape.leaf({patches.rows, patches.cols}, patches.data));
  return {out.rows(), out.cols(), {out.value().begin(), out.value().end()}};
}

ForwardPass forward_multimodal(const MultimodalModel& model, const Image& image, std::span<const int> token_ids,
                               bool retain_attention) {
  const auto& cfg = model.config();
  ForwardPass fp;
  fp.tape = std::make_unique<Tape<float>>(retain_attention);
  Tape<float>& tape = *fp.tape;
  fp.params = bind_params<float>(tape, model.params(), [&](const std::string& n) { return model.trainable(n); });
  const std::vector<std::vector<int>> texts{std::vector<int>(token_ids.begin(), token_ids.end())};
  const auto layout = PackedLayout::build(cfg.vision.tokens(), texts, cfg.language.context_length);
  const auto patches = tape.leaf({cfg.vision.tokens(), cfg.vision.patch_dim()}, patchify(image, cfg.vision));
  const auto feats = vision_forward(fp.params, cfg.vision, patches);
  const auto embeds = connector_forward(fp.params, feats);
  fp.logits = language_forward(fp.params, cfg.language, embeds, layout, std::span<const int>(layout.positions));
  fp.image_tokens = cfg.vision.tokens();
  fp.text_tokens = static_cast<int>(token_ids.size());
  return fp;
}

std::vector<int> generate_from_features(const MultimodalModel& model, std::span<const float> patch_features,
                                        std::span<const int> prompt, int max_new, int end_token) {
  const auto& cfg = model.config();
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  if (max_new <= 0) return out;
  const int g2 = cfg.vision.tokens();
  const Matrix embeds = connect(model, Matrix{g2, cfg.vision.embed_dim, {patch_features.begin(), patch_features.end()}});
  for (int step = 0; step < max_new; ++step) {
    Tape<float> tape;
    const auto bound = bind_params<float>(tape, model.params(), none_trainable());
    const std::vector<std::vector<int>> texts{seq};
    const auto layout = PackedLayout::build(g2, texts, cfg.language.context_length);
    const int last = layout.total_rows - 1;
    const auto logits = language_forward(bound, cfg.language, tape.view({g2, embeds.cols}, std::span<const float>(embeds.data)),
                                         layout, std::span<const int>(&last, 1));
    const auto row = logits.value();
    const int next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (next == end_token) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

std::vector<int> generate(const MultimodalModel& model, const Image& image, std::span<const int> prompt, int max_new,
                          int end_token) {
  const auto feats = encode_images(model, std::span<const Image>(&image, 1));
  return generate_from_features(model, feats, prompt, max_new, end_token);
}

}  // namespace mmfm
