#include "mmfm/relevancy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mmfm/errors.hpp"

namespace mmfm {

namespace fs = std::filesystem;
using json = nlohmann::json;

SquareMatrix SquareMatrix::identity(int n) {
  SquareMatrix m = zeros(n);
  for (int i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

SquareMatrix SquareMatrix::zeros(int n) { return {n, std::vector<double>(static_cast<std::size_t>(n) * n, 0.0)}; }

void AttentionTrace::validate() const {
  const std::size_t want = static_cast<std::size_t>(layers) * heads * n * n;
  if (layers < 0 || heads <= 0 || n <= 0 || attention.size() != want || gradient.size() != want)
    throw DimensionError("attention trace arrays must be layers x heads x n x n");
  if (target_row < 0 || target_row >= n) throw DimensionError("trace target row outside the sequence");
  if (image_tokens < 0 || image_tokens > n || grid * grid != image_tokens)
    throw DimensionError("trace image layout is inconsistent");
}

AttentionTrace capture_trace(const MultimodalModel& model, const Image& image, std::span<const int> prompt, int position,
                             int max_new) {
  auto generated = generate(model, image, prompt, max_new, Tokenizer::kEndOfAnswer);
  if (static_cast<int>(generated.size()) < max_new) generated.push_back(Tokenizer::kEndOfAnswer);
  if (position < 0 || position >= static_cast<int>(generated.size()))
    throw InputError("target position " + std::to_string(position) + " outside the generated range [0, " +
                     std::to_string(generated.size()) + ")");
  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), generated.begin(), generated.begin() + position);

  const auto& cfg = model.config();
  auto fp = forward_multimodal(model, image, seq, true);
  AttentionTrace t;
  t.layers = cfg.language.layers;
  t.heads = cfg.language.heads;
  t.image_tokens = fp.image_tokens;
  t.grid = cfg.vision.patch_grid;
  t.n = fp.image_tokens + fp.text_tokens;
  t.target_row = t.n - 1;
  t.target_token = generated[static_cast<std::size_t>(position)];
  t.generated = generated;
  const auto target = pick(fp.logits, t.target_row, t.target_token);
  fp.tape->backward(target);

  const std::size_t nn = static_cast<std::size_t>(t.n) * t.n;
  t.attention.assign(static_cast<std::size_t>(t.layers) * t.heads * nn, 0.0);
  t.gradient.assign(t.attention.size(), 0.0);
  for (const auto& ra : fp.tape->retained()) {
    if (ra.layer < 0 || ra.layer >= t.layers || ra.head < 0 || ra.head >= t.heads) continue;
    const auto v = fp.tape->value(ra.id);
    const auto g = fp.tape->grad(ra.id);
    if (v.size() != nn) throw DimensionError("retained attention has an unexpected size");
    const std::size_t off = t.offset(ra.layer, ra.head);
    std::copy(v.begin(), v.end(), t.attention.begin() + static_cast<std::ptrdiff_t>(off));
    if (!g.empty()) std::copy(g.begin(), g.end(), t.gradient.begin() + static_cast<std::ptrdiff_t>(off));
  }
  return t;
}

SquareMatrix layer_relevance(const AttentionTrace& t, int layer, bool normalize) {
  const int n = t.n;
  SquareMatrix bar = SquareMatrix::zeros(n);
  for (int h = 0; h < t.heads; ++h) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double x = t.g(layer, h, i, j) * t.a(layer, h, i, j);
        if (std::isnan(x)) throw NumericError("relevancy: NaN in layer " + std::to_string(layer) + " gradient x attention");
        if (x > 0) bar(i, j) += x;
      }
    }
  }
  for (double& v : bar.data) v /= t.heads;
  if (normalize) {
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int j = 0; j < n; ++j) s += bar(i, j);
      if (s > 0)
        for (int j = 0; j < n; ++j) bar(i, j) /= s;
    }
  }
  for (double v : bar.data)
    if (!(v >= 0) || !std::isfinite(v)) throw NumericError("relevancy: invalid layer relevance entry");
  return bar;
}

RelevancyMap propagate(const AttentionTrace& t, bool normalize) {
  t.validate();
  const int n = t.n;
  RelevancyMap m;
  m.r = SquareMatrix::identity(n);
  m.target_row = t.target_row;
  m.image_tokens = t.image_tokens;
  m.grid = t.grid;
  m.normalized = normalize;
  std::vector<double> row(static_cast<std::size_t>(n));
  for (int l = 0; l < t.layers; ++l) {
    const SquareMatrix bar = layer_relevance(t, l, normalize);
    SquareMatrix next = m.r;
    for (int i = 0; i < n; ++i) {
      std::fill(row.begin(), row.end(), 0.0);
      for (int k = 0; k < n; ++k) {
        const double b = bar(i, k);
        if (b == 0) continue;
        for (int j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] += b * m.r(k, j);
      }
      for (int j = 0; j < n; ++j) next(i, j) += row[static_cast<std::size_t>(j)];
    }
    m.r = std::move(next);
  }
  for (double v : m.r.data)
    if (std::isnan(v)) throw NumericError("relevancy: NaN after propagation");
  return m;
}

Heatmap image_heatmap(const RelevancyMap& map) {
  const int g2 = map.image_tokens;
  if (g2 <= 0 || map.grid * map.grid != g2) throw DimensionError("relevancy map has no image grid");
  Heatmap h;
  h.grid = map.grid;
  h.values.resize(static_cast<std::size_t>(g2));
  double lo = map.r(map.target_row, 0), hi = lo;
  for (int j = 0; j < g2; ++j) {
    const double v = map.r(map.target_row, j);
    h.values[static_cast<std::size_t>(j)] = v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) {
    std::fill(h.values.begin(), h.values.end(), 0.5);
    h.degenerate = true;
    return h;
  }
  for (double& v : h.values) v = (v - lo) / (hi - lo);
  return h;
}

Canvas render_overlay(const Heatmap& heat, const Image& image, int scale) {
  if (heat.grid <= 0 || image.height % heat.grid != 0 || image.width % heat.grid != 0)
    throw DimensionError("heatmap grid does not divide the image");
  Canvas c(image.width * scale, image.height * scale);
  const int cell_h = image.height / heat.grid, cell_w = image.width / heat.grid;
  for (int y = 0; y < c.height(); ++y) {
    for (int x = 0; x < c.width(); ++x) {
      const int iy = y / scale, ix = x / scale;
      const Rgb hc = heat_color(heat.at(iy / cell_h, ix / cell_w));
      const auto* px = &image.rgb[(static_cast<std::size_t>(iy) * image.width + ix) * 3];
      const auto mix = [](float img, std::uint8_t h) {
        return static_cast<std::uint8_t>(std::lround(0.5 * std::clamp(img, 0.0f, 1.0f) * 255.0 + 0.5 * h));
      };
      c.set(x, y, {mix(px[0], hc.r), mix(px[1], hc.g), mix(px[2], hc.b)});
    }
  }
  return c;
}

json AttentionStats::to_json() const { return {{"image_mass", image_mass}, {"entropy", entropy}}; }

double slice_entropy(std::span<const double> slice) {
  double total = 0;
  for (double v : slice) {
    if (v < 0) throw InputError("entropy of a slice with negative entries");
    total += v;
  }
  if (total <= 0) return 0.0;
  double h = 0;
  for (double v : slice)
    if (v > 0) h -= (v / total) * std::log(v / total);
  return h;
}

AttentionStats attention_stats(const RelevancyMap& map) {
  AttentionStats s;
  double img = 0, all = 0;
  std::vector<double> slice;
  for (int j = 0; j < map.r.n; ++j) {
    const double v = map.r(map.target_row, j);
    all += v;
    if (j < map.image_tokens) {
      img += v;
      slice.push_back(v);
    }
  }
  s.image_mass = all > 0 ? img / all : 0.0;
  s.entropy = slice_entropy(slice);
  return s;
}

json relevancy_report(std::span<const CompareInput> inputs, const Sample& item, int position, const fs::path& out_dir,
                      bool normalize) {
  if (inputs.empty()) throw InputError("relevancy report needs at least one run");
  for (const auto& in : inputs) {
    if (!in.model) throw InputError("relevancy report: run " + in.label + " has no model");
    if (in.vocab_size != inputs[0].vocab_size || in.model->config().language.vocab_size != inputs[0].model->config().language.vocab_size)
      throw ConfigError("runs use different tokenizers (vocabulary " + std::to_string(inputs[0].vocab_size) + " vs " +
                        std::to_string(in.vocab_size) + ")");
  }
  const CompareInput& a = inputs[0];
  const Tokenizer tok(a.vocab_size);
  const Image image = Image::from_bytes(kCanvas, kCanvas, item.scene.render());
  const auto prompt = item.prompt();

  constexpr int kScale = 8, kPad = 12, kHeader = 28, kFooter = 36;
  const int panel = kCanvas * kScale;
  const int count = static_cast<int>(inputs.size());
  Canvas fig(count * panel + (count + 1) * kPad, panel + kHeader + kFooter);
  json runs = json::array();
  int x = kPad;
  for (const CompareInput* in = inputs.data(); in != inputs.data() + inputs.size(); ++in) {
    const auto trace = capture_trace(*in->model, image, prompt, position);
    const auto map = propagate(trace, normalize);
    const auto heat = image_heatmap(map);
    const auto stats = attention_stats(map);
    fig.blit(render_overlay(heat, image, kScale), x, kHeader);
    fig.text(x, 8, in->label, {0, 0, 0});
    char buf[96];
    std::snprintf(buf, sizeof buf, "mass %.3f  entropy %.3f", stats.image_mass, stats.entropy);
    fig.text(x, kHeader + panel + 8, buf, {0, 0, 0});
    fig.text(x, kHeader + panel + 20, "token: " + tok.decode(std::span<const int>(&trace.target_token, 1)), {80, 80, 80});
    json r = stats.to_json();
    r["run"] = in->label;
    r["degenerate"] = heat.degenerate;
    r["target_token"] = tok.decode(std::span<const int>(&trace.target_token, 1));
    r["generated"] = tok.decode(trace.generated);
    r["heatmap"] = heat.values;
    runs.push_back(r);
    x += panel + kPad;
  }
  const json out = {{"item_id", item.id}, {"question", item.question}, {"position", position}, {"normalized", normalize},
                    {"runs", runs}};
  fs::create_directories(out_dir);
  fig.write_png(out_dir / "relevancy.png");
  std::ofstream(out_dir / "relevancy.json") << out.dump(2) << '\n';
  return out;
}

json compare_runs(const CompareInput& a, const CompareInput& b, const Sample& item, int position, const fs::path& out_dir,
                  bool normalize) {
  if (!a.model || !b.model) throw InputError("compare_runs needs two models");
  const CompareInput both[2] = {a, b};
  return relevancy_report(both, item, position, out_dir, normalize);
}

namespace {
constexpr char kTraceMagic[4] = {'M', 'M', 'R', 'T'};
constexpr std::uint16_t kTraceVersion = 1;
static_assert(std::endian::native == std::endian::little, "trace I/O assumes a little-endian host");
}  // namespace

void save_trace(const fs::path& path, const AttentionTrace& t) {
  t.validate();
  const std::string header = json{{"layers", t.layers},         {"heads", t.heads},
                                  {"n", t.n},                   {"image_tokens", t.image_tokens},
                                  {"grid", t.grid},             {"target_row", t.target_row},
                                  {"target_token", t.target_token}, {"generated", t.generated}}
                                 .dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  const auto len = static_cast<std::uint32_t>(header.size());
  f.write(kTraceMagic, 4);
  f.write(reinterpret_cast<const char*>(&kTraceVersion), 2);
  f.write(reinterpret_cast<const char*>(&len), 4);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  f.write(reinterpret_cast<const char*>(t.attention.data()), static_cast<std::streamsize>(t.attention.size() * sizeof(double)));
  f.write(reinterpret_cast<const char*>(t.gradient.data()), static_cast<std::streamsize>(t.gradient.size() * sizeof(double)));
  if (!f) throw InputError("cannot write " + path.string());
}

AttentionTrace load_trace(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open " + path.string());
  char magic[4];
  std::uint16_t version = 0;
  std::uint32_t len = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&version), 2);
  f.read(reinterpret_cast<char*>(&len), 4);
  if (!f || std::memcmp(magic, kTraceMagic, 4) != 0) throw FormatError("not a relevancy trace");
  if (version != kTraceVersion) throw FormatError("unsupported trace version " + std::to_string(version));
  std::string header(len, '\0');
  f.read(header.data(), len);
  AttentionTrace t;
  try {
    const auto h = json::parse(header);
    t.layers = h.at("layers");
    t.heads = h.at("heads");
    t.n = h.at("n");
    t.image_tokens = h.at("image_tokens");
    t.grid = h.at("grid");
    t.target_row = h.at("target_row");
    t.target_token = h.at("target_token");
    t.generated = h.at("generated").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("trace header is malformed: ") + e.what());
  }
  const std::size_t count = static_cast<std::size_t>(t.layers) * t.heads * t.n * t.n;
  t.attention.resize(count);
  t.gradient.resize(count);
  f.read(reinterpret_cast<char*>(t.attention.data()), static_cast<std::streamsize>(count * sizeof(double)));
  f.read(reinterpret_cast<char*>(t.gradient.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!f || f.peek() != std::char_traits<char>::eof()) throw FormatError("trace payload is truncated or has trailing bytes");
  return t;
}

}  // namespace mmfm
