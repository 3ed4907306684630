#include "mmfm/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mmfm/errors.hpp"
#include "mmfm/rng.hpp"

namespace mmfm {

namespace {

constexpr std::array<ShapeKind, 3> kShapes{ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle};
constexpr std::array<Color, 4> kColors{Color::Red, Color::Green, Color::Blue, Color::Yellow};
constexpr std::array<TaskTag, 5> kTasks{TaskTag::Caption, TaskTag::Existence, TaskTag::Attribute, TaskTag::Count,
                                        TaskTag::Spatial};

template <typename Vec>
void shuffle(Vec& v, CounterRng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::string object_phrase(ShapeKind s, Color c) {
  return std::string(name_of(c)) + " " + std::string(name_of(s));
}

}  // namespace

std::string_view name_of(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "?";
}

std::string_view plural_of(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circles";
    case ShapeKind::Square: return "squares";
    case ShapeKind::Triangle: return "triangles";
  }
  return "?";
}

std::string_view name_of(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
    case Color::Yellow: return "yellow";
  }
  return "?";
}

std::string_view name_of(TaskTag t) {
  switch (t) {
    case TaskTag::Caption: return "caption";
    case TaskTag::Existence: return "existence";
    case TaskTag::Attribute: return "attribute";
    case TaskTag::Count: return "count";
    case TaskTag::Spatial: return "spatial";
  }
  return "?";
}

TaskTag parse_task_tag(std::string_view s) {
  for (TaskTag t : kTasks)
    if (name_of(t) == s) return t;
  throw InputError("unknown task tag '" + std::string(s) + "'");
}

ShapeKind parse_shape(std::string_view s) {
  for (ShapeKind k : kShapes)
    if (name_of(k) == s) return k;
  throw InputError("unknown shape '" + std::string(s) + "'");
}

Color parse_color(std::string_view s) {
  for (Color c : kColors)
    if (name_of(c) == s) return c;
  throw InputError("unknown color '" + std::string(s) + "'");
}

std::array<std::uint8_t, 3> rgb_of(Color c) {
  switch (c) {
    case Color::Red: return {255, 0, 0};
    case Color::Green: return {0, 255, 0};
    case Color::Blue: return {0, 0, 255};
    case Color::Yellow: return {255, 255, 0};
  }
  return {0, 0, 0};
}

// ---------------------------------------------------------------------------
// Scene

Scene Scene::generate(std::uint64_t seed) {
  CounterRng rng(seed);
  Scene s;
  s.seed = seed;
  const int n = 1 + static_cast<int>(rng.below(kMaxObjects));
  std::vector<int> cells(kPlacementGrid * kPlacementGrid);
  std::iota(cells.begin(), cells.end(), 0);
  shuffle(cells, rng);
  std::vector<int> combos(kShapes.size() * kColors.size());
  std::iota(combos.begin(), combos.end(), 0);
  shuffle(combos, rng);
  for (int i = 0; i < n; ++i) {
    const int combo = combos[static_cast<std::size_t>(i)];
    s.objects.push_back({kShapes[static_cast<std::size_t>(combo) / kColors.size()],
                         kColors[static_cast<std::size_t>(combo) % kColors.size()], cells[static_cast<std::size_t>(i)] / kPlacementGrid,
                         cells[static_cast<std::size_t>(i)] % kPlacementGrid});
  }
  return s;
}

namespace {

// Local cell coordinates y, x in [0, 8); every shape covers the center (4, 4).
bool covers(ShapeKind s, int y, int x) {
  switch (s) {
    case ShapeKind::Square: return y >= 1 && y <= 6 && x >= 1 && x <= 6;
    case ShapeKind::Circle: return (2 * y - 7) * (2 * y - 7) + (2 * x - 7) * (2 * x - 7) <= 41;
    case ShapeKind::Triangle: return y >= 1 && y <= 6 && std::abs(2 * x - 7) <= y;
  }
  return false;
}

}  // namespace

std::vector<std::uint8_t> Scene::render() const {
  std::vector<std::uint8_t> img(static_cast<std::size_t>(kCanvas) * kCanvas * 3, 0);
  for (const auto& o : objects) {
    const auto rgb = rgb_of(o.color);
    for (int y = 0; y < kCellPixels; ++y) {
      for (int x = 0; x < kCellPixels; ++x) {
        if (!covers(o.shape, y, x)) continue;
        const std::size_t p = (static_cast<std::size_t>(o.row * kCellPixels + y) * kCanvas + (o.col * kCellPixels + x)) * 3;
        img[p] = rgb[0];
        img[p + 1] = rgb[1];
        img[p + 2] = rgb[2];
      }
    }
  }
  return img;
}

std::vector<SceneObject> Scene::reading_order() const {
  auto out = objects;
  std::sort(out.begin(), out.end(), [](const SceneObject& a, const SceneObject& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  return out;
}

std::vector<float> to_float_image(std::span<const std::uint8_t> rgb) {
  std::vector<float> out(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) out[i] = static_cast<float>(rgb[i]) / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Tokenizer

const std::vector<std::string>& Tokenizer::closed_vocabulary() {
  static const std::vector<std::string> words = {
      "<pad>", "<unk>", "USER:", "ASSISTANT:", "<eoa>", "<image>",
      "a", "and", "describe", "the", "image", ".", "is", "there", "what", "color", "how", "many", "objects", "are",
      "where", "relative", "to", "?", "of", "object", "shape",
      "red", "green", "blue", "yellow",
      "circle", "square", "triangle", "circles", "squares", "triangles",
      "yes", "no", "0", "1", "2", "3", "4",
      "left", "right", "above", "below",
      "(a)", "(b)", "(c)", "(d)",
  };
  return words;
}

int Tokenizer::closed_size() { return static_cast<int>(closed_vocabulary().size()); }

Tokenizer::Tokenizer(int vocab_size) : vocab_size_(vocab_size) {
  if (vocab_size < closed_size())
    throw ConfigError("vocabulary size " + std::to_string(vocab_size) + " is smaller than the closed task vocabulary (" +
                      std::to_string(closed_size()) + " words)");
  const auto& words = closed_vocabulary();
  for (std::size_t i = 0; i < words.size(); ++i) index_.emplace(words[i], static_cast<int>(i));
}

int Tokenizer::id_of(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) ids.push_back(id_of(w));
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  const auto& words = closed_vocabulary();
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size_) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    if (!out.empty()) out += ' ';
    out += id < closed_size() ? words[static_cast<std::size_t>(id)] : "<filler>";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Samples

std::vector<int> Sample::sequence() const {
  std::vector<int> seq{Tokenizer::kUser};
  for (const auto& t : conversation) {
    if (t.role == Role::Assistant) seq.push_back(Tokenizer::kAssistant);
    seq.insert(seq.end(), t.ids.begin(), t.ids.end());
  }
  seq.push_back(Tokenizer::kEndOfAnswer);
  return seq;
}

std::vector<int> Sample::prompt() const {
  std::vector<int> seq{Tokenizer::kUser};
  for (const auto& t : conversation) {
    if (t.role == Role::Assistant) {
      seq.push_back(Tokenizer::kAssistant);
      break;
    }
    seq.insert(seq.end(), t.ids.begin(), t.ids.end());
  }
  return seq;
}

TaskMix default_instruction_mix() {
  TaskMix m;
  for (TaskTag t : kTasks) m[t] = 0.2;
  return m;
}

TaskMix parse_mix(std::string_view text) {
  TaskMix m;
  std::string s(text);
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream in(s);
  std::string item;
  while (in >> item) {
    auto sep = item.find('=');
    if (sep == std::string::npos) sep = item.find(':');
    if (sep == std::string::npos) throw InputError("mix entry '" + item + "' is not task=weight");
    const TaskTag tag = parse_task_tag(item.substr(0, sep));
    try {
      m[tag] = std::stod(item.substr(sep + 1));
    } catch (const std::exception&) {
      throw InputError("mix entry '" + item + "' has a non-numeric weight");
    }
  }
  validate_mix(m);
  return m;
}

void validate_mix(const TaskMix& mix) {
  if (mix.empty()) throw InputError("task mix is empty");
  double total = 0;
  for (const auto& [tag, w] : mix) {
    if (!(w >= 0.0)) throw InputError("task mix weight for " + std::string(name_of(tag)) + " is negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-6) throw InputError("task mix proportions sum to " + std::to_string(total) + ", not 1");
}

std::string mix_string(const TaskMix& mix) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [tag, w] : mix) {
    os << (first ? "" : ",") << name_of(tag) << '=' << w;
    first = false;
  }
  return os.str();
}

std::uint64_t scene_seed(SeedNamespace ns, std::uint64_t seed, std::uint64_t index) {
  constexpr std::uint64_t kLow56 = (std::uint64_t{1} << 56) - 1;
  return (static_cast<std::uint64_t>(ns) << 56) | (mix64(derive_key(seed, index)) & kLow56);
}

SeedNamespace namespace_of(std::uint64_t s) { return static_cast<SeedNamespace>(s >> 56); }

std::string caption_of(const Scene& scene) {
  std::string out;
  for (const auto& o : scene.reading_order()) {
    if (!out.empty()) out += " and ";
    out += "a " + object_phrase(o.shape, o.color);
  }
  return out;
}

namespace {

std::string relation_of(const SceneObject& a, const SceneObject& b) {
  const int dr = a.row - b.row, dc = a.col - b.col;
  if (std::abs(dc) > std::abs(dr)) return dc < 0 ? "left" : "right";
  return dr < 0 ? "above" : "below";
}

Sample finish(const Scene& scene, TaskTag task, std::string question, std::string answer) {
  static const Tokenizer tok(Tokenizer::closed_size());
  Sample s;
  s.scene = scene;
  s.task = task;
  s.question = std::move(question);
  s.answer = std::move(answer);
  s.gold_answer = tok.encode(s.answer);
  s.conversation = {{Role::User, tok.encode(s.question)}, {Role::Assistant, s.gold_answer}};
  return s;
}

}  // namespace

std::optional<Sample> make_task_sample(const Scene& scene, TaskTag task, std::uint64_t choice_key,
                                       std::optional<bool> existence_positive) {
  CounterRng rng(choice_key);
  const auto& objs = scene.objects;
  switch (task) {
    case TaskTag::Caption:
      return finish(scene, task, "describe the image .", caption_of(scene));
    case TaskTag::Existence: {
      const bool positive = existence_positive ? *existence_positive : rng.bernoulli(0.5);
      if (positive) {
        const auto& o = objs[rng.below(objs.size())];
        return finish(scene, task, "is there a " + object_phrase(o.shape, o.color) + " ?", "yes");
      }
      std::vector<std::pair<ShapeKind, Color>> absent;
      for (ShapeKind s : kShapes)
        for (Color c : kColors)
          if (std::none_of(objs.begin(), objs.end(), [&](const SceneObject& o) { return o.shape == s && o.color == c; }))
            absent.emplace_back(s, c);
      const auto& [s, c] = absent[rng.below(absent.size())];
      return finish(scene, task, "is there a " + object_phrase(s, c) + " ?", "no");
    }
    case TaskTag::Attribute: {
      std::vector<const SceneObject*> unique;
      for (const auto& o : objs)
        if (std::count_if(objs.begin(), objs.end(), [&](const SceneObject& p) { return p.shape == o.shape; }) == 1)
          unique.push_back(&o);
      if (unique.empty()) return std::nullopt;
      const auto* o = unique[rng.below(unique.size())];
      return finish(scene, task, "what color is the " + std::string(name_of(o->shape)) + " ?", std::string(name_of(o->color)));
    }
    case TaskTag::Count: {
      const auto variant = rng.below(3);
      if (variant == 0) return finish(scene, task, "how many objects are there ?", std::to_string(objs.size()));
      if (variant == 1) {
        const Color c = kColors[rng.below(kColors.size())];
        const auto n = std::count_if(objs.begin(), objs.end(), [&](const SceneObject& o) { return o.color == c; });
        return finish(scene, task, "how many " + std::string(name_of(c)) + " objects are there ?", std::to_string(n));
      }
      const ShapeKind s = kShapes[rng.below(kShapes.size())];
      const auto n = std::count_if(objs.begin(), objs.end(), [&](const SceneObject& o) { return o.shape == s; });
      return finish(scene, task, "how many " + std::string(plural_of(s)) + " are there ?", std::to_string(n));
    }
    case TaskTag::Spatial: {
      std::vector<std::pair<std::size_t, std::size_t>> pairs;
      for (std::size_t i = 0; i < objs.size(); ++i)
        for (std::size_t j = 0; j < objs.size(); ++j)
          if (i != j && std::abs(objs[i].row - objs[j].row) != std::abs(objs[i].col - objs[j].col)) pairs.emplace_back(i, j);
      if (pairs.empty()) return std::nullopt;
      const auto [i, j] = pairs[rng.below(pairs.size())];
      const auto& a = objs[i];
      const auto& b = objs[j];
      return finish(scene, task,
                    "where is the " + object_phrase(a.shape, a.color) + " relative to the " + object_phrase(b.shape, b.color) + " ?",
                    relation_of(a, b));
    }
  }
  return std::nullopt;
}

namespace {

constexpr int kMaxAttempts = 256;

std::string item_id(const std::string& prefix, std::uint64_t seed, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return prefix + "-" + std::to_string(seed) + "-" + buf;
}

Sample make_item(SeedNamespace ns, std::uint64_t seed, int index, TaskTag task, std::optional<bool> positive,
                 const std::string& prefix) {
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::uint64_t slot = (static_cast<std::uint64_t>(index) << 8) | static_cast<std::uint64_t>(attempt);
    const Scene scene = Scene::generate(scene_seed(ns, seed, slot));
    auto s = make_task_sample(scene, task, derive_key(scene.seed, 0xC401CE), positive);
    if (s) {
      s->id = item_id(prefix, seed, index);
      return *std::move(s);
    }
  }
  throw InputError("could not construct a " + std::string(name_of(task)) + " item");
}

TaskTag draw_task(const TaskMix& mix, std::uint64_t seed, int index) {
  CounterRng rng(derive_key(derive_key(seed, 0x7A5C), static_cast<std::uint64_t>(index)));
  const double u = rng.uniform();
  double acc = 0;
  TaskTag last = mix.begin()->first;
  for (const auto& [tag, w] : mix) {
    if (w <= 0) continue;
    acc += w;
    last = tag;
    if (u < acc) return tag;
  }
  return last;
}

}  // namespace

std::vector<Sample> gen_pretrain_corpus(int n, std::uint64_t seed) {
  if (n < 1) throw InputError("pretrain corpus size must be >= 1");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(make_item(SeedNamespace::Pretrain, seed, i, TaskTag::Caption, std::nullopt, "pretrain"));
  return out;
}

std::vector<Sample> gen_instruction_corpus(int n, std::uint64_t seed, const TaskMix& mix) {
  validate_mix(mix);
  if (n < 1) throw InputError("instruction corpus size must be >= 1");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(make_item(SeedNamespace::Instruct, seed, i, draw_task(mix, seed, i), std::nullopt, "instruct"));
  return out;
}

std::vector<Sample> gen_vision_corpus(int n, std::uint64_t seed) {
  if (n < 1) throw InputError("vision corpus size must be >= 1");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(make_item(SeedNamespace::VisionPretrain, seed, i, TaskTag::Caption, std::nullopt, "vision"));
  return out;
}

const std::vector<std::string>& benchmark_names() {
  static const std::vector<std::string> names = {"toy-gqa", "toy-pope", "toy-vqa"};
  return names;
}

TaskMix benchmark_mix(const std::string& name) {
  if (name == "toy-gqa") return {{TaskTag::Attribute, 0.5}, {TaskTag::Spatial, 0.5}};
  if (name == "toy-pope") return {{TaskTag::Existence, 1.0}};
  if (name == "toy-vqa")
    return {{TaskTag::Existence, 0.2}, {TaskTag::Attribute, 0.2}, {TaskTag::Count, 0.4}, {TaskTag::Spatial, 0.2}};
  throw InputError("unknown benchmark '" + name + "' (expected toy-gqa, toy-pope or toy-vqa)");
}

void BenchmarkSpec::validate() const {
  benchmark_mix(name);
  if (size < 1) throw InputError("benchmark size must be >= 1");
}

std::vector<Sample> gen_benchmark(const BenchmarkSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.size));
  if (spec.name == "toy-pope") {
    std::vector<bool> positive(static_cast<std::size_t>(spec.size), false);
    std::fill_n(positive.begin(), spec.size / 2, true);
    CounterRng rng(derive_key(spec.seed, 0xB0B));
    shuffle(positive, rng);
    for (int i = 0; i < spec.size; ++i)
      out.push_back(make_item(SeedNamespace::ToyPope, spec.seed, i, TaskTag::Existence, positive[static_cast<std::size_t>(i)], spec.name));
    return out;
  }
  const auto ns = spec.name == "toy-gqa" ? SeedNamespace::ToyGqa : SeedNamespace::ToyVqa;
  const auto mix = benchmark_mix(spec.name);
  for (int i = 0; i < spec.size; ++i)
    out.push_back(make_item(ns, spec.seed, i, draw_task(mix, spec.seed, i), std::nullopt, spec.name));
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

std::filesystem::path save_corpus(const std::filesystem::path& dir, const CorpusInfo& info, std::span<const Sample> samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream img(dir / "images.bin", std::ios::binary);
    for (const auto& s : samples) {
      const auto px = s.scene.render();
      img.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    }
    if (!img) throw FormatError("failed writing " + (dir / "images.bin").string());
  }
  {
    std::ofstream conv(dir / "conversations.jsonl");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      nlohmann::json objs = nlohmann::json::array();
      for (const auto& o : s.scene.objects)
        objs.push_back({{"shape", name_of(o.shape)}, {"color", name_of(o.color)}, {"row", o.row}, {"col", o.col}});
      nlohmann::json line = {{"id", s.id},           {"index", i},         {"task", name_of(s.task)},
                             {"scene_seed", s.scene.seed}, {"objects", objs}, {"user", s.question},
                             {"assistant", s.answer}};
      conv << line.dump() << '\n';
    }
  }
  nlohmann::json manifest = {
      {"format", "mmfm-corpus/1"},
      {"kind", info.kind},
      {"name", info.name},
      {"n", samples.size()},
      {"seed", info.seed},
      {"mix", info.mix},
      {"image_shape", {kCanvas, kCanvas, 3}},
      {"image_dtype", "u8"},
      {"images", "images.bin"},
      {"conversations", "conversations.jsonl"},
      {"closed_vocabulary_size", Tokenizer::closed_size()},
  };
  const auto path = dir / "manifest.json";
  std::ofstream(path) << manifest.dump(2) << '\n';
  return path;
}

std::vector<Sample> load_corpus(const std::filesystem::path& dir, CorpusInfo* info) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw InputError("no corpus manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corpus manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "mmfm-corpus/1") throw FormatError("unsupported corpus format in " + dir.string());
  if (info) {
    info->kind = manifest.at("kind").get<std::string>();
    info->name = manifest.at("name").get<std::string>();
    info->n = manifest.at("n").get<int>();
    info->seed = manifest.at("seed").get<std::uint64_t>();
    info->mix = manifest.at("mix").get<std::string>();
  }
  const int n = manifest.at("n").get<int>();
  std::ifstream conv(dir / manifest.at("conversations").get<std::string>());
  std::ifstream img(dir / manifest.at("images").get<std::string>(), std::ios::binary);
  if (!conv || !img) throw InputError("corpus files missing in " + dir.string());
  std::vector<Sample> out;
  std::string line;
  const std::size_t image_bytes = static_cast<std::size_t>(kCanvas) * kCanvas * 3;
  std::vector<std::uint8_t> px(image_bytes);
  while (std::getline(conv, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Scene scene;
    scene.seed = j.at("scene_seed").get<std::uint64_t>();
    for (const auto& o : j.at("objects"))
      scene.objects.push_back({parse_shape(o.at("shape").get<std::string>()), parse_color(o.at("color").get<std::string>()),
                               o.at("row").get<int>(), o.at("col").get<int>()});
    Sample s = finish(scene, parse_task_tag(j.at("task").get<std::string>()), j.at("user").get<std::string>(),
                      j.at("assistant").get<std::string>());
    s.id = j.at("id").get<std::string>();
    if (!img.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(image_bytes)))
      throw FormatError("images.bin is shorter than the conversation list");
    if (px != scene.render()) throw FormatError("image for " + s.id + " does not match its scene description");
    out.push_back(std::move(s));
  }
  if (static_cast<int>(out.size()) != n) throw FormatError("corpus manifest says " + std::to_string(n) + " samples, found " + std::to_string(out.size()));
  return out;
}

}  // namespace mmfm
