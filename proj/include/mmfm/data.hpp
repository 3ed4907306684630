#pragma once

// Procedural scenes, conversations and benchmark analogs with exact ground
// truth. Every corpus is a pure function of (kind, n, seed, mix).

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mmfm {

enum class ShapeKind { Circle, Square, Triangle };
enum class Color { Red, Green, Blue, Yellow };
enum class TaskTag { Caption, Existence, Attribute, Count, Spatial };

inline constexpr int kCanvas = 32;
inline constexpr int kPlacementGrid = 4;
inline constexpr int kCellPixels = kCanvas / kPlacementGrid;
inline constexpr int kMaxObjects = 4;

std::string_view name_of(ShapeKind s);
std::string_view plural_of(ShapeKind s);
std::string_view name_of(Color c);
std::string_view name_of(TaskTag t);
TaskTag parse_task_tag(std::string_view s);
ShapeKind parse_shape(std::string_view s);
Color parse_color(std::string_view s);
std::array<std::uint8_t, 3> rgb_of(Color c);

struct SceneObject {
  ShapeKind shape;
  Color color;
  int row;  // placement-grid cell
  int col;
  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;

  /// Draws 1..4 objects with distinct cells and distinct (shape, color).
  static Scene generate(std::uint64_t seed);
  /// 32×32×3 bytes, row-major (y, x, channel), black background.
  std::vector<std::uint8_t> render() const;
  /// Objects sorted in reading order (row, then column).
  std::vector<SceneObject> reading_order() const;
};

/// Pixel values in [0, 1] as the vision tower consumes them.
std::vector<float> to_float_image(std::span<const std::uint8_t> rgb);

// ---------------------------------------------------------------------------
// Tokenizer

/// Whitespace word tokenizer over a closed task vocabulary. Task words occupy
/// ids [0, closed_size()), identical for every vocabulary size V; ids at and
/// above closed_size() are filler rows that only widen the embedding table.
/// Words outside the closed set map to <unk>.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kUser = 2;
  static constexpr int kAssistant = 3;
  static constexpr int kEndOfAnswer = 4;
  static constexpr int kImage = 5;

  explicit Tokenizer(int vocab_size);

  static const std::vector<std::string>& closed_vocabulary();
  static int closed_size();

  int vocab_size() const { return vocab_size_; }
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;
  int id_of(std::string_view word) const;

 private:
  int vocab_size_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Samples

enum class Role { User, Assistant };

struct Turn {
  Role role;
  std::vector<int> ids;
};

struct Sample {
  std::string id;
  Scene scene;
  TaskTag task;
  std::string question;  // user text
  std::string answer;    // gold answer text
  std::vector<Turn> conversation;
  std::vector<int> gold_answer;

  /// USER: <question> ASSISTANT: <answer> <eoa>, the text half of the
  /// training sequence (image tokens are prepended by the model).
  std::vector<int> sequence() const;
  /// Prompt up to and including ASSISTANT:, used for generation.
  std::vector<int> prompt() const;
};

using TaskMix = std::map<TaskTag, double>;

TaskMix default_instruction_mix();
/// "caption=0.2,existence=0.8"
TaskMix parse_mix(std::string_view text);
void validate_mix(const TaskMix& mix);
std::string mix_string(const TaskMix& mix);

/// Seed namespaces keep scene seeds of different corpora disjoint: the top
/// byte of every scene seed is the namespace.
enum class SeedNamespace : std::uint8_t {
  Pretrain = 1,
  Instruct = 2,
  ToyGqa = 3,
  ToyPope = 4,
  ToyVqa = 5,
  VisionPretrain = 6,
};

std::uint64_t scene_seed(SeedNamespace ns, std::uint64_t seed, std::uint64_t index);
SeedNamespace namespace_of(std::uint64_t scene_seed);

std::string caption_of(const Scene& scene);

std::vector<Sample> gen_pretrain_corpus(int n, std::uint64_t seed);
std::vector<Sample> gen_instruction_corpus(int n, std::uint64_t seed, const TaskMix& mix);
/// Caption samples from the vision-pretraining namespace, disjoint from
/// every connector and instruction corpus.
std::vector<Sample> gen_vision_corpus(int n, std::uint64_t seed);

struct BenchmarkSpec {
  std::string name;  // toy-gqa | toy-pope | toy-vqa
  int size = 0;
  std::uint64_t seed = 0;
  void validate() const;
};

const std::vector<std::string>& benchmark_names();
TaskMix benchmark_mix(const std::string& name);
std::vector<Sample> gen_benchmark(const BenchmarkSpec& spec);

/// Task-question construction, exposed for tests: builds a sample of `task`
/// on `scene`, or nothing when the scene cannot support the task.
std::optional<Sample> make_task_sample(const Scene& scene, TaskTag task, std::uint64_t choice_key,
                                       std::optional<bool> existence_positive = std::nullopt);

// ---------------------------------------------------------------------------
// Persistence: <dir>/manifest.json, images.bin (n × 32×32×3 bytes),
// conversations.jsonl (one sample per line).

struct CorpusInfo {
  std::string kind;  // pretrain | instruct | benchmark
  std::string name;
  int n = 0;
  std::uint64_t seed = 0;
  std::string mix;
};

std::filesystem::path save_corpus(const std::filesystem::path& dir, const CorpusInfo& info,
                                  std::span<const Sample> samples);
std::vector<Sample> load_corpus(const std::filesystem::path& dir, CorpusInfo* info = nullptr);

}  // namespace mmfm
