#pragma once

// Vision tower, MLP connector and decoder-only language tower, assembled into
// the multimodal model. Image tokens (g² of them) sit at positions
// [0, g²) of every sequence and attend bidirectionally among themselves;
// text tokens follow and attend causally, with full view of the image.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmfm/config.hpp"
#include "mmfm/tensor.hpp"

namespace mmfm {

struct Param {
  Shape shape;
  std::vector<float> data;
};

/// Named parameter arrays in insertion order.
class ParamStore {
 public:
  void add(std::string name, Shape shape, std::vector<float> data);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  /// Number of scalars in parameters whose name starts with `prefix`.
  std::size_t count(std::string_view prefix = "") const;
  /// SHA-256 over (name, shape, raw bytes) of matching parameters, hex.
  std::string hash(std::string_view prefix = "") const;
  /// Copies every parameter of `other` whose name starts with `prefix`;
  /// shapes must match when the name already exists.
  void assign(const ParamStore& other, std::string_view prefix);
  ParamStore subset(std::string_view prefix) const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::size_t> index_;
  std::vector<Param> params_;
};

enum class Component { Vision, Connector, Language };
std::string_view prefix_of(Component c);

struct FrozenFlags {
  bool vision = true;
  bool connector = false;
  bool language = false;
};

ParamStore init_vision_params(const VisionTowerConfig& cfg, std::uint64_t seed);
ParamStore init_connector_params(const ModelConfig& cfg, std::uint64_t seed);
ParamStore init_language_params(const LanguageTowerConfig& cfg, std::uint64_t seed);

class MultimodalModel {
 public:
  MultimodalModel(ModelConfig cfg, std::uint64_t init_seed);
  MultimodalModel(ModelConfig cfg, ParamStore params);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  FrozenFlags frozen;
  bool trainable(const std::string& param_name) const;

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;  // height × width × 3, values in [0, 1]

  static Image from_bytes(int height, int width, std::span<const std::uint8_t> rgb);
};

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;
  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

/// Flattens non-overlapping p×p patches in reading order; each row is the
/// patch's pixels in (y, x, channel) order.
std::vector<float> patchify(const Image& image, const VisionTowerConfig& cfg);

// ---------------------------------------------------------------------------
// Tape-level building blocks, instantiated for float and double.

template <typename T>
class Bound {
 public:
  const Var<T>& operator[](const std::string& name) const;
  void set(const std::string& name, Var<T> v) { vars_[name] = v; }
  const std::map<std::string, Var<T>>& vars() const { return vars_; }

 private:
  std::map<std::string, Var<T>> vars_;
};

/// Puts every parameter on the tape; float tapes alias the store, double
/// tapes copy. `trainable` decides requires_grad per name.
template <typename T>
Bound<T> bind_params(Tape<T>& tape, const ParamStore& params, const std::function<bool(const std::string&)>& trainable);

struct Segment {
  int row0;
  int length;
  int prefix;  // bidirectional prefix length
};

template <typename T>
Var<T> linear(const Bound<T>& p, const std::string& name, const Var<T>& x);

/// Pre-LN transformer block over packed segments. Attention is computed per
/// segment and head; when there is a single segment each head's attention
/// matrix is registered on the tape under `layer`.
template <typename T>
Var<T> transformer_block(const Bound<T>& p, const std::string& prefix, const Var<T>& x, std::span<const Segment> segments,
                         int heads, int layer);

/// patches: (B·g²)×patch_dim → (B·g²)×d_v.
template <typename T>
Var<T> vision_forward(const Bound<T>& p, const VisionTowerConfig& cfg, const Var<T>& patches);

template <typename T>
Var<T> connector_forward(const Bound<T>& p, const Var<T>& x);

/// Packs B sequences [image tokens ‖ text tokens] into one row matrix.
struct PackedLayout {
  int image_tokens = 0;
  std::vector<Segment> segments;
  std::vector<int> positions;
  std::vector<int> gather;    // packed row → row of [image embeds ; text embeds]
  std::vector<int> text_ids;  // all text tokens, concatenated
  int total_rows = 0;

  static PackedLayout build(int image_tokens, std::span<const std::vector<int>> texts, int context_length);
  /// Packed row of text position t of sequence b.
  int text_row(int b, int t) const { return segments[static_cast<std::size_t>(b)].row0 + image_tokens + t; }
};

/// image_embeds: (B·g²)×d_lm, or an invalid Var when image_tokens == 0.
/// Returns logits for `logit_rows` (packed coordinates), shape R×V.
template <typename T>
Var<T> language_forward(const Bound<T>& p, const LanguageTowerConfig& cfg, const Var<T>& image_embeds,
                        const PackedLayout& layout, std::span<const int> logit_rows);

// ---------------------------------------------------------------------------
// Model-level operations (float)

/// Vision tower output for one image: g²×d_v.
Matrix encode_image(const MultimodalModel& model, const Image& image);
/// Vision features for many images, each g²×d_v, concatenated row-wise.
std::vector<float> encode_images(const MultimodalModel& model, std::span<const Image> images);
/// Connector applied to g²×d_v patch features: g²×d_lm.
Matrix connect(const MultimodalModel& model, const Matrix& patches);

struct ForwardPass {
  std::unique_ptr<Tape<float>> tape;
  Bound<float> params;
  Var<float> logits;  // (g² + T)×V
  int image_tokens = 0;
  int text_tokens = 0;
};

/// Full forward over one sequence; logits for every position. Parameters
/// are bound with requires_grad per the model's frozen flags.
ForwardPass forward_multimodal(const MultimodalModel& model, const Image& image, std::span<const int> token_ids,
                               bool retain_attention = false);

/// Greedy decoding from `prompt`; stops after max_new tokens or at
/// end_token (which is not included in the result).
std::vector<int> generate(const MultimodalModel& model, const Image& image, std::span<const int> prompt, int max_new,
                          int end_token);
/// As above with precomputed vision features (g²×d_v).
std::vector<int> generate_from_features(const MultimodalModel& model, std::span<const float> patch_features,
                                        std::span<const int> prompt, int max_new, int end_token);

}  // namespace mmfm
