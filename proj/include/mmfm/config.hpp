#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

namespace mmfm {

enum class VisionVariant { A, B };  // A: contrastive (CLIP-like), B: self-supervised (DinoV2-like)
enum class LmPreset { S, L };

std::string to_string(VisionVariant v);
std::string to_string(LmPreset p);
VisionVariant parse_vision_variant(const std::string& s);
LmPreset parse_lm_preset(const std::string& s);

/// Sectioned key-value text:
///
///   # comment
///   [section]
///   key = value
///
/// Keys before any section header belong to section "".
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::string& text);
  static KeyValueFile load(const std::filesystem::path& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& section, const std::string& key, int fallback) const;
  const std::map<std::string, std::map<std::string, std::string>>& sections() const { return sections_; }

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

struct VisionTowerConfig {
  VisionVariant variant = VisionVariant::A;
  int image_size = 32;
  int patch_grid = 4;
  int embed_dim = 32;
  int layers = 2;
  int heads = 2;
  int mlp_ratio = 4;

  int patch_size() const { return image_size / patch_grid; }
  int patch_dim() const { return patch_size() * patch_size() * 3; }
  int tokens() const { return patch_grid * patch_grid; }
  void validate() const;
};

struct LanguageTowerConfig {
  LmPreset preset = LmPreset::S;
  int vocab_size = 512;
  int embed_dim = 64;
  int layers = 4;
  int heads = 4;
  int context_length = 256;
  int mlp_ratio = 4;

  void validate() const;
};

struct ConnectorConfig {
  int hidden_dim = 64;
};

struct ModelConfig {
  VisionTowerConfig vision;
  LanguageTowerConfig language;
  ConnectorConfig connector;

  void validate() const;
};

VisionTowerConfig vision_preset(VisionVariant v);
LanguageTowerConfig language_preset(LmPreset p, int vocab_size = 512);
/// Preset towers with connector hidden width equal to d_lm.
ModelConfig make_model_config(LmPreset lm, VisionVariant vision, int vocab_size = 512);

/// Reads [vision], [language], [connector]. `variant` / `preset` keys select
/// the built-in preset; any other key overrides a single field.
ModelConfig model_config_from(const KeyValueFile& kv);
std::string model_config_text(const ModelConfig& cfg);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace mmfm
