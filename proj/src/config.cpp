#include "mmfm/config.hpp"

#include <fstream>
#include <sstream>

#include "mmfm/errors.hpp"

namespace mmfm {

std::string to_string(VisionVariant v) { return v == VisionVariant::A ? "A" : "B"; }
std::string to_string(LmPreset p) { return p == LmPreset::S ? "S" : "L"; }

VisionVariant parse_vision_variant(const std::string& s) {
  if (s == "A" || s == "A_contrastive" || s == "clip") return VisionVariant::A;
  if (s == "B" || s == "B_selfsup" || s == "dino") return VisionVariant::B;
  throw ConfigError("unknown vision variant '" + s + "' (expected A or B)");
}

LmPreset parse_lm_preset(const std::string& s) {
  if (s == "S") return LmPreset::S;
  if (s == "L") return LmPreset::L;
  throw ConfigError("unknown language preset '" + s + "' (expected S or L)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValueFile KeyValueFile::parse(const std::string& text) {
  KeyValueFile kv;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      kv.sections_[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    kv.sections_[section][key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

bool KeyValueFile::has(const std::string& section, const std::string& key) const {
  auto it = sections_.find(section);
  return it != sections_.end() && it->second.count(key) > 0;
}

std::string KeyValueFile::get(const std::string& section, const std::string& key, const std::string& fallback) const {
  auto it = sections_.find(section);
  if (it == sections_.end()) return fallback;
  auto kt = it->second.find(key);
  return kt == it->second.end() ? fallback : kt->second;
}

int KeyValueFile::get_int(const std::string& section, const std::string& key, int fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get(section, key, "");
  try {
    std::size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("[" + section + "] " + key + ": expected an integer, got '" + v + "'");
  }
}

void VisionTowerConfig::validate() const {
  if (patch_grid < 2) throw ConfigError("vision.patch_grid must be >= 2");
  if (image_size % patch_grid != 0)
    throw ConfigError("vision.image_size " + std::to_string(image_size) + " not divisible by patch_grid " +
                      std::to_string(patch_grid));
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
    throw ConfigError("vision.embed_dim must be a positive multiple of vision.heads");
  if (layers < 0 || mlp_ratio <= 0) throw ConfigError("vision.layers / mlp_ratio out of range");
}

void LanguageTowerConfig::validate() const {
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
    throw ConfigError("language.embed_dim must be a positive multiple of language.heads");
  if (vocab_size <= 0 || context_length <= 0 || layers < 0 || mlp_ratio <= 0)
    throw ConfigError("language tower sizes out of range");
}

void ModelConfig::validate() const {
  vision.validate();
  language.validate();
  if (connector.hidden_dim <= 0) throw ConfigError("connector.hidden_dim must be positive");
  if (vision.tokens() > language.context_length) throw ConfigError("image tokens exceed language context length");
}

VisionTowerConfig vision_preset(VisionVariant v) {
  VisionTowerConfig c;
  c.variant = v;
  if (v == VisionVariant::B) {
    c.embed_dim = 64;
    c.layers = 4;
    c.heads = 4;
  }
  return c;
}

LanguageTowerConfig language_preset(LmPreset p, int vocab_size) {
  LanguageTowerConfig c;
  c.preset = p;
  c.vocab_size = vocab_size;
  if (p == LmPreset::L) {
    c.embed_dim = 128;
    c.layers = 8;
    c.heads = 8;
  }
  return c;
}

ModelConfig make_model_config(LmPreset lm, VisionVariant vision, int vocab_size) {
  ModelConfig c;
  c.vision = vision_preset(vision);
  c.language = language_preset(lm, vocab_size);
  c.connector.hidden_dim = c.language.embed_dim;
  return c;
}

ModelConfig model_config_from(const KeyValueFile& kv) {
  const auto variant = parse_vision_variant(kv.get("vision", "variant", "A"));
  const auto preset = parse_lm_preset(kv.get("language", "preset", "S"));
  ModelConfig c = make_model_config(preset, variant, kv.get_int("language", "vocab_size", 512));
  auto& v = c.vision;
  v.image_size = kv.get_int("vision", "image_size", v.image_size);
  v.patch_grid = kv.get_int("vision", "patch_grid", v.patch_grid);
  v.embed_dim = kv.get_int("vision", "embed_dim", v.embed_dim);
  v.layers = kv.get_int("vision", "layers", v.layers);
  v.heads = kv.get_int("vision", "heads", v.heads);
  v.mlp_ratio = kv.get_int("vision", "mlp_ratio", v.mlp_ratio);
  auto& l = c.language;
  l.embed_dim = kv.get_int("language", "embed_dim", l.embed_dim);
  l.layers = kv.get_int("language", "layers", l.layers);
  l.heads = kv.get_int("language", "heads", l.heads);
  l.context_length = kv.get_int("language", "context_length", l.context_length);
  l.mlp_ratio = kv.get_int("language", "mlp_ratio", l.mlp_ratio);
  c.connector.hidden_dim = kv.get_int("connector", "hidden_dim", l.embed_dim);
  if (kv.has("connector", "activation") && kv.get("connector", "activation", "") != "gelu")
    throw ConfigError("connector.activation is fixed to gelu");
  if (kv.has("connector", "depth") && kv.get_int("connector", "depth", 2) != 2)
    throw ConfigError("connector.depth is fixed to 2");
  c.validate();
  return c;
}

std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "[vision]\n"
     << "variant = " << to_string(c.vision.variant) << "\n"
     << "image_size = " << c.vision.image_size << "\n"
     << "patch_grid = " << c.vision.patch_grid << "\n"
     << "embed_dim = " << c.vision.embed_dim << "\n"
     << "layers = " << c.vision.layers << "\n"
     << "heads = " << c.vision.heads << "\n"
     << "mlp_ratio = " << c.vision.mlp_ratio << "\n\n"
     << "[language]\n"
     << "preset = " << to_string(c.language.preset) << "\n"
     << "vocab_size = " << c.language.vocab_size << "\n"
     << "embed_dim = " << c.language.embed_dim << "\n"
     << "layers = " << c.language.layers << "\n"
     << "heads = " << c.language.heads << "\n"
     << "context_length = " << c.language.context_length << "\n"
     << "mlp_ratio = " << c.language.mlp_ratio << "\n\n"
     << "[connector]\n"
     << "hidden_dim = " << c.connector.hidden_dim << "\n"
     << "activation = gelu\n"
     << "depth = 2\n";
  return os.str();
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"vision",
       {{"variant", to_string(c.vision.variant)},
        {"image_size", c.vision.image_size},
        {"patch_grid", c.vision.patch_grid},
        {"embed_dim", c.vision.embed_dim},
        {"layers", c.vision.layers},
        {"heads", c.vision.heads},
        {"mlp_ratio", c.vision.mlp_ratio}}},
      {"language",
       {{"preset", to_string(c.language.preset)},
        {"vocab_size", c.language.vocab_size},
        {"embed_dim", c.language.embed_dim},
        {"layers", c.language.layers},
        {"heads", c.language.heads},
        {"context_length", c.language.context_length},
        {"mlp_ratio", c.language.mlp_ratio}}},
      {"connector", {{"hidden_dim", c.connector.hidden_dim}, {"activation", "gelu"}, {"depth", 2}}},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    const auto& v = j.at("vision");
    c.vision.variant = parse_vision_variant(v.at("variant").get<std::string>());
    c.vision.image_size = v.at("image_size").get<int>();
    c.vision.patch_grid = v.at("patch_grid").get<int>();
    c.vision.embed_dim = v.at("embed_dim").get<int>();
    c.vision.layers = v.at("layers").get<int>();
    c.vision.heads = v.at("heads").get<int>();
    c.vision.mlp_ratio = v.at("mlp_ratio").get<int>();
    const auto& l = j.at("language");
    c.language.preset = parse_lm_preset(l.at("preset").get<std::string>());
    c.language.vocab_size = l.at("vocab_size").get<int>();
    c.language.embed_dim = l.at("embed_dim").get<int>();
    c.language.layers = l.at("layers").get<int>();
    c.language.heads = l.at("heads").get<int>();
    c.language.context_length = l.at("context_length").get<int>();
    c.language.mlp_ratio = l.at("mlp_ratio").get<int>();
    c.connector.hidden_dim = j.at("connector").at("hidden_dim").get<int>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

}  // namespace mmfm
