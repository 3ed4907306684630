#include <bit>
#include <cstring>
#include <fstream>

#include "mmfm/errors.hpp"
#include "mmfm/train.hpp"

namespace mmfm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Init: return "init";
    case Stage::Stage1: return "stage1";
    case Stage::Stage2: return "stage2";
    case Stage::Vision: return "vision";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::Init, Stage::Stage1, Stage::Stage2, Stage::Vision})
    if (to_string(st) == s) return st;
  throw FormatError("unknown checkpoint stage '" + s + "'");
}

namespace {

constexpr char kMagic[4] = {'M', 'M', 'F', 'M'};
constexpr char kEnd[4] = {'E', 'N', 'D', '!'};
constexpr std::uint8_t kF32 = 1;

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    raw(&v, sizeof v);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  void raw(void* p, std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <typename U>
  U le() {
    U v;
    raw(&v, sizeof v);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_store(std::vector<std::pair<std::string, const Param*>>& arrays, const ParamStore& ps, const std::string& prefix) {
  for (const auto& name : ps.names()) arrays.emplace_back(prefix + name, &ps.at(name));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, 4);
  w.le<std::uint16_t>(kCheckpointVersion);
  const nlohmann::json header = {
      {"stage", to_string(ckpt.stage)},
      {"step", ckpt.step},
      {"config", to_json(ckpt.config)},
      {"manifest", ckpt.manifest},
      {"optimizer_t", ckpt.optimizer.t},
  };
  const std::string h = header.dump();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(h.size()));
  w.raw(h.data(), h.size());

  std::vector<std::pair<std::string, const Param*>> arrays;
  write_store(arrays, ckpt.params, "param/");
  write_store(arrays, ckpt.optimizer.m, "adam.m/");
  write_store(arrays, ckpt.optimizer.v, "adam.v/");
  w.le<std::uint32_t>(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, p] : arrays) {
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    w.le<std::uint8_t>(kF32);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(p->shape.size()));
    for (int d : p->shape) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.raw(p->data.data(), p->data.size() * sizeof(float));
  }
  w.raw(kEnd, 4);
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.le<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (this build reads version " +
                      std::to_string(kCheckpointVersion) + ")");
  std::string h(r.le<std::uint32_t>(), '\0');
  r.raw(h.data(), h.size());
  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(h);
    ck.stage = parse_stage(header.at("stage").get<std::string>());
    ck.step = header.at("step").get<long long>();
    ck.config = model_config_from_json(header.at("config"));
    ck.manifest = header.at("manifest");
    ck.optimizer.t = header.at("optimizer_t").get<long long>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  }
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.le<std::uint16_t>(), '\0');
    r.raw(name.data(), name.size());
    if (r.le<std::uint8_t>() != kF32) throw FormatError("array " + name + " has an unknown dtype");
    const int rank = r.le<std::uint8_t>();
    Shape shape;
    for (int k = 0; k < rank; ++k) shape.push_back(static_cast<int>(r.le<std::uint32_t>()));
    std::vector<float> data(numel(shape));
    r.raw(data.data(), data.size() * sizeof(float));
    const auto slash = name.find('/');
    const std::string group = name.substr(0, slash), pname = name.substr(slash + 1);
    if (group == "param") ck.params.add(pname, std::move(shape), std::move(data));
    else if (group == "adam.m") ck.optimizer.m.add(pname, std::move(shape), std::move(data));
    else if (group == "adam.v") ck.optimizer.v.add(pname, std::move(shape), std::move(data));
    else throw FormatError("unknown array group in " + name);
  }
  char end[4];
  r.raw(end, 4);
  if (std::memcmp(end, kEnd, 4) != 0 || !r.done()) throw FormatError("checkpoint has trailing or corrupted data");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace mmfm
