#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace mmfm {

/// Incremental SHA-256, hex digest.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const std::uint8_t> bytes);
  void update(std::string_view text);
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view data);
std::string sha1_hex(std::string_view data);
/// SHA-1 of "blob <len>\0<content>", the id git assigns to a file.
std::string git_blob_hash(std::string_view content);
std::uint64_t fnv1a64(std::string_view s);

}  // namespace mmfm
