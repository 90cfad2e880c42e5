#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace distlab {

using Sha256 = std::array<std::uint8_t, 32>;

/// SHA-256 of an arbitrary byte buffer.
Sha256 sha256(const void* data, std::size_t len);
Sha256 sha256(const std::string& s);

/// Lowercase hex rendering of a digest.
std::string hex(const Sha256& d);

/// First 8 bytes of sha256(s) as a big-endian integer — a stable short id
/// for run directories and seed derivation.
std::uint64_t digest64(const std::string& s);

/// Incremental SHA-256 for digesting large buffers (model weights) without
/// concatenating them in memory.
class Sha256Stream {
 public:
  Sha256Stream();
  ~Sha256Stream();
  Sha256Stream(const Sha256Stream&) = delete;
  Sha256Stream& operator=(const Sha256Stream&) = delete;

  void update(const void* data, std::size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  Sha256 finish();

 private:
  void* ctx_;  // EVP_MD_CTX, kept opaque to spare every includer <openssl/evp.h>
};

}  // namespace distlab
