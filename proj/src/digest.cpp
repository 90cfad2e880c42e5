#include "distlab/digest.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <stdexcept>

namespace distlab {

Sha256 sha256(const void* data, std::size_t len) {
  Sha256 out{};
  SHA256(static_cast<const unsigned char*>(data), len, out.data());
  return out;
}

Sha256 sha256(const std::string& s) { return sha256(s.data(), s.size()); }

std::string hex(const Sha256& d) {
  static const char* digits = "0123456789abcdef";
  std::string s(64, '0');
  for (std::size_t i = 0; i < d.size(); ++i) {
    s[2 * i] = digits[d[i] >> 4];
    s[2 * i + 1] = digits[d[i] & 0xf];
  }
  return s;
}

std::uint64_t digest64(const std::string& s) {
  Sha256 d = sha256(s);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | d[i];
  return v;
}

Sha256Stream::Sha256Stream() {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("digest: failed to initialize SHA-256 context");
  ctx_ = ctx;
}

Sha256Stream::~Sha256Stream() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256Stream::update(const void* data, std::size_t len) {
  if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, len) != 1)
    throw std::runtime_error("digest: SHA-256 update failed");
}

Sha256 Sha256Stream::finish() {
  Sha256 out{};
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), out.data(), &len) != 1 || len != out.size())
    throw std::runtime_error("digest: SHA-256 finalization failed");
  return out;
}

}  // namespace distlab
