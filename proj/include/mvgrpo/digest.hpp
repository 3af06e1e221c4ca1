#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace mvgrpo {

// 64-bit FNV-1a. Used for checkpoint digests and response fingerprints, not security.
class Fnv1a {
 public:
  void update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      hash_ ^= c;
      hash_ *= 0x100000001b3ULL;
    }
  }

  void update(std::span<const double> values) {
    for (double v : values) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        hash_ ^= static_cast<unsigned char>(bits >> (8 * b));
        hash_ *= 0x100000001b3ULL;
      }
    }
  }

  std::uint64_t value() const { return hash_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_));
    return buf;
  }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::string digest_hex(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.hex();
}

inline std::string digest_hex(std::span<const double> values) {
  Fnv1a h;
  h.update(values);
  return h.hex();
}

}  // namespace mvgrpo
