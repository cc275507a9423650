#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

namespace egic {

/// FNV-1a 64-bit, used for parameter digests and model ids.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001B3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <class T, std::size_t E>
  void update(std::span<T, E> values) {
    update(values.data(), values.size_bytes());
  }
  template <class T>
  void update_value(const T& v) {
    update(&v, sizeof(T));
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

}  // namespace egic
