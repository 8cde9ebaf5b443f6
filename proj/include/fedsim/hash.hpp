#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace fedsim {

// Incremental, order-sensitive FNV-1a (64-bit).
class Fnv1a {
 public:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  Fnv1a& bytes(std::span<const std::byte> data) noexcept {
    for (std::byte b : data) {
      state_ ^= static_cast<std::uint64_t>(b);
      state_ *= kPrime;
    }
    return *this;
  }
  Fnv1a& str(std::string_view s) noexcept {
    return bytes(std::as_bytes(std::span<const char>(s.data(), s.size())));
  }
  Fnv1a& u64(std::uint64_t v) noexcept {
    for (int i = 0; i < 8; ++i) {
      state_ ^= (v >> (8 * i)) & 0xffU;
      state_ *= kPrime;
    }
    return *this;
  }
  Fnv1a& f64(double v) noexcept { return u64(std::bit_cast<std::uint64_t>(v)); }
  Fnv1a& f64s(std::span<const double> vs) noexcept {
    for (double v : vs) f64(v);
    return *this;
  }

  std::uint64_t value() const noexcept { return state_; }

 private:
  std::uint64_t state_ = kOffset;
};

}  // namespace fedsim
