#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lengen {

/// Exact non-negative base-10 integer, most-significant digit first.
///
/// Zero is the single digit 0; any other value has no leading zero.
class DigitString {
 public:
  DigitString() : digits_{0} {}
  explicit DigitString(std::uint64_t value);
  explicit DigitString(std::string_view text);

  /// Builds from raw digits (most-significant first). Leading zeros are
  /// stripped; every element must be in 0..9.
  static DigitString from_digits(std::span<const std::uint8_t> digits);

  const std::vector<std::uint8_t>& digits() const { return digits_; }
  std::size_t size() const { return digits_.size(); }
  bool is_zero() const { return digits_.size() == 1 && digits_[0] == 0; }

  std::string str() const;
  bool fits_u64() const;
  std::uint64_t to_u64() const;

  friend bool operator==(const DigitString&, const DigitString&) = default;
  friend auto operator<=>(const DigitString& a, const DigitString& b) {
    if (a.size() != b.size()) return a.size() <=> b.size();
    return a.digits_ <=> b.digits_;
  }

 private:
  std::vector<std::uint8_t> digits_;
};

struct CarryProfile {
  int nc = 0;  // total carry events
  int mc = 0;  // longest run of consecutive carries
  friend bool operator==(const CarryProfile&, const CarryProfile&) = default;
};

DigitString ds_add(const DigitString& a, const DigitString& b);
DigitString ds_mul(const DigitString& a, const DigitString& b);
/// a mod c by Horner reduction. Throws std::invalid_argument when c <= 1.
DigitString ds_mod(const DigitString& a, std::uint64_t modulus);
/// Digitwise (a_i + b_i) mod 10 aligned at the least-significant end.
DigitString ds_elementwise_add(const DigitString& a, const DigitString& b);
CarryProfile carry_profile(const DigitString& a, const DigitString& b);

/// Number of decimal digits of a positive native integer (1 for 0).
int decimal_width(std::uint64_t value);

}  // namespace lengen
