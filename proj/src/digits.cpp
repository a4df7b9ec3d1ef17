#include "lengen/digits.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace lengen {

namespace {

// Works on least-significant-first buffers.
std::vector<std::uint8_t> reversed(const DigitString& a) {
  return {a.digits().rbegin(), a.digits().rend()};
}

DigitString from_reversed(std::vector<std::uint8_t> lsf) {
  while (lsf.size() > 1 && lsf.back() == 0) lsf.pop_back();
  std::reverse(lsf.begin(), lsf.end());
  return DigitString::from_digits(lsf);
}

}  // namespace

DigitString::DigitString(std::uint64_t value) {
  digits_.clear();
  do {
    digits_.push_back(static_cast<std::uint8_t>(value % 10));
    value /= 10;
  } while (value != 0);
  std::reverse(digits_.begin(), digits_.end());
}

DigitString::DigitString(std::string_view text) {
  if (text.empty()) throw std::invalid_argument("DigitString: empty text");
  digits_.clear();
  for (char ch : text) {
    if (ch < '0' || ch > '9') {
      throw std::invalid_argument("DigitString: non-digit character in '" +
                                  std::string(text) + "'");
    }
    digits_.push_back(static_cast<std::uint8_t>(ch - '0'));
  }
  auto first = std::find_if(digits_.begin(), digits_.end() - 1,
                            [](std::uint8_t d) { return d != 0; });
  digits_.erase(digits_.begin(), first);
}

DigitString DigitString::from_digits(std::span<const std::uint8_t> digits) {
  if (digits.empty()) throw std::invalid_argument("DigitString: no digits");
  DigitString out;
  out.digits_.assign(digits.begin(), digits.end());
  for (auto d : out.digits_) {
    if (d > 9) throw std::invalid_argument("DigitString: digit out of range");
  }
  auto first = std::find_if(out.digits_.begin(), out.digits_.end() - 1,
                            [](std::uint8_t d) { return d != 0; });
  out.digits_.erase(out.digits_.begin(), first);
  return out;
}

std::string DigitString::str() const {
  std::string s;
  s.reserve(digits_.size());
  for (auto d : digits_) s.push_back(static_cast<char>('0' + d));
  return s;
}

bool DigitString::fits_u64() const {
  static const DigitString kMax(std::numeric_limits<std::uint64_t>::max());
  return *this <= kMax;
}

std::uint64_t DigitString::to_u64() const {
  if (!fits_u64()) throw std::overflow_error("DigitString: exceeds 64 bits");
  std::uint64_t v = 0;
  for (auto d : digits_) v = v * 10 + d;
  return v;
}

DigitString ds_add(const DigitString& a, const DigitString& b) {
  auto x = reversed(a);
  auto y = reversed(b);
  if (x.size() < y.size()) std::swap(x, y);
  std::vector<std::uint8_t> out(x.size() + 1, 0);
  int carry = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    int s = x[i] + (i < y.size() ? y[i] : 0) + carry;
    out[i] = static_cast<std::uint8_t>(s % 10);
    carry = s / 10;
  }
  out[x.size()] = static_cast<std::uint8_t>(carry);
  return from_reversed(std::move(out));
}

DigitString ds_mul(const DigitString& a, const DigitString& b) {
  if (a.is_zero() || b.is_zero()) return DigitString{};
  auto x = reversed(a);
  auto y = reversed(b);
  std::vector<std::uint32_t> acc(x.size() + y.size(), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::uint32_t carry = 0;
    for (std::size_t j = 0; j < y.size(); ++j) {
      std::uint32_t cur = acc[i + j] + std::uint32_t{x[i]} * y[j] + carry;
      acc[i + j] = cur % 10;
      carry = cur / 10;
    }
    std::size_t k = i + y.size();
    while (carry != 0) {
      std::uint32_t cur = acc[k] + carry;
      acc[k] = cur % 10;
      carry = cur / 10;
      ++k;
    }
  }
  return from_reversed({acc.begin(), acc.end()});
}

DigitString ds_mod(const DigitString& a, std::uint64_t modulus) {
  if (modulus <= 1) throw std::invalid_argument("ds_mod: modulus must be > 1");
  unsigned __int128 r = 0;
  for (auto d : a.digits()) r = (r * 10 + d) % modulus;
  return DigitString(static_cast<std::uint64_t>(r));
}

DigitString ds_elementwise_add(const DigitString& a, const DigitString& b) {
  auto x = reversed(a);
  auto y = reversed(b);
  if (x.size() < y.size()) std::swap(x, y);
  for (std::size_t i = 0; i < y.size(); ++i) {
    x[i] = static_cast<std::uint8_t>((x[i] + y[i]) % 10);
  }
  return from_reversed(std::move(x));
}

CarryProfile carry_profile(const DigitString& a, const DigitString& b) {
  auto x = reversed(a);
  auto y = reversed(b);
  const std::size_t n = std::max(x.size(), y.size());
  CarryProfile p;
  int carry = 0;
  int run = 0;
  for (std::size_t i = 0; i < n; ++i) {
    int s = (i < x.size() ? x[i] : 0) + (i < y.size() ? y[i] : 0) + carry;
    carry = s >= 10 ? 1 : 0;
    if (carry) {
      ++p.nc;
      p.mc = std::max(p.mc, ++run);
    } else {
      run = 0;
    }
  }
  return p;
}

int decimal_width(std::uint64_t value) {
  int w = 1;
  while (value >= 10) {
    value /= 10;
    ++w;
  }
  return w;
}

}  // namespace lengen
