#include <gtest/gtest.h>

#include <random>

#include "lengen/digits.hpp"

using namespace lengen;

namespace {

// Independent carry oracle on native integers, least-significant digit first.
CarryProfile carries_u64(std::uint64_t a, std::uint64_t b) {
  CarryProfile p{0, 0};
  int run = 0;
  int carry = 0;
  while (a || b) {
    int s = static_cast<int>(a % 10 + b % 10) + carry;
    carry = s >= 10;
    if (carry) {
      ++p.nc;
      p.mc = std::max(p.mc, ++run);
    } else {
      run = 0;
    }
    a /= 10;
    b /= 10;
  }
  return p;
}

std::uint64_t elementwise_u64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out = 0, place = 1;
  while (a || b) {
    out += ((a % 10 + b % 10) % 10) * place;
    place *= 10;
    a /= 10;
    b /= 10;
  }
  return out;
}

}  // namespace

TEST(DigitString, ParsesAndPrints) {
  EXPECT_EQ(DigitString("000123").str(), "123");
  EXPECT_EQ(DigitString("0").str(), "0");
  EXPECT_TRUE(DigitString("000").is_zero());
  EXPECT_EQ(DigitString(std::uint64_t{9876543210}).str(), "9876543210");
  EXPECT_THROW(DigitString("12a"), std::invalid_argument);
  EXPECT_THROW(DigitString(""), std::invalid_argument);
}

TEST(DigitString, OrderingMatchesNumericOrder) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 2000; ++i) {
    std::uint64_t a = rng() % 1000000, b = rng() % 1000000;
    DigitString da(a), db(b);
    EXPECT_EQ(da < db, a < b);
    EXPECT_EQ(da == db, a == b);
  }
}

TEST(DigitString, U64RoundTrip) {
  DigitString max(std::numeric_limits<std::uint64_t>::max());
  EXPECT_TRUE(max.fits_u64());
  EXPECT_EQ(max.to_u64(), std::numeric_limits<std::uint64_t>::max());
  DigitString over("18446744073709551616");
  EXPECT_FALSE(over.fits_u64());
  EXPECT_THROW(over.to_u64(), std::overflow_error);
}

TEST(Arithmetic, ExhaustiveUpToThreeDigits) {
  for (std::uint64_t a = 0; a < 1000; ++a) {
    for (std::uint64_t b = 0; b < 1000; b += 7) {
      DigitString da(a), db(b);
      ASSERT_EQ(ds_add(da, db).to_u64(), a + b);
      ASSERT_EQ(ds_mul(da, db).to_u64(), a * b);
      ASSERT_EQ(ds_elementwise_add(da, db).to_u64(), elementwise_u64(a, b));
      ASSERT_EQ(carry_profile(da, db), carries_u64(a, b)) << a << " + " << b;
    }
  }
}

TEST(Arithmetic, ModMatchesNative) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 20000; ++i) {
    std::uint64_t a = rng() % 1000000000000000000ull;
    std::uint64_t c = 2 + rng() % 1000000;
    ASSERT_EQ(ds_mod(DigitString(a), c).to_u64(), a % c);
  }
  EXPECT_THROW(ds_mod(DigitString(5), 1), std::invalid_argument);
  EXPECT_THROW(ds_mod(DigitString(5), 0), std::invalid_argument);
}

TEST(Arithmetic, MulBeyondNativeWidth) {
  // (10^20 - 1)^2 = 10^40 - 2*10^20 + 1
  DigitString a(std::string(20, '9'));
  std::string expect = std::string(19, '9') + "8" + std::string(19, '0') + "1";
  EXPECT_EQ(ds_mul(a, a).str(), expect);
  EXPECT_EQ(ds_add(a, DigitString(1)).str(), "1" + std::string(20, '0'));
}

TEST(Arithmetic, AddIsCommutativeAndAssociative) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    DigitString a(rng()), b(rng()), c(rng());
    EXPECT_EQ(ds_add(a, b), ds_add(b, a));
    EXPECT_EQ(ds_add(ds_add(a, b), c), ds_add(a, ds_add(b, c)));
    EXPECT_EQ(ds_mul(a, b), ds_mul(b, a));
  }
}

TEST(Arithmetic, CarryProfileBounds) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 2000; ++i) {
    DigitString a(rng() % 100000000), b(rng() % 100000000);
    auto p = carry_profile(a, b);
    EXPECT_LE(p.mc, p.nc);
    EXPECT_LE(static_cast<std::size_t>(p.nc), std::max(a.size(), b.size()));
  }
  EXPECT_EQ(carry_profile(DigitString(999), DigitString(1)), (CarryProfile{3, 3}));
  EXPECT_EQ(carry_profile(DigitString(123), DigitString(456)), (CarryProfile{0, 0}));
}

TEST(Arithmetic, DecimalWidth) {
  EXPECT_EQ(decimal_width(0), 1);
  EXPECT_EQ(decimal_width(9), 1);
  EXPECT_EQ(decimal_width(10), 2);
  EXPECT_EQ(decimal_width(99999), 5);
  EXPECT_EQ(decimal_width(std::numeric_limits<std::uint64_t>::max()), 20);
}
