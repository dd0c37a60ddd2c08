#include "cytosae/common.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace cytosae;

TEST(Rng, UniformIndexCoversRangeWithoutBias) {
  Rng rng(42);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[uniform_index(rng, 7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(Rng, StandardNormalMoments) {
  Rng rng(1);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = standard_normal(rng);
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, ShuffleIsAPermutationAndSeeded) {
  std::vector<int> a(50), b;
  std::iota(a.begin(), a.end(), 0);
  b = a;
  Rng r1(9), r2(9);
  shuffle_in_place(a, r1);
  shuffle_in_place(b, r2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(std::set<int>(a.begin(), a.end()).size(), 50u);
}

TEST(Rng, MixSeedSeparatesStreams) {
  EXPECT_NE(mix_seed(0, 0), mix_seed(0, 1));
  EXPECT_NE(mix_seed(0, 1), mix_seed(1, 0));
  EXPECT_EQ(mix_seed(5, 3), mix_seed(5, 3));
}

TEST(Checksum, KnownCrc32) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_of(std::as_bytes(std::span(s.data(), s.size()))), 0xCBF43926u);
  EXPECT_EQ(hex32(0xCBF43926u), "cbf43926");
  EXPECT_EQ(parse_hex32("cbf43926"), 0xCBF43926u);
  EXPECT_THROW(parse_hex32("xyz"), std::exception);
}

TEST(FormatReal, RoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 123456.789, 0.0}) EXPECT_EQ(std::stod(format_real(v)), v);
}

TEST(Bytes, WriterReaderRoundTrip) {
  ByteWriter w;
  w.put<std::uint16_t>(7);
  w.put_string("hello");
  w.put_optional_string(std::nullopt);
  w.put_optional_string(std::string("x"));
  const std::vector<double> v{1.5, -2.25};
  w.put_array(std::span<const double>(v));
  ByteReader r(w.bytes());
  EXPECT_EQ(r.get<std::uint16_t>(), 7);
  EXPECT_EQ(r.get_string(), "hello");
  EXPECT_EQ(r.get_optional_string(), std::nullopt);
  EXPECT_EQ(r.get_optional_string(), std::optional<std::string>("x"));
  std::vector<double> back(2);
  r.get_array(std::span<double>(back));
  EXPECT_EQ(back, v);
  EXPECT_EQ(r.remaining(), 0u);
  EXPECT_THROW(r.get<std::uint8_t>(), ByteReader::Truncated);
}
