#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <limits>
#include <random>
#include <set>

#include "defer/codec.hpp"
#include "defer/synthetic.hpp"

using namespace defer;

namespace {

std::vector<CodecSpec> all_specs() {
  std::vector<CodecSpec> out;
  for (auto c : {Compression::None, Compression::LZ}) {
    out.push_back(CodecSpec::text(c));
    for (unsigned r = 8; r <= 32; ++r) out.push_back(CodecSpec::binary(r, c));
  }
  return out;
}

Bytes random_bytes(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Bytes b(n);
  for (auto& v : b) v = std::uint8_t(rng());
  return b;
}

// Tensor whose bit patterns include the awkward cases: signed zero,
// subnormals, extremes and infinities.
Tensor awkward_tensor(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::vector<float> v;
  const float specials[] = {0.0f,
                            -0.0f,
                            1.0f,
                            -1.0f,
                            std::numeric_limits<float>::min(),
                            std::numeric_limits<float>::denorm_min(),
                            -std::numeric_limits<float>::denorm_min(),
                            std::numeric_limits<float>::max(),
                            std::numeric_limits<float>::lowest(),
                            std::numeric_limits<float>::infinity(),
                            -std::numeric_limits<float>::infinity(),
                            1e-40f,
                            0.1f,
                            16777217.0f};
  for (float s : specials) v.push_back(s);
  while (v.size() < n) {
    std::uint32_t bits = std::uint32_t(rng());
    float f = std::bit_cast<float>(bits);
    if (std::isnan(f)) continue;
    v.push_back(f);
  }
  return Tensor({v.size()}, v);
}

// Reference truncation: zero the low (32 - r) bits of each word.
float truncate_reference(float v, unsigned r) {
  std::uint32_t w = std::bit_cast<std::uint32_t>(v);
  for (unsigned bit = 0; bit < 32 - r; ++bit) w &= ~(std::uint32_t{1} << bit);
  return std::bit_cast<float>(w);
}

}  // namespace

TEST(CodecSpec, IdRoundTripsAndIsInjective) {
  std::set<std::uint8_t> ids;
  for (const auto& s : all_specs()) {
    EXPECT_EQ(CodecSpec::from_id(s.codec_id()), s) << s.name();
    EXPECT_TRUE(ids.insert(s.codec_id()).second) << s.name();
    EXPECT_EQ(CodecSpec::parse(s.name()), s);
  }
  EXPECT_EQ(ids.size(), 2u * 26u);
}

TEST(CodecSpec, RejectsUnsupportedIds) {
  std::size_t supported = 0;
  for (int id = 0; id < 256; ++id) {
    try {
      CodecSpec::from_id(std::uint8_t(id));
      ++supported;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::UnknownCodec);
    }
  }
  EXPECT_EQ(supported, 52u);
  EXPECT_THROW(CodecSpec::parse("bin7"), Error);
  EXPECT_THROW(CodecSpec::parse("json"), Error);
}

TEST(Encode, TextCanonicalForm) {
  const auto blob = encode(CodecSpec::text(), Tensor({2}, {1.0f, 2.0f}));
  EXPECT_EQ(to_string(blob.body), "[1.0,2.0]");
  EXPECT_EQ(to_text_array(Tensor({2, 2}, {0.5f, -3.0f, 1e-8f, 0.1f})),
            "[[0.5,-3.0],[1e-08,0.1]]");
  EXPECT_EQ(to_text_array(Tensor({1, 1, 1}, {-0.0f})), "[[[-0.0]]]");
}

TEST(Encode, BlobLayoutIsBitExact) {
  const Tensor t({2, 1}, {1.0f, -2.0f});
  const auto spec = CodecSpec::binary(32);
  const Bytes b = encode_bytes(spec, t);
  ASSERT_EQ(b.size(), 1u + 1u + 16u + 8u);
  EXPECT_EQ(b[0], spec.codec_id());
  EXPECT_EQ(b[0], 0x9f);
  EXPECT_EQ(b[1], 2);
  EXPECT_EQ(get_le<std::uint64_t>(b.data() + 2), 2u);
  EXPECT_EQ(get_le<std::uint64_t>(b.data() + 10), 1u);
  EXPECT_EQ(get_le<std::uint32_t>(b.data() + 18), 0x3f800000u);
  EXPECT_EQ(get_le<std::uint32_t>(b.data() + 22), 0xc0000000u);

  const Bytes c = encode_bytes(CodecSpec::binary(32, Compression::LZ), t);
  EXPECT_EQ(c[0], 0xdf);
  EXPECT_EQ(get_le<std::uint64_t>(c.data() + 18), 8u);
}

TEST(Encode, Rate16OnOneIsExact) {
  EXPECT_EQ(truncate_reference(1.0f, 16), 1.0f);
  const auto t = decode(encode(CodecSpec::binary(16), Tensor({1}, {1.0f})));
  EXPECT_EQ(t[0], 1.0f);
}

TEST(Encode, BinaryMatchesBitLevelReference) {
  const auto t = awkward_tensor(3, 2000);
  for (unsigned r = 8; r <= 32; ++r) {
    const auto d = decode(encode(CodecSpec::binary(r), t));
    for (std::size_t i = 0; i < t.size(); ++i) {
      ASSERT_EQ(std::bit_cast<std::uint32_t>(d[i]),
                std::bit_cast<std::uint32_t>(truncate_reference(t[i], r)))
          << "rate " << r << " index " << i;
    }
  }
}

TEST(Decode, LosslessRoundTripIsBitExact) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto t = awkward_tensor(seed, 1 + seed * 97);
    for (const auto& s : all_specs()) {
      if (!s.lossless()) continue;
      const auto back = decode_bytes(encode_bytes(s, t));
      ASSERT_TRUE(back.bit_equal(t)) << s.name() << " seed " << seed;
    }
  }
  const auto shaped = synthetic::random_tensor({2, 3, 4, 5}, 1);
  for (const auto& s : all_specs()) {
    if (s.lossless()) {
      EXPECT_TRUE(decode(encode(s, shaped)).bit_equal(shaped));
    }
  }
}

TEST(Decode, ZerosStayZeros) {
  const Tensor z({3, 7});
  for (const auto& s : all_specs()) EXPECT_TRUE(decode(encode(s, z)).bit_equal(z)) << s.name();
}

TEST(Decode, Rate24ErrorWithinTwoToMinusSeven) {
  const auto t = synthetic::random_tensor({1000}, 42, -100.0f, 100.0f);
  const auto d = decode(encode(CodecSpec::binary(24), t));
  double worst = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    worst = std::max(worst, std::abs(double(d[i]) - t[i]) / std::abs(double(t[i])));
  }
  EXPECT_LE(worst, std::ldexp(1.0, -7));
}

TEST(Decode, TruncationErrorBoundForNormals) {
  // Keeping r bits leaves r - 9 explicit mantissa bits, so the relative
  // error of a normal value is below 2^(9 - r).
  std::mt19937_64 rng(5);
  std::vector<float> v;
  while (v.size() < 5000) {
    const float f = std::bit_cast<float>(std::uint32_t(rng()));
    if (std::isnormal(f)) v.push_back(f);
  }
  const Tensor t({v.size()}, v);
  for (unsigned r = 10; r <= 32; ++r) {
    const auto d = decode(encode(CodecSpec::binary(r, Compression::LZ), t));
    const double bound = std::ldexp(1.0, 9 - int(r));
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double rel = std::abs(double(d[i]) - t[i]) / std::abs(double(t[i]));
      ASSERT_LT(rel, bound) << "rate " << r;
      if (r >= 20) {
        ASSERT_LE(rel, std::ldexp(1.0, int(r) - 32 + 1)) << "rate " << r;
      }
    }
  }
}

TEST(Decode, MalformedInputs) {
  const auto good = encode_bytes(CodecSpec::binary(32), Tensor({4}));
  auto expect_code = [](ByteView b, Errc code) {
    try {
      decode_bytes(b);
      ADD_FAILURE() << "no error";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), code) << e.what();
    }
  };
  expect_code(ByteView(good).first(good.size() - 1), Errc::MalformedBlob);
  expect_code(ByteView(good).first(5), Errc::MalformedBlob);
  auto bad_id = good;
  bad_id[0] = 0x20;
  expect_code(bad_id, Errc::UnknownCodec);
  auto zero_extent = good;
  zero_extent[2] = 0;
  expect_code(zero_extent, Errc::MalformedBlob);

  auto text = encode_bytes(CodecSpec::text(), Tensor({2}, {1, 2}));
  text.back() = 'x';
  expect_code(text, Errc::MalformedBlob);
  const auto short_text = encode_bytes(CodecSpec::text(), Tensor({3}));
  auto relabelled = short_text;
  relabelled[2] = 2;
  expect_code(relabelled, Errc::MalformedBlob);

  auto lz = encode_bytes(CodecSpec::binary(32, Compression::LZ), Tensor({64}));
  lz.resize(lz.size() - 2);
  expect_code(lz, Errc::MalformedBlob);
}

TEST(Lz, EmptyRoundTrip) {
  EXPECT_TRUE(lz::decompress_bytes(lz::compress_bytes({})).empty());
}

TEST(Lz, RepeatedPatternCompressesBelowFivePercent) {
  const Bytes pattern = random_bytes(64, 9);
  Bytes input;
  while (input.size() < (1u << 20)) put_bytes(input, pattern);
  const Bytes c = lz::compress_bytes(input);
  EXPECT_LT(double(c.size()), 0.05 * double(input.size()));
  EXPECT_EQ(lz::decompress_bytes(c), input);
}

TEST(Lz, RandomBytesBoundedExpansion) {
  const Bytes input = random_bytes(1u << 20, 10);
  const Bytes c = lz::compress_bytes(input);
  // Literal run headers cost one byte per 255 literals, plus token and the
  // u64 length prefix.
  EXPECT_LE(c.size(), input.size() + input.size() / 255 + 16 + 8);
  EXPECT_EQ(lz::decompress_bytes(c), input);
}

TEST(Lz, RoundTripProperty) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 70000)(rng);
    const unsigned alphabet = 1u + unsigned(rng() % 6);
    Bytes b(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Mix of low-entropy runs and back-references at varied distances.
      if (i > 8 && rng() % 4 == 0) {
        b[i] = b[i - 1 - rng() % std::min<std::size_t>(i - 1, 70000)];
      } else {
        b[i] = std::uint8_t(rng() % (1u << alphabet));
      }
    }
    ASSERT_EQ(lz::decompress_bytes(lz::compress_bytes(b)), b) << trial;
  }
}

TEST(Lz, DecodesReferenceLz4Block) {
  // Hand-assembled block: 4 literals "abcd", then a match of length 8 at
  // offset 4, then last literals "xyzzy".
  const Bytes block = {0x44, 'a', 'b', 'c', 'd', 0x04, 0x00, 0x50, 'x', 'y', 'z', 'z', 'y'};
  const Bytes out = lz::decompress_block(block, 17);
  EXPECT_EQ(to_string(out), "abcdabcdabcdxyzzy");
}

TEST(Lz, CorruptStreamsAreRejected) {
  Bytes input;
  for (int i = 0; i < 5000; ++i) input.push_back(std::uint8_t(i % 37));
  const Bytes good = lz::compress_bytes(input);
  std::mt19937_64 rng(3);
  std::size_t rejected = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    Bytes bad = good;
    const std::size_t flips = 1 + rng() % 4;
    for (std::size_t f = 0; f < flips; ++f) bad[8 + rng() % (bad.size() - 8)] ^= std::uint8_t(1 + rng() % 255);
    if (rng() % 3 == 0) bad.resize(8 + rng() % (bad.size() - 8));
    try {
      const Bytes out = lz::decompress_bytes(bad);
      EXPECT_EQ(out.size(), input.size());
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::CorruptStream);
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 0u);

  const Bytes offset_zero = {0x10, 'a', 0x00, 0x00, 0x50, 'a', 'a', 'a', 'a', 'a'};
  EXPECT_THROW(lz::decompress_block(offset_zero, 10), Error);
  const Bytes offset_past_start = {0x10, 'a', 0x05, 0x00, 0x50, 'a', 'a', 'a', 'a', 'a'};
  EXPECT_THROW(lz::decompress_block(offset_past_start, 10), Error);
  Bytes huge_claim;
  put_le<std::uint64_t>(huge_claim, std::uint64_t{1} << 40);
  huge_claim.push_back(0);
  EXPECT_THROW(lz::decompress_bytes(huge_claim), Error);
}

TEST(Overhead, NonNegativeAndOrdered) {
  const auto t = synthetic::random_tensor({1000000}, 8);
  EXPECT_GE(measure_overhead(CodecSpec::binary(32), Tensor({1})), 0.0);
  auto best_of = [&](const CodecSpec& s) {
    double best = 1e9;
    for (int i = 0; i < 3; ++i) best = std::min(best, measure_overhead(s, t));
    return best;
  };
  EXPECT_GT(best_of(CodecSpec::text()), best_of(CodecSpec::binary(32)));
  EXPECT_GE(best_of(CodecSpec::binary(32, Compression::LZ)), best_of(CodecSpec::binary(32)));
  EXPECT_GE(best_of(CodecSpec::text(Compression::LZ)), best_of(CodecSpec::text()));
}

TEST(PayloadOrdering, QuantizedWeightsFixture) {
  const auto w = synthetic::quantized_weights(1 << 18, 4);
  const auto size = [&](const CodecSpec& s) { return encode(s, w).body.size(); };
  const auto bin = size(CodecSpec::binary(32));
  const auto bin_lz = size(CodecSpec::binary(32, Compression::LZ));
  const auto text = size(CodecSpec::text());
  const auto text_lz = size(CodecSpec::text(Compression::LZ));
  EXPECT_LT(bin_lz, bin);
  EXPECT_LT(bin_lz, text_lz);
  EXPECT_LT(text_lz, text);
}
