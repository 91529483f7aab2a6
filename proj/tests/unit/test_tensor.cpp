#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "storydiff/io.hpp"
#include "storydiff/tensor.hpp"

using namespace storydiff;

TEST_CASE("splitmix64 stream matches the reference recurrence for seed 0") {
  RngStream rng(0);
  oracle::SplitMix ref{0};
  CHECK(rng.next() == 0xE220A8397B1DCDAFull);
  CHECK(ref.next() == 0xE220A8397B1DCDAFull);
  for (int i = 0; i < 10000; ++i) REQUIRE(rng.next() == ref.next());
}

TEST_CASE("child streams follow the documented derivation and leave the parent alone") {
  RngStream parent(12345);
  oracle::SplitMix ref{12345};
  for (std::uint64_t tag : {0ull, 1ull, 7ull, 0xdeadbeefull}) {
    RngStream c = parent.child(tag);
    oracle::SplitMix rc = ref.child(tag);
    for (int i = 0; i < 100; ++i) REQUIRE(c.next() == rc.next());
  }
  CHECK(parent.state() == 12345);
  CHECK(parent.child(1).state() != parent.child(2).state());
}

TEST_CASE("uniform, below and normal draws") {
  RngStream rng(3);
  oracle::SplitMix ref{3};
  for (int i = 0; i < 1000; ++i) REQUIRE(rng.below(37) == ref.below(37));

  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.02);

  RngStream a(9), b(9);
  a.normal();
  b.next();
  b.next();
  CHECK(a.state() == b.state());  // exactly two draws per normal
}

TEST_CASE("tensor shapes and views") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
  t.at({1, 2, 3}) = 5.0f;
  CHECK(t[23] == 5.0f);
  CHECK(t.reshaped({6, 4}).matrix()(5, 3) == 5.0f);
  CHECK_THROWS_AS(t.reshaped({5, 5}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), DimensionError);

  const Tensor s = t.reshaped({6, 4}).rows_slice(5, 1);
  CHECK(s.shape() == Shape{1, 4});
  CHECK(s[3] == 5.0f);

  Tensor u({2});
  u[0] = NAN;
  CHECK_FALSE(u.all_finite());
}

TEST_CASE("TSR1 records round-trip bit-exactly") {
  RngStream rng(4);
  const Tensor t = oracle::random_tensor({3, 1, 5}, rng);
  std::stringstream ss;
  write_tsr1(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "TSR1");
  CHECK(bytes.size() == 4 + 4 + 3 * 4 + 15 * 4);
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);  // little-endian rank
  CHECK(read_tsr1(ss) == t);

  std::stringstream bad("TSRX");
  CHECK_THROWS(read_tsr1(bad));
}

TEST_CASE("named tensor container") {
  RngStream rng(5);
  const NamedTensors in{{"a", oracle::random_tensor({2, 2}, rng)}, {"block0.w_q", oracle::random_tensor({4}, rng)}};
  const std::string bytes = encode_named_tensors(in);
  CHECK(static_cast<unsigned char>(bytes[0]) == 2);
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(bytes[8] == 'a');
  const NamedTensors out = decode_named_tensors(bytes);
  REQUIRE(out.size() == 2);
  CHECK(out[1].first == "block0.w_q");
  CHECK(out[1].second == in[1].second);
  CHECK_THROWS(decode_named_tensors(bytes.substr(0, bytes.size() - 3)));
}

TEST_CASE("FNV-1a 64 reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
  CHECK(hex64(0xabcull) == "0000000000000abc");
}

TEST_CASE("PPM encoding rounds half away from zero and clamps") {
  Tensor img({1, 4, 3});
  const float vals[12] = {-1.0f, 1.0f, 0.0f, -2.0f, 2.0f, -0.75f,
                          0.0f, 0.5f, -0.5f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 12; ++i) img[static_cast<std::size_t>(i)] = vals[i];
  const std::string ppm = encode_ppm(img);
  const std::string header = "P6\n4 1\n255\n";
  REQUIRE(ppm.substr(0, header.size()) == header);
  const auto px = [&](int i) { return static_cast<int>(static_cast<unsigned char>(ppm[header.size() + i])); };
  CHECK(px(0) == 0);
  CHECK(px(1) == 255);
  CHECK(px(2) == 128);  // 127.5 rounds up
  CHECK(px(3) == 0);
  CHECK(px(4) == 255);
  CHECK(px(5) == 32);   // 31.875
  CHECK(px(6) == 128);
  CHECK(px(7) == 191);  // 191.25
  CHECK(px(8) == 64);   // 63.75

  const Tensor back = decode_ppm(ppm);
  CHECK(back.shape() == Shape{1, 4, 3});
  CHECK(encode_ppm(back) == ppm);
  CHECK_THROWS_AS(decode_ppm("P3\n1 1\n255\n"), IoError);
  CHECK_THROWS_AS(decode_ppm(header + "abc"), IoError);
}
