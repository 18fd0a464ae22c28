#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "conceptset/binary_io.hpp"
#include "conceptset/cui.hpp"
#include "conceptset/error.hpp"
#include "conceptset/hash.hpp"
#include "support.hpp"

using namespace conceptset;

TEST(Cui, ParsesExactlySevenDigits) {
  EXPECT_EQ(Cui::parse("C0018802")->number(), 18802u);
  EXPECT_EQ(Cui::parse("C0018802")->str(), "C0018802");
  for (const char* bad : {"", "C", "C123456", "C12345678", "c0018802", "X0018802", "C00188O2",
                          " C0018802", "C0018802 ", "C-018802"}) {
    EXPECT_FALSE(Cui::parse(bad).has_value()) << bad;
    EXPECT_FALSE(is_valid_cui(bad)) << bad;
  }
}

TEST(Cui, FromStringThrowsInvalidArgument) {
  try {
    Cui::from_string("C12");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
  EXPECT_THROW(Cui::from_number(10'000'000), Error);
  EXPECT_EQ(Cui::from_number(9'999'999).str(), "C9999999");
}

TEST(Cui, NumericOrderMatchesStringOrder) {
  std::mt19937 rng(3);
  for (int i = 0; i < 2000; ++i) {
    auto a = Cui::from_number(rng() % 10'000'000);
    auto b = Cui::from_number(rng() % 10'000'000);
    EXPECT_EQ(a < b, a.str() < b.str());
    EXPECT_EQ(*Cui::parse(a.str()), a);
  }
}

TEST(Error, MessageCarriesCodeName) {
  Error e(ErrorCode::kStageDependency, "missing x");
  EXPECT_NE(std::string(e.what()).find("missing x"), std::string::npos);
  EXPECT_STREQ(error_code_name(ErrorCode::kCorruptIndex), "corrupt-index");
  RemoteError r("rate limited", 429, true);
  EXPECT_EQ(r.code(), ErrorCode::kRemote);
  EXPECT_TRUE(r.retryable());
  EXPECT_EQ(r.http_status(), 429);
}

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  Sha256 incremental;
  incremental.update("a").update("bc");
  EXPECT_EQ(to_hex(incremental.finish()), sha256_hex("abc"));
}

TEST(BinaryIo, RoundTripsScalarsAndStrings) {
  ByteWriter w;
  w.u8(7);
  w.u32(0xdeadbeef);
  w.u64(0x0123456789abcdefULL);
  w.f32(1.5f);
  w.f64(-2.25);
  w.str("héllo");
  const auto bytes = w.take();
  EXPECT_EQ(static_cast<unsigned char>(bytes[1]), 0xef);  // little-endian
  ByteReader r(bytes, ErrorCode::kCorruptIndex);
  EXPECT_EQ(r.u8(), 7);
  EXPECT_EQ(r.u32(), 0xdeadbeefu);
  EXPECT_EQ(r.u64(), 0x0123456789abcdefULL);
  EXPECT_EQ(r.f32(), 1.5f);
  EXPECT_EQ(r.f64(), -2.25);
  EXPECT_EQ(r.str(), "héllo");
  EXPECT_TRUE(r.done());
}

TEST(BinaryIo, OverrunThrowsConfiguredCode) {
  const std::string bytes = "\x05\x00\x00\x00" "ab";
  ByteReader r(bytes, ErrorCode::kCorruptSnapshot);
  try {
    r.str();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCorruptSnapshot);
  }
}

TEST(BinaryIo, AtomicWriteReplacesContent) {
  testing_support::TempDir dir;
  const auto path = (dir / "f.bin").string();
  write_file_atomic(path, "first");
  write_file_atomic(path, "second");
  EXPECT_EQ(read_file_bytes(path), "second");
  EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
  EXPECT_THROW(read_file_bytes((dir / "absent").string()), Error);
}
