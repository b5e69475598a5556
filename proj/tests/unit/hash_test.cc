// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <vector>

#include "sketchpipe/hash.h"

using namespace sketchpipe;

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex(std::string_view{}),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq"),
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST(Sha256, ByteAndTextOverloadsAgree) {
  const std::vector<std::uint8_t> bytes{'a', 'b', 'c', 0, 0xff};
  const std::string text(bytes.begin(), bytes.end());
  EXPECT_EQ(sha256_hex(std::span<const std::uint8_t>(bytes)), sha256_hex(std::string_view(text)));
}

TEST(HexDigest, Shape) {
  EXPECT_TRUE(is_hex_digest(sha256_hex("x")));
  EXPECT_FALSE(is_hex_digest(""));
  EXPECT_FALSE(is_hex_digest(std::string(63, 'a')));
  EXPECT_FALSE(is_hex_digest(std::string(64, 'A')));
  EXPECT_FALSE(is_hex_digest(std::string(64, 'g')));
}

TEST(Base64, Rfc4648Vectors) {
  auto enc = [](std::string_view s) {
    return base64_encode(std::span<const std::uint8_t>(
        reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  };
  EXPECT_EQ(enc(""), "");
  EXPECT_EQ(enc("f"), "Zg==");
  EXPECT_EQ(enc("fo"), "Zm8=");
  EXPECT_EQ(enc("foo"), "Zm9v");
  EXPECT_EQ(enc("foob"), "Zm9vYg==");
  EXPECT_EQ(enc("fooba"), "Zm9vYmE=");
  EXPECT_EQ(enc("foobar"), "Zm9vYmFy");
}
