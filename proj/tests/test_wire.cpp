#include "shmbus/wire.hpp"

#include <random>

#include "doctest.h"

using namespace shmbus;

namespace {

std::vector<std::byte> make_payload(size_t n, uint8_t seed) {
  std::vector<std::byte> out(n);
  for (size_t i = 0; i < n; ++i)
    out[i] = static_cast<std::byte>(static_cast<uint8_t>(seed + i * 13));
  return out;
}

}  // namespace

TEST_CASE("frame round trip is identity on seq, stamp, and payload") {
  auto payload = make_payload(128, 7);
  FrameHeader h{FrameKind::kPayload, "cam0/image", 42, 1234567890123ull,
                payload.size()};
  auto bytes = serialize_frame(h, payload);
  auto parsed = parse_frame(bytes);
  CHECK(parsed.header.kind == FrameKind::kPayload);
  CHECK(parsed.header.topic == "cam0/image");
  CHECK(parsed.header.seq == 42);
  CHECK(parsed.header.stamp_ns == 1234567890123ull);
  REQUIRE(parsed.payload.size() == payload.size());
  CHECK(std::memcmp(parsed.payload.data(), payload.data(), payload.size()) == 0);
}

TEST_CASE("framed length is exactly 4+1+2+topic+8+8+8+payload") {
  for (size_t topic_len : {1u, 9u, 128u}) {
    for (size_t payload_len : {0u, 1u, 511u, 70000u}) {
      std::string topic(topic_len, 't');
      auto payload = make_payload(payload_len, 3);
      auto bytes = serialize_frame(
          {FrameKind::kPayload, topic, 1, 2, payload_len}, payload);
      CHECK(bytes.size() == 4 + 1 + 2 + topic_len + 8 + 8 + 8 + payload_len);
      CHECK(bytes.size() == frame_length(topic_len, payload_len));
    }
  }
}

TEST_CASE("wire layout is little-endian with fixed field order") {
  auto bytes = serialize_frame({FrameKind::kPayload, "t", 0x0102030405060708ull,
                                0x1112131415161718ull, 1},
                               make_payload(1, 0));
  // magic
  CHECK(static_cast<uint8_t>(bytes[0]) == (kWireMagic & 0xff));
  CHECK(static_cast<uint8_t>(bytes[3]) == (kWireMagic >> 24));
  // kind, topic_len
  CHECK(static_cast<uint8_t>(bytes[4]) == 1);
  CHECK(static_cast<uint8_t>(bytes[5]) == 1);
  CHECK(static_cast<uint8_t>(bytes[6]) == 0);
  // seq little-endian starts after topic at 4+1+2+1 = 8
  CHECK(static_cast<uint8_t>(bytes[8]) == 0x08);
  CHECK(static_cast<uint8_t>(bytes[15]) == 0x01);
}

TEST_CASE("truncated or corrupt frames never surface a partial message") {
  auto payload = make_payload(64, 1);
  auto bytes = serialize_frame({FrameKind::kPayload, "top", 5, 6, payload.size()},
                               payload);

  for (size_t cut : {size_t{3}, size_t{6}, size_t{10}, bytes.size() - 1}) {
    CHECK_THROWS_AS(parse_frame(std::span(bytes).first(cut)), TransportError);
  }
  auto bad = bytes;
  bad[0] = std::byte{0xFF};
  CHECK_THROWS_AS(parse_frame(bad), TransportError);

  auto trailing = bytes;
  trailing.push_back(std::byte{0});
  CHECK_THROWS_AS(parse_frame(trailing), TransportError);
}

TEST_CASE("random frames round trip (property)") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    std::string topic;
    size_t tl = 1 + rng() % 100;
    for (size_t c = 0; c < tl; ++c) topic.push_back('a' + rng() % 26);
    auto payload = make_payload(rng() % 5000, static_cast<uint8_t>(rng()));
    FrameHeader h{FrameKind::kPayload, topic, rng(), rng(), payload.size()};
    auto parsed = parse_frame(serialize_frame(h, payload));
    CHECK(parsed.header.topic == topic);
    CHECK(parsed.header.seq == h.seq);
    CHECK(parsed.header.stamp_ns == h.stamp_ns);
    CHECK(std::equal(parsed.payload.begin(), parsed.payload.end(), payload.begin(),
                     payload.end()));
  }
}

TEST_CASE("hybrid descriptor frames carry segment name and block offset") {
  HybridDescriptor d{"LOTSEG", 0xdeadbeef00ull};
  auto bytes = serialize_descriptor("cam0", 9, 100, d);
  auto parsed = parse_frame(bytes);
  CHECK(parsed.header.kind == FrameKind::kDescriptor);
  CHECK(parsed.header.seq == 9);
  auto back = parse_descriptor(parsed.payload);
  CHECK(back.segment_name == "LOTSEG");
  CHECK(back.block_offset == 0xdeadbeef00ull);
}

TEST_CASE("udp chunk math matches the 60 KiB contract") {
  CHECK(kUdpChunkBytes == 60 * 1024);
  // A 16 MiB payload needs at least 267 datagrams (16 MiB / 60 KiB rounded up).
  uint64_t frame = frame_length(8, 16ull << 20);
  CHECK(chunk_count_for(frame) >= 267);
  CHECK(chunk_count_for(1) == 1);
  CHECK(chunk_count_for(kUdpChunkBytes) == 1);
  CHECK(chunk_count_for(kUdpChunkBytes + 1) == 2);
}

TEST_CASE("chunk headers round trip and validate length") {
  auto body = make_payload(1000, 5);
  auto dgram = build_chunk({77, 3, 9, 1000}, body);
  auto h = parse_chunk_header(dgram);
  CHECK(h.seq == 77);
  CHECK(h.index == 3);
  CHECK(h.count == 9);
  CHECK(h.len == 1000);
  dgram.pop_back();
  CHECK_THROWS_AS(parse_chunk_header(dgram), TransportError);
}

TEST_CASE("encoder/decoder primitives round trip (property)") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    uint8_t a = static_cast<uint8_t>(rng());
    uint16_t b = static_cast<uint16_t>(rng());
    uint32_t c = static_cast<uint32_t>(rng());
    uint64_t d = rng();
    std::string s;
    for (size_t n = rng() % 50, j = 0; j < n; ++j) s.push_back('!' + rng() % 90);

    Encoder e;
    e.u8(a);
    e.str(s);
    e.u32(c);
    e.u64(d);
    e.u16(b);
    auto buf = e.take();
    Decoder dec(buf);
    CHECK(dec.u8() == a);
    CHECK(dec.str() == s);
    CHECK(dec.u32() == c);
    CHECK(dec.u64() == d);
    CHECK(dec.u16() == b);
    CHECK(dec.remaining() == 0);
  }
  Decoder dec(std::span<const std::byte>{});
  CHECK_THROWS_AS(dec.u8(), TransportError);
}
