#pragma once

#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "shmbus/error.hpp"

namespace shmbus {

// Counts user-space payload-byte copies on the message path (serialize,
// deserialize, datagram reassembly). The shared-memory path performs none;
// tests assert that directly.
std::atomic<uint64_t>& payload_copy_counter();

// ---------------------------------------------------------------------------
// Little-endian codec. All wire formats are fixed little-endian so
// independently built processes interoperate.

class Encoder {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<std::byte>(v)); }
  void u16(uint16_t v) { raw(&v, 2); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void str(const std::string& s) {
    if (s.size() > 0xffff) throw TransportError("string too long for wire");
    u16(static_cast<uint16_t>(s.size()));
    raw(s.data(), s.size());
  }
  void bytes(std::span<const std::byte> b) { raw(b.data(), b.size()); }

  std::span<const std::byte> view() const { return buf_; }
  std::vector<std::byte> take() { return std::move(buf_); }
  size_t size() const { return buf_.size(); }

 private:
  void raw(const void* p, size_t n) {
    // Little-endian host assumed; static_assert guards the build.
    static_assert(std::endian::native == std::endian::little);
    auto* b = static_cast<const std::byte*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::byte> buf_;
};

class Decoder {
 public:
  explicit Decoder(std::span<const std::byte> data) : data_(data) {}

  uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }
  uint16_t u16() { uint16_t v; std::memcpy(&v, take(2).data(), 2); return v; }
  uint32_t u32() { uint32_t v; std::memcpy(&v, take(4).data(), 4); return v; }
  uint64_t u64() { uint64_t v; std::memcpy(&v, take(8).data(), 8); return v; }
  std::string str() {
    uint16_t n = u16();
    auto b = take(n);
    return std::string(reinterpret_cast<const char*>(b.data()), n);
  }
  std::span<const std::byte> bytes(size_t n) { return take(n); }
  size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::byte> take(size_t n) {
    if (pos_ + n > data_.size()) throw TransportError("truncated frame");
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::span<const std::byte> data_;
  size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Message frame for the socket transports.
//
// Layout: magic u32 | kind u8 | topic_len u16 | topic | seq u64 |
//         stamp_ns u64 | payload_len u64 | payload bytes.
// Total length is exactly 4+1+2+len(topic)+8+8+8+payload_len.
//
// kPayload frames carry the message bytes inline. kDescriptor frames (the
// hybrid transport) replace the payload with the segment name and the
// control-block offset of a payload whose strong count the sender already
// incremented on the receiver's behalf.

constexpr uint32_t kWireMagic = 0x4d535542u;  // "BUSM"

enum class FrameKind : uint8_t { kPayload = 1, kDescriptor = 2 };

struct FrameHeader {
  FrameKind kind;
  std::string topic;
  uint64_t seq;
  uint64_t stamp_ns;
  uint64_t payload_len;
};

constexpr size_t kFrameFixedPrefix = 4 + 1 + 2;  // magic, kind, topic_len

inline size_t frame_length(size_t topic_len, uint64_t payload_len) {
  return kFrameFixedPrefix + topic_len + 8 + 8 + 8 + payload_len;
}

// Serializes header + payload into one contiguous buffer (copies the
// payload; that copy is what the shared-memory path avoids).
std::vector<std::byte> serialize_frame(const FrameHeader& h,
                                       std::span<const std::byte> payload);

// Header-only serialization for descriptor frames; `descriptor` becomes the
// frame payload.
struct HybridDescriptor {
  std::string segment_name;
  uint64_t block_offset;
};

std::vector<std::byte> serialize_descriptor(const std::string& topic, uint64_t seq,
                                            uint64_t stamp_ns,
                                            const HybridDescriptor& d);

HybridDescriptor parse_descriptor(std::span<const std::byte> frame_payload);

// Parses a complete frame. Throws TransportError on bad magic or truncation;
// never surfaces a partial message. The returned payload span aliases
// `data`.
struct ParsedFrame {
  FrameHeader header;
  std::span<const std::byte> payload;
};

ParsedFrame parse_frame(std::span<const std::byte> data);

// Incremental header parse for stream sockets: given the fixed prefix, how
// many more bytes make up the rest of the header; then the payload length.
struct FramePrefix {
  FrameKind kind;
  uint16_t topic_len;
};

FramePrefix parse_prefix(std::span<const std::byte> prefix);  // kFrameFixedPrefix bytes

// ---------------------------------------------------------------------------
// Datagram chunking for the UDP transport. A serialized frame is split into
// chunks of at most kUdpChunkBytes; each datagram carries its own small
// header so the receiver can reassemble or discard incomplete messages.
// There is no retransmission.

constexpr uint32_t kChunkMagic = 0x4b484e43u;  // "CNHK"
constexpr size_t kUdpChunkBytes = 60 * 1024;   // below the 64 KiB loopback MTU
constexpr size_t kChunkHeaderBytes = 4 + 8 + 4 + 4 + 4;

struct ChunkHeader {
  uint64_t seq;
  uint32_t index;
  uint32_t count;
  uint32_t len;
};

std::vector<std::byte> build_chunk(const ChunkHeader& h, std::span<const std::byte> body);
ChunkHeader parse_chunk_header(std::span<const std::byte> datagram);

inline uint32_t chunk_count_for(uint64_t frame_len) {
  return static_cast<uint32_t>((frame_len + kUdpChunkBytes - 1) / kUdpChunkBytes);
}

// ---------------------------------------------------------------------------
// Control protocol verbs, shared by the registry service and publisher
// control sockets. Requests and responses are length-prefixed:
//   u32 length | u8 verb | fields...      (request)
//   u32 length | u8 verb | u8 status | fields...  (response)

enum class Verb : uint8_t {
  kRegister = 1,
  kLookup = 2,
  kSubscribe = 3,
  kQueueInfo = 4,
  kBarrier = 5,
  kBye = 6,
  kAck = 7,  // subscriber -> publisher consumption watermark (hybrid flow control)
};

enum class Status : uint8_t { kOk = 0, kError = 1, kTimeout = 2 };

}  // namespace shmbus
