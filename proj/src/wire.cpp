#include "shmbus/wire.hpp"

namespace shmbus {

std::atomic<uint64_t>& payload_copy_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

std::vector<std::byte> serialize_frame(const FrameHeader& h,
                                       std::span<const std::byte> payload) {
  Encoder e;
  e.u32(kWireMagic);
  e.u8(static_cast<uint8_t>(h.kind));
  e.str(h.topic);
  e.u64(h.seq);
  e.u64(h.stamp_ns);
  e.u64(payload.size());
  e.bytes(payload);
  if (!payload.empty())
    payload_copy_counter().fetch_add(1, std::memory_order_relaxed);
  return e.take();
}

std::vector<std::byte> serialize_descriptor(const std::string& topic, uint64_t seq,
                                            uint64_t stamp_ns,
                                            const HybridDescriptor& d) {
  Encoder inner;
  inner.str(d.segment_name);
  inner.u64(d.block_offset);
  auto blob = inner.take();

  Encoder e;
  e.u32(kWireMagic);
  e.u8(static_cast<uint8_t>(FrameKind::kDescriptor));
  e.str(topic);
  e.u64(seq);
  e.u64(stamp_ns);
  e.u64(blob.size());
  e.bytes(blob);
  return e.take();
}

HybridDescriptor parse_descriptor(std::span<const std::byte> frame_payload) {
  Decoder d(frame_payload);
  HybridDescriptor out;
  out.segment_name = d.str();
  out.block_offset = d.u64();
  return out;
}

ParsedFrame parse_frame(std::span<const std::byte> data) {
  Decoder d(data);
  if (d.u32() != kWireMagic) throw TransportError("bad frame magic");
  ParsedFrame out;
  out.header.kind = static_cast<FrameKind>(d.u8());
  if (out.header.kind != FrameKind::kPayload && out.header.kind != FrameKind::kDescriptor)
    throw TransportError("unknown frame kind");
  out.header.topic = d.str();
  out.header.seq = d.u64();
  out.header.stamp_ns = d.u64();
  out.header.payload_len = d.u64();
  if (d.remaining() != out.header.payload_len)
    throw TransportError("frame length mismatch");
  out.payload = d.bytes(out.header.payload_len);
  return out;
}

FramePrefix parse_prefix(std::span<const std::byte> prefix) {
  Decoder d(prefix);
  if (d.u32() != kWireMagic) throw TransportError("bad frame magic");
  FramePrefix out;
  out.kind = static_cast<FrameKind>(d.u8());
  out.topic_len = d.u16();
  return out;
}

std::vector<std::byte> build_chunk(const ChunkHeader& h, std::span<const std::byte> body) {
  Encoder e;
  e.u32(kChunkMagic);
  e.u64(h.seq);
  e.u32(h.index);
  e.u32(h.count);
  e.u32(static_cast<uint32_t>(body.size()));
  e.bytes(body);
  return e.take();
}

ChunkHeader parse_chunk_header(std::span<const std::byte> datagram) {
  Decoder d(datagram);
  if (d.u32() != kChunkMagic) throw TransportError("bad chunk magic");
  ChunkHeader out;
  out.seq = d.u64();
  out.index = d.u32();
  out.count = d.u32();
  out.len = d.u32();
  if (d.remaining() != out.len) throw TransportError("chunk length mismatch");
  return out;
}

}  // namespace shmbus
