#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "shmbus/handle.hpp"
#include "shmbus/queue.hpp"
#include "shmbus/registry.hpp"
#include "shmbus/segment.hpp"
#include "shmbus/wire.hpp"

namespace shmbus {

enum class TransportKind : uint8_t {
  kShm = 0,      // payload and hand-off entirely in the shared segment
  kTcp = 1,      // loopback TCP stream, serialized frames
  kUds = 2,      // Unix domain stream, serialized frames
  kUdp = 3,      // loopback datagrams, chunked, no retransmission
  kHybrid = 4,   // descriptor over a loopback stream, payload in the segment
};

std::string to_string(TransportKind kind);
TransportKind transport_from_string(const std::string& s);

struct EngineConfig {
  std::string node_name;       // unique per participating process
  std::string registry_path;   // empty -> default_registry_path()
  std::string segment_name;    // empty -> env SHMBUS_SEGMENT or "shmbus"
  uint64_t segment_size = 1ull << 30;
  std::string socket_dir;      // empty -> "/tmp"
  uint32_t queue_capacity = ShmQueue::kDefaultCapacity;
  FullPolicy full_policy = FullPolicy::kBlock;
};

struct PublishReport {
  uint32_t delivered_to = 0;
  uint32_t dropped = 0;
};

// A message being assembled for publication. On the segment-backed
// transports the payload lives in a segment allocation and is written in
// place, exactly once; on socket transports it is an ordinary buffer that
// serialization will copy.
class OutMessage {
 public:
  std::span<std::byte> payload();
  uint64_t payload_segment_offset() const;  // 0 on socket transports
  uint64_t size() const { return size_; }

 private:
  friend class Pusher;
  UniqueHandle block_;                       // segment-backed transports
  std::unique_ptr<std::byte[]> heap_;        // socket transports
  uint64_t size_ = 0;
  Segment* seg_ = nullptr;
};

// One delivered message. On SHM/HYBRID the payload span aliases the segment
// (zero-copy) and `retained` holds the strong count adopted from the sender;
// on socket transports it aliases a private per-message buffer.
struct MessageView {
  uint64_t seq = 0;
  uint64_t stamp_ns = 0;
  uint64_t recv_ns = 0;
  uint32_t publisher_id = 0;
  std::span<const std::byte> payload;
  uint64_t payload_segment_offset = 0;  // 0 on socket transports
  SharedHandle retained;
  std::shared_ptr<std::byte[]> owned;
};

enum class ReceiveStatus { kMessage, kTimedOut, kClosed };

struct ReceiveResult {
  ReceiveStatus status;
  MessageView message;
};

class ShmEngine;

// Publisher side of one topic: fans each published message out to every
// attached subscriber, in attachment order. publish() is safe from one
// thread at a time.
class Pusher {
 public:
  ~Pusher();
  Pusher(const Pusher&) = delete;
  Pusher& operator=(const Pusher&) = delete;

  const std::string& topic() const;
  TransportKind kind() const;
  uint32_t publisher_id() const;

  OutMessage loan(uint64_t payload_size);
  PublishReport publish(OutMessage&& msg);

  size_t subscriber_count() const;
  size_t active_subscriber_count() const;  // attached minus departed
  std::vector<std::string> subscriber_names() const;  // attachment order
  bool wait_for_subscribers(size_t n, MonotonicTime deadline);

  // Fault injection for loss-accounting tests: the next time `seq` is
  // published over UDP, datagram `chunk_index` is silently not sent.
  void inject_udp_chunk_drop(uint64_t seq, uint32_t chunk_index);

 private:
  friend class ShmEngine;
  struct Impl;
  explicit Pusher(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

// Subscriber side of one topic: one puller (consumer thread) per publisher,
// all feeding a single-consumer channel drained by receive().
class Subscription {
 public:
  Subscription();
  ~Subscription();
  Subscription(Subscription&&) noexcept;
  Subscription& operator=(Subscription&&) noexcept;

  ReceiveResult receive(MonotonicTime deadline);

  const std::string& topic() const;
  size_t publisher_count() const;
  uint64_t lost() const;  // UDP messages discarded as incomplete

 private:
  friend class ShmEngine;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Per-process transport coordinator: owns the control socket, the registry
// connection, and (when a segment-backed transport is used) the mapping of
// the shared segment. One engine per participating process.
class ShmEngine {
 public:
  explicit ShmEngine(EngineConfig cfg);
  ~ShmEngine();
  ShmEngine(const ShmEngine&) = delete;
  ShmEngine& operator=(const ShmEngine&) = delete;

  // Registers the topic and starts accepting SUBSCRIBE requests for it.
  // Throws on duplicate advertisement or unreachable registry.
  Pusher& advertise(const std::string& topic, TransportKind kind, bool nodelay = false);

  // Connects to every registered publisher of the topic (waiting for at
  // least one until the deadline), in registry order.
  Subscription subscribe(const std::string& topic, TransportKind kind,
                         MonotonicTime deadline, bool nodelay = false);

  Segment* segment();  // null until a segment-backed transport attaches one
  const EngineConfig& config() const { return cfg_; }
  const std::string& control_path() const;
  RegistryClient& registry();

 private:
  friend class Pusher;
  friend class Subscription;
  struct Impl;
  EngineConfig cfg_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace shmbus
