#pragma once

#include <cstdint>
#include <string>

#include "shmbus/handle.hpp"
#include "shmbus/segment.hpp"
#include "shmbus/sync.hpp"

namespace shmbus {

enum class PushResult { kOk, kTimedOut, kClosed };
enum class PopStatus { kItem, kTimedOut, kClosed };

struct PopResult {
  PopStatus status;
  SharedHandle item;
  uint64_t tag = 0;
};

// What a producer does when the ring is full: block until a slot opens (or
// the deadline passes), or accept the item and silently discard it, counting
// the drop. Real-time pipelines use kDropNewest; the default reproduces
// steady 30 Hz streams that never saturate.
enum class FullPolicy : uint8_t { kBlock = 0, kDropNewest = 1 };

// Named, bounded, cross-process FIFO of shared-handle items, registered in
// the segment's queue-name registry. One in-segment lock plus not-empty /
// not-full events provide the blocking contract; every occupied slot holds a
// control-block offset whose strong count was released by the pusher and is
// adopted by the popper, so hand-off never touches the count in between.
//
// All operations are safe from any thread of any attached process. close()
// may race with push/pop.
class ShmQueue {
 public:
  static constexpr uint32_t kDefaultCapacity = 16;

  ShmQueue() = default;

  // Allocates and registers a new queue. Throws on duplicate name, zero
  // capacity, or segment exhaustion.
  static ShmQueue create(Segment& seg, const std::string& name, uint32_t capacity,
                         FullPolicy policy = FullPolicy::kBlock);

  // Attaches to a queue registered by some process. Throws on unknown name.
  static ShmQueue open(Segment& seg, const std::string& name);

  // Appends an item, transferring its strong count into the queue. On kOk
  // the handle is consumed; on kTimedOut/kClosed the caller keeps ownership.
  // Under kDropNewest a full queue returns kOk and counts the discard.
  PushResult push(SharedHandle& item, uint64_t tag, MonotonicTime deadline);

  // Removes the FIFO front, adopting its count. kTimedOut if nothing arrives
  // by the deadline, kClosed once the queue is closed and drained.
  PopResult pop(MonotonicTime deadline);

  // Marks the queue closed, wakes every waiter, and drops the counts of any
  // undrained items. Idempotent.
  void close();

  // Unregisters and deallocates a closed queue. Only the owner calls this,
  // and only once no other process will touch the queue again.
  void destroy();

  uint32_t len() const;
  uint32_t capacity() const;
  uint64_t dropped() const;
  bool closed() const;
  const std::string& name() const { return name_; }
  explicit operator bool() const { return state_off_ != Segment::kNullOffset; }

 private:
  struct State;
  State& state() const;

  ShmQueue(Segment* seg, uint64_t off, std::string name)
      : seg_(seg), state_off_(off), name_(std::move(name)) {}

  Segment* seg_ = nullptr;
  uint64_t state_off_ = Segment::kNullOffset;
  std::string name_;
};

}  // namespace shmbus
