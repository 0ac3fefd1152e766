#pragma once

#include <atomic>
#include <cstdint>
#include <span>

#include "shmbus/segment.hpp"

namespace shmbus {

// Bookkeeping record co-allocated with every shared payload. Strong and weak
// counts are packed into one atomic word so the "both hit zero" free decision
// is a single linearizable transition: exactly one decrement observes it.
//
// Payloads are trivially destructible byte buffers, so destruction on the
// last strong drop is zero work and the allocation is returned to the
// segment allocator when both counts are zero. No destructor dispatch or
// absolute address ever lives in the block.
struct ControlBlock {
  static constexpr uint64_t kStrongMask = 0xffffffffull;
  static constexpr uint64_t kWeakUnit = 1ull << 32;
  static constexpr uint64_t kPayloadOffset = 64;  // payload is cache-line aligned

  std::atomic<uint64_t> counts;  // strong in low 32 bits, weak in high 32
  uint64_t payload_size;
  uint64_t reserved[6];

  uint32_t strong_count() const {
    return static_cast<uint32_t>(counts.load(std::memory_order_acquire) & kStrongMask);
  }
  uint32_t weak_count() const {
    return static_cast<uint32_t>(counts.load(std::memory_order_acquire) >> 32);
  }
};

static_assert(sizeof(ControlBlock) == ControlBlock::kPayloadOffset);

class WeakHandle;

// Shared ownership of a segment-allocated payload. Copying clones (strong+1),
// destruction drops (strong-1); the payload is destroyed exactly once when
// the strong count hits zero and the allocation is freed once both counts
// are zero. Safe to clone/drop concurrently from any process; a single
// handle object must not be mutated by two threads at once.
class SharedHandle {
 public:
  SharedHandle() = default;
  SharedHandle(const SharedHandle& other);
  SharedHandle& operator=(const SharedHandle& other);
  SharedHandle(SharedHandle&& other) noexcept;
  SharedHandle& operator=(SharedHandle&& other) noexcept;
  ~SharedHandle();

  SharedHandle clone() const { return SharedHandle(*this); }
  void reset();

  uint32_t use_count() const;
  uint64_t size() const;
  std::span<std::byte> bytes() const;
  uint64_t block_offset() const { return block_; }
  uint64_t payload_offset() const {
    return block_ == Segment::kNullOffset ? 0 : block_ + ControlBlock::kPayloadOffset;
  }
  Segment* segment() const { return seg_; }
  explicit operator bool() const { return block_ != Segment::kNullOffset; }

  WeakHandle downgrade() const;

  // Hand-off through shared state (queues, hybrid descriptors): release()
  // transfers this handle's strong count out as a raw control-block offset;
  // adopt() assumes ownership of a count someone released. The count is
  // never touched in between, which makes the hand-off linearizable without
  // an ack.
  uint64_t release();
  static SharedHandle adopt(Segment& seg, uint64_t block_offset);

  // Takes one extra strong count on behalf of a peer and returns the block
  // offset; the peer adopts it. Equivalent to clone().release() without the
  // intermediate object.
  uint64_t release_cloned() const;

 private:
  friend class WeakHandle;
  friend class UniqueHandle;
  friend SharedHandle make_shared(Segment&, uint64_t, bool);

  SharedHandle(Segment* seg, uint64_t block) : seg_(seg), block_(block) {}
  ControlBlock& block() const {
    return *static_cast<ControlBlock*>(seg_->at(block_));
  }

  Segment* seg_ = nullptr;
  uint64_t block_ = Segment::kNullOffset;
};

// Exclusive ownership of a segment allocation; no reference counting while
// unique. Converting to a SharedHandle consumes the handle and costs one
// atomic store (control block space is reserved up front, so no copy).
class UniqueHandle {
 public:
  UniqueHandle() = default;
  UniqueHandle(UniqueHandle&& other) noexcept;
  UniqueHandle& operator=(UniqueHandle&& other) noexcept;
  UniqueHandle(const UniqueHandle&) = delete;
  UniqueHandle& operator=(const UniqueHandle&) = delete;
  ~UniqueHandle();

  uint64_t size() const;
  std::span<std::byte> bytes() const;
  uint64_t payload_offset() const {
    return block_ == Segment::kNullOffset ? 0 : block_ + ControlBlock::kPayloadOffset;
  }
  explicit operator bool() const { return block_ != Segment::kNullOffset; }

  SharedHandle to_shared() &&;

 private:
  friend UniqueHandle make_unique(Segment&, uint64_t, bool);

  UniqueHandle(Segment* seg, uint64_t block) : seg_(seg), block_(block) {}

  Segment* seg_ = nullptr;
  uint64_t block_ = Segment::kNullOffset;
};

// Non-owning observer; upgrade() succeeds iff a strong count still exists at
// the linearization point.
class WeakHandle {
 public:
  WeakHandle() = default;
  WeakHandle(const WeakHandle& other);
  WeakHandle& operator=(const WeakHandle& other);
  WeakHandle(WeakHandle&& other) noexcept;
  WeakHandle& operator=(WeakHandle&& other) noexcept;
  ~WeakHandle();

  SharedHandle upgrade() const;  // empty handle if the payload is gone
  void reset();
  explicit operator bool() const { return block_ != Segment::kNullOffset; }

 private:
  friend class SharedHandle;

  WeakHandle(Segment* seg, uint64_t block) : seg_(seg), block_(block) {}
  ControlBlock& block() const {
    return *static_cast<ControlBlock*>(seg_->at(block_));
  }

  Segment* seg_ = nullptr;
  uint64_t block_ = Segment::kNullOffset;
};

// One allocation holding ControlBlock{strong=1, weak=0} plus the payload.
SharedHandle make_shared(Segment& seg, uint64_t payload_size, bool zero = true);
UniqueHandle make_unique(Segment& seg, uint64_t payload_size, bool zero = true);

}  // namespace shmbus
