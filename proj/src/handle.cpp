#include "shmbus/handle.hpp"

namespace shmbus {

namespace {

constexpr uint64_t kCountOverflowGuard = 0xfffffff0ull;

// Drops one strong count; frees the allocation if that made both counts zero.
void drop_strong(Segment& seg, uint64_t block_off) {
  auto& cb = *static_cast<ControlBlock*>(seg.at(block_off));
  uint64_t prev = cb.counts.fetch_sub(1, std::memory_order_acq_rel);
  if ((prev & ControlBlock::kStrongMask) == 0)
    throw Error("strong count underflow (corrupt handle)");
  if (prev == 1) {
    // Payload types are trivially destructible byte buffers: destruction is
    // zero work, so the last owner just returns the allocation.
    seg.free(block_off);
  }
}

void drop_weak(Segment& seg, uint64_t block_off) {
  auto& cb = *static_cast<ControlBlock*>(seg.at(block_off));
  uint64_t prev = cb.counts.fetch_sub(ControlBlock::kWeakUnit, std::memory_order_acq_rel);
  if ((prev >> 32) == 0) throw Error("weak count underflow (corrupt handle)");
  if (prev == ControlBlock::kWeakUnit) seg.free(block_off);
}

void clone_strong(Segment& seg, uint64_t block_off) {
  auto& cb = *static_cast<ControlBlock*>(seg.at(block_off));
  uint64_t prev = cb.counts.fetch_add(1, std::memory_order_relaxed);
  if ((prev & ControlBlock::kStrongMask) >= kCountOverflowGuard)
    throw Error("strong count overflow");
}

}  // namespace

// ---------------------------------------------------------------------------
// SharedHandle

SharedHandle::SharedHandle(const SharedHandle& other)
    : seg_(other.seg_), block_(other.block_) {
  if (block_ != Segment::kNullOffset) clone_strong(*seg_, block_);
}

SharedHandle& SharedHandle::operator=(const SharedHandle& other) {
  if (this != &other) {
    SharedHandle tmp(other);
    reset();
    seg_ = tmp.seg_;
    block_ = tmp.block_;
    tmp.seg_ = nullptr;
    tmp.block_ = Segment::kNullOffset;
  }
  return *this;
}

SharedHandle::SharedHandle(SharedHandle&& other) noexcept
    : seg_(other.seg_), block_(other.block_) {
  other.seg_ = nullptr;
  other.block_ = Segment::kNullOffset;
}

SharedHandle& SharedHandle::operator=(SharedHandle&& other) noexcept {
  if (this != &other) {
    reset();
    seg_ = other.seg_;
    block_ = other.block_;
    other.seg_ = nullptr;
    other.block_ = Segment::kNullOffset;
  }
  return *this;
}

SharedHandle::~SharedHandle() { reset(); }

void SharedHandle::reset() {
  if (block_ != Segment::kNullOffset) {
    drop_strong(*seg_, block_);
    seg_ = nullptr;
    block_ = Segment::kNullOffset;
  }
}

uint32_t SharedHandle::use_count() const {
  return block_ == Segment::kNullOffset ? 0 : block().strong_count();
}

uint64_t SharedHandle::size() const {
  return block_ == Segment::kNullOffset ? 0 : block().payload_size;
}

std::span<std::byte> SharedHandle::bytes() const {
  if (block_ == Segment::kNullOffset) return {};
  return {static_cast<std::byte*>(seg_->at(payload_offset())), block().payload_size};
}

WeakHandle SharedHandle::downgrade() const {
  if (block_ == Segment::kNullOffset) return {};
  block().counts.fetch_add(ControlBlock::kWeakUnit, std::memory_order_relaxed);
  return WeakHandle(seg_, block_);
}

uint64_t SharedHandle::release() {
  uint64_t off = block_;
  seg_ = nullptr;
  block_ = Segment::kNullOffset;
  return off;
}

SharedHandle SharedHandle::adopt(Segment& seg, uint64_t block_offset) {
  return SharedHandle(&seg, block_offset);
}

uint64_t SharedHandle::release_cloned() const {
  clone_strong(*seg_, block_);
  return block_;
}

// ---------------------------------------------------------------------------
// UniqueHandle

UniqueHandle::UniqueHandle(UniqueHandle&& other) noexcept
    : seg_(other.seg_), block_(other.block_) {
  other.seg_ = nullptr;
  other.block_ = Segment::kNullOffset;
}

UniqueHandle& UniqueHandle::operator=(UniqueHandle&& other) noexcept {
  if (this != &other) {
    if (block_ != Segment::kNullOffset) seg_->free(block_);
    seg_ = other.seg_;
    block_ = other.block_;
    other.seg_ = nullptr;
    other.block_ = Segment::kNullOffset;
  }
  return *this;
}

UniqueHandle::~UniqueHandle() {
  if (block_ != Segment::kNullOffset) {
    seg_->free(block_);
    seg_ = nullptr;
    block_ = Segment::kNullOffset;
  }
}

uint64_t UniqueHandle::size() const {
  return block_ == Segment::kNullOffset
             ? 0
             : static_cast<ControlBlock*>(seg_->at(block_))->payload_size;
}

std::span<std::byte> UniqueHandle::bytes() const {
  if (block_ == Segment::kNullOffset) return {};
  return {static_cast<std::byte*>(seg_->at(payload_offset())), size()};
}

SharedHandle UniqueHandle::to_shared() && {
  if (block_ == Segment::kNullOffset) return {};
  auto& cb = *static_cast<ControlBlock*>(seg_->at(block_));
  cb.counts.store(1, std::memory_order_release);
  SharedHandle out(seg_, block_);
  seg_ = nullptr;
  block_ = Segment::kNullOffset;
  return out;
}

// ---------------------------------------------------------------------------
// WeakHandle

WeakHandle::WeakHandle(const WeakHandle& other) : seg_(other.seg_), block_(other.block_) {
  if (block_ != Segment::kNullOffset)
    block().counts.fetch_add(ControlBlock::kWeakUnit, std::memory_order_relaxed);
}

WeakHandle& WeakHandle::operator=(const WeakHandle& other) {
  if (this != &other) {
    WeakHandle tmp(other);
    reset();
    seg_ = tmp.seg_;
    block_ = tmp.block_;
    tmp.seg_ = nullptr;
    tmp.block_ = Segment::kNullOffset;
  }
  return *this;
}

WeakHandle::WeakHandle(WeakHandle&& other) noexcept
    : seg_(other.seg_), block_(other.block_) {
  other.seg_ = nullptr;
  other.block_ = Segment::kNullOffset;
}

WeakHandle& WeakHandle::operator=(WeakHandle&& other) noexcept {
  if (this != &other) {
    reset();
    seg_ = other.seg_;
    block_ = other.block_;
    other.seg_ = nullptr;
    other.block_ = Segment::kNullOffset;
  }
  return *this;
}

WeakHandle::~WeakHandle() { reset(); }

void WeakHandle::reset() {
  if (block_ != Segment::kNullOffset) {
    drop_weak(*seg_, block_);
    seg_ = nullptr;
    block_ = Segment::kNullOffset;
  }
}

SharedHandle WeakHandle::upgrade() const {
  if (block_ == Segment::kNullOffset) return {};
  auto& cb = block();
  uint64_t cur = cb.counts.load(std::memory_order_acquire);
  for (;;) {
    if ((cur & ControlBlock::kStrongMask) == 0) return {};
    if (cb.counts.compare_exchange_weak(cur, cur + 1, std::memory_order_acq_rel,
                                        std::memory_order_acquire))
      return SharedHandle(seg_, block_);
  }
}

// ---------------------------------------------------------------------------

SharedHandle make_shared(Segment& seg, uint64_t payload_size, bool zero) {
  uint64_t off = seg.alloc(ControlBlock::kPayloadOffset + payload_size, 64, zero);
  auto& cb = *static_cast<ControlBlock*>(seg.at(off));
  cb.counts.store(1, std::memory_order_relaxed);
  cb.payload_size = payload_size;
  return SharedHandle(&seg, off);
}

UniqueHandle make_unique(Segment& seg, uint64_t payload_size, bool zero) {
  uint64_t off = seg.alloc(ControlBlock::kPayloadOffset + payload_size, 64, zero);
  auto& cb = *static_cast<ControlBlock*>(seg.at(off));
  cb.counts.store(0, std::memory_order_relaxed);
  cb.payload_size = payload_size;
  return UniqueHandle(&seg, off);
}

}  // namespace shmbus
