#include "shmbus/queue.hpp"

#include <cstring>

namespace shmbus {

namespace {
constexpr uint32_t kQueueMagic = 0x53515545u;  // "SQUE"
}

struct ShmQueue::State {
  uint32_t magic;
  uint32_t capacity;
  uint32_t head;
  uint32_t len;
  uint64_t pushed;
  uint64_t popped;
  uint64_t dropped;
  uint8_t closed;
  uint8_t policy;
  uint16_t pad;
  InterProcessLock lock;
  InterProcessEvent not_empty;
  InterProcessEvent not_full;

  struct Slot {
    uint64_t block_offset;  // mapping-independent; slots may be relocated
    uint64_t tag;
  };
  Slot slots[];  // capacity entries

  static uint64_t bytes_for(uint32_t capacity) {
    return sizeof(State) + static_cast<uint64_t>(capacity) * sizeof(Slot);
  }
};

ShmQueue::State& ShmQueue::state() const {
  return *static_cast<State*>(seg_->at(state_off_));
}

ShmQueue ShmQueue::create(Segment& seg, const std::string& name, uint32_t capacity,
                          FullPolicy policy) {
  if (capacity == 0) throw Error("queue capacity must be at least 1: " + name);
  uint64_t off = seg.alloc(State::bytes_for(capacity), 64);
  auto& st = *static_cast<State*>(seg.at(off));
  st.magic = kQueueMagic;
  st.capacity = capacity;
  st.head = 0;
  st.len = 0;
  st.pushed = st.popped = st.dropped = 0;
  st.closed = 0;
  st.policy = static_cast<uint8_t>(policy);
  st.lock.init();
  st.not_empty.init();
  st.not_full.init();
  try {
    seg.register_queue(name, off);
  } catch (...) {
    seg.free(off);
    throw;
  }
  return ShmQueue(&seg, off, name);
}

ShmQueue ShmQueue::open(Segment& seg, const std::string& name) {
  uint64_t off = seg.lookup_queue(name);
  if (off == Segment::kNullOffset)
    throw Error("no such queue in segment registry: " + name);
  auto& st = *static_cast<State*>(seg.at(off));
  if (st.magic != kQueueMagic)
    throw Error("registry entry does not point at a queue: " + name);
  return ShmQueue(&seg, off, name);
}

PushResult ShmQueue::push(SharedHandle& item, uint64_t tag, MonotonicTime deadline) {
  auto& st = state();
  LockGuard g(st.lock);
  while (st.len == st.capacity && !st.closed) {
    if (st.policy == static_cast<uint8_t>(FullPolicy::kDropNewest)) {
      st.dropped += 1;
      item.reset();  // count dropped exactly once, here
      return PushResult::kOk;
    }
    if (st.not_full.wait(st.lock, deadline) == WakeReason::kTimedOut &&
        st.len == st.capacity && !st.closed)
      return PushResult::kTimedOut;
  }
  if (st.closed) return PushResult::kClosed;
  uint32_t idx = (st.head + st.len) % st.capacity;
  st.slots[idx].block_offset = item.release();
  st.slots[idx].tag = tag;
  st.len += 1;
  st.pushed += 1;
  st.not_empty.notify_one();
  return PushResult::kOk;
}

PopResult ShmQueue::pop(MonotonicTime deadline) {
  auto& st = state();
  LockGuard g(st.lock);
  while (st.len == 0 && !st.closed) {
    if (st.not_empty.wait(st.lock, deadline) == WakeReason::kTimedOut &&
        st.len == 0 && !st.closed)
      return {PopStatus::kTimedOut, {}, 0};
  }
  if (st.len == 0 && st.closed) return {PopStatus::kClosed, {}, 0};
  auto slot = st.slots[st.head];
  st.head = (st.head + 1) % st.capacity;
  st.len -= 1;
  st.popped += 1;
  st.not_full.notify_one();
  return {PopStatus::kItem, SharedHandle::adopt(*seg_, slot.block_offset), slot.tag};
}

void ShmQueue::close() {
  auto& st = state();
  LockGuard g(st.lock);
  if (!st.closed) {
    st.closed = 1;
    // Drain: the owner releases the counts of anything never popped.
    while (st.len > 0) {
      auto slot = st.slots[st.head];
      st.head = (st.head + 1) % st.capacity;
      st.len -= 1;
      SharedHandle::adopt(*seg_, slot.block_offset);  // dropped immediately
    }
  }
  st.not_empty.notify_all();
  st.not_full.notify_all();
}

void ShmQueue::destroy() {
  if (state_off_ == Segment::kNullOffset) return;
  close();
  seg_->unregister_queue(name_);
  seg_->free(state_off_);
  state_off_ = Segment::kNullOffset;
}

uint32_t ShmQueue::len() const {
  auto& st = state();
  LockGuard g(st.lock);
  return st.len;
}

uint32_t ShmQueue::capacity() const { return state().capacity; }

uint64_t ShmQueue::dropped() const {
  auto& st = state();
  LockGuard g(st.lock);
  return st.dropped;
}

bool ShmQueue::closed() const {
  auto& st = state();
  LockGuard g(st.lock);
  return st.closed != 0;
}

}  // namespace shmbus
