#pragma once

#include <cassert>
#include <cstdint>
#include <string>

#include "shmbus/error.hpp"
#include "shmbus/sync.hpp"

namespace shmbus {

// Self-relative reference: a signed byte delta from the address of the cell
// itself to the target. Stays valid no matter which base address a process
// maps the segment at, as long as cell and target live in the same segment.
//
// delta == kNullDelta (1) is the null reference; 1 is unreachable because
// every allocation is aligned to at least 8 bytes. delta == 0 targets the
// cell's own storage (legal, used by intrusive structures).
//
// A RelativeRef is only meaningful at the address it was written to: copying
// one re-targets the copy, so the raw delta must never be memcpy'd to a
// different cell.
class RelativeRef {
 public:
  static constexpr int64_t kNullDelta = 1;

  RelativeRef() : delta_(kNullDelta) {}

  RelativeRef(const RelativeRef& other) { set(other.get()); }
  RelativeRef& operator=(const RelativeRef& other) {
    set(other.get());
    return *this;
  }

  void* get() const {
    if (delta_ == kNullDelta) return nullptr;
    return reinterpret_cast<char*>(const_cast<RelativeRef*>(this)) + delta_;
  }

  void set(const void* target) {
    if (target == nullptr) {
      delta_ = kNullDelta;
      return;
    }
    delta_ = static_cast<const char*>(target) - reinterpret_cast<char*>(this);
  }

  bool is_null() const { return delta_ == kNullDelta; }
  int64_t delta() const { return delta_; }

 private:
  int64_t delta_;
};

// Typed view over RelativeRef.
template <typename T>
class RelativePtr {
 public:
  RelativePtr() = default;
  T* get() const { return static_cast<T*>(ref_.get()); }
  void set(T* target) { ref_.set(target); }
  T* operator->() const { return get(); }
  T& operator*() const { return *get(); }
  explicit operator bool() const { return !ref_.is_null(); }

 private:
  RelativeRef ref_;
};

struct AllocStats {
  uint64_t total_bytes;       // allocatable region size
  uint64_t free_bytes;        // sum of free block sizes (incl. their headers)
  uint64_t live_allocations;  // blocks currently allocated
  uint64_t high_watermark;    // max bytes ever in use (incl. block overhead)
};

// Entry in the in-segment queue-name registry.
struct QueueRegistryEntry {
  char name[64];
  uint32_t name_len;
  uint32_t in_use;
  uint64_t queue_offset;
};

// A named shared-memory segment mapped into this process, with an in-segment
// first-fit allocator and a queue-name registry. The creator initializes the
// header and unlinks the OS name on clean destruction; openers just map.
//
// Segment names are restricted to [A-Za-z0-9_.-]{1,64} and surface in the OS
// shared-memory namespace (e.g. /dev/shm/<name>).
//
// Allocate/deallocate are serialized by the in-segment global lock and are
// safe from any thread of any attached process. Offsets double as
// mapping-independent references; offset 0 (the header) is never a valid
// allocation and acts as the null offset.
class Segment {
 public:
  static constexpr uint64_t kMinSize = 1024 * 1024;  // 1 MiB
  static constexpr uint64_t kNullOffset = 0;

  // Creates and maps a new segment. Fails on name collision unless `force`,
  // which unlinks any existing object first (used to reclaim segments whose
  // creator died; staleness is detectable via the header liveness token).
  static Segment create(const std::string& name, uint64_t size, bool force = false);

  // Maps an existing segment; validates magic and layout version.
  static Segment open(const std::string& name);

  // Opens if present, otherwise creates. Safe to race with other
  // open_or_create calls for the same name (the loser of the create race
  // falls back to opening).
  static Segment open_or_create(const std::string& name, uint64_t size);

  // Removes the OS name without mapping. No-op if absent.
  static void unlink(const std::string& name);

  static bool valid_name(const std::string& name);

  Segment() = default;
  ~Segment();
  Segment(Segment&& other) noexcept;
  Segment& operator=(Segment&& other) noexcept;
  Segment(const Segment&) = delete;
  Segment& operator=(const Segment&) = delete;

  // Allocates a zeroed block (unless `zero` is false) of `size` bytes whose first byte is aligned to
  // `align` (one of 8, 16, 32, 64, 128, 4096). Returns the segment offset of
  // the block. Throws OutOfSegmentMemory when no fit exists.
  uint64_t alloc(uint64_t size, uint64_t align = 16, bool zero = true);

  // As alloc(), but returns kNullOffset instead of throwing on exhaustion.
  uint64_t try_alloc(uint64_t size, uint64_t align = 16, bool zero = true);

  // Returns a block to the free pool, coalescing with free neighbours.
  // Double frees and foreign offsets are detected via the per-block canary
  // and throw HeapCorruption.
  void free(uint64_t offset);

  AllocStats stats() const;

  void* at(uint64_t offset) const {
    return static_cast<char*>(base_) + offset;
  }

  // Resolves a ref whose cell lives in this segment, asserting (in debug
  // builds) that the target does too.
  void* resolve(const RelativeRef& ref) const {
    void* target = ref.get();
    assert(target == nullptr || contains(target));
    return target;
  }
  uint64_t offset_of(const void* p) const {
    return static_cast<const char*>(p) - static_cast<const char*>(base_);
  }
  bool contains(const void* p) const {
    return p >= base_ && p < static_cast<char*>(base_) + size_;
  }

  void* base() const { return base_; }
  uint64_t size() const { return size_; }
  const std::string& name() const { return name_; }
  bool is_creator() const { return creator_; }
  explicit operator bool() const { return base_ != nullptr; }

  InterProcessLock& global_lock();

  // Queue-name registry (guarded by the global lock).
  // register_queue throws on duplicate name or full registry.
  void register_queue(const std::string& name, uint64_t queue_offset);
  uint64_t lookup_queue(const std::string& name) const;  // kNullOffset if absent
  void unregister_queue(const std::string& name);

  // Keep the OS name when this (creator) handle is destroyed. Used by
  // benchmark participants that hand segment ownership to an orchestrator.
  void retain_os_name() { creator_ = false; }

 private:
  struct Header;
  Header& header() const;

  uint64_t alloc_locked(uint64_t size, uint64_t align, bool zero);

  void* base_ = nullptr;
  uint64_t size_ = 0;
  std::string name_;
  int fd_ = -1;
  bool creator_ = false;
};

}  // namespace shmbus
