#include "shmbus/segment.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cctype>
#include <cstring>
#include <thread>

namespace shmbus {

namespace {

constexpr uint64_t kSegmentMagic = 0x53484d4255533031ull;  // "SHMBUS01"
constexpr uint32_t kLayoutVersion = 1;
constexpr uint32_t kReadyToken = 0x52454459u;  // "REDY"

constexpr uint64_t kBlockAlign = 16;
constexpr uint64_t kHeaderFooterSize = 16;
constexpr uint64_t kMinBlockSize = 48;  // header + free links + footer

constexpr uint64_t kAllocCanary = 0xa110c0dedbeef001ull;
constexpr uint64_t kFreeCanary = 0xf7eeb10cdeadc0deull;

constexpr uint32_t kRegistryCapacity = 256;

uint64_t round_up(uint64_t v, uint64_t a) { return (v + a - 1) & ~(a - 1); }

bool valid_align(uint64_t a) {
  switch (a) {
    case 8: case 16: case 32: case 64: case 128: case 4096: return true;
    default: return false;
  }
}

// Boundary tags at both ends of every block. `size` is the full block size
// including both tags; the canary encodes alloc/free state for double-free
// and foreign-pointer detection.
struct BlockTag {
  uint64_t size;
  uint64_t canary;

  void mark_alloc(uint64_t s) { size = s; canary = kAllocCanary ^ s; }
  void mark_free(uint64_t s) { size = s; canary = kFreeCanary ^ s; }
  bool is_alloc() const { return canary == (kAllocCanary ^ size); }
  bool is_free() const { return canary == (kFreeCanary ^ size); }
};

// Intrusive free-list links stored in the payload area of free blocks.
// Segment offsets, not pointers; 0 means end of list.
struct FreeLinks {
  uint64_t prev;
  uint64_t next;
};

struct AllocatorState {
  uint64_t region_begin;
  uint64_t region_end;
  uint64_t free_bytes;
  uint64_t in_use_bytes;
  uint64_t live_allocations;
  uint64_t high_watermark;
  uint64_t free_head;  // address-ordered singly-anchored doubly-linked list
};

struct QueueRegistry {
  uint32_t capacity;
  uint32_t count;
  QueueRegistryEntry entries[kRegistryCapacity];
};

}  // namespace

struct Segment::Header {
  uint64_t magic;
  uint32_t version;
  uint32_t ready;
  uint64_t total_size;
  uint64_t allocator_state_offset;
  uint64_t registry_offset;
  uint64_t heap_offset;
  uint64_t creator_pid;
  InterProcessLock global_lock;
};

namespace {

AllocatorState& alloc_state_at(void* base, uint64_t off) {
  return *reinterpret_cast<AllocatorState*>(static_cast<char*>(base) + off);
}

QueueRegistry& registry_at(void* base, uint64_t off) {
  return *reinterpret_cast<QueueRegistry*>(static_cast<char*>(base) + off);
}

}  // namespace

Segment::Header& Segment::header() const {
  return *static_cast<Header*>(base_);
}

bool Segment::valid_name(const std::string& name) {
  if (name.empty() || name.size() > 64) return false;
  for (char c : name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-'))
      return false;
  }
  return true;
}

namespace {

std::string os_name(const std::string& name) { return "/" + name; }

}  // namespace

Segment Segment::create(const std::string& name, uint64_t size, bool force) {
  if (!valid_name(name))
    throw SegmentError("invalid segment name: '" + name + "'");
  if (size < kMinSize)
    throw SegmentError("segment size below minimum (1 MiB): " + std::to_string(size));

  const std::string oname = os_name(name);
  if (force) ::shm_unlink(oname.c_str());

  int fd = ::shm_open(oname.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
  if (fd < 0) {
    if (errno == EEXIST) {
      // Distinguish a live collision from a stale segment left by a dead
      // creator, so callers know force-recreation is safe.
      std::string detail = "segment name already in use: " + name;
      int peek = ::shm_open(oname.c_str(), O_RDWR, 0600);
      if (peek >= 0) {
        struct stat st {};
        if (::fstat(peek, &st) == 0 && static_cast<uint64_t>(st.st_size) >= sizeof(Header)) {
          void* p = ::mmap(nullptr, sizeof(Header), PROT_READ, MAP_SHARED, peek, 0);
          if (p != MAP_FAILED) {
            auto* h = static_cast<Header*>(p);
            if (h->magic == kSegmentMagic && h->creator_pid != 0 &&
                ::kill(static_cast<pid_t>(h->creator_pid), 0) != 0 && errno == ESRCH) {
              detail += " (stale: creator pid " + std::to_string(h->creator_pid) +
                        " is dead; recreate with force)";
            }
            ::munmap(p, sizeof(Header));
          }
        }
        ::close(peek);
      }
      throw SegmentError(detail);
    }
    throw SegmentError("shm_open failed for '" + name + "': " + strerror(errno));
  }

  if (::ftruncate(fd, static_cast<off_t>(size)) != 0) {
    int e = errno;
    ::close(fd);
    ::shm_unlink(oname.c_str());
    throw SegmentError("ftruncate failed for '" + name + "': " + strerror(e));
  }

  void* base = ::mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
  if (base == MAP_FAILED) {
    int e = errno;
    ::close(fd);
    ::shm_unlink(oname.c_str());
    throw SegmentError("mmap failed for '" + name + "': " + strerror(e));
  }

  Segment seg;
  seg.base_ = base;
  seg.size_ = size;
  seg.name_ = name;
  seg.fd_ = fd;
  seg.creator_ = true;

  auto& h = seg.header();
  h.magic = kSegmentMagic;
  h.version = kLayoutVersion;
  h.total_size = size;
  h.creator_pid = static_cast<uint64_t>(::getpid());

  uint64_t off = round_up(sizeof(Header), kBlockAlign);
  h.allocator_state_offset = off;
  off = round_up(off + sizeof(AllocatorState), kBlockAlign);
  h.registry_offset = off;
  off = round_up(off + sizeof(QueueRegistry), kBlockAlign);
  h.heap_offset = round_up(off, 4096);

  h.global_lock.init();

  auto& reg = registry_at(base, h.registry_offset);
  reg.capacity = kRegistryCapacity;
  reg.count = 0;
  std::memset(reg.entries, 0, sizeof(reg.entries));

  auto& a = alloc_state_at(base, h.allocator_state_offset);
  a.region_begin = h.heap_offset;
  a.region_end = size & ~(kBlockAlign - 1);
  if (a.region_end <= a.region_begin + kMinBlockSize)
    throw SegmentError("segment too small for its metadata");
  a.free_bytes = a.region_end - a.region_begin;
  a.in_use_bytes = 0;
  a.live_allocations = 0;
  a.high_watermark = 0;
  a.free_head = a.region_begin;

  // One free block spanning the whole heap.
  uint64_t bsize = a.region_end - a.region_begin;
  auto* head = reinterpret_cast<BlockTag*>(seg.at(a.region_begin));
  head->mark_free(bsize);
  auto* links = reinterpret_cast<FreeLinks*>(seg.at(a.region_begin + kHeaderFooterSize));
  links->prev = 0;
  links->next = 0;
  auto* foot = reinterpret_cast<BlockTag*>(seg.at(a.region_end - kHeaderFooterSize));
  foot->mark_free(bsize);

  __atomic_store_n(&h.ready, kReadyToken, __ATOMIC_RELEASE);
  return seg;
}

Segment Segment::open(const std::string& name) {
  if (!valid_name(name))
    throw SegmentError("invalid segment name: '" + name + "'");

  const std::string oname = os_name(name);
  int fd = ::shm_open(oname.c_str(), O_RDWR, 0600);
  if (fd < 0)
    throw SegmentError("no such segment: " + name);

  // The creator may still be mid-initialization; wait for the ready token.
  const auto deadline = monotonic_now() + std::chrono::seconds(5);
  struct stat st {};
  for (;;) {
    if (::fstat(fd, &st) != 0) {
      int e = errno;
      ::close(fd);
      throw SegmentError("fstat failed for '" + name + "': " + strerror(e));
    }
    if (static_cast<uint64_t>(st.st_size) >= kMinSize) break;
    if (monotonic_now() > deadline) {
      ::close(fd);
      throw SegmentError("segment '" + name + "' never became ready");
    }
    std::this_thread::sleep_for(std::chrono::microseconds(200));
  }

  uint64_t size = static_cast<uint64_t>(st.st_size);
  void* base = ::mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
  if (base == MAP_FAILED) {
    int e = errno;
    ::close(fd);
    throw SegmentError("mmap failed for '" + name + "': " + strerror(e));
  }

  Segment seg;
  seg.base_ = base;
  seg.size_ = size;
  seg.name_ = name;
  seg.fd_ = fd;
  seg.creator_ = false;

  auto& h = seg.header();
  while (__atomic_load_n(&h.ready, __ATOMIC_ACQUIRE) != kReadyToken) {
    if (monotonic_now() > deadline)
      throw SegmentError("segment '" + name + "' header corrupt or never initialized");
    std::this_thread::sleep_for(std::chrono::microseconds(200));
  }
  if (h.magic != kSegmentMagic)
    throw SegmentError("segment '" + name + "' has bad magic (corrupt header)");
  if (h.version != kLayoutVersion)
    throw SegmentError("segment '" + name + "' layout version mismatch: got " +
                       std::to_string(h.version) + ", expected " +
                       std::to_string(kLayoutVersion));
  if (h.total_size != size)
    throw SegmentError("segment '" + name + "' size mismatch with header");
  return seg;
}

Segment Segment::open_or_create(const std::string& name, uint64_t size) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    try {
      return open(name);
    } catch (const SegmentError&) {
    }
    try {
      return create(name, size, false);
    } catch (const SegmentError&) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  throw SegmentError("open_or_create gave up on segment: " + name);
}

void Segment::unlink(const std::string& name) {
  ::shm_unlink(os_name(name).c_str());
}

Segment::~Segment() {
  if (base_ != nullptr) {
    if (creator_) ::shm_unlink(os_name(name_).c_str());
    ::munmap(base_, size_);
  }
  if (fd_ >= 0) ::close(fd_);
}

Segment::Segment(Segment&& other) noexcept
    : base_(other.base_), size_(other.size_), name_(std::move(other.name_)),
      fd_(other.fd_), creator_(other.creator_) {
  other.base_ = nullptr;
  other.size_ = 0;
  other.fd_ = -1;
  other.creator_ = false;
}

Segment& Segment::operator=(Segment&& other) noexcept {
  if (this != &other) {
    this->~Segment();
    new (this) Segment(std::move(other));
  }
  return *this;
}

InterProcessLock& Segment::global_lock() { return header().global_lock; }

uint64_t Segment::alloc(uint64_t size, uint64_t align, bool zero) {
  uint64_t off = try_alloc(size, align, zero);
  if (off == kNullOffset)
    throw OutOfSegmentMemory("out of segment memory allocating " +
                             std::to_string(size) + " bytes in '" + name_ + "'");
  return off;
}

uint64_t Segment::try_alloc(uint64_t size, uint64_t align, bool zero) {
  if (!valid_align(align))
    throw Error("unsupported alignment: " + std::to_string(align));
  LockGuard g(global_lock());
  return alloc_locked(size, align, zero);
}

uint64_t Segment::alloc_locked(uint64_t size, uint64_t align, bool zero) {
  auto& a = alloc_state_at(base_, header().allocator_state_offset);
  const uint64_t payload_bytes = round_up(size == 0 ? kBlockAlign : size, kBlockAlign);

  // First fit in address order.
  for (uint64_t b = a.free_head; b != 0;) {
    auto* tag = reinterpret_cast<BlockTag*>(at(b));
    auto* links = reinterpret_cast<FreeLinks*>(at(b + kHeaderFooterSize));
    const uint64_t bsize = tag->size;
    const uint64_t bend = b + bsize;
    const uint64_t next_free = links->next;

    // Carve an aligned allocation out of this block. Any leading remainder
    // must itself be a viable free block.
    uint64_t payload = round_up(b + kHeaderFooterSize, align);
    while (payload - kHeaderFooterSize != b &&
           payload - kHeaderFooterSize - b < kMinBlockSize)
      payload += align;

    uint64_t astart = payload - kHeaderFooterSize;
    uint64_t aend = astart + kHeaderFooterSize + payload_bytes + kHeaderFooterSize;
    if (aend > bend) {
      b = next_free;
      continue;
    }
    if (bend - aend < kMinBlockSize) aend = bend;  // absorb unusable tail

    // Unlink the block we're carving from.
    uint64_t prev = links->prev;
    uint64_t next = links->next;
    auto relink = [&](uint64_t node_prev, uint64_t node, uint64_t node_next) {
      auto* nl = reinterpret_cast<FreeLinks*>(at(node + kHeaderFooterSize));
      nl->prev = node_prev;
      nl->next = node_next;
      if (node_prev != 0)
        reinterpret_cast<FreeLinks*>(at(node_prev + kHeaderFooterSize))->next = node;
      else
        a.free_head = node;
      if (node_next != 0)
        reinterpret_cast<FreeLinks*>(at(node_next + kHeaderFooterSize))->prev = node;
    };

    if (prev != 0)
      reinterpret_cast<FreeLinks*>(at(prev + kHeaderFooterSize))->next = next;
    else
      a.free_head = next;
    if (next != 0)
      reinterpret_cast<FreeLinks*>(at(next + kHeaderFooterSize))->prev = prev;

    // Leading remainder keeps the carved block's list position.
    if (astart > b) {
      uint64_t fsize = astart - b;
      reinterpret_cast<BlockTag*>(at(b))->mark_free(fsize);
      reinterpret_cast<BlockTag*>(at(astart - kHeaderFooterSize))->mark_free(fsize);
      relink(prev, b, next);
      prev = b;
    }
    // Trailing remainder.
    if (aend < bend) {
      uint64_t fsize = bend - aend;
      reinterpret_cast<BlockTag*>(at(aend))->mark_free(fsize);
      reinterpret_cast<BlockTag*>(at(bend - kHeaderFooterSize))->mark_free(fsize);
      relink(prev, aend, next);
    }

    const uint64_t asize = aend - astart;
    reinterpret_cast<BlockTag*>(at(astart))->mark_alloc(asize);
    reinterpret_cast<BlockTag*>(at(aend - kHeaderFooterSize))->mark_alloc(asize);
    if (zero) std::memset(at(payload), 0, asize - 2 * kHeaderFooterSize);

    a.free_bytes -= asize;
    a.in_use_bytes += asize;
    a.live_allocations += 1;
    if (a.in_use_bytes > a.high_watermark) a.high_watermark = a.in_use_bytes;
    return payload;
  }
  return kNullOffset;
}

void Segment::free(uint64_t offset) {
  LockGuard g(global_lock());
  auto& a = alloc_state_at(base_, header().allocator_state_offset);

  if (offset < a.region_begin + kHeaderFooterSize || offset >= a.region_end ||
      (offset % 8) != 0)
    throw HeapCorruption("free of offset outside heap: " + std::to_string(offset));

  uint64_t bstart = offset - kHeaderFooterSize;
  auto* tag = reinterpret_cast<BlockTag*>(at(bstart));
  if (!tag->is_alloc() || tag->size < kMinBlockSize ||
      (tag->size % kBlockAlign) != 0 || bstart + tag->size > a.region_end)
    throw HeapCorruption(tag->is_free()
                             ? "double free detected at offset " + std::to_string(offset)
                             : "foreign or corrupt block at offset " + std::to_string(offset));
  uint64_t bsize = tag->size;
  auto* foot = reinterpret_cast<BlockTag*>(at(bstart + bsize - kHeaderFooterSize));
  if (!foot->is_alloc() || foot->size != bsize)
    throw HeapCorruption("trailing boundary tag corrupt at offset " + std::to_string(offset));

  a.live_allocations -= 1;
  a.in_use_bytes -= bsize;
  a.free_bytes += bsize;

  auto unlink_free = [&](uint64_t node) {
    auto* nl = reinterpret_cast<FreeLinks*>(at(node + kHeaderFooterSize));
    if (nl->prev != 0)
      reinterpret_cast<FreeLinks*>(at(nl->prev + kHeaderFooterSize))->next = nl->next;
    else
      a.free_head = nl->next;
    if (nl->next != 0)
      reinterpret_cast<FreeLinks*>(at(nl->next + kHeaderFooterSize))->prev = nl->prev;
  };

  // Coalesce with the following block.
  uint64_t bend = bstart + bsize;
  if (bend < a.region_end) {
    auto* next_tag = reinterpret_cast<BlockTag*>(at(bend));
    if (next_tag->is_free()) {
      unlink_free(bend);
      bsize += next_tag->size;
      bend = bstart + bsize;
    }
  }
  // Coalesce with the preceding block.
  if (bstart > a.region_begin) {
    auto* prev_foot = reinterpret_cast<BlockTag*>(at(bstart - kHeaderFooterSize));
    if (prev_foot->is_free()) {
      uint64_t prev_start = bstart - prev_foot->size;
      unlink_free(prev_start);
      bstart = prev_start;
      bsize = bend - bstart;
    }
  }

  reinterpret_cast<BlockTag*>(at(bstart))->mark_free(bsize);
  reinterpret_cast<BlockTag*>(at(bend - kHeaderFooterSize))->mark_free(bsize);

  // Insert into the address-ordered free list.
  uint64_t prev = 0;
  uint64_t cur = a.free_head;
  while (cur != 0 && cur < bstart) {
    prev = cur;
    cur = reinterpret_cast<FreeLinks*>(at(cur + kHeaderFooterSize))->next;
  }
  auto* links = reinterpret_cast<FreeLinks*>(at(bstart + kHeaderFooterSize));
  links->prev = prev;
  links->next = cur;
  if (prev != 0)
    reinterpret_cast<FreeLinks*>(at(prev + kHeaderFooterSize))->next = bstart;
  else
    a.free_head = bstart;
  if (cur != 0)
    reinterpret_cast<FreeLinks*>(at(cur + kHeaderFooterSize))->prev = bstart;
}

AllocStats Segment::stats() const {
  auto* self = const_cast<Segment*>(this);
  LockGuard g(self->global_lock());
  auto& a = alloc_state_at(base_, header().allocator_state_offset);
  return AllocStats{a.region_end - a.region_begin, a.free_bytes,
                    a.live_allocations, a.high_watermark};
}

void Segment::register_queue(const std::string& name, uint64_t queue_offset) {
  if (name.empty() || name.size() > 64)
    throw SegmentError("queue name must be 1..64 chars: '" + name + "'");
  LockGuard g(global_lock());
  auto& reg = registry_at(base_, header().registry_offset);
  int free_slot = -1;
  for (uint32_t i = 0; i < reg.capacity; ++i) {
    auto& e = reg.entries[i];
    if (!e.in_use) {
      if (free_slot < 0) free_slot = static_cast<int>(i);
      continue;
    }
    if (e.name_len == name.size() && std::memcmp(e.name, name.data(), e.name_len) == 0)
      throw SegmentError("duplicate queue name: " + name);
  }
  if (free_slot < 0) throw SegmentError("queue registry full");
  auto& e = reg.entries[free_slot];
  std::memcpy(e.name, name.data(), name.size());
  e.name_len = static_cast<uint32_t>(name.size());
  e.queue_offset = queue_offset;
  e.in_use = 1;
  reg.count += 1;
}

uint64_t Segment::lookup_queue(const std::string& name) const {
  auto* self = const_cast<Segment*>(this);
  LockGuard g(self->global_lock());
  auto& reg = registry_at(base_, header().registry_offset);
  for (uint32_t i = 0; i < reg.capacity; ++i) {
    auto& e = reg.entries[i];
    if (e.in_use && e.name_len == name.size() &&
        std::memcmp(e.name, name.data(), e.name_len) == 0)
      return e.queue_offset;
  }
  return kNullOffset;
}

void Segment::unregister_queue(const std::string& name) {
  LockGuard g(global_lock());
  auto& reg = registry_at(base_, header().registry_offset);
  for (uint32_t i = 0; i < reg.capacity; ++i) {
    auto& e = reg.entries[i];
    if (e.in_use && e.name_len == name.size() &&
        std::memcmp(e.name, name.data(), e.name_len) == 0) {
      e.in_use = 0;
      reg.count -= 1;
      return;
    }
  }
}

}  // namespace shmbus
