#include "shmbus/segment.hpp"

#include <fcntl.h>
#include <sys/stat.h>

#include <cstring>
#include <map>
#include <random>

#include "doctest.h"
#include "test_util.hpp"

using namespace shmbus;
using testutil::SegmentFixture;
using testutil::unique_name;

TEST_CASE("segment create appears under the OS shared-memory namespace") {
  auto name = unique_name("LOTROS");
  auto seg = Segment::create(name, 256 * 1024 * 1024);
  struct stat st {};
  CHECK(::stat(("/dev/shm/" + name).c_str(), &st) == 0);
  CHECK(st.st_size == 256 * 1024 * 1024);
  CHECK(seg.size() == 256 * 1024 * 1024);
}

TEST_CASE("segment create rejects degenerate sizes and bad names") {
  CHECK_THROWS_AS(Segment::create(unique_name("x"), 0), SegmentError);
  CHECK_THROWS_AS(Segment::create(unique_name("x"), Segment::kMinSize - 1), SegmentError);
  CHECK_THROWS_AS(Segment::create("", Segment::kMinSize), SegmentError);
  CHECK_THROWS_AS(Segment::create("bad/name", Segment::kMinSize), SegmentError);
  CHECK_THROWS_AS(Segment::create(std::string(65, 'a'), Segment::kMinSize), SegmentError);
}

TEST_CASE("segment name collision without force; force replaces") {
  auto name = unique_name("coll");
  auto seg = Segment::create(name, Segment::kMinSize);
  CHECK_THROWS_AS(Segment::create(name, Segment::kMinSize), SegmentError);
  auto replaced = Segment::create(name, 2 * Segment::kMinSize, /*force=*/true);
  CHECK(replaced.size() == 2 * Segment::kMinSize);
  seg.retain_os_name();  // name now belongs to `replaced`
}

TEST_CASE("segment open: nonexistent, corrupt magic, version mismatch") {
  CHECK_THROWS_AS(Segment::open(unique_name("missing")), SegmentError);

  SegmentFixture fx;
  SUBCASE("open sees the same stats") {
    auto other = Segment::open(fx.name);
    CHECK(other.size() == fx.seg.size());
    CHECK(other.stats().free_bytes == fx.seg.stats().free_bytes);
  }
  SUBCASE("corrupt magic is rejected") {
    *static_cast<uint64_t*>(fx.seg.base()) ^= 0xff;
    CHECK_THROWS_AS(Segment::open(fx.name), SegmentError);
    *static_cast<uint64_t*>(fx.seg.base()) ^= 0xff;
  }
  SUBCASE("version mismatch is rejected") {
    auto* ver = reinterpret_cast<uint32_t*>(static_cast<char*>(fx.seg.base()) + 8);
    uint32_t orig = *ver;
    *ver = orig + 7;
    CHECK_THROWS_AS(Segment::open(fx.name), SegmentError);
    *ver = orig;
  }
}

TEST_CASE("allocate returns disjoint zeroed aligned blocks") {
  SegmentFixture fx;
  uint64_t a = fx.seg.alloc(64, 8);
  uint64_t b = fx.seg.alloc(64, 8);
  CHECK(a != 0);
  CHECK(b != 0);
  CHECK((b >= a + 64 || a >= b + 64));
  auto* pa = static_cast<unsigned char*>(fx.seg.at(a));
  for (int i = 0; i < 64; ++i) CHECK(pa[i] == 0);

  for (uint64_t align : {8u, 16u, 32u, 64u, 128u, 4096u}) {
    uint64_t off = fx.seg.alloc(100, align);
    CHECK(off % align == 0);
  }
  CHECK_THROWS(fx.seg.alloc(64, 24));  // unsupported alignment
}

TEST_CASE("allocate over capacity reports out of memory") {
  SegmentFixture fx;
  auto stats = fx.seg.stats();
  CHECK_THROWS_AS(fx.seg.alloc(stats.free_bytes + 1, 8), OutOfSegmentMemory);
  CHECK(fx.seg.try_alloc(stats.free_bytes + 1, 8) == Segment::kNullOffset);
  // A failed allocation changes nothing.
  CHECK(fx.seg.stats().free_bytes == stats.free_bytes);
  CHECK(fx.seg.stats().live_allocations == stats.live_allocations);
}

TEST_CASE("deallocate detects double free and foreign offsets") {
  SegmentFixture fx;
  uint64_t a = fx.seg.alloc(128, 8);
  fx.seg.free(a);
  CHECK_THROWS_AS(fx.seg.free(a), HeapCorruption);
  CHECK_THROWS_AS(fx.seg.free(a + 8), HeapCorruption);
  CHECK_THROWS_AS(fx.seg.free(12345), HeapCorruption);
}

TEST_CASE("first-fit reuses a freed hole of the same size") {
  SegmentFixture fx;
  uint64_t a = fx.seg.alloc(256, 8);
  uint64_t b = fx.seg.alloc(256, 8);
  uint64_t c = fx.seg.alloc(256, 8);
  (void)a;
  (void)c;
  fx.seg.free(b);
  uint64_t b2 = fx.seg.alloc(256, 8);
  CHECK(b2 == b);  // the hole comes first in address order
}

// Allocator conservation with a shadow bookkeeping oracle: every live block
// is tracked independently; blocks must stay disjoint and free_bytes must
// return to its initial value once everything is released.
TEST_CASE("allocator conservation over 10k random alloc/free pairs") {
  SegmentFixture fx(32 * 1024 * 1024);
  const auto initial = fx.seg.stats();

  std::mt19937_64 rng(42);
  std::map<uint64_t, uint64_t> shadow;  // offset -> size
  const uint64_t aligns[] = {8, 16, 32, 64, 128, 4096};

  auto check_disjoint = [&](uint64_t off, uint64_t size) {
    auto next = shadow.lower_bound(off);
    if (next != shadow.end()) CHECK(off + size <= next->first);
    if (next != shadow.begin()) {
      auto prev = std::prev(next);
      CHECK(prev->first + prev->second <= off);
    }
  };

  for (int i = 0; i < 10000; ++i) {
    bool do_alloc = shadow.empty() || (rng() % 100 < 60);
    if (do_alloc) {
      uint64_t size = 1 + rng() % 8192;
      uint64_t align = aligns[rng() % 6];
      uint64_t off = fx.seg.try_alloc(size, align);
      if (off != Segment::kNullOffset) {
        CHECK(off % align == 0);
        check_disjoint(off, size);
        shadow[off] = size;
      }
    } else {
      auto it = shadow.begin();
      std::advance(it, rng() % shadow.size());
      fx.seg.free(it->first);
      shadow.erase(it);
    }
    if (i % 1000 == 0)
      CHECK(fx.seg.stats().live_allocations == shadow.size());
  }
  for (auto& [off, size] : shadow) fx.seg.free(off);

  auto final_stats = fx.seg.stats();
  CHECK(final_stats.free_bytes == initial.free_bytes);
  CHECK(final_stats.live_allocations == initial.live_allocations);
  CHECK(final_stats.high_watermark > 0);
}

TEST_CASE("relative ref arithmetic and null sentinel") {
  RelativeRef ref;
  CHECK(ref.is_null());
  CHECK(ref.get() == nullptr);
  CHECK(ref.delta() == RelativeRef::kNullDelta);

  char buffer[8192];
  auto* cell = reinterpret_cast<RelativeRef*>(buffer + 1024);
  new (cell) RelativeRef();
  cell->set(buffer + 4096);
  CHECK(cell->delta() == 3072);
  CHECK(cell->get() == buffer + 4096);

  cell->set(cell);  // self-reference is legal (delta 0)
  CHECK(cell->delta() == 0);
  CHECK(cell->get() == cell);

  cell->set(nullptr);
  CHECK(cell->is_null());
}

TEST_CASE("relative ref copies re-target instead of copying deltas") {
  char buffer[256];
  auto* a = reinterpret_cast<RelativeRef*>(buffer);
  auto* b = reinterpret_cast<RelativeRef*>(buffer + 64);
  new (a) RelativeRef();
  new (b) RelativeRef();
  a->set(buffer + 128);
  *b = *a;
  CHECK(b->get() == buffer + 128);
  CHECK(b->delta() != a->delta());
}

// Mapping independence: the same segment mapped twice in one process gets
// two different bases; refs and data written through one view must resolve
// identically through the other.
TEST_CASE("relative refs work across two mappings of one segment") {
  SegmentFixture fx;
  auto view2 = Segment::open(fx.name);
  REQUIRE(view2.base() != fx.seg.base());

  uint64_t cell_off = fx.seg.alloc(sizeof(RelativeRef), 8);
  uint64_t target_off = fx.seg.alloc(256, 8);
  auto* cell_a = new (fx.seg.at(cell_off)) RelativeRef();
  cell_a->set(fx.seg.at(target_off));
  std::memset(fx.seg.at(target_off), 0xAB, 256);

  auto* cell_b = static_cast<RelativeRef*>(view2.at(cell_off));
  auto* resolved = static_cast<unsigned char*>(cell_b->get());
  CHECK(view2.offset_of(resolved) == target_off);
  for (int i = 0; i < 256; ++i) CHECK(resolved[i] == 0xAB);
}

TEST_CASE("two processes observe identical bytes through a relative ref") {
  SegmentFixture fx;
  uint64_t cell_off = fx.seg.alloc(sizeof(RelativeRef), 8);
  uint64_t target_off = fx.seg.alloc(1024, 8);
  auto* cell = new (fx.seg.at(cell_off)) RelativeRef();
  cell->set(fx.seg.at(target_off));
  auto* bytes = static_cast<unsigned char*>(fx.seg.at(target_off));
  for (int i = 0; i < 1024; ++i) bytes[i] = static_cast<unsigned char>(i * 7);

  int rc = testutil::run_in_child([&]() -> int {
    auto seg = Segment::open(fx.name);
    auto* c = static_cast<RelativeRef*>(seg.at(cell_off));
    auto* t = static_cast<unsigned char*>(c->get());
    if (seg.offset_of(t) != target_off) return 1;
    for (int i = 0; i < 1024; ++i)
      if (t[i] != static_cast<unsigned char>(i * 7)) return 2;
    return 0;
  });
  CHECK(rc == 0);
}

TEST_CASE("queue-name registry registers, resolves, and rejects duplicates") {
  SegmentFixture fx;
  fx.seg.register_queue("cam0/pub0/sub0", 4096);
  CHECK(fx.seg.lookup_queue("cam0/pub0/sub0") == 4096);
  CHECK(fx.seg.lookup_queue("nope") == Segment::kNullOffset);
  CHECK_THROWS_AS(fx.seg.register_queue("cam0/pub0/sub0", 8192), SegmentError);
  fx.seg.unregister_queue("cam0/pub0/sub0");
  CHECK(fx.seg.lookup_queue("cam0/pub0/sub0") == Segment::kNullOffset);
  fx.seg.register_queue("cam0/pub0/sub0", 8192);  // slot is reusable
  CHECK(fx.seg.lookup_queue("cam0/pub0/sub0") == 8192);
}

TEST_CASE("stale segment from a dead creator is reported as stale") {
  auto name = unique_name("stale");
  // Child creates the segment and exits without unlinking.
  int rc = testutil::run_in_child([&]() -> int {
    auto seg = Segment::create(name, Segment::kMinSize);
    seg.retain_os_name();  // simulate a crash: no cleanup
    return 0;
  });
  REQUIRE(rc == 0);
  try {
    Segment::create(name, Segment::kMinSize);
    FAIL("expected a name collision");
  } catch (const SegmentError& e) {
    CHECK(std::string(e.what()).find("stale") != std::string::npos);
  }
  auto seg = Segment::create(name, Segment::kMinSize, /*force=*/true);
  CHECK(seg.size() == Segment::kMinSize);
}
