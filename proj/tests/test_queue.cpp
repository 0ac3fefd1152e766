#include "shmbus/queue.hpp"

#include <cstring>
#include <map>
#include <thread>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"

using namespace shmbus;
using namespace std::chrono_literals;
using testutil::SegmentFixture;

namespace {

SharedHandle tagged_item(Segment& seg, uint64_t value) {
  auto h = make_shared(seg, 8);
  std::memcpy(h.bytes().data(), &value, 8);
  return h;
}

uint64_t item_value(const SharedHandle& h) {
  uint64_t v = 0;
  std::memcpy(&v, h.bytes().data(), 8);
  return v;
}

}  // namespace

TEST_CASE("queue create/open basics") {
  SegmentFixture fx;
  auto q = ShmQueue::create(fx.seg, "t/cam0/sub1", 16);
  CHECK(q.len() == 0);
  CHECK(q.capacity() == 16);

  CHECK_THROWS(ShmQueue::create(fx.seg, "t/cam0/sub1", 16));  // duplicate
  CHECK_THROWS(ShmQueue::create(fx.seg, "zero", 0));          // capacity 0
  CHECK_THROWS(ShmQueue::open(fx.seg, "unknown"));

  auto q2 = ShmQueue::open(fx.seg, "t/cam0/sub1");
  CHECK(q2.len() == 0);
  CHECK(q2.capacity() == 16);
}

TEST_CASE("push pop round trip preserves identity and counts") {
  SegmentFixture fx;
  auto before = fx.seg.stats();
  auto q = ShmQueue::create(fx.seg, "q", 4);

  auto h = tagged_item(fx.seg, 99);
  uint64_t block = h.block_offset();
  CHECK(h.use_count() == 1);

  auto keep = h.clone();  // watch the count from outside
  CHECK(q.push(h, 7, monotonic_now() + 1s) == PushResult::kOk);
  CHECK_FALSE(h);  // ownership transferred
  CHECK(keep.use_count() == 2);
  CHECK(q.len() == 1);

  auto r = q.pop(monotonic_now() + 1s);
  REQUIRE(r.status == PopStatus::kItem);
  CHECK(r.tag == 7);
  CHECK(r.item.block_offset() == block);  // same control block, no copy
  CHECK(item_value(r.item) == 99);
  CHECK(keep.use_count() == 2);  // refcount-neutral end to end
  CHECK(q.len() == 0);

  r.item.reset();
  keep.reset();
  q.destroy();
  CHECK(fx.seg.stats().free_bytes == before.free_bytes);
}

TEST_CASE("pop on empty times out on schedule") {
  SegmentFixture fx;
  auto q = ShmQueue::create(fx.seg, "q", 4);
  auto t0 = monotonic_now();
  auto r = q.pop(t0 + 10ms);
  CHECK(r.status == PopStatus::kTimedOut);
  auto elapsed = monotonic_now() - t0;
  CHECK(elapsed >= 9ms);
  CHECK(elapsed < 2s);
}

TEST_CASE("push to a full queue with expired deadline times out, len unchanged") {
  SegmentFixture fx;
  auto q = ShmQueue::create(fx.seg, "q", 2);
  auto a = tagged_item(fx.seg, 1);
  auto b = tagged_item(fx.seg, 2);
  auto c = tagged_item(fx.seg, 3);
  CHECK(q.push(a, 0, monotonic_now() + 1s) == PushResult::kOk);
  CHECK(q.push(b, 0, monotonic_now() + 1s) == PushResult::kOk);
  CHECK(q.push(c, 0, monotonic_now() - 1ms) == PushResult::kTimedOut);
  CHECK(c);  // sender retains ownership
  CHECK(q.len() == 2);
  q.close();
}

TEST_CASE("drop-newest policy discards into the drop counter") {
  SegmentFixture fx;
  auto q = ShmQueue::create(fx.seg, "q", 2, FullPolicy::kDropNewest);
  for (uint64_t i = 0; i < 5; ++i) {
    auto h = tagged_item(fx.seg, i);
    CHECK(q.push(h, i, monotonic_now() + 1s) == PushResult::kOk);
    CHECK_FALSE(h);  // consumed either way
  }
  CHECK(q.len() == 2);
  CHECK(q.dropped() == 3);
  q.close();
}

TEST_CASE("close wakes blocked poppers with Closed and drains items once") {
  SegmentFixture fx;
  auto before = fx.seg.stats();
  {
    auto q = ShmQueue::create(fx.seg, "q", 8);

    std::vector<std::thread> poppers;
    std::atomic<int> closed_count{0};
    for (int i = 0; i < 3; ++i) {
      poppers.emplace_back([&] {
        auto r = q.pop(monotonic_now() + 5s);
        if (r.status == PopStatus::kClosed) closed_count.fetch_add(1);
      });
    }
    std::this_thread::sleep_for(50ms);

    // Also leave 4 items queued; close must release their counts.
    for (uint64_t i = 0; i < 4; ++i) {
      auto h = tagged_item(fx.seg, i);
      // Blocked poppers will grab some; that is fine for this check.
      q.push(h, i, monotonic_now() + 1s);
    }
    q.close();
    for (auto& p : poppers) p.join();

    auto h = tagged_item(fx.seg, 42);
    CHECK(q.push(h, 0, monotonic_now() + 1s) == PushResult::kClosed);
    CHECK(h);  // still ours
    CHECK(q.pop(monotonic_now() + 10ms).status == PopStatus::kClosed);
    h.reset();
    q.destroy();
  }
  CHECK(fx.seg.stats().free_bytes == before.free_bytes);
  CHECK(fx.seg.stats().live_allocations == before.live_allocations);
}

TEST_CASE("cross-process hand-off delivers the same control block") {
  SegmentFixture fx;
  auto q = ShmQueue::create(fx.seg, "xproc", 4);
  auto h = tagged_item(fx.seg, 0xbeef);
  uint64_t block = h.block_offset();
  REQUIRE(q.push(h, 1, monotonic_now() + 1s) == PushResult::kOk);

  int rc = testutil::run_in_child([&]() -> int {
    auto seg = Segment::open(fx.name);
    auto qq = ShmQueue::open(seg, "xproc");
    auto r = qq.pop(monotonic_now() + 5s);
    if (r.status != PopStatus::kItem) return 1;
    if (r.item.block_offset() != block) return 2;
    if (item_value(r.item) != 0xbeef) return 3;
    return 0;
  });
  CHECK(rc == 0);
  CHECK(q.len() == 0);
  q.close();
}

// Counting oracle: interleaved producers and one consumer, every pushed
// value arrives exactly once and per-producer order is preserved.
TEST_CASE("multi-producer FIFO: no loss, no duplication, per-producer order") {
  SegmentFixture fx(64 * 1024 * 1024);
  auto q = ShmQueue::create(fx.seg, "mpmc", 16);
  constexpr int kProducers = 5;
  constexpr uint64_t kPerProducer = 20000;

  std::vector<std::thread> producers;
  for (int p = 0; p < kProducers; ++p) {
    producers.emplace_back([&, p] {
      for (uint64_t i = 0; i < kPerProducer; ++i) {
        auto h = tagged_item(fx.seg, (static_cast<uint64_t>(p) << 32) | i);
        while (q.push(h, 0, monotonic_now() + 5s) != PushResult::kOk) {
        }
      }
    });
  }

  std::map<uint64_t, uint64_t> next_expected;  // producer -> next seq
  uint64_t received = 0;
  bool order_ok = true;
  while (received < kProducers * kPerProducer) {
    auto r = q.pop(monotonic_now() + 5s);
    REQUIRE(r.status == PopStatus::kItem);
    uint64_t v = item_value(r.item);
    uint64_t producer = v >> 32;
    uint64_t seq = v & 0xffffffff;
    order_ok = order_ok && (seq == next_expected[producer]);
    next_expected[producer] = seq + 1;
    received += 1;
  }
  for (auto& p : producers) p.join();
  CHECK(order_ok);
  CHECK(received == kProducers * kPerProducer);
  for (int p = 0; p < kProducers; ++p)
    CHECK(next_expected[p] == kPerProducer);  // exact multiset, no gaps
  CHECK(q.len() == 0);
  q.close();
}

TEST_CASE("five subscriber queues hold a transient use_count of six") {
  SegmentFixture fx;
  std::vector<ShmQueue> queues;
  for (int k = 0; k < 5; ++k)
    queues.push_back(ShmQueue::create(fx.seg, "fan/sub" + std::to_string(k), 4));

  auto h = tagged_item(fx.seg, 7);
  for (auto& q : queues) {
    auto clone = h.clone();
    REQUIRE(q.push(clone, 0, monotonic_now() + 1s) == PushResult::kOk);
  }
  CHECK(h.use_count() == 6);  // publisher + one count per queue

  for (auto& q : queues) {
    auto r = q.pop(monotonic_now() + 1s);
    REQUIRE(r.status == PopStatus::kItem);
    CHECK(item_value(r.item) == 7);
  }
  CHECK(h.use_count() == 1);
  for (auto& q : queues) q.destroy();
}
