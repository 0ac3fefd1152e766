#include "shmbus/sync.hpp"

#include <atomic>
#include <thread>

#include "doctest.h"
#include "shmbus/segment.hpp"
#include "test_util.hpp"

using namespace shmbus;
using namespace std::chrono_literals;
using testutil::SegmentFixture;

namespace {

struct SharedState {
  InterProcessLock lock;
  InterProcessEvent event;
  uint64_t counter;
  uint32_t flag;
};

SharedState& make_state(Segment& seg, uint64_t& off_out) {
  off_out = seg.alloc(sizeof(SharedState), 64);
  auto& st = *static_cast<SharedState*>(seg.at(off_out));
  st.lock.init();
  st.event.init();
  st.counter = 0;
  st.flag = 0;
  return st;
}

}  // namespace

// The classic race oracle: two processes hammer a shared counter under the
// lock; any lost update shows up as a short count.
TEST_CASE("cross-process mutual exclusion: counter reaches 2 x 100k") {
  SegmentFixture fx;
  uint64_t off = 0;
  auto& st = make_state(fx.seg, off);
  constexpr int kIters = 100000;

  pid_t child = testutil::spawn_child([&]() -> int {
    auto seg = Segment::open(fx.name);
    auto& s = *static_cast<SharedState*>(seg.at(off));
    for (int i = 0; i < kIters; ++i) {
      LockGuard g(s.lock);
      s.counter += 1;
    }
    return 0;
  });
  for (int i = 0; i < kIters; ++i) {
    LockGuard g(st.lock);
    st.counter += 1;
  }
  CHECK(testutil::wait_child(child) == 0);
  CHECK(st.counter == 2 * kIters);
}

TEST_CASE("try_acquire contention and release") {
  SegmentFixture fx;
  uint64_t off = 0;
  auto& st = make_state(fx.seg, off);

  CHECK(st.lock.try_acquire());
  std::thread other([&] { CHECK_FALSE(st.lock.try_acquire()); });
  other.join();
  st.lock.release();

  for (int i = 0; i < 100; ++i) {
    st.lock.acquire();
    st.lock.release();
  }
  CHECK(st.lock.try_acquire());  // ends free
  st.lock.release();
}

TEST_CASE("releasing a lock not held is a hard error") {
  SegmentFixture fx;
  uint64_t off = 0;
  auto& st = make_state(fx.seg, off);
  CHECK_THROWS_AS(st.lock.release(), LockError);

  st.lock.acquire();
  std::thread other([&] { CHECK_THROWS_AS(st.lock.release(), LockError); });
  other.join();
  st.lock.release();
}

TEST_CASE("event wait times out at the deadline") {
  SegmentFixture fx;
  uint64_t off = 0;
  auto& st = make_state(fx.seg, off);

  auto t0 = monotonic_now();
  st.lock.acquire();
  auto reason = st.event.wait(st.lock, t0 + 50ms);
  st.lock.release();
  auto elapsed = monotonic_now() - t0;

  CHECK(reason == WakeReason::kTimedOut);
  CHECK(elapsed >= 45ms);
  CHECK(elapsed < 2s);  // scheduler jitter allowance

  // A deadline in the past times out immediately.
  st.lock.acquire();
  CHECK(st.event.wait(st.lock, monotonic_now() - 1s) == WakeReason::kTimedOut);
  st.lock.release();
}

TEST_CASE("notify with zero waiters does not store a wakeup") {
  SegmentFixture fx;
  uint64_t off = 0;
  auto& st = make_state(fx.seg, off);
  st.event.notify_one();
  st.event.notify_all();
  st.lock.acquire();
  CHECK(st.event.wait(st.lock, monotonic_now() + 30ms) == WakeReason::kTimedOut);
  st.lock.release();
}

TEST_CASE("notify_all wakes all five waiters; notify_one x5 drains them too") {
  SegmentFixture fx;
  uint64_t off = 0;
  auto& st = make_state(fx.seg, off);

  for (int mode = 0; mode < 2; ++mode) {
    st.flag = 0;
    std::atomic<int> woken{0};
    std::vector<std::thread> waiters;
    for (int i = 0; i < 5; ++i) {
      waiters.emplace_back([&] {
        LockGuard g(st.lock);
        while (st.flag == 0) {
          if (st.event.wait(st.lock, monotonic_now() + 5s) == WakeReason::kTimedOut)
            return;
        }
        woken.fetch_add(1);
      });
    }
    std::this_thread::sleep_for(50ms);
    {
      LockGuard g(st.lock);
      st.flag = 1;
      if (mode == 0) {
        st.event.notify_all();
      } else {
        for (int i = 0; i < 5; ++i) st.event.notify_one();
      }
    }
    for (auto& w : waiters) w.join();
    CHECK(woken.load() == 5);
  }
}

TEST_CASE("cross-process notification wakes the waiter promptly") {
  SegmentFixture fx;
  uint64_t off = 0;
  auto& st = make_state(fx.seg, off);

  pid_t child = testutil::spawn_child([&]() -> int {
    auto seg = Segment::open(fx.name);
    auto& s = *static_cast<SharedState*>(seg.at(off));
    std::this_thread::sleep_for(20ms);
    {
      LockGuard g(s.lock);
      s.flag = 1;
      s.event.notify_one();
    }
    return 0;
  });

  auto deadline = monotonic_now() + 5s;
  WakeReason last = WakeReason::kTimedOut;
  {
    LockGuard g(st.lock);
    while (st.flag == 0) {
      last = st.event.wait(st.lock, deadline);
      if (last == WakeReason::kTimedOut) break;
    }
  }
  CHECK(testutil::wait_child(child) == 0);
  CHECK(st.flag == 1);
  CHECK(last == WakeReason::kNotified);
}
