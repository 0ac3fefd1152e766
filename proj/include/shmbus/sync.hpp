#pragma once

#include <pthread.h>

#include <chrono>
#include <cstdint>

namespace shmbus {

using MonotonicTime = std::chrono::steady_clock::time_point;

inline MonotonicTime monotonic_now() { return std::chrono::steady_clock::now(); }

inline uint64_t monotonic_now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             monotonic_now().time_since_epoch())
      .count();
}

enum class WakeReason { kNotified, kTimedOut };

// Mutual-exclusion lock that lives inside a shared-memory segment and works
// from any process mapping it, at any base address. Backed by a
// process-shared pthread mutex (futex-based on Linux, no absolute addresses
// in its state). Not reentrant.
class InterProcessLock {
 public:
  // Called once, by the segment creator, before any other process can see
  // the lock.
  void init();

  void acquire();
  bool try_acquire();

  // Releasing a lock the calling thread does not hold throws LockError.
  void release();

  InterProcessLock() = delete;
  InterProcessLock(const InterProcessLock&) = delete;
  InterProcessLock& operator=(const InterProcessLock&) = delete;

 private:
  friend class InterProcessEvent;

  pthread_mutex_t mutex_;
  uint32_t owner_tid_;  // diagnostic; written only while holding the mutex
  uint32_t pad_;
};

static_assert(sizeof(InterProcessLock) == sizeof(pthread_mutex_t) + 8);

// RAII guard for InterProcessLock.
class LockGuard {
 public:
  explicit LockGuard(InterProcessLock& lock) : lock_(lock) { lock_.acquire(); }
  ~LockGuard() { lock_.release(); }
  LockGuard(const LockGuard&) = delete;
  LockGuard& operator=(const LockGuard&) = delete;

 private:
  InterProcessLock& lock_;
};

// Condition/event primitive paired with an InterProcessLock. Process-shared
// pthread condition variable on CLOCK_MONOTONIC. Spurious wakeups are
// permitted; callers must re-check their predicate in a loop.
class InterProcessEvent {
 public:
  void init();

  // Caller must hold `lock`. The lock is released while waiting and
  // reacquired before return. A deadline in the past times out immediately
  // (after one predicate-check opportunity in the caller's loop).
  WakeReason wait(InterProcessLock& lock, MonotonicTime deadline);

  void notify_one();
  void notify_all();

  InterProcessEvent() = delete;
  InterProcessEvent(const InterProcessEvent&) = delete;
  InterProcessEvent& operator=(const InterProcessEvent&) = delete;

 private:
  pthread_cond_t cond_;
};

}  // namespace shmbus
