#include "shmbus/sync.hpp"

#include <sys/syscall.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <ctime>

#include "shmbus/error.hpp"

namespace shmbus {

namespace {

thread_local uint32_t t_cached_tid = 0;

uint32_t this_tid() {
  if (t_cached_tid == 0) t_cached_tid = static_cast<uint32_t>(::syscall(SYS_gettid));
  return t_cached_tid;
}

// fork() gives the child a new tid but keeps the parent's thread-locals.
struct TidForkGuard {
  TidForkGuard() {
    pthread_atfork(nullptr, nullptr, [] { t_cached_tid = 0; });
  }
} g_tid_fork_guard;

timespec to_timespec(MonotonicTime t) {
  auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                t.time_since_epoch())
                .count();
  if (ns < 0) ns = 0;
  timespec ts;
  ts.tv_sec = static_cast<time_t>(ns / 1000000000);
  ts.tv_nsec = static_cast<long>(ns % 1000000000);
  return ts;
}

}  // namespace

void InterProcessLock::init() {
  pthread_mutexattr_t attr;
  pthread_mutexattr_init(&attr);
  pthread_mutexattr_setpshared(&attr, PTHREAD_PROCESS_SHARED);
  int rc = pthread_mutex_init(&mutex_, &attr);
  pthread_mutexattr_destroy(&attr);
  if (rc != 0) throw LockError("pthread_mutex_init failed: " + std::string(strerror(rc)));
  owner_tid_ = 0;
  pad_ = 0;
}

void InterProcessLock::acquire() {
  int rc = pthread_mutex_lock(&mutex_);
  if (rc != 0) throw LockError("pthread_mutex_lock failed: " + std::string(strerror(rc)));
  owner_tid_ = this_tid();
}

bool InterProcessLock::try_acquire() {
  int rc = pthread_mutex_trylock(&mutex_);
  if (rc == EBUSY) return false;
  if (rc != 0) throw LockError("pthread_mutex_trylock failed: " + std::string(strerror(rc)));
  owner_tid_ = this_tid();
  return true;
}

void InterProcessLock::release() {
  if (owner_tid_ != this_tid())
    throw LockError("release of a lock not held by this thread");
  owner_tid_ = 0;
  int rc = pthread_mutex_unlock(&mutex_);
  if (rc != 0) throw LockError("pthread_mutex_unlock failed: " + std::string(strerror(rc)));
}

void InterProcessEvent::init() {
  pthread_condattr_t attr;
  pthread_condattr_init(&attr);
  pthread_condattr_setpshared(&attr, PTHREAD_PROCESS_SHARED);
  pthread_condattr_setclock(&attr, CLOCK_MONOTONIC);
  int rc = pthread_cond_init(&cond_, &attr);
  pthread_condattr_destroy(&attr);
  if (rc != 0) throw LockError("pthread_cond_init failed: " + std::string(strerror(rc)));
}

WakeReason InterProcessEvent::wait(InterProcessLock& lock, MonotonicTime deadline) {
  // The wait re-hands mutex ownership to pthreads; keep the owner tag
  // consistent on both sides of the call.
  lock.owner_tid_ = 0;
  timespec ts = to_timespec(deadline);
  int rc = pthread_cond_timedwait(&cond_, &lock.mutex_, &ts);
  lock.owner_tid_ = this_tid();
  if (rc == 0) return WakeReason::kNotified;
  if (rc == ETIMEDOUT) return WakeReason::kTimedOut;
  throw LockError("pthread_cond_timedwait failed: " + std::string(strerror(rc)));
}

void InterProcessEvent::notify_one() { pthread_cond_signal(&cond_); }

void InterProcessEvent::notify_all() { pthread_cond_broadcast(&cond_); }

}  // namespace shmbus
