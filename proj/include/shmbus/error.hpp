#pragma once

#include <stdexcept>
#include <string>

namespace shmbus {

// Base for all hard errors raised by the library. Expected runtime outcomes
// (timeouts, closed queues, message loss) are reported through result enums
// instead.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Segment create/open failures: name collisions, missing segments,
// header corruption, version mismatches.
class SegmentError : public Error {
 public:
  using Error::Error;
};

// Allocation request cannot be satisfied from the segment heap.
class OutOfSegmentMemory : public Error {
 public:
  using Error::Error;
};

// Heap corruption detected: double free, foreign reference, bad canary.
class HeapCorruption : public Error {
 public:
  using Error::Error;
};

// Misuse of an in-segment lock (e.g. releasing a lock not held).
class LockError : public Error {
 public:
  using Error::Error;
};

// Registry/transport protocol failures (unreachable peers, malformed
// frames, duplicate advertisements).
class TransportError : public Error {
 public:
  using Error::Error;
};

// Benchmark orchestration failures (barrier timeout, participant crash,
// invalid pin target).
class BenchError : public Error {
 public:
  using Error::Error;
};

}  // namespace shmbus
