#pragma once

// Internal socket plumbing shared by the registry and the transports.
// Blocking IO with poll()-based deadlines; loopback TCP, Unix stream and
// datagram sockets.

#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shmbus/error.hpp"
#include "shmbus/sync.hpp"
#include "shmbus/wire.hpp"

namespace shmbus::net {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd() { close(); }
  Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;

  int get() const { return fd_; }
  int release() {
    int f = fd_;
    fd_ = -1;
    return f;
  }
  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }
  explicit operator bool() const { return fd_ >= 0; }

 private:
  int fd_ = -1;
};

// Listening Unix stream socket; unlinks any stale path first.
Fd uds_listen(const std::string& path);
Fd uds_connect(const std::string& path, MonotonicTime deadline);

// Loopback TCP listener on an ephemeral port.
struct TcpListener {
  Fd fd;
  uint16_t port = 0;
};
TcpListener tcp_listen_loopback();
Fd tcp_connect_loopback(uint16_t port, MonotonicTime deadline);
void set_nodelay(int fd, bool on);

// Loopback UDP socket bound to an ephemeral port.
struct UdpSocket {
  Fd fd;
  uint16_t port = 0;
};
UdpSocket udp_bind_loopback();
Fd udp_sender_loopback();

Fd accept_with_deadline(int listen_fd, MonotonicTime deadline);

// Blocking IO helpers. Return false on EOF (read) — other failures throw.
// The deadline bounds the whole transfer, not each syscall.
bool read_full(int fd, void* buf, size_t n, MonotonicTime deadline);
void write_full(int fd, const void* buf, size_t n);

bool wait_readable(int fd, MonotonicTime deadline);

// Control protocol framing: u32 length prefix + body.
void send_frame(int fd, std::span<const std::byte> body);
// Empty optional on clean EOF or deadline.
std::optional<std::vector<std::byte>> recv_frame(int fd, MonotonicTime deadline);

inline MonotonicTime watchdog_deadline(int seconds = 5) {
  return monotonic_now() + std::chrono::seconds(seconds);
}

}  // namespace shmbus::net
