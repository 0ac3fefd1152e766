#include "socket_util.hpp"

#include <arpa/inet.h>
#include <fcntl.h>

#include <cerrno>
#include <cstring>
#include <thread>

namespace shmbus::net {

namespace {

[[noreturn]] void raise_errno(const std::string& what) {
  throw TransportError(what + ": " + strerror(errno));
}

int poll_one(int fd, short events, MonotonicTime deadline) {
  for (;;) {
    auto now = monotonic_now();
    int timeout_ms = 0;
    if (deadline > now)
      timeout_ms = static_cast<int>(
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count() + 1);
    pollfd p{fd, events, 0};
    int rc = ::poll(&p, 1, timeout_ms);
    if (rc < 0) {
      if (errno == EINTR) continue;
      raise_errno("poll");
    }
    return rc;  // 0 = timeout
  }
}

}  // namespace

Fd uds_listen(const std::string& path) {
  if (path.size() >= sizeof(sockaddr_un{}.sun_path))
    throw TransportError("unix socket path too long: " + path);
  Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) raise_errno("socket(AF_UNIX)");
  ::unlink(path.c_str());
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
    raise_errno("bind(" + path + ")");
  if (::listen(fd.get(), 64) != 0) raise_errno("listen(" + path + ")");
  return fd;
}

Fd uds_connect(const std::string& path, MonotonicTime deadline) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
  for (;;) {
    Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!fd) raise_errno("socket(AF_UNIX)");
    if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0)
      return fd;
    // The peer may not be listening yet; retry until the deadline.
    if (monotonic_now() >= deadline)
      throw TransportError("connect timed out: " + path);
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
}

TcpListener tcp_listen_loopback() {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) raise_errno("socket(AF_INET)");
  int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
    raise_errno("bind(loopback)");
  if (::listen(fd.get(), 64) != 0) raise_errno("listen(loopback)");
  socklen_t len = sizeof(addr);
  if (::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len) != 0)
    raise_errno("getsockname");
  return {std::move(fd), ntohs(addr.sin_port)};
}

Fd tcp_connect_loopback(uint16_t port, MonotonicTime deadline) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  for (;;) {
    Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!fd) raise_errno("socket(AF_INET)");
    if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0)
      return fd;
    if (monotonic_now() >= deadline)
      throw TransportError("connect timed out: loopback:" + std::to_string(port));
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
}

void set_nodelay(int fd, bool on) {
  int v = on ? 1 : 0;
  if (::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &v, sizeof(v)) != 0)
    raise_errno("setsockopt(TCP_NODELAY)");
}

UdpSocket udp_bind_loopback() {
  Fd fd(::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0));
  if (!fd) raise_errno("socket(AF_INET, DGRAM)");
  int sz = 8 * 1024 * 1024;  // best effort; capped by net.core.rmem_max
  ::setsockopt(fd.get(), SOL_SOCKET, SO_RCVBUF, &sz, sizeof(sz));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
    raise_errno("bind(udp loopback)");
  socklen_t len = sizeof(addr);
  if (::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len) != 0)
    raise_errno("getsockname(udp)");
  return {std::move(fd), ntohs(addr.sin_port)};
}

Fd udp_sender_loopback() {
  Fd fd(::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0));
  if (!fd) raise_errno("socket(AF_INET, DGRAM)");
  int sz = 8 * 1024 * 1024;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_SNDBUF, &sz, sizeof(sz));
  return fd;
}

Fd accept_with_deadline(int listen_fd, MonotonicTime deadline) {
  for (;;) {
    if (poll_one(listen_fd, POLLIN, deadline) == 0)
      throw TransportError("accept timed out");
    int fd = ::accept4(listen_fd, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd >= 0) return Fd(fd);
    if (errno == EINTR || errno == EAGAIN) continue;
    raise_errno("accept");
  }
}

bool read_full(int fd, void* buf, size_t n, MonotonicTime deadline) {
  auto* p = static_cast<char*>(buf);
  size_t got = 0;
  while (got < n) {
    if (poll_one(fd, POLLIN, deadline) == 0)
      throw TransportError("read timed out");
    ssize_t rc = ::read(fd, p + got, n - got);
    if (rc == 0) {
      if (got == 0) return false;  // clean EOF between messages
      throw TransportError("connection closed mid-message");
    }
    if (rc < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      raise_errno("read");
    }
    got += static_cast<size_t>(rc);
  }
  return true;
}

void write_full(int fd, const void* buf, size_t n) {
  const auto* p = static_cast<const char*>(buf);
  size_t sent = 0;
  while (sent < n) {
    ssize_t rc = ::write(fd, p + sent, n - sent);
    if (rc < 0) {
      if (errno == EINTR) continue;
      raise_errno("write");
    }
    sent += static_cast<size_t>(rc);
  }
}

bool wait_readable(int fd, MonotonicTime deadline) {
  return poll_one(fd, POLLIN, deadline) > 0;
}

void send_frame(int fd, std::span<const std::byte> body) {
  uint32_t len = static_cast<uint32_t>(body.size());
  std::vector<std::byte> out(4 + body.size());
  std::memcpy(out.data(), &len, 4);
  std::memcpy(out.data() + 4, body.data(), body.size());
  write_full(fd, out.data(), out.size());
}

std::optional<std::vector<std::byte>> recv_frame(int fd, MonotonicTime deadline) {
  uint32_t len = 0;
  if (!read_full(fd, &len, 4, deadline)) return std::nullopt;
  if (len > 64 * 1024 * 1024) throw TransportError("control frame too large");
  std::vector<std::byte> body(len);
  if (len > 0 && !read_full(fd, body.data(), len, deadline))
    throw TransportError("connection closed mid-frame");
  return body;
}

}  // namespace shmbus::net
