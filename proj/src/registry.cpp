#include "shmbus/registry.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <thread>

#include "shmbus/wire.hpp"
#include "socket_util.hpp"

namespace shmbus {

std::string default_registry_path() {
  if (const char* env = std::getenv("SHMBUS_REGISTRY"); env && *env)
    return env;
  return "/tmp/shmbus-registry.sock";
}

// ---------------------------------------------------------------------------
// Server

struct RegistryServer::Impl {
  net::Fd listen_fd;
  std::string path;
  std::thread accept_thread;
  std::atomic<bool> stopping{false};

  std::mutex mu;
  std::map<std::string, std::vector<PublisherInfo>> topics;
  uint32_t next_publisher_id = 0;

  struct Barrier {
    uint32_t token = 0;
    std::condition_variable cv;
  };
  std::map<std::string, Barrier> barriers;
  std::vector<std::thread> workers;

  std::mutex conn_mu;
  std::set<int> conn_fds;

  void serve(net::Fd conn) {
    {
      std::lock_guard<std::mutex> g(conn_mu);
      conn_fds.insert(conn.get());
    }
    const int raw_fd = conn.get();
    try {
      for (;;) {
        auto req = net::recv_frame(conn.get(), monotonic_now() + std::chrono::hours(24));
        if (!req) break;  // client disconnected
        Decoder d(*req);
        auto verb = static_cast<Verb>(d.u8());
        Encoder resp;
        resp.u8(static_cast<uint8_t>(verb));
        switch (verb) {
          case Verb::kRegister: {
            std::string topic = d.str();
            std::string endpoint = d.str();
            uint8_t kind = d.u8();
            uint32_t id;
            {
              std::lock_guard<std::mutex> g(mu);
              auto& pubs = topics[topic];
              auto it = std::find_if(pubs.begin(), pubs.end(), [&](const PublisherInfo& p) {
                return p.endpoint == endpoint;
              });
              if (it != pubs.end()) {
                id = it->publisher_id;  // duplicate registration is idempotent
              } else {
                id = next_publisher_id++;
                pubs.push_back({endpoint, kind, id});
              }
            }
            resp.u8(static_cast<uint8_t>(Status::kOk));
            resp.u32(id);
            break;
          }
          case Verb::kLookup: {
            std::string topic = d.str();
            std::lock_guard<std::mutex> g(mu);
            auto it = topics.find(topic);
            resp.u8(static_cast<uint8_t>(Status::kOk));
            if (it == topics.end()) {
              resp.u16(0);
            } else {
              resp.u16(static_cast<uint16_t>(it->second.size()));
              for (const auto& p : it->second) {
                resp.str(p.endpoint);
                resp.u8(p.transport_kind);
                resp.u32(p.publisher_id);
              }
            }
            break;
          }
          case Verb::kBarrier: {
            std::string key = d.str();
            uint8_t op = d.u8();
            uint32_t index = d.u32();
            uint32_t timeout_ms = d.u32();
            std::unique_lock<std::mutex> g(mu);
            auto& b = barriers[key];
            if (op == 0) {  // wait until token reaches index
              bool ok = b.cv.wait_for(g, std::chrono::milliseconds(timeout_ms), [&] {
                return b.token >= index || stopping.load();
              });
              resp.u8(static_cast<uint8_t>(ok && b.token >= index ? Status::kOk
                                                                  : Status::kTimeout));
            } else {  // advance
              b.token += 1;
              b.cv.notify_all();
              resp.u8(static_cast<uint8_t>(Status::kOk));
            }
            break;
          }
          default:
            resp.u8(static_cast<uint8_t>(Status::kError));
            break;
        }
        net::send_frame(conn.get(), resp.view());
      }
    } catch (const std::exception&) {
      // Connection-level failure: drop this client, keep serving others.
    }
    std::lock_guard<std::mutex> g(conn_mu);
    conn_fds.erase(raw_fd);
  }
};

RegistryServer::RegistryServer() = default;

RegistryServer::~RegistryServer() { stop(); }

void RegistryServer::start(const std::string& socket_path) {
  if (impl_) throw TransportError("registry already started");
  impl_ = std::make_unique<Impl>();
  impl_->path = socket_path;
  impl_->listen_fd = net::uds_listen(socket_path);
  impl_->accept_thread = std::thread([impl = impl_.get()] {
    while (!impl->stopping.load()) {
      try {
        auto conn = net::accept_with_deadline(impl->listen_fd.get(),
                                              monotonic_now() + std::chrono::milliseconds(200));
        impl->workers.emplace_back(
            [impl, c = std::make_shared<net::Fd>(std::move(conn))]() mutable {
              impl->serve(std::move(*c));
            });
      } catch (const TransportError&) {
        // accept timeout: loop to re-check stopping
      }
    }
  });
}

void RegistryServer::stop() {
  if (!impl_) return;
  impl_->stopping.store(true);
  {
    std::lock_guard<std::mutex> g(impl_->mu);
    for (auto& [k, b] : impl_->barriers) b.cv.notify_all();
  }
  {
    std::lock_guard<std::mutex> g(impl_->conn_mu);
    for (int fd : impl_->conn_fds) ::shutdown(fd, SHUT_RDWR);
  }
  if (impl_->accept_thread.joinable()) impl_->accept_thread.join();
  impl_->listen_fd.close();
  for (auto& w : impl_->workers)
    if (w.joinable()) w.join();
  ::unlink(impl_->path.c_str());
  impl_.reset();
}

bool RegistryServer::running() const { return impl_ != nullptr; }

const std::string& RegistryServer::socket_path() const {
  static const std::string empty;
  return impl_ ? impl_->path : empty;
}

// ---------------------------------------------------------------------------
// Client

struct RegistryClient::Impl {
  net::Fd fd;
};

RegistryClient::RegistryClient(const std::string& socket_path, MonotonicTime connect_deadline)
    : impl_(std::make_unique<Impl>()) {
  impl_->fd = net::uds_connect(socket_path, connect_deadline);
}

RegistryClient::~RegistryClient() = default;
RegistryClient::RegistryClient(RegistryClient&&) noexcept = default;
RegistryClient& RegistryClient::operator=(RegistryClient&&) noexcept = default;

namespace {

std::vector<std::byte> roundtrip(net::Fd& fd, const Encoder& req, MonotonicTime deadline) {
  net::send_frame(fd.get(), req.view());
  auto resp = net::recv_frame(fd.get(), deadline);
  if (!resp) throw TransportError("registry closed the connection");
  return std::move(*resp);
}

}  // namespace

uint32_t RegistryClient::register_publisher(const std::string& topic,
                                            const std::string& endpoint,
                                            uint8_t transport_kind) {
  Encoder e;
  e.u8(static_cast<uint8_t>(Verb::kRegister));
  e.str(topic);
  e.str(endpoint);
  e.u8(transport_kind);
  auto resp = roundtrip(impl_->fd, e, net::watchdog_deadline());
  Decoder d(resp);
  d.u8();  // verb echo
  if (static_cast<Status>(d.u8()) != Status::kOk)
    throw TransportError("registry REGISTER failed for topic " + topic);
  return d.u32();
}

std::vector<PublisherInfo> RegistryClient::lookup(const std::string& topic) {
  Encoder e;
  e.u8(static_cast<uint8_t>(Verb::kLookup));
  e.str(topic);
  auto resp = roundtrip(impl_->fd, e, net::watchdog_deadline());
  Decoder d(resp);
  d.u8();
  if (static_cast<Status>(d.u8()) != Status::kOk)
    throw TransportError("registry LOOKUP failed for topic " + topic);
  uint16_t n = d.u16();
  std::vector<PublisherInfo> out;
  out.reserve(n);
  for (uint16_t i = 0; i < n; ++i) {
    PublisherInfo p;
    p.endpoint = d.str();
    p.transport_kind = d.u8();
    p.publisher_id = d.u32();
    out.push_back(std::move(p));
  }
  return out;
}

bool RegistryClient::barrier_wait(const std::string& key, uint32_t index,
                                  MonotonicTime deadline) {
  auto now = monotonic_now();
  uint32_t timeout_ms =
      deadline > now
          ? static_cast<uint32_t>(
                std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count())
          : 0;
  Encoder e;
  e.u8(static_cast<uint8_t>(Verb::kBarrier));
  e.str(key);
  e.u8(0);
  e.u32(index);
  e.u32(timeout_ms);
  auto resp = roundtrip(impl_->fd, e, deadline + std::chrono::seconds(2));
  Decoder d(resp);
  d.u8();
  return static_cast<Status>(d.u8()) == Status::kOk;
}

void RegistryClient::barrier_advance(const std::string& key) {
  Encoder e;
  e.u8(static_cast<uint8_t>(Verb::kBarrier));
  e.str(key);
  e.u8(1);
  e.u32(0);
  e.u32(0);
  auto resp = roundtrip(impl_->fd, e, net::watchdog_deadline());
  Decoder d(resp);
  d.u8();
  if (static_cast<Status>(d.u8()) != Status::kOk)
    throw TransportError("registry BARRIER advance failed");
}

}  // namespace shmbus
