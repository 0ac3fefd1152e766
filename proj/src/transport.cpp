#include "shmbus/transport.hpp"

#include <signal.h>

#include <algorithm>
#include <cctype>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <thread>

#include "socket_util.hpp"

namespace shmbus {

namespace {

// Fixed header at the start of every segment-resident message payload.
struct SegMsgHeader {
  uint64_t seq;
  uint64_t stamp_ns;
  uint64_t payload_len;
  uint64_t reserved;
};
constexpr uint64_t kSegMsgHeaderBytes = sizeof(SegMsgHeader);
static_assert(kSegMsgHeaderBytes == 32);

// Depth of the puller->application hand-off. Kept shallow on purpose: the
// ShmQueue / socket buffer is the real buffer, and every slot here can pin a
// whole in-flight payload.
constexpr size_t kChannelDepth = 8;

bool valid_topic(const std::string& t) {
  if (t.empty() || t.size() > 128) return false;
  for (char c : t)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' ||
          c == '-' || c == '/'))
      return false;
  return true;
}

void ignore_sigpipe_once() {
  static const int once = [] {
    ::signal(SIGPIPE, SIG_IGN);
    return 0;
  }();
  (void)once;
}

// Single-consumer hand-off channel between puller threads and the
// application (the in-process leg of delivery).
class ViewChannel {
 public:
  explicit ViewChannel(size_t cap) : cap_(cap) {}

  // Returns false once the channel is closed.
  bool push(MessageView&& v, const std::atomic<bool>& stop) {
    std::unique_lock<std::mutex> g(mu_);
    while (q_.size() >= cap_ && !closed_) {
      if (stop.load(std::memory_order_relaxed)) return false;
      cv_push_.wait_for(g, std::chrono::milliseconds(50));
    }
    if (closed_) return false;
    q_.push_back(std::move(v));
    cv_pop_.notify_one();
    return true;
  }

  enum class PopOutcome { kItem, kTimedOut, kClosed };

  PopOutcome pop(MessageView& out, MonotonicTime deadline) {
    std::unique_lock<std::mutex> g(mu_);
    while (q_.empty()) {
      if (closed_) return PopOutcome::kClosed;
      if (cv_pop_.wait_until(g, deadline) == std::cv_status::timeout && q_.empty())
        return q_.empty() && closed_ ? PopOutcome::kClosed : PopOutcome::kTimedOut;
    }
    out = std::move(q_.front());
    q_.pop_front();
    cv_push_.notify_one();
    return PopOutcome::kItem;
  }

  void close() {
    std::lock_guard<std::mutex> g(mu_);
    closed_ = true;
    cv_pop_.notify_all();
    cv_push_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_push_, cv_pop_;
  std::deque<MessageView> q_;
  size_t cap_;
  bool closed_ = false;
};

}  // namespace

std::string to_string(TransportKind kind) {
  switch (kind) {
    case TransportKind::kShm: return "shm";
    case TransportKind::kTcp: return "tcp";
    case TransportKind::kUds: return "uds";
    case TransportKind::kUdp: return "udp";
    case TransportKind::kHybrid: return "hybrid";
  }
  return "?";
}

TransportKind transport_from_string(const std::string& s) {
  if (s == "shm") return TransportKind::kShm;
  if (s == "tcp") return TransportKind::kTcp;
  if (s == "uds") return TransportKind::kUds;
  if (s == "udp") return TransportKind::kUdp;
  if (s == "hybrid") return TransportKind::kHybrid;
  throw TransportError("unknown transport: " + s);
}

// ---------------------------------------------------------------------------
// OutMessage

std::span<std::byte> OutMessage::payload() {
  if (block_)
    return block_.bytes().subspan(kSegMsgHeaderBytes);
  return {heap_.get(), size_};
}

uint64_t OutMessage::payload_segment_offset() const {
  if (!block_) return 0;
  return block_.payload_offset() + kSegMsgHeaderBytes;
}

// ---------------------------------------------------------------------------
// Pusher

namespace {

struct SubscriberLink {
  uint32_t index = 0;
  std::string name;
  std::atomic<bool> active{true};
  bool torn_down = false;
  ShmQueue queue;                     // kShm
  net::Fd data_fd;                    // kTcp / kUds / kHybrid
  uint16_t udp_port = 0;              // kUdp
  std::vector<uint64_t> sent_blocks;  // kHybrid: offsets whose counts we pre-incremented
  std::atomic<uint64_t> acked{0};     // kHybrid: subscriber's consumption watermark
};

}  // namespace

struct Pusher::Impl {
  ShmEngine* engine = nullptr;
  std::string topic;
  TransportKind kind = TransportKind::kShm;
  bool nodelay = false;
  uint32_t publisher_id = 0;
  uint32_t queue_capacity = ShmQueue::kDefaultCapacity;
  FullPolicy full_policy = FullPolicy::kBlock;

  std::mutex setup_mu;  // serializes subscriber attachment end-to-end
  mutable std::mutex links_mu;
  std::condition_variable links_cv;
  std::vector<std::unique_ptr<SubscriberLink>> links;
  uint32_t next_index = 0;

  uint64_t next_seq = 0;
  uint64_t expected_payload = UINT64_MAX;

  net::Fd udp_fd;  // one send socket shared by all UDP links

  std::optional<std::pair<uint64_t, uint32_t>> udp_drop;

  void append_link(std::unique_ptr<SubscriberLink> link) {
    std::lock_guard<std::mutex> g(links_mu);
    links.push_back(std::move(link));
    links_cv.notify_all();
  }

  // Releases resources for one subscriber. `consumed` is how many messages
  // the subscriber adopted; meaningful only on a graceful BYE.
  void teardown_link(SubscriberLink& link, uint64_t consumed, bool graceful) {
    link.active.store(false);  // lets a window-waiting publisher move on
    std::lock_guard<std::mutex> g(links_mu);
    if (link.torn_down) return;
    link.torn_down = true;
    if (kind == TransportKind::kShm && link.queue) {
      link.queue.close();
      if (graceful) link.queue.destroy();
    }
    if (kind == TransportKind::kHybrid && graceful) {
      // The subscriber never adopted descriptors past `consumed`; reclaim
      // the counts we pre-incremented on its behalf.
      Segment* seg = engine->segment();
      for (uint64_t i = consumed; i < link.sent_blocks.size(); ++i)
        SharedHandle::adopt(*seg, link.sent_blocks[i]);
    }
    link.data_fd.close();
  }
};

Pusher::Pusher(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

Pusher::~Pusher() {
  if (!impl_) return;
  std::lock_guard<std::mutex> g(impl_->links_mu);
  for (auto& l : impl_->links) {
    if (l->active.load() && impl_->kind == TransportKind::kShm && l->queue)
      l->queue.close();  // wake poppers; state stays allocated (see BYE path)
    l->active.store(false);
    l->data_fd.close();
  }
}

const std::string& Pusher::topic() const { return impl_->topic; }
TransportKind Pusher::kind() const { return impl_->kind; }
uint32_t Pusher::publisher_id() const { return impl_->publisher_id; }

size_t Pusher::subscriber_count() const {
  std::lock_guard<std::mutex> g(impl_->links_mu);
  return impl_->links.size();
}

size_t Pusher::active_subscriber_count() const {
  std::lock_guard<std::mutex> g(impl_->links_mu);
  size_t n = 0;
  for (const auto& l : impl_->links) n += l->active.load() ? 1 : 0;
  return n;
}

std::vector<std::string> Pusher::subscriber_names() const {
  std::lock_guard<std::mutex> g(impl_->links_mu);
  std::vector<std::string> out;
  out.reserve(impl_->links.size());
  for (const auto& l : impl_->links) out.push_back(l->name);
  return out;
}

bool Pusher::wait_for_subscribers(size_t n, MonotonicTime deadline) {
  std::unique_lock<std::mutex> g(impl_->links_mu);
  return impl_->links_cv.wait_until(g, deadline, [&] { return impl_->links.size() >= n; });
}

void Pusher::inject_udp_chunk_drop(uint64_t seq, uint32_t chunk_index) {
  impl_->udp_drop = {seq, chunk_index};
}

OutMessage Pusher::loan(uint64_t payload_size) {
  if (impl_->expected_payload == UINT64_MAX) {
    impl_->expected_payload = payload_size;
  } else if (impl_->expected_payload != payload_size) {
    throw TransportError("payload size mismatch on topic " + impl_->topic + ": " +
                         std::to_string(payload_size) + " vs configured " +
                         std::to_string(impl_->expected_payload));
  }
  OutMessage msg;
  msg.size_ = payload_size;
  if (impl_->kind == TransportKind::kShm || impl_->kind == TransportKind::kHybrid) {
    Segment* seg = impl_->engine->segment();
    msg.block_ = make_unique(*seg, kSegMsgHeaderBytes + payload_size, /*zero=*/false);
    msg.seg_ = seg;
    std::memset(msg.block_.bytes().data(), 0, kSegMsgHeaderBytes);
  } else {
    msg.heap_ = std::make_unique<std::byte[]>(payload_size);
  }
  return msg;
}

PublishReport Pusher::publish(OutMessage&& msg) {
  auto& im = *impl_;
  PublishReport report;
  const uint64_t seq = im.next_seq++;
  std::lock_guard<std::mutex> g(im.links_mu);

  if (im.kind == TransportKind::kShm || im.kind == TransportKind::kHybrid) {
    // Stamp in place: the payload was already written, exactly once, by the
    // caller. From here on nothing copies a payload byte.
    auto* hdr = reinterpret_cast<SegMsgHeader*>(msg.block_.bytes().data());
    hdr->seq = seq;
    hdr->payload_len = msg.size_;
    hdr->stamp_ns = monotonic_now_ns();
    SharedHandle handle = std::move(msg.block_).to_shared();

    if (im.kind == TransportKind::kShm) {
      for (auto& l : im.links) {
        if (!l->active.load()) continue;
        SharedHandle clone = handle.clone();
        auto r = l->queue.push(clone, seq, monotonic_now() + std::chrono::seconds(5));
        if (r == PushResult::kOk) {
          report.delivered_to += 1;
        } else {
          report.dropped += 1;  // clone's count returns with `clone`
        }
      }
    } else {
      auto frame = serialize_descriptor(
          im.topic, seq, hdr->stamp_ns,
          {im.engine->config().segment_name, handle.block_offset()});
      // Descriptors are tiny, so socket buffering alone would let thousands
      // of them pin payload blocks. Bound the in-flight set per subscriber
      // with the consumption watermark it acks back.
      const uint64_t window = im.queue_capacity + kChannelDepth;
      for (auto& l : im.links) {
        if (!l->active.load()) continue;
        auto deadline = monotonic_now() + std::chrono::seconds(5);
        while (l->sent_blocks.size() - l->acked.load() >= window &&
               l->active.load() && monotonic_now() < deadline)
          std::this_thread::sleep_for(std::chrono::microseconds(100));
        if (!l->active.load() ||
            l->sent_blocks.size() - l->acked.load() >= window) {
          report.dropped += 1;
          continue;
        }
        uint64_t off = handle.release_cloned();
        try {
          net::write_full(l->data_fd.get(), frame.data(), frame.size());
          l->sent_blocks.push_back(off);
          report.delivered_to += 1;
        } catch (const TransportError&) {
          SharedHandle::adopt(*im.engine->segment(), off);  // reclaim
          l->active.store(false);
          report.dropped += 1;
        }
      }
    }
    return report;
  }

  const uint64_t stamp = monotonic_now_ns();
  FrameHeader h{FrameKind::kPayload, im.topic, seq, stamp, msg.size_};
  auto frame = serialize_frame(h, {msg.heap_.get(), msg.size_});

  if (im.kind == TransportKind::kUdp) {
    payload_copy_counter().fetch_add(1, std::memory_order_relaxed);  // chunk split
    uint32_t count = chunk_count_for(frame.size());
    for (auto& l : im.links) {
      if (!l->active.load()) continue;
      sockaddr_in dest{};
      dest.sin_family = AF_INET;
      dest.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
      dest.sin_port = htons(l->udp_port);
      bool sent_any = false;
      for (uint32_t ci = 0; ci < count; ++ci) {
        if (im.udp_drop && im.udp_drop->first == seq && im.udp_drop->second == ci) {
          im.udp_drop.reset();
          continue;  // fault injection: this chunk vanishes
        }
        size_t begin = static_cast<size_t>(ci) * kUdpChunkBytes;
        size_t len = std::min(kUdpChunkBytes, frame.size() - begin);
        auto datagram = build_chunk({seq, ci, count, static_cast<uint32_t>(len)},
                                    {frame.data() + begin, len});
        ::sendto(im.udp_fd.get(), datagram.data(), datagram.size(), 0,
                 reinterpret_cast<sockaddr*>(&dest), sizeof(dest));
        sent_any = true;
      }
      if (sent_any) report.delivered_to += 1;  // fire-and-forget: handed to the kernel
    }
    return report;
  }

  for (auto& l : im.links) {
    if (!l->active.load()) continue;
    try {
      net::write_full(l->data_fd.get(), frame.data(), frame.size());
      report.delivered_to += 1;
    } catch (const TransportError&) {
      l->active.store(false);
      report.dropped += 1;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Engine

struct ShmEngine::Impl {
  ShmEngine* self = nullptr;
  std::string control_path;
  net::Fd listen_fd;
  std::thread accept_thread;
  std::atomic<bool> stopping{false};

  std::optional<RegistryClient> registry;
  Segment segment;

  std::mutex mu;  // pushers map + segment attach
  std::map<std::string, std::unique_ptr<Pusher>> pushers;

  std::mutex conn_mu;
  std::set<int> conn_fds;
  std::vector<std::thread> handlers;

  void ensure_segment(const EngineConfig& cfg) {
    std::lock_guard<std::mutex> g(mu);
    if (!segment)
      segment = Segment::open_or_create(cfg.segment_name, cfg.segment_size);
  }

  Pusher* find_pusher(const std::string& topic) {
    std::lock_guard<std::mutex> g(mu);
    auto it = pushers.find(topic);
    return it == pushers.end() ? nullptr : it->second.get();
  }

  void handle_connection(net::Fd conn);
  void serve_subscriber(net::Fd& conn, Pusher::Impl& pusher, Decoder& req);
};

namespace {

std::string resolved_or(const std::string& v, const char* env, const std::string& fallback) {
  if (!v.empty()) return v;
  if (const char* e = std::getenv(env); e && *e) return e;
  return fallback;
}

}  // namespace

ShmEngine::ShmEngine(EngineConfig cfg) : cfg_(std::move(cfg)) {
  ignore_sigpipe_once();
  if (cfg_.node_name.empty() || cfg_.node_name.size() > 64)
    throw TransportError("engine node_name must be 1..64 chars");
  cfg_.registry_path = resolved_or(cfg_.registry_path, "SHMBUS_REGISTRY",
                                   default_registry_path());
  cfg_.segment_name = resolved_or(cfg_.segment_name, "SHMBUS_SEGMENT", "shmbus");
  if (cfg_.socket_dir.empty()) cfg_.socket_dir = "/tmp";

  impl_ = std::make_unique<Impl>();
  impl_->self = this;
  impl_->control_path = cfg_.socket_dir + "/" + cfg_.node_name + ".ctl";
  impl_->listen_fd = net::uds_listen(impl_->control_path);
  impl_->registry.emplace(cfg_.registry_path, net::watchdog_deadline());

  impl_->accept_thread = std::thread([impl = impl_.get()] {
    while (!impl->stopping.load()) {
      try {
        auto conn = net::accept_with_deadline(
            impl->listen_fd.get(), monotonic_now() + std::chrono::milliseconds(200));
        impl->handlers.emplace_back(
            [impl, c = std::make_shared<net::Fd>(std::move(conn))]() mutable {
              impl->handle_connection(std::move(*c));
            });
      } catch (const TransportError&) {
        // accept timeout; re-check stopping
      }
    }
  });
}

ShmEngine::~ShmEngine() {
  impl_->stopping.store(true);
  {
    std::lock_guard<std::mutex> g(impl_->conn_mu);
    for (int fd : impl_->conn_fds) ::shutdown(fd, SHUT_RDWR);
  }
  if (impl_->accept_thread.joinable()) impl_->accept_thread.join();
  for (auto& h : impl_->handlers)
    if (h.joinable()) h.join();
  impl_->pushers.clear();  // closes queues, wakes poppers
  ::unlink(impl_->control_path.c_str());
}

Segment* ShmEngine::segment() {
  std::lock_guard<std::mutex> g(impl_->mu);
  return impl_->segment ? &impl_->segment : nullptr;
}

const std::string& ShmEngine::control_path() const { return impl_->control_path; }

RegistryClient& ShmEngine::registry() { return *impl_->registry; }

Pusher& ShmEngine::advertise(const std::string& topic, TransportKind kind, bool nodelay) {
  if (!valid_topic(topic)) throw TransportError("invalid topic name: " + topic);
  if (kind == TransportKind::kShm || kind == TransportKind::kHybrid)
    impl_->ensure_segment(cfg_);

  auto impl = std::make_unique<Pusher::Impl>();
  impl->engine = this;
  impl->topic = topic;
  impl->kind = kind;
  impl->nodelay = nodelay;
  impl->queue_capacity = cfg_.queue_capacity;
  impl->full_policy = cfg_.full_policy;
  if (kind == TransportKind::kUdp) impl->udp_fd = net::udp_sender_loopback();
  impl->publisher_id =
      impl_->registry->register_publisher(topic, impl_->control_path,
                                          static_cast<uint8_t>(kind));

  std::lock_guard<std::mutex> g(impl_->mu);
  if (impl_->pushers.count(topic))
    throw TransportError("topic already advertised by this engine: " + topic);
  auto pusher = std::unique_ptr<Pusher>(new Pusher(std::move(impl)));
  auto [it, ok] = impl_->pushers.emplace(topic, std::move(pusher));
  (void)ok;
  return *it->second;
}

// Publisher-side handling of one subscriber control connection: one
// SUBSCRIBE, then hold the connection until BYE or disconnect.
void ShmEngine::Impl::handle_connection(net::Fd conn) {
  {
    std::lock_guard<std::mutex> g(conn_mu);
    conn_fds.insert(conn.get());
  }
  const int raw_fd = conn.get();
  try {
    auto req = net::recv_frame(conn.get(), net::watchdog_deadline());
    if (req) {
      Decoder d(*req);
      auto verb = static_cast<Verb>(d.u8());
      if (verb == Verb::kSubscribe) {
        std::string topic = d.str();
        // The registry may have told the subscriber about this topic a
        // moment before advertise() finished installing the pusher.
        Pusher* pusher = find_pusher(topic);
        for (auto deadline = net::watchdog_deadline();
             pusher == nullptr && monotonic_now() < deadline;
             pusher = find_pusher(topic))
          std::this_thread::sleep_for(std::chrono::milliseconds(1));
        if (pusher == nullptr) {
          Encoder resp;
          resp.u8(static_cast<uint8_t>(Verb::kQueueInfo));
          resp.u8(static_cast<uint8_t>(Status::kError));
          resp.str("topic not advertised here: " + topic);
          net::send_frame(conn.get(), resp.view());
        } else {
          serve_subscriber(conn, *pusher->impl_, d);
        }
      }
    }
  } catch (const std::exception&) {
    // connection dropped; subscriber-side teardown already ran or will run
  }
  std::lock_guard<std::mutex> g(conn_mu);
  conn_fds.erase(raw_fd);
}

void ShmEngine::Impl::serve_subscriber(net::Fd& conn, Pusher::Impl& pusher, Decoder& d) {
  auto req_kind = static_cast<TransportKind>(d.u8());
  std::string sub_name = d.str();
  uint16_t udp_port = d.u16();
  uint8_t want_nodelay = d.u8();

  Encoder resp;
  resp.u8(static_cast<uint8_t>(Verb::kQueueInfo));

  if (req_kind != pusher.kind) {
    resp.u8(static_cast<uint8_t>(Status::kError));
    resp.str("transport kind mismatch: topic uses " + to_string(pusher.kind));
    net::send_frame(conn.get(), resp.view());
    return;
  }

  SubscriberLink* link_ptr = nullptr;
  {
    // Attachment is serialized end-to-end so the attach order equals the
    // order SUBSCRIBE requests reach this publisher.
    std::lock_guard<std::mutex> setup(pusher.setup_mu);
    auto link = std::make_unique<SubscriberLink>();
    link->name = sub_name;
    {
      std::lock_guard<std::mutex> g(pusher.links_mu);
      link->index = pusher.next_index++;
    }

    resp.u8(static_cast<uint8_t>(Status::kOk));
    resp.u32(pusher.publisher_id);
    resp.u32(link->index);

    switch (pusher.kind) {
      case TransportKind::kShm: {
        Segment* seg = self->segment();
        std::string qname = pusher.topic + "/pub" + std::to_string(pusher.publisher_id) +
                            "/sub" + std::to_string(link->index);
        if (qname.size() > 64)
          throw TransportError("topic too long for queue naming: " + pusher.topic);
        link->queue =
            ShmQueue::create(*seg, qname, pusher.queue_capacity, pusher.full_policy);
        resp.str(self->cfg_.segment_name);
        resp.str(qname);
        net::send_frame(conn.get(), resp.view());
        break;
      }
      case TransportKind::kTcp:
      case TransportKind::kHybrid: {
        auto listener = net::tcp_listen_loopback();
        resp.u16(listener.port);
        if (pusher.kind == TransportKind::kHybrid)
          resp.str(self->cfg_.segment_name);
        net::send_frame(conn.get(), resp.view());
        link->data_fd = net::accept_with_deadline(listener.fd.get(),
                                                  net::watchdog_deadline());
        // Descriptor frames are tiny; Nagle would dominate their latency.
        bool nd = pusher.kind == TransportKind::kHybrid ? true
                                                        : (pusher.nodelay || want_nodelay);
        net::set_nodelay(link->data_fd.get(), nd);
        break;
      }
      case TransportKind::kUds: {
        std::string path = self->cfg_.socket_dir + "/" + self->cfg_.node_name + ".d" +
                           std::to_string(pusher.publisher_id) + "." +
                           std::to_string(link->index);
        auto listener = net::uds_listen(path);
        resp.str(path);
        net::send_frame(conn.get(), resp.view());
        link->data_fd = net::accept_with_deadline(listener.get(),
                                                  net::watchdog_deadline());
        ::unlink(path.c_str());
        break;
      }
      case TransportKind::kUdp: {
        link->udp_port = udp_port;
        net::send_frame(conn.get(), resp.view());
        break;
      }
    }
    link_ptr = link.get();
    pusher.append_link(std::move(link));
  }

  // Hold the control connection; a BYE (graceful) or EOF (crash) ends it.
  uint64_t consumed = 0;
  bool graceful = false;
  try {
    for (;;) {
      auto req = net::recv_frame(conn.get(), monotonic_now() + std::chrono::hours(24));
      if (!req) break;
      Decoder rd(*req);
      auto verb = static_cast<Verb>(rd.u8());
      if (verb == Verb::kAck) {
        link_ptr->acked.store(rd.u64(), std::memory_order_relaxed);
        continue;
      }
      if (verb == Verb::kBye) {
        consumed = rd.u64();
        graceful = true;
        Encoder bye;
        bye.u8(static_cast<uint8_t>(Verb::kBye));
        bye.u8(static_cast<uint8_t>(Status::kOk));
        net::send_frame(conn.get(), bye.view());
        break;
      }
    }
  } catch (const std::exception&) {
  }
  pusher.teardown_link(*link_ptr, consumed, graceful);
}

// ---------------------------------------------------------------------------
// Subscription / pullers

namespace {

struct PullerState {
  uint32_t publisher_id = 0;
  TransportKind kind = TransportKind::kShm;
  std::atomic<bool> stop{false};
  std::atomic<uint64_t> consumed{0};
  std::thread worker;
  net::Fd control_fd;
  // transport-specific:
  Segment* seg = nullptr;
  ShmQueue queue;        // kShm
  net::Fd data_fd;       // kTcp / kUds / kHybrid
  net::UdpSocket udp;    // kUdp
};

}  // namespace

struct Subscription::Impl {
  std::string topic;
  ViewChannel channel{kChannelDepth};
  std::vector<std::unique_ptr<PullerState>> pullers;
  std::atomic<size_t> done_count{0};
  std::atomic<uint64_t> lost{0};

  void puller_done() {
    if (done_count.fetch_add(1) + 1 == pullers.size()) channel.close();
  }

  void run_shm(PullerState& p);
  void run_stream(PullerState& p);  // kTcp / kUds / kHybrid
  void run_udp(PullerState& p);
};

Subscription::Subscription() = default;

Subscription::~Subscription() {
  if (!impl_) return;
  for (auto& p : impl_->pullers) p->stop.store(true);
  impl_->channel.close();
  for (auto& p : impl_->pullers) {
    if (p->worker.joinable()) p->worker.join();
  }
  // Graceful goodbye: lets the publisher destroy per-subscriber queues and
  // reap un-adopted hybrid counts.
  for (auto& p : impl_->pullers) {
    if (!p->control_fd) continue;
    try {
      Encoder e;
      e.u8(static_cast<uint8_t>(Verb::kBye));
      e.u64(p->consumed.load());
      net::send_frame(p->control_fd.get(), e.view());
      net::recv_frame(p->control_fd.get(), net::watchdog_deadline());
    } catch (const std::exception&) {
    }
  }
}

Subscription::Subscription(Subscription&&) noexcept = default;
Subscription& Subscription::operator=(Subscription&&) noexcept = default;

const std::string& Subscription::topic() const { return impl_->topic; }
size_t Subscription::publisher_count() const { return impl_->pullers.size(); }
uint64_t Subscription::lost() const { return impl_->lost.load(); }

ReceiveResult Subscription::receive(MonotonicTime deadline) {
  MessageView view;
  switch (impl_->channel.pop(view, deadline)) {
    case ViewChannel::PopOutcome::kClosed:
      return {ReceiveStatus::kClosed, {}};
    case ViewChannel::PopOutcome::kTimedOut:
      return {ReceiveStatus::kTimedOut, {}};
    case ViewChannel::PopOutcome::kItem:
      break;
  }
  if (view.recv_ns == 0) view.recv_ns = monotonic_now_ns();
  return {ReceiveStatus::kMessage, std::move(view)};
}

void Subscription::Impl::run_shm(PullerState& p) {
  while (!p.stop.load(std::memory_order_relaxed)) {
    auto r = p.queue.pop(monotonic_now() + std::chrono::milliseconds(200));
    if (r.status == PopStatus::kTimedOut) continue;
    if (r.status == PopStatus::kClosed) break;
    p.consumed.fetch_add(1, std::memory_order_relaxed);
    auto bytes = r.item.bytes();
    auto* hdr = reinterpret_cast<const SegMsgHeader*>(bytes.data());
    MessageView v;
    v.recv_ns = monotonic_now_ns();  // delivery time, before the in-process leg
    v.seq = hdr->seq;
    v.stamp_ns = hdr->stamp_ns;
    v.publisher_id = p.publisher_id;
    v.payload = bytes.subspan(kSegMsgHeaderBytes);
    v.payload_segment_offset = r.item.payload_offset() + kSegMsgHeaderBytes;
    v.retained = std::move(r.item);
    if (!channel.push(std::move(v), p.stop)) break;
  }
  puller_done();
}

void Subscription::Impl::run_stream(PullerState& p) {
  std::vector<std::byte> header_buf;
  try {
    while (!p.stop.load(std::memory_order_relaxed)) {
      if (!net::wait_readable(p.data_fd.get(),
                              monotonic_now() + std::chrono::milliseconds(200)))
        continue;
      auto io_deadline = net::watchdog_deadline(30);
      std::byte prefix[kFrameFixedPrefix];
      if (!net::read_full(p.data_fd.get(), prefix, sizeof(prefix), io_deadline))
        break;  // clean EOF: publisher went away
      auto pre = parse_prefix({prefix, sizeof(prefix)});
      header_buf.resize(pre.topic_len + 24);
      if (!net::read_full(p.data_fd.get(), header_buf.data(), header_buf.size(),
                          io_deadline))
        throw TransportError("stream closed mid-frame");
      Decoder d(header_buf);
      d.bytes(pre.topic_len);  // topic echo; connection is per-topic already
      uint64_t seq = d.u64();
      uint64_t stamp = d.u64();
      uint64_t payload_len = d.u64();

      MessageView v;
      v.seq = seq;
      v.stamp_ns = stamp;
      v.publisher_id = p.publisher_id;

      if (pre.kind == FrameKind::kDescriptor) {
        std::vector<std::byte> blob(payload_len);
        if (!net::read_full(p.data_fd.get(), blob.data(), blob.size(), io_deadline))
          throw TransportError("stream closed mid-frame");
        auto desc = parse_descriptor(blob);
        v.recv_ns = monotonic_now_ns();
        if (p.seg == nullptr || desc.segment_name != p.seg->name())
          throw TransportError("descriptor names segment '" + desc.segment_name +
                               "' but this process attached '" +
                               (p.seg ? p.seg->name() : "<none>") + "'");
        SharedHandle item = SharedHandle::adopt(*p.seg, desc.block_offset);
        uint64_t done = p.consumed.fetch_add(1, std::memory_order_relaxed) + 1;
        if (done % 4 == 0) {
          Encoder ack;
          ack.u8(static_cast<uint8_t>(Verb::kAck));
          ack.u64(done);
          net::send_frame(p.control_fd.get(), ack.view());
        }
        auto bytes = item.bytes();
        v.payload = bytes.subspan(kSegMsgHeaderBytes);
        v.payload_segment_offset = item.payload_offset() + kSegMsgHeaderBytes;
        v.retained = std::move(item);
      } else {
        // The landing copy every socket transport pays and the segment
        // transports do not.
        std::shared_ptr<std::byte[]> buf(new std::byte[payload_len]);
        if (payload_len > 0 &&
            !net::read_full(p.data_fd.get(), buf.get(), payload_len, io_deadline))
          throw TransportError("stream closed mid-frame");
        payload_copy_counter().fetch_add(1, std::memory_order_relaxed);
        p.consumed.fetch_add(1, std::memory_order_relaxed);
        v.recv_ns = monotonic_now_ns();
        v.payload = {buf.get(), payload_len};
        v.owned = std::move(buf);
      }
      if (!channel.push(std::move(v), p.stop)) break;
    }
  } catch (const std::exception&) {
    // Torn connection or corrupt stream: stop this puller.
  }
  puller_done();
}

void Subscription::Impl::run_udp(PullerState& p) {
  struct InFlight {
    uint64_t seq = 0;
    uint32_t count = 0;
    uint32_t have = 0;
    std::vector<std::byte> frame;
    std::vector<bool> seen;
  };
  // At most two messages being reassembled; older incomplete ones are
  // discarded as lost.
  std::deque<InFlight> window;
  std::vector<std::byte> dgram(kUdpChunkBytes + kChunkHeaderBytes + 64);

  while (!p.stop.load(std::memory_order_relaxed)) {
    if (!net::wait_readable(p.udp.fd.get(),
                            monotonic_now() + std::chrono::milliseconds(200)))
      continue;
    ssize_t n = ::recv(p.udp.fd.get(), dgram.data(), dgram.size(), 0);
    if (n <= 0) continue;
    ChunkHeader ch;
    try {
      ch = parse_chunk_header({dgram.data(), static_cast<size_t>(n)});
    } catch (const TransportError&) {
      continue;  // stray datagram
    }

    auto it = std::find_if(window.begin(), window.end(),
                           [&](const InFlight& f) { return f.seq == ch.seq; });
    if (it == window.end()) {
      if (window.size() == 2) {
        // No retransmission: the oldest incomplete message is gone for good.
        lost.fetch_add(1, std::memory_order_relaxed);
        window.pop_front();
      }
      InFlight f;
      f.seq = ch.seq;
      f.count = ch.count;
      f.frame.resize(static_cast<size_t>(ch.count - 1) * kUdpChunkBytes + ch.len);
      f.seen.assign(ch.count, false);
      window.push_back(std::move(f));
      it = window.end() - 1;
      if (ch.index + 1 != ch.count)  // tail chunk defines the exact length
        it->frame.resize(static_cast<size_t>(ch.count) * kUdpChunkBytes);
    }
    InFlight& f = *it;
    if (ch.index >= f.count || f.seen[ch.index]) continue;
    f.seen[ch.index] = true;
    f.have += 1;
    size_t begin = static_cast<size_t>(ch.index) * kUdpChunkBytes;
    if (ch.index + 1 == f.count) f.frame.resize(begin + ch.len);
    std::memcpy(f.frame.data() + begin, dgram.data() + kChunkHeaderBytes, ch.len);

    if (f.have == f.count) {
      payload_copy_counter().fetch_add(1, std::memory_order_relaxed);  // reassembly
      try {
        auto parsed = parse_frame(f.frame);
        std::shared_ptr<std::byte[]> buf(new std::byte[parsed.payload.size()]);
        std::memcpy(buf.get(), parsed.payload.data(), parsed.payload.size());
        payload_copy_counter().fetch_add(1, std::memory_order_relaxed);
        p.consumed.fetch_add(1, std::memory_order_relaxed);
        MessageView v;
        v.recv_ns = monotonic_now_ns();
        v.seq = parsed.header.seq;
        v.stamp_ns = parsed.header.stamp_ns;
        v.publisher_id = p.publisher_id;
        v.payload = {buf.get(), parsed.payload.size()};
        v.owned = std::move(buf);
        if (!channel.push(std::move(v), p.stop)) break;
      } catch (const TransportError&) {
        lost.fetch_add(1, std::memory_order_relaxed);
      }
      // Chunks never arrive after newer messages completed; anything older
      // and still incomplete is gone for good.
      uint64_t done_seq = ch.seq;
      for (auto w = window.begin(); w != window.end();) {
        if (w->seq == done_seq) {
          w = window.erase(w);
        } else if (w->seq < done_seq && w->have < w->count) {
          lost.fetch_add(1, std::memory_order_relaxed);
          w = window.erase(w);
        } else {
          ++w;
        }
      }
    }
  }
  puller_done();
}

Subscription ShmEngine::subscribe(const std::string& topic, TransportKind kind,
                                  MonotonicTime deadline, bool nodelay) {
  if (!valid_topic(topic)) throw TransportError("invalid topic name: " + topic);

  std::vector<PublisherInfo> pubs;
  for (;;) {
    pubs = impl_->registry->lookup(topic);
    std::erase_if(pubs, [&](const PublisherInfo& p) {
      return p.transport_kind != static_cast<uint8_t>(kind);
    });
    if (!pubs.empty()) break;
    if (monotonic_now() >= deadline)
      throw TransportError("no publisher for topic '" + topic + "' within deadline");
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }

  if (kind == TransportKind::kShm || kind == TransportKind::kHybrid)
    impl_->ensure_segment(cfg_);

  Subscription sub;
  sub.impl_ = std::make_unique<Subscription::Impl>();
  sub.impl_->topic = topic;

  for (const auto& pub : pubs) {
    auto p = std::make_unique<PullerState>();
    p->publisher_id = pub.publisher_id;
    p->kind = kind;
    p->control_fd = net::uds_connect(pub.endpoint, deadline);

    net::UdpSocket udp;
    if (kind == TransportKind::kUdp) udp = net::udp_bind_loopback();

    Encoder e;
    e.u8(static_cast<uint8_t>(Verb::kSubscribe));
    e.str(topic);
    e.u8(static_cast<uint8_t>(kind));
    e.str(cfg_.node_name);
    e.u16(kind == TransportKind::kUdp ? udp.port : 0);
    e.u8(nodelay ? 1 : 0);
    net::send_frame(p->control_fd.get(), e.view());
    auto resp = net::recv_frame(p->control_fd.get(), net::watchdog_deadline());
    if (!resp) throw TransportError("publisher closed control connection");
    Decoder d(*resp);
    d.u8();  // verb
    if (static_cast<Status>(d.u8()) != Status::kOk)
      throw TransportError("SUBSCRIBE rejected: " + d.str());
    d.u32();  // publisher id echo
    d.u32();  // subscriber index

    switch (kind) {
      case TransportKind::kShm: {
        std::string seg_name = d.str();
        if (seg_name != cfg_.segment_name)
          throw TransportError("segment mismatch: publisher uses '" + seg_name +
                               "', this process uses '" + cfg_.segment_name + "'");
        std::string qname = d.str();
        p->seg = segment();
        p->queue = ShmQueue::open(*p->seg, qname);
        break;
      }
      case TransportKind::kTcp: {
        uint16_t port = d.u16();
        p->data_fd = net::tcp_connect_loopback(port, deadline);
        net::set_nodelay(p->data_fd.get(), nodelay);
        break;
      }
      case TransportKind::kHybrid: {
        uint16_t port = d.u16();
        std::string seg_name = d.str();
        if (seg_name != cfg_.segment_name)
          throw TransportError("segment mismatch: publisher uses '" + seg_name +
                               "', this process uses '" + cfg_.segment_name + "'");
        p->seg = segment();
        p->data_fd = net::tcp_connect_loopback(port, deadline);
        net::set_nodelay(p->data_fd.get(), true);
        break;
      }
      case TransportKind::kUds: {
        std::string path = d.str();
        p->data_fd = net::uds_connect(path, deadline);
        break;
      }
      case TransportKind::kUdp:
        p->udp = std::move(udp);
        break;
    }
    sub.impl_->pullers.push_back(std::move(p));
  }

  for (auto& p : sub.impl_->pullers) {
    PullerState* ps = p.get();
    Subscription::Impl* si = sub.impl_.get();
    switch (kind) {
      case TransportKind::kShm:
        ps->worker = std::thread([si, ps] { si->run_shm(*ps); });
        break;
      case TransportKind::kUdp:
        ps->worker = std::thread([si, ps] { si->run_udp(*ps); });
        break;
      default:
        ps->worker = std::thread([si, ps] { si->run_stream(*ps); });
        break;
    }
  }
  return sub;
}

}  // namespace shmbus
