#include "shmbus/registry.hpp"

#include <atomic>
#include <thread>

#include "doctest.h"
#include "shmbus/error.hpp"
#include "test_util.hpp"

using namespace shmbus;
using namespace std::chrono_literals;

namespace {

struct RegistryFixture {
  std::string path;
  RegistryServer server;

  RegistryFixture() : path("/tmp/" + testutil::unique_name("reg") + ".sock") {
    server.start(path);
  }

  RegistryClient client() {
    return RegistryClient(path, monotonic_now() + 5s);
  }
};

}  // namespace

TEST_CASE("register then lookup returns the publisher") {
  RegistryFixture fx;
  auto c = fx.client();
  uint32_t id = c.register_publisher("cam0", "/tmp/p1.ctl", 0);
  auto pubs = c.lookup("cam0");
  REQUIRE(pubs.size() == 1);
  CHECK(pubs[0].endpoint == "/tmp/p1.ctl");
  CHECK(pubs[0].publisher_id == id);
}

TEST_CASE("lookup of an unknown topic returns the empty list") {
  RegistryFixture fx;
  auto c = fx.client();
  CHECK(c.lookup("nothing/here").empty());
}

TEST_CASE("duplicate registration is idempotent") {
  RegistryFixture fx;
  auto c = fx.client();
  uint32_t id1 = c.register_publisher("t", "/tmp/a.ctl", 0);
  uint32_t id2 = c.register_publisher("t", "/tmp/a.ctl", 0);
  CHECK(id1 == id2);
  CHECK(c.lookup("t").size() == 1);
}

TEST_CASE("lookup preserves registration order for five publishers") {
  RegistryFixture fx;
  auto c = fx.client();
  for (int i = 0; i < 5; ++i)
    c.register_publisher("multi", "/tmp/p" + std::to_string(i) + ".ctl", 0);
  auto pubs = c.lookup("multi");
  REQUIRE(pubs.size() == 5);
  for (int i = 0; i < 5; ++i)
    CHECK(pubs[i].endpoint == "/tmp/p" + std::to_string(i) + ".ctl");
  for (int i = 1; i < 5; ++i)
    CHECK(pubs[i].publisher_id > pubs[i - 1].publisher_id);
}

TEST_CASE("clients in separate processes share one registry") {
  RegistryFixture fx;
  int rc = testutil::run_in_child([&]() -> int {
    RegistryClient c(fx.path, monotonic_now() + 5s);
    c.register_publisher("xproc", "/tmp/child.ctl", 1);
    return 0;
  });
  REQUIRE(rc == 0);
  auto c = fx.client();
  auto pubs = c.lookup("xproc");
  REQUIRE(pubs.size() == 1);
  CHECK(pubs[0].endpoint == "/tmp/child.ctl");
  CHECK(pubs[0].transport_kind == 1);
}

TEST_CASE("barrier releases waiters strictly in token order") {
  RegistryFixture fx;
  std::atomic<int> released{0};
  std::vector<int> release_order;
  std::mutex order_mu;

  std::vector<std::thread> waiters;
  for (uint32_t k = 1; k <= 3; ++k) {
    waiters.emplace_back([&, k] {
      RegistryClient c(fx.path, monotonic_now() + 5s);
      bool ok = c.barrier_wait("conn", k, monotonic_now() + 10s);
      if (ok) {
        std::lock_guard<std::mutex> g(order_mu);
        release_order.push_back(static_cast<int>(k));
        released.fetch_add(1);
      }
    });
  }

  std::this_thread::sleep_for(100ms);
  CHECK(released.load() == 0);  // nobody through before the token advances

  auto c = fx.client();
  CHECK(c.barrier_wait("conn", 0, monotonic_now() + 1s));  // token 0: immediate
  for (int i = 0; i < 3; ++i) {
    c.barrier_advance("conn");
    std::this_thread::sleep_for(50ms);
    CHECK(released.load() == i + 1);
  }
  for (auto& w : waiters) w.join();
  CHECK(release_order == std::vector<int>{1, 2, 3});
}

TEST_CASE("barrier wait times out when the token never arrives") {
  RegistryFixture fx;
  auto c = fx.client();
  auto t0 = monotonic_now();
  CHECK_FALSE(c.barrier_wait("never", 5, t0 + 100ms));
  CHECK(monotonic_now() - t0 >= 90ms);
}

TEST_CASE("connecting to a missing registry fails after the deadline") {
  CHECK_THROWS_AS(RegistryClient("/tmp/definitely-not-a-registry.sock",
                                 monotonic_now() + 50ms),
                  TransportError);
}
