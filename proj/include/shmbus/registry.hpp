#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "shmbus/sync.hpp"

namespace shmbus {

// One registry process per benchmark run plays the metadata-only role of a
// ROS master: publishers register their control endpoints per topic,
// subscribers look them up, and a named token barrier lets the harness
// enforce connection order. Message payloads never touch the registry.
//
// The service listens on a local stream socket at a well-known path,
// overridable via the SHMBUS_REGISTRY environment variable.

struct PublisherInfo {
  std::string endpoint;  // control socket path of the publisher's engine
  uint8_t transport_kind;
  uint32_t publisher_id;  // registration order, globally unique per registry
};

std::string default_registry_path();

class RegistryServer {
 public:
  RegistryServer();
  ~RegistryServer();
  RegistryServer(const RegistryServer&) = delete;
  RegistryServer& operator=(const RegistryServer&) = delete;

  void start(const std::string& socket_path);
  void stop();
  bool running() const;
  const std::string& socket_path() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

class RegistryClient {
 public:
  explicit RegistryClient(const std::string& socket_path,
                          MonotonicTime connect_deadline);
  ~RegistryClient();
  RegistryClient(RegistryClient&&) noexcept;
  RegistryClient& operator=(RegistryClient&&) noexcept;

  // Registers (topic, endpoint); idempotent for the same pair. Returns the
  // publisher id assigned at first registration.
  uint32_t register_publisher(const std::string& topic, const std::string& endpoint,
                              uint8_t transport_kind);

  // All publishers for the topic, in registration order. Empty if unknown.
  std::vector<PublisherInfo> lookup(const std::string& topic);

  // Blocks until the barrier token for `key` reaches `index` (tokens start
  // at 0 and only advance). Returns false on timeout.
  bool barrier_wait(const std::string& key, uint32_t index, MonotonicTime deadline);
  void barrier_advance(const std::string& key);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace shmbus
