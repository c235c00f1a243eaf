/*
 * Copyright 2026 The DERM Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Read-only TCP lookup service over a loaded generation.
//
// Every message is a u32 little-endian length followed by that many bytes.
//   request:  kind u8 | id u64 | source u16                      (11 bytes)
//   response: status u8 | dim u32 | dim x f32                    (5 + 4*dim bytes)
// A malformed request gets BAD_REQUEST and the connection stays open.

#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "derm/binary_io.hpp"
#include "derm/error.hpp"
#include "derm/store.hpp"

namespace derm {

enum class LookupStatus : std::uint8_t { kOk = 0, kMissing = 1, kBadRequest = 2 };

inline constexpr std::size_t kRequestSize = 11;
inline constexpr std::uint32_t kMaxFrame = 1 << 16;

namespace detail {

inline bool send_all(int fd, const std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) return false;
    data += w;
    n -= static_cast<std::size_t>(w);
  }
  return true;
}

inline bool recv_all(int fd, std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t r = ::recv(fd, data, n, 0);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return false;
    data += r;
    n -= static_cast<std::size_t>(r);
  }
  return true;
}

inline bool send_frame(int fd, std::span<const std::uint8_t> payload) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(payload.size()));
  w.raw(payload);
  return send_all(fd, w.bytes().data(), w.bytes().size());
}

// Reads one frame. Returns false on EOF or on a frame too large to skip.
inline bool recv_frame(int fd, Bytes& out, bool& oversized) {
  std::uint8_t len_bytes[4];
  if (!recv_all(fd, len_bytes, 4)) return false;
  const std::uint32_t len = ByteReader(len_bytes).u32();
  oversized = len > kMaxFrame;
  if (oversized) return false;
  out.resize(len);
  return len == 0 || recv_all(fd, out.data(), len);
}

inline std::pair<std::string, std::uint16_t> split_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) {
    fail(ErrorCode::kBindFailure, "address '" + address + "' is not host:port");
  }
  const std::string host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  char* end = nullptr;
  const long p = std::strtol(port.c_str(), &end, 10);
  if (port.empty() || *end != '\0' || p < 0 || p > 65535) {
    fail(ErrorCode::kBindFailure, "bad port in '" + address + "'");
  }
  return {host, static_cast<std::uint16_t>(p)};
}

inline sockaddr_in resolve_ipv4(const std::string& host, std::uint16_t port, ErrorCode code) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  const std::string h = host.empty() || host == "localhost" ? "127.0.0.1" : host;
  if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
    fail(code, "cannot parse IPv4 address '" + host + "'");
  }
  return addr;
}

}  // namespace detail

/// Builds the response payload for one request payload.
inline Bytes handle_request(const StoreGeneration& gen, std::span<const std::uint8_t> request) {
  ByteWriter w;
  if (request.size() != kRequestSize || request[0] > 1) {
    w.u8(static_cast<std::uint8_t>(LookupStatus::kBadRequest));
    w.u32(0);
    return w.take();
  }
  ByteReader r(request);
  StoreKey key;
  key.kind = static_cast<EntityKind>(r.u8());
  key.id = r.u64();
  key.source = r.u16();
  const auto values = gen.lookup_raw(key);
  if (!gen.contains(key)) {
    w.u8(static_cast<std::uint8_t>(LookupStatus::kMissing));
    w.u32(0);
    return w.take();
  }
  w.u8(static_cast<std::uint8_t>(LookupStatus::kOk));
  w.u32(static_cast<std::uint32_t>(values.size()));
  for (float f : values) w.f32(f);
  return w.take();
}

inline Bytes encode_request(const StoreKey& key) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(key.kind));
  w.u64(key.id);
  w.u16(key.source);
  return w.take();
}

/// Serves one generation until destroyed. Thread per connection.
class EmbeddingServer {
 public:
  EmbeddingServer(std::shared_ptr<const StoreGeneration> gen, const std::string& bind_address)
      : gen_(std::move(gen)) {
    const auto [host, port] = detail::split_address(bind_address);
    const sockaddr_in addr = detail::resolve_ipv4(host, port, ErrorCode::kBindFailure);
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) fail(ErrorCode::kBindFailure, std::strerror(errno));
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(listen_fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listen_fd_, 64) != 0) {
      const std::string why = std::strerror(errno);
      ::close(listen_fd_);
      fail(ErrorCode::kBindFailure, "cannot bind " + bind_address + ": " + why);
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  EmbeddingServer(const EmbeddingServer&) = delete;
  EmbeddingServer& operator=(const EmbeddingServer&) = delete;

  ~EmbeddingServer() { stop(); }

  std::uint16_t port() const { return port_; }

  void stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
  }

 private:
  void accept_loop() {
    while (!stopping_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        return;
      }
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      std::lock_guard<std::mutex> lock(mu_);
      if (stopping_) {
        ::close(fd);
        return;
      }
      client_fds_.push_back(fd);
      workers_.emplace_back([this, fd] { serve_connection(fd); });
    }
  }

  void serve_connection(int fd) {
    Bytes request;
    bool oversized = false;
    while (detail::recv_frame(fd, request, oversized)) {
      if (!detail::send_frame(fd, handle_request(*gen_, request))) break;
    }
    if (oversized) {
      ByteWriter w;
      w.u8(static_cast<std::uint8_t>(LookupStatus::kBadRequest));
      w.u32(0);
      detail::send_frame(fd, w.bytes());
    }
    std::lock_guard<std::mutex> lock(mu_);
    client_fds_.erase(std::find(client_fds_.begin(), client_fds_.end(), fd));
    ::close(fd);
  }

  std::shared_ptr<const StoreGeneration> gen_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::vector<int> client_fds_;
  std::vector<std::thread> workers_;
};

struct LookupResponse {
  LookupStatus status = LookupStatus::kBadRequest;
  std::vector<float> values;
};

/// Blocking client holding one connection.
class EmbeddingClient {
 public:
  EmbeddingClient(const std::string& host, std::uint16_t port) {
    const sockaddr_in addr = detail::resolve_ipv4(host, port, ErrorCode::kIoFailure);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0 || ::connect(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
      const std::string why = std::strerror(errno);
      if (fd_ >= 0) ::close(fd_);
      fail(ErrorCode::kIoFailure, "cannot connect to " + host + ":" + std::to_string(port) +
                                      ": " + why);
    }
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  EmbeddingClient(const EmbeddingClient&) = delete;
  EmbeddingClient& operator=(const EmbeddingClient&) = delete;
  ~EmbeddingClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  LookupResponse query(const StoreKey& key) { return send_raw(encode_request(key)); }

  // Sends an arbitrary payload as one frame.
  LookupResponse send_raw(std::span<const std::uint8_t> payload) {
    if (!detail::send_frame(fd_, payload)) fail(ErrorCode::kIoFailure, "send failed");
    Bytes frame;
    bool oversized = false;
    if (!detail::recv_frame(fd_, frame, oversized)) {
      fail(ErrorCode::kIoFailure, "connection closed by server");
    }
    ByteReader r(frame, ErrorCode::kIoFailure);
    LookupResponse out;
    out.status = static_cast<LookupStatus>(r.u8());
    out.values.resize(r.u32());
    for (float& f : out.values) f = r.f32();
    r.expect_done();
    return out;
  }

 private:
  int fd_ = -1;
};

}  // namespace derm
