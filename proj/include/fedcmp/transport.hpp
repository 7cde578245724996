// Copyright 2026 The fedcmp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <condition_variable>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "fedcmp/errors.hpp"
#include "fedcmp/wire.hpp"

namespace fedcmp {

using Clock = std::chrono::steady_clock;

// Message accounting kept by every transport; the protocol contract is
// exactly two uploads per site and one broadcast per session.
struct TransportCounters {
  std::map<int, int> round1_uploads;
  std::map<int, int> round2_uploads;
  int broadcasts = 0;
};

class CoordinatorEndpoint {
 public:
  virtual ~CoordinatorEndpoint() = default;
  // Blocks until `expected` distinct sites have delivered a message of the
  // given round ("round1"/"round2") or the deadline passes (SessionAborted).
  virtual std::map<int, std::string> collect(const std::string& round, int expected,
                                             Clock::time_point deadline) = 0;
  virtual void publish_broadcast(const std::string& bytes) = 0;
  virtual TransportCounters counters() const = 0;
};

class SiteEndpoint {
 public:
  virtual ~SiteEndpoint() = default;
  // Uploads the round-1 message and blocks until the broadcast arrives.
  virtual std::string exchange_round1(int site, const std::string& bytes,
                                      Clock::time_point deadline) = 0;
  virtual void send_round2(int site, const std::string& bytes, Clock::time_point deadline) = 0;
};

namespace transport_detail {

inline std::string missing_sites(const std::map<int, std::string>& have, int expected) {
  std::string out;
  for (int s = 1; s <= expected; ++s) {
    if (!have.count(s)) {
      if (!out.empty()) out += ",";
      out += std::to_string(s);
    }
  }
  return out;
}

}  // namespace transport_detail

// ---------------------------------------------------------------------------
// In-process channels: a shared bus between coordinator and site threads.
// ---------------------------------------------------------------------------
class InProcessBus {
  struct State {
    std::mutex mutex;
    std::condition_variable cv;
    std::map<int, std::string> round1, round2;
    std::string broadcast;
    bool aborted = false;
    TransportCounters counters;
  };

 public:
  InProcessBus() : state_(std::make_shared<State>()) {}

  class Coordinator : public CoordinatorEndpoint {
   public:
    explicit Coordinator(std::shared_ptr<State> s) : state_(std::move(s)) {}
    std::map<int, std::string> collect(const std::string& round, int expected,
                                       Clock::time_point deadline) override {
      std::unique_lock lock(state_->mutex);
      auto& box = round == "round1" ? state_->round1 : state_->round2;
      if (!state_->cv.wait_until(lock, deadline,
                                 [&] { return static_cast<int>(box.size()) >= expected; })) {
        state_->aborted = true;
        state_->cv.notify_all();
        throw SessionAborted("in-process " + round + " timed out; missing sites " +
                             transport_detail::missing_sites(box, expected));
      }
      return box;
    }
    void publish_broadcast(const std::string& bytes) override {
      std::lock_guard lock(state_->mutex);
      state_->broadcast = bytes;
      ++state_->counters.broadcasts;
      state_->cv.notify_all();
    }
    TransportCounters counters() const override {
      std::lock_guard lock(state_->mutex);
      return state_->counters;
    }

   private:
    std::shared_ptr<State> state_;
  };

  class Site : public SiteEndpoint {
   public:
    explicit Site(std::shared_ptr<State> s) : state_(std::move(s)) {}
    std::string exchange_round1(int site, const std::string& bytes,
                                Clock::time_point deadline) override {
      std::unique_lock lock(state_->mutex);
      state_->round1[site] = bytes;
      ++state_->counters.round1_uploads[site];
      state_->cv.notify_all();
      if (!state_->cv.wait_until(lock, deadline,
                                 [&] { return !state_->broadcast.empty() || state_->aborted; }))
        throw SessionAborted("site " + std::to_string(site) + ": broadcast never arrived");
      if (state_->aborted) throw SessionAborted("site " + std::to_string(site) + ": session aborted");
      return state_->broadcast;
    }
    void send_round2(int site, const std::string& bytes, Clock::time_point) override {
      std::lock_guard lock(state_->mutex);
      if (state_->aborted) throw SessionAborted("site " + std::to_string(site) + ": session aborted");
      state_->round2[site] = bytes;
      ++state_->counters.round2_uploads[site];
      state_->cv.notify_all();
    }

   private:
    std::shared_ptr<State> state_;
  };

  std::unique_ptr<CoordinatorEndpoint> coordinator() {
    return std::make_unique<Coordinator>(state_);
  }
  std::unique_ptr<SiteEndpoint> site() { return std::make_unique<Site>(state_); }

 private:
  std::shared_ptr<State> state_;
};

// ---------------------------------------------------------------------------
// Directory exchange: every message is a file under the session directory,
//   <root>/round1/site<k>.json, <root>/broadcast.json, <root>/round2/site<k>.json
// Files are written to a staging name and renamed, so readers never observe
// partial messages. Suits air-gapped review workflows; polling keeps it live.
// ---------------------------------------------------------------------------
class DirectoryBus {
 public:
  explicit DirectoryBus(std::filesystem::path root) : root_(std::move(root)) {
    namespace fs = std::filesystem;
    fs::create_directories(root_ / "round1");
    fs::create_directories(root_ / "round2");
    fs::create_directories(root_ / ".staging");
  }

  const std::filesystem::path& root() const { return root_; }

  static void write_atomic(const std::filesystem::path& root, const std::filesystem::path& final_path,
                           const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path tmp = root / ".staging" / (final_path.filename().string() + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("directory transport: cannot write " + tmp.string());
      out << bytes;
    }
    fs::rename(tmp, final_path);
  }

  static std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("directory transport: cannot read " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  class Coordinator : public CoordinatorEndpoint {
   public:
    explicit Coordinator(std::filesystem::path root) : root_(std::move(root)) {}
    std::map<int, std::string> collect(const std::string& round, int expected,
                                       Clock::time_point deadline) override {
      namespace fs = std::filesystem;
      const fs::path dir = root_ / round;
      std::map<int, std::string> out;
      for (;;) {
        for (int s = 1; s <= expected; ++s) {
          if (out.count(s)) continue;
          const fs::path file = dir / ("site" + std::to_string(s) + ".json");
          if (fs::exists(file)) {
            out[s] = read_file(file);
            auto& counter = round == "round1" ? counters_.round1_uploads : counters_.round2_uploads;
            ++counter[s];
          }
        }
        if (static_cast<int>(out.size()) >= expected) return out;
        if (Clock::now() >= deadline)
          throw SessionAborted("directory " + round + " timed out; missing sites " +
                               transport_detail::missing_sites(out, expected));
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
    }
    void publish_broadcast(const std::string& bytes) override {
      write_atomic(root_, root_ / "broadcast.json", bytes);
      ++counters_.broadcasts;
    }
    TransportCounters counters() const override { return counters_; }

   private:
    std::filesystem::path root_;
    TransportCounters counters_;
  };

  class Site : public SiteEndpoint {
   public:
    explicit Site(std::filesystem::path root) : root_(std::move(root)) {}
    std::string exchange_round1(int site, const std::string& bytes,
                                Clock::time_point deadline) override {
      namespace fs = std::filesystem;
      write_atomic(root_, root_ / "round1" / ("site" + std::to_string(site) + ".json"), bytes);
      const fs::path broadcast = root_ / "broadcast.json";
      while (!fs::exists(broadcast)) {
        if (Clock::now() >= deadline)
          throw SessionAborted("site " + std::to_string(site) + ": broadcast never arrived");
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
      return read_file(broadcast);
    }
    void send_round2(int site, const std::string& bytes, Clock::time_point) override {
      write_atomic(root_, root_ / "round2" / ("site" + std::to_string(site) + ".json"), bytes);
    }

   private:
    std::filesystem::path root_;
  };

  std::unique_ptr<CoordinatorEndpoint> coordinator() {
    return std::make_unique<Coordinator>(root_);
  }
  std::unique_ptr<SiteEndpoint> site() { return std::make_unique<Site>(root_); }

 private:
  std::filesystem::path root_;
};

// ---------------------------------------------------------------------------
// Length-delimited TCP: 4-byte big-endian frame length, then the message.
// Round 1 keeps the site connection open until the broadcast is written
// back; round 2 is upload-then-ack. One round trip per round per site.
// ---------------------------------------------------------------------------
namespace transport_detail {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Fd& operator=(Fd&& o) noexcept {
    reset();
    fd_ = o.fd_;
    o.fd_ = -1;
    return *this;
  }
  ~Fd() { reset(); }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  int get() const { return fd_; }
  bool valid() const { return fd_ >= 0; }

 private:
  int fd_ = -1;
};

inline int remaining_ms(Clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
  return std::max<long>(0, left.count()) > INT32_MAX ? INT32_MAX : static_cast<int>(std::max<long>(0, left.count()));
}

inline void wait_readable(int fd, Clock::time_point deadline, const std::string& what) {
  pollfd p{fd, POLLIN, 0};
  const int rc = ::poll(&p, 1, remaining_ms(deadline));
  if (rc == 0) throw SessionAborted("tcp: timeout waiting for " + what);
  if (rc < 0) throw IoError("tcp: poll failed for " + what);
}

inline void read_exact(int fd, char* buf, std::size_t len, Clock::time_point deadline,
                       const std::string& what) {
  std::size_t got = 0;
  while (got < len) {
    wait_readable(fd, deadline, what);
    const ssize_t rc = ::recv(fd, buf + got, len - got, 0);
    if (rc == 0) throw SessionAborted("tcp: connection closed while reading " + what);
    if (rc < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw IoError("tcp: recv failed for " + what);
    }
    got += static_cast<std::size_t>(rc);
  }
}

inline void write_all(int fd, const char* buf, std::size_t len, const std::string& what) {
  std::size_t sent = 0;
  while (sent < len) {
    const ssize_t rc = ::send(fd, buf + sent, len - sent, MSG_NOSIGNAL);
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw IoError("tcp: send failed for " + what);
    }
    sent += static_cast<std::size_t>(rc);
  }
}

inline void write_frame(int fd, const std::string& bytes, const std::string& what) {
  const std::uint32_t len = htonl(static_cast<std::uint32_t>(bytes.size()));
  char header[4];
  std::memcpy(header, &len, 4);
  write_all(fd, header, 4, what);
  write_all(fd, bytes.data(), bytes.size(), what);
}

inline std::string read_frame(int fd, Clock::time_point deadline, const std::string& what) {
  char header[4];
  read_exact(fd, header, 4, deadline, what);
  std::uint32_t len = 0;
  std::memcpy(&len, header, 4);
  len = ntohl(len);
  if (len > (64u << 20)) throw SchemaViolation("tcp: frame too large");
  std::string bytes(len, '\0');
  read_exact(fd, bytes.data(), len, deadline, what);
  return bytes;
}

}  // namespace transport_detail

class TcpCoordinatorEndpoint : public CoordinatorEndpoint {
 public:
  explicit TcpCoordinatorEndpoint(std::uint16_t port = 0) {
    listener_ = transport_detail::Fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listener_.valid()) throw IoError("tcp: cannot create listener socket");
    const int one = 1;
    ::setsockopt(listener_.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listener_.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
      throw IoError("tcp: bind failed");
    if (::listen(listener_.get(), 64) != 0) throw IoError("tcp: listen failed");
    socklen_t len = sizeof addr;
    ::getsockname(listener_.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  std::uint16_t port() const { return port_; }

  std::map<int, std::string> collect(const std::string& round, int expected,
                                     Clock::time_point deadline) override {
    std::map<int, std::string> out;
    while (static_cast<int>(out.size()) < expected) {
      if (Clock::now() >= deadline)
        throw SessionAborted("tcp " + round + " timed out; missing sites " +
                             transport_detail::missing_sites(out, expected));
      pollfd p{listener_.get(), POLLIN, 0};
      const int rc = ::poll(&p, 1, std::min(100, transport_detail::remaining_ms(deadline)));
      if (rc <= 0) continue;
      transport_detail::Fd conn(::accept(listener_.get(), nullptr, nullptr));
      if (!conn.valid()) continue;
      const std::string bytes = transport_detail::read_frame(conn.get(), deadline, round);
      const auto [site, type] = peek_envelope(bytes);
      if (type != round)
        throw SchemaViolation("tcp: expected " + round + " message, got '" + type + "'");
      if (out.count(site)) throw SchemaViolation("tcp: duplicate upload from site " + std::to_string(site));
      out[site] = bytes;
      if (round == "round1") {
        ++counters_.round1_uploads[site];
        round1_conns_[site] = std::move(conn);  // broadcast goes back on this socket
      } else {
        ++counters_.round2_uploads[site];
        transport_detail::write_frame(conn.get(), ack_, "ack");
      }
    }
    return out;
  }

  void publish_broadcast(const std::string& bytes) override {
    for (auto& [site, conn] : round1_conns_)
      transport_detail::write_frame(conn.get(), bytes, "broadcast");
    round1_conns_.clear();
    ++counters_.broadcasts;
  }

  TransportCounters counters() const override { return counters_; }

 private:
  transport_detail::Fd listener_;
  std::uint16_t port_ = 0;
  std::map<int, transport_detail::Fd> round1_conns_;
  TransportCounters counters_;
  std::string ack_ = std::string("{\"schema\":\"") + kSchemaTag + "\",\"type\":\"ack\"}\n";
};

class TcpSiteEndpoint : public SiteEndpoint {
 public:
  TcpSiteEndpoint(std::string host, std::uint16_t port) : host_(std::move(host)), port_(port) {}

  std::string exchange_round1(int site, const std::string& bytes,
                              Clock::time_point deadline) override {
    transport_detail::Fd conn = connect(deadline);
    transport_detail::write_frame(conn.get(), bytes, "round1 upload");
    return transport_detail::read_frame(conn.get(), deadline,
                                        "broadcast at site " + std::to_string(site));
  }

  void send_round2(int site, const std::string& bytes, Clock::time_point deadline) override {
    transport_detail::Fd conn = connect(deadline);
    transport_detail::write_frame(conn.get(), bytes, "round2 upload");
    (void)transport_detail::read_frame(conn.get(), deadline, "ack at site " + std::to_string(site));
  }

 private:
  transport_detail::Fd connect(Clock::time_point deadline) {
    // Retry until the coordinator is listening or the deadline passes.
    for (;;) {
      transport_detail::Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
      if (!fd.valid()) throw IoError("tcp: cannot create socket");
      sockaddr_in addr{};
      addr.sin_family = AF_INET;
      addr.sin_port = htons(port_);
      if (::inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1)
        throw ConfigError("tcp: bad host '" + host_ + "'");
      if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) return fd;
      if (Clock::now() >= deadline) throw SessionAborted("tcp: cannot reach coordinator");
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }

  std::string host_;
  std::uint16_t port_;
};

}  // namespace fedcmp
