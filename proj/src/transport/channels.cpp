#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>

#include "pefll/transport/transport.hpp"

namespace pefll::transport {

namespace {

// One direction of an in-memory link, carrying encoded frames.
struct Pipe {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::vector<std::uint8_t>> queue;
  bool closed = false;

  void push(std::vector<std::uint8_t> bytes) {
    {
      std::lock_guard lock(mu);
      if (closed) throw ConnectionLost("loopback peer closed");
      queue.push_back(std::move(bytes));
    }
    cv.notify_one();
  }
  std::vector<std::uint8_t> pop() {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return closed || !queue.empty(); });
    if (queue.empty()) throw ConnectionLost("loopback peer closed");
    auto b = std::move(queue.front());
    queue.pop_front();
    return b;
  }
  void close() {
    {
      std::lock_guard lock(mu);
      closed = true;
    }
    cv.notify_all();
  }
};

class LoopbackChannel : public Channel {
 public:
  LoopbackChannel(std::shared_ptr<Pipe> out, std::shared_ptr<Pipe> in) : out_(std::move(out)), in_(std::move(in)) {}
  ~LoopbackChannel() override { close(); }
  void send(const Frame& f) override { out_->push(encode_frame(f)); }
  Frame recv() override { return decode_frame(in_->pop()); }
  void close() override {
    out_->close();
    in_->close();
  }

 private:
  std::shared_ptr<Pipe> out_, in_;
};

class LoopbackAcceptor : public Acceptor {
 public:
  std::unique_ptr<Channel> connect() {
    auto [server_end, client_end] = loopback_pair();
    {
      std::lock_guard lock(mu_);
      if (closed_) throw ConnectionLost("loopback server closed");
      pending_.push_back(std::move(server_end));
    }
    cv_.notify_one();
    return std::move(client_end);
  }
  std::unique_ptr<Channel> accept() override {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return closed_ || !pending_.empty(); });
    if (pending_.empty()) throw ConnectionLost("loopback server closed");
    auto c = std::move(pending_.front());
    pending_.pop_front();
    return c;
  }
  void close() override {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::unique_ptr<Channel>> pending_;
  bool closed_ = false;
};

class Socket {
 public:
  explicit Socket(int fd = -1) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    reset();
    fd_ = std::exchange(o.fd_, -1);
    return *this;
  }
  ~Socket() { reset(); }
  int get() const { return fd_; }
  void shutdown() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_;
};

sockaddr_in make_addr(const std::string& host, std::uint16_t port) {
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &a.sin_addr) != 1) throw std::invalid_argument("bad IPv4 address '" + host + "'");
  return a;
}

class TcpChannel : public Channel {
 public:
  explicit TcpChannel(Socket s) : sock_(std::move(s)) {
    int one = 1;
    ::setsockopt(sock_.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpChannel() override { close(); }

  void send(const Frame& f) override {
    const auto bytes = encode_frame(f);
    std::size_t off = 0;
    while (off < bytes.size()) {
      const auto n = ::send(sock_.get(), bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw ConnectionLost(std::string("tcp send failed: ") + std::strerror(errno));
      off += std::size_t(n);
    }
  }

  Frame recv() override {
    std::vector<std::uint8_t> buf(kHeaderSize);
    read_exact(buf.data(), kHeaderSize);
    const auto h = decode_header(buf);
    buf.resize(kHeaderSize + h.payload_len);
    read_exact(buf.data() + kHeaderSize, h.payload_len);
    return decode_frame(buf);
  }

  void close() override { sock_.shutdown(); }

 private:
  void read_exact(std::uint8_t* dst, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const auto r = ::recv(sock_.get(), dst + got, n - got, 0);
      if (r < 0 && errno == EINTR) continue;
      if (r == 0) throw ConnectionLost("tcp peer closed the connection");
      if (r < 0) throw ConnectionLost(std::string("tcp recv failed: ") + std::strerror(errno));
      got += std::size_t(r);
    }
  }
  Socket sock_;
};

class TcpAcceptor : public Acceptor {
 public:
  explicit TcpAcceptor(Socket s) : sock_(std::move(s)) {}
  std::unique_ptr<Channel> accept() override {
    for (;;) {
      const int fd = ::accept(sock_.get(), nullptr, nullptr);
      if (fd >= 0) return std::make_unique<TcpChannel>(Socket(fd));
      if (errno != EINTR) throw ConnectionLost(std::string("tcp accept failed: ") + std::strerror(errno));
    }
  }
  void close() override { sock_.shutdown(); }

 private:
  Socket sock_;
};

}  // namespace

std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> loopback_pair() {
  auto a = std::make_shared<Pipe>(), b = std::make_shared<Pipe>();
  return {std::make_unique<LoopbackChannel>(a, b), std::make_unique<LoopbackChannel>(b, a)};
}

std::unique_ptr<Acceptor> tcp_listen(const std::string& host, std::uint16_t port, std::uint16_t* bound_port) {
  Socket s(::socket(AF_INET, SOCK_STREAM, 0));
  if (s.get() < 0) throw ConnectionLost(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(s.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  auto addr = make_addr(host, port);
  if (::bind(s.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw ConnectionLost("bind " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
  if (::listen(s.get(), 128) != 0) throw ConnectionLost(std::string("listen: ") + std::strerror(errno));
  if (bound_port) {
    socklen_t len = sizeof addr;
    ::getsockname(s.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    *bound_port = ntohs(addr.sin_port);
  }
  return std::make_unique<TcpAcceptor>(std::move(s));
}

std::unique_ptr<Channel> tcp_connect(const std::string& host, std::uint16_t port) {
  Socket s(::socket(AF_INET, SOCK_STREAM, 0));
  if (s.get() < 0) throw ConnectionLost(std::string("socket: ") + std::strerror(errno));
  auto addr = make_addr(host, port);
  if (::connect(s.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw ConnectionLost("connect " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
  return std::make_unique<TcpChannel>(std::move(s));
}

Backend make_loopback_backend() {
  auto acc = std::make_unique<LoopbackAcceptor>();
  auto* raw = acc.get();
  return {"loopback", std::move(acc), [raw] { return raw->connect(); }};
}

Backend make_tcp_backend(const std::string& host, std::uint16_t port) {
  std::uint16_t bound = 0;
  auto acc = tcp_listen(host, port, &bound);
  return {"tcp", std::move(acc), [host, bound] { return tcp_connect(host, bound); }};
}

Backend make_backend(const std::string& name) {
  if (name == "loopback") return make_loopback_backend();
  if (name == "tcp") return make_tcp_backend();
  throw std::invalid_argument("unknown transport '" + name + "' (expected loopback|tcp)");
}

}  // namespace pefll::transport
