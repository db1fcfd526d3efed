#include "fedbench/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include "fedbench/errors.hpp"

namespace fedbench::transport {

uint16_t PeerId::encode() const {
    return static_cast<uint16_t>((static_cast<uint16_t>(role) << 15) |
                                 (index & 0x7fff));
}

PeerId PeerId::decode(uint16_t wire) {
    PeerId p;
    p.role = (wire & 0x8000) ? Role::client : Role::aggregator;
    p.index = wire & 0x7fff;
    return p;
}

static void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

static uint32_t get_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
           (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

std::vector<uint8_t> encode_frame(const Frame& frame) {
    if (frame.payload.size() > kDefaultMaxPayload)
        throw FrameTooLarge(std::to_string(frame.payload.size()) + " bytes");
    std::vector<uint8_t> out;
    out.reserve(frame.wire_size());
    put_u32(out, static_cast<uint32_t>(frame.payload.size()));
    out.push_back(static_cast<uint8_t>(frame.msg_type));
    put_u32(out, frame.round);
    uint16_t sender = frame.sender.encode();
    out.push_back(static_cast<uint8_t>(sender >> 8));
    out.push_back(static_cast<uint8_t>(sender));
    out.insert(out.end(), frame.payload.begin(), frame.payload.end());
    return out;
}

Frame decode_frame(const uint8_t* data, size_t len, size_t max_payload) {
    if (len < kHeaderBytes) throw MalformedHeader("short frame");
    uint32_t payload_len = get_u32(data);
    if (payload_len > max_payload)
        throw FrameTooLarge(std::to_string(payload_len) + " bytes");
    if (len != kHeaderBytes + payload_len)
        throw MalformedHeader("length field does not match frame size");
    uint8_t type = data[4];
    if (type > static_cast<uint8_t>(MsgType::shutdown))
        throw MalformedHeader("unknown msg_type " + std::to_string(type));
    Frame f;
    f.msg_type = static_cast<MsgType>(type);
    f.round = get_u32(data + 5);
    f.sender = PeerId::decode(static_cast<uint16_t>((data[9] << 8) | data[10]));
    f.payload.assign(data + kHeaderBytes, data + len);
    return f;
}

void Endpoint::account(uint32_t round, size_t bytes) {
    if (counter_) counter_->add(bytes);
    if (logger_) {
        std::string event = "communication." + std::to_string(peer_.index) +
                            "." + std::to_string(round);
        logger_->emit(event, eventlog::Action::start);
        logger_->emit(event, eventlog::Action::end,
                      {{"byte", eventlog::MetricValue(int64_t(bytes))}});
    }
}

// --- TCP ---------------------------------------------------------------

namespace {

void write_all(int fd, const uint8_t* data, size_t len) {
    size_t off = 0;
    while (off < len) {
        ssize_t n = ::write(fd, data + off, len - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw PeerClosed(std::string("write: ") + std::strerror(errno));
        }
        off += static_cast<size_t>(n);
    }
}

// Returns false on clean EOF at the first byte, throws on mid-message EOF.
bool read_all(int fd, uint8_t* data, size_t len, bool eof_ok_at_start) {
    size_t off = 0;
    while (off < len) {
        ssize_t n = ::read(fd, data + off, len - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw PeerClosed(std::string("read: ") + std::strerror(errno));
        }
        if (n == 0) {
            if (off == 0 && eof_ok_at_start) return false;
            throw PeerClosed("connection closed mid-frame");
        }
        off += static_cast<size_t>(n);
    }
    return true;
}

class TcpEndpoint final : public Endpoint {
public:
    TcpEndpoint(int fd, PeerId self, PeerId peer) : fd_(fd), self_(self) {
        peer_ = peer;
    }
    ~TcpEndpoint() override { close(); }

    size_t send(const Frame& frame) override {
        std::lock_guard<std::mutex> lock(send_mu_);
        if (fd_ < 0) throw PeerClosed("endpoint closed");
        auto wire = encode_frame(frame);
        write_all(fd_, wire.data(), wire.size());
        account(frame.round, wire.size());
        return wire.size();
    }

    std::pair<Frame, size_t> recv() override {
        std::lock_guard<std::mutex> lock(recv_mu_);
        if (fd_ < 0) throw PeerClosed("endpoint closed");
        uint8_t header[kHeaderBytes];
        if (!read_all(fd_, header, kHeaderBytes, true))
            throw PeerClosed("peer closed the connection");
        uint32_t payload_len = get_u32(header);
        if (payload_len > kDefaultMaxPayload)
            throw FrameTooLarge(std::to_string(payload_len) + " bytes");
        std::vector<uint8_t> buf(kHeaderBytes + payload_len);
        std::memcpy(buf.data(), header, kHeaderBytes);
        if (payload_len > 0)
            read_all(fd_, buf.data() + kHeaderBytes, payload_len, false);
        Frame f = decode_frame(buf.data(), buf.size());
        account(f.round, buf.size());
        return {std::move(f), buf.size()};
    }

    void close() override {
        if (fd_ >= 0) {
            ::shutdown(fd_, SHUT_RDWR);
            ::close(fd_);
            fd_ = -1;
        }
    }

private:
    int fd_ = -1;
    PeerId self_;
    std::mutex send_mu_;
    std::mutex recv_mu_;
};

// Handshake: each side sends [version, encoded PeerId] as a raw 3-byte
// preamble before any frame traffic. Handshake bytes are not frames and
// do not enter the byte accounting.
void send_hello(int fd, PeerId self) {
    uint16_t enc = self.encode();
    uint8_t hello[3] = {kProtocolVersion, static_cast<uint8_t>(enc >> 8),
                        static_cast<uint8_t>(enc)};
    write_all(fd, hello, sizeof hello);
}

PeerId recv_hello(int fd) {
    uint8_t hello[3];
    if (!read_all(fd, hello, sizeof hello, true))
        throw PeerClosed("peer closed during handshake");
    if (hello[0] != kProtocolVersion)
        throw VersionMismatch("peer speaks version " + std::to_string(hello[0]) +
                              ", expected " + std::to_string(kProtocolVersion));
    return PeerId::decode(static_cast<uint16_t>((hello[1] << 8) | hello[2]));
}

struct ParsedAddr {
    std::string host;
    uint16_t port = 0;
};

ParsedAddr parse_addr(const std::string& addr) {
    auto colon = addr.rfind(':');
    if (colon == std::string::npos)
        throw BindFailure("address '" + addr + "' is not host:port");
    ParsedAddr out;
    out.host = addr.substr(0, colon);
    out.port = static_cast<uint16_t>(std::stoi(addr.substr(colon + 1)));
    return out;
}

sockaddr_in make_sockaddr(const ParsedAddr& addr) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(addr.port);
    const char* host = addr.host.empty() ? "0.0.0.0" : addr.host.c_str();
    if (::inet_pton(AF_INET, host, &sa.sin_addr) != 1)
        throw BindFailure("cannot parse host '" + addr.host + "'");
    return sa;
}

} // namespace

TcpListener::TcpListener(const std::string& bind_addr, PeerId self)
    : self_(self) {
    auto parsed = parse_addr(bind_addr);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw BindFailure(std::strerror(errno));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in sa = make_sockaddr(parsed);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
        int err = errno;
        ::close(fd_);
        fd_ = -1;
        throw BindFailure(parsed.host + ":" + std::to_string(parsed.port) + ": " +
                          std::strerror(err));
    }
    if (::listen(fd_, 64) != 0) {
        int err = errno;
        ::close(fd_);
        fd_ = -1;
        throw BindFailure(std::strerror(err));
    }
    socklen_t len = sizeof sa;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &len);
    port_ = ntohs(sa.sin_port);
}

TcpListener::~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
}

EndpointPtr TcpListener::accept(std::chrono::milliseconds timeout) {
    pollfd pfd{fd_, POLLIN, 0};
    int rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (rc == 0) throw ConnectTimeout("no peer connected within deadline");
    if (rc < 0) throw BindFailure(std::strerror(errno));
    int client_fd = ::accept(fd_, nullptr, nullptr);
    if (client_fd < 0) throw BindFailure(std::strerror(errno));
    try {
        send_hello(client_fd, self_);
        PeerId peer = recv_hello(client_fd);
        return std::make_unique<TcpEndpoint>(client_fd, self_, peer);
    } catch (...) {
        ::close(client_fd);
        throw;
    }
}

EndpointPtr tcp_connect(const std::string& addr, PeerId self,
                        std::chrono::milliseconds timeout) {
    auto parsed = parse_addr(addr);
    sockaddr_in sa = make_sockaddr(parsed);
    auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw ConnectTimeout(std::strerror(errno));
        if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0) {
            try {
                send_hello(fd, self);
                PeerId peer = recv_hello(fd);
                return std::make_unique<TcpEndpoint>(fd, self, peer);
            } catch (...) {
                ::close(fd);
                throw;
            }
        }
        ::close(fd);
        if (std::chrono::steady_clock::now() >= deadline)
            throw ConnectTimeout("cannot reach " + addr + ": " +
                                 std::strerror(errno));
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
}

// --- In-process -----------------------------------------------------------

namespace {

class InProcessEndpoint final : public Endpoint {
public:
    InProcessEndpoint(InProcessHub* hub,
                      std::shared_ptr<InProcessHub::Channel> channel,
                      bool aggregator_side, PeerId peer)
        : hub_(hub), channel_(std::move(channel)),
          aggregator_side_(aggregator_side) {
        peer_ = peer;
    }
    ~InProcessEndpoint() override { close(); }

    size_t send(const Frame& frame) override {
        if (frame.payload.size() > kDefaultMaxPayload)
            throw FrameTooLarge(std::to_string(frame.payload.size()) + " bytes");
        auto& q = aggregator_side_ ? channel_->to_client : channel_->to_aggregator;
        size_t bytes = frame.wire_size();
        {
            std::lock_guard<std::mutex> lock(q.mu);
            if (q.closed) throw PeerClosed("channel closed");
            q.items.push_back(frame);
        }
        q.cv.notify_one();
        hub_->record_payload(frame.payload.size());
        account(frame.round, bytes);
        return bytes;
    }

    std::pair<Frame, size_t> recv() override {
        auto& q = aggregator_side_ ? channel_->to_aggregator : channel_->to_client;
        Frame f;
        {
            std::unique_lock<std::mutex> lock(q.mu);
            q.cv.wait(lock, [&] { return !q.items.empty() || q.closed; });
            if (q.items.empty()) throw PeerClosed("channel closed");
            f = std::move(q.items.front());
            q.items.pop_front();
        }
        size_t bytes = f.wire_size();
        account(f.round, bytes);
        return {std::move(f), bytes};
    }

    void close() override {
        if (!channel_) return;
        for (auto* q : {&channel_->to_client, &channel_->to_aggregator}) {
            {
                std::lock_guard<std::mutex> lock(q->mu);
                q->closed = true;
            }
            q->cv.notify_all();
        }
    }

private:
    InProcessHub* hub_;
    std::shared_ptr<InProcessHub::Channel> channel_;
    bool aggregator_side_;
};

} // namespace

InProcessHub::InProcessHub(int num_clients) {
    channels_.reserve(static_cast<size_t>(num_clients));
    for (int i = 0; i < num_clients; ++i)
        channels_.push_back(std::make_shared<Channel>());
}

void InProcessHub::record_payload(size_t n) {
    std::lock_guard<std::mutex> lock(sizes_mu_);
    sizes_.push_back(n);
}

std::vector<size_t> InProcessHub::payload_sizes() const {
    std::lock_guard<std::mutex> lock(sizes_mu_);
    return sizes_;
}

EndpointPtr InProcessHub::aggregator_endpoint(uint16_t client_index) {
    auto channel = channels_.at(client_index - 1);
    auto ep = std::make_unique<InProcessEndpoint>(
        this, channel, true, PeerId{Role::client, client_index});
    ep->attach_counter(&counter_);
    return ep;
}

EndpointPtr InProcessHub::client_endpoint(uint16_t client_index) {
    auto channel = channels_.at(client_index - 1);
    auto ep = std::make_unique<InProcessEndpoint>(
        this, channel, false, PeerId{Role::aggregator, 0});
    ep->attach_counter(&counter_);
    return ep;
}

} // namespace fedbench::transport
