#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "fedbench/eventlog.hpp"

namespace fedbench::transport {

constexpr uint8_t kProtocolVersion = 1;
constexpr size_t kHeaderBytes = 11;  // 4B length + 1B type + 4B round + 2B sender
constexpr size_t kDefaultMaxPayload = 256ull << 20;

enum class MsgType : uint8_t {
    register_peer = 0,
    round_start = 1,
    model_broadcast = 2,
    client_update = 3,
    histogram = 4,
    residuals = 5,
    split_decision = 6,
    shutdown = 7,
};

enum class Role : uint8_t { aggregator = 0, client = 1 };

struct PeerId {
    Role role = Role::aggregator;
    uint16_t index = 0;  // aggregator is always index 0

    uint16_t encode() const;
    static PeerId decode(uint16_t wire);
    bool operator==(const PeerId&) const = default;
};

struct Frame {
    MsgType msg_type = MsgType::register_peer;
    uint32_t round = 0;
    PeerId sender;
    std::vector<uint8_t> payload;

    size_t wire_size() const { return kHeaderBytes + payload.size(); }
    bool operator==(const Frame&) const = default;
};

// Encodes the fixed wire format: 4-byte big-endian payload length, 1-byte
// msg_type, 4-byte big-endian round, 2-byte big-endian sender, payload.
std::vector<uint8_t> encode_frame(const Frame& frame);
Frame decode_frame(const uint8_t* data, size_t len,
                   size_t max_payload = kDefaultMaxPayload);

// Running totals over every send and recv call; the analyzer's byte
// accounting is checked against these in tests.
struct ByteCounter {
    std::atomic<uint64_t> bytes{0};
    std::atomic<uint64_t> frames{0};
    void add(size_t n) {
        bytes.fetch_add(n, std::memory_order_relaxed);
        frames.fetch_add(1, std::memory_order_relaxed);
    }
};

// One logical peer link. Sends on one endpoint are serialized; every
// send/recv appends a communication event ("communication.<peer>.<round>"
// with {"byte": n}) when a logger is attached.
class Endpoint {
public:
    virtual ~Endpoint() = default;

    virtual size_t send(const Frame& frame) = 0;
    virtual std::pair<Frame, size_t> recv() = 0;
    virtual void close() = 0;

    // Identity of the peer on the other side of this link.
    const PeerId& peer() const { return peer_; }

    void attach_logger(eventlog::Logger* logger) { logger_ = logger; }
    void attach_counter(ByteCounter* counter) { counter_ = counter; }

protected:
    void account(uint32_t round, size_t bytes);

    PeerId peer_;
    eventlog::Logger* logger_ = nullptr;
    ByteCounter* counter_ = nullptr;
};

using EndpointPtr = std::unique_ptr<Endpoint>;

// --- TCP backend ----------------------------------------------------------

class TcpListener {
public:
    // bind_addr is "host:port"; port 0 picks a free port.
    explicit TcpListener(const std::string& bind_addr,
                         PeerId self = {Role::aggregator, 0});
    ~TcpListener();

    uint16_t port() const { return port_; }
    // Accepts one connection and completes the version/peer-id handshake.
    EndpointPtr accept(std::chrono::milliseconds timeout = std::chrono::seconds(30));

private:
    int fd_ = -1;
    uint16_t port_ = 0;
    PeerId self_;
};

// Connects with retry until the deadline, then handshakes.
EndpointPtr tcp_connect(const std::string& addr, PeerId self,
                        std::chrono::milliseconds timeout = std::chrono::seconds(10));

// --- In-process backend ----------------------------------------------------

// Same frame semantics with zero network; used by in_process deployments
// and tests. The hub owns one bidirectional channel per client.
class InProcessHub {
public:
    explicit InProcessHub(int num_clients);

    // Aggregator-side endpoint talking to client `index` (1-based).
    EndpointPtr aggregator_endpoint(uint16_t client_index);
    // Client-side endpoint talking to the aggregator.
    EndpointPtr client_endpoint(uint16_t client_index);

    ByteCounter& counter() { return counter_; }
    // Payload sizes of every frame passed through, in send order.
    std::vector<size_t> payload_sizes() const;
    void record_payload(size_t n);

    struct Queue {
        std::mutex mu;
        std::condition_variable cv;
        std::deque<Frame> items;
        bool closed = false;
    };
    struct Channel {
        Queue to_client;
        Queue to_aggregator;
    };

private:
    std::vector<std::shared_ptr<Channel>> channels_;
    ByteCounter counter_;
    mutable std::mutex sizes_mu_;
    std::vector<size_t> sizes_;
};

} // namespace fedbench::transport
