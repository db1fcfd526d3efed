#pragma once

// Internals shared by the GBDT protocol drivers (horizontal and vertical).

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "fedbench/engine.hpp"
#include "fedbench/gbdt.hpp"
#include "fedbench/transport.hpp"
#include "fedbench/wire.hpp"

namespace fedbench::protocol::detail {

struct PendingNode {
    uint32_t id = 0;
    uint32_t depth = 0;
    double grad_sum = 0.0;
    double hess_sum = 0.0;
    bool need_totals = false;  // root: totals come from its histogram
};

struct NodeDecision {
    uint32_t node_id = 0;
    bool is_leaf = false;
    double leaf_weight = 0.0;
    uint32_t feature = 0;
    uint32_t bin = 0;
    double split_value = 0.0;
    uint32_t left_id = 0;
    uint32_t right_id = 0;
};

using HistRequest = std::function<std::map<uint32_t, gbdt::Histogram>(
    std::span<const PendingNode>)>;
using DecisionPublish =
    std::function<void(std::span<const NodeDecision>, bool tree_complete)>;

// Level-wise growth: histograms are requested only for nodes that may
// still split (depth < max_depth); deeper nodes become leaves from the
// (G,H) totals carried down from their parent's split.
gbdt::Tree grow_tree(const engine::GbdtSpec& spec,
                     const HistRequest& request_hists,
                     const DecisionPublish& publish);

std::vector<uint8_t> encode_decisions(std::span<const NodeDecision> decisions,
                                      bool tree_complete);
std::pair<std::vector<NodeDecision>, bool> decode_decisions(
    std::span<const uint8_t> payload);

std::vector<uint8_t> encode_edges(const gbdt::BinEdges& edges);
gbdt::BinEdges decode_edges(std::span<const uint8_t> payload);

inline transport::Frame make_frame(transport::MsgType type, uint32_t round,
                                   transport::PeerId sender,
                                   std::vector<uint8_t> payload) {
    transport::Frame f;
    f.msg_type = type;
    f.round = round;
    f.sender = sender;
    f.payload = std::move(payload);
    return f;
}

inline transport::PeerId client_peer(uint32_t client_id) {
    return {transport::Role::client, static_cast<uint16_t>(client_id + 1)};
}

inline constexpr transport::PeerId kAggregatorPeer{transport::Role::aggregator,
                                                   0};

} // namespace fedbench::protocol::detail
