#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "fedbench/errors.hpp"
#include "fedbench/protocol.hpp"
#include "fedbench/util.hpp"
#include "fedbench/wire.hpp"
#include "protocol_detail.hpp"

namespace fedbench::protocol {

using detail::kAggregatorPeer;
using detail::make_frame;
using detail::NodeDecision;
using engine::ModelParams;
using eventlog::Action;
using gbdt::Histogram;
using transport::Frame;
using transport::MsgType;

namespace {

size_t session_outputs(const Session& session) {
    return session.task == scenario::Task::multiclass_classification
               ? session.num_classes
               : 1;
}

std::vector<size_t> party_widths_from_session(const Session& session) {
    // client_ids are ascending; widths come from the vertical layout carried
    // in the session via make_session.
    return session.party_feature_counts;
}

// dL/dscore for one row given the summed scores; logistic/softmax
// cross-entropy or squared error, matching the dense engine's gradients.
void score_delta(scenario::Task task, std::span<const double> scores,
                 double label, std::span<double> delta, double& loss) {
    if (task == scenario::Task::regression) {
        double d = scores[0] - label;
        delta[0] = 2.0 * d;
        loss = d * d;
        return;
    }
    if (scores.size() == 1) {
        double s = scores[0];
        double p = 1.0 / (1.0 + std::exp(-s));
        delta[0] = p - label;
        loss = std::max(s, 0.0) - s * label + std::log1p(std::exp(-std::abs(s)));
        return;
    }
    double max_z = *std::max_element(scores.begin(), scores.end());
    double denom = 0.0;
    for (double v : scores) denom += std::exp(v - max_z);
    size_t y = static_cast<size_t>(label);
    for (size_t c = 0; c < scores.size(); ++c)
        delta[c] = std::exp(scores[c] - max_z) / denom -
                   (c == y ? 1.0 : 0.0);
    loss = std::log(denom) + max_z - scores[y];
}

} // namespace

// --- vertical regression ------------------------------------------------------

ModelParams vertical_regression_aggregator(
    std::span<transport::Endpoint* const> parties, const Session& session,
    eventlog::Logger* log) {
    size_t outputs = session_outputs(session);
    size_t num_parties = parties.size();
    size_t label_slot = 0;
    for (size_t p = 0; p < session.client_ids.size(); ++p)
        if (session.client_ids[p] == session.label_party) label_slot = p;

    // Sync: every party reports its aligned row count.
    size_t train_rows = 0;
    for (size_t p = 0; p < num_parties; ++p) {
        auto [frame, bytes] = parties[p]->recv();
        if (frame.msg_type != MsgType::register_peer)
            throw MalformedHeader("expected registration frame");
        wire::Reader r{frame.payload};
        size_t n = r.u64();
        if (p == 0) {
            train_rows = n;
        } else if (n != train_rows) {
            throw AlignmentError("parties disagree on aligned row count");
        }
    }

    const auto& train = session.train;
    for (int round = 0; round < train.rounds; ++round) {
        if (log) log->emit("training." + std::to_string(round), Action::start);
        Frame start = make_frame(MsgType::round_start,
                                 static_cast<uint32_t>(round), kAggregatorPeer,
                                 {});
        for (auto* ep : parties) ep->send(start);

        auto rng = make_rng(vertical_round_seed(train.seed, round),
                            0x73687566ULL);
        std::vector<size_t> order(train_rows);
        std::iota(order.begin(), order.end(), size_t{0});
        std::string comp = "computation." + std::to_string(round);

        for (int epoch = 0; epoch < train.local_epochs; ++epoch) {
            deterministic_shuffle(order, rng);
            for (size_t start_i = 0; start_i < train_rows;
                 start_i += train.batch_size) {
                size_t stop = std::min(train_rows,
                                       start_i + static_cast<size_t>(
                                                     train.batch_size));
                size_t batch = stop - start_i;

                // Sum the parties' partial scores in party order.
                std::vector<double> scores(batch * outputs, 0.0);
                for (auto* ep : parties) {
                    auto [frame, bytes] = ep->recv();
                    if (frame.msg_type != MsgType::client_update)
                        throw MalformedHeader("expected partial score frame");
                    wire::Reader r{frame.payload};
                    auto partial = r.doubles();
                    if (partial.size() != scores.size())
                        throw AlignmentError("partial score size mismatch");
                    if (log) log->emit(comp, Action::start);
                    for (size_t i = 0; i < scores.size(); ++i)
                        scores[i] += partial[i];
                    if (log) log->emit(comp, Action::end);
                }

                // Label party turns scores into residuals, everyone updates.
                wire::Writer w;
                w.doubles(scores);
                parties[label_slot]->send(
                    make_frame(MsgType::residuals, static_cast<uint32_t>(round),
                               kAggregatorPeer, std::move(w.out)));
                auto [delta_frame, n2] = parties[label_slot]->recv();
                if (delta_frame.msg_type != MsgType::residuals)
                    throw MalformedHeader("expected residual frame");
                for (size_t p = 0; p < num_parties; ++p) {
                    if (p == label_slot) continue;
                    parties[p]->send(make_frame(MsgType::residuals,
                                                static_cast<uint32_t>(round),
                                                kAggregatorPeer,
                                                delta_frame.payload));
                }
            }
        }
        if (log) log->emit("training." + std::to_string(round), Action::end);
    }

    // Collect the final blocks and assemble the joint dense model.
    Frame shutdown = make_frame(MsgType::shutdown,
                                static_cast<uint32_t>(train.rounds),
                                kAggregatorPeer, {});
    for (auto* ep : parties) ep->send(shutdown);

    std::vector<std::vector<double>> blocks(num_parties);
    std::vector<double> bias(outputs, 0.0);
    for (size_t p = 0; p < num_parties; ++p) {
        auto [frame, bytes] = parties[p]->recv();
        if (frame.msg_type != MsgType::client_update)
            throw MalformedHeader("expected final block frame");
        wire::Reader r{frame.payload};
        blocks[p] = r.doubles();  // outputs x width_p, output-major
        bool has_bias = r.u8() != 0;
        if (has_bias) bias = r.doubles();
        r.expect_done();
    }

    ModelParams params;
    params.kind = session.model.kind;
    params.objective = session.task;
    params.num_outputs = outputs;
    params.shapes = {{static_cast<uint32_t>(session.num_features),
                      static_cast<uint32_t>(outputs)}};
    params.dense.assign(session.num_features * outputs + outputs, 0.0);
    auto widths = party_widths_from_session(session);
    for (size_t o = 0; o < outputs; ++o) {
        size_t offset = 0;
        for (size_t p = 0; p < num_parties; ++p) {
            size_t w_p = widths[p];
            for (size_t j = 0; j < w_p; ++j)
                params.dense[o * session.num_features + offset + j] =
                    blocks[p][o * w_p + j];
            offset += w_p;
        }
    }
    for (size_t o = 0; o < outputs; ++o)
        params.dense[session.num_features * outputs + o] = bias[o];
    return params;
}

void vertical_regression_party(transport::Endpoint& server, uint32_t party_id,
                               const scenario::ClientPartition& slice,
                               const Session& session, eventlog::Logger* log) {
    const auto& data = slice.train;
    size_t outputs = session_outputs(session);
    size_t width = data.num_features;
    bool is_label_party = party_id == session.label_party;
    if (is_label_party && !data.labels)
        throw AlignmentError("label party has no labels");

    {
        wire::Writer w;
        w.u64(data.num_rows());
        server.send(make_frame(MsgType::register_peer, 0,
                               detail::client_peer(party_id), std::move(w.out)));
    }

    const auto& train = session.train;
    size_t n = data.num_rows();
    std::vector<double> weights(outputs * width, 0.0);  // output-major
    std::vector<double> bias(outputs, 0.0);

    for (;;) {
        auto [frame, bytes] = server.recv();
        if (frame.msg_type == MsgType::shutdown) break;
        if (frame.msg_type != MsgType::round_start)
            throw MalformedHeader("expected round_start frame");
        int round = static_cast<int>(frame.round);
        std::string comp = "computation." + std::to_string(round);

        auto rng = make_rng(vertical_round_seed(train.seed, round),
                            0x73687566ULL);
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        std::vector<double> velocity(weights.size(), 0.0);
        std::vector<double> bias_velocity(outputs, 0.0);
        double epoch_loss = 0.0;

        for (int epoch = 0; epoch < train.local_epochs; ++epoch) {
            deterministic_shuffle(order, rng);
            epoch_loss = 0.0;
            for (size_t start_i = 0; start_i < n;
                 start_i += train.batch_size) {
                size_t stop = std::min(
                    n, start_i + static_cast<size_t>(train.batch_size));
                size_t batch = stop - start_i;

                if (log) log->emit(comp, Action::start);
                std::vector<double> partial(batch * outputs, 0.0);
                for (size_t k = 0; k < batch; ++k) {
                    auto x = data.row(order[start_i + k]);
                    for (size_t o = 0; o < outputs; ++o) {
                        double acc = is_label_party ? bias[o] : 0.0;
                        const double* w_row = weights.data() + o * width;
                        for (size_t j = 0; j < width; ++j) acc += w_row[j] * x[j];
                        partial[k * outputs + o] = acc;
                    }
                }
                if (log) log->emit(comp, Action::end);
                wire::Writer w;
                w.doubles(partial);
                server.send(make_frame(MsgType::client_update,
                                       static_cast<uint32_t>(round),
                                       detail::client_peer(party_id),
                                       std::move(w.out)));

                std::vector<double> delta;
                if (is_label_party) {
                    auto [score_frame, n3] = server.recv();
                    if (score_frame.msg_type != MsgType::residuals)
                        throw MalformedHeader("expected score frame");
                    wire::Reader r{score_frame.payload};
                    auto scores = r.doubles();
                    if (log) log->emit(comp, Action::start);
                    delta.assign(batch * outputs, 0.0);
                    double batch_loss = 0.0;
                    for (size_t k = 0; k < batch; ++k) {
                        double row_loss = 0.0;
                        score_delta(session.task,
                                    {scores.data() + k * outputs, outputs},
                                    (*data.labels)[order[start_i + k]],
                                    {delta.data() + k * outputs, outputs},
                                    row_loss);
                        batch_loss += row_loss;
                    }
                    epoch_loss += batch_loss;
                    if (log) log->emit(comp, Action::end);
                    wire::Writer dw;
                    dw.doubles(delta);
                    server.send(make_frame(MsgType::residuals,
                                           static_cast<uint32_t>(round),
                                           detail::client_peer(party_id),
                                           std::move(dw.out)));
                } else {
                    auto [delta_frame, n3] = server.recv();
                    if (delta_frame.msg_type != MsgType::residuals)
                        throw MalformedHeader("expected residual frame");
                    wire::Reader r{delta_frame.payload};
                    delta = r.doubles();
                }

                // Block gradient, matching the dense engine: accumulate raw
                // per-sample terms in batch order, then scale by 1/batch.
                if (log) log->emit(comp, Action::start);
                std::vector<double> grad(weights.size(), 0.0);
                std::vector<double> bias_grad(outputs, 0.0);
                for (size_t k = 0; k < batch; ++k) {
                    auto x = data.row(order[start_i + k]);
                    for (size_t o = 0; o < outputs; ++o) {
                        double d = delta[k * outputs + o];
                        bias_grad[o] += d;
                        double* g_row = grad.data() + o * width;
                        for (size_t j = 0; j < width; ++j) g_row[j] += d * x[j];
                    }
                }
                double inv_batch = 1.0 / static_cast<double>(batch);
                for (size_t j = 0; j < weights.size(); ++j) {
                    velocity[j] = train.momentum * velocity[j] -
                                  train.learning_rate * (grad[j] * inv_batch);
                    weights[j] += velocity[j];
                }
                if (is_label_party) {
                    for (size_t o = 0; o < outputs; ++o) {
                        bias_velocity[o] =
                            train.momentum * bias_velocity[o] -
                            train.learning_rate * (bias_grad[o] * inv_batch);
                        bias[o] += bias_velocity[o];
                    }
                }
                if (log) log->emit(comp, Action::end);
            }
        }
        if (log && is_label_party && n > 0) {
            // loss over the final epoch, reported once per round
            eventlog::Metrics m{
                {"loss", eventlog::MetricValue(epoch_loss /
                                               static_cast<double>(n))}};
            log->emit(comp, Action::start);
            log->emit(comp, Action::end, m);
        }
    }

    wire::Writer w;
    w.doubles(weights);
    w.u8(is_label_party ? 1 : 0);
    if (is_label_party) w.doubles(bias);
    server.send(make_frame(MsgType::client_update,
                           static_cast<uint32_t>(train.rounds),
                           detail::client_peer(party_id), std::move(w.out)));
}

// --- vertical GBDT (plaintext SecureBoost message pattern) --------------------

namespace {

std::vector<uint8_t> pack_bits(const std::vector<bool>& bits) {
    std::vector<uint8_t> out((bits.size() + 7) / 8, 0);
    for (size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) out[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
    return out;
}

bool bit_at(std::span<const uint8_t> bytes, size_t i) {
    return (bytes[i / 8] >> (i % 8)) & 1u;
}

struct VerticalWorker {
    const scenario::DatasetTable* data = nullptr;  // own feature block
    const engine::GbdtSpec* spec = nullptr;
    gbdt::BinEdges edges;  // own features
    size_t feature_offset = 0;
    size_t outputs = 1;
    bool regression = false;
    bool has_labels = false;
    std::vector<double> margins;  // label party only
    gbdt::GradHess gh;
    size_t current_output = 0;
    std::map<uint32_t, std::vector<uint32_t>> node_rows;
    std::map<uint32_t, uint32_t> node_depth;
    std::vector<uint32_t> hist_targets;

    bool owns(uint32_t global_feature) const {
        return global_feature >= feature_offset &&
               global_feature < feature_offset + data->num_features;
    }

    void begin_tree(size_t tree_index, gbdt::GradHess tree_gh) {
        current_output = tree_index % outputs;
        gh = std::move(tree_gh);
        node_rows.clear();
        node_depth.clear();
        std::vector<uint32_t> all(data->num_rows());
        for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<uint32_t>(i);
        node_rows[0] = std::move(all);
        node_depth[0] = 0;
        hist_targets = {0};
    }

    std::vector<std::pair<uint32_t, Histogram>> build_level_hists() const {
        std::vector<std::pair<uint32_t, Histogram>> out;
        for (uint32_t id : hist_targets) {
            const auto& rows = node_rows.at(id);
            out.emplace_back(
                id, gbdt::build_histogram(data->features, data->num_rows(),
                                          data->num_features, gh.grad, gh.hess,
                                          edges, rows));
        }
        return out;
    }

    // Bitmaps for the split nodes this party owns: one bit per row of the
    // node's row list, set when the row goes left.
    std::vector<std::pair<uint32_t, std::vector<uint8_t>>> owned_bitmaps(
        std::span<const NodeDecision> decisions) const {
        std::vector<std::pair<uint32_t, std::vector<uint8_t>>> out;
        for (const auto& d : decisions) {
            if (d.is_leaf || !owns(d.feature)) continue;
            const auto& rows = node_rows.at(d.node_id);
            size_t local = d.feature - feature_offset;
            std::vector<bool> bits(rows.size());
            for (size_t i = 0; i < rows.size(); ++i) {
                double v =
                    data->features[rows[i] * data->num_features + local];
                bits[i] = v <= d.split_value;
            }
            out.emplace_back(d.node_id, pack_bits(bits));
        }
        return out;
    }

    void apply_decisions(
        std::span<const NodeDecision> decisions,
        const std::map<uint32_t, std::vector<uint8_t>>& bitmaps) {
        std::vector<uint32_t> next_targets;
        for (const auto& d : decisions) {
            auto rows_it = node_rows.find(d.node_id);
            std::vector<uint32_t> rows = std::move(rows_it->second);
            node_rows.erase(rows_it);
            uint32_t depth = node_depth.at(d.node_id);
            if (d.is_leaf) {
                if (has_labels)
                    for (uint32_t r : rows)
                        margins[r * outputs + current_output] += d.leaf_weight;
                continue;
            }
            const auto& bits = bitmaps.at(d.node_id);
            std::vector<uint32_t> left, right;
            for (size_t i = 0; i < rows.size(); ++i)
                (bit_at(bits, i) ? left : right).push_back(rows[i]);
            node_rows[d.left_id] = std::move(left);
            node_rows[d.right_id] = std::move(right);
            node_depth[d.left_id] = depth + 1;
            node_depth[d.right_id] = depth + 1;
            if (depth + 1 < static_cast<uint32_t>(spec->max_depth)) {
                next_targets.push_back(d.left_id);
                next_targets.push_back(d.right_id);
            }
        }
        hist_targets = std::move(next_targets);
    }
};

std::vector<uint8_t> encode_party_hists(
    const std::vector<std::pair<uint32_t, Histogram>>& hists) {
    wire::Writer w;
    w.u32(static_cast<uint32_t>(hists.size()));
    for (const auto& [node_id, hist] : hists) {
        w.u32(node_id);
        w.u32(static_cast<uint32_t>(hist.num_features));
        w.u32(static_cast<uint32_t>(hist.num_bins));
        w.doubles(hist.sum_g);
        w.doubles(hist.sum_h);
        w.i64s(hist.count);
    }
    return std::move(w.out);
}

std::vector<uint8_t> encode_bitmaps(
    const std::vector<std::pair<uint32_t, std::vector<uint8_t>>>& bitmaps) {
    wire::Writer w;
    w.u32(static_cast<uint32_t>(bitmaps.size()));
    for (const auto& [node_id, bits] : bitmaps) {
        w.u32(node_id);
        w.bytes(bits);
    }
    return std::move(w.out);
}

std::map<uint32_t, std::vector<uint8_t>> decode_bitmaps(
    std::span<const uint8_t> payload) {
    wire::Reader r{payload};
    uint32_t n = r.u32();
    std::map<uint32_t, std::vector<uint8_t>> out;
    for (uint32_t i = 0; i < n; ++i) {
        uint32_t node_id = r.u32();
        out[node_id] = r.bytes();
    }
    r.expect_done();
    return out;
}

} // namespace

ModelParams vertical_gbdt_aggregator(
    std::span<transport::Endpoint* const> parties, const Session& session,
    eventlog::Logger* log) {
    const auto& spec = session.model.gbdt;
    size_t outputs = session_outputs(session);
    size_t num_parties = parties.size();
    auto widths = party_widths_from_session(session);
    size_t label_slot = 0;
    for (size_t p = 0; p < session.client_ids.size(); ++p)
        if (session.client_ids[p] == session.label_party) label_slot = p;

    // Setup: row counts and per-party bin edges, concatenated in party order.
    size_t train_rows = 0;
    gbdt::BinEdges global_edges;
    for (size_t p = 0; p < num_parties; ++p) {
        auto [frame, bytes] = parties[p]->recv();
        if (frame.msg_type != MsgType::register_peer)
            throw MalformedHeader("expected registration frame");
        wire::Reader r{frame.payload};
        size_t n = r.u64();
        if (p == 0) {
            train_rows = n;
        } else if (n != train_rows) {
            throw AlignmentError("parties disagree on aligned row count");
        }
        uint32_t n_features = r.u32();
        if (n_features != widths[p])
            throw AlignmentError("party width does not match vertical layout");
        for (uint32_t f = 0; f < n_features; ++f)
            global_edges.push_back(r.doubles());
        r.expect_done();
    }

    size_t global_bins = 1;
    for (const auto& cuts : global_edges)
        global_bins = std::max(global_bins, cuts.size() + 1);

    ModelParams params;
    params.kind = engine::ModelKind::gbdt;
    params.objective = session.task;
    params.num_outputs = outputs;

    size_t total_trees = static_cast<size_t>(spec.num_trees) * outputs;
    for (size_t t = 0; t < total_trees; ++t) {
        uint32_t round = static_cast<uint32_t>(t / outputs);
        std::string round_path = "training." + std::to_string(round);
        std::string comp_path = "computation." + std::to_string(round);
        if (t % outputs == 0 && log) log->emit(round_path, Action::start);

        Frame start =
            make_frame(MsgType::round_start, round, kAggregatorPeer, {});
        for (auto* ep : parties) ep->send(start);

        // Label party publishes this tree's gradients/hessians.
        auto [gh_frame, n1] = parties[label_slot]->recv();
        if (gh_frame.msg_type != MsgType::residuals)
            throw MalformedHeader("expected gradient frame");
        for (size_t p = 0; p < num_parties; ++p) {
            if (p == label_slot) continue;
            parties[p]->send(make_frame(MsgType::residuals, round,
                                        kAggregatorPeer, gh_frame.payload));
        }

        auto request = [&](std::span<const detail::PendingNode> nodes) {
            // Parties answer histogram queries for their feature blocks;
            // concatenate the blocks into global-feature histograms.
            std::map<uint32_t, Histogram> merged;
            for (const auto& node : nodes) {
                Histogram h;
                h.num_features = session.num_features;
                h.num_bins = global_bins;
                h.sum_g.assign(h.num_features * h.num_bins, 0.0);
                h.sum_h.assign(h.num_features * h.num_bins, 0.0);
                h.count.assign(h.num_features * h.num_bins, 0);
                h.edges = global_edges;
                merged.emplace(node.id, std::move(h));
            }
            size_t offset = 0;
            for (size_t p = 0; p < num_parties; ++p) {
                auto [frame, nbytes] = parties[p]->recv();
                if (frame.msg_type != MsgType::histogram)
                    throw MalformedHeader("expected histogram frame");
                if (log) log->emit(comp_path, Action::start);
                wire::Reader r{frame.payload};
                uint32_t n_nodes = r.u32();
                for (uint32_t i = 0; i < n_nodes; ++i) {
                    uint32_t node_id = r.u32();
                    size_t nf = r.u32();
                    size_t nb = r.u32();
                    auto g = r.doubles();
                    auto hh = r.doubles();
                    auto c = r.i64s();
                    Histogram& dst = merged.at(node_id);
                    for (size_t f = 0; f < nf; ++f)
                        for (size_t b = 0; b < nb; ++b) {
                            size_t src = f * nb + b;
                            size_t d = dst.at(offset + f, b);
                            dst.sum_g[d] = g[src];
                            dst.sum_h[d] = hh[src];
                            dst.count[d] = c[src];
                        }
                }
                r.expect_done();
                if (log) log->emit(comp_path, Action::end);
                offset += widths[p];
            }
            return merged;
        };
        auto publish = [&](std::span<const NodeDecision> decisions,
                           bool complete) {
            Frame f = make_frame(MsgType::split_decision, round,
                                 kAggregatorPeer,
                                 detail::encode_decisions(decisions, complete));
            for (auto* ep : parties) ep->send(f);

            // Owners of split features report row bitmaps, rebroadcast to all.
            std::vector<bool> owner(num_parties, false);
            bool any_split = false;
            for (const auto& d : decisions) {
                if (d.is_leaf) continue;
                any_split = true;
                size_t off = 0;
                for (size_t p = 0; p < num_parties; ++p) {
                    if (d.feature >= off && d.feature < off + widths[p])
                        owner[p] = true;
                    off += widths[p];
                }
            }
            if (!any_split) return;
            std::map<uint32_t, std::vector<uint8_t>> combined;
            for (size_t p = 0; p < num_parties; ++p) {
                if (!owner[p]) continue;
                auto [frame2, n3] = parties[p]->recv();
                if (frame2.msg_type != MsgType::split_decision)
                    throw MalformedHeader("expected bitmap frame");
                for (auto& [node_id, bits] : decode_bitmaps(frame2.payload))
                    combined[node_id] = std::move(bits);
            }
            std::vector<std::pair<uint32_t, std::vector<uint8_t>>> flat(
                combined.begin(), combined.end());
            Frame bitmap_frame = make_frame(MsgType::split_decision, round,
                                            kAggregatorPeer,
                                            encode_bitmaps(flat));
            for (auto* ep : parties) ep->send(bitmap_frame);
        };
        params.ensemble.push_back(detail::grow_tree(spec, request, publish));

        if (t % outputs == outputs - 1 && log) log->emit(round_path, Action::end);
    }

    Frame shutdown = make_frame(MsgType::shutdown,
                                static_cast<uint32_t>(spec.num_trees),
                                kAggregatorPeer, {});
    for (auto* ep : parties) ep->send(shutdown);
    return params;
}

void vertical_gbdt_party(transport::Endpoint& server, uint32_t party_id,
                         const scenario::ClientPartition& slice,
                         const Session& session, eventlog::Logger* log) {
    const auto& spec = session.model.gbdt;
    const auto& data = slice.train;
    size_t outputs = session_outputs(session);
    bool is_label_party = party_id == session.label_party;
    if (is_label_party && !data.labels)
        throw AlignmentError("label party has no labels");

    VerticalWorker worker;
    worker.data = &data;
    worker.spec = &spec;
    worker.outputs = outputs;
    worker.regression = session.task == scenario::Task::regression;
    worker.has_labels = is_label_party;
    worker.edges =
        gbdt::compute_bin_edges(data.features, data.num_rows(),
                                data.num_features,
                                static_cast<size_t>(spec.num_bins));
    if (is_label_party)
        worker.margins.assign(data.num_rows() * outputs, 0.0);
    auto widths = party_widths_from_session(session);
    for (size_t p = 0; p < session.client_ids.size(); ++p) {
        if (session.client_ids[p] == party_id) break;
        worker.feature_offset += widths[p];
    }

    {
        wire::Writer w;
        w.u64(data.num_rows());
        w.u32(static_cast<uint32_t>(data.num_features));
        for (const auto& cuts : worker.edges) w.doubles(cuts);
        server.send(make_frame(MsgType::register_peer, 0,
                               detail::client_peer(party_id), std::move(w.out)));
    }

    size_t tree_index = 0;
    for (;;) {
        auto [frame, bytes] = server.recv();
        if (frame.msg_type == MsgType::shutdown) break;
        if (frame.msg_type != MsgType::round_start)
            throw MalformedHeader("expected round_start frame");
        uint32_t round = frame.round;
        std::string comp = "computation." + std::to_string(round);

        gbdt::GradHess gh;
        if (is_label_party) {
            if (log) log->emit(comp, Action::start);
            gh = gbdt::boosting_gradients(worker.margins, *data.labels, outputs,
                                          tree_index % outputs,
                                          worker.regression);
            if (log) log->emit(comp, Action::end);
            wire::Writer w;
            w.doubles(gh.grad);
            w.doubles(gh.hess);
            server.send(make_frame(MsgType::residuals, round,
                                   detail::client_peer(party_id),
                                   std::move(w.out)));
        } else {
            auto [gh_frame, n2] = server.recv();
            if (gh_frame.msg_type != MsgType::residuals)
                throw MalformedHeader("expected gradient frame");
            wire::Reader r{gh_frame.payload};
            gh.grad = r.doubles();
            gh.hess = r.doubles();
            r.expect_done();
        }
        worker.begin_tree(tree_index, std::move(gh));

        for (;;) {
            if (!worker.hist_targets.empty()) {
                if (log) log->emit(comp, Action::start);
                auto payload = encode_party_hists(worker.build_level_hists());
                if (log) log->emit(comp, Action::end);
                server.send(make_frame(MsgType::histogram, round,
                                       detail::client_peer(party_id),
                                       std::move(payload)));
            }
            auto [decision_frame, n3] = server.recv();
            if (decision_frame.msg_type != MsgType::split_decision)
                throw MalformedHeader("expected split_decision frame");
            auto [decisions, complete] =
                detail::decode_decisions(decision_frame.payload);

            bool any_split = false;
            for (const auto& d : decisions)
                if (!d.is_leaf) any_split = true;
            std::map<uint32_t, std::vector<uint8_t>> bitmaps;
            if (any_split) {
                auto owned = worker.owned_bitmaps(decisions);
                if (!owned.empty())
                    server.send(make_frame(MsgType::split_decision, round,
                                           detail::client_peer(party_id),
                                           encode_bitmaps(owned)));
                auto [bitmap_frame, n4] = server.recv();
                if (bitmap_frame.msg_type != MsgType::split_decision)
                    throw MalformedHeader("expected bitmap frame");
                bitmaps = decode_bitmaps(bitmap_frame.payload);
            }
            worker.apply_decisions(decisions, bitmaps);
            if (complete) break;
        }
        ++tree_index;
    }
}

} // namespace fedbench::protocol
