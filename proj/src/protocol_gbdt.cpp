#include <algorithm>
#include <cmath>
#include <map>

#include "fedbench/errors.hpp"
#include "fedbench/protocol.hpp"
#include "fedbench/util.hpp"
#include "fedbench/wire.hpp"
#include "protocol_detail.hpp"

namespace fedbench::protocol {

using engine::ModelParams;
using eventlog::Action;
using gbdt::BinEdges;
using gbdt::Histogram;
using gbdt::Tree;
using transport::Frame;
using transport::MsgType;

namespace detail {

Tree grow_tree(const engine::GbdtSpec& spec, const HistRequest& request_hists,
               const DecisionPublish& publish) {
    Tree tree;
    tree.nodes.emplace_back();
    std::vector<PendingNode> level{{0, 0, 0.0, 0.0, true}};

    while (!level.empty()) {
        std::vector<PendingNode> want;
        for (const auto& n : level)
            if (n.depth < static_cast<uint32_t>(spec.max_depth)) want.push_back(n);
        std::map<uint32_t, Histogram> hists;
        if (!want.empty()) hists = request_hists(want);

        std::vector<NodeDecision> decisions;
        std::vector<PendingNode> next;
        for (auto& node : level) {
            std::optional<gbdt::Split> split;
            if (node.depth < static_cast<uint32_t>(spec.max_depth)) {
                const Histogram& hist = hists.at(node.id);
                if (node.need_totals) {
                    node.grad_sum = node.hess_sum = 0.0;
                    for (size_t b = 0; b < hist.num_bins; ++b) {
                        node.grad_sum += hist.sum_g[hist.at(0, b)];
                        node.hess_sum += hist.sum_h[hist.at(0, b)];
                    }
                }
                split = gbdt::find_best_split(hist, spec.lambda, spec.min_gain);
            }

            NodeDecision d;
            d.node_id = node.id;
            if (!split) {
                d.is_leaf = true;
                d.leaf_weight =
                    gbdt::leaf_weight(node.grad_sum, node.hess_sum, spec.lambda,
                                      spec.learning_rate);
                auto& tn = tree.nodes[node.id];
                tn.left = tn.right = -1;
                tn.leaf_weight = d.leaf_weight;
            } else {
                d.feature = static_cast<uint32_t>(split->feature);
                d.bin = split->bin;
                d.split_value = split->split_value;
                d.left_id = static_cast<uint32_t>(tree.nodes.size());
                tree.nodes.emplace_back();
                d.right_id = static_cast<uint32_t>(tree.nodes.size());
                tree.nodes.emplace_back();
                auto& tn = tree.nodes[node.id];
                tn.feature = static_cast<int32_t>(split->feature);
                tn.bin = static_cast<int32_t>(split->bin);
                tn.split_value = split->split_value;
                tn.left = static_cast<int32_t>(d.left_id);
                tn.right = static_cast<int32_t>(d.right_id);
                next.push_back({d.left_id, node.depth + 1, split->grad_left,
                                split->hess_left, false});
                next.push_back({d.right_id, node.depth + 1, split->grad_right,
                                split->hess_right, false});
            }
            decisions.push_back(d);
        }
        publish(decisions, next.empty());
        level = std::move(next);
    }
    return tree;
}

std::vector<uint8_t> encode_decisions(std::span<const NodeDecision> decisions,
                                      bool tree_complete) {
    wire::Writer w;
    w.u8(tree_complete ? 1 : 0);
    w.u32(static_cast<uint32_t>(decisions.size()));
    for (const auto& d : decisions) {
        w.u32(d.node_id);
        w.u8(d.is_leaf ? 1 : 0);
        if (d.is_leaf) {
            w.f64(d.leaf_weight);
        } else {
            w.u32(d.feature);
            w.u32(d.bin);
            w.f64(d.split_value);
            w.u32(d.left_id);
            w.u32(d.right_id);
        }
    }
    return std::move(w.out);
}

std::pair<std::vector<NodeDecision>, bool> decode_decisions(
    std::span<const uint8_t> payload) {
    wire::Reader r{payload};
    bool complete = r.u8() != 0;
    uint32_t n = r.u32();
    std::vector<NodeDecision> decisions(n);
    for (auto& d : decisions) {
        d.node_id = r.u32();
        d.is_leaf = r.u8() != 0;
        if (d.is_leaf) {
            d.leaf_weight = r.f64();
        } else {
            d.feature = r.u32();
            d.bin = r.u32();
            d.split_value = r.f64();
            d.left_id = r.u32();
            d.right_id = r.u32();
        }
    }
    r.expect_done();
    return {std::move(decisions), complete};
}

std::vector<uint8_t> encode_edges(const BinEdges& edges) {
    wire::Writer w;
    w.u32(static_cast<uint32_t>(edges.size()));
    for (const auto& cuts : edges) w.doubles(cuts);
    return std::move(w.out);
}

BinEdges decode_edges(std::span<const uint8_t> payload) {
    wire::Reader r{payload};
    uint32_t n = r.u32();
    BinEdges edges(n);
    for (auto& cuts : edges) cuts = r.doubles();
    r.expect_done();
    return edges;
}

} // namespace detail

using detail::NodeDecision;
using detail::PendingNode;

namespace {

std::vector<uint8_t> encode_sorted_columns(
    const std::vector<std::vector<double>>& columns) {
    wire::Writer w;
    w.u32(static_cast<uint32_t>(columns.size()));
    for (const auto& col : columns) w.doubles(col);
    return std::move(w.out);
}

std::vector<std::vector<double>> decode_sorted_columns(
    std::span<const uint8_t> payload) {
    wire::Reader r{payload};
    uint32_t n = r.u32();
    std::vector<std::vector<double>> columns(n);
    for (auto& col : columns) col = r.doubles();
    r.expect_done();
    return columns;
}

// --- histogram wire codec (plain and masked) --------------------------------

std::vector<uint8_t> encode_level_hists(
    const std::vector<std::pair<uint32_t, Histogram>>& hists,
    const Session& session, uint32_t self, uint64_t mask_seed_base) {
    wire::Writer w;
    w.u8(session.mask_histograms ? 1 : 0);
    w.u32(static_cast<uint32_t>(hists.size()));
    for (const auto& [node_id, hist] : hists) {
        w.u32(node_id);
        w.u32(static_cast<uint32_t>(hist.num_features));
        w.u32(static_cast<uint32_t>(hist.num_bins));
        if (!session.mask_histograms) {
            w.doubles(hist.sum_g);
            w.doubles(hist.sum_h);
            w.i64s(hist.count);
        } else {
            uint64_t seed = mix_seed(mask_seed_base, node_id);
            std::vector<double> counts(hist.count.begin(), hist.count.end());
            w.i64s(mask_values(hist.sum_g, kMaskFixedPointScale, seed, self,
                               session.client_ids));
            w.i64s(mask_values(hist.sum_h, kMaskFixedPointScale,
                               mix_seed(seed, 1), self, session.client_ids));
            w.i64s(mask_values(counts, 1.0, mix_seed(seed, 2), self,
                               session.client_ids));
        }
    }
    return std::move(w.out);
}

struct LevelHistAccumulator {
    bool masked = false;
    std::map<uint32_t, Histogram> plain;
    struct Slot {
        size_t num_features = 0, num_bins = 0;
        std::vector<int64_t> g, h, count;
    };
    std::map<uint32_t, Slot> masked_slots;
    size_t parts = 0;
};

void accumulate_level_hists(LevelHistAccumulator& acc,
                            std::span<const uint8_t> payload,
                            const BinEdges& edges) {
    wire::Reader r{payload};
    bool masked = r.u8() != 0;
    if (acc.parts == 0) acc.masked = masked;
    if (acc.masked != masked)
        throw EdgeMismatch("mixed masked/plain histogram parts");
    uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
        uint32_t node_id = r.u32();
        size_t num_features = r.u32();
        size_t num_bins = r.u32();
        if (!masked) {
            Histogram part;
            part.num_features = num_features;
            part.num_bins = num_bins;
            part.sum_g = r.doubles();
            part.sum_h = r.doubles();
            part.count = r.i64s();
            part.edges = edges;
            if (part.sum_g.size() != num_features * num_bins)
                throw EdgeMismatch("histogram payload shape mismatch");
            auto it = acc.plain.find(node_id);
            if (it == acc.plain.end()) {
                acc.plain.emplace(node_id, std::move(part));
            } else {
                gbdt::merge_into(it->second, part);
            }
        } else {
            auto g = r.i64s();
            auto h = r.i64s();
            auto c = r.i64s();
            auto& slot = acc.masked_slots[node_id];
            if (slot.g.empty()) {
                slot.num_features = num_features;
                slot.num_bins = num_bins;
                slot.g.assign(g.size(), 0);
                slot.h.assign(h.size(), 0);
                slot.count.assign(c.size(), 0);
            }
            masked_sum_into(slot.g, g);
            masked_sum_into(slot.h, h);
            masked_sum_into(slot.count, c);
        }
    }
    r.expect_done();
    acc.parts++;
}

std::map<uint32_t, Histogram> finish_level_hists(LevelHistAccumulator& acc,
                                                 const BinEdges& edges) {
    if (!acc.masked) return std::move(acc.plain);
    std::map<uint32_t, Histogram> out;
    for (auto& [node_id, slot] : acc.masked_slots) {
        Histogram h;
        h.num_features = slot.num_features;
        h.num_bins = slot.num_bins;
        h.sum_g = dequantize(slot.g, kMaskFixedPointScale);
        h.sum_h = dequantize(slot.h, kMaskFixedPointScale);
        h.count.reserve(slot.count.size());
        for (int64_t c : slot.count) h.count.push_back(c);
        h.edges = edges;
        out.emplace(node_id, std::move(h));
    }
    return out;
}

// --- worker (client side; also drives the centralized fit) -------------------

struct GbdtWorker {
    const scenario::DatasetTable* data = nullptr;
    const engine::GbdtSpec* spec = nullptr;
    BinEdges edges;
    size_t outputs = 1;
    bool regression = false;
    std::vector<double> margins;  // rows x outputs
    gbdt::GradHess gh;
    size_t current_output = 0;
    std::map<uint32_t, std::vector<uint32_t>> node_rows;
    std::map<uint32_t, uint32_t> node_depth;
    std::vector<uint32_t> hist_targets;  // nodes owed a histogram next

    void init(const scenario::DatasetTable& table, const engine::GbdtSpec& s,
              size_t num_outputs, bool is_regression) {
        data = &table;
        spec = &s;
        outputs = num_outputs;
        regression = is_regression;
        margins.assign(table.num_rows() * outputs, 0.0);
    }

    std::vector<std::vector<double>> sorted_columns() const {
        std::vector<std::vector<double>> cols(data->num_features);
        for (size_t f = 0; f < data->num_features; ++f) {
            auto& col = cols[f];
            col.reserve(data->num_rows());
            for (size_t r = 0; r < data->num_rows(); ++r)
                col.push_back(data->features[r * data->num_features + f]);
            std::sort(col.begin(), col.end());
        }
        return cols;
    }

    void begin_tree(size_t tree_index) {
        current_output = tree_index % outputs;
        gh = gbdt::boosting_gradients(margins, *data->labels, outputs,
                                      current_output, regression);
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

    void apply_decisions(std::span<const NodeDecision> decisions) {
        std::vector<uint32_t> next_targets;
        for (const auto& d : decisions) {
            auto rows_it = node_rows.find(d.node_id);
            std::vector<uint32_t> rows = std::move(rows_it->second);
            node_rows.erase(rows_it);
            uint32_t depth = node_depth.at(d.node_id);
            if (d.is_leaf) {
                for (uint32_t r : rows)
                    margins[r * outputs + current_output] += d.leaf_weight;
                continue;
            }
            std::vector<uint32_t> left, right;
            for (uint32_t r : rows) {
                double v = data->features[r * data->num_features + d.feature];
                (v <= d.split_value ? left : right).push_back(r);
            }
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

size_t tree_outputs(const Session& session) {
    return session.task == scenario::Task::multiclass_classification
               ? session.num_classes
               : 1;
}

} // namespace

// --- masked codec ------------------------------------------------------------

std::vector<int64_t> mask_values(std::span<const double> values, double scale,
                                 uint64_t seed_base, uint32_t self,
                                 std::span<const uint32_t> all_clients) {
    std::vector<uint64_t> acc(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        double scaled = values[i] * scale;
        if (std::abs(scaled) >= 9.0e18)
            throw InvalidSpec("value too large for masked fixed-point encoding");
        acc[i] = static_cast<uint64_t>(static_cast<int64_t>(std::llround(scaled)));
    }
    for (uint32_t other : all_clients) {
        if (other == self) continue;
        uint32_t lo = std::min(self, other), hi = std::max(self, other);
        auto rng = make_rng(seed_base, lo, hi);
        bool add = self < other;
        for (auto& slot : acc) {
            uint64_t m = rng();
            slot = add ? slot + m : slot - m;
        }
    }
    std::vector<int64_t> out(acc.size());
    for (size_t i = 0; i < acc.size(); ++i)
        out[i] = static_cast<int64_t>(acc[i]);
    return out;
}

void masked_sum_into(std::vector<int64_t>& accumulator,
                     std::span<const int64_t> part) {
    if (accumulator.size() != part.size())
        throw EdgeMismatch("masked histogram parts differ in size");
    for (size_t i = 0; i < part.size(); ++i)
        accumulator[i] =
            static_cast<int64_t>(static_cast<uint64_t>(accumulator[i]) +
                                 static_cast<uint64_t>(part[i]));
}

std::vector<double> dequantize(std::span<const int64_t> accumulator,
                               double scale) {
    std::vector<double> out;
    out.reserve(accumulator.size());
    for (int64_t v : accumulator) out.push_back(static_cast<double>(v) / scale);
    return out;
}

// --- horizontal HistSecAgg ----------------------------------------------------

ModelParams histsecagg_aggregator(std::span<transport::Endpoint* const> clients,
                                  const Session& session,
                                  eventlog::Logger* log) {
    const auto& spec = session.model.gbdt;
    size_t outputs = tree_outputs(session);

    // Setup: merge per-client sorted feature columns into shared bin edges.
    std::vector<std::vector<double>> pooled(session.num_features);
    for (auto* ep : clients) {
        auto [frame, bytes] = ep->recv();
        if (frame.msg_type != MsgType::client_update)
            throw MalformedHeader("expected feature summary frame");
        auto columns = decode_sorted_columns(frame.payload);
        if (columns.size() != session.num_features)
            throw EdgeMismatch("feature summary width mismatch");
        for (size_t f = 0; f < columns.size(); ++f) {
            auto& dst = pooled[f];
            size_t mid = dst.size();
            dst.insert(dst.end(), columns[f].begin(), columns[f].end());
            std::inplace_merge(dst.begin(), dst.begin() + static_cast<long>(mid),
                               dst.end());
        }
    }
    BinEdges edges =
        gbdt::bin_edges_from_sorted(pooled, static_cast<size_t>(spec.num_bins));
    Frame edge_frame =
        detail::make_frame(MsgType::model_broadcast, 0, detail::kAggregatorPeer,
                           detail::encode_edges(edges));
    for (auto* ep : clients) ep->send(edge_frame);

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

        Frame start = detail::make_frame(MsgType::round_start, round,
                                         detail::kAggregatorPeer, {});
        for (auto* ep : clients) ep->send(start);

        auto request = [&](std::span<const PendingNode>) {
            LevelHistAccumulator acc;
            for (auto* ep : clients) {
                auto [frame, bytes] = ep->recv();
                if (frame.msg_type != MsgType::histogram)
                    throw MalformedHeader("expected histogram frame");
                accumulate_level_hists(acc, frame.payload, edges);
            }
            if (log) log->emit(comp_path, Action::start);
            auto merged = finish_level_hists(acc, edges);
            if (log) log->emit(comp_path, Action::end);
            return merged;
        };
        auto publish = [&](std::span<const NodeDecision> decisions,
                           bool complete) {
            Frame f = detail::make_frame(
                MsgType::split_decision, round, detail::kAggregatorPeer,
                detail::encode_decisions(decisions, complete));
            for (auto* ep : clients) ep->send(f);
        };
        params.ensemble.push_back(detail::grow_tree(spec, request, publish));

        if (t % outputs == outputs - 1 && log) log->emit(round_path, Action::end);
    }

    Frame shutdown =
        detail::make_frame(MsgType::shutdown, static_cast<uint32_t>(spec.num_trees),
                           detail::kAggregatorPeer, {});
    for (auto* ep : clients) ep->send(shutdown);
    return params;
}

void histsecagg_client(transport::Endpoint& server, uint32_t client_id,
                       const scenario::DatasetTable& train_data,
                       const Session& session, eventlog::Logger* log) {
    const auto& spec = session.model.gbdt;
    GbdtWorker worker;
    worker.init(train_data, spec, tree_outputs(session),
                session.task == scenario::Task::regression);

    server.send(detail::make_frame(MsgType::client_update, 0,
                                   detail::client_peer(client_id),
                                   encode_sorted_columns(worker.sorted_columns())));

    {
        auto [frame, bytes] = server.recv();
        if (frame.msg_type != MsgType::model_broadcast)
            throw MalformedHeader("expected bin edge frame");
        worker.edges = detail::decode_edges(frame.payload);
    }

    size_t tree_index = 0;
    for (;;) {
        auto [frame, bytes] = server.recv();
        if (frame.msg_type == MsgType::shutdown) break;
        if (frame.msg_type != MsgType::round_start)
            throw MalformedHeader("expected round_start frame");
        uint32_t round = frame.round;
        std::string comp_path = "computation." + std::to_string(round);
        uint64_t mask_base =
            mix_seed(session.train.seed, 0x6d61736bULL, tree_index);

        if (log) log->emit(comp_path, Action::start);
        worker.begin_tree(tree_index);
        if (log) log->emit(comp_path, Action::end);

        for (;;) {
            if (!worker.hist_targets.empty()) {
                if (log) log->emit(comp_path, Action::start);
                auto hists = worker.build_level_hists();
                auto payload =
                    encode_level_hists(hists, session, client_id, mask_base);
                if (log) log->emit(comp_path, Action::end);
                server.send(detail::make_frame(MsgType::histogram, round,
                                               detail::client_peer(client_id),
                                               std::move(payload)));
            }
            auto [decision_frame, n] = server.recv();
            if (decision_frame.msg_type != MsgType::split_decision)
                throw MalformedHeader("expected split_decision frame");
            auto [decisions, complete] =
                detail::decode_decisions(decision_frame.payload);
            worker.apply_decisions(decisions);
            if (complete) break;
        }
        ++tree_index;
    }
}

// --- engine-level fit ---------------------------------------------------------

namespace {

scenario::DatasetTable pooled_train(const scenario::Scenario& s) {
    std::vector<const scenario::ClientPartition*> ordered;
    for (const auto& c : s.clients) ordered.push_back(&c);
    std::sort(ordered.begin(), ordered.end(),
              [](auto* a, auto* b) { return a->client_id < b->client_id; });
    scenario::DatasetTable out;
    for (const auto* c : ordered) {
        if (out.num_features == 0) {
            out.num_features = c->train.num_features;
            if (c->train.labels) out.labels.emplace();
        }
        for (size_t i = 0; i < c->train.num_rows(); ++i)
            out.append_row_from(c->train, i);
    }
    return out;
}

ModelParams fit_gbdt_centralized(const scenario::DatasetTable& train,
                                 const engine::ModelSpec& model,
                                 scenario::Task task, size_t num_classes) {
    const auto& spec = model.gbdt;
    size_t outputs =
        task == scenario::Task::multiclass_classification ? num_classes : 1;

    GbdtWorker worker;
    worker.init(train, spec, outputs, task == scenario::Task::regression);
    worker.edges =
        gbdt::compute_bin_edges(train.features, train.num_rows(),
                                train.num_features,
                                static_cast<size_t>(spec.num_bins));

    ModelParams params;
    params.kind = engine::ModelKind::gbdt;
    params.objective = task;
    params.num_outputs = outputs;

    size_t total_trees = static_cast<size_t>(spec.num_trees) * outputs;
    for (size_t t = 0; t < total_trees; ++t) {
        worker.begin_tree(t);
        auto request = [&](std::span<const PendingNode>) {
            std::map<uint32_t, Histogram> out;
            for (auto& [id, hist] : worker.build_level_hists())
                out.emplace(id, std::move(hist));
            return out;
        };
        auto publish = [&](std::span<const NodeDecision> decisions, bool) {
            worker.apply_decisions(decisions);
        };
        params.ensemble.push_back(detail::grow_tree(spec, request, publish));
    }
    return params;
}

} // namespace

ModelParams fit_gbdt(const scenario::Scenario& s, const engine::ModelSpec& spec,
                     GbdtProtocol protocol) {
    engine::ModelSpec model = spec;
    model.objective = s.task;
    model.validate();
    if (model.kind != engine::ModelKind::gbdt)
        throw InvalidSpec("fit_gbdt requires a gbdt model spec");

    if (protocol == GbdtProtocol::centralized) {
        scenario::DatasetTable pooled =
            s.setting == scenario::Setting::vertical
                ? scenario::joint_train_view(s)
                : pooled_train(s);
        return fit_gbdt_centralized(pooled, model, s.task, s.num_classes);
    }

    std::string algorithm = protocol == GbdtProtocol::horizontal_histsecagg
                                ? "histsecagg_gbdt"
                                : "vertical_gbdt";
    engine::TrainConfig train;
    Session session = make_session(s, model, train, algorithm);
    return run_in_process(s, session).aggregator.params;
}

} // namespace fedbench::protocol
