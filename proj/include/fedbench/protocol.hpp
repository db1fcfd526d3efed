#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedbench/engine.hpp"
#include "fedbench/eventlog.hpp"
#include "fedbench/scenario.hpp"
#include "fedbench/transport.hpp"

namespace fedbench::protocol {

// Everything both sides of a run already know from the experiment config;
// only data-dependent payloads go over the wire.
struct Session {
    std::string algorithm;  // fedavg | histsecagg_gbdt | vertical_regression |
                            // vertical_gbdt
    engine::ModelSpec model;
    engine::TrainConfig train;
    scenario::Task task = scenario::Task::binary_classification;
    size_t num_classes = 2;
    size_t num_features = 0;  // joint feature width
    uint32_t total_clients = 0;
    uint32_t label_party = 0;          // vertical only
    std::vector<uint32_t> client_ids;  // ascending
    std::vector<size_t> party_feature_counts;  // by client_ids order
    bool mask_histograms = false;
};

Session make_session(const scenario::Scenario& s, const engine::ModelSpec& model,
                     const engine::TrainConfig& train,
                     const std::string& algorithm,
                     bool mask_histograms = false);

// Seed derivations shared by the protocol drivers and their oracles.
uint64_t round_client_seed(uint64_t seed, int round, uint32_t client_id);
uint64_t vertical_round_seed(uint64_t seed, int round);

using RoundHook =
    std::function<void(int round, const engine::ModelParams& params)>;

struct AggregatorResult {
    engine::ModelParams params;
    std::string metric_name;
    double metric_value = 0.0;  // percent for accuracy/auc, raw for mse
};

// Runs the configured algorithm as the aggregator over the given client
// endpoints (indexed in client order), evaluates the final model on the
// global test view, and emits the training/computation/model_evaluation
// events on `log`.
AggregatorResult run_aggregator(std::span<transport::Endpoint* const> clients,
                                const scenario::Scenario& s,
                                const Session& session, eventlog::Logger* log,
                                const RoundHook& on_round = {});

// Client/party side of the same run; `client_id` picks this agent's
// partition out of the scenario.
void run_client(transport::Endpoint& server, const scenario::Scenario& s,
                uint32_t client_id, const Session& session,
                eventlog::Logger* log);

// Per-algorithm drivers (run_* dispatch to these). Endpoints are indexed
// by client id.
engine::ModelParams fedavg_aggregator(
    std::span<transport::Endpoint* const> clients, const Session& session,
    eventlog::Logger* log, const RoundHook& on_round = {});
void fedavg_client(transport::Endpoint& server, uint32_t client_id,
                   const scenario::DatasetTable& train_data,
                   const Session& session, eventlog::Logger* log);

engine::ModelParams histsecagg_aggregator(
    std::span<transport::Endpoint* const> clients, const Session& session,
    eventlog::Logger* log);
void histsecagg_client(transport::Endpoint& server, uint32_t client_id,
                       const scenario::DatasetTable& train_data,
                       const Session& session, eventlog::Logger* log);

engine::ModelParams vertical_regression_aggregator(
    std::span<transport::Endpoint* const> parties, const Session& session,
    eventlog::Logger* log);
void vertical_regression_party(transport::Endpoint& server, uint32_t party_id,
                               const scenario::ClientPartition& slice,
                               const Session& session, eventlog::Logger* log);

engine::ModelParams vertical_gbdt_aggregator(
    std::span<transport::Endpoint* const> parties, const Session& session,
    eventlog::Logger* log);
void vertical_gbdt_party(transport::Endpoint& server, uint32_t party_id,
                         const scenario::ClientPartition& slice,
                         const Session& session, eventlog::Logger* log);

// --- engine-level fits ------------------------------------------------------

enum class GbdtProtocol {
    centralized,
    horizontal_histsecagg,
    vertical_secureboost_plain,
};

// Boosted-tree training: `centralized` pools every client's rows locally;
// the federated modes run the real message pattern over in-process
// channels. Shared bin edges make the federated runs node-identical to
// the centralized fit.
engine::ModelParams fit_gbdt(const scenario::Scenario& s,
                             const engine::ModelSpec& spec,
                             GbdtProtocol protocol);

// --- in-process runs --------------------------------------------------------

struct InProcessResult {
    AggregatorResult aggregator;
    uint64_t transport_bytes = 0;   // independent counter over send+recv
    uint64_t transport_frames = 0;
    std::vector<size_t> payload_sizes;  // per frame, send order
};

// One full run (all parties as threads over the in-memory hub). Loggers
// are optional; pass one per agent to capture logs (index 0 aggregator,
// then clients in id order).
InProcessResult run_in_process(const scenario::Scenario& s,
                               const Session& session,
                               std::span<eventlog::Logger* const> loggers = {},
                               const RoundHook& on_round = {});

// --- masked histogram codec -------------------------------------------------

// Fixed-point encoding with pairwise seeded masks that cancel exactly in
// the modular sum; the merged result matches the plain merge up to the
// 2^-40 quantization step (counts are exact).
constexpr double kMaskFixedPointScale = 1099511627776.0;  // 2^40

std::vector<int64_t> mask_values(std::span<const double> values, double scale,
                                 uint64_t seed_base, uint32_t self,
                                 std::span<const uint32_t> all_clients);
void masked_sum_into(std::vector<int64_t>& accumulator,
                     std::span<const int64_t> part);
std::vector<double> dequantize(std::span<const int64_t> accumulator,
                               double scale);

} // namespace fedbench::protocol
