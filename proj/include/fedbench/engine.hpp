#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedbench/dataset.hpp"
#include "fedbench/gbdt.hpp"
#include "fedbench/scenario.hpp"

namespace fedbench::engine {

enum class ModelKind { logistic_regression, linear_regression, mlp, gbdt };

std::string model_kind_name(ModelKind k);
ModelKind model_kind_from_name(const std::string& name);

struct GbdtSpec {
    int num_trees = 64;
    int num_bins = 64;
    int max_depth = 6;
    double learning_rate = 0.1;
    double lambda = 1.0;
    double min_gain = 0.0;

    bool operator==(const GbdtSpec&) const = default;
};

struct ModelSpec {
    ModelKind kind = ModelKind::logistic_regression;
    std::vector<size_t> hidden_layers;  // mlp only
    GbdtSpec gbdt;
    // Loss/link selection; set from the scenario's task by the config layer.
    scenario::Task objective = scenario::Task::binary_classification;

    void validate() const;
    bool operator==(const ModelSpec&) const = default;
};

struct LayerShape {
    uint32_t in = 0;
    uint32_t out = 0;
    bool operator==(const LayerShape&) const = default;
};

struct ModelParams {
    ModelKind kind = ModelKind::logistic_regression;
    scenario::Task objective = scenario::Task::binary_classification;
    size_t num_outputs = 1;
    std::vector<LayerShape> shapes;  // dense models: [W|b] per layer
    std::vector<double> dense;
    std::vector<gbdt::Tree> ensemble;  // gbdt: trees, round-major by output

    size_t param_count() const { return dense.size(); }
    size_t num_features() const;
    bool operator==(const ModelParams&) const = default;
};

struct TrainConfig {
    int rounds = 30;
    int clients_per_round = 0;  // 0 = every client
    int local_epochs = 1;
    int batch_size = 32;
    double learning_rate = 0.01;
    double momentum = 0.9;
    uint64_t seed = 42;

    bool operator==(const TrainConfig&) const = default;
};

struct ClientUpdate {
    uint32_t client_id = 0;
    ModelParams new_params;
    int64_t num_samples = 0;
    double train_loss = 0.0;
};

// Regression weights start at zero; MLP weights are uniform in
// +-sqrt(6/(fan_in+fan_out)) with zero biases, deterministic in `seed`.
ModelParams init_model(const ModelSpec& spec, size_t num_features,
                       size_t num_classes, uint64_t seed);

// Runs exactly cfg.local_epochs full passes of mini-batch SGD with
// classical momentum (v = mu*v - lr*g; p += v) over a seeded shuffle.
// The momentum buffer is round-local: it starts at zero every call.
ClientUpdate local_train(const ModelParams& params,
                         const scenario::DatasetTable& data,
                         const TrainConfig& cfg);

// Elementwise average weighted by num_samples / total samples, folded in
// the order given.
ModelParams aggregate_fedavg(std::span<const ClientUpdate> updates);

// k distinct ids, uniform without replacement, deterministic in
// (seed, round); returned ascending.
std::vector<uint32_t> sample_clients(int total, int k, int round,
                                     uint64_t seed);

// Sigmoid probability (binary), row-major softmax scores (multiclass),
// raw values (regression). GBDT sums tree margins through the same links.
std::vector<double> predict(const ModelParams& params,
                            std::span<const double> features, size_t rows,
                            size_t cols);

// Mean training loss of `params` on `data` (the loss local_train descends).
double dataset_loss(const ModelParams& params,
                    const scenario::DatasetTable& data);

// --- serialization ----------------------------------------------------------

// Little-endian, shape metadata first; byte-stable for a given value.
std::vector<uint8_t> serialize_params(const ModelParams& params);
ModelParams deserialize_params(std::span<const uint8_t> bytes);
std::vector<uint8_t> serialize_update(const ClientUpdate& update);
ClientUpdate deserialize_update(std::span<const uint8_t> bytes);

// Versioned JSON checkpoint with exact float round-trip.
void save_checkpoint(const ModelParams& params,
                     const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

// Analytic flop estimates used for the `flop` log metric.
int64_t train_flops(const ModelParams& params, int64_t rows, int epochs);
int64_t aggregate_flops(const ModelParams& params, size_t num_updates);

} // namespace fedbench::engine
