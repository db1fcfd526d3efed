#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedbench/dataset.hpp"

namespace fedbench::scenario {

enum class Setting { horizontal_cross_silo, horizontal_cross_device, vertical };
enum class Task { binary_classification, multiclass_classification, regression };
enum class Metric { accuracy, auc, mse };

std::string setting_name(Setting s);
std::string task_name(Task t);
std::string metric_name(Metric m);
Setting setting_from_name(const std::string& name);
Task task_from_name(const std::string& name);
Metric metric_from_name(const std::string& name);

struct ClientPartition {
    uint32_t client_id = 0;
    DatasetTable train;
    DatasetTable test;

    bool operator==(const ClientPartition&) const = default;
};

struct VerticalLayout {
    uint32_t label_party = 0;
    std::map<uint32_t, size_t> features_per_party;

    bool operator==(const VerticalLayout&) const = default;
};

struct Scenario {
    std::string name;
    Setting setting = Setting::horizontal_cross_silo;
    Task task = Task::binary_classification;
    Metric metric = Metric::auc;
    size_t num_classes = 2;
    std::vector<ClientPartition> clients;
    std::optional<VerticalLayout> vertical_split;

    size_t num_clients() const { return clients.size(); }
    // Width of the joint feature space (sum over parties when vertical).
    size_t total_features() const;
    size_t total_samples() const;
    const ClientPartition& client(uint32_t id) const;
};

// Declarative input for the deterministic data generator. Labels come from
// a fixed random linear ground truth: sign/argmax/value of W·x + b plus
// `noise` (and Bernoulli sampling for binary when label_noise is used).
struct SyntheticSpec {
    std::string name = "synthetic";
    Setting setting = Setting::horizontal_cross_silo;
    Task task = Task::binary_classification;
    size_t num_classes = 2;
    size_t clients = 2;
    size_t features = 10;
    std::vector<size_t> rows_per_client;  // one entry, or one per client
    double noise = 0.0;
    double test_fraction = 0.2;
    // Binary only: when > 0, labels are sampled Bernoulli(sigmoid(scale·z))
    // instead of thresholded, so the best reachable AUC is tunable.
    double bernoulli_scale = 0.0;
    // Multiclass only: resample rows whose top-two class scores are closer
    // than this, leaving a clean separation margin.
    double class_margin = 0.0;
    std::optional<VerticalLayout> vertical;
};

Scenario generate_synthetic(const SyntheticSpec& spec, uint64_t seed);

// Catalog-backed loading with on-disk caching under
// `<cache_dir>/<name>/<client>_<split>.csv`. First use materializes the
// cache (bundled copy, deterministic generation, or download), verifying
// SHA-256 checksums; later loads reuse the verified cache.
Scenario load_scenario(const std::string& name,
                       const std::filesystem::path& cache_dir);

// Names available in the catalog directory, sorted.
std::vector<std::string> catalog_names();
// Resolution order: FEDBENCH_DATA_DIR env var, then the built-in default.
std::filesystem::path catalog_dir();

// Manifest header without touching the data files; cheap enough for
// config validation.
struct CatalogEntry {
    std::string name;
    Setting setting = Setting::horizontal_cross_silo;
    Task task = Task::binary_classification;
    Metric metric = Metric::auc;
    size_t num_classes = 2;
    size_t num_clients = 0;
    bool fetch_required = false;  // data comes from a download, not bundled
};
CatalogEntry catalog_info(const std::string& name);

// Reorders every party's tables so ids match positionally (train and test
// aligned independently); rows missing from any party are dropped. The
// lowest client id's ordering wins.
Scenario align_vertical(const Scenario& s);

// Horizontal: concatenation of client test tables in client_id order,
// duplicates retained. Vertical: aligned joint test rows, features
// side-by-side in client_id order, labels from the label party.
DatasetTable global_test_view(const Scenario& s);

// Vertical only: the aligned joint training rows (same column order as
// global_test_view). Centralized baselines train on this.
DatasetTable joint_train_view(const Scenario& s);

// accuracy: fraction matching after argmax (multi-score rows) or 0.5
// thresholding; auc: Mann-Whitney with average-rank ties; mse: mean
// squared error. `predictions` holds one score per row, or row-major
// per-class scores whose count is a multiple of `labels`.
double evaluate(std::span<const double> predictions,
                std::span<const double> labels, Metric metric);

// Deterministic 80/20-style split by id hash; returns true when the row
// belongs to the test split.
bool id_hash_test_split(const std::string& scenario_name, const std::string& id,
                        double test_fraction);

} // namespace fedbench::scenario
