#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace fedbench::gbdt {

// Interior cut values per feature, ascending and deduplicated. A value v
// falls in the first bin whose cut is >= v (last bin when none is).
// Cuts are picked by rank from the pooled sorted values, so identical
// value multisets give identical edges with no float arithmetic involved.
using BinEdges = std::vector<std::vector<double>>;

BinEdges compute_bin_edges(std::span<const double> features, size_t rows,
                           size_t cols, size_t num_bins);
// Same selection applied to pre-sorted per-feature columns (the exact
// per-client summaries merged by the aggregator).
BinEdges bin_edges_from_sorted(const std::vector<std::vector<double>>& sorted,
                               size_t num_bins);

uint32_t bucket_of(std::span<const double> cuts, double value);

// Per-feature, per-bin accumulators of (sum_gradient, sum_hessian, count).
struct Histogram {
    size_t num_features = 0;
    size_t num_bins = 0;
    std::vector<double> sum_g;    // num_features * num_bins
    std::vector<double> sum_h;
    std::vector<int64_t> count;
    BinEdges edges;

    size_t at(size_t feature, size_t bin) const {
        return feature * num_bins + bin;
    }
    bool operator==(const Histogram&) const = default;
};

Histogram make_empty_histogram(const BinEdges& edges);

// Buckets every row by the shared edges and accumulates; `rows` indexes
// into the feature matrix when given, otherwise all rows contribute.
Histogram build_histogram(std::span<const double> features, size_t total_rows,
                          size_t cols, std::span<const double> gradients,
                          std::span<const double> hessians,
                          const BinEdges& edges,
                          std::span<const uint32_t> rows = {});

// Elementwise sum, folded left in the order given (callers pass parts in
// client id order so repeated merges are reproducible).
Histogram merge_histograms(std::span<const Histogram> parts);

// In-place fold of one part, same semantics as merge_histograms.
void merge_into(Histogram& accumulator, const Histogram& part);

struct Split {
    size_t feature = 0;
    uint32_t bin = 0;        // left = bins <= bin
    double split_value = 0;  // edge value at the cut
    double gain = 0;
    double grad_left = 0, hess_left = 0;
    double grad_right = 0, hess_right = 0;
    int64_t count_left = 0, count_right = 0;
};

// Maximizes 1/2 [G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)] over every
// (feature, bin) cut with non-empty sides; ties go to the lowest feature
// then lowest bin. Returns nothing when the best gain is <= min_gain.
std::optional<Split> find_best_split(const Histogram& hist, double lambda,
                                     double min_gain);

struct TreeNode {
    int32_t feature = -1;
    int32_t bin = -1;
    double split_value = 0.0;
    int32_t left = -1;   // -1 on leaves
    int32_t right = -1;
    double leaf_weight = 0.0;

    bool is_leaf() const { return left < 0; }
    bool operator==(const TreeNode&) const = default;
};

struct Tree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root

    double predict_margin(std::span<const double> x) const;
    int32_t leaf_index(std::span<const double> x) const;
    bool operator==(const Tree&) const = default;
};

// Second-order objective pieces for boosting.
struct GradHess {
    std::vector<double> grad;
    std::vector<double> hess;
};

// margins: rows x num_outputs, row-major. Binary uses logistic loss,
// multiclass softmax per output, regression squared loss (g = margin - y,
// h = 1).
GradHess boosting_gradients(std::span<const double> margins,
                            std::span<const double> labels, size_t num_outputs,
                            size_t output, bool regression);

double leaf_weight(double sum_g, double sum_h, double lambda,
                   double learning_rate);

} // namespace fedbench::gbdt
