#include "fedbench/gbdt.hpp"

#include <algorithm>
#include <cmath>

#include "fedbench/errors.hpp"

namespace fedbench::gbdt {

BinEdges bin_edges_from_sorted(const std::vector<std::vector<double>>& sorted,
                               size_t num_bins) {
    if (num_bins < 2) throw InvalidSpec("num_bins must be >= 2");
    BinEdges edges(sorted.size());
    for (size_t f = 0; f < sorted.size(); ++f) {
        const auto& values = sorted[f];
        size_t n = values.size();
        std::vector<double> cuts;
        for (size_t k = 1; k < num_bins && n > 0; ++k) {
            size_t rank = k * n / num_bins;
            if (rank >= n) rank = n - 1;
            cuts.push_back(values[rank]);
        }
        cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
        edges[f] = std::move(cuts);
    }
    return edges;
}

BinEdges compute_bin_edges(std::span<const double> features, size_t rows,
                           size_t cols, size_t num_bins) {
    std::vector<std::vector<double>> sorted(cols);
    for (size_t f = 0; f < cols; ++f) {
        auto& column = sorted[f];
        column.reserve(rows);
        for (size_t r = 0; r < rows; ++r) column.push_back(features[r * cols + f]);
        std::sort(column.begin(), column.end());
    }
    return bin_edges_from_sorted(sorted, num_bins);
}

uint32_t bucket_of(std::span<const double> cuts, double value) {
    auto it = std::lower_bound(cuts.begin(), cuts.end(), value);
    return static_cast<uint32_t>(it - cuts.begin());
}

Histogram make_empty_histogram(const BinEdges& edges) {
    Histogram h;
    h.num_features = edges.size();
    h.num_bins = 1;
    for (const auto& cuts : edges) h.num_bins = std::max(h.num_bins, cuts.size() + 1);
    h.sum_g.assign(h.num_features * h.num_bins, 0.0);
    h.sum_h.assign(h.num_features * h.num_bins, 0.0);
    h.count.assign(h.num_features * h.num_bins, 0);
    h.edges = edges;
    return h;
}

Histogram build_histogram(std::span<const double> features, size_t total_rows,
                          size_t cols, std::span<const double> gradients,
                          std::span<const double> hessians,
                          const BinEdges& edges,
                          std::span<const uint32_t> rows) {
    if (edges.size() != cols)
        throw EdgeMismatch("edges cover " + std::to_string(edges.size()) +
                           " features, data has " + std::to_string(cols));
    if (gradients.size() != total_rows || hessians.size() != total_rows)
        throw EdgeMismatch("gradient/hessian length does not match row count");

    Histogram h = make_empty_histogram(edges);
    auto add_row = [&](size_t r) {
        const double* x = features.data() + r * cols;
        for (size_t f = 0; f < cols; ++f) {
            uint32_t b = bucket_of(edges[f], x[f]);
            size_t slot = h.at(f, b);
            h.sum_g[slot] += gradients[r];
            h.sum_h[slot] += hessians[r];
            h.count[slot] += 1;
        }
    };
    if (rows.empty()) {
        for (size_t r = 0; r < total_rows; ++r) add_row(r);
    } else {
        for (uint32_t r : rows) add_row(r);
    }
    return h;
}

void merge_into(Histogram& accumulator, const Histogram& part) {
    if (accumulator.edges != part.edges)
        throw EdgeMismatch("histogram bin edges differ between parts");
    for (size_t i = 0; i < accumulator.sum_g.size(); ++i) {
        accumulator.sum_g[i] += part.sum_g[i];
        accumulator.sum_h[i] += part.sum_h[i];
        accumulator.count[i] += part.count[i];
    }
}

Histogram merge_histograms(std::span<const Histogram> parts) {
    if (parts.empty()) throw EdgeMismatch("no histograms to merge");
    Histogram out = parts.front();
    for (size_t i = 1; i < parts.size(); ++i) merge_into(out, parts[i]);
    return out;
}

std::optional<Split> find_best_split(const Histogram& hist, double lambda,
                                     double min_gain) {
    std::optional<Split> best;
    for (size_t f = 0; f < hist.num_features; ++f) {
        const auto& cuts = hist.edges[f];
        double total_g = 0.0, total_h = 0.0;
        int64_t total_n = 0;
        for (size_t b = 0; b < hist.num_bins; ++b) {
            size_t slot = hist.at(f, b);
            total_g += hist.sum_g[slot];
            total_h += hist.sum_h[slot];
            total_n += hist.count[slot];
        }
        double parent_term =
            total_h + lambda > 0.0 ? total_g * total_g / (total_h + lambda) : 0.0;

        double left_g = 0.0, left_h = 0.0;
        int64_t left_n = 0;
        for (size_t b = 0; b + 1 < hist.num_bins && b < cuts.size(); ++b) {
            size_t slot = hist.at(f, b);
            left_g += hist.sum_g[slot];
            left_h += hist.sum_h[slot];
            left_n += hist.count[slot];
            if (left_n == 0 || left_n == total_n) continue;
            double right_g = total_g - left_g;
            double right_h = total_h - left_h;
            if (left_h + lambda <= 0.0 || right_h + lambda <= 0.0) continue;
            double gain = 0.5 * (left_g * left_g / (left_h + lambda) +
                                 right_g * right_g / (right_h + lambda) -
                                 parent_term);
            if (gain > min_gain && (!best || gain > best->gain)) {
                Split s;
                s.feature = f;
                s.bin = static_cast<uint32_t>(b);
                s.split_value = cuts[b];
                s.gain = gain;
                s.grad_left = left_g;
                s.hess_left = left_h;
                s.grad_right = right_g;
                s.hess_right = right_h;
                s.count_left = left_n;
                s.count_right = total_n - left_n;
                best = s;
            }
        }
    }
    return best;
}

double Tree::predict_margin(std::span<const double> x) const {
    return nodes[static_cast<size_t>(leaf_index(x))].leaf_weight;
}

int32_t Tree::leaf_index(std::span<const double> x) const {
    int32_t node = 0;
    while (!nodes[static_cast<size_t>(node)].is_leaf()) {
        const TreeNode& n = nodes[static_cast<size_t>(node)];
        node = x[static_cast<size_t>(n.feature)] <= n.split_value ? n.left
                                                                  : n.right;
    }
    return node;
}

GradHess boosting_gradients(std::span<const double> margins,
                            std::span<const double> labels, size_t num_outputs,
                            size_t output, bool regression) {
    size_t n = labels.size();
    GradHess gh;
    gh.grad.resize(n);
    gh.hess.resize(n);
    if (regression) {
        for (size_t i = 0; i < n; ++i) {
            gh.grad[i] = margins[i] - labels[i];
            gh.hess[i] = 1.0;
        }
        return gh;
    }
    if (num_outputs == 1) {
        for (size_t i = 0; i < n; ++i) {
            double p = 1.0 / (1.0 + std::exp(-margins[i]));
            gh.grad[i] = p - labels[i];
            gh.hess[i] = std::max(p * (1.0 - p), 1e-16);
        }
        return gh;
    }
    for (size_t i = 0; i < n; ++i) {
        const double* row = margins.data() + i * num_outputs;
        double max_m = row[0];
        for (size_t c = 1; c < num_outputs; ++c) max_m = std::max(max_m, row[c]);
        double denom = 0.0;
        for (size_t c = 0; c < num_outputs; ++c)
            denom += std::exp(row[c] - max_m);
        double p = std::exp(row[output] - max_m) / denom;
        double y = labels[i] == static_cast<double>(output) ? 1.0 : 0.0;
        gh.grad[i] = p - y;
        gh.hess[i] = std::max(p * (1.0 - p), 1e-16);
    }
    return gh;
}

double leaf_weight(double sum_g, double sum_h, double lambda,
                   double learning_rate) {
    if (sum_h + lambda <= 0.0) return 0.0;
    return -sum_g / (sum_h + lambda) * learning_rate;
}

} // namespace fedbench::gbdt
