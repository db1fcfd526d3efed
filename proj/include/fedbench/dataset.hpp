#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedbench::scenario {

// Dense tabular data: one string id per row, row-major 64-bit features,
// optional labels (class indices stored as whole doubles).
struct DatasetTable {
    std::vector<std::string> ids;
    size_t num_features = 0;
    std::vector<double> features;
    std::optional<std::vector<double>> labels;

    size_t num_rows() const { return ids.size(); }

    std::span<const double> row(size_t i) const {
        return {features.data() + i * num_features, num_features};
    }

    void append_row(std::string id, std::span<const double> values,
                    std::optional<double> label);
    // Copies row `i` of `src` (including its label, if any) into this table.
    void append_row_from(const DatasetTable& src, size_t i);

    bool operator==(const DatasetTable&) const = default;
};

// CSV layout: header row, first column `id`, feature columns, and a final
// `y` column when labels are present. Floats are written shortest
// round-trip so files are byte-stable.
std::string to_csv(const DatasetTable& table);
DatasetTable from_csv(const std::string& text);
void write_csv(const DatasetTable& table, const std::filesystem::path& path);
DatasetTable read_csv(const std::filesystem::path& path);

} // namespace fedbench::scenario
