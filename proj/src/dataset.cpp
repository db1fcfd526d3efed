#include "fedbench/dataset.hpp"

#include <charconv>
#include <cstring>

#include "fedbench/errors.hpp"
#include "fedbench/util.hpp"

namespace fedbench::scenario {

void DatasetTable::append_row(std::string id, std::span<const double> values,
                              std::optional<double> label) {
    if (num_features == 0 && features.empty()) num_features = values.size();
    if (values.size() != num_features)
        throw ShapeMismatch("row width " + std::to_string(values.size()) +
                            " != " + std::to_string(num_features));
    ids.push_back(std::move(id));
    features.insert(features.end(), values.begin(), values.end());
    if (label) {
        if (!labels) labels.emplace();
        labels->push_back(*label);
    }
    if (labels && labels->size() != ids.size())
        throw ShapeMismatch("label count out of step with row count");
}

void DatasetTable::append_row_from(const DatasetTable& src, size_t i) {
    std::optional<double> label;
    if (src.labels) label = (*src.labels)[i];
    append_row(src.ids[i], src.row(i), label);
}

std::string to_csv(const DatasetTable& table) {
    std::string out = "id";
    for (size_t f = 0; f < table.num_features; ++f)
        out += ",x" + std::to_string(f);
    if (table.labels) out += ",y";
    out += "\n";
    for (size_t i = 0; i < table.num_rows(); ++i) {
        out += table.ids[i];
        auto row = table.row(i);
        for (double v : row) {
            out += ",";
            out += format_double(v);
        }
        if (table.labels) {
            out += ",";
            out += format_double((*table.labels)[i]);
        }
        out += "\n";
    }
    return out;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    for (;;) {
        size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r')
        out.back().pop_back();
    return out;
}

double parse_double(const std::string& s, size_t line_no) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ParseError("bad number '" + s + "' at csv line " +
                         std::to_string(line_no));
    return v;
}

} // namespace

DatasetTable from_csv(const std::string& text) {
    DatasetTable table;
    size_t pos = 0;
    size_t line_no = 0;
    bool has_label = false;
    size_t columns = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        std::string line = text.substr(
            pos, eol == std::string::npos ? std::string::npos : eol - pos);
        pos = eol == std::string::npos ? text.size() : eol + 1;
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_line(line);
        if (line_no == 1) {
            if (fields.empty() || fields[0] != "id")
                throw ParseError("csv must start with an 'id' column");
            columns = fields.size();
            has_label = columns >= 2 && fields.back() == "y";
            table.num_features = columns - 1 - (has_label ? 1 : 0);
            if (has_label) table.labels.emplace();
            continue;
        }
        if (fields.size() != columns)
            throw ParseError("csv line " + std::to_string(line_no) + " has " +
                             std::to_string(fields.size()) + " fields, expected " +
                             std::to_string(columns));
        table.ids.push_back(fields[0]);
        for (size_t f = 0; f < table.num_features; ++f)
            table.features.push_back(parse_double(fields[1 + f], line_no));
        if (has_label)
            table.labels->push_back(parse_double(fields.back(), line_no));
    }
    return table;
}

void write_csv(const DatasetTable& table, const std::filesystem::path& path) {
    write_text_file(path, to_csv(table));
}

DatasetTable read_csv(const std::filesystem::path& path) {
    return from_csv(read_text_file(path));
}

} // namespace fedbench::scenario
