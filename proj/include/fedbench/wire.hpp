#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedbench/errors.hpp"

namespace fedbench::wire {

// Little-endian payload packing for protocol frames.
struct Writer {
    std::vector<uint8_t> out;

    void u8(uint8_t v) { out.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
    }
    void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
    void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
    void doubles(std::span<const double> values) {
        u64(values.size());
        for (double v : values) f64(v);
    }
    void i64s(std::span<const int64_t> values) {
        u64(values.size());
        for (int64_t v : values) i64(v);
    }
    void bytes(std::span<const uint8_t> data) {
        u64(data.size());
        out.insert(out.end(), data.begin(), data.end());
    }
};

struct Reader {
    std::span<const uint8_t> in;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > in.size()) throw MalformedHeader("short payload");
    }
    uint8_t u8() {
        need(1);
        return in[pos++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(in[pos++]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(in[pos++]) << (8 * i);
        return v;
    }
    int64_t i64() { return static_cast<int64_t>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::vector<double> doubles() {
        uint64_t n = u64();
        need(n * 8);
        std::vector<double> out;
        out.reserve(n);
        for (uint64_t i = 0; i < n; ++i) out.push_back(f64());
        return out;
    }
    std::vector<int64_t> i64s() {
        uint64_t n = u64();
        need(n * 8);
        std::vector<int64_t> out;
        out.reserve(n);
        for (uint64_t i = 0; i < n; ++i) out.push_back(i64());
        return out;
    }
    std::vector<uint8_t> bytes() {
        uint64_t n = u64();
        need(n);
        std::vector<uint8_t> out(in.begin() + pos, in.begin() + pos + n);
        pos += n;
        return out;
    }
    void expect_done() const {
        if (pos != in.size()) throw MalformedHeader("trailing payload bytes");
    }
};

} // namespace fedbench::wire
