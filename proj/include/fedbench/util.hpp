#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace fedbench {

// Shortest decimal representation that round-trips the double, with a
// trailing ".0" on integral values so the output matches the reference
// log format exactly.
std::string format_double(double value);

// SHA-256 hex digest.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& data);
std::string sha256_file_hex(const std::filesystem::path& path);

// Stateless mixer for deriving independent sub-seeds from (seed, tags).
uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0);

inline std::mt19937_64 make_rng(uint64_t seed, uint64_t a, uint64_t b = 0,
                                uint64_t c = 0) {
    return std::mt19937_64(mix_seed(seed, a, b, c));
}

// Uniform in [0,1) from the engine's raw 64-bit output; the standard
// distributions are implementation-defined, these are not.
double uniform01(std::mt19937_64& rng);
// Unbiased uniform integer in [0, bound).
uint64_t bounded_rand(std::mt19937_64& rng, uint64_t bound);
// In-place Fisher-Yates shuffle with a fixed, portable draw sequence.
template <typename T>
void deterministic_shuffle(std::vector<T>& items, std::mt19937_64& rng) {
    for (size_t i = items.size(); i > 1; --i)
        std::swap(items[i - 1], items[bounded_rand(rng, i)]);
}
// Uniform in [lo, hi).
double uniform_range(std::mt19937_64& rng, double lo, double hi);
// Standard normal via Box-Muller.
double normal01(std::mt19937_64& rng);

double wall_clock_seconds();

// Root of the shipped data files (scenario catalog, advisor matrix).
// FEDBENCH_DATA_DIR overrides the compiled-in default.
std::filesystem::path data_dir();

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

} // namespace fedbench
