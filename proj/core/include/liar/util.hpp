#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>

namespace liar {

using Rng = std::mt19937_64;

/// Independent deterministic stream for (seed, stream tag, extra words).
Rng make_rng(std::uint64_t seed, std::string_view stream,
             std::initializer_list<std::uint64_t> extra = {});

std::size_t uniform_index(Rng& rng, std::size_t n);
double uniform_unit(Rng& rng);
/// Standard normal via Box-Muller on uniform_unit.
double normal(Rng& rng);

std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                    std::uint64_t h = 14695981039346656037ull);
std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 14695981039346656037ull);
std::string hex64(std::uint64_t v);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

/// Runs fn(i) for i in [0, n) on up to `threads` workers in contiguous blocks.
/// Callers write only to slot i, so results do not depend on the thread count.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

}  // namespace liar
