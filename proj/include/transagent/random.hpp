#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include "transagent/autodiff.hpp"

namespace transagent {

std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// splitmix64 finalizer; combines a seed with a stream tag.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);
std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag);

using Rng = std::mt19937_64;

Matrix normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev = 1.0);

/// Rounds every entry to the nearest binary32 value.
Matrix round_to_float(const Matrix& m);

}  // namespace transagent
