// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>

namespace lipdistill {

using Rng = std::mt19937_64;

/// Independent stream keyed by (seed, keys...). Streams for different key
/// tuples do not depend on each other or on evaluation order.
Rng derive_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

double uniform(Rng& rng, double lo, double hi);
double normal(Rng& rng);
/// Uniform integer in [lo, hi].
long uniform_int(Rng& rng, long lo, long hi);
double beta(Rng& rng, double alpha, double beta);

std::string save_rng_state(const Rng& rng);
Rng load_rng_state(const std::string& state);

}  // namespace lipdistill
