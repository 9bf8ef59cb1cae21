#pragma once

#include <cstdint>
#include <vector>

#include "rerrsim/scenario.hpp"

namespace rerrsim::harness {

struct OracleRow {
    std::uint32_t n = 0;
    std::uint64_t samples = 0;
    double empirical = 0.0;  // fraction of trials in which the n-th preceding packet was lost
    double predicted = 0.0;  // mean packet_loss_prob for the same packets
};

struct OracleFrameRow {
    mdc::FrameId frame = 0;
    std::uint64_t samples = 0;
    double empirical = 0.0;  // fraction of trials with at least one of the frame's packets lost
    double predicted = 0.0;  // mean of 1 - prod(1 - Pr) over the frame's scored packets
};

struct OracleResult {
    std::uint32_t trials = 0;
    std::uint32_t trials_with_rerr = 0;
    std::uint32_t conservation_failures = 0;  // trials whose conservation check failed
    std::uint32_t effort_failures = 0;        // trials with a node over the retry bound
    std::vector<OracleRow> rows;
    std::vector<OracleFrameRow> frames;
};

/// Monte Carlo check of the per-packet loss estimate.
///
/// Trial i runs the scenario with seed config.seed + i and every configured
/// failure shifted by a uniform draw from [0, failure_jitter]. The n-th
/// preceding packet is counted back from the first RERR that reaches the
/// flow source (from the last injection when no RERR arrives). A packet is
/// lost when it never reaches the destination. The channel's GOOD-state loss
/// lambda_g has no physical counterpart in the simulated links, so it is
/// applied as an independent Bernoulli(lambda_g) draw to every packet that was
/// injected before the failure and arrived.
OracleResult monte_carlo_loss_oracle(const ScenarioConfig& config, std::uint32_t trials);

}  // namespace rerrsim::harness
