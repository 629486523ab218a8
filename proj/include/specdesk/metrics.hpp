#pragma once

#include <specdesk/rng.hpp>
#include <specdesk/specdec.hpp>
#include <specdesk/tinylm.hpp>

#include <cstdint>
#include <vector>

namespace specdesk::metrics {

// ratio of draft to target single-forward latency
struct CostCoefficient {
    double c = 0.0;
    std::vector<double> target_seconds;
    std::vector<double> draft_seconds;
};

// alpha = accept / (accept + reject)
double acceptance_rate(int64_t accept, int64_t reject);
double acceptance_rate(const specdec::SDStats& stats);

// tau(alpha, gamma) = (1 - alpha^(gamma+1)) / (1 - alpha), with the limit
// gamma + 1 at alpha = 1
double block_efficiency(double alpha, int gamma);

// the same quantity as the finite geometric series sum_{i=0}^{gamma} alpha^i;
// kept separate as an algebraic cross-check
double block_efficiency_series(double alpha, int gamma);

// tau / (gamma * c + 1)
double speedup(double tau, int gamma, double c);

// Monte-Carlo mean tokens per block under i.i.d. per-token acceptance;
// validates the closed form under its own assumption
double simulate_block_efficiency(double alpha, int gamma, int64_t blocks, Rng& rng);

// median single-forward time ratio over `trials` timed passes per model
CostCoefficient measure_cost_coefficient(const tinylm::Model& target, const tinylm::Model& draft,
                                         const std::vector<int32_t>& probe_seq, int trials);

}  // namespace specdesk::metrics
