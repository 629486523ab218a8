#include <specdesk/metrics.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace specdesk::metrics {

double acceptance_rate(int64_t accept, int64_t reject) {
    if (accept < 0 || reject < 0) {
        throw std::invalid_argument("acceptance_rate: negative counts");
    }
    if (accept + reject == 0) {
        throw std::invalid_argument("acceptance_rate: accept + reject must be positive");
    }
    return static_cast<double>(accept) / static_cast<double>(accept + reject);
}

double acceptance_rate(const specdec::SDStats& stats) {
    return acceptance_rate(stats.accept, stats.reject);
}

double block_efficiency(double alpha, int gamma) {
    if (alpha < 0.0 || alpha > 1.0) {
        throw std::invalid_argument("block_efficiency: alpha must be in [0,1], got " + std::to_string(alpha));
    }
    if (gamma < 1) {
        throw std::invalid_argument("block_efficiency: gamma must be >= 1, got " + std::to_string(gamma));
    }
    if (alpha == 1.0) {
        return static_cast<double>(gamma) + 1.0;
    }
    return (1.0 - std::pow(alpha, gamma + 1)) / (1.0 - alpha);
}

double block_efficiency_series(double alpha, int gamma) {
    if (alpha < 0.0 || alpha > 1.0) {
        throw std::invalid_argument("block_efficiency_series: alpha must be in [0,1]");
    }
    if (gamma < 1) {
        throw std::invalid_argument("block_efficiency_series: gamma must be >= 1");
    }
    double sum = 0.0, term = 1.0;
    for (int i = 0; i <= gamma; ++i) {
        sum += term;
        term *= alpha;
    }
    return sum;
}

double speedup(double tau, int gamma, double c) {
    if (tau <= 0.0 || gamma <= 0 || c <= 0.0) {
        throw std::invalid_argument("speedup: tau, gamma and c must all be positive");
    }
    return tau / (gamma * c + 1.0);
}

double simulate_block_efficiency(double alpha, int gamma, int64_t blocks, Rng& rng) {
    if (blocks < 1) {
        throw std::invalid_argument("simulate_block_efficiency: blocks must be >= 1");
    }
    int64_t tokens = 0;
    for (int64_t b = 0; b < blocks; ++b) {
        int accepted = 0;
        while (accepted < gamma && rng.bernoulli(alpha)) {
            ++accepted;
        }
        tokens += accepted + 1;  // rejected or bonus token from the target
    }
    return static_cast<double>(tokens) / static_cast<double>(blocks);
}

CostCoefficient measure_cost_coefficient(const tinylm::Model& target, const tinylm::Model& draft,
                                         const std::vector<int32_t>& probe_seq, int trials) {
    if (trials < 3) {
        throw std::invalid_argument("measure_cost_coefficient: trials must be >= 3, got " +
                                    std::to_string(trials));
    }
    if (probe_seq.empty()) {
        throw std::invalid_argument("measure_cost_coefficient: empty probe sequence");
    }
    using clock = std::chrono::steady_clock;
    auto window = [](const tinylm::Model& m, const std::vector<int32_t>& seq) {
        const int take = std::min<int>(static_cast<int>(seq.size()), m.cfg.context_len);
        return std::vector<int32_t>(seq.end() - take, seq.end());
    };
    auto time_one = [&](const tinylm::Model& m, const std::vector<int32_t>& seq) {
        const auto t0 = clock::now();
        volatile float sink = m.forward_seq(seq)->data[0];
        (void)sink;
        return std::chrono::duration<double>(clock::now() - t0).count();
    };
    const auto target_probe = window(target, probe_seq);
    const auto draft_probe = window(draft, probe_seq);
    // warm up both paths before timing
    time_one(target, target_probe);
    time_one(draft, draft_probe);
    CostCoefficient out;
    for (int t = 0; t < trials; ++t) {
        out.target_seconds.push_back(time_one(target, target_probe));
        out.draft_seconds.push_back(time_one(draft, draft_probe));
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    out.c = median(out.draft_seconds) / median(out.target_seconds);
    return out;
}

}  // namespace specdesk::metrics
