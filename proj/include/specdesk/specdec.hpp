#pragma once

#include <specdesk/tinylm.hpp>

#include <cstdint>
#include <vector>

namespace specdesk::specdec {

struct SDConfig {
    int gamma = 5;            // proposals per verification round
    int max_new_tokens = 64;  // generation budget
    int32_t eos_token = 1;

    void validate() const {
        if (gamma < 1) {
            throw std::invalid_argument("SDConfig: gamma must be >= 1, got " + std::to_string(gamma));
        }
        if (max_new_tokens < 1) {
            throw std::invalid_argument("SDConfig: max_new_tokens must be >= 1, got " +
                                        std::to_string(max_new_tokens));
        }
    }
};

struct SDStats {
    int64_t accept = 0;
    int64_t reject = 0;
    int64_t blocks = 0;
    std::vector<int> per_block_accepted;

    int64_t decisions() const { return accept + reject; }
};

enum class StopReason { eos, length };

struct GenerationResult {
    std::vector<int32_t> tokens;  // prompt followed by the generated suffix
    int prompt_len = 0;
    SDStats stats;
    StopReason stopped_by = StopReason::length;

    std::vector<int32_t> generated() const {
        return std::vector<int32_t>(tokens.begin() + prompt_len, tokens.end());
    }
};

// argmax of the final-position logits, sliding the context window from the
// left when it exceeds the model's context; ties break to the lowest id
int32_t greedy_next(const tinylm::Model& m, const std::vector<int32_t>& context);

// one-token-at-a-time greedy decoding; the oracle for speculative decoding
std::vector<int32_t> generate_greedy(const tinylm::Model& m, const std::vector<int32_t>& prompt,
                                     int max_new_tokens, int32_t eos);

// Draft proposes up to gamma tokens greedily, the target verifies them in one
// parallel pass, and the target's own token is appended after a mismatch or a
// fully accepted block. Output is token-identical to generate_greedy on the
// target; the generated suffix is at most max_new_tokens + 1 long.
GenerationResult speculative_generate(const tinylm::Model& target, const tinylm::Model& draft,
                                      const std::vector<int32_t>& prompt, const SDConfig& cfg);

}  // namespace specdesk::specdec
