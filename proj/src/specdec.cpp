#include <specdesk/specdec.hpp>

#include <algorithm>

namespace specdesk::specdec {

using numcore::argmax_lowest;
using tinylm::Model;

int32_t greedy_next(const Model& m, const std::vector<int32_t>& context) {
    if (context.empty()) {
        throw std::invalid_argument("greedy_next: empty context");
    }
    const int W = m.cfg.context_len;
    const int len = static_cast<int>(context.size());
    const int take = std::min(len, W);
    std::vector<int32_t> window(context.end() - take, context.end());
    auto logits = m.forward_seq(window);
    const float* last = logits->data.data() + static_cast<size_t>(take - 1) * m.cfg.vocab_size;
    return argmax_lowest(last, m.cfg.vocab_size);
}

std::vector<int32_t> generate_greedy(const Model& m, const std::vector<int32_t>& prompt, int max_new_tokens,
                                     int32_t eos) {
    if (prompt.empty()) {
        throw std::invalid_argument("generate_greedy: empty prompt");
    }
    std::vector<int32_t> x = prompt;
    for (int step = 0; step < max_new_tokens; ++step) {
        const int32_t next = greedy_next(m, x);
        x.push_back(next);
        if (next == eos) {
            break;
        }
    }
    return x;
}

namespace {

// Target tokens for one block: z'_i for every proposal position plus the
// token following a fully accepted block. One parallel forward when the whole
// sequence fits the context window; exact per-position windows otherwise, so
// the result always matches generate_greedy.
std::vector<int32_t> verify_tokens(const Model& target, const std::vector<int32_t>& seq, int prompt_len) {
    const int W = target.cfg.context_len;
    const int V = target.cfg.vocab_size;
    const int total = static_cast<int>(seq.size());
    const int proposals = total - prompt_len;
    std::vector<int32_t> out(proposals + 1);
    if (total <= W) {
        auto logits = target.forward_seq(seq);
        for (int i = 0; i <= proposals; ++i) {
            const float* row = logits->data.data() + static_cast<size_t>(prompt_len - 1 + i) * V;
            out[i] = argmax_lowest(row, V);
        }
    } else {
        for (int i = 0; i <= proposals; ++i) {
            std::vector<int32_t> ctx(seq.begin(), seq.begin() + prompt_len + i);
            out[i] = greedy_next(target, ctx);
        }
    }
    return out;
}

}  // namespace

GenerationResult speculative_generate(const Model& target, const Model& draft,
                                      const std::vector<int32_t>& prompt, const SDConfig& cfg) {
    cfg.validate();
    if (prompt.empty()) {
        throw std::invalid_argument("speculative_generate: empty prompt");
    }
    if (target.cfg.vocab_size != draft.cfg.vocab_size) {
        throw std::invalid_argument("speculative_generate: vocab mismatch, target " +
                                    std::to_string(target.cfg.vocab_size) + " vs draft " +
                                    std::to_string(draft.cfg.vocab_size));
    }

    GenerationResult res;
    res.prompt_len = static_cast<int>(prompt.size());
    res.tokens = prompt;
    auto& x = res.tokens;
    auto& st = res.stats;
    int generated = 0;

    while (generated < cfg.max_new_tokens) {
        const int budget = cfg.max_new_tokens - generated;
        const int gamma_eff = std::min(cfg.gamma, budget);

        // draft proposes autoregressively, stopping at its own eos
        std::vector<int32_t> seq = x;
        int proposals = 0;
        for (int i = 0; i < gamma_eff; ++i) {
            const int32_t z = greedy_next(draft, seq);
            seq.push_back(z);
            ++proposals;
            if (z == cfg.eos_token) {
                break;
            }
        }

        const size_t t0 = x.size();
        const std::vector<int32_t> verified = verify_tokens(target, seq, static_cast<int>(t0));

        st.blocks += 1;
        int accepted_here = 0;
        bool mismatch = false;
        for (int i = 0; i < proposals; ++i) {
            const int32_t z = seq[t0 + i];
            if (verified[i] == z) {
                x.push_back(z);
                st.accept += 1;
                ++accepted_here;
                ++generated;
                if (z == cfg.eos_token) {
                    st.per_block_accepted.push_back(accepted_here);
                    res.stopped_by = StopReason::eos;
                    return res;
                }
            } else {
                st.reject += 1;
                st.per_block_accepted.push_back(accepted_here);
                x.push_back(verified[i]);  // the target's own choice at the mismatch
                ++generated;
                mismatch = true;
                if (verified[i] == cfg.eos_token) {
                    res.stopped_by = StopReason::eos;
                    return res;
                }
                break;
            }
        }
        if (!mismatch) {
            // fully accepted block: append the target's next token for free
            st.per_block_accepted.push_back(accepted_here);
            const int32_t bonus = verified[proposals];
            x.push_back(bonus);
            ++generated;
            if (bonus == cfg.eos_token) {
                res.stopped_by = StopReason::eos;
                return res;
            }
        }
    }
    res.stopped_by = StopReason::length;
    return res;
}

}  // namespace specdesk::specdec
