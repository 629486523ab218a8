#pragma once

#include <specdesk/datasets.hpp>
#include <specdesk/numcore.hpp>
#include <specdesk/tinylm.hpp>

#include <functional>
#include <string>
#include <vector>

namespace specdesk::distill {

using numcore::Divergence;

struct FilterConfig {
    enum class Mode { none, top, bottom };

    Mode mode = Mode::none;
    double k = 1.0;  // fraction of supervised tokens kept per batch

    void validate() const {
        if (mode != Mode::none && (k <= 0.0 || k > 1.0)) {
            throw std::invalid_argument("FilterConfig: k must be in (0,1] when filtering, got " +
                                        std::to_string(k));
        }
    }
};

const char* filter_mode_name(FilterConfig::Mode m);
FilterConfig::Mode filter_mode_from_name(const std::string& s);

struct TrainConfig {
    int batch_size = 16;
    double lr = 3e-4;
    int epochs = 3;
    uint64_t seed = 0;
    Divergence divergence = Divergence::forward_kl;
    FilterConfig filter;
    bool lr_scaling = true;  // linear LR scaling when filtering shrinks the token count

    void validate() const {
        if (batch_size < 1) {
            throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        }
        if (epochs < 1) {
            throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        }
        if (lr <= 0.0) {
            throw std::invalid_argument("TrainConfig: lr must be positive");
        }
        filter.validate();
    }
};

// one supervised token's losses against the target distribution
struct TokenLossRecord {
    int32_t example = 0;  // dataset index
    int32_t offset = 0;   // position within the sequence
    int32_t token = 0;    // supervised label id
    double l_ref = 0.0;
    double l_draft = 0.0;
    double delta = 0.0;  // l_draft - l_ref
};

struct SelectionMask {
    std::vector<uint8_t> selected;  // parallel to the record list
    int64_t retained = 0;
    double k = 1.0;
};

// forward-only per-position divergences between two logit matrices; the first
// argument is the frozen teacher
std::vector<double> tokenwise_divergence(const numcore::Tensor& p_logits, const numcore::Tensor& q_logits,
                                         Divergence kind);

// token-wise losses of reference and draft against the frozen target over one
// batch; one record per supervised position
std::vector<TokenLossRecord> compute_deltas(const tinylm::Model& target, const tinylm::Model& reference,
                                            const tinylm::Model& draft, const datasets::Batch& batch,
                                            Divergence kind = Divergence::forward_kl);

// keep the ceil(k*N) largest deltas (mode top), smallest (mode bottom) or all
// (mode none); ties break toward the earlier batch position
SelectionMask select_tokens(const std::vector<TokenLossRecord>& records, const FilterConfig& filter);

// (1 / (k * |y|)) * sum of selected draft losses, |y| the batch's supervised
// token count
double filtered_loss(const std::vector<TokenLossRecord>& records, const SelectionMask& mask, double k);

// base_lr * k when scaling is on and filtering is active
double scaled_lr(double base_lr, double k, bool lr_scaling, FilterConfig::Mode mode);

struct EpochStats {
    double objective = 0.0;  // mean optimized loss over batches
    double ce_mean = 0.0;    // student cross entropy per supervised token
    double perplexity = 1.0;
    int64_t supervised_tokens = 0;
    int64_t selected_tokens = 0;
    double lr_used = 0.0;
};

struct TrainStats {
    std::vector<EpochStats> epochs;
};

// observer invoked after every batch's selection; used for token dumps
using BatchHook =
    std::function<void(const std::vector<TokenLossRecord>&, const SelectionMask&, int batch_index)>;

// Frozen-model outputs cached per dataset example; valid for the lifetime of
// the frozen checkpoint, so they may be shared across stages and epochs.
struct TeacherCache {
    std::vector<std::vector<float>> logp;  // supervised-position log-probs
    std::vector<uint8_t> ready;
};

struct RefLossCache {
    std::vector<std::vector<double>> loss;  // per supervised position
    std::vector<uint8_t> ready;
};

// one cross-entropy pass; filtering (when configured) scores tokens by the
// cross-entropy gap to the reference model
EpochStats finetune_epoch(tinylm::Model& model, numcore::AdamState& opt, const datasets::Dataset& ds,
                          const datasets::Tokenizer& tok, const TrainConfig& cfg, int epoch_index,
                          const tinylm::Model* reference = nullptr, RefLossCache* ref_cache = nullptr,
                          const BatchHook& hook = nullptr);

TrainStats finetune(tinylm::Model& model, const datasets::Dataset& ds, const datasets::Tokenizer& tok,
                    const TrainConfig& cfg, const tinylm::Model* reference = nullptr,
                    const BatchHook& hook = nullptr);

// one distillation pass from a frozen teacher; with a reference model and an
// active filter this is the selective objective, with neither it is plain
// forward-KL distillation
EpochStats distill_epoch(tinylm::Model& student, const tinylm::Model& teacher,
                         const tinylm::Model* reference, numcore::AdamState& opt,
                         const datasets::Dataset& ds, const datasets::Tokenizer& tok, const TrainConfig& cfg,
                         int epoch_index, TeacherCache& teacher_cache, RefLossCache* ref_cache = nullptr,
                         const BatchHook& hook = nullptr);

TrainStats distill_model(tinylm::Model& student, const tinylm::Model& teacher, const tinylm::Model* reference,
                   const datasets::Dataset& ds, const datasets::Tokenizer& tok, const TrainConfig& cfg,
                   const BatchHook& hook = nullptr);

}  // namespace specdesk::distill
