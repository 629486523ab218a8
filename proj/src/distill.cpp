#include <specdesk/distill.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace specdesk::distill {

namespace nc = specdesk::numcore;
namespace dd = specdesk::datasets;
using tinylm::Model;

const char* filter_mode_name(FilterConfig::Mode m) {
    switch (m) {
        case FilterConfig::Mode::none: return "none";
        case FilterConfig::Mode::top: return "top";
        case FilterConfig::Mode::bottom: return "bottom";
    }
    return "?";
}

FilterConfig::Mode filter_mode_from_name(const std::string& s) {
    if (s == "none") return FilterConfig::Mode::none;
    if (s == "top") return FilterConfig::Mode::top;
    if (s == "bottom") return FilterConfig::Mode::bottom;
    throw std::invalid_argument("unknown filter mode '" + s + "'");
}

std::vector<double> tokenwise_divergence(const nc::Tensor& p_logits, const nc::Tensor& q_logits,
                                         Divergence kind) {
    if (p_logits.shape != q_logits.shape) {
        throw std::invalid_argument("tokenwise_divergence: shape mismatch " + nc::shape_str(p_logits.shape) +
                                    " vs " + nc::shape_str(q_logits.shape));
    }
    const int N = p_logits.rows(), V = p_logits.cols();
    std::vector<double> out(N);
    std::vector<float> logp(V), logq(V);
    for (int i = 0; i < N; ++i) {
        nc::log_softmax_row(p_logits.data.data() + static_cast<size_t>(i) * V, logp.data(), V);
        nc::log_softmax_row(q_logits.data.data() + static_cast<size_t>(i) * V, logq.data(), V);
        out[i] = nc::divergence_row(logp.data(), logq.data(), V, kind);
    }
    return out;
}

namespace {

uint64_t epoch_seed(uint64_t seed, int epoch) {
    return fnv1a(&epoch, sizeof(epoch), fnv1a(&seed, sizeof(seed)));
}

int64_t retained_count(double k, int64_t n) {
    // guard against k*n landing a hair above an integer
    return static_cast<int64_t>(std::ceil(k * static_cast<double>(n) - 1e-9));
}

struct SupervisedLayout {
    std::vector<int32_t> flat_idx;   // row-major positions with a real label
    std::vector<int32_t> token;      // that label
    std::vector<int32_t> example;    // dataset index
    std::vector<int32_t> offset;     // time position
};

SupervisedLayout supervised_layout(const dd::Batch& b) {
    SupervisedLayout out;
    for (int r = 0; r < b.rows; ++r) {
        for (int t = 0; t < b.seq_len; ++t) {
            const size_t flat = static_cast<size_t>(r) * b.seq_len + t;
            if (b.labels[flat] != dd::kIgnoreLabel) {
                out.flat_idx.push_back(static_cast<int32_t>(flat));
                out.token.push_back(b.labels[flat]);
                out.example.push_back(b.example_ids[r]);
                out.offset.push_back(t);
            }
        }
    }
    return out;
}

// teacher log-probs at the supervised positions of one dataset example
std::vector<float> teacher_logp_for_example(const Model& teacher, const dd::Example& e) {
    std::vector<int32_t> full = e.prompt;
    full.insert(full.end(), e.completion.begin(), e.completion.end());
    const std::vector<int32_t> inputs(full.begin(), full.end() - 1);
    auto logits = teacher.forward_seq(inputs);
    const int V = teacher.cfg.vocab_size;
    const int plen = static_cast<int>(e.prompt.size());
    const int T = static_cast<int>(full.size());
    std::vector<float> out(static_cast<size_t>(T - plen) * V);
    for (int t = plen - 1; t < T - 1; ++t) {
        nc::log_softmax_row(logits->data.data() + static_cast<size_t>(t) * V,
                            out.data() + static_cast<size_t>(t - (plen - 1)) * V, V);
    }
    return out;
}

// reference per-token loss for one example: divergence to the target when
// teacher log-probs are given, plain cross entropy otherwise
std::vector<double> ref_loss_for_example(const Model& reference, const dd::Example& e,
                                         const std::vector<float>* teacher_logp, int V, Divergence kind) {
    std::vector<int32_t> full = e.prompt;
    full.insert(full.end(), e.completion.begin(), e.completion.end());
    const std::vector<int32_t> inputs(full.begin(), full.end() - 1);
    auto logits = reference.forward_seq(inputs);
    const int plen = static_cast<int>(e.prompt.size());
    const int T = static_cast<int>(full.size());
    std::vector<double> out(T - plen);
    std::vector<float> logq(V);
    for (int t = plen - 1; t < T - 1; ++t) {
        const float* row = logits->data.data() + static_cast<size_t>(t) * V;
        const int s = t - (plen - 1);
        if (teacher_logp) {
            nc::log_softmax_row(row, logq.data(), V);
            out[s] = nc::divergence_row(teacher_logp->data() + static_cast<size_t>(s) * V, logq.data(), V, kind);
        } else {
            out[s] = nc::logsumexp_row(row, V) - static_cast<double>(row[full[t + 1]]);
        }
    }
    return out;
}

void ensure_teacher(TeacherCache& cache, const dd::Dataset& ds, const Model& teacher, int example) {
    if (cache.ready.empty()) {
        cache.ready.assign(ds.size(), 0);
        cache.logp.resize(ds.size());
    }
    if (!cache.ready[example]) {
        cache.logp[example] = teacher_logp_for_example(teacher, ds.examples[example]);
        cache.ready[example] = 1;
    }
}

// teacher_logp null means the reference loss is plain cross entropy
void ensure_ref(RefLossCache& cache, const dd::Dataset& ds, const Model& reference, int example,
                const std::vector<float>* teacher_logp, Divergence kind) {
    if (cache.ready.empty()) {
        cache.ready.assign(ds.size(), 0);
        cache.loss.resize(ds.size());
    }
    if (!cache.ready[example]) {
        cache.loss[example] = ref_loss_for_example(reference, ds.examples[example], teacher_logp,
                                                   reference.cfg.vocab_size, kind);
        cache.ready[example] = 1;
    }
}

double student_ce(const nc::TensorPtr& gathered_logits, const std::vector<int32_t>& tokens) {
    const int V = gathered_logits->cols();
    double total = 0.0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        const float* row = gathered_logits->data.data() + i * V;
        total += nc::logsumexp_row(row, V) - static_cast<double>(row[tokens[i]]);
    }
    return total;
}

}  // namespace

std::vector<TokenLossRecord> compute_deltas(const Model& target, const Model& reference, const Model& draft,
                                            const dd::Batch& batch, Divergence kind) {
    if (target.cfg.vocab_size != reference.cfg.vocab_size || target.cfg.vocab_size != draft.cfg.vocab_size) {
        throw std::invalid_argument("compute_deltas: models disagree on vocab size");
    }
    const auto sup = supervised_layout(batch);
    if (sup.flat_idx.empty()) {
        throw std::invalid_argument("compute_deltas: batch has no supervised tokens");
    }
    const int V = target.cfg.vocab_size;

    auto forward_rows = [&](const Model& m) {
        nc::Graph g;
        return m.forward(g, batch.inputs.data(), batch.rows, batch.seq_len);
    };
    auto p_logits = forward_rows(target);
    auto r_logits = forward_rows(reference);
    auto q_logits = forward_rows(draft);

    std::vector<TokenLossRecord> records(sup.flat_idx.size());
    std::vector<float> logp(V), logq(V);
    for (size_t i = 0; i < sup.flat_idx.size(); ++i) {
        const size_t row = static_cast<size_t>(sup.flat_idx[i]) * V;
        nc::log_softmax_row(p_logits->data.data() + row, logp.data(), V);
        auto& rec = records[i];
        rec.example = sup.example[i];
        rec.offset = sup.offset[i];
        rec.token = sup.token[i];
        nc::log_softmax_row(r_logits->data.data() + row, logq.data(), V);
        rec.l_ref = nc::divergence_row(logp.data(), logq.data(), V, kind);
        nc::log_softmax_row(q_logits->data.data() + row, logq.data(), V);
        rec.l_draft = nc::divergence_row(logp.data(), logq.data(), V, kind);
        rec.delta = rec.l_draft - rec.l_ref;
    }
    return records;
}

SelectionMask select_tokens(const std::vector<TokenLossRecord>& records, const FilterConfig& filter) {
    if (records.empty()) {
        throw std::invalid_argument("select_tokens: no records");
    }
    if (filter.mode != FilterConfig::Mode::none && filter.k <= 0.0) {
        throw std::invalid_argument("select_tokens: k must be positive under top/bottom selection");
    }
    filter.validate();
    SelectionMask mask;
    mask.k = filter.mode == FilterConfig::Mode::none ? 1.0 : filter.k;
    mask.selected.assign(records.size(), 0);
    if (filter.mode == FilterConfig::Mode::none) {
        std::fill(mask.selected.begin(), mask.selected.end(), 1);
        mask.retained = static_cast<int64_t>(records.size());
        return mask;
    }
    const int64_t take = retained_count(filter.k, static_cast<int64_t>(records.size()));
    std::vector<int32_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    if (filter.mode == FilterConfig::Mode::top) {
        std::stable_sort(order.begin(), order.end(),
                         [&](int32_t a, int32_t b) { return records[a].delta > records[b].delta; });
    } else {
        std::stable_sort(order.begin(), order.end(),
                         [&](int32_t a, int32_t b) { return records[a].delta < records[b].delta; });
    }
    for (int64_t i = 0; i < take; ++i) {
        mask.selected[order[i]] = 1;
    }
    mask.retained = take;
    return mask;
}

double filtered_loss(const std::vector<TokenLossRecord>& records, const SelectionMask& mask, double k) {
    if (mask.selected.size() != records.size()) {
        throw std::invalid_argument("filtered_loss: mask does not match records");
    }
    if (mask.retained == 0) {
        throw std::invalid_argument("filtered_loss: empty selection");
    }
    if (k <= 0.0 || k > 1.0) {
        throw std::invalid_argument("filtered_loss: k must be in (0,1]");
    }
    double total = 0.0;
    for (size_t i = 0; i < records.size(); ++i) {
        if (mask.selected[i]) {
            total += records[i].l_draft;
        }
    }
    return total / (k * static_cast<double>(records.size()));
}

double scaled_lr(double base_lr, double k, bool lr_scaling, FilterConfig::Mode mode) {
    if (k <= 0.0 || k > 1.0) {
        throw std::invalid_argument("scaled_lr: k must be in (0,1]");
    }
    if (lr_scaling && mode != FilterConfig::Mode::none) {
        return base_lr * k;
    }
    return base_lr;
}

EpochStats finetune_epoch(Model& model, nc::AdamState& opt, const dd::Dataset& ds, const dd::Tokenizer& tok,
                          const TrainConfig& cfg, int epoch_index, const Model* reference,
                          RefLossCache* ref_cache, const BatchHook& hook) {
    cfg.validate();
    const bool filtering = cfg.filter.mode != FilterConfig::Mode::none;
    if (filtering && reference == nullptr) {
        throw std::invalid_argument("finetune_epoch: token filtering needs a reference model");
    }
    RefLossCache local_cache;
    if (filtering && ref_cache == nullptr) {
        ref_cache = &local_cache;
    }
    const double lr = scaled_lr(cfg.lr, cfg.filter.k, cfg.lr_scaling, cfg.filter.mode);
    auto params = model.params();

    EpochStats stats;
    stats.lr_used = lr;
    dd::BatchStream stream(ds, cfg.batch_size, model.cfg.context_len, tok, epoch_seed(cfg.seed, epoch_index));
    dd::Batch b;
    int batches = 0;
    for (int batch_index = 0; stream.next(b); ++batch_index) {
        const auto sup = supervised_layout(b);
        if (sup.flat_idx.empty()) {
            throw std::invalid_argument("finetune_epoch: batch without supervised tokens");
        }
        nc::Graph g;
        auto logits = model.forward(g, b.inputs.data(), b.rows, b.seq_len);
        auto losses = g.cross_entropy_rows(logits, b.labels, dd::kIgnoreLabel);

        const int64_t n_sup = static_cast<int64_t>(sup.flat_idx.size());
        std::vector<double> weights(losses->numel(), 0.0);
        std::vector<TokenLossRecord> records;
        SelectionMask mask;
        if (filtering) {
            records.resize(sup.flat_idx.size());
            for (size_t i = 0; i < sup.flat_idx.size(); ++i) {
                ensure_ref(*ref_cache, ds, *reference, sup.example[i], nullptr, cfg.divergence);
                auto& rec = records[i];
                rec.example = sup.example[i];
                rec.offset = sup.offset[i];
                rec.token = sup.token[i];
                const auto& e = ds.examples[rec.example];
                rec.l_ref = ref_cache->loss[rec.example][rec.offset - (static_cast<int>(e.prompt.size()) - 1)];
                rec.l_draft = losses->data[sup.flat_idx[i]];
                rec.delta = rec.l_draft - rec.l_ref;
            }
            mask = select_tokens(records, cfg.filter);
            const double denom = cfg.filter.k * static_cast<double>(n_sup);
            for (size_t i = 0; i < sup.flat_idx.size(); ++i) {
                if (mask.selected[i]) {
                    weights[sup.flat_idx[i]] = 1.0 / denom;
                }
            }
            stats.selected_tokens += mask.retained;
        } else {
            for (int32_t flat : sup.flat_idx) {
                weights[flat] = 1.0 / static_cast<double>(n_sup);
            }
            stats.selected_tokens += n_sup;
        }
        auto loss = g.weighted_sum(losses, weights);
        g.backward(loss);
        nc::adam_step(params, opt, lr);
        model.zero_grads();
        model.train_steps += 1;

        stats.objective += loss->data[0];
        for (int32_t flat : sup.flat_idx) {
            stats.ce_mean += losses->data[flat];
        }
        stats.supervised_tokens += n_sup;
        ++batches;
        if (hook) {
            if (!filtering) {
                records.resize(sup.flat_idx.size());
                for (size_t i = 0; i < sup.flat_idx.size(); ++i) {
                    records[i] = {sup.example[i], sup.offset[i], sup.token[i], 0.0,
                                  static_cast<double>(losses->data[sup.flat_idx[i]]), 0.0};
                }
                mask.selected.assign(records.size(), 1);
                mask.retained = static_cast<int64_t>(records.size());
            }
            hook(records, mask, batch_index);
        }
    }
    stats.objective /= batches;
    stats.ce_mean /= static_cast<double>(stats.supervised_tokens);
    stats.perplexity = std::exp(stats.ce_mean);
    return stats;
}

TrainStats finetune(Model& model, const dd::Dataset& ds, const dd::Tokenizer& tok, const TrainConfig& cfg,
                    const Model* reference, const BatchHook& hook) {
    cfg.validate();
    nc::AdamState opt;
    RefLossCache cache;
    TrainStats out;
    for (int e = 0; e < cfg.epochs; ++e) {
        out.epochs.push_back(finetune_epoch(model, opt, ds, tok, cfg, e, reference, &cache, hook));
    }
    return out;
}

EpochStats distill_epoch(Model& student, const Model& teacher, const Model* reference, nc::AdamState& opt,
                         const dd::Dataset& ds, const dd::Tokenizer& tok, const TrainConfig& cfg,
                         int epoch_index, TeacherCache& teacher_cache, RefLossCache* ref_cache,
                         const BatchHook& hook) {
    cfg.validate();
    const bool filtering = cfg.filter.mode != FilterConfig::Mode::none;
    if (filtering && reference == nullptr) {
        throw std::invalid_argument("distill_epoch: token filtering needs a reference model");
    }
    if (teacher.cfg.vocab_size != student.cfg.vocab_size ||
        (reference && reference->cfg.vocab_size != student.cfg.vocab_size)) {
        throw std::invalid_argument("distill_epoch: models disagree on vocab size");
    }
    if (reference != nullptr && ref_cache == nullptr) {
        throw std::invalid_argument("distill_epoch: reference model given without a reference cache");
    }
    const double lr = scaled_lr(cfg.lr, cfg.filter.k, cfg.lr_scaling, cfg.filter.mode);
    const int V = student.cfg.vocab_size;
    auto params = student.params();

    EpochStats stats;
    stats.lr_used = lr;
    dd::BatchStream stream(ds, cfg.batch_size, student.cfg.context_len, tok, epoch_seed(cfg.seed, epoch_index));
    dd::Batch b;
    int batches = 0;
    for (int batch_index = 0; stream.next(b); ++batch_index) {
        const auto sup = supervised_layout(b);
        if (sup.flat_idx.empty()) {
            throw std::invalid_argument("distill_epoch: batch without supervised tokens");
        }
        const int64_t n_sup = static_cast<int64_t>(sup.flat_idx.size());

        // frozen teacher (and reference) outputs come from the per-example cache
        auto teacher_logp = nc::make_tensor<float>({static_cast<int>(n_sup), V});
        for (size_t i = 0; i < sup.flat_idx.size(); ++i) {
            const int ex = sup.example[i];
            ensure_teacher(teacher_cache, ds, teacher, ex);
            if (reference) {
                ensure_ref(*ref_cache, ds, *reference, ex, &teacher_cache.logp[ex], cfg.divergence);
            }
            const auto& e = ds.examples[ex];
            const int s = sup.offset[i] - (static_cast<int>(e.prompt.size()) - 1);
            const float* src = teacher_cache.logp[ex].data() + static_cast<size_t>(s) * V;
            std::copy(src, src + V, teacher_logp->data.data() + i * V);
        }

        nc::Graph g;
        auto logits = student.forward(g, b.inputs.data(), b.rows, b.seq_len);
        auto gathered = g.gather_rows(logits, sup.flat_idx);
        auto losses = g.divergence_rows(teacher_logp, gathered, cfg.divergence);

        std::vector<TokenLossRecord> records(sup.flat_idx.size());
        for (size_t i = 0; i < sup.flat_idx.size(); ++i) {
            auto& rec = records[i];
            rec.example = sup.example[i];
            rec.offset = sup.offset[i];
            rec.token = sup.token[i];
            const auto& e = ds.examples[rec.example];
            rec.l_ref = reference
                            ? ref_cache->loss[rec.example][rec.offset - (static_cast<int>(e.prompt.size()) - 1)]
                            : 0.0;
            rec.l_draft = losses->data[i];
            rec.delta = rec.l_draft - rec.l_ref;
        }

        SelectionMask mask = select_tokens(records, cfg.filter);
        std::vector<double> weights(losses->numel(), 0.0);
        const double denom = mask.k * static_cast<double>(n_sup);
        for (size_t i = 0; i < weights.size(); ++i) {
            if (mask.selected[i]) {
                weights[i] = 1.0 / denom;
            }
        }
        auto loss = g.weighted_sum(losses, weights);
        g.backward(loss);
        nc::adam_step(params, opt, lr);
        student.zero_grads();
        student.train_steps += 1;

        stats.objective += loss->data[0];
        stats.ce_mean += student_ce(gathered, sup.token);
        stats.supervised_tokens += n_sup;
        stats.selected_tokens += mask.retained;
        ++batches;
        if (hook) {
            hook(records, mask, batch_index);
        }
    }
    stats.objective /= batches;
    stats.ce_mean /= static_cast<double>(stats.supervised_tokens);
    stats.perplexity = std::exp(stats.ce_mean);
    return stats;
}

TrainStats distill_model(Model& student, const Model& teacher, const Model* reference, const dd::Dataset& ds,
                   const dd::Tokenizer& tok, const TrainConfig& cfg, const BatchHook& hook) {
    cfg.validate();
    nc::AdamState opt;
    TeacherCache teacher_cache;
    RefLossCache ref_cache;
    TrainStats out;
    for (int e = 0; e < cfg.epochs; ++e) {
        out.epochs.push_back(distill_epoch(student, teacher, reference, opt, ds, tok, cfg, e, teacher_cache,
                                           reference ? &ref_cache : nullptr, hook));
    }
    return out;
}

}  // namespace specdesk::distill
