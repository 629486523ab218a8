#pragma once

#include <specdesk/numcore.hpp>
#include <specdesk/rng.hpp>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace specdesk::tinylm {

struct LMConfig {
    int vocab_size = 0;
    int context_len = 128;
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 2;
    int d_ff = 256;
    bool tie_embeddings = true;

    void validate() const {
        if (vocab_size < 2) {
            throw std::invalid_argument("LMConfig: vocab_size must be >= 2, got " + std::to_string(vocab_size));
        }
        if (context_len < 2) {
            throw std::invalid_argument("LMConfig: context_len must be >= 2, got " + std::to_string(context_len));
        }
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1) {
            throw std::invalid_argument("LMConfig: layer sizes must be positive");
        }
        if (d_model % n_heads != 0) {
            throw std::invalid_argument("LMConfig: d_model " + std::to_string(d_model) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
        }
    }

    int64_t param_count() const {
        int64_t n = static_cast<int64_t>(vocab_size) * d_model + static_cast<int64_t>(context_len) * d_model;
        const int64_t per_layer = 2LL * d_model                             // ln1
                                  + static_cast<int64_t>(d_model) * 3 * d_model + 3LL * d_model  // qkv
                                  + static_cast<int64_t>(d_model) * d_model + d_model            // proj
                                  + 2LL * d_model                                                // ln2
                                  + static_cast<int64_t>(d_model) * d_ff + d_ff                  // fc
                                  + static_cast<int64_t>(d_ff) * d_model + d_model;              // fc2
        n += per_layer * n_layers + 2LL * d_model;  // final layernorm
        if (!tie_embeddings) {
            n += static_cast<int64_t>(d_model) * vocab_size;
        }
        return n;
    }

    bool operator==(const LMConfig&) const = default;
};

enum class Role { target, reference, draft };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::target: return "target";
        case Role::reference: return "reference";
        case Role::draft: return "draft";
    }
    return "?";
}

inline Role role_from_name(const std::string& s) {
    if (s == "target") return Role::target;
    if (s == "reference") return Role::reference;
    if (s == "draft") return Role::draft;
    throw std::invalid_argument("unknown model role '" + s + "'");
}

// Decoder-only pre-norm transformer with learned positional embeddings and a
// GELU feed-forward; the output head is tied to the token embedding unless
// configured otherwise.
template <typename S>
struct ModelT {
    using TensorPtr = numcore::TensorPtrT<S>;

    LMConfig cfg;
    Role role = Role::draft;
    uint64_t init_seed = 0;
    int64_t train_steps = 0;

    struct Block {
        TensorPtr ln1_g, ln1_b;
        TensorPtr w_qkv, b_qkv;
        TensorPtr w_proj, b_proj;
        TensorPtr ln2_g, ln2_b;
        TensorPtr w_fc, b_fc;
        TensorPtr w_fc2, b_fc2;
    };

    TensorPtr tok_emb, pos_emb;
    std::vector<Block> blocks;
    TensorPtr lnf_g, lnf_b;
    TensorPtr w_out;  // null when embeddings are tied

    // parameters in their declared (checkpoint) order
    std::vector<std::pair<std::string, TensorPtr>> named_params() const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        out.emplace_back("tok_emb", tok_emb);
        out.emplace_back("pos_emb", pos_emb);
        for (size_t l = 0; l < blocks.size(); ++l) {
            const auto& b = blocks[l];
            const std::string p = "block" + std::to_string(l) + ".";
            out.emplace_back(p + "ln1_g", b.ln1_g);
            out.emplace_back(p + "ln1_b", b.ln1_b);
            out.emplace_back(p + "w_qkv", b.w_qkv);
            out.emplace_back(p + "b_qkv", b.b_qkv);
            out.emplace_back(p + "w_proj", b.w_proj);
            out.emplace_back(p + "b_proj", b.b_proj);
            out.emplace_back(p + "ln2_g", b.ln2_g);
            out.emplace_back(p + "ln2_b", b.ln2_b);
            out.emplace_back(p + "w_fc", b.w_fc);
            out.emplace_back(p + "b_fc", b.b_fc);
            out.emplace_back(p + "w_fc2", b.w_fc2);
            out.emplace_back(p + "b_fc2", b.b_fc2);
        }
        out.emplace_back("lnf_g", lnf_g);
        out.emplace_back("lnf_b", lnf_b);
        if (w_out) {
            out.emplace_back("w_out", w_out);
        }
        return out;
    }

    std::vector<TensorPtr> params() const {
        std::vector<TensorPtr> out;
        for (auto& [name, t] : named_params()) {
            (void)name;
            out.push_back(t);
        }
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& t : params()) {
            n += static_cast<int64_t>(t->numel());
        }
        return n;
    }

    void set_trainable(bool trainable) {
        for (auto& t : params()) {
            t->requires_grad = trainable;
            t->needs_grad = trainable;
        }
    }

    void zero_grads() {
        for (auto& t : params()) {
            t->zero_grad();
        }
    }

    // batched forward: tokens holds B*L ids, result is (B*L, vocab) logits
    TensorPtr forward(numcore::GraphT<S>& g, const int32_t* tokens, int B, int L) const {
        if (L < 1 || L > cfg.context_len) {
            throw std::invalid_argument("forward: sequence length " + std::to_string(L) +
                                        " outside context window " + std::to_string(cfg.context_len));
        }
        std::vector<int32_t> ids(tokens, tokens + static_cast<size_t>(B) * L);
        for (int32_t id : ids) {
            if (id < 0 || id >= cfg.vocab_size) {
                throw std::invalid_argument("forward: token id " + std::to_string(id) + " outside vocab " +
                                            std::to_string(cfg.vocab_size));
            }
        }
        std::vector<int32_t> pos(static_cast<size_t>(B) * L);
        for (int b = 0; b < B; ++b) {
            for (int i = 0; i < L; ++i) {
                pos[static_cast<size_t>(b) * L + i] = i;
            }
        }
        auto x = g.add(g.embedding(tok_emb, ids), g.embedding(pos_emb, pos));
        for (const auto& blk : blocks) {
            auto h = g.layernorm(x, blk.ln1_g, blk.ln1_b);
            auto qkv = g.add_bias(g.matmul(h, blk.w_qkv), blk.b_qkv);
            auto attn = g.causal_attention(qkv, B, L, cfg.n_heads);
            auto proj = g.add_bias(g.matmul(attn, blk.w_proj), blk.b_proj);
            x = g.add(x, proj);
            auto h2 = g.layernorm(x, blk.ln2_g, blk.ln2_b);
            auto f = g.gelu(g.add_bias(g.matmul(h2, blk.w_fc), blk.b_fc));
            auto f2 = g.add_bias(g.matmul(f, blk.w_fc2), blk.b_fc2);
            x = g.add(x, f2);
        }
        x = g.layernorm(x, lnf_g, lnf_b);
        return cfg.tie_embeddings ? g.matmul_nt(x, tok_emb) : g.matmul(x, w_out);
    }

    // single-sequence convenience; returns a (L, vocab) logit matrix
    numcore::TensorPtrT<S> forward_seq(const std::vector<int32_t>& tokens) const {
        numcore::GraphT<S> g;
        auto logits = forward(g, tokens.data(), 1, static_cast<int>(tokens.size()));
        logits->shape = {static_cast<int>(tokens.size()), cfg.vocab_size};
        return logits;
    }
};

template <typename S>
ModelT<S> init_model(const LMConfig& cfg, uint64_t seed, Role role) {
    cfg.validate();
    ModelT<S> m;
    m.cfg = cfg;
    m.role = role;
    m.init_seed = seed;
    Rng rng(seed);
    auto normal = [&rng](const numcore::TensorPtrT<S>& t, double std) {
        for (auto& v : t->data) {
            v = static_cast<S>(rng.normal() * std);
        }
    };
    const double base_std = 0.02;
    // residual-output projections are damped so the initial stream stays unit scale
    const double out_std = base_std / std::sqrt(2.0 * cfg.n_layers);

    m.tok_emb = numcore::make_tensor<S>({cfg.vocab_size, cfg.d_model}, true);
    normal(m.tok_emb, base_std);
    m.pos_emb = numcore::make_tensor<S>({cfg.context_len, cfg.d_model}, true);
    normal(m.pos_emb, base_std);
    m.blocks.resize(cfg.n_layers);
    for (auto& b : m.blocks) {
        b.ln1_g = numcore::make_tensor<S>({cfg.d_model}, true);
        std::fill(b.ln1_g->data.begin(), b.ln1_g->data.end(), S(1));
        b.ln1_b = numcore::make_tensor<S>({cfg.d_model}, true);
        b.w_qkv = numcore::make_tensor<S>({cfg.d_model, 3 * cfg.d_model}, true);
        normal(b.w_qkv, base_std);
        b.b_qkv = numcore::make_tensor<S>({3 * cfg.d_model}, true);
        b.w_proj = numcore::make_tensor<S>({cfg.d_model, cfg.d_model}, true);
        normal(b.w_proj, out_std);
        b.b_proj = numcore::make_tensor<S>({cfg.d_model}, true);
        b.ln2_g = numcore::make_tensor<S>({cfg.d_model}, true);
        std::fill(b.ln2_g->data.begin(), b.ln2_g->data.end(), S(1));
        b.ln2_b = numcore::make_tensor<S>({cfg.d_model}, true);
        b.w_fc = numcore::make_tensor<S>({cfg.d_model, cfg.d_ff}, true);
        normal(b.w_fc, base_std);
        b.b_fc = numcore::make_tensor<S>({cfg.d_ff}, true);
        b.w_fc2 = numcore::make_tensor<S>({cfg.d_ff, cfg.d_model}, true);
        normal(b.w_fc2, out_std);
        b.b_fc2 = numcore::make_tensor<S>({cfg.d_model}, true);
    }
    m.lnf_g = numcore::make_tensor<S>({cfg.d_model}, true);
    std::fill(m.lnf_g->data.begin(), m.lnf_g->data.end(), S(1));
    m.lnf_b = numcore::make_tensor<S>({cfg.d_model}, true);
    if (!cfg.tie_embeddings) {
        m.w_out = numcore::make_tensor<S>({cfg.d_model, cfg.vocab_size}, true);
        normal(m.w_out, base_std);
    }
    return m;
}

template <typename S>
ModelT<S> clone_model(const ModelT<S>& src, Role role) {
    ModelT<S> dst = src;  // copies config and metadata, shares tensors
    dst.role = role;
    auto deep = [](numcore::TensorPtrT<S>& t) {
        if (t) {
            t = numcore::make_tensor<S>(t->shape, t->data, t->requires_grad);
        }
    };
    deep(dst.tok_emb);
    deep(dst.pos_emb);
    for (auto& b : dst.blocks) {
        deep(b.ln1_g);
        deep(b.ln1_b);
        deep(b.w_qkv);
        deep(b.b_qkv);
        deep(b.w_proj);
        deep(b.b_proj);
        deep(b.ln2_g);
        deep(b.ln2_b);
        deep(b.w_fc);
        deep(b.b_fc);
        deep(b.w_fc2);
        deep(b.b_fc2);
    }
    deep(dst.lnf_g);
    deep(dst.lnf_b);
    deep(dst.w_out);
    return dst;
}

template <typename S>
ModelT<S> clone_model(const ModelT<S>& src) {
    return clone_model(src, src.role);
}

using Model = ModelT<float>;

// Checkpoint file: magic "TLM1", format version u32, length-prefixed UTF-8
// JSON header (config, role, seed, train steps), then the parameters as
// concatenated little-endian f32 arrays in declared order.
void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);
Model load_checkpoint_expect(const std::string& path, const LMConfig& expected);

// content hash over config and parameter bytes
uint64_t model_hash(const Model& m);

}  // namespace specdesk::tinylm
