#pragma once

#include <doctest.h>

#include <specdesk/datasets.hpp>
#include <specdesk/numcore.hpp>
#include <specdesk/rng.hpp>
#include <specdesk/tinylm.hpp>

#include <functional>
#include <vector>

namespace testsup {

using specdesk::Rng;

template <typename S>
specdesk::numcore::TensorPtrT<S> randn(Rng& rng, std::vector<int> shape, double scale = 1.0,
                                       bool trainable = true) {
    auto t = specdesk::numcore::make_tensor<S>(std::move(shape), trainable);
    for (auto& v : t->data) {
        v = static_cast<S>(rng.normal() * scale);
    }
    return t;
}

// central finite differences vs reverse mode, double precision
inline void gradcheck(const std::vector<specdesk::numcore::TensorPtrT<double>>& leaves,
                      const std::function<specdesk::numcore::TensorPtrT<double>(
                          specdesk::numcore::GraphT<double>&)>& build,
                      uint64_t seed, int probes = 20, double tol = 1e-4, double h = 1e-4) {
    for (const auto& l : leaves) {
        l->grad.clear();
    }
    specdesk::numcore::GraphT<double> g;
    auto loss = build(g);
    REQUIRE(loss->numel() == 1);
    g.backward(loss);

    Rng rng(seed);
    for (int p = 0; p < probes; ++p) {
        const auto& leaf = leaves[rng.below(leaves.size())];
        const size_t i = rng.below(leaf->numel());
        const double analytic = leaf->grad.empty() ? 0.0 : leaf->grad[i];
        const double keep = leaf->data[i];
        leaf->data[i] = keep + h;
        specdesk::numcore::GraphT<double> gp;
        const double lp = build(gp)->data[0];
        leaf->data[i] = keep - h;
        specdesk::numcore::GraphT<double> gm;
        const double lm = build(gm)->data[0];
        leaf->data[i] = keep;
        const double fd = (lp - lm) / (2.0 * h);
        const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-6});
        const double rel = std::abs(fd - analytic) / denom;
        INFO("probe ", p, " fd=", fd, " analytic=", analytic);
        CHECK(rel < tol);
    }
}

// plain cross-entropy training loop; a minimal independent trainer for tests
inline void train_ce(specdesk::tinylm::Model& m, const specdesk::datasets::Dataset& ds,
                     const specdesk::datasets::Tokenizer& tok, int epochs, double lr, uint64_t seed) {
    namespace nc = specdesk::numcore;
    namespace dd = specdesk::datasets;
    nc::AdamState opt;
    auto params = m.params();
    for (int e = 0; e < epochs; ++e) {
        dd::BatchStream stream(ds, 8, m.cfg.context_len, tok, seed + e);
        dd::Batch b;
        while (stream.next(b)) {
            nc::Graph g;
            auto logits = m.forward(g, b.inputs.data(), b.rows, b.seq_len);
            auto losses = g.cross_entropy_rows(logits, b.labels, dd::kIgnoreLabel);
            const int64_t sup = b.supervised();
            std::vector<double> w(losses->numel(), 0.0);
            for (size_t i = 0; i < b.labels.size(); ++i) {
                if (b.labels[i] != dd::kIgnoreLabel) {
                    w[i] = 1.0 / static_cast<double>(sup);
                }
            }
            auto loss = g.weighted_sum(losses, w);
            g.backward(loss);
            nc::adam_step(params, opt, lr);
            m.zero_grads();
            m.train_steps += 1;
        }
    }
}

}  // namespace testsup
