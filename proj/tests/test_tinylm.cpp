#include <doctest.h>

#include "support.hpp"

#include <specdesk/datasets.hpp>
#include <specdesk/numcore.hpp>
#include <specdesk/tinylm.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>

using namespace specdesk;
using namespace specdesk::tinylm;
namespace nc = specdesk::numcore;
namespace dd = specdesk::datasets;

namespace {

LMConfig small_config(int vocab) {
    LMConfig c;
    c.vocab_size = vocab;
    c.context_len = 16;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    return c;
}

std::vector<int32_t> random_tokens(Rng& rng, int n, int vocab) {
    std::vector<int32_t> out(n);
    for (auto& t : out) {
        t = static_cast<int32_t>(rng.below(vocab));
    }
    return out;
}

}  // namespace

TEST_CASE("config validation lists the violated constraint") {
    LMConfig c = small_config(8);
    c.d_model = 15;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("divisible"), std::invalid_argument);
    c = small_config(1);
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("vocab_size"), std::invalid_argument);
    c = small_config(8);
    c.context_len = 1;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("context_len"), std::invalid_argument);
}

TEST_CASE("init is deterministic per seed and differs across seeds") {
    const LMConfig cfg = small_config(12);
    auto a = init_model<float>(cfg, 5, Role::draft);
    auto b = init_model<float>(cfg, 5, Role::draft);
    auto c = init_model<float>(cfg, 6, Role::draft);
    const auto pa = a.named_params(), pb = b.named_params(), pc = c.named_params();
    float max_diff_same = 0.0f, max_diff_other = 0.0f;
    for (size_t i = 0; i < pa.size(); ++i) {
        for (size_t j = 0; j < pa[i].second->numel(); ++j) {
            max_diff_same = std::max(max_diff_same,
                                     std::abs(pa[i].second->data[j] - pb[i].second->data[j]));
            max_diff_other = std::max(max_diff_other,
                                      std::abs(pa[i].second->data[j] - pc[i].second->data[j]));
        }
    }
    CHECK(max_diff_same == 0.0f);
    CHECK(max_diff_other > 0.0f);
}

TEST_CASE("zeroed tied embedding gives all-zero logits") {
    auto m = init_model<float>(small_config(10), 1, Role::draft);
    std::fill(m.tok_emb->data.begin(), m.tok_emb->data.end(), 0.0f);
    auto logits = m.forward_seq({1, 2, 3});
    for (float v : logits->data) {
        CHECK(v == 0.0f);
    }
}

TEST_CASE("causality: perturbing a future token leaves earlier logits bit-identical") {
    auto m = init_model<float>(small_config(20), 9, Role::target);
    Rng rng(4);
    auto tokens = random_tokens(rng, 10, 20);
    auto base = m.forward_seq(tokens);
    for (int j : {9, 6, 3}) {
        auto perturbed = tokens;
        perturbed[j] = (perturbed[j] + 7) % 20;
        auto changed = m.forward_seq(perturbed);
        for (int pos = 0; pos < j; ++pos) {
            for (int v = 0; v < 20; ++v) {
                REQUIRE(base->data[pos * 20 + v] == changed->data[pos * 20 + v]);
            }
        }
    }
}

TEST_CASE("initial cross entropy on random tokens is about ln(vocab)") {
    const int vocab = 32;
    LMConfig cfg = small_config(vocab);
    cfg.d_model = 32;
    auto m = init_model<float>(cfg, 3, Role::target);
    Rng rng(8);
    double total = 0.0;
    int count = 0;
    for (int trial = 0; trial < 8; ++trial) {
        auto tokens = random_tokens(rng, cfg.context_len, vocab);
        nc::Graph g;
        auto logits = m.forward(g, tokens.data(), 1, cfg.context_len);
        std::vector<int32_t> labels(tokens.begin() + 1, tokens.end());
        labels.push_back(static_cast<int32_t>(rng.below(vocab)));
        auto losses = g.cross_entropy_rows(logits, labels, dd::kIgnoreLabel);
        for (float v : losses->data) {
            total += v;
            ++count;
        }
    }
    const double mean_ce = total / count;
    CHECK(mean_ce == doctest::Approx(std::log(vocab)).epsilon(0.05));
}

TEST_CASE("overlong sequence is rejected, not truncated") {
    auto m = init_model<float>(small_config(10), 2, Role::draft);
    std::vector<int32_t> tokens(m.cfg.context_len + 1, 1);
    CHECK_THROWS_WITH_AS(m.forward_seq(tokens), doctest::Contains("context"), std::invalid_argument);
}

TEST_CASE("clone is a deep copy") {
    auto m = init_model<float>(small_config(14), 11, Role::draft);
    auto snapshot = clone_model(m, Role::reference);
    CHECK(snapshot.role == Role::reference);

    Rng rng(12);
    auto tokens = random_tokens(rng, 8, 14);
    auto before = snapshot.forward_seq(tokens)->data;
    auto original_before = m.forward_seq(tokens)->data;
    CHECK(before == original_before);

    // train the original a little; the clone must not move
    auto data = dd::gen_template(3, 24, 2, 2);
    LMConfig cfg = m.cfg;
    cfg.vocab_size = data.tokenizer.vocab_size();
    cfg.context_len = 16;
    auto trained = init_model<float>(cfg, 11, Role::draft);
    auto frozen = clone_model(trained);
    auto probe = random_tokens(rng, 8, cfg.vocab_size);
    auto frozen_before = frozen.forward_seq(probe)->data;
    testsup::train_ce(trained, data.train, data.tokenizer, 1, 1e-3, 5);
    CHECK(frozen.forward_seq(probe)->data == frozen_before);
    bool moved = false;
    auto after_train = trained.forward_seq(probe)->data;
    for (size_t i = 0; i < after_train.size(); ++i) {
        moved = moved || after_train[i] != frozen_before[i];
    }
    CHECK(moved);
}

TEST_CASE("checkpoint round trip reproduces forward bit-exactly") {
    auto m = init_model<float>(small_config(18), 21, Role::target);
    m.train_steps = 123;
    const std::string path = "/tmp/specdesk_test_ckpt.bin";
    save_checkpoint(m, path);
    auto loaded = load_checkpoint(path);
    CHECK(loaded.cfg == m.cfg);
    CHECK(loaded.role == Role::target);
    CHECK(loaded.init_seed == 21);
    CHECK(loaded.train_steps == 123);
    Rng rng(31);
    auto tokens = random_tokens(rng, 12, 18);
    CHECK(loaded.forward_seq(tokens)->data == m.forward_seq(tokens)->data);
    CHECK(model_hash(loaded) == model_hash(m));
    std::remove(path.c_str());
}

TEST_CASE("truncated checkpoint is a corrupt-blob error") {
    auto m = init_model<float>(small_config(18), 22, Role::draft);
    const std::string path = "/tmp/specdesk_test_trunc.bin";
    save_checkpoint(m, path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 64));
    out.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("corrupt"), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint version and config mismatches are explicit errors") {
    auto m = init_model<float>(small_config(18), 23, Role::draft);
    const std::string path = "/tmp/specdesk_test_badver.bin";
    save_checkpoint(m, path);
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(4);
        const uint32_t bad = 99;
        f.write(reinterpret_cast<const char*>(&bad), 4);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), std::runtime_error);
    std::remove(path.c_str());

    const std::string path2 = "/tmp/specdesk_test_cfg.bin";
    save_checkpoint(m, path2);
    LMConfig other = m.cfg;
    other.d_ff *= 2;
    CHECK_THROWS_WITH_AS(load_checkpoint_expect(path2, other), doctest::Contains("config"), std::runtime_error);
    std::remove(path2.c_str());
}

TEST_CASE("default target/draft configs keep a >=20x parameter gap") {
    LMConfig target;
    target.vocab_size = 57;
    target.context_len = 128;
    target.n_layers = 4;
    target.d_model = 128;
    target.n_heads = 4;
    target.d_ff = 512;
    LMConfig draft;
    draft.vocab_size = 57;
    draft.context_len = 128;
    draft.n_layers = 1;
    draft.d_model = 32;
    draft.n_heads = 2;
    draft.d_ff = 128;
    const double ratio = static_cast<double>(target.param_count()) / static_cast<double>(draft.param_count());
    CHECK(ratio >= 20.0);
    // declared parameter count matches the instantiated model
    auto m = init_model<float>(draft, 1, Role::draft);
    CHECK(m.param_count() == draft.param_count());
}

TEST_CASE("two-layer model masters a repeating corpus") {
    // deterministic repetition: the optimum is the repetition rule
    auto tok = dd::Tokenizer::char_default();
    const std::string motif = "abcd";
    dd::Dataset ds;
    ds.task = "repeat";
    ds.split = "train";
    Rng rng(77);
    for (int i = 0; i < 48; ++i) {
        const int offset = static_cast<int>(rng.below(motif.size()));
        std::string text;
        for (int j = 0; j < 12; ++j) {
            text += motif[(offset + j) % motif.size()];
        }
        dd::Example e;
        e.prompt = tok.encode(text.substr(0, 4));
        e.completion = tok.encode(text.substr(4));
        e.completion.push_back(tok.eos_id());
        ds.examples.push_back(e);
    }
    LMConfig cfg;
    cfg.vocab_size = tok.vocab_size();
    cfg.context_len = 16;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    auto m = init_model<float>(cfg, 5, Role::target);
    testsup::train_ce(m, ds, tok, 30, 3e-3, 99);

    // held-out continuations with unseen offsets mid-motif
    int correct = 0, total = 0;
    for (int offset = 0; offset < 4; ++offset) {
        std::string text;
        for (int j = 0; j < 13; ++j) {
            text += motif[(offset + j) % motif.size()];
        }
        auto ids = tok.encode(text);
        auto logits = m.forward_seq(std::vector<int32_t>(ids.begin(), ids.end() - 1));
        // the final trained position predicts eos, so stop one short of it
        for (int pos = 5; pos < static_cast<int>(ids.size()) - 2; ++pos) {
            const float* row = logits->data.data() + static_cast<size_t>(pos) * cfg.vocab_size;
            correct += nc::argmax_lowest(row, cfg.vocab_size) == ids[pos + 1];
            ++total;
        }
    }
    CHECK(static_cast<double>(correct) / total > 0.95);
}

TEST_CASE("full tiny-LM loss passes finite differences on a 2-token batch") {
    LMConfig cfg;
    cfg.vocab_size = 11;
    cfg.context_len = 4;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    auto m = init_model<double>(cfg, 13, Role::draft);
    // nudge layernorm params off their init so their gradients are generic
    Rng rng(14);
    for (auto& [name, t] : m.named_params()) {
        if (name.find("ln") != std::string::npos) {
            for (auto& v : t->data) {
                v += rng.normal() * 0.05;
            }
        }
    }
    const std::vector<int32_t> tokens{3, 7};
    const std::vector<int32_t> labels{7, 5};
    auto leaves = m.params();
    testsup::gradcheck(leaves, [&](nc::GraphT<double>& g) {
        auto logits = m.forward(g, tokens.data(), 1, 2);
        auto losses = g.cross_entropy_rows(logits, labels, dd::kIgnoreLabel);
        return g.weighted_sum(losses, {0.5, 0.5});
    }, 1234, 60);
}
