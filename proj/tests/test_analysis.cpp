#include <doctest.h>

#include "support.hpp"

#include <specdesk/analysis.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

using namespace specdesk;
using namespace specdesk::analysis;
using namespace specdesk::tinylm;
namespace nc = specdesk::numcore;
namespace dd = specdesk::datasets;

namespace {

LMConfig cfg_of(int vocab, int layers, int d, int heads, int context = 96) {
    LMConfig c;
    c.vocab_size = vocab;
    c.context_len = context;
    c.n_layers = layers;
    c.d_model = d;
    c.n_heads = heads;
    c.d_ff = d * 2;
    return c;
}

struct Fixture {
    dd::TaskData data = dd::gen_arithmetic(301, 48, 4, 12);
    Model target;
    Model draft;
    TrajectorySet trajs;

    Fixture() {
        LMConfig tc = cfg_of(data.tokenizer.vocab_size(), 2, 32, 2);
        LMConfig qc = cfg_of(data.tokenizer.vocab_size(), 1, 16, 2);
        target = init_model<float>(tc, 302, Role::target);
        draft = init_model<float>(qc, 303, Role::draft);
        testsup::train_ce(target, data.train, data.tokenizer, 3, 3e-3, 304);
        testsup::train_ce(draft, data.train, data.tokenizer, 1, 3e-3, 305);
        std::vector<std::vector<int32_t>> prompts;
        for (const auto& e : data.test.examples) {
            prompts.push_back(e.prompt);
        }
        trajs = target_trajectories(target, prompts, 48, data.tokenizer.eos_id());
    }
};

const Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("histogram conserves counts and orders edges") {
    Rng rng(1);
    std::vector<double> values;
    for (int i = 0; i < 500; ++i) {
        values.push_back(rng.normal());
    }
    auto h = make_histogram(values, -4, 4, 16);
    int64_t total = 0;
    for (auto c : h.counts) {
        total += c;
    }
    CHECK(total == 500);
    CHECK(h.total == 500);
    for (size_t i = 1; i < h.edges.size(); ++i) {
        CHECK(h.edges[i] > h.edges[i - 1]);
    }
}

TEST_CASE("acceptance histogram: perfect drafts land in the top bin") {
    std::vector<specdec::GenerationResult> results(6);
    for (auto& r : results) {
        r.stats.accept = 10;
        r.stats.reject = 0;
        r.stats.blocks = 2;
    }
    auto h = acceptance_histogram(results, 10);
    CHECK(h.counts.back() == 6);
    for (size_t i = 0; i + 1 < h.counts.size(); ++i) {
        CHECK(h.counts[i] == 0);
    }
}

TEST_CASE("acceptance histogram mean matches the per-example mean exactly") {
    Rng rng(2);
    std::vector<specdec::GenerationResult> results;
    double want = 0.0;
    for (int i = 0; i < 40; ++i) {
        specdec::GenerationResult r;
        r.stats.accept = 1 + static_cast<int64_t>(rng.below(20));
        r.stats.reject = static_cast<int64_t>(rng.below(10));
        results.push_back(r);
        want += static_cast<double>(r.stats.accept) / static_cast<double>(r.stats.accept + r.stats.reject);
    }
    want /= results.size();
    auto h = acceptance_histogram(results, 20);
    CHECK(std::abs(h.mean - want) < 1e-9);

    // two method runs over the same prompts share bin edges by construction
    auto h2 = acceptance_histogram(std::vector<specdec::GenerationResult>(results.begin(), results.begin() + 5), 20);
    CHECK(h.edges == h2.edges);
}

TEST_CASE("acceptance histogram rejects empty and undecided input") {
    CHECK_THROWS_AS(acceptance_histogram({}, 10), std::invalid_argument);
    std::vector<specdec::GenerationResult> results(1);
    CHECK_THROWS_AS(acceptance_histogram(results, 10), std::invalid_argument);
}

TEST_CASE("margins of the target against itself are all positive") {
    const auto& f = fixture();
    auto rep = margin_distribution(f.target, f.target, f.trajs);
    CHECK(rep.fraction_positive == 1.0);
    for (const auto& r : rep.records) {
        CHECK(r.accepted);
        CHECK(r.margin >= 0.0);
    }
}

TEST_CASE("margin sign agrees with the acceptance decision") {
    const auto& f = fixture();
    auto rep = margin_distribution(f.target, f.draft, f.trajs);
    for (const auto& r : rep.records) {
        if (r.margin > 0) {
            CHECK(r.accepted);
        }
        if (r.margin < 0) {
            CHECK_FALSE(r.accepted);
        }
    }
}

TEST_CASE("fraction-positive equals independently recomputed teacher-forced acceptance") {
    const auto& f = fixture();
    auto rep = margin_distribution(f.target, f.draft, f.trajs);
    // independent recomputation with per-position greedy decoding on the draft
    int64_t agree = 0, total = 0;
    for (size_t traj = 0; traj < f.trajs.tokens.size(); ++traj) {
        const auto& toks = f.trajs.tokens[traj];
        for (int pos = f.trajs.prompt_len[traj]; pos < static_cast<int>(toks.size()); ++pos) {
            std::vector<int32_t> ctx(toks.begin(), toks.begin() + pos);
            agree += specdec::greedy_next(f.draft, ctx) == toks[pos];
            ++total;
        }
    }
    REQUIRE(total == static_cast<int64_t>(rep.records.size()));
    CHECK(rep.fraction_positive == static_cast<double>(agree) / static_cast<double>(total));
}

TEST_CASE("uniform-logit draft has no positive margins") {
    const auto& f = fixture();
    auto uniform = init_model<float>(f.draft.cfg, 99, Role::draft);
    std::fill(uniform.tok_emb->data.begin(), uniform.tok_emb->data.end(), 0.0f);
    // tied head: zero embedding table means identically zero logits
    auto rep = margin_distribution(f.target, uniform, f.trajs);
    for (const auto& r : rep.records) {
        CHECK(r.margin <= 0.0);
    }
}

TEST_CASE("kl distribution of a model with itself vanishes") {
    const auto& f = fixture();
    auto rep = kl_distribution(f.target, f.target, f.trajs);
    for (double v : rep.values) {
        CHECK(v < 1e-9);
        CHECK(v >= 0.0);
    }
}

TEST_CASE("kl values recompute from raw logits through the shared divergence op") {
    const auto& f = fixture();
    auto rep = kl_distribution(f.target, f.draft, f.trajs);
    for (double v : rep.values) {
        CHECK(v >= 0.0);
    }
    // recompute the first trajectory position by position
    const auto& toks = f.trajs.tokens[0];
    const int plen = f.trajs.prompt_len[0];
    const int V = f.target.cfg.vocab_size;
    auto tlogits = f.target.forward_seq(std::vector<int32_t>(toks.begin(), toks.end() - 1));
    auto dlogits = f.draft.forward_seq(std::vector<int32_t>(toks.begin(), toks.end() - 1));
    for (int pos = plen; pos < static_cast<int>(toks.size()); ++pos) {
        nc::Tensor p, q;
        p.shape = {1, V};
        q.shape = {1, V};
        p.data.assign(tlogits->data.begin() + static_cast<size_t>(pos - 1) * V,
                      tlogits->data.begin() + static_cast<size_t>(pos) * V);
        q.data.assign(dlogits->data.begin() + static_cast<size_t>(pos - 1) * V,
                      dlogits->data.begin() + static_cast<size_t>(pos) * V);
        const double want = distill::tokenwise_divergence(p, q, distill::Divergence::forward_kl)[0];
        CHECK(std::abs(rep.values[pos - plen] - want) < 1e-7);
    }
}

TEST_CASE("error overlap of identical drafts has empty symmetric difference") {
    const auto& f = fixture();
    auto rep = error_overlap(f.target, f.draft, f.draft, f.trajs);
    CHECK(rep.only_a == 0);
    CHECK(rep.only_b == 0);
    CHECK(rep.only_a_fraction == 0.0);
}

TEST_CASE("error overlap set arithmetic covers every position") {
    const auto& f = fixture();
    auto rep = error_overlap(f.target, f.draft, f.target, f.trajs);
    // draft_b == target never errs, so every draft error is unique to a
    CHECK(rep.only_b == 0);
    CHECK(rep.both == 0);
    int64_t positions = 0;
    for (size_t traj = 0; traj < f.trajs.tokens.size(); ++traj) {
        positions += static_cast<int64_t>(f.trajs.tokens[traj].size()) - f.trajs.prompt_len[traj];
    }
    CHECK(rep.both + rep.only_a + rep.only_b + rep.neither == positions);
    if (rep.only_a > 0) {
        CHECK(rep.only_a_fraction == 1.0);
    }

    // perfect draft against an imperfect one: errors of a are a subset of b's
    auto subset = error_overlap(f.target, f.target, f.draft, f.trajs);
    CHECK(subset.only_a == 0);
    CHECK(subset.only_a_fraction == 0.0);
}

TEST_CASE("selected-token dump lists every supervised token at k=1") {
    const auto& f = fixture();
    dd::BatchStream stream(f.data.train, 8, 96, f.data.tokenizer, 7);
    dd::Batch b;
    REQUIRE(stream.next(b));
    auto reference = init_model<float>(f.draft.cfg, 42, Role::reference);
    auto records = distill::compute_deltas(f.target, reference, f.draft, b);
    distill::FilterConfig all;
    all.mode = distill::FilterConfig::Mode::top;
    all.k = 1.0;
    auto mask = distill::select_tokens(records, all);
    const std::string path = "/tmp/specdesk_dump_test.tsv";
    dump_selected_tokens(records, mask, f.data.tokenizer, path);
    std::ifstream in(path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        ++lines;
    }
    CHECK(lines == static_cast<int>(records.size()) + 1);
    std::remove(path.c_str());

    distill::SelectionMask empty;
    empty.selected.assign(records.size(), 0);
    empty.retained = 0;
    CHECK_THROWS_AS(dump_selected_tokens(records, empty, f.data.tokenizer, path), std::invalid_argument);
    CHECK_THROWS_AS(dump_selected_tokens(records, mask, f.data.tokenizer, "/nonexistent_dir/x.tsv"),
                    std::runtime_error);
}

TEST_CASE("histogram csv writes one row per bin") {
    Rng rng(5);
    std::vector<double> values;
    for (int i = 0; i < 64; ++i) {
        values.push_back(rng.uniform());
    }
    auto h = make_histogram(values, 0, 1, 8);
    const std::string path = "/tmp/specdesk_hist_test.csv";
    write_histogram_csv(h, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "bin_left,bin_right,count");
    int rows = 0;
    while (std::getline(in, line)) {
        rows += line.rfind("#", 0) != 0;
    }
    CHECK(rows == 8);
    std::remove(path.c_str());
}
