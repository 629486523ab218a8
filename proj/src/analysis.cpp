#include <specdesk/analysis.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace specdesk::analysis {

namespace nc = specdesk::numcore;
using tinylm::Model;

Histogram make_histogram(const std::vector<double>& values, double lo, double hi, int bins) {
    if (values.empty()) {
        throw std::invalid_argument("make_histogram: no values");
    }
    if (bins < 1 || !(hi > lo)) {
        throw std::invalid_argument("make_histogram: need bins >= 1 and hi > lo");
    }
    Histogram h;
    h.edges.resize(bins + 1);
    for (int i = 0; i <= bins; ++i) {
        h.edges[i] = lo + (hi - lo) * i / bins;
    }
    h.counts.assign(bins, 0);
    double sum = 0.0;
    for (double v : values) {
        int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
        b = std::clamp(b, 0, bins - 1);
        h.counts[b] += 1;
        sum += v;
    }
    h.total = static_cast<int64_t>(values.size());
    h.mean = sum / static_cast<double>(values.size());
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const size_t n = sorted.size();
    h.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    return h;
}

void write_histogram_csv(const Histogram& h, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("write_histogram_csv: cannot open '" + path + "'");
    }
    out << "bin_left,bin_right,count\n";
    for (size_t i = 0; i < h.counts.size(); ++i) {
        out << h.edges[i] << "," << h.edges[i + 1] << "," << h.counts[i] << "\n";
    }
    out << "# total=" << h.total << " mean=" << h.mean << " median=" << h.median
        << " fraction_positive=" << h.fraction_positive << "\n";
}

Histogram acceptance_histogram(const std::vector<specdec::GenerationResult>& results, int bins) {
    if (results.empty()) {
        throw std::invalid_argument("acceptance_histogram: no results");
    }
    std::vector<double> alphas;
    alphas.reserve(results.size());
    for (const auto& r : results) {
        if (r.stats.decisions() == 0) {
            throw std::invalid_argument("acceptance_histogram: result without verification decisions");
        }
        alphas.push_back(static_cast<double>(r.stats.accept) / static_cast<double>(r.stats.decisions()));
    }
    return make_histogram(alphas, 0.0, 1.0 + 1e-12, bins);
}

TrajectorySet target_trajectories(const Model& target, const std::vector<std::vector<int32_t>>& prompts,
                                  int max_new_tokens, int32_t eos) {
    TrajectorySet out;
    out.tokens.reserve(prompts.size());
    for (const auto& p : prompts) {
        out.tokens.push_back(specdec::generate_greedy(target, p, max_new_tokens, eos));
        out.prompt_len.push_back(static_cast<int>(p.size()));
    }
    return out;
}

namespace {

// logits for positions 0..len-2 of a fixed token sequence, with the same
// sliding-window behavior as greedy decoding when the sequence overflows
std::vector<float> teacher_forced_logits(const Model& m, const std::vector<int32_t>& tokens) {
    const int len = static_cast<int>(tokens.size());
    const int V = m.cfg.vocab_size;
    const int W = m.cfg.context_len;
    std::vector<float> rows(static_cast<size_t>(len - 1) * V);
    if (len <= W) {
        const std::vector<int32_t> inputs(tokens.begin(), tokens.end() - 1);
        auto logits = m.forward_seq(inputs);
        std::copy(logits->data.begin(), logits->data.end(), rows.begin());
    } else {
        for (int pos = 0; pos < len - 1; ++pos) {
            const int begin = std::max(0, pos + 1 - W);
            const std::vector<int32_t> window(tokens.begin() + begin, tokens.begin() + pos + 1);
            auto logits = m.forward_seq(window);
            const float* last = logits->data.data() + (window.size() - 1) * V;
            std::copy(last, last + V, rows.begin() + static_cast<size_t>(pos) * V);
        }
    }
    return rows;
}

}  // namespace

MarginReport margin_distribution(const Model& target, const Model& draft, const TrajectorySet& trajectories,
                                 int bins) {
    if (target.cfg.vocab_size != draft.cfg.vocab_size) {
        throw std::invalid_argument("margin_distribution: vocab mismatch");
    }
    const int V = draft.cfg.vocab_size;
    MarginReport rep;
    for (size_t traj = 0; traj < trajectories.tokens.size(); ++traj) {
        const auto& toks = trajectories.tokens[traj];
        const int plen = trajectories.prompt_len[traj];
        if (static_cast<int>(toks.size()) <= plen) {
            continue;
        }
        const auto rows = teacher_forced_logits(draft, toks);
        for (int pos = plen; pos < static_cast<int>(toks.size()); ++pos) {
            const float* row = rows.data() + static_cast<size_t>(pos - 1) * V;
            const int32_t want = toks[pos];  // the target's greedy choice
            double best_other = -1e300;
            for (int v = 0; v < V; ++v) {
                if (v != want) {
                    best_other = std::max(best_other, static_cast<double>(row[v]));
                }
            }
            MarginRecord r;
            r.trajectory = static_cast<int32_t>(traj);
            r.position = pos - plen;
            r.margin = static_cast<double>(row[want]) - best_other;
            r.accepted = nc::argmax_lowest(row, V) == want;
            rep.records.push_back(r);
        }
    }
    if (rep.records.empty()) {
        throw std::invalid_argument("margin_distribution: no teacher-forced positions");
    }
    std::vector<double> margins;
    margins.reserve(rep.records.size());
    int64_t positive = 0;
    for (const auto& r : rep.records) {
        margins.push_back(r.margin);
        positive += r.accepted;
    }
    rep.fraction_positive = static_cast<double>(positive) / static_cast<double>(rep.records.size());
    const auto [mn, mx] = std::minmax_element(margins.begin(), margins.end());
    const double lo = std::min(*mn, -1e-6), hi = std::max(*mx, 1e-6) + 1e-12;
    rep.hist = make_histogram(margins, lo, hi, bins);
    rep.hist.fraction_positive = rep.fraction_positive;
    return rep;
}

KlReport kl_distribution(const Model& target, const Model& draft, const TrajectorySet& trajectories,
                         int bins, distill::Divergence kind) {
    if (target.cfg.vocab_size != draft.cfg.vocab_size) {
        throw std::invalid_argument("kl_distribution: vocab mismatch");
    }
    const int V = target.cfg.vocab_size;
    KlReport rep;
    for (size_t traj = 0; traj < trajectories.tokens.size(); ++traj) {
        const auto& toks = trajectories.tokens[traj];
        const int plen = trajectories.prompt_len[traj];
        const int n = static_cast<int>(toks.size()) - plen;
        if (n <= 0) {
            continue;
        }
        const auto trows = teacher_forced_logits(target, toks);
        const auto drows = teacher_forced_logits(draft, toks);
        nc::Tensor p, q;
        p.shape = {n, V};
        q.shape = {n, V};
        p.data.assign(trows.begin() + static_cast<size_t>(plen - 1) * V,
                      trows.begin() + static_cast<size_t>(plen - 1 + n) * V);
        q.data.assign(drows.begin() + static_cast<size_t>(plen - 1) * V,
                      drows.begin() + static_cast<size_t>(plen - 1 + n) * V);
        // the distill module's divergence is the single source of truth here
        const auto values = distill::tokenwise_divergence(p, q, kind);
        rep.values.insert(rep.values.end(), values.begin(), values.end());
    }
    if (rep.values.empty()) {
        throw std::invalid_argument("kl_distribution: no teacher-forced positions");
    }
    std::vector<double> sorted = rep.values;
    std::sort(sorted.begin(), sorted.end());
    const size_t n = sorted.size();
    rep.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    rep.hist = make_histogram(rep.values, 0.0, std::max(sorted.back(), 1e-9) + 1e-12, bins);
    return rep;
}

OverlapReport error_overlap(const Model& target, const Model& draft_a, const Model& draft_b,
                            const TrajectorySet& trajectories) {
    if (target.cfg.vocab_size != draft_a.cfg.vocab_size || target.cfg.vocab_size != draft_b.cfg.vocab_size) {
        throw std::invalid_argument("error_overlap: vocab mismatch");
    }
    const int V = target.cfg.vocab_size;
    OverlapReport rep;
    for (size_t traj = 0; traj < trajectories.tokens.size(); ++traj) {
        const auto& toks = trajectories.tokens[traj];
        const int plen = trajectories.prompt_len[traj];
        if (static_cast<int>(toks.size()) <= plen) {
            continue;
        }
        const auto rows_a = teacher_forced_logits(draft_a, toks);
        const auto rows_b = teacher_forced_logits(draft_b, toks);
        for (int pos = plen; pos < static_cast<int>(toks.size()); ++pos) {
            const int32_t want = toks[pos];
            const bool a_wrong =
                nc::argmax_lowest(rows_a.data() + static_cast<size_t>(pos - 1) * V, V) != want;
            const bool b_wrong =
                nc::argmax_lowest(rows_b.data() + static_cast<size_t>(pos - 1) * V, V) != want;
            rep.both += a_wrong && b_wrong;
            rep.only_a += a_wrong && !b_wrong;
            rep.only_b += !a_wrong && b_wrong;
            rep.neither += !a_wrong && !b_wrong;
            if (a_wrong || b_wrong) {
                rep.cases.push_back({static_cast<int32_t>(traj), pos - plen, want, a_wrong, b_wrong});
            }
        }
    }
    const int64_t errors_a = rep.both + rep.only_a;
    rep.only_a_fraction = errors_a == 0 ? 0.0 : static_cast<double>(rep.only_a) / static_cast<double>(errors_a);
    return rep;
}

void write_overlap_report(const OverlapReport& rep, const TrajectorySet& trajectories,
                          const datasets::Tokenizer& tok, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("write_overlap_report: cannot open '" + path + "'");
    }
    out << "both=" << rep.both << " only_a=" << rep.only_a << " only_b=" << rep.only_b
        << " neither=" << rep.neither << " only_a_fraction=" << rep.only_a_fraction << "\n";
    out << "trajectory\tposition\ttoken\twho\n";
    for (const auto& c : rep.cases) {
        (void)trajectories;
        out << c.trajectory << "\t" << c.position << "\t" << tok.token_text(c.target_token) << "\t"
            << (c.a_wrong && c.b_wrong ? "both" : (c.a_wrong ? "a" : "b")) << "\n";
    }
}

void dump_selected_tokens(const std::vector<distill::TokenLossRecord>& records,
                          const distill::SelectionMask& mask, const datasets::Tokenizer& tok,
                          const std::string& path) {
    if (mask.selected.size() != records.size() || mask.retained == 0) {
        throw std::invalid_argument("dump_selected_tokens: empty or mismatched selection");
    }
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("dump_selected_tokens: cannot open '" + path + "'");
    }
    out << "example\toffset\tdelta\ttoken\n";
    for (size_t i = 0; i < records.size(); ++i) {
        if (!mask.selected[i]) {
            continue;
        }
        const auto& r = records[i];
        out << r.example << "\t" << r.offset << "\t" << r.delta << "\t" << tok.token_text(r.token) << "\n";
    }
}

TokenDumpWriter::TokenDumpWriter(const datasets::Tokenizer& tok, const std::string& path)
    : tok_(&tok), out_(path) {
    if (!out_) {
        throw std::runtime_error("TokenDumpWriter: cannot open '" + path + "'");
    }
    out_ << "example\toffset\tdelta\ttoken\n";
}

void TokenDumpWriter::add(const std::vector<distill::TokenLossRecord>& records,
                          const distill::SelectionMask& mask, int batch_index) {
    out_ << "# batch " << batch_index << "\n";
    for (size_t i = 0; i < records.size(); ++i) {
        if (!mask.selected[i]) {
            continue;
        }
        const auto& r = records[i];
        out_ << r.example << "\t" << r.offset << "\t" << r.delta << "\t" << tok_->token_text(r.token) << "\n";
    }
}

}  // namespace specdesk::analysis
