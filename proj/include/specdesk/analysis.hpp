#pragma once

#include <specdesk/distill.hpp>
#include <specdesk/specdec.hpp>
#include <specdesk/tokenizer.hpp>

#include <fstream>
#include <string>
#include <vector>

namespace specdesk::analysis {

struct Histogram {
    std::vector<double> edges;    // bins + 1, strictly increasing
    std::vector<int64_t> counts;  // one per bin
    int64_t total = 0;
    double mean = 0.0;
    double median = 0.0;
    double fraction_positive = 0.0;  // meaningful for margin histograms
};

Histogram make_histogram(const std::vector<double>& values, double lo, double hi, int bins);

// CSV rows: bin_left,bin_right,count
void write_histogram_csv(const Histogram& h, const std::string& path);

// per-example acceptance rates binned over [0,1] with shared edges
Histogram acceptance_histogram(const std::vector<specdec::GenerationResult>& results, int bins);

// fixed evaluation trajectories: prompt plus the target's own greedy rollout
struct TrajectorySet {
    std::vector<std::vector<int32_t>> tokens;
    std::vector<int> prompt_len;
};

TrajectorySet target_trajectories(const tinylm::Model& target,
                                  const std::vector<std::vector<int32_t>>& prompts, int max_new_tokens,
                                  int32_t eos);

// Margin of the draft's logit at the target's greedy token over the draft's
// best other logit. Positive exactly when the draft would be accepted at that
// position (ties resolved toward the lower id, as in decoding).
struct MarginRecord {
    int32_t trajectory = 0;
    int32_t position = 0;  // offset within the generated continuation
    double margin = 0.0;
    bool accepted = false;
};

struct MarginReport {
    std::vector<MarginRecord> records;
    Histogram hist;
    double fraction_positive = 0.0;  // equals teacher-forced acceptance
};

MarginReport margin_distribution(const tinylm::Model& target, const tinylm::Model& draft,
                                 const TrajectorySet& trajectories, int bins = 41);

struct KlReport {
    std::vector<double> values;  // one per teacher-forced position
    Histogram hist;
    double median = 0.0;
};

KlReport kl_distribution(const tinylm::Model& target, const tinylm::Model& draft,
                         const TrajectorySet& trajectories, int bins = 50,
                         distill::Divergence kind = distill::Divergence::forward_kl);

// teacher-forced greedy mismatch positions of two drafts against one target
struct OverlapCase {
    int32_t trajectory = 0;
    int32_t position = 0;
    int32_t target_token = 0;
    bool a_wrong = false;
    bool b_wrong = false;
};

struct OverlapReport {
    int64_t both = 0;
    int64_t only_a = 0;
    int64_t only_b = 0;
    int64_t neither = 0;
    double only_a_fraction = 0.0;  // |E_a \ E_b| / |E_a|, 0 when E_a is empty
    std::vector<OverlapCase> cases;
};

OverlapReport error_overlap(const tinylm::Model& target, const tinylm::Model& draft_a,
                            const tinylm::Model& draft_b, const TrajectorySet& trajectories);

void write_overlap_report(const OverlapReport& rep, const TrajectorySet& trajectories,
                          const datasets::Tokenizer& tok, const std::string& path);

// one line per selected token: example, offset, delta, token text
void dump_selected_tokens(const std::vector<distill::TokenLossRecord>& records,
                          const distill::SelectionMask& mask, const datasets::Tokenizer& tok,
                          const std::string& path);

// appendable variant used as a training batch hook
class TokenDumpWriter {
  public:
    TokenDumpWriter(const datasets::Tokenizer& tok, const std::string& path);

    void add(const std::vector<distill::TokenLossRecord>& records, const distill::SelectionMask& mask,
             int batch_index);

  private:
    const datasets::Tokenizer* tok_;
    std::ofstream out_;
};

}  // namespace specdesk::analysis
