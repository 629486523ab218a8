#pragma once

#include <specdesk/analysis.hpp>
#include <specdesk/datasets.hpp>
#include <specdesk/distill.hpp>
#include <specdesk/metrics.hpp>
#include <specdesk/specdec.hpp>
#include <specdesk/tinylm.hpp>

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace specdesk::harness {

inline constexpr const char* kCodeVersion = "specdesk 0.1.0";

struct TaskSpec {
    std::string name = "arithmetic";  // arithmetic | template | jsonl
    uint64_t seed = 1234;
    int n_train = 768;
    int n_val = 128;
    int n_test = 200;
    int digits = 2;  // arithmetic only
    int steps = 3;   // arithmetic only
    std::string jsonl_path;  // jsonl only
};

struct ExperimentConfig {
    TaskSpec task;
    std::string tokenizer_mode = "char";
    tinylm::LMConfig target_model;
    tinylm::LMConfig draft_model;
    distill::TrainConfig target_train;     // cross-entropy fine-tuning
    distill::TrainConfig reference_train;  // plain distillation
    distill::TrainConfig draft_train;      // selective distillation
    specdec::SDConfig sd;
    int eval_size = 200;
    std::vector<uint64_t> seeds{1, 2, 3};
    std::string out_dir = "out";

    static ExperimentConfig defaults();
    void validate() const;
};

// strict parsing: unknown keys are errors
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

struct StageResult {
    std::string checkpoint_path;
    uint64_t stage_hash = 0;
    bool cache_hit = false;
    double seconds = 0.0;
    std::vector<distill::EpochStats> curve;
};

struct EvalSummary {
    double alpha = 0.0;
    int64_t accept = 0;
    int64_t reject = 0;
    int64_t blocks = 0;
    double tau_formula = 0.0;    // block efficiency at the measured alpha
    double tau_empirical = 0.0;  // mean generated tokens per block
    double cost_c = 0.0;
    double speedup = 0.0;
    double exact_match = 0.0;  // greedy output equals the reference completion
    std::vector<double> per_example_alpha;
};

struct RunRecord {
    std::string run_id;
    std::string method;  // baseline | selective | bottom | ...
    std::string task;
    uint64_t seed = 0;
    double k = 1.0;
    std::string filter_mode = "none";
    std::string divergence = "forward_kl";
    uint64_t config_hash = 0;
    double param_ratio = 0.0;
    std::string lr_rule;
    StageResult target_stage, reference_stage, draft_stage;
    EvalSummary eval;
    std::vector<std::string> artifacts;
    double wall_seconds = 0.0;
    std::string code_version = kCodeVersion;
};

nlohmann::json run_record_to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);

// Executes pipeline stages with content-addressed checkpoint caching under
// <out_dir>/cache and writes RunRecords under <out_dir>/runs.
class Runner {
  public:
    explicit Runner(ExperimentConfig cfg);

    const ExperimentConfig& config() const { return cfg_; }
    const datasets::TaskData& data() const { return data_; }
    uint64_t dataset_hash() const { return dataset_hash_; }

    StageResult stage_target(uint64_t seed);
    StageResult stage_reference(uint64_t seed);
    // tag distinguishes draft variants in the cache; train.seed is overridden
    // from the master seed
    StageResult stage_draft(uint64_t seed, const distill::TrainConfig& train, bool with_reference,
                            const std::string& tag, const std::string& dump_path = "");
    // cross-entropy ablation stages
    StageResult stage_reference_finetuned(uint64_t seed);
    StageResult stage_draft_finetuned(uint64_t seed, const distill::TrainConfig& train,
                                      const std::string& tag);

    EvalSummary evaluate_pair(const std::string& target_ckpt, const std::string& draft_ckpt);

    // the three-step pipeline with selective distillation (cfg.draft_train)
    RunRecord run_pipeline(uint64_t seed);
    // unfiltered distillation; shares target/reference checkpoints with a
    // paired pipeline run of the same seed
    RunRecord run_baseline(uint64_t seed);
    // bottom_k | finetune_only | rkl | tvd | k_sweep
    std::vector<RunRecord> run_ablation(const std::string& which);
    std::vector<RunRecord> run_k_sweep(const std::vector<double>& ks);

    // target-greedy rollouts over the eval prompts, cached per target
    const analysis::TrajectorySet& trajectories_for(const std::string& target_ckpt);

    std::vector<std::vector<int32_t>> eval_prompts() const;
    std::string runs_dir() const;
    std::string run_artifact_dir(const std::string& run_id) const;

  private:
    ExperimentConfig cfg_;
    datasets::TaskData data_;
    uint64_t dataset_hash_ = 0;
    std::map<std::string, analysis::TrajectorySet> traj_cache_;
    // frozen-model caches shared across stages within this runner
    std::map<std::string, distill::TeacherCache> teacher_caches_;
    std::map<std::string, distill::RefLossCache> ref_caches_;

    distill::TeacherCache& shared_teacher_cache(const std::string& ckpt) { return teacher_caches_[ckpt]; }
    distill::RefLossCache& shared_ref_cache(const std::string& ckpt, const std::string& loss_kind) {
        return ref_caches_[ckpt + "|" + loss_kind];
    }

    RunRecord finish_run(const std::string& method, uint64_t seed, const distill::TrainConfig& draft_train,
                         const StageResult& target, const StageResult& reference, const StageResult& draft,
                         double t0_seconds);
    std::string cache_dir() const;
};

void write_report(const std::vector<RunRecord>& records, const std::string& out_dir);
std::vector<RunRecord> load_run_records(const std::string& runs_dir);

// seed derivation shared by stages so paired runs line up exactly
uint64_t derive_seed(uint64_t master, const std::string& tag);

}  // namespace specdesk::harness
