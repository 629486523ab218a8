// specdesk: train tiny target/reference/draft language-model triples, run
// greedy speculative decoding with exact verification, and measure how
// selective token-filtered distillation moves the acceptance rate.

#include <CLI11.hpp>

#include <specdesk/harness.hpp>

#include <cstdlib>
#include <iostream>

namespace hh = specdesk::harness;
namespace dd = specdesk::datasets;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::vector<uint64_t> seeds;
    double k = -1.0;
    std::string filter_mode;
    std::string divergence;
    int gamma = 0;
    int eval_size = 0;
    int draft_epochs = 0;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("-c,--config", o.config_path, "experiment config JSON (defaults apply when omitted)");
    cmd->add_option("-o,--out", o.out_dir, "output root (overrides config and SPECDESK_OUT)");
    cmd->add_option("--seed", o.seeds, "seed list override");
    cmd->add_option("--k", o.k, "draft filter fraction override");
    cmd->add_option("--filter-mode", o.filter_mode, "draft filter mode: none|top|bottom");
    cmd->add_option("--divergence", o.divergence, "distillation divergence: forward_kl|reverse_kl|tvd");
    cmd->add_option("--gamma", o.gamma, "speculative block size override");
    cmd->add_option("--eval-size", o.eval_size, "held-out prompts used for evaluation");
    cmd->add_option("--draft-epochs", o.draft_epochs, "draft distillation epochs override");
}

hh::ExperimentConfig resolve_config(const CommonOpts& o) {
    hh::ExperimentConfig cfg =
        o.config_path.empty() ? hh::ExperimentConfig::defaults() : hh::load_config(o.config_path);
    if (const char* env = std::getenv("SPECDESK_OUT")) {
        cfg.out_dir = env;
    }
    if (!o.out_dir.empty()) {
        cfg.out_dir = o.out_dir;
    }
    if (!o.seeds.empty()) {
        cfg.seeds = o.seeds;
    }
    if (o.k > 0) {
        cfg.draft_train.filter.k = o.k;
    }
    if (!o.filter_mode.empty()) {
        cfg.draft_train.filter.mode = specdesk::distill::filter_mode_from_name(o.filter_mode);
    }
    if (!o.divergence.empty()) {
        const auto kind = [&] {
            if (o.divergence == "forward_kl") return specdesk::numcore::Divergence::forward_kl;
            if (o.divergence == "reverse_kl") return specdesk::numcore::Divergence::reverse_kl;
            if (o.divergence == "tvd") return specdesk::numcore::Divergence::tvd;
            throw CLI::ValidationError("--divergence", "expected forward_kl|reverse_kl|tvd");
        }();
        cfg.reference_train.divergence = kind;
        cfg.draft_train.divergence = kind;
    }
    if (o.gamma > 0) {
        cfg.sd.gamma = o.gamma;
    }
    if (o.eval_size > 0) {
        cfg.eval_size = o.eval_size;
    }
    if (o.draft_epochs > 0) {
        cfg.draft_train.epochs = o.draft_epochs;
    }
    return cfg;
}

void print_stage(const char* name, const hh::StageResult& s) {
    std::cout << name << ": " << s.checkpoint_path << (s.cache_hit ? " (cached)" : "") << "\n";
    for (size_t e = 0; e < s.curve.size(); ++e) {
        const auto& st = s.curve[e];
        std::cout << "  epoch " << e << ": objective " << st.objective << ", ppl " << st.perplexity
                  << ", selected " << st.selected_tokens << "/" << st.supervised_tokens << ", lr "
                  << st.lr_used << "\n";
    }
}

void print_eval(const hh::EvalSummary& e, int gamma) {
    std::cout << "alpha " << e.alpha << " (accept " << e.accept << ", reject " << e.reject << ")\n"
              << "tau " << e.tau_formula << " (empirical " << e.tau_empirical << ", gamma " << gamma << ")\n"
              << "cost c " << e.cost_c << ", analytic speedup " << e.speedup << "\n"
              << "exact-match " << e.exact_match << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale speculative decoding and selective distillation lab"};
    app.require_subcommand(1);

    CommonOpts o;
    std::string gen_out = "dataset.jsonl";
    std::string gen_split = "train";
    std::string eval_draft = "selective";
    std::string eval_baseline;
    std::string ablate_which;
    std::vector<double> sweep_ks{0.2, 0.4, 0.6, 0.8, 1.0};
    std::string report_dir;

    auto* gen = app.add_subcommand("gen-data", "generate a task split and export it as JSONL");
    add_common(gen, o);
    gen->add_option("--dataset-out", gen_out, "output JSONL path");
    gen->add_option("--split", gen_split, "train|val|test");

    auto* ft = app.add_subcommand("finetune-target", "fine-tune the target model on the task");
    add_common(ft, o);

    auto* dr = app.add_subcommand("distill-reference", "distill the reference model from the target");
    add_common(dr, o);

    auto* dd_cmd = app.add_subcommand("distill-draft", "distill the draft with selective token filtering");
    add_common(dd_cmd, o);

    auto* ev = app.add_subcommand("evaluate", "measure acceptance rate and analysis artifacts");
    add_common(ev, o);
    ev->add_option("--draft", eval_draft, "selective | reference | a checkpoint path");
    ev->add_option("--baseline-draft", eval_baseline,
                   "optional second draft for an error-overlap report (same choices)");

    auto* ab = app.add_subcommand("ablate", "run a named ablation");
    add_common(ab, o);
    ab->add_option("--which", ablate_which, "bottom_k | finetune_only | rkl | tvd | k_sweep")->required();

    auto* sw = app.add_subcommand("sweep", "sweep the filter fraction k");
    add_common(sw, o);
    sw->add_option("--ks", sweep_ks, "k grid");

    auto* rp = app.add_subcommand("report", "aggregate persisted run records into summary.csv");
    add_common(rp, o);
    rp->add_option("--runs-dir", report_dir, "runs directory (defaults to <out>/runs)");

    CLI11_PARSE(app, argc, argv);
    const std::string cmd = app.get_subcommands().front()->get_name();

    try {
        hh::ExperimentConfig cfg = resolve_config(o);
        if (cmd == "gen-data") {
            hh::Runner runner(cfg);
            const dd::Dataset* split = &runner.data().train;
            if (gen_split == "val") split = &runner.data().val;
            else if (gen_split == "test") split = &runner.data().test;
            else if (gen_split != "train") throw std::invalid_argument("--split must be train|val|test");
            dd::export_jsonl(*split, runner.data().tokenizer, gen_out);
            std::cout << "wrote " << split->size() << " examples to " << gen_out << "\n";
        } else if (cmd == "finetune-target") {
            hh::Runner runner(cfg);
            for (uint64_t seed : cfg.seeds) {
                print_stage(("target seed " + std::to_string(seed)).c_str(), runner.stage_target(seed));
            }
        } else if (cmd == "distill-reference") {
            hh::Runner runner(cfg);
            for (uint64_t seed : cfg.seeds) {
                print_stage(("reference seed " + std::to_string(seed)).c_str(), runner.stage_reference(seed));
            }
        } else if (cmd == "distill-draft") {
            hh::Runner runner(cfg);
            for (uint64_t seed : cfg.seeds) {
                print_stage(("draft seed " + std::to_string(seed)).c_str(),
                            runner.stage_draft(seed, cfg.draft_train,
                                               cfg.draft_train.filter.mode !=
                                                   specdesk::distill::FilterConfig::Mode::none,
                                               "selective"));
            }
        } else if (cmd == "evaluate") {
            hh::Runner runner(cfg);
            auto pick = [&](const std::string& what) {
                if (what == "selective") {
                    return runner
                        .stage_draft(cfg.seeds.front(), cfg.draft_train,
                                     cfg.draft_train.filter.mode != specdesk::distill::FilterConfig::Mode::none,
                                     "selective")
                        .checkpoint_path;
                }
                if (what == "reference") {
                    return runner.stage_reference(cfg.seeds.front()).checkpoint_path;
                }
                return what;  // literal checkpoint path
            };
            const auto target = runner.stage_target(cfg.seeds.front());
            const auto draft_path = pick(eval_draft);
            auto eval = runner.evaluate_pair(target.checkpoint_path, draft_path);
            print_eval(eval, cfg.sd.gamma);
            if (!eval_baseline.empty()) {
                const auto other_path = pick(eval_baseline);
                auto target_m = specdesk::tinylm::load_checkpoint(target.checkpoint_path);
                auto a = specdesk::tinylm::load_checkpoint(draft_path);
                auto b = specdesk::tinylm::load_checkpoint(other_path);
                const auto& trajs = runner.trajectories_for(target.checkpoint_path);
                auto overlap = specdesk::analysis::error_overlap(target_m, a, b, trajs);
                const std::string path = cfg.out_dir + "/overlap.txt";
                specdesk::analysis::write_overlap_report(overlap, trajs, runner.data().tokenizer, path);
                std::cout << "error overlap: both " << overlap.both << ", only-draft " << overlap.only_a
                          << ", only-baseline " << overlap.only_b << " -> " << path << "\n";
            }
        } else if (cmd == "ablate") {
            hh::Runner runner(cfg);
            auto records = runner.run_ablation(ablate_which);
            hh::write_report(records, cfg.out_dir);
            for (const auto& r : records) {
                std::cout << r.method << " seed " << r.seed << " k " << r.k << " alpha " << r.eval.alpha
                          << "\n";
            }
            std::cout << "summary: " << cfg.out_dir << "/summary.csv\n";
        } else if (cmd == "sweep") {
            hh::Runner runner(cfg);
            auto records = runner.run_k_sweep(sweep_ks);
            hh::write_report(records, cfg.out_dir);
            for (const auto& r : records) {
                std::cout << "k " << r.k << " seed " << r.seed << " alpha " << r.eval.alpha << "\n";
            }
            std::cout << "summary: " << cfg.out_dir << "/summary.csv\n";
        } else if (cmd == "report") {
            const std::string dir = report_dir.empty() ? cfg.out_dir + "/runs" : report_dir;
            auto records = hh::load_run_records(dir);
            hh::write_report(records, cfg.out_dir);
            std::cout << "aggregated " << records.size() << " runs into " << cfg.out_dir << "/summary.csv\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "[" << cmd << "] error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
