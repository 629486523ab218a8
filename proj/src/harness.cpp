#include <specdesk/harness.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace specdesk::harness {

namespace fs = std::filesystem;
namespace nc = specdesk::numcore;
namespace dd = specdesk::datasets;
using tinylm::LMConfig;
using tinylm::Model;
using tinylm::Role;

uint64_t derive_seed(uint64_t master, const std::string& tag) {
    return fnv1a(tag, fnv1a(&master, sizeof(master)));
}

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::string hex16(uint64_t h) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
}

void expect_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key)) {
            throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
        }
    }
}

nlohmann::json lm_config_json(const LMConfig& c) {
    return {{"context_len", c.context_len}, {"n_layers", c.n_layers},   {"d_model", c.d_model},
            {"n_heads", c.n_heads},         {"d_ff", c.d_ff},           {"tie_embeddings", c.tie_embeddings}};
}

void lm_config_from(const nlohmann::json& j, LMConfig& c, const std::string& where) {
    expect_keys(j, {"context_len", "n_layers", "d_model", "n_heads", "d_ff", "tie_embeddings"}, where);
    c.context_len = j.value("context_len", c.context_len);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
}

nlohmann::json train_config_json(const distill::TrainConfig& t) {
    return {{"batch_size", t.batch_size},
            {"lr", t.lr},
            {"epochs", t.epochs},
            {"divergence", nc::divergence_name(t.divergence)},
            {"filter_mode", distill::filter_mode_name(t.filter.mode)},
            {"filter_k", t.filter.k},
            {"lr_scaling", t.lr_scaling}};
}

nc::Divergence divergence_from_name(const std::string& s) {
    if (s == "forward_kl") return nc::Divergence::forward_kl;
    if (s == "reverse_kl") return nc::Divergence::reverse_kl;
    if (s == "tvd") return nc::Divergence::tvd;
    throw std::invalid_argument("config: unknown divergence '" + s + "'");
}

void train_config_from(const nlohmann::json& j, distill::TrainConfig& t, const std::string& where) {
    expect_keys(j, {"batch_size", "lr", "epochs", "divergence", "filter_mode", "filter_k", "lr_scaling"},
                where);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.lr = j.value("lr", t.lr);
    t.epochs = j.value("epochs", t.epochs);
    if (j.contains("divergence")) {
        t.divergence = divergence_from_name(j["divergence"].get<std::string>());
    }
    if (j.contains("filter_mode")) {
        t.filter.mode = distill::filter_mode_from_name(j["filter_mode"].get<std::string>());
    }
    t.filter.k = j.value("filter_k", t.filter.k);
    t.lr_scaling = j.value("lr_scaling", t.lr_scaling);
}

nlohmann::json epoch_stats_json(const distill::EpochStats& e) {
    return {{"objective", e.objective},
            {"ce_mean", e.ce_mean},
            {"perplexity", e.perplexity},
            {"supervised_tokens", e.supervised_tokens},
            {"selected_tokens", e.selected_tokens},
            {"lr_used", e.lr_used}};
}

distill::EpochStats epoch_stats_from(const nlohmann::json& j) {
    distill::EpochStats e;
    e.objective = j.value("objective", 0.0);
    e.ce_mean = j.value("ce_mean", 0.0);
    e.perplexity = j.value("perplexity", 1.0);
    e.supervised_tokens = j.value("supervised_tokens", int64_t{0});
    e.selected_tokens = j.value("selected_tokens", int64_t{0});
    e.lr_used = j.value("lr_used", 0.0);
    return e;
}

nlohmann::json stage_json(const StageResult& s) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& e : s.curve) {
        curve.push_back(epoch_stats_json(e));
    }
    return {{"checkpoint", s.checkpoint_path},
            {"hash", hex16(s.stage_hash)},
            {"cache_hit", s.cache_hit},
            {"seconds", s.seconds},
            {"curve", curve}};
}

StageResult stage_from(const nlohmann::json& j) {
    StageResult s;
    s.checkpoint_path = j.value("checkpoint", std::string());
    s.stage_hash = std::stoull(j.value("hash", std::string("0")), nullptr, 16);
    s.cache_hit = j.value("cache_hit", false);
    s.seconds = j.value("seconds", 0.0);
    for (const auto& e : j.value("curve", nlohmann::json::array())) {
        s.curve.push_back(epoch_stats_from(e));
    }
    return s;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig cfg;
    cfg.target_model.context_len = 128;
    cfg.target_model.n_layers = 4;
    cfg.target_model.d_model = 128;
    cfg.target_model.n_heads = 4;
    cfg.target_model.d_ff = 512;
    cfg.draft_model.context_len = 128;
    cfg.draft_model.n_layers = 1;
    cfg.draft_model.d_model = 32;
    cfg.draft_model.n_heads = 2;
    cfg.draft_model.d_ff = 128;

    cfg.target_train.batch_size = 16;
    cfg.target_train.lr = 3e-4;
    cfg.target_train.epochs = 3;

    cfg.reference_train = cfg.target_train;
    cfg.draft_train = cfg.target_train;
    cfg.draft_train.filter.mode = distill::FilterConfig::Mode::top;
    cfg.draft_train.filter.k = 0.4;

    cfg.sd.gamma = 5;
    cfg.sd.max_new_tokens = 64;
    return cfg;
}

void ExperimentConfig::validate() const {
    const std::set<std::string> tasks{"arithmetic", "template", "jsonl"};
    if (!tasks.count(task.name)) {
        throw std::invalid_argument("config: unknown task '" + task.name + "'");
    }
    if (task.name == "jsonl" && task.jsonl_path.empty()) {
        throw std::invalid_argument("config: jsonl task needs task.jsonl_path");
    }
    if (tokenizer_mode != "char") {
        throw std::invalid_argument("config: tokenizer_mode '" + tokenizer_mode + "' not supported here");
    }
    if (task.n_train < 1 || task.n_val < 0 || task.n_test < 1) {
        throw std::invalid_argument("config: split sizes must be positive");
    }
    if (eval_size < 1 || eval_size > task.n_test) {
        throw std::invalid_argument("config: eval_size must be in [1, n_test]");
    }
    if (seeds.empty()) {
        throw std::invalid_argument("config: seeds list is empty");
    }
    target_train.validate();
    reference_train.validate();
    draft_train.validate();
    sd.validate();
    if (reference_train.filter.mode != distill::FilterConfig::Mode::none) {
        throw std::invalid_argument("config: reference_train must not filter tokens");
    }
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg = ExperimentConfig::defaults();
    expect_keys(j,
                {"task", "tokenizer_mode", "target_model", "draft_model", "target_train", "reference_train",
                 "draft_train", "sd", "eval_size", "seeds", "out_dir"},
                "top level");
    if (j.contains("task")) {
        const auto& t = j["task"];
        expect_keys(t, {"name", "seed", "n_train", "n_val", "n_test", "digits", "steps", "jsonl_path"},
                    "task");
        cfg.task.name = t.value("name", cfg.task.name);
        cfg.task.seed = t.value("seed", cfg.task.seed);
        cfg.task.n_train = t.value("n_train", cfg.task.n_train);
        cfg.task.n_val = t.value("n_val", cfg.task.n_val);
        cfg.task.n_test = t.value("n_test", cfg.task.n_test);
        cfg.task.digits = t.value("digits", cfg.task.digits);
        cfg.task.steps = t.value("steps", cfg.task.steps);
        cfg.task.jsonl_path = t.value("jsonl_path", cfg.task.jsonl_path);
    }
    cfg.tokenizer_mode = j.value("tokenizer_mode", cfg.tokenizer_mode);
    if (j.contains("target_model")) lm_config_from(j["target_model"], cfg.target_model, "target_model");
    if (j.contains("draft_model")) lm_config_from(j["draft_model"], cfg.draft_model, "draft_model");
    if (j.contains("target_train")) train_config_from(j["target_train"], cfg.target_train, "target_train");
    if (j.contains("reference_train"))
        train_config_from(j["reference_train"], cfg.reference_train, "reference_train");
    if (j.contains("draft_train")) train_config_from(j["draft_train"], cfg.draft_train, "draft_train");
    if (j.contains("sd")) {
        expect_keys(j["sd"], {"gamma", "max_new_tokens"}, "sd");
        cfg.sd.gamma = j["sd"].value("gamma", cfg.sd.gamma);
        cfg.sd.max_new_tokens = j["sd"].value("max_new_tokens", cfg.sd.max_new_tokens);
    }
    cfg.eval_size = j.value("eval_size", cfg.eval_size);
    if (j.contains("seeds")) {
        cfg.seeds = j["seeds"].get<std::vector<uint64_t>>();
    }
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("config: cannot open '" + path + "'");
    }
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        throw std::runtime_error("config: '" + path + "' is not valid JSON");
    }
    return config_from_json(j);
}

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    return {{"task",
             {{"name", cfg.task.name},
              {"seed", cfg.task.seed},
              {"n_train", cfg.task.n_train},
              {"n_val", cfg.task.n_val},
              {"n_test", cfg.task.n_test},
              {"digits", cfg.task.digits},
              {"steps", cfg.task.steps},
              {"jsonl_path", cfg.task.jsonl_path}}},
            {"tokenizer_mode", cfg.tokenizer_mode},
            {"target_model", lm_config_json(cfg.target_model)},
            {"draft_model", lm_config_json(cfg.draft_model)},
            {"target_train", train_config_json(cfg.target_train)},
            {"reference_train", train_config_json(cfg.reference_train)},
            {"draft_train", train_config_json(cfg.draft_train)},
            {"sd", {{"gamma", cfg.sd.gamma}, {"max_new_tokens", cfg.sd.max_new_tokens}}},
            {"eval_size", cfg.eval_size},
            {"seeds", cfg.seeds},
            {"out_dir", cfg.out_dir}};
}

nlohmann::json run_record_to_json(const RunRecord& r) {
    nlohmann::json eval = {{"alpha", r.eval.alpha},
                           {"accept", r.eval.accept},
                           {"reject", r.eval.reject},
                           {"blocks", r.eval.blocks},
                           {"tau_formula", r.eval.tau_formula},
                           {"tau_empirical", r.eval.tau_empirical},
                           {"cost_c", r.eval.cost_c},
                           {"speedup", r.eval.speedup},
                           {"exact_match", r.eval.exact_match},
                           {"per_example_alpha", r.eval.per_example_alpha}};
    return {{"run_id", r.run_id},
            {"method", r.method},
            {"task", r.task},
            {"seed", r.seed},
            {"k", r.k},
            {"filter_mode", r.filter_mode},
            {"divergence", r.divergence},
            {"config_hash", hex16(r.config_hash)},
            {"param_ratio", r.param_ratio},
            {"lr_rule", r.lr_rule},
            {"target_stage", stage_json(r.target_stage)},
            {"reference_stage", stage_json(r.reference_stage)},
            {"draft_stage", stage_json(r.draft_stage)},
            {"eval", eval},
            {"artifacts", r.artifacts},
            {"wall_seconds", r.wall_seconds},
            {"code_version", r.code_version}};
}

RunRecord run_record_from_json(const nlohmann::json& j) {
    RunRecord r;
    r.run_id = j.value("run_id", std::string());
    r.method = j.value("method", std::string());
    r.task = j.value("task", std::string());
    r.seed = j.value("seed", uint64_t{0});
    r.k = j.value("k", 1.0);
    r.filter_mode = j.value("filter_mode", std::string("none"));
    r.divergence = j.value("divergence", std::string("forward_kl"));
    r.config_hash = std::stoull(j.value("config_hash", std::string("0")), nullptr, 16);
    r.param_ratio = j.value("param_ratio", 0.0);
    r.lr_rule = j.value("lr_rule", std::string());
    r.target_stage = stage_from(j.value("target_stage", nlohmann::json::object()));
    r.reference_stage = stage_from(j.value("reference_stage", nlohmann::json::object()));
    r.draft_stage = stage_from(j.value("draft_stage", nlohmann::json::object()));
    const auto& e = j.value("eval", nlohmann::json::object());
    r.eval.alpha = e.value("alpha", 0.0);
    r.eval.accept = e.value("accept", int64_t{0});
    r.eval.reject = e.value("reject", int64_t{0});
    r.eval.blocks = e.value("blocks", int64_t{0});
    r.eval.tau_formula = e.value("tau_formula", 0.0);
    r.eval.tau_empirical = e.value("tau_empirical", 0.0);
    r.eval.cost_c = e.value("cost_c", 0.0);
    r.eval.speedup = e.value("speedup", 0.0);
    r.eval.exact_match = e.value("exact_match", 0.0);
    r.eval.per_example_alpha = e.value("per_example_alpha", std::vector<double>{});
    r.artifacts = j.value("artifacts", std::vector<std::string>{});
    r.wall_seconds = j.value("wall_seconds", 0.0);
    r.code_version = j.value("code_version", std::string());
    return r;
}

Runner::Runner(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.task.name == "arithmetic") {
        data_ = dd::gen_arithmetic(cfg_.task.seed, cfg_.task.n_train, cfg_.task.n_val, cfg_.task.n_test,
                                   {cfg_.task.digits, cfg_.task.steps});
    } else if (cfg_.task.name == "template") {
        data_ = dd::gen_template(cfg_.task.seed, cfg_.task.n_train, cfg_.task.n_val, cfg_.task.n_test);
    } else if (cfg_.task.name == "jsonl") {
        data_.tokenizer = dd::Tokenizer::char_default();
        auto all = dd::load_jsonl(cfg_.task.jsonl_path, data_.tokenizer,
                                  std::min(cfg_.target_model.context_len, cfg_.draft_model.context_len) + 1);
        const int n = static_cast<int>(all.size());
        if (n < cfg_.task.n_train + cfg_.task.n_val + cfg_.task.n_test) {
            throw std::invalid_argument("config: jsonl file holds " + std::to_string(n) +
                                        " examples, fewer than the requested splits");
        }
        auto take = [&](int begin, int count, const std::string& split) {
            dd::Dataset ds;
            ds.task = all.task;
            ds.split = split;
            ds.examples.assign(all.examples.begin() + begin, all.examples.begin() + begin + count);
            return ds;
        };
        data_.train = take(0, cfg_.task.n_train, "train");
        data_.val = take(cfg_.task.n_train, cfg_.task.n_val, "val");
        data_.test = take(cfg_.task.n_train + cfg_.task.n_val, cfg_.task.n_test, "test");
    } else {
        throw std::invalid_argument("config: unknown task '" + cfg_.task.name + "'");
    }
    cfg_.target_model.vocab_size = data_.tokenizer.vocab_size();
    cfg_.draft_model.vocab_size = data_.tokenizer.vocab_size();
    cfg_.sd.eos_token = data_.tokenizer.eos_id();
    cfg_.validate();
    cfg_.target_model.validate();
    cfg_.draft_model.validate();

    uint64_t h = fnv1a(config_to_json(cfg_)["task"].dump());
    for (const auto* ds : {&data_.train, &data_.val, &data_.test}) {
        for (const auto& e : ds->examples) {
            h = fnv1a(e.prompt.data(), e.prompt.size() * sizeof(int32_t), h);
            h = fnv1a(e.completion.data(), e.completion.size() * sizeof(int32_t), h);
        }
    }
    dataset_hash_ = h;

    fs::create_directories(cache_dir());
    fs::create_directories(runs_dir());
}

std::string Runner::cache_dir() const { return cfg_.out_dir + "/cache"; }
std::string Runner::runs_dir() const { return cfg_.out_dir + "/runs"; }

std::string Runner::run_artifact_dir(const std::string& run_id) const {
    const std::string dir = runs_dir() + "/" + run_id;
    fs::create_directories(dir);
    return dir;
}

std::vector<std::vector<int32_t>> Runner::eval_prompts() const {
    std::vector<std::vector<int32_t>> prompts;
    prompts.reserve(cfg_.eval_size);
    for (int i = 0; i < cfg_.eval_size; ++i) {
        prompts.push_back(data_.test.examples[i].prompt);
    }
    return prompts;
}

namespace {

struct StageIo {
    std::string ckpt, sidecar;
    bool hit = false;
};

StageIo stage_paths(const std::string& cache_dir, const std::string& kind, uint64_t hash) {
    StageIo io;
    io.ckpt = cache_dir + "/" + kind + "-" + hex16(hash) + ".ckpt";
    io.sidecar = io.ckpt + ".json";
    io.hit = fs::exists(io.ckpt) && fs::exists(io.sidecar);
    return io;
}

StageResult cached_stage(const StageIo& io, uint64_t hash) {
    StageResult out;
    out.checkpoint_path = io.ckpt;
    out.stage_hash = hash;
    out.cache_hit = true;
    std::ifstream in(io.sidecar);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (!j.is_discarded()) {
        for (const auto& e : j.value("curve", nlohmann::json::array())) {
            out.curve.push_back(epoch_stats_from(e));
        }
        out.seconds = j.value("seconds", 0.0);
    }
    return out;
}

void write_sidecar(const StageIo& io, const StageResult& res, const nlohmann::json& desc) {
    nlohmann::json j;
    j["hash"] = hex16(res.stage_hash);
    j["seconds"] = res.seconds;
    j["descriptor"] = desc;
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& e : res.curve) {
        curve.push_back(epoch_stats_json(e));
    }
    j["curve"] = curve;
    std::ofstream out(io.sidecar);
    out << j.dump(2) << "\n";
}

}  // namespace

StageResult Runner::stage_target(uint64_t seed) {
    distill::TrainConfig train = cfg_.target_train;
    train.seed = seed;
    train.filter.mode = distill::FilterConfig::Mode::none;
    const uint64_t init_seed = derive_seed(seed, "target-init");
    nlohmann::json desc = {{"stage", "finetune-target"},
                           {"dataset", hex16(dataset_hash_)},
                           {"model", lm_config_json(cfg_.target_model)},
                           {"train", train_config_json(train)},
                           {"seed", seed},
                           {"init_seed", init_seed}};
    const uint64_t hash = fnv1a(desc.dump());
    const auto io = stage_paths(cache_dir(), "target", hash);
    if (io.hit) {
        return cached_stage(io, hash);
    }
    const double t0 = now_seconds();
    Model model = tinylm::init_model<float>(cfg_.target_model, init_seed, Role::target);
    StageResult res;
    res.stage_hash = hash;
    res.checkpoint_path = io.ckpt;
    nc::AdamState opt;
    for (int e = 0; e < train.epochs; ++e) {
        res.curve.push_back(
            distill::finetune_epoch(model, opt, data_.train, data_.tokenizer, train, e));
    }
    tinylm::save_checkpoint(model, io.ckpt);
    res.seconds = now_seconds() - t0;
    write_sidecar(io, res, desc);
    return res;
}

StageResult Runner::stage_reference(uint64_t seed) {
    distill::TrainConfig train = cfg_.reference_train;
    train.seed = seed;
    return stage_draft(seed, train, /*with_reference=*/false, "reference");
}

StageResult Runner::stage_draft(uint64_t seed, const distill::TrainConfig& train_in, bool with_reference,
                                const std::string& tag, const std::string& dump_path) {
    (void)tag;
    distill::TrainConfig train = train_in;
    train.seed = seed;
    const auto target = stage_target(seed);
    StageResult reference;
    if (with_reference) {
        reference = stage_reference(seed);
    }
    const uint64_t init_seed = derive_seed(seed, "draft-init");
    nlohmann::json desc = {{"stage", "distill"},
                           {"dataset", hex16(dataset_hash_)},
                           {"teacher", hex16(target.stage_hash)},
                           {"reference", with_reference ? hex16(reference.stage_hash) : "none"},
                           {"model", lm_config_json(cfg_.draft_model)},
                           {"train", train_config_json(train)},
                           {"seed", seed},
                           {"init_seed", init_seed}};
    const uint64_t hash = fnv1a(desc.dump());
    const auto io = stage_paths(cache_dir(), "distill", hash);
    if (io.hit) {
        auto res = cached_stage(io, hash);
        return res;
    }
    const double t0 = now_seconds();
    Model teacher = tinylm::load_checkpoint(target.checkpoint_path);
    std::optional<Model> ref_model;
    if (with_reference) {
        ref_model = tinylm::load_checkpoint(reference.checkpoint_path);
    }
    Model student = tinylm::init_model<float>(cfg_.draft_model, init_seed,
                                              with_reference ? Role::draft : Role::reference);
    StageResult res;
    res.stage_hash = hash;
    res.checkpoint_path = io.ckpt;
    nc::AdamState opt;
    auto& teacher_cache = shared_teacher_cache(target.checkpoint_path);
    distill::RefLossCache* ref_cache =
        with_reference
            ? &shared_ref_cache(reference.checkpoint_path, nc::divergence_name(train.divergence))
            : nullptr;
    std::optional<analysis::TokenDumpWriter> dump;
    const std::string dump_file = dump_path.empty() ? io.ckpt + ".tokens.tsv" : dump_path;
    for (int e = 0; e < train.epochs; ++e) {
        distill::BatchHook hook;
        if (e == train.epochs - 1 && train.filter.mode != distill::FilterConfig::Mode::none) {
            dump.emplace(data_.tokenizer, dump_file);
            hook = [&dump](const std::vector<distill::TokenLossRecord>& records,
                           const distill::SelectionMask& mask, int batch) { dump->add(records, mask, batch); };
        }
        res.curve.push_back(distill::distill_epoch(student, teacher, ref_model ? &*ref_model : nullptr, opt,
                                                   data_.train, data_.tokenizer, train, e, teacher_cache,
                                                   ref_cache, hook));
    }
    tinylm::save_checkpoint(student, io.ckpt);
    res.seconds = now_seconds() - t0;
    write_sidecar(io, res, desc);
    return res;
}

StageResult Runner::stage_reference_finetuned(uint64_t seed) {
    distill::TrainConfig train = cfg_.reference_train;
    train.seed = seed;
    train.filter.mode = distill::FilterConfig::Mode::none;
    const uint64_t init_seed = derive_seed(seed, "draft-init");
    nlohmann::json desc = {{"stage", "finetune-student"},
                           {"dataset", hex16(dataset_hash_)},
                           {"reference", "none"},
                           {"model", lm_config_json(cfg_.draft_model)},
                           {"train", train_config_json(train)},
                           {"seed", seed},
                           {"init_seed", init_seed}};
    const uint64_t hash = fnv1a(desc.dump());
    const auto io = stage_paths(cache_dir(), "finetune", hash);
    if (io.hit) {
        return cached_stage(io, hash);
    }
    const double t0 = now_seconds();
    Model model = tinylm::init_model<float>(cfg_.draft_model, init_seed, Role::reference);
    StageResult res;
    res.stage_hash = hash;
    res.checkpoint_path = io.ckpt;
    nc::AdamState opt;
    for (int e = 0; e < train.epochs; ++e) {
        res.curve.push_back(
            distill::finetune_epoch(model, opt, data_.train, data_.tokenizer, train, e));
    }
    tinylm::save_checkpoint(model, io.ckpt);
    res.seconds = now_seconds() - t0;
    write_sidecar(io, res, desc);
    return res;
}

StageResult Runner::stage_draft_finetuned(uint64_t seed, const distill::TrainConfig& train_in,
                                          const std::string& tag) {
    (void)tag;
    distill::TrainConfig train = train_in;
    train.seed = seed;
    const auto reference = stage_reference_finetuned(seed);
    const uint64_t init_seed = derive_seed(seed, "draft-init");
    nlohmann::json desc = {{"stage", "finetune-student"},
                           {"dataset", hex16(dataset_hash_)},
                           {"reference", hex16(reference.stage_hash)},
                           {"model", lm_config_json(cfg_.draft_model)},
                           {"train", train_config_json(train)},
                           {"seed", seed},
                           {"init_seed", init_seed}};
    const uint64_t hash = fnv1a(desc.dump());
    const auto io = stage_paths(cache_dir(), "finetune", hash);
    if (io.hit) {
        return cached_stage(io, hash);
    }
    const double t0 = now_seconds();
    Model ref_model = tinylm::load_checkpoint(reference.checkpoint_path);
    Model model = tinylm::init_model<float>(cfg_.draft_model, init_seed, Role::draft);
    StageResult res;
    res.stage_hash = hash;
    res.checkpoint_path = io.ckpt;
    nc::AdamState opt;
    auto& ref_cache = shared_ref_cache(reference.checkpoint_path, "ce");
    for (int e = 0; e < train.epochs; ++e) {
        res.curve.push_back(distill::finetune_epoch(model, opt, data_.train, data_.tokenizer, train, e,
                                                    &ref_model, &ref_cache));
    }
    tinylm::save_checkpoint(model, io.ckpt);
    res.seconds = now_seconds() - t0;
    write_sidecar(io, res, desc);
    return res;
}

EvalSummary Runner::evaluate_pair(const std::string& target_ckpt, const std::string& draft_ckpt) {
    Model target = tinylm::load_checkpoint(target_ckpt);
    Model draft = tinylm::load_checkpoint(draft_ckpt);
    EvalSummary out;
    int64_t generated_total = 0;
    int exact = 0;
    const auto prompts = eval_prompts();
    // speculative outputs sit on the target's greedy path, so they double as
    // the teacher-forced trajectories for later analysis
    const bool capture = traj_cache_.find(target_ckpt) == traj_cache_.end();
    analysis::TrajectorySet captured;
    for (int i = 0; i < static_cast<int>(prompts.size()); ++i) {
        const auto res = specdec::speculative_generate(target, draft, prompts[i], cfg_.sd);
        out.accept += res.stats.accept;
        out.reject += res.stats.reject;
        out.blocks += res.stats.blocks;
        generated_total += static_cast<int64_t>(res.tokens.size()) - res.prompt_len;
        out.per_example_alpha.push_back(static_cast<double>(res.stats.accept) /
                                        static_cast<double>(res.stats.decisions()));
        const auto completion = data_.tokenizer.decode(data_.test.examples[i].completion);
        exact += data_.tokenizer.decode(res.generated()) == completion;
        if (capture) {
            captured.tokens.push_back(res.tokens);
            captured.prompt_len.push_back(res.prompt_len);
        }
    }
    if (capture) {
        traj_cache_.emplace(target_ckpt, std::move(captured));
    }
    out.alpha = metrics::acceptance_rate(out.accept, out.reject);
    out.tau_formula = metrics::block_efficiency(out.alpha, cfg_.sd.gamma);
    out.tau_empirical = static_cast<double>(generated_total) / static_cast<double>(out.blocks);
    const auto& probe = data_.test.examples[0];
    std::vector<int32_t> probe_seq = probe.prompt;
    probe_seq.insert(probe_seq.end(), probe.completion.begin(), probe.completion.end());
    out.cost_c = metrics::measure_cost_coefficient(target, draft, probe_seq, 5).c;
    out.speedup = metrics::speedup(out.tau_formula, cfg_.sd.gamma, out.cost_c);
    out.exact_match = static_cast<double>(exact) / static_cast<double>(prompts.size());
    return out;
}

const analysis::TrajectorySet& Runner::trajectories_for(const std::string& target_ckpt) {
    auto it = traj_cache_.find(target_ckpt);
    if (it != traj_cache_.end()) {
        return it->second;
    }
    Model target = tinylm::load_checkpoint(target_ckpt);
    auto trajs = analysis::target_trajectories(target, eval_prompts(), cfg_.sd.max_new_tokens,
                                               cfg_.sd.eos_token);
    return traj_cache_.emplace(target_ckpt, std::move(trajs)).first->second;
}

RunRecord Runner::finish_run(const std::string& method, uint64_t seed,
                             const distill::TrainConfig& draft_train, const StageResult& target,
                             const StageResult& reference, const StageResult& draft, double t0_seconds) {
    RunRecord rec;
    rec.method = method;
    rec.task = cfg_.task.name;
    rec.seed = seed;
    rec.k = draft_train.filter.mode == distill::FilterConfig::Mode::none ? 1.0 : draft_train.filter.k;
    rec.filter_mode = distill::filter_mode_name(draft_train.filter.mode);
    rec.divergence = nc::divergence_name(draft_train.divergence);
    rec.config_hash = fnv1a(config_to_json(cfg_).dump());
    rec.param_ratio =
        static_cast<double>(cfg_.target_model.param_count()) / static_cast<double>(cfg_.draft_model.param_count());
    rec.lr_rule = draft_train.lr_scaling ? "lr*k when filtering" : "constant lr";
    rec.target_stage = target;
    rec.reference_stage = reference;
    rec.draft_stage = draft;
    rec.run_id = method + "-s" + std::to_string(seed) + "-" + hex16(fnv1a(method, rec.config_hash ^ seed));
    rec.eval = evaluate_pair(target.checkpoint_path, draft.checkpoint_path);
    rec.wall_seconds = now_seconds() - t0_seconds;

    std::ofstream out(runs_dir() + "/" + rec.run_id + ".json");
    out << run_record_to_json(rec).dump(2) << "\n";
    return rec;
}

RunRecord Runner::run_pipeline(uint64_t seed) {
    const double t0 = now_seconds();
    auto target = stage_target(seed);
    auto reference = stage_reference(seed);
    auto draft = stage_draft(seed, cfg_.draft_train, /*with_reference=*/true, "selective");
    auto rec = finish_run("selective", seed, cfg_.draft_train, target, reference, draft, t0);

    // analysis artifacts: acceptance histogram, margins, per-token divergence
    const std::string dir = run_artifact_dir(rec.run_id);
    Model target_m = tinylm::load_checkpoint(target.checkpoint_path);
    Model draft_m = tinylm::load_checkpoint(draft.checkpoint_path);
    auto acc_hist = analysis::make_histogram(rec.eval.per_example_alpha, 0.0, 1.0 + 1e-12, 20);
    analysis::write_histogram_csv(acc_hist, dir + "/acceptance_hist.csv");
    const auto& trajs = trajectories_for(target.checkpoint_path);
    auto margins = analysis::margin_distribution(target_m, draft_m, trajs);
    analysis::write_histogram_csv(margins.hist, dir + "/margin_hist.csv");
    auto kl = analysis::kl_distribution(target_m, draft_m, trajs);
    analysis::write_histogram_csv(kl.hist, dir + "/kl_hist.csv");
    rec.artifacts = {dir + "/acceptance_hist.csv", dir + "/margin_hist.csv", dir + "/kl_hist.csv",
                     draft.checkpoint_path + ".tokens.tsv"};

    std::ofstream out(runs_dir() + "/" + rec.run_id + ".json");
    out << run_record_to_json(rec).dump(2) << "\n";
    return rec;
}

RunRecord Runner::run_baseline(uint64_t seed) {
    const double t0 = now_seconds();
    auto target = stage_target(seed);
    auto reference = stage_reference(seed);
    distill::TrainConfig train = cfg_.draft_train;
    train.filter.mode = distill::FilterConfig::Mode::none;
    train.filter.k = 1.0;
    auto draft = stage_draft(seed, train, /*with_reference=*/false, "baseline");
    auto rec = finish_run("baseline", seed, train, target, reference, draft, t0);

    const std::string dir = run_artifact_dir(rec.run_id);
    Model target_m = tinylm::load_checkpoint(target.checkpoint_path);
    Model draft_m = tinylm::load_checkpoint(draft.checkpoint_path);
    auto acc_hist = analysis::make_histogram(rec.eval.per_example_alpha, 0.0, 1.0 + 1e-12, 20);
    analysis::write_histogram_csv(acc_hist, dir + "/acceptance_hist.csv");
    const auto& trajs = trajectories_for(target.checkpoint_path);
    auto margins = analysis::margin_distribution(target_m, draft_m, trajs);
    analysis::write_histogram_csv(margins.hist, dir + "/margin_hist.csv");
    auto kl = analysis::kl_distribution(target_m, draft_m, trajs);
    analysis::write_histogram_csv(kl.hist, dir + "/kl_hist.csv");
    rec.artifacts = {dir + "/acceptance_hist.csv", dir + "/margin_hist.csv", dir + "/kl_hist.csv"};

    std::ofstream out(runs_dir() + "/" + rec.run_id + ".json");
    out << run_record_to_json(rec).dump(2) << "\n";
    return rec;
}

std::vector<RunRecord> Runner::run_k_sweep(const std::vector<double>& ks) {
    std::vector<RunRecord> out;
    for (uint64_t seed : cfg_.seeds) {
        for (double k : ks) {
            const double t0 = now_seconds();
            auto target = stage_target(seed);
            auto reference = stage_reference(seed);
            distill::TrainConfig train = cfg_.draft_train;
            train.filter.mode = distill::FilterConfig::Mode::top;
            train.filter.k = k;
            auto draft = stage_draft(seed, train, /*with_reference=*/true, "sweep");
            out.push_back(finish_run("selective", seed, train, target, reference, draft, t0));
        }
    }
    return out;
}

std::vector<RunRecord> Runner::run_ablation(const std::string& which) {
    std::vector<RunRecord> out;
    if (which == "bottom_k") {
        for (uint64_t seed : cfg_.seeds) {
            const double t0 = now_seconds();
            auto target = stage_target(seed);
            auto reference = stage_reference(seed);
            distill::TrainConfig train = cfg_.draft_train;
            train.filter.mode = distill::FilterConfig::Mode::bottom;
            auto draft = stage_draft(seed, train, /*with_reference=*/true, "bottom");
            out.push_back(finish_run("bottom", seed, train, target, reference, draft, t0));
        }
    } else if (which == "finetune_only") {
        for (uint64_t seed : cfg_.seeds) {
            double t0 = now_seconds();
            auto target = stage_target(seed);
            auto reference = stage_reference_finetuned(seed);
            distill::TrainConfig ref_train = cfg_.reference_train;
            out.push_back(
                finish_run("finetune-reference", seed, ref_train, target, reference, reference, t0));
            t0 = now_seconds();
            auto draft = stage_draft_finetuned(seed, cfg_.draft_train, "finetune-selective");
            out.push_back(
                finish_run("finetune-selective", seed, cfg_.draft_train, target, reference, draft, t0));
        }
    } else if (which == "rkl" || which == "tvd") {
        const auto divergence = divergence_from_name(which == "rkl" ? "reverse_kl" : "tvd");
        ExperimentConfig swapped = cfg_;
        swapped.reference_train.divergence = divergence;
        swapped.draft_train.divergence = divergence;
        Runner inner(swapped);
        for (uint64_t seed : cfg_.seeds) {
            double t0 = now_seconds();
            auto target = inner.stage_target(seed);
            auto reference = inner.stage_reference(seed);
            distill::TrainConfig ref_train = swapped.reference_train;
            out.push_back(inner.finish_run("reference", seed, ref_train, target, reference, reference, t0));
            t0 = now_seconds();
            auto draft = inner.stage_draft(seed, swapped.draft_train, /*with_reference=*/true, which);
            out.push_back(
                inner.finish_run("selective", seed, swapped.draft_train, target, reference, draft, t0));
        }
    } else if (which == "k_sweep") {
        out = run_k_sweep({0.2, 0.4, 0.6, 0.8, 1.0});
    } else {
        throw std::invalid_argument("run_ablation: unknown variant '" + which +
                                    "' (expected bottom_k, finetune_only, rkl, tvd or k_sweep)");
    }
    return out;
}

void write_report(const std::vector<RunRecord>& records, const std::string& out_dir) {
    if (records.empty()) {
        throw std::invalid_argument("write_report: no records");
    }
    fs::create_directories(out_dir);
    const std::string path = out_dir + "/summary.csv";
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("write_report: cannot open '" + path + "'");
    }
    out.precision(17);  // keep CSV numbers equal to their JSON counterparts
    out << "task,method,k,filter_mode,divergence,seed,alpha,tau,tau_empirical,speedup,cost_c,exact_match,"
           "accept,reject,run_id\n";
    for (const auto& r : records) {
        out << r.task << "," << r.method << "," << r.k << "," << r.filter_mode << "," << r.divergence << ","
            << r.seed << "," << r.eval.alpha << "," << r.eval.tau_formula << "," << r.eval.tau_empirical
            << "," << r.eval.speedup << "," << r.eval.cost_c << "," << r.eval.exact_match << ","
            << r.eval.accept << "," << r.eval.reject << "," << r.run_id << "\n";
    }
}

std::vector<RunRecord> load_run_records(const std::string& runs_dir) {
    std::vector<RunRecord> out;
    if (!fs::exists(runs_dir)) {
        return out;
    }
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") {
            paths.push_back(entry.path().string());
        }
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
        std::ifstream in(p);
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (!j.is_discarded()) {
            out.push_back(run_record_from_json(j));
        }
    }
    return out;
}

}  // namespace specdesk::harness
