#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <specdesk/harness.hpp>

namespace py = pybind11;
using namespace specdesk;

namespace {

tinylm::Model load_model(const std::string& path) { return tinylm::load_checkpoint(path); }

py::dict result_dict(const specdec::GenerationResult& r) {
    py::dict d;
    d["tokens"] = r.tokens;
    d["prompt_len"] = r.prompt_len;
    d["generated"] = r.generated();
    d["accept"] = r.stats.accept;
    d["reject"] = r.stats.reject;
    d["blocks"] = r.stats.blocks;
    d["per_block_accepted"] = r.stats.per_block_accepted;
    d["stopped_by"] = r.stopped_by == specdec::StopReason::eos ? "eos" : "length";
    return d;
}

}  // namespace

PYBIND11_MODULE(_specdesk, m) {
    m.doc() = "speculative decoding and selective distillation lab";

    // closed-form metrics
    m.def("acceptance_rate", [](int64_t accept, int64_t reject) { return metrics::acceptance_rate(accept, reject); },
          py::arg("accept"), py::arg("reject"));
    m.def("block_efficiency", &metrics::block_efficiency, py::arg("alpha"), py::arg("gamma"));
    m.def("block_efficiency_series", &metrics::block_efficiency_series, py::arg("alpha"), py::arg("gamma"));
    m.def("speedup", &metrics::speedup, py::arg("tau"), py::arg("gamma"), py::arg("c"));
    m.def(
        "simulate_block_efficiency",
        [](double alpha, int gamma, int64_t blocks, uint64_t seed) {
            Rng rng(seed);
            return metrics::simulate_block_efficiency(alpha, gamma, blocks, rng);
        },
        py::arg("alpha"), py::arg("gamma"), py::arg("blocks"), py::arg("seed") = 0);

    py::class_<datasets::Tokenizer>(m, "Tokenizer")
        .def_static("char_default", &datasets::Tokenizer::char_default)
        .def("encode", &datasets::Tokenizer::encode)
        .def("decode", &datasets::Tokenizer::decode)
        .def("token_text", &datasets::Tokenizer::token_text)
        .def_property_readonly("vocab_size", &datasets::Tokenizer::vocab_size)
        .def_property_readonly("pad_id", &datasets::Tokenizer::pad_id)
        .def_property_readonly("eos_id", &datasets::Tokenizer::eos_id);

    py::class_<tinylm::LMConfig>(m, "LMConfig")
        .def(py::init<>())
        .def_readwrite("vocab_size", &tinylm::LMConfig::vocab_size)
        .def_readwrite("context_len", &tinylm::LMConfig::context_len)
        .def_readwrite("n_layers", &tinylm::LMConfig::n_layers)
        .def_readwrite("d_model", &tinylm::LMConfig::d_model)
        .def_readwrite("n_heads", &tinylm::LMConfig::n_heads)
        .def_readwrite("d_ff", &tinylm::LMConfig::d_ff)
        .def_readwrite("tie_embeddings", &tinylm::LMConfig::tie_embeddings)
        .def("param_count", &tinylm::LMConfig::param_count);

    py::class_<tinylm::Model>(m, "Model")
        .def_property_readonly("config", [](const tinylm::Model& m_) { return m_.cfg; })
        .def_property_readonly("param_count", &tinylm::Model::param_count)
        .def_property_readonly("train_steps", [](const tinylm::Model& m_) { return m_.train_steps; })
        .def("forward",
             [](const tinylm::Model& m_, const std::vector<int32_t>& tokens) {
                 auto logits = m_.forward_seq(tokens);
                 return std::make_pair(logits->shape, logits->data);
             })
        .def("save", [](const tinylm::Model& m_, const std::string& path) { tinylm::save_checkpoint(m_, path); });

    m.def(
        "init_model",
        [](const tinylm::LMConfig& cfg, uint64_t seed) {
            return tinylm::init_model<float>(cfg, seed, tinylm::Role::draft);
        },
        py::arg("config"), py::arg("seed"));
    m.def("load_model", &load_model, py::arg("path"));

    m.def(
        "generate_greedy",
        [](const tinylm::Model& model, const std::vector<int32_t>& prompt, int max_new_tokens, int32_t eos) {
            return specdec::generate_greedy(model, prompt, max_new_tokens, eos);
        },
        py::arg("model"), py::arg("prompt"), py::arg("max_new_tokens"), py::arg("eos") = 1);
    m.def(
        "speculative_generate",
        [](const tinylm::Model& target, const tinylm::Model& draft, const std::vector<int32_t>& prompt,
           int gamma, int max_new_tokens, int32_t eos) {
            specdec::SDConfig cfg;
            cfg.gamma = gamma;
            cfg.max_new_tokens = max_new_tokens;
            cfg.eos_token = eos;
            return result_dict(specdec::speculative_generate(target, draft, prompt, cfg));
        },
        py::arg("target"), py::arg("draft"), py::arg("prompt"), py::arg("gamma") = 5,
        py::arg("max_new_tokens") = 64, py::arg("eos") = 1);

    // config/experiment bridge over JSON strings
    m.def("default_config_json",
          [] { return harness::config_to_json(harness::ExperimentConfig::defaults()).dump(2); });
    m.def(
        "run_pipeline",
        [](const std::string& config_json, uint64_t seed) {
            harness::Runner runner(harness::config_from_json(nlohmann::json::parse(config_json)));
            return harness::run_record_to_json(runner.run_pipeline(seed)).dump(2);
        },
        py::arg("config_json"), py::arg("seed"));
    m.def(
        "run_baseline",
        [](const std::string& config_json, uint64_t seed) {
            harness::Runner runner(harness::config_from_json(nlohmann::json::parse(config_json)));
            return harness::run_record_to_json(runner.run_baseline(seed)).dump(2);
        },
        py::arg("config_json"), py::arg("seed"));
    m.def(
        "export_task_jsonl",
        [](const std::string& config_json, const std::string& split, const std::string& path) {
            harness::Runner runner(harness::config_from_json(nlohmann::json::parse(config_json)));
            const datasets::Dataset* ds = &runner.data().train;
            if (split == "val") ds = &runner.data().val;
            else if (split == "test") ds = &runner.data().test;
            datasets::export_jsonl(*ds, runner.data().tokenizer, path);
            return ds->size();
        },
        py::arg("config_json"), py::arg("split"), py::arg("path"));
}
