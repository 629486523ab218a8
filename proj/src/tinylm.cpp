#include <specdesk/tinylm.hpp>

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace specdesk::tinylm {

namespace {

constexpr char kMagic[4] = {'T', 'L', 'M', '1'};
constexpr uint32_t kVersion = 1;

nlohmann::json config_json(const LMConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size},   {"context_len", c.context_len},
                          {"n_layers", c.n_layers},       {"d_model", c.d_model},
                          {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
                          {"tie_embeddings", c.tie_embeddings}};
}

LMConfig config_from_json(const nlohmann::json& j) {
    LMConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.context_len = j.at("context_len").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    return c;
}

void write_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw std::runtime_error("checkpoint '" + path + "': truncated header");
    }
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 | static_cast<uint32_t>(b[2]) << 16 |
           static_cast<uint32_t>(b[3]) << 24;
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    }
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    nlohmann::json header;
    header["config"] = config_json(m.cfg);
    header["role"] = role_name(m.role);
    header["init_seed"] = m.init_seed;
    header["train_steps"] = m.train_steps;
    const std::string text = header.dump();
    write_u32(out, static_cast<uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : m.named_params()) {
        (void)name;
        static_assert(sizeof(float) == 4);
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  static_cast<std::streamsize>(t->numel() * sizeof(float)));
    }
    if (!out) {
        throw std::runtime_error("checkpoint: write to '" + path + "' failed");
    }
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    }
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint '" + path + "': bad magic bytes");
    }
    const uint32_t version = read_u32(in, path);
    if (version != kVersion) {
        throw std::runtime_error("checkpoint '" + path + "': format version " + std::to_string(version) +
                                 " is not supported (expected " + std::to_string(kVersion) + ")");
    }
    const uint32_t hlen = read_u32(in, path);
    std::string text(hlen, '\0');
    if (!in.read(text.data(), hlen)) {
        throw std::runtime_error("checkpoint '" + path + "': truncated header");
    }
    nlohmann::json header = nlohmann::json::parse(text, nullptr, false);
    if (header.is_discarded()) {
        throw std::runtime_error("checkpoint '" + path + "': corrupt header");
    }
    const LMConfig cfg = config_from_json(header.at("config"));
    cfg.validate();

    // blob length check before reading any parameter
    const auto blob_begin = in.tellg();
    in.seekg(0, std::ios::end);
    const auto blob_bytes = in.tellg() - blob_begin;
    in.seekg(blob_begin);
    const int64_t expect = cfg.param_count() * static_cast<int64_t>(sizeof(float));
    if (blob_bytes != expect) {
        throw std::runtime_error("checkpoint '" + path + "': corrupt parameter blob, " +
                                 std::to_string(blob_bytes) + " bytes but config needs " + std::to_string(expect));
    }

    Model m = init_model<float>(cfg, header.value("init_seed", uint64_t{0}),
                                role_from_name(header.value("role", std::string("draft"))));
    m.train_steps = header.value("train_steps", int64_t{0});
    for (auto& [name, t] : m.named_params()) {
        (void)name;
        if (!in.read(reinterpret_cast<char*>(t->data.data()),
                     static_cast<std::streamsize>(t->numel() * sizeof(float)))) {
            throw std::runtime_error("checkpoint '" + path + "': truncated parameter blob");
        }
    }
    return m;
}

Model load_checkpoint_expect(const std::string& path, const LMConfig& expected) {
    Model m = load_checkpoint(path);
    if (!(m.cfg == expected)) {
        throw std::runtime_error("checkpoint '" + path + "': stored config " + config_json(m.cfg).dump() +
                                 " does not match the expected config " + config_json(expected).dump());
    }
    return m;
}

uint64_t model_hash(const Model& m) {
    uint64_t h = fnv1a(config_json(m.cfg).dump());
    for (const auto& [name, t] : m.named_params()) {
        h = fnv1a(name, h);
        h = fnv1a(t->data.data(), t->numel() * sizeof(float), h);
    }
    return h;
}

}  // namespace specdesk::tinylm
