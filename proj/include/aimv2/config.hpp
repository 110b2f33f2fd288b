#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "aimv2/hashing.hpp"

namespace aimv2 {

// Exit-code mapping relies on this split: validation failures are the
// caller's fault (exit 1), everything else is a runtime failure (exit 2).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ScheduleKind {
    cosine,
    half_cosine,
    half_cosine_cooldown,
};

struct ModelConfig {
    int64_t d_enc = 32;
    int64_t L_enc = 2;
    int64_t d_dec = 32;
    int64_t L_dec = 2;
    int64_t heads_enc = 2;
    int64_t heads_dec = 2;
    int64_t patch_size = 4;
    int64_t channels = 3;
    int64_t vocab_size = 259;
    int64_t max_text_len = 77;
    double alpha = 0.4;
    bool attn_bias = true; // biases in attention projections

    int64_t patch_dim() const { return patch_size * patch_size * channels; }

    // SwiGLU hidden width: 8/3 * d rounded up to a multiple of 4, the usual
    // sizing that keeps parameter count near a vanilla 4d FFN.
    static int64_t ffn_hidden(int64_t d) {
        const int64_t h = (8 * d + 2) / 3;
        return (h + 3) / 4 * 4;
    }

    bool operator==(const ModelConfig&) const = default;
};

struct OptimConfig {
    double peak_lr = 1e-3;
    double min_lr = 1e-5;
    double final_cooldown_lr = 1e-6;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double grad_clip = 1.0;
    int64_t warmup_steps = 10;
    int64_t total_steps = 200;
    ScheduleKind schedule_kind = ScheduleKind::cosine;

    bool operator==(const OptimConfig&) const = default;
};

struct MixtureSource {
    std::string name;
    double prob = 1.0;
    uint64_t seed = 0;

    bool operator==(const MixtureSource&) const = default;
};

struct DataConfig {
    int64_t image_size = 8;     // square canvas, must be divisible by patch_size
    int64_t high_res_size = 0;  // 0 = 2 * image_size when --high-res-adapt is active
    int64_t batch_size = 8;
    int64_t dataset_size = 64;  // distinct synthetic pairs per source
    int64_t min_shapes = 1;
    int64_t max_shapes = 3;
    bool native_res = false;
    int64_t token_budget = 32;  // C, patches per native-res mini-batch
    int64_t area_n_lo = 2;      // A = 2^n sampled over [n_lo, n_hi]
    int64_t area_n_hi = 4;
    std::vector<MixtureSource> sources = {{"synthetic", 1.0, 0}};

    int64_t effective_high_res() const {
        return high_res_size > 0 ? high_res_size : 2 * image_size;
    }

    bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
    ModelConfig model;
    OptimConfig optim;
    DataConfig data;
    int64_t seed = 0;
    std::string checkpoint_dir = "checkpoints";
    int64_t log_every = 10;
    int64_t save_every = 0; // 0 = final checkpoint only

    bool operator==(const RunConfig&) const = default;
};

inline std::string schedule_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::cosine: return "cosine";
        case ScheduleKind::half_cosine: return "half_cosine";
        case ScheduleKind::half_cosine_cooldown: return "half_cosine_cooldown";
    }
    throw std::logic_error("schedule_name: bad enum");
}

inline ScheduleKind schedule_from_name(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "half_cosine") return ScheduleKind::half_cosine;
    if (s == "half_cosine_cooldown") return ScheduleKind::half_cosine_cooldown;
    throw ValidationError("unknown schedule_kind '" + s + "'");
}

// Reference AIMv2 model sizes (inert on a desk machine) plus the two desk
// presets the tests and sanity oracles run on. Head counts follow the usual
// ViT convention of head dimension 64.
inline ModelConfig preset_model(const std::string& name) {
    ModelConfig m;
    m.channels = 3;
    m.vocab_size = 259;
    m.max_text_len = 77;
    m.alpha = 0.4;
    if (name == "aimv2_l") {
        m.d_enc = 1024; m.L_enc = 24; m.d_dec = 1024; m.L_dec = 12;
        m.heads_enc = 16; m.heads_dec = 16; m.patch_size = 14;
    } else if (name == "aimv2_h") {
        m.d_enc = 1536; m.L_enc = 24; m.d_dec = 1024; m.L_dec = 12;
        m.heads_enc = 24; m.heads_dec = 16; m.patch_size = 14;
    } else if (name == "aimv2_1b") {
        m.d_enc = 2048; m.L_enc = 24; m.d_dec = 1024; m.L_dec = 12;
        m.heads_enc = 32; m.heads_dec = 16; m.patch_size = 14;
    } else if (name == "aimv2_3b") {
        m.d_enc = 3072; m.L_enc = 24; m.d_dec = 1024; m.L_dec = 12;
        m.heads_enc = 48; m.heads_dec = 16; m.patch_size = 14;
    } else if (name == "desk_tiny") {
        m.d_enc = 32; m.L_enc = 2; m.d_dec = 32; m.L_dec = 2;
        m.heads_enc = 2; m.heads_dec = 2; m.patch_size = 4;
    } else if (name == "desk_small") {
        m.d_enc = 64; m.L_enc = 3; m.d_dec = 64; m.L_dec = 2;
        m.heads_enc = 4; m.heads_dec = 4; m.patch_size = 4;
    } else {
        throw ValidationError("unknown model preset '" + name + "'");
    }
    return m;
}

// Reference AIMv2 optimizer settings; the desk preset is sized for CPU
// seconds.
inline OptimConfig preset_optim(const std::string& name) {
    OptimConfig o;
    if (name == "aimv2_l" || name == "aimv2_h" || name == "aimv2_1b" || name == "aimv2_3b") {
        o.peak_lr = (name == "aimv2_l") ? 1e-3 : (name == "aimv2_3b") ? 4e-4 : 8e-4;
        o.min_lr = 1e-5;
        o.weight_decay = 1e-4;
        o.beta1 = 0.9;
        o.beta2 = 0.95;
        o.grad_clip = 1.0;
        o.warmup_steps = 12500;
        o.total_steps = 1500000;
        o.schedule_kind = ScheduleKind::cosine;
    } else if (name == "desk_tiny" || name == "desk_small") {
        o.peak_lr = 3e-3;
        o.min_lr = 1e-5;
        o.weight_decay = 1e-4;
        o.beta1 = 0.9;
        o.beta2 = 0.95;
        o.grad_clip = 1.0;
        o.warmup_steps = 10;
        o.total_steps = 200;
        o.schedule_kind = ScheduleKind::cosine;
    } else {
        throw ValidationError("unknown optim preset '" + name + "'");
    }
    return o;
}

inline std::vector<std::string> config_violations(const RunConfig& cfg) {
    std::vector<std::string> errs;
    const auto& m = cfg.model;
    const auto& o = cfg.optim;
    const auto& d = cfg.data;

    auto positive = [&errs](int64_t v, const char* name) {
        if (v <= 0) {
            errs.push_back(std::string(name) + " must be positive");
        }
    };
    positive(m.d_enc, "d_enc");
    positive(m.L_enc, "L_enc");
    positive(m.d_dec, "d_dec");
    positive(m.L_dec, "L_dec");
    positive(m.heads_enc, "heads_enc");
    positive(m.heads_dec, "heads_dec");
    positive(m.patch_size, "patch_size");
    positive(m.channels, "channels");
    positive(m.vocab_size, "vocab_size");
    if (m.max_text_len < 1) {
        errs.push_back("max_text_len must be >= 1");
    }
    if (m.alpha < 0.0) {
        errs.push_back("alpha must be >= 0");
    }
    if (m.heads_enc > 0 && m.d_enc % m.heads_enc != 0) {
        errs.push_back("d_enc not divisible by heads");
    }
    if (m.heads_dec > 0 && m.d_dec % m.heads_dec != 0) {
        errs.push_back("d_dec not divisible by heads");
    }

    if (o.peak_lr <= 0.0) {
        errs.push_back("peak_lr must be positive");
    }
    if (o.min_lr < 0.0) {
        errs.push_back("min_lr must be >= 0");
    }
    if (o.min_lr > o.peak_lr) {
        errs.push_back("min_lr must be <= peak_lr");
    }
    if (o.final_cooldown_lr < 0.0) {
        errs.push_back("final_cooldown_lr must be >= 0");
    }
    if (o.weight_decay < 0.0) {
        errs.push_back("weight_decay must be >= 0");
    }
    if (!(o.beta1 > 0.0 && o.beta1 < 1.0)) {
        errs.push_back("beta1 must lie in (0,1)");
    }
    if (!(o.beta2 > 0.0 && o.beta2 < 1.0)) {
        errs.push_back("beta2 must lie in (0,1)");
    }
    if (o.grad_clip <= 0.0) {
        errs.push_back("grad_clip must be positive");
    }
    if (o.warmup_steps < 0) {
        errs.push_back("warmup_steps must be >= 0");
    }
    if (o.total_steps <= 0) {
        errs.push_back("total_steps must be positive");
    }
    if (o.warmup_steps >= o.total_steps) {
        errs.push_back("warmup_steps must be < total_steps");
    }

    positive(d.image_size, "image_size");
    positive(d.batch_size, "batch_size");
    positive(d.dataset_size, "dataset_size");
    if (m.patch_size > 0 && d.image_size % m.patch_size != 0) {
        errs.push_back("image_size not divisible by patch_size");
    }
    if (m.patch_size > 0 && d.high_res_size > 0 && d.high_res_size % m.patch_size != 0) {
        errs.push_back("high_res_size not divisible by patch_size");
    }
    if (d.min_shapes < 1 || d.max_shapes < d.min_shapes) {
        errs.push_back("shape counts must satisfy 1 <= min_shapes <= max_shapes");
    }
    if (d.native_res) {
        if (d.area_n_lo < 0 || d.area_n_hi < d.area_n_lo) {
            errs.push_back("area n-range must satisfy 0 <= n_lo <= n_hi");
        }
        const int64_t c = d.token_budget;
        if (c <= 0 || (c & (c - 1)) != 0) {
            errs.push_back("token_budget must be a power of two");
        } else if (d.area_n_hi >= 0 && c < (int64_t(1) << d.area_n_hi)) {
            errs.push_back("token_budget must be >= 2^n_hi");
        }
    }
    if (!d.sources.empty()) {
        double sum = 0.0;
        for (const auto& s : d.sources) {
            if (s.prob < 0.0 || s.prob > 1.0) {
                errs.push_back("source '" + s.name + "' probability outside [0,1]");
            }
            sum += s.prob;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            errs.push_back("source probabilities must sum to 1");
        }
    } else {
        errs.push_back("at least one mixture source required");
    }

    if (cfg.log_every <= 0) {
        errs.push_back("log_every must be positive");
    }
    if (cfg.save_every < 0) {
        errs.push_back("save_every must be >= 0");
    }
    return errs;
}

inline void validate_config(const RunConfig& cfg) {
    const auto errs = config_violations(cfg);
    if (!errs.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& e : errs) {
            msg += "\n  - " + e;
        }
        throw ValidationError(msg);
    }
}

namespace detail {

inline nlohmann::json to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["seed"] = cfg.seed;
    j["checkpoint_dir"] = cfg.checkpoint_dir;
    j["log_every"] = cfg.log_every;
    j["save_every"] = cfg.save_every;

    auto& m = j["model"];
    m["d_enc"] = cfg.model.d_enc;
    m["L_enc"] = cfg.model.L_enc;
    m["d_dec"] = cfg.model.d_dec;
    m["L_dec"] = cfg.model.L_dec;
    m["heads_enc"] = cfg.model.heads_enc;
    m["heads_dec"] = cfg.model.heads_dec;
    m["patch_size"] = cfg.model.patch_size;
    m["channels"] = cfg.model.channels;
    m["vocab_size"] = cfg.model.vocab_size;
    m["max_text_len"] = cfg.model.max_text_len;
    m["alpha"] = cfg.model.alpha;
    m["attn_bias"] = cfg.model.attn_bias;

    auto& o = j["optim"];
    o["peak_lr"] = cfg.optim.peak_lr;
    o["min_lr"] = cfg.optim.min_lr;
    o["final_cooldown_lr"] = cfg.optim.final_cooldown_lr;
    o["weight_decay"] = cfg.optim.weight_decay;
    o["beta1"] = cfg.optim.beta1;
    o["beta2"] = cfg.optim.beta2;
    o["grad_clip"] = cfg.optim.grad_clip;
    o["warmup_steps"] = cfg.optim.warmup_steps;
    o["total_steps"] = cfg.optim.total_steps;
    o["schedule_kind"] = schedule_name(cfg.optim.schedule_kind);

    auto& d = j["data"];
    d["image_size"] = cfg.data.image_size;
    d["high_res_size"] = cfg.data.high_res_size;
    d["batch_size"] = cfg.data.batch_size;
    d["dataset_size"] = cfg.data.dataset_size;
    d["min_shapes"] = cfg.data.min_shapes;
    d["max_shapes"] = cfg.data.max_shapes;
    d["native_res"] = cfg.data.native_res;
    d["token_budget"] = cfg.data.token_budget;
    d["area_n_lo"] = cfg.data.area_n_lo;
    d["area_n_hi"] = cfg.data.area_n_hi;
    d["sources"] = nlohmann::json::array();
    for (const auto& s : cfg.data.sources) {
        d["sources"].push_back({{"name", s.name}, {"prob", s.prob}, {"seed", s.seed}});
    }
    return j;
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end()) {
        out = it->get<T>();
    }
}

inline void reject_unknown_keys(const nlohmann::json& j,
                                std::initializer_list<const char*> known,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool found = false;
        for (const char* k : known) {
            if (it.key() == k) {
                found = true;
                break;
            }
        }
        if (!found) {
            throw ValidationError("unknown key '" + it.key() + "' in " + where);
        }
    }
}

inline RunConfig from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, {"schema_version", "seed", "checkpoint_dir", "log_every",
                            "save_every", "model", "optim", "data"},
                        "config");
    if (!j.contains("schema_version")) {
        throw ValidationError("config missing schema_version");
    }
    if (j["schema_version"].get<int64_t>() != 1) {
        throw ValidationError("unsupported config schema_version");
    }

    RunConfig cfg;
    read_field(j, "seed", cfg.seed);
    read_field(j, "checkpoint_dir", cfg.checkpoint_dir);
    read_field(j, "log_every", cfg.log_every);
    read_field(j, "save_every", cfg.save_every);

    if (auto it = j.find("model"); it != j.end()) {
        const auto& m = *it;
        reject_unknown_keys(m, {"preset", "d_enc", "L_enc", "d_dec", "L_dec", "heads_enc",
                                "heads_dec", "patch_size", "channels", "vocab_size",
                                "max_text_len", "alpha", "attn_bias"},
                            "model");
        if (auto p = m.find("preset"); p != m.end()) {
            cfg.model = preset_model(p->get<std::string>());
        }
        read_field(m, "d_enc", cfg.model.d_enc);
        read_field(m, "L_enc", cfg.model.L_enc);
        read_field(m, "d_dec", cfg.model.d_dec);
        read_field(m, "L_dec", cfg.model.L_dec);
        read_field(m, "heads_enc", cfg.model.heads_enc);
        read_field(m, "heads_dec", cfg.model.heads_dec);
        read_field(m, "patch_size", cfg.model.patch_size);
        read_field(m, "channels", cfg.model.channels);
        read_field(m, "vocab_size", cfg.model.vocab_size);
        read_field(m, "max_text_len", cfg.model.max_text_len);
        read_field(m, "alpha", cfg.model.alpha);
        read_field(m, "attn_bias", cfg.model.attn_bias);
    }

    if (auto it = j.find("optim"); it != j.end()) {
        const auto& o = *it;
        reject_unknown_keys(o, {"preset", "peak_lr", "min_lr", "final_cooldown_lr",
                                "weight_decay", "beta1", "beta2", "grad_clip",
                                "warmup_steps", "total_steps", "schedule_kind"},
                            "optim");
        if (auto p = o.find("preset"); p != o.end()) {
            cfg.optim = preset_optim(p->get<std::string>());
        }
        read_field(o, "peak_lr", cfg.optim.peak_lr);
        read_field(o, "min_lr", cfg.optim.min_lr);
        read_field(o, "final_cooldown_lr", cfg.optim.final_cooldown_lr);
        read_field(o, "weight_decay", cfg.optim.weight_decay);
        read_field(o, "beta1", cfg.optim.beta1);
        read_field(o, "beta2", cfg.optim.beta2);
        read_field(o, "grad_clip", cfg.optim.grad_clip);
        read_field(o, "warmup_steps", cfg.optim.warmup_steps);
        read_field(o, "total_steps", cfg.optim.total_steps);
        if (auto s = o.find("schedule_kind"); s != o.end()) {
            cfg.optim.schedule_kind = schedule_from_name(s->get<std::string>());
        }
    }

    if (auto it = j.find("data"); it != j.end()) {
        const auto& d = *it;
        reject_unknown_keys(d, {"image_size", "high_res_size", "batch_size", "dataset_size",
                                "min_shapes", "max_shapes", "native_res", "token_budget",
                                "area_n_lo", "area_n_hi", "sources"},
                            "data");
        read_field(d, "image_size", cfg.data.image_size);
        read_field(d, "high_res_size", cfg.data.high_res_size);
        read_field(d, "batch_size", cfg.data.batch_size);
        read_field(d, "dataset_size", cfg.data.dataset_size);
        read_field(d, "min_shapes", cfg.data.min_shapes);
        read_field(d, "max_shapes", cfg.data.max_shapes);
        read_field(d, "native_res", cfg.data.native_res);
        read_field(d, "token_budget", cfg.data.token_budget);
        read_field(d, "area_n_lo", cfg.data.area_n_lo);
        read_field(d, "area_n_hi", cfg.data.area_n_hi);
        if (auto s = d.find("sources"); s != d.end()) {
            cfg.data.sources.clear();
            for (const auto& src : *s) {
                reject_unknown_keys(src, {"name", "prob", "seed"}, "source");
                MixtureSource ms;
                read_field(src, "name", ms.name);
                read_field(src, "prob", ms.prob);
                read_field(src, "seed", ms.seed);
                cfg.data.sources.push_back(std::move(ms));
            }
        }
    }
    return cfg;
}

} // namespace detail

inline std::string serialize_config(const RunConfig& cfg) {
    return detail::to_json(cfg).dump(2) + "\n";
}

inline RunConfig parse_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        // nlohmann reports "parse error at line L, column C: ..."
        throw ParseError(e.what());
    }
    RunConfig cfg = detail::from_json(j);
    validate_config(cfg);
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open config file '" + path + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline void save_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write config file '" + path + "'");
    }
    out << serialize_config(cfg);
}

// Hash of the canonical serialization; printed by every CLI command and
// embedded in checkpoints for provenance.
inline uint32_t config_hash(const RunConfig& cfg) {
    const std::string s = serialize_config(cfg);
    return crc32(s.data(), s.size());
}

} // namespace aimv2
