#pragma once

// JSON (de)serialisation of every config struct through one field list per
// type, with unknown keys rejected. dump() output is canonical: keys sorted,
// shortest round-trip numbers.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "phantom/dataforge.hpp"
#include "phantom/eval.hpp"
#include "phantom/errors.hpp"
#include "phantom/mmdit.hpp"
#include "phantom/sampling.hpp"
#include "phantom/training.hpp"

namespace phantom {

template <class V>
void describe(V& v, ModelConfig& c)
{
    v("channels", c.channels);
    v("heads", c.heads);
    v("depth", c.depth);
    v("window", c.window);
    v("frames", c.frames);
    v("grid_height", c.grid_height);
    v("grid_width", c.grid_width);
    v("patch", c.patch);
    v("text_max", c.text_max);
    v("semantic_tokens", c.semantic_tokens);
    v("timestep_dim", c.timestep_dim);
    v("mlp_ratio", c.mlp_ratio);
    v("vocab_size", c.vocab_size);
    v("rope_base", c.rope_base);
    v("diffusion_steps", c.diffusion_steps);
    v("norm_eps", c.norm_eps);
    v("semantic_hidden1", c.semantic_hidden1);
    v("semantic_hidden2", c.semantic_hidden2);
    v("semantic_dim", c.semantic_dim);
    v("train_semantic_encoder", c.train_semantic_encoder);
    v("zero_init_gates", c.zero_init_gates);
    v("init_seed", c.init_seed);
}

template <class V>
void describe(V& v, TrainConfig& c)
{
    v("diffusion_steps", c.diffusion_steps);
    v("batch_size", c.batch_size);
    v("learning_rate", c.learning_rate);
    v("beta1", c.beta1);
    v("beta2", c.beta2);
    v("adam_eps", c.adam_eps);
    v("weight_decay", c.weight_decay);
    v("reference_latent_dropout", c.reference_latent_dropout);
    v("text_dropout", c.text_dropout);
    v("all_dropout", c.all_dropout);
    v("max_steps", c.max_steps);
    v("seed", c.seed);
    v("checkpoint_interval", c.checkpoint_interval);
    v("log_interval", c.log_interval);
}

template <class V>
void describe(V& v, SceneConfig& c)
{
    v("frames", c.frames);
    v("height", c.height);
    v("width", c.width);
    v("sprite_min", c.sprite_min);
    v("sprite_max", c.sprite_max);
    v("travel_min", c.travel_min);
    v("travel_max", c.travel_max);
    v("multi_subject_fraction", c.multi_subject_fraction);
    v("max_subjects", c.max_subjects);
    v("crop_margin", c.crop_margin);
    v("cross_scale_jitter", c.cross_scale_jitter);
    v("cross_hue_jitter", c.cross_hue_jitter);
}

namespace detail {

struct ToJson {
    nlohmann::json& j;
    template <class F>
    void operator()(const char* key, F& field) { j[key] = field; }
};

struct FromJson {
    const nlohmann::json& j;
    std::string where;
    std::set<std::string> seen;
    template <class F>
    void operator()(const char* key, F& field)
    {
        seen.insert(key);
        auto it = j.find(key);
        if (it == j.end()) return;
        try {
            field = it->template get<F>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(where + "." + key + ": " + e.what());
        }
    }
};

}  // namespace detail

template <class C>
nlohmann::json to_json(const C& config)
{
    nlohmann::json j = nlohmann::json::object();
    detail::ToJson v{j};
    describe(v, const_cast<C&>(config));
    return j;
}

/// Overlays `j` on `base`; keys outside the field list are rejected.
template <class C>
C from_json(const nlohmann::json& j, const std::string& where, C base = {})
{
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    detail::FromJson v{j, where, {}};
    describe(v, base);
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!v.seen.count(it.key())) throw ConfigError("unknown key '" + where + "." + it.key() + "'");
    }
    return base;
}

struct DataConfig {
    SceneConfig scene;
    std::string mode = "cross_pair";
    std::uint64_t seed = 0;
    std::uint64_t offset = 0;
    std::size_t size = 20000;

    SpriteDataset dataset() const { return {scene, parse_pair_mode(mode), seed, offset, size}; }
};

struct EvalConfig {
    std::size_t frames_sampled = 10;
    double hue_tolerance = 22.5;
    double min_saturation = 0.5;
    double min_value = 0.5;
    std::size_t min_area = 4;
    std::uint64_t embedder_seed = 0x5eed;

    SegmentParams segment() const { return {hue_tolerance, min_saturation, min_value, min_area}; }
};

template <class V>
void describe(V& v, SampleConfig& c)
{
    v("steps", c.steps);
    v("omega1", c.omega1);
    v("omega2", c.omega2);
    v("guidance", c.guidance);
    v("seed", c.seed);
}

template <class V>
void describe(V& v, EvalConfig& c)
{
    v("frames_sampled", c.frames_sampled);
    v("hue_tolerance", c.hue_tolerance);
    v("min_saturation", c.min_saturation);
    v("min_value", c.min_value);
    v("min_area", c.min_area);
    v("embedder_seed", c.embedder_seed);
}

/// Full run configuration: one section per subsystem.
struct RunConfig {
    static constexpr int kSchemaVersion = 1;
    std::uint64_t seed = 0;
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    SampleConfig sample;
    EvalConfig eval;
    double pair_low = 0.3;
    double pair_high = 0.9;

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["schema_version"] = kSchemaVersion;
        j["seed"] = seed;
        auto d = phantom::to_json(data.scene);
        j["data"] = {{"scene", d}, {"mode", data.mode}, {"seed", data.seed}, {"offset", data.offset},
                     {"size", data.size}};
        j["model"] = phantom::to_json(model);
        j["train"] = phantom::to_json(train);
        j["sample"] = phantom::to_json(sample);
        j["eval"] = phantom::to_json(eval);
        j["matching"] = {{"s_low", pair_low}, {"s_high", pair_high}};
        return j;
    }

    static RunConfig parse(const nlohmann::json& j)
    {
        if (!j.is_object()) throw ConfigError("config root must be a JSON object");
        static const std::set<std::string> known{"schema_version", "seed", "data", "model",
                                                 "train", "sample", "eval", "matching"};
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "'");
        RunConfig r;
        try {
            if (j.contains("schema_version") && j["schema_version"].get<int>() != kSchemaVersion) {
                throw ConfigError("config schema_version " + j["schema_version"].dump() + " is not supported");
            }
            if (j.contains("seed")) r.seed = j["seed"].get<std::uint64_t>();
            if (j.contains("data")) {
                const auto& d = j["data"];
                if (!d.is_object()) throw ConfigError("data must be an object");
                for (auto it = d.begin(); it != d.end(); ++it) {
                    const auto& k = it.key();
                    if (k == "scene") r.data.scene = from_json<SceneConfig>(*it, "data.scene");
                    else if (k == "mode") r.data.mode = it->get<std::string>();
                    else if (k == "seed") r.data.seed = it->get<std::uint64_t>();
                    else if (k == "offset") r.data.offset = it->get<std::uint64_t>();
                    else if (k == "size") r.data.size = it->get<std::size_t>();
                    else throw ConfigError("unknown key 'data." + k + "'");
                }
                parse_pair_mode(r.data.mode);
            }
            if (j.contains("model")) r.model = from_json<ModelConfig>(j["model"], "model");
            if (j.contains("train")) r.train = from_json<TrainConfig>(j["train"], "train");
            if (j.contains("sample")) r.sample = from_json<SampleConfig>(j["sample"], "sample");
            if (j.contains("eval")) r.eval = from_json<EvalConfig>(j["eval"], "eval");
            if (j.contains("matching")) {
                const auto& m = j["matching"];
                for (auto it = m.begin(); it != m.end(); ++it) {
                    if (it.key() == "s_low") r.pair_low = it->get<double>();
                    else if (it.key() == "s_high") r.pair_high = it->get<double>();
                    else throw ConfigError("unknown key 'matching." + it.key() + "'");
                }
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config type error: ") + e.what());
        }
        return r;
    }

    void validate() const
    {
        data.scene.validate();
        model.validate();
        train.validate();
        sample.validate();
        if (!(pair_low < pair_high)) throw ConfigError("matching.s_low must be below matching.s_high");
        if (data.scene.frames != model.frames || data.scene.height != model.frame_height() ||
            data.scene.width != model.frame_width()) {
            throw ConfigError("data.scene geometry " + std::to_string(data.scene.frames) + "x" +
                              std::to_string(data.scene.height) + "x" + std::to_string(data.scene.width) +
                              " does not match the model's " + std::to_string(model.frames) + "x" +
                              std::to_string(model.frame_height()) + "x" + std::to_string(model.frame_width()));
        }
    }
};

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string config_hash(const nlohmann::json& j) { return fnv1a_hex(j.dump()); }

inline nlohmann::json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace phantom
