#pragma once

// End-to-end gradient check of the velocity model: one triplet, one fixed
// noise draw and timestep, rectified-flow loss over the video span.

#include <cstdint>

#include <nlohmann/json.hpp>

#include "phantom/conditioning.hpp"
#include "phantom/gradcheck.hpp"
#include "phantom/training.hpp"

namespace phantom {

/// The micro model used for gradient verification. Gates start non-zero so
/// every block contributes to the output.
inline ModelConfig micro_model_config()
{
    ModelConfig c;
    c.channels = 24;
    c.depth = 2;
    c.heads = 2;
    c.frames = 2;
    c.grid_height = 4;
    c.grid_width = 4;
    c.patch = 4;
    c.text_max = 4;
    c.semantic_tokens = 4;
    c.timestep_dim = 16;
    c.mlp_ratio = 2;
    c.semantic_hidden1 = 8;
    c.semantic_hidden2 = 8;
    c.semantic_dim = 8;
    c.zero_init_gates = false;
    c.init_seed = 3;
    return c;
}

inline GradCheckReport model_grad_check(const ModelConfig& cfg, std::uint64_t seed, const GradCheckOptions& options,
                                        double t = 0.37)
{
    cfg.validate();
    auto params = ModelParameters<double>::init(cfg);
    SceneConfig scene;
    scene.frames = cfg.frames;
    scene.height = cfg.frame_height();
    scene.width = cfg.frame_width();
    scene.multi_subject_fraction = 0.0;
    auto triplet = gen_sprite_triplet(seed, 0, scene, PairMode::CrossPair);
    if (triplet.prompt.size() > cfg.text_max) triplet.prompt.resize(cfg.text_max);
    const auto sample = prepare_sample(params, cfg, triplet);

    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<double> noise(sample.video.numel());
    for (auto& e : noise) e = rng.normal();
    const Tensor<double> eps(sample.video.shape(), std::move(noise));
    const auto xt = noisify(sample.video, eps, t);
    const auto target = velocity_target(sample.video, eps);

    auto loss = [&]() {
        auto in = build_inputs(params, cfg, sample.conditions, xt, ConditionDraw{});
        return rf_loss(model_forward(params, cfg, in.visual, t, in.text), target, in.visual.map);
    };
    return grad_check<double>(loss, params.trainable(), options);
}

inline nlohmann::json grad_check_json(const GradCheckReport& r, double tolerance)
{
    nlohmann::json j;
    j["max_relative_error"] = r.max_relative_error;
    j["tolerance"] = tolerance;
    j["passed"] = r.max_relative_error < tolerance;
    j["evaluations"] = r.evaluations;
    j["parameters"] = nlohmann::json::array();
    for (const auto& e : r.entries) {
        j["parameters"].push_back({{"name", e.name},
                                   {"elements", e.elements_checked},
                                   {"relative_error", e.relative_error},
                                   {"max_abs_error", e.max_abs_error}});
    }
    return j;
}

}  // namespace phantom
