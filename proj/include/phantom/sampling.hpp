#pragma once

// Euler integration of the learned velocity field from t = 1 (noise) to
// t = 0, with separate guidance weights for the image and text conditions.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "phantom/conditioning.hpp"
#include "phantom/encoders.hpp"
#include "phantom/errors.hpp"
#include "phantom/mmdit.hpp"
#include "phantom/rng.hpp"
#include "phantom/tensor.hpp"

namespace phantom {

struct SampleConfig {
    std::size_t steps = 50;
    double omega1 = 3.0;   // image guidance
    double omega2 = 7.5;   // text guidance
    bool guidance = true;  // false: one text+image evaluation per step
    std::uint64_t seed = 0;

    void validate() const
    {
        if (steps == 0) throw ConfigError("sampling steps must be >= 1");
    }
};

/// x_null + w1 (x_img - x_null) + w2 (x_ti - x_img), evaluated as
/// (1 - w1) x_null + (w1 - w2) x_img + w2 x_ti so that unit and zero
/// weights reproduce a single branch exactly.
template <class T>
std::vector<T> cfg_combine(std::span<const T> x_null, std::span<const T> x_img, std::span<const T> x_ti, double w1,
                           double w2)
{
    if (x_null.size() != x_img.size() || x_img.size() != x_ti.size()) {
        throw DimensionError("guidance branches differ in size");
    }
    const T a = static_cast<T>(1.0 - w1);
    const T b = static_cast<T>(w1 - w2);
    const T c = static_cast<T>(w2);
    std::vector<T> out(x_ti.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x_ti[i] + b * x_img[i] + a * x_null[i];
    return out;
}

template <class T>
Tensor<T> cfg_combine(const Tensor<T>& x_null, const Tensor<T>& x_img, const Tensor<T>& x_ti, double w1, double w2)
{
    if (x_null.shape() != x_img.shape() || x_img.shape() != x_ti.shape()) {
        throw DimensionError("guidance branch shapes " + shape_str(x_null.shape()) + ", " + shape_str(x_img.shape()) +
                             ", " + shape_str(x_ti.shape()));
    }
    return Tensor<T>(x_ti.shape(), cfg_combine<T>(x_null.data(), x_img.data(), x_ti.data(), w1, w2));
}

/// x - dt * v, moving from t to t - dt.
template <class T>
Tensor<T> euler_step(const Tensor<T>& x, const Tensor<T>& v, double t, double dt)
{
    if (x.shape() != v.shape()) throw DimensionError("euler_step state and velocity shapes differ");
    if (!(dt > 0.0)) throw ContractError("euler_step needs dt > 0");
    if (t - dt < 0.0) throw ContractError("euler_step from t=" + std::to_string(t) + " by " + std::to_string(dt) +
                                          " overshoots 0");
    const T h = static_cast<T>(dt);
    std::vector<T> out(x.numel());
    const auto& xv = x.values();
    const auto& vv = v.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] - h * vv[i];
    return Tensor<T>(x.shape(), std::move(out));
}

/// t_k = (steps - k) / steps, k = 0..steps.
inline std::vector<double> uniform_time_grid(std::size_t steps)
{
    std::vector<double> grid(steps + 1);
    for (std::size_t k = 0; k <= steps; ++k) grid[k] = static_cast<double>(steps - k) / static_cast<double>(steps);
    return grid;
}

template <class T>
struct GenerationResult {
    VideoClip clip;
    Tensor<T> latent;  // final video latents, t x h x w x c_lat
    std::size_t model_evaluations = 0;
};

/// Video frames start as N(0, 1) noise at t = 1; references stay clean in
/// the tail of every evaluation.
template <class T>
GenerationResult<T> generate(const ModelParameters<T>& p, const ModelConfig& cfg, const SampleConfig& sc,
                             const std::vector<int>& prompt, const std::vector<Image>& refs)
{
    sc.validate();
    if (refs.empty() || refs.size() > kMaxReferences) {
        throw ContractError("generation needs 1 to 4 reference images, got " + std::to_string(refs.size()));
    }
    NoGradGuard no_grad;
    const auto conditions = prepare_conditions(p, cfg, prompt, refs);
    Rng rng(sc.seed);
    std::vector<T> noise(cfg.frames * cfg.grid_height * cfg.grid_width * cfg.latent_channels());
    for (auto& e : noise) e = static_cast<T>(rng.normal());
    Tensor<T> x({cfg.frames, cfg.grid_height, cfg.grid_width, cfg.latent_channels()}, std::move(noise));

    GenerationResult<T> result;
    auto velocity = [&](double t, ConditionMode mode) {
        auto in = build_inputs(p, cfg, conditions, x, ConditionDraw{mode, false});
        auto out = model_forward(p, cfg, in.visual, t, in.text);
        ++result.model_evaluations;
        return split(out, 0, {cfg.frames, refs.size()})[0];
    };

    const auto grid = uniform_time_grid(sc.steps);
    for (std::size_t k = 0; k < sc.steps; ++k) {
        const double t = grid[k];
        Tensor<T> v;
        if (sc.guidance) {
            auto v_null = velocity(t, ConditionMode::Null);
            auto v_img = velocity(t, ConditionMode::Image);
            auto v_ti = velocity(t, ConditionMode::TextImage);
            v = cfg_combine(v_null, v_img, v_ti, sc.omega1, sc.omega2);
        } else {
            v = velocity(t, ConditionMode::TextImage);
        }
        x = euler_step(x, v, t, t - grid[k + 1]);
    }

    LatentFrameGrid<T> lat;
    lat.frames = cfg.frames;
    lat.height = cfg.grid_height;
    lat.width = cfg.grid_width;
    lat.channels = cfg.latent_channels();
    lat.data = x.values();
    result.clip = decode_video(lat, cfg.patch);
    result.latent = x;
    return result;
}

}  // namespace phantom
