#pragma once

// Rectified-flow training: straight-line noising x_t = (1 - t) x0 + t eps,
// velocity regression on the video span only, logit-normal timesteps,
// condition dropout for guidance, and AdamW updates.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phantom/conditioning.hpp"
#include "phantom/dataforge.hpp"
#include "phantom/errors.hpp"
#include "phantom/mmdit.hpp"
#include "phantom/rng.hpp"
#include "phantom/tensor.hpp"

namespace phantom {

struct TrainConfig {
    double diffusion_steps = 1000.0;
    std::size_t batch_size = 16;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double reference_latent_dropout = 0.7;  // p_v
    double text_dropout = 0.1;              // p_t
    double all_dropout = 0.1;               // p_a
    std::size_t max_steps = 1000;
    std::uint64_t seed = 0;
    std::size_t checkpoint_interval = 0;    // 0: only at the end
    std::size_t log_interval = 10;

    void validate() const
    {
        auto prob = [](double p, const char* name) {
            if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must be in [0, 1]");
        };
        prob(reference_latent_dropout, "reference_latent_dropout");
        prob(text_dropout, "text_dropout");
        prob(all_dropout, "all_dropout");
        if (!(diffusion_steps >= 1.0)) throw ConfigError("diffusion_steps must be >= 1");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must be in [0, 1)");
        if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    }
};

// ---------------------------------------------------------------------------
// Flow primitives

/// sigmoid(z), z ~ N(0, 1).
inline double sample_timestep(Rng& rng)
{
    return 1.0 / (1.0 + std::exp(-rng.normal()));
}

/// Closed-form logit-normal(0, 1) CDF.
inline double logit_normal_cdf(double t)
{
    if (t <= 0) return 0;
    if (t >= 1) return 1;
    return 0.5 * std::erfc(-std::log(t / (1.0 - t)) / std::sqrt(2.0));
}

template <class T>
Tensor<T> noisify(const Tensor<T>& x0, const Tensor<T>& eps, double t)
{
    if (x0.shape() != eps.shape()) {
        throw DimensionError("noisify shapes " + shape_str(x0.shape()) + " and " + shape_str(eps.shape()));
    }
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError("noisify t outside [0, 1]");
    if (t == 0.0) return x0.detach();
    if (t == 1.0) return eps.detach();
    const T a = static_cast<T>(1.0 - t);
    const T b = static_cast<T>(t);
    std::vector<T> out(x0.numel());
    const auto& xv = x0.values();
    const auto& ev = eps.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * xv[i] + b * ev[i];
    return Tensor<T>(x0.shape(), std::move(out));
}

template <class T>
Tensor<T> velocity_target(const Tensor<T>& x0, const Tensor<T>& eps)
{
    if (x0.shape() != eps.shape()) {
        throw DimensionError("velocity_target shapes " + shape_str(x0.shape()) + " and " + shape_str(eps.shape()));
    }
    NoGradGuard guard;
    return sub(eps, x0);
}

/// Mean squared error over the video frames of the prediction; the
/// reference tail is split off and never reaches the loss.
template <class T>
Tensor<T> rf_loss(const Tensor<T>& predicted, const Tensor<T>& target, const SegmentMap& map)
{
    validate_visual_map(map, predicted.shape());
    if (target.dim() != 4 || target.size(0) != map.video_frames ||
        !std::equal(target.shape().begin() + 1, target.shape().end(), predicted.shape().begin() + 1)) {
        throw ContractError("target " + shape_str(target.shape()) + " does not match the video span of " +
                            shape_str(predicted.shape()));
    }
    auto parts = split(predicted, 0, {map.video_frames, map.reference_frames});
    return mse(parts[0], target);
}

/// Independent draws: latent-path reference dropout with p_v; then all
/// conditions dropped with p_a, else text dropped with p_t. All three
/// uniforms are always consumed.
inline ConditionDraw apply_condition_dropout(Rng& rng, const TrainConfig& cfg)
{
    ConditionDraw d;
    d.null_reference_latents = rng.bernoulli(cfg.reference_latent_dropout);
    const bool drop_all = rng.bernoulli(cfg.all_dropout);
    const bool drop_text = rng.bernoulli(cfg.text_dropout);
    d.mode = drop_all ? ConditionMode::Null : drop_text ? ConditionMode::Image : ConditionMode::TextImage;
    return d;
}

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
struct AdamW {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::uint64_t steps = 0;

    /// One decoupled-weight-decay Adam update over `params`, reading each
    /// tensor's accumulated gradient (missing gradient = zero).
    void update(std::vector<std::pair<std::string, Tensor<T>>>& params, const TrainConfig& cfg)
    {
        if (m.empty()) {
            for (auto& [name, t] : params) {
                m.emplace_back(t.numel(), T(0));
                v.emplace_back(t.numel(), T(0));
            }
        }
        if (m.size() != params.size()) throw ContractError("optimizer state does not match parameter list");
        ++steps;
        const T b1 = static_cast<T>(cfg.beta1);
        const T b2 = static_cast<T>(cfg.beta2);
        const T lr = static_cast<T>(cfg.learning_rate);
        const T wd = static_cast<T>(cfg.weight_decay);
        const T eps = static_cast<T>(cfg.adam_eps);
        const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(steps)));
        const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(steps)));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& t = params[i].second;
            auto data = t.mutable_data();
            auto grad = t.grad();
            auto& mi = m[i];
            auto& vi = v[i];
            if (mi.size() != data.size()) throw ContractError("optimizer moment size mismatch for " + params[i].first);
            for (std::size_t k = 0; k < data.size(); ++k) {
                const T g = grad.empty() ? T(0) : grad[k];
                mi[k] = b1 * mi[k] + (T(1) - b1) * g;
                vi[k] = b2 * vi[k] + (T(1) - b2) * g * g;
                const T mhat = mi[k] / c1;
                const T vhat = vi[k] / c2;
                data[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * data[k]);
            }
            t.zero_grad();
        }
    }
};

// ---------------------------------------------------------------------------
// Data

/// Index-addressed synthetic dataset; sample i is regenerated on demand.
struct SpriteDataset {
    SceneConfig scene;
    PairMode mode = PairMode::CrossPair;
    std::uint64_t seed = 0;
    std::uint64_t offset = 0;  // first sample index, so disjoint splits can share a seed
    std::size_t size = 20000;

    TripletSample operator[](std::size_t i) const { return gen_sprite_triplet(seed, offset + i, scene, mode); }
};

// ---------------------------------------------------------------------------
// Trainer

template <class T>
struct TrainState {
    ModelConfig model;
    TrainConfig train;
    ModelParameters<T> params;
    AdamW<T> optimizer;
    Rng rng;
    std::uint64_t step = 0;

    static TrainState fresh(const ModelConfig& model, const TrainConfig& train)
    {
        train.validate();
        TrainState s;
        s.model = model;
        s.train = train;
        s.params = ModelParameters<T>::init(model);
        s.rng = Rng(train.seed);
        return s;
    }
};

struct StepStats {
    std::uint64_t step = 0;
    double loss = 0.0;
    std::array<std::size_t, 3> mode_counts{};  // TI, I, null
    std::size_t null_reference_latents = 0;
};

/// One optimizer update on the given batch. Per-sample gradients are
/// accumulated in batch order, so the result does not depend on scheduling.
template <class T>
StepStats train_step(TrainState<T>& state, const std::vector<PreparedSample<T>>& batch)
{
    if (batch.empty()) throw ContractError("train_step on an empty batch");
    const auto& cfg = state.model;
    StepStats stats;
    const T inv_b = T(1) / static_cast<T>(batch.size());
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& sample = batch[b];
        const ConditionDraw draw = apply_condition_dropout(state.rng, state.train);
        const double t = sample_timestep(state.rng);
        std::vector<T> noise(sample.video.numel());
        for (auto& e : noise) e = static_cast<T>(state.rng.normal());
        Tensor<T> eps(sample.video.shape(), std::move(noise));
        auto xt = noisify(sample.video, eps, t);
        auto target = velocity_target(sample.video, eps);

        auto inputs = build_inputs(state.params, cfg, sample.conditions, xt, draw);
        auto pred = model_forward(state.params, cfg, inputs.visual, t, inputs.text);
        auto loss = rf_loss(pred, target, inputs.visual.map);
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value)) {
            std::ostringstream os;
            os << "non-finite loss at step " << state.step << ", batch item " << b << ", t=" << t
               << ", mode=" << condition_mode_name(draw.mode);
            throw NumericError(os.str());
        }
        backward(scale(loss, inv_b));
        total += value;
        ++stats.mode_counts[static_cast<std::size_t>(draw.mode)];
        stats.null_reference_latents += draw.null_reference_latents;
    }
    auto params = state.params.trainable();
    state.optimizer.update(params, state.train);
    ++state.step;
    stats.step = state.step;
    stats.loss = total / static_cast<double>(batch.size());
    return stats;
}

/// Draws batch indices with the trainer's RNG and prepares the samples.
template <class T>
std::vector<PreparedSample<T>> draw_batch(TrainState<T>& state, const SpriteDataset& data)
{
    std::vector<PreparedSample<T>> batch;
    for (std::size_t i = 0; i < state.train.batch_size; ++i) {
        const auto index = static_cast<std::size_t>(state.rng.below(data.size));
        batch.push_back(prepare_sample(state.params, state.model, data[index]));
    }
    return batch;
}

inline nlohmann::json step_record(const StepStats& s, double wall_seconds)
{
    return {{"step", s.step},
            {"loss", s.loss},
            {"mode_counts", {{"TI", s.mode_counts[0]}, {"I", s.mode_counts[1]}, {"null", s.mode_counts[2]}}},
            {"null_reference_latents", s.null_reference_latents},
            {"wall_time", wall_seconds}};
}

/// Runs until state.step reaches `until`. `on_step` sees every step;
/// returning false stops early.
template <class T>
void train_until(TrainState<T>& state, const SpriteDataset& data, std::uint64_t until,
                 const std::function<bool(const StepStats&)>& on_step = {})
{
    while (state.step < until) {
        auto batch = draw_batch(state, data);
        const auto stats = train_step(state, batch);
        if (on_step && !on_step(stats)) break;
    }
}

/// Append-only JSON-lines training log.
class TrainLog {
public:
    explicit TrainLog(const std::filesystem::path& path) : out_(path, std::ios::app), start_(Clock::now()) {}

    void write(const StepStats& s)
    {
        const double wall = std::chrono::duration<double>(Clock::now() - start_).count();
        out_ << step_record(s, wall).dump() << '\n';
        out_.flush();
    }

private:
    using Clock = std::chrono::steady_clock;
    std::ofstream out_;
    Clock::time_point start_;
};

}  // namespace phantom
