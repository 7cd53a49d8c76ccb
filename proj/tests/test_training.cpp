#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "phantom/checkpoint.hpp"
#include "phantom/training.hpp"

using namespace phantom;

namespace {

ModelConfig tiny_model()
{
    ModelConfig cfg;
    cfg.channels = 12;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.frames = 2;
    cfg.grid_height = 2;
    cfg.grid_width = 2;
    cfg.patch = 4;
    cfg.timestep_dim = 8;
    cfg.mlp_ratio = 2;
    cfg.semantic_tokens = 2;
    cfg.semantic_hidden1 = 4;
    cfg.semantic_hidden2 = 4;
    cfg.semantic_dim = 4;
    cfg.window = 3;
    return cfg;
}

SceneConfig tiny_scene()
{
    SceneConfig s;
    s.frames = 2;
    s.height = 8;
    s.width = 8;
    return s;
}

TrainConfig tiny_train(std::size_t batch = 2)
{
    TrainConfig t;
    t.batch_size = batch;
    t.seed = 5;
    return t;
}

template <class T>
std::vector<std::vector<T>> snapshot(ModelParameters<T>& p)
{
    std::vector<std::vector<T>> out;
    p.visit([&](const std::string&, Tensor<T>& t) { out.push_back(t.values()); });
    return out;
}

Tensor<double> randn(Shape shape, Rng& rng)
{
    return normal_tensor<double>(std::move(shape), 1.0, rng, false);
}

}  // namespace

TEST(Timestep, ReproducibleAndInsideUnitInterval)
{
    Rng a(1), b(1);
    for (int i = 0; i < 100000; ++i) {
        const double t = sample_timestep(a);
        ASSERT_GT(t, 0.0);
        ASSERT_LT(t, 1.0);
        ASSERT_EQ(t, sample_timestep(b));
    }
}

TEST(Timestep, LogitNormalKolmogorovSmirnov)
{
    Rng rng(2);
    const std::size_t n = 100000;
    std::vector<double> draws(n);
    for (auto& d : draws) d = sample_timestep(rng);
    std::sort(draws.begin(), draws.end());
    double ks = 0;
    for (std::size_t i = 0; i < n; ++i) {
        // Closed form written out here rather than reusing the library CDF.
        const double z = std::log(draws[i] / (1 - draws[i]));
        const double f = 0.5 * (1 + std::erf(z / std::sqrt(2.0)));
        ks = std::max({ks, std::abs(f - static_cast<double>(i) / n), std::abs(f - static_cast<double>(i + 1) / n)});
    }
    EXPECT_LT(ks, 0.01);
    EXPECT_NEAR(logit_normal_cdf(0.5), 0.5, 1e-15);
}

TEST(Noisify, EndpointsAreExact)
{
    Rng rng(3);
    auto x0 = randn({2, 2, 2, 3}, rng), eps = randn({2, 2, 2, 3}, rng);
    EXPECT_EQ(noisify(x0, eps, 0.0).values(), x0.values());
    EXPECT_EQ(noisify(x0, eps, 1.0).values(), eps.values());
    auto mid = noisify(Tensor<double>::zeros({1}), Tensor<double>::full({1}, 2.0), 0.5);
    EXPECT_EQ(mid[0], 1.0);
}

TEST(Noisify, LinearInT)
{
    Rng rng(4);
    auto x0 = randn({3, 4}, rng), eps = randn({3, 4}, rng);
    auto a = noisify(x0, eps, 0.2), b = noisify(x0, eps, 0.6), m = noisify(x0, eps, 0.4);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(m[i], 0.5 * (a[i] + b[i]), 1e-14);
}

TEST(Noisify, Errors)
{
    EXPECT_THROW(noisify(Tensor<double>::zeros({2}), Tensor<double>::zeros({3}), 0.5), DimensionError);
    EXPECT_THROW(velocity_target(Tensor<double>::zeros({2}), Tensor<double>::zeros({3})), DimensionError);
}

TEST(VelocityTarget, Examples)
{
    Rng rng(5);
    auto x0 = randn({5}, rng), eps = randn({5}, rng);
    auto zero = velocity_target(x0, x0);
    for (auto v : zero.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(velocity_target(Tensor<double>::zeros({5}), eps).values(), eps.values());
}

TEST(VelocityTarget, MatchesFiniteDifferenceInT)
{
    Rng rng(6);
    auto x0 = randn({10}, rng), eps = randn({10}, rng);
    auto u = velocity_target(x0, eps);
    for (double t : {0.1, 0.5, 0.9}) {
        const double h = 1e-6;
        auto p = noisify(x0, eps, t + h), m = noisify(x0, eps, t - h);
        for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR((p[i] - m[i]) / (2 * h), u[i], 1e-6);
    }
}

TEST(RfLoss, Examples)
{
    Rng rng(7);
    SegmentMap map;
    map.video_frames = 3;
    map.reference_frames = 2;
    auto target = randn({3, 2, 2, 4}, rng);
    auto tail = randn({2, 2, 2, 4}, rng);
    auto pred = concat<double>({target, tail}, 0);
    EXPECT_EQ(rf_loss(pred, target, map).item(), 0.0);

    auto shifted = concat<double>({add_scalar(target, 1.0), tail}, 0);
    EXPECT_DOUBLE_EQ(rf_loss(shifted, target, map).item(), 1.0);

    auto random = randn({5, 2, 2, 4}, rng);
    long double s = 0;
    for (std::size_t i = 0; i < target.numel(); ++i) s += (random[i] - target[i]) * (random[i] - target[i]);
    EXPECT_NEAR(rf_loss(random, target, map).item(), static_cast<double>(s / target.numel()), 1e-7);
}

TEST(RfLoss, TailGradientIsExactlyZero)
{
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        SegmentMap map;
        map.video_frames = 1 + rng.below(4);
        map.reference_frames = 1 + rng.below(4);
        auto pred = normal_tensor<double>({map.visual_stream_frames(), 2, 3, 5}, 1.0, rng, true);
        auto target = randn({map.video_frames, 2, 3, 5}, rng);
        backward(rf_loss(pred, target, map));
        const std::size_t per = 30;
        for (std::size_t i = map.video_frames * per; i < pred.numel(); ++i) ASSERT_EQ(pred.grad()[i], 0.0);
        double video_grad = 0;
        for (std::size_t i = 0; i < map.video_frames * per; ++i) video_grad += std::abs(pred.grad()[i]);
        EXPECT_GT(video_grad, 0.0);
    }
}

TEST(RfLoss, SpanMismatchIsContractError)
{
    SegmentMap map;
    map.video_frames = 2;
    map.reference_frames = 1;
    EXPECT_THROW(rf_loss(Tensor<double>::zeros({3, 1, 1, 2}), Tensor<double>::zeros({3, 1, 1, 2}), map),
                 ContractError);
    EXPECT_THROW(rf_loss(Tensor<double>::zeros({4, 1, 1, 2}), Tensor<double>::zeros({2, 1, 1, 2}), map),
                 ContractError);
}

TEST(ConditionDropout, DegenerateProbabilities)
{
    TrainConfig cfg;
    cfg.reference_latent_dropout = 1.0;
    cfg.text_dropout = 0.0;
    cfg.all_dropout = 0.0;
    Rng rng(9);
    for (int i = 0; i < 1000; ++i) {
        auto d = apply_condition_dropout(rng, cfg);
        EXPECT_TRUE(d.null_reference_latents);
        EXPECT_EQ(d.mode, ConditionMode::TextImage);
    }
}

TEST(ConditionDropout, EmpiricalRatesMatchConfig)
{
    TrainConfig cfg;
    Rng rng(10);
    const int n = 100000;
    int nulled = 0, image = 0, none = 0;
    for (int i = 0; i < n; ++i) {
        auto d = apply_condition_dropout(rng, cfg);
        nulled += d.null_reference_latents;
        image += d.mode == ConditionMode::Image;
        none += d.mode == ConditionMode::Null;
    }
    EXPECT_NEAR(nulled / double(n), 0.7, 0.01);
    EXPECT_NEAR(none / double(n), 0.1, 0.01);
    EXPECT_NEAR(image / double(n), 0.9 * 0.1, 0.01);
}

TEST(ConditionDropout, NullLatentsKeepSemanticTokens)
{
    auto cfg = tiny_model();
    auto p = ModelParameters<double>::init(cfg);
    auto s = gen_sprite_triplet(1, 0, tiny_scene(), PairMode::CrossPair);
    auto prepared = prepare_sample(p, cfg, s);
    auto full = build_inputs(p, cfg, prepared.conditions, prepared.video, {ConditionMode::TextImage, false});
    auto dropped = build_inputs(p, cfg, prepared.conditions, prepared.video, {ConditionMode::TextImage, true});
    EXPECT_EQ(full.text.features.values(), dropped.text.features.values());
    EXPECT_NE(full.visual.features.values(), dropped.visual.features.values());
    EXPECT_EQ(full.visual.features.shape(), dropped.visual.features.shape());

    auto image = build_inputs(p, cfg, prepared.conditions, prepared.video, {ConditionMode::Image, false});
    auto null = build_inputs(p, cfg, prepared.conditions, prepared.video, {ConditionMode::Null, false});
    EXPECT_EQ(image.text.map.text_tokens, 1u);  // the learned null text row
    EXPECT_EQ(image.visual.features.values(), full.visual.features.values());
    EXPECT_EQ(null.visual.features.values(), dropped.visual.features.values());
    EXPECT_EQ(null.text.map.reference_count(), s.refs.size());
}

TEST(TrainConfig, Validation)
{
    TrainConfig cfg;
    cfg.text_dropout = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.diffusion_steps = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainStep, OverfitsAFixedBatch)
{
    // Fixed batch means fixed samples and fixed draws: the trainer RNG is
    // rewound before every step so timesteps, noise and dropout repeat.
    auto cfg = tiny_model();
    auto tc = tiny_train(2);
    tc.reference_latent_dropout = 0;
    tc.text_dropout = 0;
    tc.all_dropout = 0;
    auto state = TrainState<double>::fresh(cfg, tc);
    SpriteDataset data{tiny_scene(), PairMode::CrossPair, 3, 0, 2};
    std::vector<PreparedSample<double>> batch{prepare_sample(state.params, cfg, data[0]),
                                              prepare_sample(state.params, cfg, data[1])};
    const auto rng_state = state.rng.state();
    double first = 0, last = 0;
    for (int i = 0; i < 200; ++i) {
        state.rng.set_state(rng_state);
        auto stats = train_step(state, batch);
        if (i == 0) first = stats.loss;
        last = stats.loss;
    }
    EXPECT_LE(last * 10, first) << "first " << first << " last " << last;
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged)
{
    auto tc = tiny_train();
    tc.learning_rate = 0;
    auto state = TrainState<float>::fresh(tiny_model(), tc);
    auto before = snapshot(state.params);
    SpriteDataset data{tiny_scene(), PairMode::CrossPair, 1, 0, 10};
    train_until(state, data, 3);
    EXPECT_EQ(snapshot(state.params), before);
    EXPECT_EQ(state.step, 3u);
}

TEST(TrainStep, DeterministicReplay)
{
    SpriteDataset data{tiny_scene(), PairMode::CrossPair, 1, 0, 10};
    auto a = TrainState<float>::fresh(tiny_model(), tiny_train());
    auto b = TrainState<float>::fresh(tiny_model(), tiny_train());
    train_until(a, data, 4);
    train_until(b, data, 4);
    EXPECT_EQ(snapshot(a.params), snapshot(b.params));
}

TEST(TrainStep, FrozenEmbedderIsBitwiseUnchanged)
{
    auto state = TrainState<float>::fresh(tiny_model(), tiny_train());
    std::vector<std::vector<float>> before;
    state.params.semantic.visit("", [&](const std::string&, Tensor<float>& t) { before.push_back(t.values()); });
    SpriteDataset data{tiny_scene(), PairMode::CrossPair, 1, 0, 10};
    train_until(state, data, 5);
    std::vector<std::vector<float>> after;
    state.params.semantic.visit("", [&](const std::string&, Tensor<float>& t) { after.push_back(t.values()); });
    EXPECT_EQ(before, after);
}

TEST(TrainStep, UnfrozenEmbedderReceivesUpdates)
{
    auto cfg = tiny_model();
    cfg.train_semantic_encoder = true;
    cfg.zero_init_gates = false;
    auto state = TrainState<double>::fresh(cfg, tiny_train());
    auto before = state.params.semantic.head.weight.values();
    SpriteDataset data{tiny_scene(), PairMode::CrossPair, 1, 0, 10};
    train_until(state, data, 2);
    EXPECT_NE(state.params.semantic.head.weight.values(), before);
}

TEST(TrainStep, StatsCountModes)
{
    auto state = TrainState<float>::fresh(tiny_model(), tiny_train(8));
    SpriteDataset data{tiny_scene(), PairMode::CrossPair, 1, 0, 10};
    auto stats = train_step(state, draw_batch(state, data));
    EXPECT_EQ(stats.mode_counts[0] + stats.mode_counts[1] + stats.mode_counts[2], 8u);
    EXPECT_EQ(stats.step, 1u);
    EXPECT_TRUE(std::isfinite(stats.loss));
    auto rec = step_record(stats, 1.5);
    EXPECT_EQ(rec["step"], 1);
    EXPECT_TRUE(rec.contains("mode_counts"));
    EXPECT_EQ(rec["wall_time"], 1.5);
}

TEST(TrainStep, EmptyBatchIsContractError)
{
    auto state = TrainState<float>::fresh(tiny_model(), tiny_train());
    EXPECT_THROW(train_step(state, {}), ContractError);
}

TEST(TrainStep, NonFiniteForwardAborts)
{
    auto state = TrainState<float>::fresh(tiny_model(), tiny_train());
    for (auto& v : state.params.patch_out.weight.mutable_data()) v = 3e38f;
    SpriteDataset data{tiny_scene(), PairMode::CrossPair, 1, 0, 10};
    auto batch = draw_batch(state, data);
    EXPECT_THROW(train_step(state, batch), NumericError);
}

TEST(TrainStep, ResolutionChangeMidRun)
{
    auto cfg = tiny_model();
    auto state = TrainState<float>::fresh(cfg, tiny_train());
    train_until(state, SpriteDataset{tiny_scene(), PairMode::CrossPair, 1, 0, 10}, 2);

    // Reload at a larger grid: parameter shapes do not depend on the grid.
    auto bytes = serialize_checkpoint(state);
    auto resumed = deserialize_checkpoint<float>(bytes);
    resumed.model.frames = 3;
    resumed.model.grid_height = 4;
    resumed.model.grid_width = 4;
    resumed.model.validate();
    auto scene = tiny_scene();
    scene.frames = 3;
    scene.height = 16;
    scene.width = 16;
    train_until(resumed, SpriteDataset{scene, PairMode::CrossPair, 1, 0, 10}, 4);
    EXPECT_EQ(resumed.step, 4u);
}

TEST(TrainStep, GeometryMismatchIsDimensionError)
{
    auto state = TrainState<float>::fresh(tiny_model(), tiny_train());
    auto scene = tiny_scene();
    scene.height = 16;
    EXPECT_THROW(draw_batch(state, SpriteDataset{scene, PairMode::CrossPair, 1, 0, 10}), DimensionError);
}

TEST(AdamW, MatchesHandComputedFirstStep)
{
    // After one step with bias correction the update is lr * g / (|g| + eps).
    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    auto w = Tensor<double>({2}, {1.0, -1.0}, true);
    backward(sum(mul(w, Tensor<double>({2}, {3.0, -0.5}))));
    std::vector<std::pair<std::string, Tensor<double>>> params{{"w", w}};
    AdamW<double> opt;
    opt.update(params, cfg);
    EXPECT_NEAR(w[0], 1.0 - 0.1 * 3.0 / (3.0 + 1e-8), 1e-12);
    EXPECT_NEAR(w[1], -1.0 + 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
    EXPECT_FALSE(w.has_grad());
}

class Checkpoints : public ::testing::Test {
protected:
    std::filesystem::path dir = std::filesystem::temp_directory_path() / "phantom_ckpt_test";
    void SetUp() override
    {
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
    }
    void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST_F(Checkpoints, SaveLoadSaveIsByteIdentical)
{
    auto state = TrainState<float>::fresh(tiny_model(), tiny_train());
    train_until(state, SpriteDataset{tiny_scene(), PairMode::CrossPair, 1, 0, 10}, 2);
    save_checkpoint(dir / "a.ckpt", state);
    auto loaded = load_checkpoint<float>(dir / "a.ckpt");
    save_checkpoint(dir / "b.ckpt", loaded);
    EXPECT_EQ(read_file_bytes(dir / "a.ckpt"), read_file_bytes(dir / "b.ckpt"));
    EXPECT_EQ(loaded.step, 2u);
    EXPECT_EQ(loaded.rng, state.rng);
}

TEST_F(Checkpoints, ResumeMatchesUninterruptedTrajectory)
{
    SpriteDataset data{tiny_scene(), PairMode::CrossPair, 1, 0, 10};
    auto straight = TrainState<double>::fresh(tiny_model(), tiny_train());
    train_until(straight, data, 4);

    auto first = TrainState<double>::fresh(tiny_model(), tiny_train());
    train_until(first, data, 2);
    save_checkpoint(dir / "mid.ckpt", first);
    auto resumed = load_checkpoint<double>(dir / "mid.ckpt");
    train_until(resumed, data, 4);
    EXPECT_EQ(snapshot(resumed.params), snapshot(straight.params));
    EXPECT_EQ(serialize_checkpoint(resumed), serialize_checkpoint(straight));
}

TEST_F(Checkpoints, MagicVersionChecksumAndTruncation)
{
    auto state = TrainState<float>::fresh(tiny_model(), tiny_train());
    const auto good = serialize_checkpoint(state);

    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint<float>(bad_magic), CorruptionError);

    auto newer = good;
    newer[4] = 2;
    EXPECT_THROW(deserialize_checkpoint<float>(newer), IncompatibleVersionError);

    auto flipped = good;
    flipped[good.size() / 2] ^= 0x40;
    EXPECT_THROW(deserialize_checkpoint<float>(flipped), CorruptionError);

    EXPECT_THROW(deserialize_checkpoint<float>(good.substr(0, good.size() - 100)), CorruptionError);
    EXPECT_THROW(deserialize_checkpoint<float>(good.substr(0, 6)), CorruptionError);
    EXPECT_THROW(load_checkpoint<float>(dir / "missing.ckpt"), LoadError);
}

TEST_F(Checkpoints, PrecisionIsPreservedPerDtype)
{
    auto state = TrainState<double>::fresh(tiny_model(), tiny_train());
    state.params.null_text.mutable_data()[0] = 1.0 + 1e-12;
    auto back = deserialize_checkpoint<double>(serialize_checkpoint(state));
    EXPECT_EQ(back.params.null_text[0], 1.0 + 1e-12);
}

TEST_F(Checkpoints, TrainLogAppendsJsonLines)
{
    {
        TrainLog log(dir / "log.jsonl");
        StepStats s;
        s.step = 1;
        s.loss = 0.5;
        log.write(s);
        s.step = 2;
        log.write(s);
    }
    std::ifstream in(dir / "log.jsonl");
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["step"], ++n);
        EXPECT_TRUE(j.contains("wall_time"));
    }
    EXPECT_EQ(n, 2);
}
