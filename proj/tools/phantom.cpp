// Command-line entry point. Every subcommand resolves one JSON run config
// (file, then --set overrides, then subcommand flags), snapshots it next to
// its outputs and runs.
//
// Exit status: 0 success, 1 runtime failure, 2 usage error, 3 config error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "phantom/phantom.hpp"

#ifndef PHANTOM_CODE_VERSION
#define PHANTOM_CODE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace phantom;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

struct ConfigSource {
    std::string path;
    std::vector<std::string> overrides;
};

/// "a.b=value" with the value read as JSON, or as a plain string when it
/// does not parse.
void apply_override(json& root, const std::string& item)
{
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + item + "' is not key=value");
    const std::string path = item.substr(0, eq);
    const std::string text = item.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &root;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override '" + item + "' has an empty key");
        if (!node->is_null() && !node->is_object()) throw ConfigError("override '" + item + "' descends into a value");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

json raw_config(const ConfigSource& src)
{
    json j = src.path.empty() ? json::object() : read_json_file(src.path);
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    for (const auto& o : src.overrides) apply_override(j, o);
    return j;
}

RunConfig resolve(const ConfigSource& src) { return RunConfig::parse(raw_config(src)); }

void add_config_options(CLI::App* cmd, ConfigSource& src)
{
    cmd->add_option("-c,--config", src.path, "JSON run config file");
    cmd->add_option("--set", src.overrides, "Override a config value, e.g. --set train.batch_size=4");
}

void write_snapshot(const fs::path& dir, const json& config, const std::string& command, json extra = json::object())
{
    fs::create_directories(dir);
    std::ofstream(dir / "config.json") << config.dump(2) << '\n';
    extra["command"] = command;
    extra["code_version"] = PHANTOM_CODE_VERSION;
    extra["config_hash"] = config_hash(config);
    std::ofstream(dir / "run.json") << extra.dump(2) << '\n';
}

std::string checkpoint_bytes(const std::string& path)
{
    if (path.empty()) throw ConfigError("--checkpoint is required");
    if (!fs::is_regular_file(path)) throw ConfigError("checkpoint '" + path + "' does not exist");
    return read_file_bytes(path);
}

/// Data geometry follows the model when the model comes from a checkpoint.
void follow_model_geometry(RunConfig& rc)
{
    rc.data.scene.frames = rc.model.frames;
    rc.data.scene.height = rc.model.frame_height();
    rc.data.scene.width = rc.model.frame_width();
}

std::string clip_hash(const VideoClip& clip)
{
    return fnv1a_hex(std::string_view(reinterpret_cast<const char*>(clip.data.data()), clip.data.size() * sizeof(float)));
}

// ---------------------------------------------------------------------------
// datagen

struct DatagenOptions {
    ConfigSource src;
    std::string out;
    std::optional<std::size_t> count;
    std::optional<std::string> mode;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> offset;
};

int run_datagen(const DatagenOptions& o)
{
    auto rc = resolve(o.src);
    if (o.count) rc.data.size = *o.count;
    if (o.mode) rc.data.mode = *o.mode;
    if (o.seed) rc.data.seed = *o.seed;
    if (o.offset) rc.data.offset = *o.offset;
    rc.data.scene.validate();
    const auto data = rc.data.dataset();

    const fs::path out(o.out);
    const auto config = rc.to_json();
    write_snapshot(out, config, "datagen");
    std::ofstream manifest(out / "manifest.jsonl");
    for (std::size_t i = 0; i < data.size; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "sample_%06zu", i);
        auto entry = export_sample(out / "samples", id, data[i]);
        entry["index"] = data.offset + i;
        manifest << entry.dump() << '\n';
    }
    std::cout << "wrote " << data.size << " " << rc.data.mode << " samples to " << out.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
    ConfigSource src;
    std::string out;
    std::optional<std::uint64_t> steps;
    std::string resume;
    bool double_precision = false;
};

template <class T>
int run_train(const TrainOptions& o)
{
    auto rc = resolve(o.src);
    if (o.steps) rc.train.max_steps = *o.steps;
    TrainState<T> state;
    if (!o.resume.empty()) {
        state = deserialize_checkpoint<T>(checkpoint_bytes(o.resume));
        // Architecture and optimizer come from the checkpoint; the schedule
        // and the latent grid may change between phases.
        ModelConfig m = state.model;
        m.frames = rc.model.frames;
        m.grid_height = rc.model.grid_height;
        m.grid_width = rc.model.grid_width;
        state.model = m;
        state.train.max_steps = rc.train.max_steps;
        state.train.checkpoint_interval = rc.train.checkpoint_interval;
        state.train.log_interval = rc.train.log_interval;
        rc.model = state.model;
        rc.train = state.train;
    }
    rc.validate();
    if (o.resume.empty()) state = TrainState<T>::fresh(rc.model, rc.train);

    const fs::path out(o.out);
    write_snapshot(out, rc.to_json(), "train",
                   {{"resumed_from", o.resume}, {"precision", sizeof(T) == 8 ? "float64" : "float32"}});
    fs::create_directories(out / "checkpoints");
    TrainLog log(out / "train_log.jsonl");
    const auto data = rc.data.dataset();
    const auto save = [&] {
        char name[48];
        std::snprintf(name, sizeof name, "step_%08llu.phlt", static_cast<unsigned long long>(state.step));
        save_checkpoint(out / "checkpoints" / name, state);
        save_checkpoint(out / "latest.phlt", state);
    };
    train_until<T>(state, data, rc.train.max_steps, [&](const StepStats& s) {
        log.write(s);
        if (rc.train.log_interval && s.step % rc.train.log_interval == 0) {
            std::cerr << "step " << s.step << " loss " << s.loss << '\n';
        }
        if (rc.train.checkpoint_interval && s.step % rc.train.checkpoint_interval == 0) save();
        return true;
    });
    save();
    std::cout << "trained to step " << state.step << "; checkpoint " << (out / "latest.phlt").string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// sample

struct SampleOptions {
    ConfigSource src;
    std::string checkpoint;
    std::vector<std::string> refs;
    std::string prompt;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::optional<double> omega1, omega2;
    bool no_guidance = false;
    bool double_precision = false;
};

void apply_sample_flags(RunConfig& rc, std::optional<std::uint64_t> seed, std::optional<std::size_t> steps,
                        std::optional<double> omega1, std::optional<double> omega2, bool no_guidance)
{
    if (seed) rc.sample.seed = *seed;
    if (steps) rc.sample.steps = *steps;
    if (omega1) rc.sample.omega1 = *omega1;
    if (omega2) rc.sample.omega2 = *omega2;
    if (no_guidance) rc.sample.guidance = false;
}

template <class T>
int run_sample(const SampleOptions& o)
{
    auto rc = resolve(o.src);
    apply_sample_flags(rc, o.seed, o.steps, o.omega1, o.omega2, o.no_guidance);
    const auto bytes = checkpoint_bytes(o.checkpoint);
    const auto state = deserialize_checkpoint<T>(bytes);
    rc.model = state.model;
    rc.train = state.train;
    follow_model_geometry(rc);
    rc.validate();

    std::vector<int> prompt;
    try {
        prompt = vocab::parse(o.prompt);
    } catch (const VocabularyError& e) {
        throw ConfigError(std::string("--prompt: ") + e.what());
    }
    std::vector<Image> refs;
    for (const auto& r : o.refs) {
        if (!fs::is_regular_file(r)) throw ConfigError("reference image '" + r + "' does not exist");
        refs.push_back(read_png(r));
    }

    const auto g = generate(state.params, state.model, rc.sample, prompt, refs);
    const fs::path out(o.out);
    const auto config = rc.to_json();
    write_snapshot(out, config, "sample");
    write_clip_dir(out / "frames", g.clip);
    const json sidecar{{"seed", rc.sample.seed},
                       {"config_hash", config_hash(config)},
                       {"checkpoint_hash", fnv1a_hex(bytes)},
                       {"frames_hash", clip_hash(g.clip)},
                       {"prompt", vocab::render(prompt)},
                       {"refs", o.refs},
                       {"model_evaluations", g.model_evaluations},
                       {"code_version", PHANTOM_CODE_VERSION}};
    std::ofstream(out / "sample.json") << sidecar.dump(2) << '\n';
    std::cout << "wrote " << g.clip.frames << " frames to " << (out / "frames").string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
    ConfigSource src;
    std::string checkpoint;
    std::string out;
    std::size_t count = 200;
    std::uint64_t offset = 1000000;
    std::optional<std::string> mode;
    bool ground_truth = false;
    bool double_precision = false;
};

template <class T>
int run_eval(const EvalOptions& o)
{
    auto rc = resolve(o.src);
    if (o.mode) rc.data.mode = *o.mode;
    std::optional<TrainState<T>> state;
    std::string ck_hash;
    if (!o.ground_truth) {
        const auto bytes = checkpoint_bytes(o.checkpoint);
        ck_hash = fnv1a_hex(bytes);
        state = deserialize_checkpoint<T>(bytes);
        rc.model = state->model;
        rc.train = state->train;
        follow_model_geometry(rc);
    }
    rc.data.offset = o.offset;
    rc.data.size = o.count;
    rc.validate();

    const auto data = rc.data.dataset();
    const SubjectEmbedder embedder(rc.eval.embedder_seed);
    const auto config = rc.to_json();
    auto samples = parallel_map<SampleMetrics>(o.count, [&](std::size_t i) {
        const auto s = data[i];
        VideoClip clip = s.video;
        if (state) {
            SampleConfig sc = rc.sample;
            sc.seed = rc.sample.seed + i;
            clip = generate(state->params, state->model, sc, s.prompt, s.refs).clip;
        }
        char id[32];
        std::snprintf(id, sizeof id, "sample_%06zu", i);
        return evaluate_sample(id, s, clip, embedder, rc.eval.frames_sampled, rc.eval.segment());
    });
    const auto report = build_report(o.count, std::move(samples), config_hash(config));
    const fs::path out(o.out);
    write_snapshot(out, config, "eval", {{"checkpoint_hash", ck_hash}, {"ground_truth", o.ground_truth}});
    write_report(out, report);
    std::cout << report.table();
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
    ConfigSource src;
    std::string out;
    std::size_t elements = 0;
    double tolerance = 1e-4;
    double step = 1e-5;
    std::uint64_t seed = 0;
};

int run_gradcheck(const GradcheckOptions& o)
{
    // The model section overlays the micro model rather than the full-size default.
    const json raw = raw_config(o.src);
    auto rc = RunConfig::parse(raw);
    rc.model = from_json<ModelConfig>(raw.value("model", json::object()), "model", micro_model_config());
    rc.model.validate();
    GradCheckOptions opts;
    opts.step = o.step;
    opts.max_elements_per_param = o.elements;
    opts.seed = o.seed;
    const auto report = model_grad_check(rc.model, o.seed, opts);
    const auto j = grad_check_json(report, o.tolerance);
    if (!o.out.empty()) {
        write_snapshot(o.out, rc.to_json(), "gradcheck");
        std::ofstream(fs::path(o.out) / "gradcheck.json") << j.dump(2) << '\n';
    }
    std::cout << "max relative error " << report.max_relative_error << " over " << report.entries.size()
              << " parameter tensors (" << report.evaluations << " evaluations): "
              << (j["passed"].get<bool>() ? "PASS" : "FAIL") << '\n';
    return j["passed"].get<bool>() ? 0 : kExitRuntime;
}

// ---------------------------------------------------------------------------

int structured_error(const char* kind, const std::string& message, int code)
{
    std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv)
{
    pin_blas_threads();
    CLI::App app{"Subject-to-video diffusion on synthetic sprite clips"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(PHANTOM_CODE_VERSION));

    DatagenOptions dg;
    auto* datagen = app.add_subcommand("datagen", "Render a triplet dataset with a manifest");
    add_config_options(datagen, dg.src);
    datagen->add_option("-o,--out", dg.out, "Output directory")->required();
    datagen->add_option("-n,--count", dg.count, "Number of samples (default: data.size)");
    datagen->add_option("--mode", dg.mode, "in_pair or cross_pair (default: data.mode)");
    datagen->add_option("--seed", dg.seed, "Dataset seed (default: data.seed)");
    datagen->add_option("--offset", dg.offset, "First sample index (default: data.offset)");

    TrainOptions tr;
    auto* train = app.add_subcommand("train", "Train the velocity model");
    add_config_options(train, tr.src);
    train->add_option("-o,--out", tr.out, "Run directory for checkpoints and the log")->required();
    train->add_option("--steps", tr.steps, "Train until this step (default: train.max_steps)");
    train->add_option("--resume", tr.resume, "Checkpoint to continue from");
    train->add_flag("--double", tr.double_precision, "Train in float64");

    SampleOptions sm;
    auto* sample = app.add_subcommand("sample", "Generate a clip from a prompt and reference images");
    add_config_options(sample, sm.src);
    sample->add_option("--checkpoint", sm.checkpoint, "Model checkpoint")->required();
    sample->add_option("--refs", sm.refs, "Reference images (PNG), in prompt order")->required();
    sample->add_option("--prompt", sm.prompt, "Prompt, e.g. \"red square left\"")->required();
    sample->add_option("-o,--out", sm.out, "Output directory")->required();
    sample->add_option("--seed", sm.seed, "Noise seed (default: sample.seed)");
    sample->add_option("--steps", sm.steps, "Euler steps (default: sample.steps)");
    sample->add_option("--omega1", sm.omega1, "Reference guidance weight (default: sample.omega1)");
    sample->add_option("--omega2", sm.omega2, "Text guidance weight (default: sample.omega2)");
    sample->add_flag("--no-guidance", sm.no_guidance, "Single text+image branch per step");
    sample->add_flag("--double", sm.double_precision, "Sample in float64");

    EvalOptions ev;
    auto* eval = app.add_subcommand("eval", "Generate and score held-out samples");
    add_config_options(eval, ev.src);
    eval->add_option("--checkpoint", ev.checkpoint, "Model checkpoint");
    eval->add_option("-o,--out", ev.out, "Report directory")->required();
    eval->add_option("-n,--count", ev.count, "Held-out samples");
    eval->add_option("--offset", ev.offset, "First held-out sample index");
    eval->add_option("--mode", ev.mode, "in_pair or cross_pair (default: data.mode)");
    eval->add_flag("--ground-truth", ev.ground_truth, "Score the dataset videos themselves");
    eval->add_flag("--double", ev.double_precision, "Sample in float64");

    GradcheckOptions gc;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full model's gradients");
    add_config_options(gradcheck, gc.src);
    gradcheck->add_option("-o,--out", gc.out, "Report directory");
    gradcheck->add_option("--elements", gc.elements, "Elements checked per parameter tensor (0 = all)");
    gradcheck->add_option("--tolerance", gc.tolerance, "Pass threshold on the max relative error");
    gradcheck->add_option("--step", gc.step, "Central-difference step");
    gradcheck->add_option("--seed", gc.seed, "Sample and subset seed");

    ConfigSource dump_src;
    auto* config = app.add_subcommand("config", "Config utilities");
    config->require_subcommand(1);
    auto* dump = config->add_subcommand("dump", "Print the resolved config with every default");
    add_config_options(dump, dump_src);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*datagen) return run_datagen(dg);
        if (*train) return tr.double_precision ? run_train<double>(tr) : run_train<float>(tr);
        if (*sample) return sm.double_precision ? run_sample<double>(sm) : run_sample<float>(sm);
        if (*eval) {
            if (!ev.ground_truth && ev.checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --ground-truth");
            return ev.double_precision ? run_eval<double>(ev) : run_eval<float>(ev);
        }
        if (*gradcheck) return run_gradcheck(gc);
        if (*dump) {
            const auto rc = resolve(dump_src);
            rc.validate();
            std::cout << rc.to_json().dump(2) << '\n';
            return 0;
        }
    } catch (const ConfigError& e) {
        return structured_error("config", e.what(), kExitConfig);
    } catch (const Error& e) {
        return structured_error("runtime", e.what(), kExitRuntime);
    } catch (const std::exception& e) {
        return structured_error("runtime", e.what(), kExitRuntime);
    }
    return kExitUsage;
}
