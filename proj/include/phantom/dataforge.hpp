#pragma once

// Synthetic subject-to-video triplets (prompt, reference images, video) built
// from coloured sprites on flat backgrounds, plus the data-pipeline matching
// operators: similarity-band pairing, greedy deduplication and IOU
// calibration of detections.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phantom/errors.hpp"
#include "phantom/image.hpp"
#include "phantom/image_io.hpp"
#include "phantom/palette.hpp"
#include "phantom/rng.hpp"
#include "phantom/vocabulary.hpp"

namespace phantom {

enum class PairMode { InPair, CrossPair };

inline const char* pair_mode_name(PairMode m) { return m == PairMode::InPair ? "in_pair" : "cross_pair"; }

inline PairMode parse_pair_mode(const std::string& s)
{
    if (s == "in_pair") return PairMode::InPair;
    if (s == "cross_pair") return PairMode::CrossPair;
    throw ConfigError("unknown pair mode '" + s + "' (expected in_pair or cross_pair)");
}

struct SpriteSpec {
    SpriteShape shape = SpriteShape::Square;
    std::size_t color = 0;
    double hue = 0.0;    // rendered hue; palette hue unless jittered
    double size = 6.0;   // side of the bounding square, pixels
    Motion motion = Motion::Right;
    double speed = 1.0;  // pixels per frame
    double x0 = 0.0;     // top-left of the bounding square at frame 0
    double y0 = 0.0;

    double x_at(std::size_t f) const
    {
        const double d = speed * static_cast<double>(f);
        return x0 + (motion == Motion::Right ? d : motion == Motion::Left ? -d : 0.0);
    }
    double y_at(std::size_t f) const
    {
        const double d = speed * static_cast<double>(f);
        return y0 + (motion == Motion::Down ? d : motion == Motion::Up ? -d : 0.0);
    }
};

using Mask = std::vector<std::uint8_t>;  // row-major, 1 = subject pixel

/// Whether pixel (px, py)'s centre lies inside the sprite placed at (x, y).
inline bool sprite_covers(const SpriteSpec& s, double x, double y, std::size_t px, std::size_t py)
{
    const double cx = static_cast<double>(px) + 0.5 - x;
    const double cy = static_cast<double>(py) + 0.5 - y;
    if (cx < 0 || cy < 0 || cx >= s.size || cy >= s.size) return false;
    switch (s.shape) {
    case SpriteShape::Square:
        return true;
    case SpriteShape::Circle: {
        const double r = s.size / 2.0;
        return (cx - r) * (cx - r) + (cy - r) * (cy - r) <= r * r;
    }
    case SpriteShape::Triangle: {
        const double half = 0.5 * s.size * (cy / s.size);
        return std::fabs(cx - s.size / 2.0) <= half;
    }
    }
    return false;
}

/// Paints the sprite at (x, y) and returns its coverage mask.
inline Mask draw_sprite(Image& img, const SpriteSpec& s, double x, double y)
{
    if (x < 0 || y < 0 || x + s.size > static_cast<double>(img.width) + 1e-9 ||
        y + s.size > static_cast<double>(img.height) + 1e-9) {
        throw GenerationError("sprite at (" + std::to_string(x) + ", " + std::to_string(y) + ") size " +
                              std::to_string(s.size) + " leaves the " + std::to_string(img.width) + "x" +
                              std::to_string(img.height) + " frame");
    }
    const Rgb col = hsv_to_rgb(s.hue, 1.0, 1.0);
    Mask mask(img.pixels(), 0);
    for (std::size_t py = 0; py < img.height; ++py)
        for (std::size_t px = 0; px < img.width; ++px)
            if (sprite_covers(s, x, y, px, py)) {
                img.at(py, px, 0) = col.r;
                img.at(py, px, 1) = col.g;
                img.at(py, px, 2) = col.b;
                mask[py * img.width + px] = 1;
            }
    return mask;
}

inline Image flat_image(std::size_t h, std::size_t w, std::size_t background)
{
    Image img(h, w);
    const Rgb c = kBackgroundRgb.at(background);
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        img.rgb[3 * i] = c.r;
        img.rgb[3 * i + 1] = c.g;
        img.rgb[3 * i + 2] = c.b;
    }
    return img;
}

// ---------------------------------------------------------------------------
// Prompts

/// Per subject, in order: colour, shape, motion; subjects joined by "and".
inline std::vector<int> compose_prompt(const std::vector<SpriteSpec>& subjects)
{
    if (subjects.size() > 4) throw ContractError("at most 4 subjects per prompt");
    for (std::size_t i = 0; i < subjects.size(); ++i)
        for (std::size_t j = i + 1; j < subjects.size(); ++j)
            if (subjects[i].shape == subjects[j].shape && subjects[i].color == subjects[j].color) {
                throw AmbiguityError("subjects " + std::to_string(i) + " and " + std::to_string(j) + " are both " +
                                     std::string(kColorNames[subjects[i].color]) + " " +
                                     std::string(kShapeNames[static_cast<std::size_t>(subjects[i].shape)]));
            }
    std::vector<int> ids;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        if (i) ids.push_back(vocab::kAnd);
        ids.push_back(vocab::color(subjects[i].color));
        ids.push_back(vocab::shape(subjects[i].shape));
        ids.push_back(vocab::motion(subjects[i].motion));
    }
    return ids;
}

/// Subject descriptors followed by the scene's background word.
inline std::vector<int> compose_scene_prompt(const std::vector<SpriteSpec>& subjects, std::size_t background)
{
    auto ids = compose_prompt(subjects);
    ids.push_back(vocab::background(background));
    return ids;
}

// ---------------------------------------------------------------------------
// Triplets

struct SceneConfig {
    std::size_t frames = 8;
    std::size_t height = 32;
    std::size_t width = 32;
    double sprite_min = 0.25;        // sprite side as a fraction of the shorter frame edge
    double sprite_max = 0.35;
    double travel_min = 0.30;        // total displacement as a fraction of the frame edge
    double travel_max = 0.45;
    double multi_subject_fraction = 0.15;
    std::size_t max_subjects = 2;
    double crop_margin = 1.6;        // in-pair reference crop side relative to sprite size
    double cross_scale_jitter = 0.2;
    double cross_hue_jitter = 5.0;   // degrees

    void validate() const
    {
        if (frames < 2) throw ConfigError("scene needs at least 2 frames");
        if (height < 8 || width < 8) throw ConfigError("scene frames must be at least 8x8");
        if (!(sprite_min > 0 && sprite_min <= sprite_max && sprite_max < 1)) throw ConfigError("bad sprite size range");
        if (!(travel_min >= 0 && travel_min <= travel_max)) throw ConfigError("bad travel range");
        if (sprite_max * (1 + cross_scale_jitter) + travel_max > 1.0) {
            throw ConfigError("sprite size plus travel exceeds the frame");
        }
        if (max_subjects < 1 || max_subjects > 4) throw ConfigError("max_subjects must be in [1, 4]");
        if (!(multi_subject_fraction >= 0 && multi_subject_fraction <= 1)) {
            throw ConfigError("multi_subject_fraction must be in [0, 1]");
        }
    }
};

struct TripletSample {
    std::vector<int> prompt;
    std::vector<Image> refs;               // one per subject, prompt order
    VideoClip video;
    PairMode mode = PairMode::InPair;
    std::size_t background = 0;            // video background
    std::vector<std::size_t> ref_backgrounds;
    std::vector<SpriteSpec> subjects;      // as rendered in the video
    std::vector<SpriteSpec> ref_sprites;   // as rendered in each reference (position in ref coordinates)
    std::vector<std::vector<Mask>> masks;  // [subject][frame], visible pixels only
    std::vector<Mask> ref_masks;
    std::vector<std::size_t> ref_source_frame;  // in-pair: frame the crop came from
    std::vector<std::size_t> ref_crop_x, ref_crop_y;
};

namespace detail {

inline SpriteSpec random_sprite(Rng& rng, const SceneConfig& cfg, std::size_t color)
{
    const double edge = static_cast<double>(std::min(cfg.height, cfg.width));
    SpriteSpec s;
    s.shape = static_cast<SpriteShape>(rng.below(kShapeCount));
    s.color = color;
    s.hue = palette_hue(color);
    s.size = std::round(edge * rng.uniform(cfg.sprite_min, cfg.sprite_max));
    s.motion = static_cast<Motion>(rng.below(kMotionCount));
    const double along = static_cast<double>(s.motion == Motion::Left || s.motion == Motion::Right ? cfg.width
                                                                                                     : cfg.height);
    const double travel = std::round(along * rng.uniform(cfg.travel_min, cfg.travel_max));
    s.speed = travel / static_cast<double>(cfg.frames - 1);
    const double free_x = static_cast<double>(cfg.width) - s.size;
    const double free_y = static_cast<double>(cfg.height) - s.size;
    switch (s.motion) {
    case Motion::Right: s.x0 = std::floor(rng.uniform(0.0, free_x - travel + 1)); s.y0 = std::floor(rng.uniform(0.0, free_y + 1)); break;
    case Motion::Left: s.x0 = travel + std::floor(rng.uniform(0.0, free_x - travel + 1)); s.y0 = std::floor(rng.uniform(0.0, free_y + 1)); break;
    case Motion::Down: s.y0 = std::floor(rng.uniform(0.0, free_y - travel + 1)); s.x0 = std::floor(rng.uniform(0.0, free_x + 1)); break;
    case Motion::Up: s.y0 = travel + std::floor(rng.uniform(0.0, free_y - travel + 1)); s.x0 = std::floor(rng.uniform(0.0, free_x + 1)); break;
    }
    s.x0 = std::min(s.x0, free_x);
    s.y0 = std::min(s.y0, free_y);
    return s;
}

}  // namespace detail

/// Square crop side used for reference images in both modes.
inline std::size_t reference_side(const SpriteSpec& s, const SceneConfig& cfg)
{
    const auto side = static_cast<std::size_t>(std::ceil(s.size * cfg.crop_margin));
    return std::min({side, cfg.height, cfg.width});
}

/// Renders the video for the given subjects; masks[i][f] holds the visible
/// pixels of subject i (later subjects occlude earlier ones).
inline VideoClip render_video(const std::vector<SpriteSpec>& subjects, std::size_t background, const SceneConfig& cfg,
                              std::vector<std::vector<Mask>>* masks = nullptr)
{
    VideoClip clip(cfg.frames, cfg.height, cfg.width);
    if (masks) masks->assign(subjects.size(), std::vector<Mask>(cfg.frames));
    for (std::size_t f = 0; f < cfg.frames; ++f) {
        Image img = flat_image(cfg.height, cfg.width, background);
        std::vector<Mask> fm;
        for (const auto& s : subjects) {
            Mask m = draw_sprite(img, s, s.x_at(f), s.y_at(f));
            for (auto& prev : fm)
                for (std::size_t i = 0; i < m.size(); ++i)
                    if (m[i]) prev[i] = 0;
            fm.push_back(std::move(m));
        }
        clip.set_frame(f, img);
        if (masks)
            for (std::size_t i = 0; i < subjects.size(); ++i) (*masks)[i][f] = std::move(fm[i]);
    }
    return clip;
}

/// One (prompt, references, video) triplet, reproducible from (seed, index).
inline TripletSample gen_sprite_triplet(std::uint64_t seed, std::uint64_t index, const SceneConfig& cfg, PairMode mode)
{
    cfg.validate();
    Rng rng = Rng::derive(seed, index);
    TripletSample s;
    s.mode = mode;
    s.background = rng.below(kBackgroundCount);

    std::size_t count = 1;
    if (cfg.max_subjects > 1 && rng.bernoulli(cfg.multi_subject_fraction)) count = 2 + rng.below(cfg.max_subjects - 1);
    std::vector<std::size_t> colors(kColorCount);
    std::iota(colors.begin(), colors.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {  // partial Fisher-Yates keeps colours distinct
        std::swap(colors[i], colors[i + rng.below(kColorCount - i)]);
        s.subjects.push_back(detail::random_sprite(rng, cfg, colors[i]));
    }
    s.prompt = compose_scene_prompt(s.subjects, s.background);
    s.video = render_video(s.subjects, s.background, cfg, &s.masks);

    for (const auto& sub : s.subjects) {
        const std::size_t side = reference_side(sub, cfg);
        if (mode == PairMode::InPair) {
            const std::size_t f = rng.below(cfg.frames);
            const double cx = sub.x_at(f) + sub.size / 2.0;
            const double cy = sub.y_at(f) + sub.size / 2.0;
            const auto clampi = [](double v, std::size_t hi) {
                return static_cast<std::size_t>(std::clamp(std::round(v), 0.0, static_cast<double>(hi)));
            };
            const std::size_t x = clampi(cx - side / 2.0, cfg.width - side);
            const std::size_t y = clampi(cy - side / 2.0, cfg.height - side);
            s.refs.push_back(crop(s.video.frame(f), y, x, side, side));
            Mask m(side * side, 0);
            SpriteSpec local = sub;
            local.x0 = sub.x_at(f) - static_cast<double>(x);
            local.y0 = sub.y_at(f) - static_cast<double>(y);
            local.speed = 0;
            for (std::size_t py = 0; py < side; ++py)
                for (std::size_t px = 0; px < side; ++px) m[py * side + px] = sprite_covers(local, local.x0, local.y0, px, py);
            s.ref_masks.push_back(std::move(m));
            s.ref_sprites.push_back(local);
            s.ref_backgrounds.push_back(s.background);
            s.ref_source_frame.push_back(f);
            s.ref_crop_x.push_back(x);
            s.ref_crop_y.push_back(y);
        } else {
            std::size_t bg = rng.below(kBackgroundCount - 1);
            if (bg >= s.background) ++bg;
            SpriteSpec local = sub;
            local.speed = 0;
            local.hue = sub.hue + rng.uniform(-cfg.cross_hue_jitter, cfg.cross_hue_jitter);
            local.size = std::clamp(std::round(sub.size * rng.uniform(1.0 - cfg.cross_scale_jitter,
                                                                      1.0 + cfg.cross_scale_jitter)),
                                    2.0, static_cast<double>(side));
            const double free = static_cast<double>(side) - local.size;
            local.x0 = std::floor(rng.uniform(0.0, free + 1));
            local.y0 = std::floor(rng.uniform(0.0, free + 1));
            local.x0 = std::min(local.x0, free);
            local.y0 = std::min(local.y0, free);
            Image ref = flat_image(side, side, bg);
            s.ref_masks.push_back(draw_sprite(ref, local, local.x0, local.y0));
            s.refs.push_back(std::move(ref));
            s.ref_sprites.push_back(local);
            s.ref_backgrounds.push_back(bg);
            s.ref_source_frame.push_back(0);
            s.ref_crop_x.push_back(0);
            s.ref_crop_y.push_back(0);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Manifest export

inline nlohmann::json sprite_json(const SpriteSpec& s)
{
    return {{"shape", kShapeNames[static_cast<std::size_t>(s.shape)]},
            {"color", kColorNames[s.color]},
            {"hue", s.hue},
            {"size", s.size},
            {"motion", kMotionNames[static_cast<std::size_t>(s.motion)]},
            {"speed", s.speed},
            {"x0", s.x0},
            {"y0", s.y0}};
}

/// Writes media for one sample under root/<id>/ and returns its manifest record.
inline nlohmann::json export_sample(const std::filesystem::path& root, const std::string& id, const TripletSample& s)
{
    namespace fs = std::filesystem;
    const fs::path dir = root / id;
    fs::create_directories(dir);
    write_clip_dir(dir / "video", s.video);
    nlohmann::json refs = nlohmann::json::array();
    for (std::size_t i = 0; i < s.refs.size(); ++i) {
        const auto name = "ref_" + std::to_string(i) + ".png";
        write_png(dir / name, s.refs[i]);
        refs.push_back((fs::path(id) / name).string());
    }
    nlohmann::json gt;
    gt["background"] = kBackgroundNames[s.background];
    gt["subjects"] = nlohmann::json::array();
    for (const auto& sub : s.subjects) {
        auto j = sprite_json(sub);
        nlohmann::json traj = nlohmann::json::array();
        for (std::size_t f = 0; f < s.video.frames; ++f) traj.push_back({sub.x_at(f), sub.y_at(f)});
        j["trajectory"] = traj;
        gt["subjects"].push_back(j);
    }
    gt["references"] = nlohmann::json::array();
    for (std::size_t i = 0; i < s.refs.size(); ++i) {
        auto j = sprite_json(s.ref_sprites[i]);
        j["background"] = kBackgroundNames[s.ref_backgrounds[i]];
        gt["references"].push_back(j);
    }
    std::ofstream(dir / "truth.json") << gt.dump(2) << '\n';
    return {{"sample_id", id},
            {"mode", pair_mode_name(s.mode)},
            {"prompt_ids", s.prompt},
            {"prompt", vocab::render(s.prompt)},
            {"ref_paths", refs},
            {"video_path", (fs::path(id) / "video").string()},
            {"ground_truth_path", (fs::path(id) / "truth.json").string()}};
}

// ---------------------------------------------------------------------------
// Matching operators

struct PairCandidate {
    std::size_t a = 0;
    std::size_t b = 0;
    double score = 0.0;
    bool operator==(const PairCandidate&) const = default;
};

/// Keeps candidates strictly inside (s_low, s_high), in input order. Scores
/// near s_high suggest the same image; near s_low, different subjects.
inline std::vector<PairCandidate> cross_pair_match(const std::vector<PairCandidate>& candidates, double s_low,
                                                   double s_high)
{
    if (!(s_low < s_high)) {
        throw ConfigError("pairing thresholds need s_low < s_high, got " + std::to_string(s_low) + " and " +
                          std::to_string(s_high));
    }
    std::vector<PairCandidate> out;
    std::copy_if(candidates.begin(), candidates.end(), std::back_inserter(out),
                 [&](const PairCandidate& p) { return p.score > s_low && p.score < s_high; });
    return out;
}

/// Greedy pass in input order: index i survives unless sim(i, j) >= threshold
/// for an already retained j. Returns surviving indices.
inline std::vector<std::size_t> dedup_by_similarity(std::size_t count,
                                                    const std::function<double(std::size_t, std::size_t)>& sim,
                                                    double threshold)
{
    if (!(threshold > 0 && threshold <= 1)) throw ConfigError("dedup threshold must be in (0, 1]");
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < count; ++i) {
        const bool dup = std::any_of(kept.begin(), kept.end(), [&](std::size_t j) { return sim(i, j) >= threshold; });
        if (!dup) kept.push_back(i);
    }
    return kept;
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size()) throw DimensionError("cosine of vectors with different lengths");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return na == nb ? 1.0 : 0.0;
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

using ImageEmbedder = std::function<std::vector<double>(const Image&)>;

/// Representative subset of images under cosine similarity of their embeddings.
inline std::vector<std::size_t> dedup_images(const std::vector<Image>& images, const ImageEmbedder& embed,
                                             double threshold)
{
    std::vector<std::vector<double>> emb;
    emb.reserve(images.size());
    for (const auto& img : images) emb.push_back(embed(img));
    return dedup_by_similarity(images.size(), [&](std::size_t i, std::size_t j) { return cosine_similarity(emb[i], emb[j]); },
                               threshold);
}

struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double area() const { return (x1 - x0) * (y1 - y0); }
    bool valid() const { return x0 < x1 && y0 < y1; }
    bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b)
{
    if (!a.valid() || !b.valid()) throw ContractError("iou of a degenerate box");
    const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    if (w <= 0 || h <= 0) return 0.0;
    const double inter = w * h;
    return inter / (a.area() + b.area() - inter);
}

struct BoxMatch {
    std::size_t detection = 0;
    std::size_t caption = 0;
    double iou = 0.0;
    bool operator==(const BoxMatch&) const = default;
};

/// Greedy one-to-one matching by descending IOU (ties: lower detection index,
/// then lower caption index); pairs with IOU below iou_min stay unmatched.
inline std::vector<BoxMatch> calibrate_detections(const std::vector<Box>& detections, const std::vector<Box>& captions,
                                                  double iou_min)
{
    if (!(iou_min > 0 && iou_min <= 1)) throw ConfigError("iou_min must be in (0, 1]");
    std::vector<BoxMatch> all;
    for (std::size_t i = 0; i < detections.size(); ++i)
        for (std::size_t j = 0; j < captions.size(); ++j) {
            const double v = iou(detections[i], captions[j]);
            if (v >= iou_min) all.push_back({i, j, v});
        }
    std::stable_sort(all.begin(), all.end(), [](const BoxMatch& a, const BoxMatch& b) { return a.iou > b.iou; });
    std::vector<bool> used_d(detections.size()), used_c(captions.size());
    std::vector<BoxMatch> out;
    for (const auto& m : all) {
        if (used_d[m.detection] || used_c[m.caption]) continue;
        used_d[m.detection] = used_c[m.caption] = true;
        out.push_back(m);
    }
    return out;
}

}  // namespace phantom
