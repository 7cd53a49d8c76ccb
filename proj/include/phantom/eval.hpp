#pragma once

// Metrics over generated clips: subject consistency against the reference,
// commanded-motion accuracy from subject centroids, and background leakage
// from the reference into the video. Subjects are found by palette hue.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phantom/dataforge.hpp"
#include "phantom/encoders.hpp"
#include "phantom/errors.hpp"
#include "phantom/image.hpp"
#include "phantom/palette.hpp"

namespace phantom {

/// min(k, t) frame indices round(i (t-1) / (m-1)); k = 1 picks the middle frame.
inline std::vector<std::size_t> sample_frames_uniform(std::size_t frames, std::size_t k)
{
    if (frames == 0) throw ContractError("cannot sample frames from an empty clip");
    if (k == 0) throw ContractError("frame sample count must be >= 1");
    const std::size_t m = std::min(k, frames);
    if (m == 1) return {(frames - 1) / 2};
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m; ++i) {
        idx.push_back(static_cast<std::size_t>(
            std::lround(static_cast<double>(i) * static_cast<double>(frames - 1) / static_cast<double>(m - 1))));
    }
    return idx;
}

inline std::vector<Image> sample_frames_uniform(const VideoClip& clip, std::size_t k)
{
    std::vector<Image> out;
    for (auto i : sample_frames_uniform(clip.frames, k)) out.push_back(clip.frame(i));
    return out;
}

struct SegmentParams {
    double hue_tolerance = 22.5;
    double min_saturation = 0.5;
    double min_value = 0.5;
    std::size_t min_area = 4;
};

struct Segmentation {
    Mask mask;
    std::size_t area = 0;
    Box box;  // pixel bounds, x1/y1 exclusive; meaningless when empty
    bool empty() const { return area == 0; }
};

/// Largest 4-connected component of pixels within tolerance of the palette
/// hue. Components smaller than min_area count as no subject.
inline Segmentation segment_subject(const Image& frame, double hue, const SegmentParams& params = {})
{
    const std::size_t n = frame.pixels();
    Mask candidate(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const Hsv c = rgb_to_hsv(frame.rgb[3 * i], frame.rgb[3 * i + 1], frame.rgb[3 * i + 2]);
        candidate[i] = c.s >= params.min_saturation && c.v >= params.min_value &&
                       hue_distance(c.h, hue) <= params.hue_tolerance;
    }
    std::vector<int> label(n, -1);
    std::vector<std::size_t> stack;
    std::size_t best_area = 0;
    int best = -1;
    int next = 0;
    for (std::size_t seed = 0; seed < n; ++seed) {
        if (!candidate[seed] || label[seed] >= 0) continue;
        std::size_t area = 0;
        stack.assign(1, seed);
        label[seed] = next;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            ++area;
            const std::size_t y = p / frame.width;
            const std::size_t x = p % frame.width;
            auto visit = [&](std::size_t q) {
                if (candidate[q] && label[q] < 0) {
                    label[q] = next;
                    stack.push_back(q);
                }
            };
            if (x > 0) visit(p - 1);
            if (x + 1 < frame.width) visit(p + 1);
            if (y > 0) visit(p - frame.width);
            if (y + 1 < frame.height) visit(p + frame.width);
        }
        if (area > best_area) {  // strict: the first component in raster order wins ties
            best_area = area;
            best = next;
        }
        ++next;
    }
    Segmentation seg;
    seg.mask.assign(n, 0);
    if (best < 0 || best_area < params.min_area) return seg;
    seg.area = best_area;
    double x0 = 1e300, y0 = 1e300, x1 = -1, y1 = -1;
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] != best) continue;
        seg.mask[i] = 1;
        const double x = static_cast<double>(i % frame.width);
        const double y = static_cast<double>(i / frame.width);
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x + 1);
        y1 = std::max(y1, y + 1);
    }
    seg.box = {x0, y0, x1, y1};
    return seg;
}

inline double mask_iou(const Mask& a, const Mask& b)
{
    if (a.size() != b.size()) throw DimensionError("mask sizes differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] && b[i];
        uni += a[i] || b[i];
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

// ---------------------------------------------------------------------------
// Subject embedding

/// Frozen random conv features of the subject crop, placed on a black
/// canvas of fixed size so position and scale drop out. The response to an
/// all-black canvas is subtracted so that cosine reflects subject content.
class SubjectEmbedder {
public:
    explicit SubjectEmbedder(std::uint64_t seed = 0x5eed, std::size_t canvas = 16)
    {
        cfg_.image_height = canvas;
        cfg_.image_width = canvas;
        cfg_.hidden1 = 32;
        cfg_.hidden2 = 64;
        cfg_.token_dim = 32;
        cfg_.tokens = 2;
        Rng rng(seed);
        weights_ = SemanticEmbedderWeights<double>::make(cfg_, rng, false);
        base_ = raw(Image(canvas, canvas, 0.0f));
    }

    std::size_t canvas() const { return cfg_.image_height; }

    /// Embedding of an image already laid out on the canvas.
    std::vector<double> embed_canvas(const Image& canvas_img) const
    {
        auto v = raw(canvas_img);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= base_[i];
        return v;
    }

    /// Masked bounding-box crop of the subject, letterboxed onto black.
    Image subject_canvas(const Image& frame, const Segmentation& seg) const
    {
        const auto x0 = static_cast<std::size_t>(seg.box.x0);
        const auto y0 = static_cast<std::size_t>(seg.box.y0);
        const auto w = static_cast<std::size_t>(seg.box.x1) - x0;
        const auto h = static_cast<std::size_t>(seg.box.y1) - y0;
        Image c(h, w, 0.0f);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                if (seg.mask[(y0 + y) * frame.width + x0 + x])
                    for (std::size_t k = 0; k < 3; ++k) c.at(y, x, k) = frame.at(y0 + y, x0 + x, k);
        return letterbox(c, canvas(), canvas(), 0.0f);
    }

    std::vector<double> embed_subject(const Image& frame, const Segmentation& seg) const
    {
        return embed_canvas(subject_canvas(frame, seg));
    }

private:
    std::vector<double> raw(const Image& img) const
    {
        NoGradGuard guard;
        auto t = embed_reference_semantic(weights_, cfg_, img);
        return {t.values().begin(), t.values().end()};
    }

    SemanticEmbedderConfig cfg_;
    SemanticEmbedderWeights<double> weights_;
    std::vector<double> base_;
};

// ---------------------------------------------------------------------------
// Metrics

/// Mean over sampled frames of cosine(subject in ref, subject in frame);
/// frames where the subject is not found score -1. A reference without a
/// segmentable subject scores -1 outright.
inline double subject_consistency_score(const Image& ref, const VideoClip& clip, double hue,
                                        const SubjectEmbedder& embedder, std::size_t k = 10,
                                        const SegmentParams& params = {})
{
    const auto ref_seg = segment_subject(ref, hue, params);
    const auto frames = sample_frames_uniform(clip.frames, k);
    if (ref_seg.empty()) return -1.0;
    const auto ref_emb = embedder.embed_subject(ref, ref_seg);
    double total = 0;
    for (auto f : frames) {
        const Image img = clip.frame(f);
        const auto seg = segment_subject(img, hue, params);
        total += seg.empty() ? -1.0 : cosine_similarity(ref_emb, embedder.embed_subject(img, seg));
    }
    return total / static_cast<double>(frames.size());
}

enum class MotionOutcome { Correct, Wrong, Indeterminate };

/// Direction of (dx, dy) in image coordinates (y grows downward); ties
/// between axes go to the horizontal direction.
inline Motion quantize_direction(double dx, double dy)
{
    if (std::fabs(dx) >= std::fabs(dy)) return dx >= 0 ? Motion::Right : Motion::Left;
    return dy >= 0 ? Motion::Down : Motion::Up;
}

struct MotionResult {
    MotionOutcome outcome = MotionOutcome::Indeterminate;
    double dx = 0, dy = 0;
    double score() const { return outcome == MotionOutcome::Correct ? 1.0 : 0.0; }
};

/// Centroid displacement from the first to the last frame with a non-empty
/// mask. Fewer than two such frames, or a displacement under min_travel
/// pixels, is indeterminate.
inline MotionResult motion_following_accuracy(const std::vector<Mask>& masks, std::size_t width, Motion command,
                                              double min_travel = 0.5)
{
    std::vector<std::pair<double, double>> centroids;
    for (const auto& m : masks) {
        double sx = 0, sy = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i]) {
                sx += static_cast<double>(i % width) + 0.5;
                sy += static_cast<double>(i / width) + 0.5;
                ++n;
            }
        if (n) centroids.emplace_back(sx / static_cast<double>(n), sy / static_cast<double>(n));
    }
    MotionResult r;
    if (centroids.size() < 2) return r;
    r.dx = centroids.back().first - centroids.front().first;
    r.dy = centroids.back().second - centroids.front().second;
    if (std::hypot(r.dx, r.dy) < min_travel) return r;
    r.outcome = quantize_direction(r.dx, r.dy) == command ? MotionOutcome::Correct : MotionOutcome::Wrong;
    return r;
}

inline std::vector<Mask> segment_clip(const VideoClip& clip, double hue, const SegmentParams& params = {})
{
    std::vector<Mask> masks;
    for (std::size_t f = 0; f < clip.frames; ++f) masks.push_back(segment_subject(clip.frame(f), hue, params).mask);
    return masks;
}

inline constexpr std::size_t kHistogramBins = 4;

/// Normalised 4x4x4 RGB histogram of the pixels where mask == 0.
inline std::optional<std::vector<double>> background_histogram(const Image& img, const Mask& mask)
{
    std::vector<double> h(kHistogramBins * kHistogramBins * kHistogramBins, 0.0);
    std::size_t n = 0;
    auto bin = [](float v) {
        return std::min<std::size_t>(kHistogramBins - 1,
                                     static_cast<std::size_t>(std::clamp(v, 0.0f, 1.0f) * kHistogramBins));
    };
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        if (!mask.empty() && mask[i]) continue;
        h[(bin(img.rgb[3 * i]) * kHistogramBins + bin(img.rgb[3 * i + 1])) * kHistogramBins + bin(img.rgb[3 * i + 2])] += 1;
        ++n;
    }
    if (n == 0) return std::nullopt;
    for (auto& v : h) v /= static_cast<double>(n);
    return h;
}

inline double histogram_intersection(const std::vector<double>& a, const std::vector<double>& b)
{
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
    return std::clamp(s, 0.0, 1.0);
}

/// Background similarity between the reference and sampled frames of the
/// clip; nullopt when the reference or every sampled frame has no background.
inline std::optional<double> leakage_score(const Image& ref, const Mask& ref_mask, const VideoClip& clip,
                                           const std::vector<Mask>& clip_masks, std::size_t k = 10)
{
    const auto ref_hist = background_histogram(ref, ref_mask);
    if (!ref_hist) return std::nullopt;
    double total = 0;
    std::size_t used = 0;
    for (auto f : sample_frames_uniform(clip.frames, k)) {
        const auto h = background_histogram(clip.frame(f), clip_masks.empty() ? Mask{} : clip_masks.at(f));
        if (!h) continue;
        total += histogram_intersection(*ref_hist, *h);
        ++used;
    }
    if (!used) return std::nullopt;
    return total / static_cast<double>(used);
}

// ---------------------------------------------------------------------------
// Per-sample evaluation and reports

struct SampleMetrics {
    std::string sample_id;
    double subject_consistency = -1.0;
    double motion_accuracy = 0.0;
    std::optional<double> leakage;
    std::size_t motion_indeterminate = 0;
    std::string note;
};

/// Scores a generated clip against its triplet: every subject is segmented by
/// its palette hue, in the reference and in the clip.
inline SampleMetrics evaluate_sample(const std::string& id, const TripletSample& sample, const VideoClip& generated,
                                     const SubjectEmbedder& embedder, std::size_t k = 10,
                                     const SegmentParams& params = {})
{
    SampleMetrics m;
    m.sample_id = id;
    const std::size_t n = sample.subjects.size();
    double consistency = 0, motion = 0, leak = 0;
    std::size_t leak_n = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double hue = palette_hue(sample.subjects[i].color);
        consistency += subject_consistency_score(sample.refs[i], generated, hue, embedder, k, params);
        const auto masks = segment_clip(generated, hue, params);
        const auto mr = motion_following_accuracy(masks, generated.width, sample.subjects[i].motion);
        motion += mr.score();
        m.motion_indeterminate += mr.outcome == MotionOutcome::Indeterminate;
        const auto ref_seg = segment_subject(sample.refs[i], hue, params);
        if (auto l = leakage_score(sample.refs[i], ref_seg.mask, generated, masks, k)) {
            leak += *l;
            ++leak_n;
        }
    }
    m.subject_consistency = consistency / static_cast<double>(n);
    m.motion_accuracy = motion / static_cast<double>(n);
    if (leak_n) m.leakage = leak / static_cast<double>(leak_n);
    else m.note = "leakage indeterminate";
    return m;
}

struct MetricsReport {
    static constexpr int kSchemaVersion = 1;
    std::vector<SampleMetrics> samples;
    double subject_consistency = 0;
    double motion_accuracy = 0;
    std::optional<double> leakage;  // mean over samples with a determinate leakage
    std::size_t leakage_count = 0;
    std::string config_hash;

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["schema_version"] = kSchemaVersion;
        j["config_hash"] = config_hash;
        j["sample_count"] = samples.size();
        j["aggregate"] = {{"subject_consistency", subject_consistency},
                          {"motion_accuracy", motion_accuracy},
                          {"leakage", leakage ? nlohmann::json(*leakage) : nlohmann::json(nullptr)},
                          {"leakage_count", leakage_count}};
        j["samples"] = nlohmann::json::array();
        for (const auto& s : samples) {
            j["samples"].push_back({{"sample_id", s.sample_id},
                                    {"subject_consistency", s.subject_consistency},
                                    {"motion_accuracy", s.motion_accuracy},
                                    {"leakage", s.leakage ? nlohmann::json(*s.leakage) : nlohmann::json(nullptr)},
                                    {"motion_indeterminate", s.motion_indeterminate},
                                    {"note", s.note}});
        }
        return j;
    }

    static MetricsReport from_json(const nlohmann::json& j)
    {
        if (j.at("schema_version").get<int>() != kSchemaVersion) {
            throw IncompatibleVersionError("report schema " + j.at("schema_version").dump());
        }
        MetricsReport r;
        r.config_hash = j.at("config_hash").get<std::string>();
        const auto& a = j.at("aggregate");
        r.subject_consistency = a.at("subject_consistency").get<double>();
        r.motion_accuracy = a.at("motion_accuracy").get<double>();
        if (!a.at("leakage").is_null()) r.leakage = a.at("leakage").get<double>();
        r.leakage_count = a.at("leakage_count").get<std::size_t>();
        for (const auto& s : j.at("samples")) {
            SampleMetrics m;
            m.sample_id = s.at("sample_id").get<std::string>();
            m.subject_consistency = s.at("subject_consistency").get<double>();
            m.motion_accuracy = s.at("motion_accuracy").get<double>();
            if (!s.at("leakage").is_null()) m.leakage = s.at("leakage").get<double>();
            m.motion_indeterminate = s.at("motion_indeterminate").get<std::size_t>();
            m.note = s.at("note").get<std::string>();
            r.samples.push_back(std::move(m));
        }
        return r;
    }

    std::string table() const
    {
        std::ostringstream os;
        os << std::fixed << std::setprecision(4);
        os << std::left << std::setw(16) << "sample" << std::right << std::setw(14) << "consistency"
           << std::setw(10) << "motion" << std::setw(10) << "leakage" << '\n';
        auto leak_str = [](const std::optional<double>& v) {
            if (!v) return std::string("n/a");
            std::ostringstream s;
            s << std::fixed << std::setprecision(4) << *v;
            return s.str();
        };
        for (const auto& s : samples) {
            os << std::left << std::setw(16) << s.sample_id << std::right << std::setw(14) << s.subject_consistency
               << std::setw(10) << s.motion_accuracy << std::setw(10) << leak_str(s.leakage) << '\n';
        }
        os << std::left << std::setw(16) << "mean" << std::right << std::setw(14) << subject_consistency
           << std::setw(10) << motion_accuracy << std::setw(10) << leak_str(leakage) << '\n';
        os << samples.size() << " samples\n";
        return os.str();
    }

    std::string csv() const
    {
        std::ostringstream os;
        os << std::setprecision(17);
        os << "sample_id,subject_consistency,motion_accuracy,leakage\n";
        for (const auto& s : samples) {
            os << s.sample_id << ',' << s.subject_consistency << ',' << s.motion_accuracy << ',';
            if (s.leakage) os << *s.leakage;
            os << '\n';
        }
        return os.str();
    }
};

/// Aggregates are plain means of the per-sample records.
inline MetricsReport build_report(std::size_t expected, std::vector<SampleMetrics> samples, std::string config_hash)
{
    if (samples.size() != expected) {
        throw ContractError("report has " + std::to_string(samples.size()) + " samples, manifest lists " +
                            std::to_string(expected));
    }
    MetricsReport r;
    r.config_hash = std::move(config_hash);
    r.samples = std::move(samples);
    double leak = 0;
    for (const auto& s : r.samples) {
        r.subject_consistency += s.subject_consistency;
        r.motion_accuracy += s.motion_accuracy;
        if (s.leakage) {
            leak += *s.leakage;
            ++r.leakage_count;
        }
    }
    if (!r.samples.empty()) {
        r.subject_consistency /= static_cast<double>(r.samples.size());
        r.motion_accuracy /= static_cast<double>(r.samples.size());
    }
    if (r.leakage_count) r.leakage = leak / static_cast<double>(r.leakage_count);
    return r;
}

inline void write_report(const std::filesystem::path& dir, const MetricsReport& r)
{
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "report.json") << r.to_json().dump(2) << '\n';
    std::ofstream(dir / "report.txt") << r.table();
    std::ofstream(dir / "report.csv") << r.csv();
}

}  // namespace phantom
