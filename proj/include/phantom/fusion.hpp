#pragma once

// Stream assembly: the text stream is prompt features followed by per-reference
// semantic tokens; the visual stream is video latent frames followed by one
// latent frame per reference. SegmentMap records where each part lives.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "phantom/errors.hpp"
#include "phantom/tensor.hpp"

namespace phantom {

inline constexpr std::size_t kMaxReferences = 4;

struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    bool operator==(const Span&) const = default;
};

struct SegmentMap {
    // text stream rows
    std::size_t text_tokens = 0;                  // l1
    std::vector<std::size_t> semantic_per_ref;    // l2 contributed by each reference
    // visual stream frames
    std::size_t video_frames = 0;                 // t
    std::size_t reference_frames = 0;             // n

    std::size_t semantic_tokens() const
    {
        std::size_t s = 0;
        for (auto v : semantic_per_ref) s += v;
        return s;
    }
    std::size_t reference_count() const { return semantic_per_ref.size(); }
    std::size_t text_stream_length() const { return text_tokens + semantic_tokens(); }
    std::size_t visual_stream_frames() const { return video_frames + reference_frames; }

    Span text_span() const { return {0, text_tokens}; }
    Span semantic_span() const { return {text_tokens, text_tokens + semantic_tokens()}; }
    Span semantic_span(std::size_t ref) const
    {
        std::size_t begin = text_tokens;
        for (std::size_t i = 0; i < ref; ++i) begin += semantic_per_ref.at(i);
        return {begin, begin + semantic_per_ref.at(ref)};
    }
    Span video_span() const { return {0, video_frames}; }
    Span reference_span() const { return {video_frames, video_frames + reference_frames}; }
    Span reference_span(std::size_t ref) const
    {
        if (ref >= reference_frames) throw ContractError("reference index out of range");
        return {video_frames + ref, video_frames + ref + 1};
    }

    bool operator==(const SegmentMap&) const = default;
};

template <class T>
struct TextStream {
    Tensor<T> features;  // (l1 + l2) x c
    SegmentMap map;
};

template <class T>
struct VisualStream {
    Tensor<T> features;  // (t + n) x h x w x c_lat
    SegmentMap map;
};

/// Prompt rows followed by each reference's semantic tokens, in reference order.
template <class T>
TextStream<T> merge_text_stream(const Tensor<T>& text, const std::vector<Tensor<T>>& semantic)
{
    if (text.dim() != 2) throw DimensionError("text features must be l1 x c, got " + shape_str(text.shape()));
    if (semantic.size() > kMaxReferences) {
        throw ContractError(std::to_string(semantic.size()) + " references exceed the maximum of 4");
    }
    TextStream<T> stream;
    stream.map.text_tokens = text.size(0);
    std::vector<Tensor<T>> parts{text};
    for (const auto& s : semantic) {
        if (s.dim() != 2 || s.size(1) != text.size(1)) {
            throw DimensionError("semantic tokens " + shape_str(s.shape()) + " do not match text channels " +
                                 std::to_string(text.size(1)));
        }
        stream.map.semantic_per_ref.push_back(s.size(0));
        parts.push_back(s);
    }
    stream.features = parts.size() == 1 ? text : concat(parts, 0);
    return stream;
}

/// Video frames followed by one latent frame per reference, in input order.
template <class T>
VisualStream<T> merge_visual_stream(const Tensor<T>& video, const std::vector<Tensor<T>>& references)
{
    if (video.dim() != 4) throw DimensionError("video latents must be t x h x w x c, got " + shape_str(video.shape()));
    if (references.size() > kMaxReferences) {
        throw ContractError(std::to_string(references.size()) + " references exceed the maximum of 4");
    }
    VisualStream<T> stream;
    stream.map.video_frames = video.size(0);
    std::vector<Tensor<T>> parts{video};
    for (const auto& r : references) {
        Tensor<T> frame = r.dim() == 3 ? reshape(r, {1, r.size(0), r.size(1), r.size(2)}) : r;
        if (frame.dim() != 4 || frame.size(0) != 1 ||
            !std::equal(frame.shape().begin() + 1, frame.shape().end(), video.shape().begin() + 1)) {
            throw DimensionError("reference latent " + shape_str(r.shape()) + " does not match video grid " +
                                 shape_str(video.shape()));
        }
        parts.push_back(frame);
    }
    stream.map.reference_frames = references.size();
    stream.features = parts.size() == 1 ? video : concat(parts, 0);
    return stream;
}

inline void validate_visual_map(const SegmentMap& map, const Shape& features)
{
    if (features.size() != 4 || map.visual_stream_frames() != features[0]) {
        throw ContractError("segment map (" + std::to_string(map.video_frames) + "+" +
                            std::to_string(map.reference_frames) + " frames) does not cover visual stream " +
                            shape_str(features));
    }
}

inline void validate_text_map(const SegmentMap& map, const Shape& features)
{
    if (features.size() != 2 || map.text_stream_length() != features[0]) {
        throw ContractError("segment map (" + std::to_string(map.text_stream_length()) +
                            " rows) does not cover text stream " + shape_str(features));
    }
}

/// (video frames, reference frames); the reference part may have zero frames.
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_visual_stream(const VisualStream<T>& stream)
{
    validate_visual_map(stream.map, stream.features.shape());
    auto parts = split(stream.features, 0, {stream.map.video_frames, stream.map.reference_frames});
    return {parts[0], parts[1]};
}

}  // namespace phantom
