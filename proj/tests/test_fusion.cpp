#include <gtest/gtest.h>

#include "phantom/fusion.hpp"
#include "phantom/rng.hpp"

using namespace phantom;

namespace {

// Rows filled with a tag so their origin is recoverable after merging.
Tensor<double> tagged_rows(std::size_t rows, std::size_t c, double tag)
{
    std::vector<double> v(rows * c);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) v[r * c + j] = tag + static_cast<double>(r) + 0.01 * static_cast<double>(j);
    return Tensor<double>({rows, c}, v);
}

Tensor<double> tagged_frames(std::size_t frames, double tag, std::size_t h = 2, std::size_t w = 2, std::size_t c = 3)
{
    std::vector<double> v(frames * h * w * c);
    const std::size_t per = h * w * c;
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t i = 0; i < per; ++i) v[f * per + i] = tag + static_cast<double>(f) * 1000 + static_cast<double>(i);
    return Tensor<double>({frames, h, w, c}, v);
}

std::vector<double> frame_values(const Tensor<double>& t, std::size_t f)
{
    const std::size_t per = t.numel() / t.size(0);
    return {t.values().begin() + static_cast<long>(f * per), t.values().begin() + static_cast<long>((f + 1) * per)};
}

}  // namespace

TEST(MergeText, ShapesAndSpans)
{
    auto s = merge_text_stream(tagged_rows(4, 8, 0), {tagged_rows(2, 8, 100)});
    EXPECT_EQ(s.features.shape(), (Shape{6, 8}));
    EXPECT_EQ(s.map.text_span(), (Span{0, 4}));
    EXPECT_EQ(s.map.semantic_span(), (Span{4, 6}));
}

TEST(MergeText, NoSemanticTokensIsIdentity)
{
    auto text = tagged_rows(3, 5, 0);
    auto s = merge_text_stream(text, {});
    EXPECT_EQ(s.features.values(), text.values());
    EXPECT_EQ(s.map.semantic_tokens(), 0u);
}

TEST(MergeText, RowsLandAtMappedOffsets)
{
    auto text = tagged_rows(3, 4, 0);
    std::vector<Tensor<double>> refs{tagged_rows(2, 4, 100), tagged_rows(3, 4, 200)};
    auto s = merge_text_stream(text, refs);
    for (std::size_t k = 0; k < refs.size(); ++k) {
        auto span = s.map.semantic_span(k);
        ASSERT_EQ(span.size(), refs[k].size(0));
        for (std::size_t r = 0; r < span.size(); ++r)
            for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(s.features[(span.begin + r) * 4 + j], refs[k][r * 4 + j]);
    }
    for (std::size_t i = 0; i < text.numel(); ++i) EXPECT_EQ(s.features[i], text[i]);
}

TEST(MergeText, Errors)
{
    EXPECT_THROW(merge_text_stream(tagged_rows(2, 4, 0), {tagged_rows(1, 5, 0)}), DimensionError);
    std::vector<Tensor<double>> five(5, tagged_rows(1, 4, 0));
    EXPECT_THROW(merge_text_stream(tagged_rows(2, 4, 0), five), ContractError);
}

TEST(MergeVisual, ReferencesOccupyTheTail)
{
    auto vid = tagged_frames(8, 0);
    auto r0 = tagged_frames(1, 1e6);
    auto r1 = tagged_frames(1, 2e6);
    auto s = merge_visual_stream(vid, {r0, r1});
    EXPECT_EQ(s.features.size(0), 10u);
    EXPECT_EQ(s.map.reference_span(), (Span{8, 10}));
    EXPECT_EQ(frame_values(s.features, 8), frame_values(r0, 0));
    EXPECT_EQ(frame_values(s.features, 9), frame_values(r1, 0));
}

TEST(MergeVisual, ZeroReferencesEqualsVideo)
{
    auto vid = tagged_frames(3, 0);
    auto s = merge_visual_stream(vid, {});
    EXPECT_EQ(s.features.values(), vid.values());
    EXPECT_EQ(s.map.reference_frames, 0u);
}

TEST(MergeVisual, PermutingReferencesPermutesExactlyTheTail)
{
    auto vid = tagged_frames(4, 0);
    auto a = tagged_frames(1, 1e6);
    auto b = tagged_frames(1, 2e6);
    auto ab = merge_visual_stream(vid, {a, b});
    auto ba = merge_visual_stream(vid, {b, a});
    for (std::size_t f = 0; f < 4; ++f) EXPECT_EQ(frame_values(ab.features, f), frame_values(ba.features, f));
    EXPECT_EQ(frame_values(ab.features, 4), frame_values(ba.features, 5));
    EXPECT_EQ(frame_values(ab.features, 5), frame_values(ba.features, 4));
}

TEST(MergeVisual, AcceptsThreeDimensionalReferenceFrames)
{
    auto vid = tagged_frames(2, 0);
    auto ref = reshape(tagged_frames(1, 5e6), {2, 2, 3});
    auto s = merge_visual_stream(vid, {ref});
    EXPECT_EQ(frame_values(s.features, 2), ref.values());
}

TEST(MergeVisual, Errors)
{
    auto vid = tagged_frames(2, 0);
    EXPECT_THROW(merge_visual_stream(vid, {tagged_frames(1, 0, 3, 2, 3)}), DimensionError);
    EXPECT_THROW(merge_visual_stream(vid, {tagged_frames(2, 0)}), DimensionError);
    std::vector<Tensor<double>> five(5, tagged_frames(1, 0));
    EXPECT_THROW(merge_visual_stream(vid, five), ContractError);
}

TEST(SplitVisual, TaggedFramesLandInTheRightParts)
{
    auto vid = tagged_frames(3, 0);
    auto ref = tagged_frames(1, 9e6);
    auto [v, r] = split_visual_stream(merge_visual_stream(vid, {ref}));
    EXPECT_EQ(v.values(), vid.values());
    EXPECT_EQ(r.values(), ref.values());
}

TEST(SplitVisual, NoReferencesGivesEmptyTail)
{
    auto [v, r] = split_visual_stream(merge_visual_stream(tagged_frames(3, 0), {}));
    EXPECT_EQ(v.size(0), 3u);
    EXPECT_EQ(r.size(0), 0u);
}

TEST(SplitVisual, CorruptedMapIsContractError)
{
    auto s = merge_visual_stream(tagged_frames(3, 0), {tagged_frames(1, 0)});
    s.map.reference_frames = 2;
    EXPECT_THROW(split_visual_stream(s), ContractError);
}

TEST(Streams, RandomMergeSplitRoundTripAndSpanPartition)
{
    Rng rng(123);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t l1 = rng.below(6);
        const std::size_t n = rng.below(5);
        const std::size_t t = 1 + rng.below(5);
        const std::size_t c = 1 + rng.below(4);
        std::vector<Tensor<double>> sem, refs;
        for (std::size_t k = 0; k < n; ++k) {
            sem.push_back(tagged_rows(1 + rng.below(3), c, 100.0 * static_cast<double>(k + 1)));
            refs.push_back(tagged_frames(1, 1e6 * static_cast<double>(k + 1), 2, 2, c));
        }
        auto ts = merge_text_stream(tagged_rows(l1, c, 0), sem);
        auto vs = merge_visual_stream(tagged_frames(t, 0, 2, 2, c), refs);

        // Text spans tile [0, l1 + l2) contiguously.
        std::size_t cursor = 0;
        EXPECT_EQ(ts.map.text_span().begin, cursor);
        cursor = ts.map.text_span().end;
        for (std::size_t k = 0; k < n; ++k) {
            EXPECT_EQ(ts.map.semantic_span(k).begin, cursor);
            cursor = ts.map.semantic_span(k).end;
        }
        EXPECT_EQ(cursor, ts.features.size(0));
        validate_text_map(ts.map, ts.features.shape());

        EXPECT_EQ(vs.map.video_span().end, vs.map.reference_span().begin);
        EXPECT_EQ(vs.map.reference_span().end, vs.features.size(0));
        EXPECT_EQ(vs.map.reference_frames, refs.size());

        auto [v, r] = split_visual_stream(vs);
        std::vector<Tensor<double>> both{v, r};
        EXPECT_EQ(concat(both, 0).values(), vs.features.values());
    }
}
