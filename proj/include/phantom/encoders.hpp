#pragma once

// Desk-scale stand-ins for the frozen input head:
//  - a lossless space-to-depth video codec (the latent path shared by video
//    frames and reference images),
//  - a frozen random strided-conv embedder producing semantic tokens for
//    each reference image,
//  - a learned token table with positional rows for prompts.

#include <cstddef>
#include <string>
#include <vector>

#include "phantom/errors.hpp"
#include "phantom/image.hpp"
#include "phantom/layers.hpp"
#include "phantom/rng.hpp"
#include "phantom/tensor.hpp"
#include "phantom/vocabulary.hpp"

namespace phantom {

enum class Provenance { Video, Reference };

/// f x h x w x c_lat latent frames, c_lat = 3 p^2.
template <class T>
struct LatentFrameGrid {
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<T> data;
    Provenance provenance = Provenance::Video;

    Tensor<T> tensor() const { return Tensor<T>({frames, height, width, channels}, data); }
};

namespace detail {

// HWC block -> (H/p)(W/p) x (p p C), channel index (dy * p + dx) * C + c.
template <class T, class Src>
void space_to_depth(const Src* src, std::size_t H, std::size_t W, std::size_t C, std::size_t p, T* dst)
{
    const std::size_t h = H / p;
    const std::size_t w = W / p;
    const std::size_t depth = p * p * C;
    for (std::size_t by = 0; by < h; ++by)
        for (std::size_t bx = 0; bx < w; ++bx)
            for (std::size_t dy = 0; dy < p; ++dy)
                for (std::size_t dx = 0; dx < p; ++dx)
                    for (std::size_t c = 0; c < C; ++c)
                        dst[(by * w + bx) * depth + (dy * p + dx) * C + c] =
                            static_cast<T>(src[((by * p + dy) * W + bx * p + dx) * C + c]);
}

template <class T, class Dst>
void depth_to_space(const T* src, std::size_t h, std::size_t w, std::size_t C, std::size_t p, Dst* dst)
{
    const std::size_t W = w * p;
    const std::size_t depth = p * p * C;
    for (std::size_t by = 0; by < h; ++by)
        for (std::size_t bx = 0; bx < w; ++bx)
            for (std::size_t dy = 0; dy < p; ++dy)
                for (std::size_t dx = 0; dx < p; ++dx)
                    for (std::size_t c = 0; c < C; ++c)
                        dst[((by * p + dy) * W + bx * p + dx) * C + c] =
                            static_cast<Dst>(src[(by * w + bx) * depth + (dy * p + dx) * C + c]);
}

}  // namespace detail

template <class T>
LatentFrameGrid<T> encode_video(const VideoClip& clip, std::size_t patch)
{
    if (patch == 0 || clip.height % patch || clip.width % patch) {
        throw DimensionError("frame size " + std::to_string(clip.height) + "x" + std::to_string(clip.width) +
                             " not divisible by patch " + std::to_string(patch));
    }
    if (clip.frames == 0) throw DimensionError("empty clip");
    LatentFrameGrid<T> grid;
    grid.frames = clip.frames;
    grid.height = clip.height / patch;
    grid.width = clip.width / patch;
    grid.channels = 3 * patch * patch;
    grid.provenance = Provenance::Video;
    grid.data.resize(clip.data.size());
    const std::size_t per_frame = clip.frame_size();
    for (std::size_t f = 0; f < clip.frames; ++f) {
        detail::space_to_depth(clip.data.data() + f * per_frame, clip.height, clip.width, 3, patch,
                               grid.data.data() + f * per_frame);
    }
    return grid;
}

/// Single-frame latent for a preprocessed reference image.
template <class T>
LatentFrameGrid<T> encode_reference(const ReferenceImage& img, std::size_t patch)
{
    VideoClip one(1, img.height, img.width);
    one.set_frame(0, img);
    auto grid = encode_video<T>(one, patch);
    grid.provenance = Provenance::Reference;
    return grid;
}

/// Exact inverse of encode_video for in-range values; the emitted clip is
/// clamped to [0, 1].
template <class T>
VideoClip decode_video(const LatentFrameGrid<T>& grid, std::size_t patch)
{
    if (grid.channels != 3 * patch * patch) {
        throw DimensionError("latent has " + std::to_string(grid.channels) + " channels, patch " +
                             std::to_string(patch) + " needs " + std::to_string(3 * patch * patch));
    }
    if (grid.data.size() != grid.frames * grid.height * grid.width * grid.channels) {
        throw DimensionError("latent data length does not match its grid");
    }
    VideoClip clip(grid.frames, grid.height * patch, grid.width * patch);
    const std::size_t per_frame = clip.frame_size();
    for (std::size_t f = 0; f < grid.frames; ++f) {
        detail::depth_to_space(grid.data.data() + f * per_frame, grid.height, grid.width, 3, patch,
                               clip.data.data() + f * per_frame);
    }
    for (auto& v : clip.data) v = std::clamp(v, 0.0f, 1.0f);
    return clip;
}

// ---------------------------------------------------------------------------
// Semantic embedder

struct SemanticEmbedderConfig {
    std::size_t image_height = 32;
    std::size_t image_width = 32;
    std::size_t patch1 = 4;
    std::size_t patch2 = 2;
    std::size_t hidden1 = 32;
    std::size_t hidden2 = 64;
    std::size_t token_dim = 32;
    std::size_t tokens = 4;

    void validate() const
    {
        const std::size_t stride = patch1 * patch2;
        if (patch1 == 0 || patch2 == 0 || image_height % stride || image_width % stride) {
            throw ConfigError("semantic embedder input " + std::to_string(image_height) + "x" +
                              std::to_string(image_width) + " not divisible by total stride " +
                              std::to_string(stride));
        }
        if (tokens == 0 || token_dim == 0 || hidden1 == 0 || hidden2 == 0) {
            throw ConfigError("semantic embedder widths must be positive");
        }
    }
};

template <class T>
struct SemanticEmbedderWeights {
    Linear<T> conv1;  // (patch1^2 * 3) -> hidden1, applied per patch
    Linear<T> conv2;  // (patch2^2 * hidden1) -> hidden2
    Linear<T> head;   // hidden2 -> tokens * token_dim

    static SemanticEmbedderWeights make(const SemanticEmbedderConfig& cfg, Rng& rng, bool trainable = false)
    {
        cfg.validate();
        SemanticEmbedderWeights w;
        w.conv1 = make_linear<T>(cfg.patch1 * cfg.patch1 * 3, cfg.hidden1, rng, 2.0);
        w.conv2 = make_linear<T>(cfg.patch2 * cfg.patch2 * cfg.hidden1, cfg.hidden2, rng, 2.0);
        w.head = make_linear<T>(cfg.hidden2, cfg.tokens * cfg.token_dim, rng, 1.0);
        // Random biases give the frozen features a non-trivial response to flat inputs.
        for (auto* l : {&w.conv1, &w.conv2, &w.head}) l->bias = normal_tensor<T>({l->out_features()}, 0.1, rng);
        w.set_trainable(trainable);
        return w;
    }

    void set_trainable(bool flag)
    {
        visit("", [flag](const std::string&, Tensor<T>& t) { t.set_requires_grad(flag); });
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        conv1.visit(prefix + "conv1", f);
        conv2.visit(prefix + "conv2", f);
        head.visit(prefix + "head", f);
    }
};

/// tokens x token_dim semantic features for a preprocessed reference image.
template <class T>
Tensor<T> embed_reference_semantic(const SemanticEmbedderWeights<T>& w, const SemanticEmbedderConfig& cfg,
                                   const ReferenceImage& img)
{
    if (img.height != cfg.image_height || img.width != cfg.image_width) {
        throw DimensionError("semantic embedder expects " + std::to_string(cfg.image_height) + "x" +
                             std::to_string(cfg.image_width) + " input, got " + std::to_string(img.height) + "x" +
                             std::to_string(img.width));
    }
    const std::size_t h1 = img.height / cfg.patch1;
    const std::size_t w1 = img.width / cfg.patch1;
    std::vector<T> patches(img.rgb.size());
    detail::space_to_depth(img.rgb.data(), img.height, img.width, 3, cfg.patch1, patches.data());
    auto x = Tensor<T>({h1 * w1, cfg.patch1 * cfg.patch1 * 3}, std::move(patches));
    x = gelu(w.conv1(x));

    const std::size_t p = cfg.patch2;
    const std::size_t h2 = h1 / p;
    const std::size_t w2 = w1 / p;
    x = reshape(x, {h2, p, w2, p, cfg.hidden1});
    x = permute(x, {0, 2, 1, 3, 4});
    x = reshape(x, {h2 * w2, p * p * cfg.hidden1});
    x = gelu(w.conv2(x));

    x = mean(x, 0);
    x = w.head(x);
    return reshape(x, {cfg.tokens, cfg.token_dim});
}

// ---------------------------------------------------------------------------
// Text embedder

template <class T>
struct TextEmbedderWeights {
    Tensor<T> table;      // vocabulary x c
    Tensor<T> positions;  // l1_max x c

    static TextEmbedderWeights make(std::size_t vocab_size, std::size_t max_len, std::size_t channels, Rng& rng)
    {
        TextEmbedderWeights w;
        w.table = normal_tensor<T>({vocab_size, channels}, 1.0, rng);
        w.positions = normal_tensor<T>({max_len, channels}, 0.1, rng);
        return w;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        f(prefix + "table", table);
        f(prefix + "positions", positions);
    }
};

/// Row i = table[ids[i]] + positions[i]. An empty prompt gives a 0 x c tensor.
template <class T>
Tensor<T> embed_text(const TextEmbedderWeights<T>& w, const std::vector<int>& ids)
{
    const std::size_t vocab_size = w.table.size(0);
    const std::size_t channels = w.table.size(1);
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
            throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                                  std::to_string(vocab_size));
        }
    }
    if (ids.size() > w.positions.size(0)) {
        throw ContractError("prompt of " + std::to_string(ids.size()) + " tokens exceeds maximum " +
                            std::to_string(w.positions.size(0)));
    }
    if (ids.empty()) return Tensor<T>::zeros({0, channels});
    auto rows = matmul(one_hot<T>(ids, vocab_size), w.table);
    return add(rows, slice(w.positions, 0, 0, ids.size()));
}

}  // namespace phantom
