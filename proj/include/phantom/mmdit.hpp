#pragma once

// Dual-stream transformer with windowed joint attention and dynamic
// reference injection.
//
// Video tokens are partitioned into fixed windows of W tokens. Every window's
// attention group is its video tokens followed by all reference-latent
// tokens, all prompt tokens and all semantic reference tokens. Attention runs
// independently per group; the injected tokens' per-window outputs are then
// averaged back to one row each, so every block maps streams to streams of
// the same length.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "phantom/encoders.hpp"
#include "phantom/errors.hpp"
#include "phantom/fusion.hpp"
#include "phantom/layers.hpp"
#include "phantom/rng.hpp"
#include "phantom/tensor.hpp"
#include "phantom/vocabulary.hpp"

namespace phantom {

struct ModelConfig {
    std::size_t channels = 64;
    std::size_t heads = 4;
    std::size_t depth = 4;
    std::size_t window = 9;
    std::size_t frames = 8;
    std::size_t grid_height = 8;
    std::size_t grid_width = 8;
    std::size_t patch = 4;
    std::size_t text_max = 16;
    std::size_t semantic_tokens = 4;
    std::size_t timestep_dim = 64;
    std::size_t mlp_ratio = 4;
    std::size_t vocab_size = vocab::kSize;
    double rope_base = 100.0;
    double diffusion_steps = 1000.0;  // continuous t is scaled by this before the sinusoid
    double norm_eps = 1e-6;
    std::size_t semantic_hidden1 = 32;
    std::size_t semantic_hidden2 = 64;
    std::size_t semantic_dim = 32;
    bool train_semantic_encoder = false;
    bool zero_init_gates = true;
    std::uint64_t init_seed = 0;

    std::size_t latent_channels() const { return 3 * patch * patch; }
    std::size_t head_dim() const { return heads ? channels / heads : 0; }
    std::size_t frame_height() const { return grid_height * patch; }
    std::size_t frame_width() const { return grid_width * patch; }

    SemanticEmbedderConfig semantic_config() const
    {
        SemanticEmbedderConfig s;
        s.image_height = frame_height();
        s.image_width = frame_width();
        s.hidden1 = semantic_hidden1;
        s.hidden2 = semantic_hidden2;
        s.token_dim = semantic_dim;
        s.tokens = semantic_tokens;
        return s;
    }

    void validate() const
    {
        if (channels == 0 || heads == 0 || channels % heads) {
            throw ConfigError("channels (" + std::to_string(channels) + ") must be a positive multiple of heads (" +
                              std::to_string(heads) + ")");
        }
        if (window == 0) throw ConfigError("window size must be >= 1");
        if (frames == 0 || grid_height == 0 || grid_width == 0 || patch == 0) {
            throw ConfigError("latent grid and patch size must be positive");
        }
        if (timestep_dim == 0 || timestep_dim % 2) throw ConfigError("timestep_dim must be positive and even");
        if (head_dim() < 6 || head_dim() % 2) {
            throw ConfigError("head dim " + std::to_string(head_dim()) +
                              " cannot carry 3-axis rotary pairs (needs an even value >= 6)");
        }
        semantic_config().validate();
    }
};

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct StreamWeights {
    Linear<T> modulation;  // c -> 6c: shift/scale/gate for attention and MLP sublayers
    Linear<T> qkv;
    Linear<T> out;
    Linear<T> mlp_in;
    Linear<T> mlp_out;

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        modulation.visit(prefix + ".modulation", f);
        qkv.visit(prefix + ".qkv", f);
        out.visit(prefix + ".out", f);
        mlp_in.visit(prefix + ".mlp_in", f);
        mlp_out.visit(prefix + ".mlp_out", f);
    }
};

template <class T>
struct BlockWeights {
    StreamWeights<T> visual;
    StreamWeights<T> text;
};

template <class T>
struct ModelParameters {
    SemanticEmbedderWeights<T> semantic;
    TextEmbedderWeights<T> text;
    Linear<T> semantic_proj;          // semantic_dim -> c
    Tensor<T> reference_slots;        // kMaxReferences x c, added to each reference's semantic tokens
    Tensor<T> null_text;              // 1 x c
    Tensor<T> null_semantic;          // semantic_tokens x c
    Tensor<T> null_reference_frame;   // c_lat, broadcast over the latent grid
    Linear<T> patch_in;
    Linear<T> time_in;
    Linear<T> time_out;
    std::vector<BlockWeights<T>> blocks;
    Linear<T> final_modulation;       // c -> 2c
    Linear<T> patch_out;              // c -> c_lat

    static ModelParameters init(const ModelConfig& cfg)
    {
        cfg.validate();
        Rng rng(cfg.init_seed);
        const std::size_t c = cfg.channels;
        const double gate_gain = cfg.zero_init_gates ? 0.0 : 0.5;
        ModelParameters p;
        p.semantic = SemanticEmbedderWeights<T>::make(cfg.semantic_config(), rng, cfg.train_semantic_encoder);
        p.text = TextEmbedderWeights<T>::make(cfg.vocab_size, cfg.text_max, c, rng);
        p.semantic_proj = make_linear<T>(cfg.semantic_dim, c, rng);
        p.reference_slots = normal_tensor<T>({kMaxReferences, c}, 0.1, rng);
        p.null_text = normal_tensor<T>({1, c}, 1.0, rng);
        p.null_semantic = normal_tensor<T>({cfg.semantic_tokens, c}, 1.0, rng);
        p.null_reference_frame = normal_tensor<T>({cfg.latent_channels()}, 0.1, rng);
        p.patch_in = make_linear<T>(cfg.latent_channels(), c, rng);
        p.time_in = make_linear<T>(cfg.timestep_dim, c, rng);
        p.time_out = make_linear<T>(c, c, rng);
        for (std::size_t b = 0; b < cfg.depth; ++b) {
            BlockWeights<T> blk;
            for (auto* s : {&blk.visual, &blk.text}) {
                s->modulation = make_linear<T>(c, 6 * c, rng, gate_gain);
                s->qkv = make_linear<T>(c, 3 * c, rng);
                s->out = make_linear<T>(c, c, rng);
                s->mlp_in = make_linear<T>(c, cfg.mlp_ratio * c, rng);
                s->mlp_out = make_linear<T>(cfg.mlp_ratio * c, c, rng);
                if (!cfg.zero_init_gates) {
                    s->modulation.bias = normal_tensor<T>({6 * c}, 0.5, rng);
                }
            }
            p.blocks.push_back(std::move(blk));
        }
        p.final_modulation = make_linear<T>(c, 2 * c, rng, gate_gain);
        p.patch_out = make_linear<T>(c, cfg.latent_channels(), rng, cfg.zero_init_gates ? 0.0 : 1.0);
        return p;
    }

    /// f(name, tensor) over every tensor in a fixed order.
    template <class F>
    void visit(F&& f)
    {
        semantic.visit("semantic.", f);
        text.visit("text.", f);
        semantic_proj.visit("semantic_proj", f);
        f("reference_slots", reference_slots);
        f("null_text", null_text);
        f("null_semantic", null_semantic);
        f("null_reference_frame", null_reference_frame);
        patch_in.visit("patch_in", f);
        time_in.visit("time_in", f);
        time_out.visit("time_out", f);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            blocks[b].visual.visit("blocks." + std::to_string(b) + ".visual", f);
            blocks[b].text.visit("blocks." + std::to_string(b) + ".text", f);
        }
        final_modulation.visit("final_modulation", f);
        patch_out.visit("patch_out", f);
    }

    std::vector<std::pair<std::string, Tensor<T>>> named()
    {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        visit([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
        return out;
    }

    /// Tensors the optimizer updates (the frozen embedder is excluded).
    std::vector<std::pair<std::string, Tensor<T>>> trainable()
    {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        visit([&](const std::string& name, Tensor<T>& t) {
            if (t.requires_grad()) out.emplace_back(name, t);
        });
        return out;
    }

    std::size_t parameter_count()
    {
        std::size_t n = 0;
        visit([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }
};

// ---------------------------------------------------------------------------
// Tokenisation

struct Position3 {
    std::size_t frame = 0;
    std::size_t row = 0;
    std::size_t col = 0;
    bool operator==(const Position3&) const = default;
};

template <class T>
struct PatchTokens {
    Tensor<T> tokens;  // (F h w) x c
    std::vector<Position3> positions;
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
};

/// Frame-major, then row, then column. Reference frames continue the frame
/// index after the video frames.
inline std::vector<Position3> raster_positions(std::size_t frames, std::size_t height, std::size_t width)
{
    std::vector<Position3> pos;
    pos.reserve(frames * height * width);
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t r = 0; r < height; ++r)
            for (std::size_t c = 0; c < width; ++c) pos.push_back({f, r, c});
    return pos;
}

template <class T>
PatchTokens<T> patchify(const Tensor<T>& grid, const Linear<T>& projection)
{
    if (grid.dim() != 4) throw DimensionError("patchify expects F x h x w x c_lat, got " + shape_str(grid.shape()));
    if (grid.size(3) != projection.in_features()) {
        throw DimensionError("latent channels " + std::to_string(grid.size(3)) + " do not match projection input " +
                             std::to_string(projection.in_features()));
    }
    PatchTokens<T> out;
    out.frames = grid.size(0);
    out.height = grid.size(1);
    out.width = grid.size(2);
    out.tokens = projection(reshape(grid, {out.frames * out.height * out.width, grid.size(3)}));
    out.positions = raster_positions(out.frames, out.height, out.width);
    return out;
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t frames, std::size_t height, std::size_t width,
                     const Linear<T>& projection)
{
    if (tokens.dim() != 2 || tokens.size(0) != frames * height * width) {
        throw DimensionError("unpatchify token count mismatch " + shape_str(tokens.shape()));
    }
    auto lat = projection(tokens);
    return reshape(lat, {frames, height, width, projection.out_features()});
}

// ---------------------------------------------------------------------------
// Rotary position encoding over (frame, row, col)

template <class T>
struct RopeTables {
    Tensor<T> cos;     // N x c
    Tensor<T> sin;     // N x c
    Tensor<T> rotate;  // c x c, maps each pair (a, b) to (-b, a)
};

/// Pairs per axis for a head dimension; every head rotates its first
/// 6 * pairs dims (frame, row, col blocks) and leaves the rest untouched.
inline std::size_t rope_pairs_per_axis(std::size_t head_dim)
{
    if (head_dim < 6 || head_dim % 2) {
        throw ConfigError("head dim " + std::to_string(head_dim) + " cannot carry 3-axis rotary pairs");
    }
    return head_dim / 6;
}

template <class T>
RopeTables<T> rope_tables(const std::vector<Position3>& positions, std::size_t heads, std::size_t head_dim,
                          double base)
{
    const std::size_t pairs = rope_pairs_per_axis(head_dim);
    const std::size_t c = heads * head_dim;
    const std::size_t n = positions.size();
    std::vector<T> cs(n * c, T(1));
    std::vector<T> sn(n * c, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t pos[3] = {positions[i].frame, positions[i].row, positions[i].col};
        for (std::size_t axis = 0; axis < 3; ++axis) {
            for (std::size_t j = 0; j < pairs; ++j) {
                const double freq = std::pow(base, -static_cast<double>(j) / static_cast<double>(pairs));
                const double angle = static_cast<double>(pos[axis]) * freq;
                const T ca = static_cast<T>(std::cos(angle));
                const T sa = static_cast<T>(std::sin(angle));
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t d = h * head_dim + axis * 2 * pairs + 2 * j;
                    cs[i * c + d] = ca;
                    cs[i * c + d + 1] = ca;
                    sn[i * c + d] = sa;
                    sn[i * c + d + 1] = sa;
                }
            }
        }
    }
    std::vector<T> rot(c * c, T(0));
    for (std::size_t d = 0; d + 1 < c; d += 2) {
        rot[(d + 1) * c + d] = T(-1);
        rot[d * c + d + 1] = T(1);
    }
    return {Tensor<T>({n, c}, std::move(cs)), Tensor<T>({n, c}, std::move(sn)), Tensor<T>({c, c}, std::move(rot))};
}

/// x * cos + rotate_pairs(x) * sin, row i rotated by positions[i].
template <class T>
Tensor<T> rope_rotate(const Tensor<T>& x, const RopeTables<T>& tables)
{
    if (x.shape() != tables.cos.shape()) {
        throw DimensionError("rope input " + shape_str(x.shape()) + " does not match tables " +
                             shape_str(tables.cos.shape()));
    }
    return add(mul(x, tables.cos), mul(matmul(x, tables.rotate), tables.sin));
}

// ---------------------------------------------------------------------------
// Windows and injection

enum class SlotKind { Video, Padding, ReferenceVisual, Text, ReferenceSemantic };

struct WindowSlot {
    SlotKind kind = SlotKind::Video;
    std::size_t index = 0;  // index within its own segment
    bool operator==(const WindowSlot&) const = default;
};

struct WindowLayout {
    std::size_t window_size = 0;
    std::size_t video_tokens = 0;
    std::size_t reference_visual = 0;
    std::size_t text = 0;
    std::size_t reference_semantic = 0;
    std::vector<std::vector<WindowSlot>> groups;

    std::size_t window_count() const { return groups.size(); }
    std::size_t injected_count() const { return reference_visual + text + reference_semantic; }
    std::size_t padded_slots() const { return window_count() * window_size - video_tokens; }
    std::size_t group_size() const { return window_size + injected_count(); }
};

/// ceil(count / W) windows in raster order; the final window is padded with
/// masked slots up to W.
inline WindowLayout partition_windows(std::size_t video_tokens, std::size_t window)
{
    if (window == 0) throw ContractError("window size must be >= 1");
    if (video_tokens == 0) throw ContractError("cannot partition an empty token sequence");
    WindowLayout layout;
    layout.window_size = window;
    layout.video_tokens = video_tokens;
    const std::size_t count = (video_tokens + window - 1) / window;
    layout.groups.resize(count);
    for (std::size_t w = 0; w < count; ++w) {
        for (std::size_t s = 0; s < window; ++s) {
            const std::size_t idx = w * window + s;
            layout.groups[w].push_back(idx < video_tokens ? WindowSlot{SlotKind::Video, idx}
                                                          : WindowSlot{SlotKind::Padding, idx - video_tokens});
        }
    }
    return layout;
}

/// Appends every reference-latent, prompt and semantic token to every window.
inline WindowLayout inject_tokens(WindowLayout layout, std::size_t reference_visual, std::size_t text,
                                  std::size_t reference_semantic)
{
    layout.reference_visual += reference_visual;
    layout.text += text;
    layout.reference_semantic += reference_semantic;
    for (auto& g : layout.groups) {
        for (std::size_t i = 0; i < reference_visual; ++i) g.push_back({SlotKind::ReferenceVisual, i});
        for (std::size_t i = 0; i < text; ++i) g.push_back({SlotKind::Text, i});
        for (std::size_t i = 0; i < reference_semantic; ++i) g.push_back({SlotKind::ReferenceSemantic, i});
    }
    return layout;
}

/// [nw, G, c] attention groups: padded window video rows, then the injected
/// rows repeated for every window.
template <class T>
Tensor<T> assemble_groups(const Tensor<T>& video, const Tensor<T>& injected, const WindowLayout& layout)
{
    const std::size_t c = video.size(1);
    const std::size_t nw = layout.window_count();
    if (video.size(0) != layout.video_tokens) throw DimensionError("video token count does not match layout");
    Tensor<T> padded = video;
    if (layout.padded_slots()) padded = concat<T>({video, Tensor<T>::zeros({layout.padded_slots(), c})}, 0);
    auto windows = reshape(padded, {nw, layout.window_size, c});
    const std::size_t m = layout.injected_count();
    if (m == 0) return windows;
    if (injected.size(0) != m) throw DimensionError("injected token count does not match layout");
    auto tiled = add(Tensor<T>::zeros({nw, 1, 1}), reshape(injected, {1, m, c}));
    return concat<T>({windows, tiled}, 1);
}

/// Video outputs return to their sequence positions; each injected token's
/// per-window outputs are averaged into one row.
template <class T>
std::pair<Tensor<T>, Tensor<T>> gather_and_average(const Tensor<T>& grouped, const WindowLayout& layout)
{
    if (layout.window_count() == 0) throw ContractError("gather_and_average over zero windows");
    if (grouped.dim() != 3 || grouped.size(0) != layout.window_count() || grouped.size(1) != layout.group_size()) {
        throw DimensionError("grouped outputs " + shape_str(grouped.shape()) + " do not match layout");
    }
    const std::size_t c = grouped.size(2);
    const std::size_t m = layout.injected_count();
    auto parts = split(grouped, 1, {layout.window_size, m});
    auto video = reshape(parts[0], {layout.window_count() * layout.window_size, c});
    video = slice(video, 0, 0, layout.video_tokens);
    Tensor<T> injected = m ? mean(parts[1], 0) : Tensor<T>::zeros({0, c});
    return {video, injected};
}

/// Multi-head softmax attention inside each group; padded video slots are
/// masked out as keys.
template <class T>
Tensor<T> group_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                          const WindowLayout& layout)
{
    const std::size_t nw = q.size(0);
    const std::size_t G = q.size(1);
    const std::size_t c = q.size(2);
    const std::size_t dh = c / heads;
    auto to_heads = [&](const Tensor<T>& x) { return permute(reshape(x, {nw, G, heads, dh}), {0, 2, 1, 3}); };
    auto qh = to_heads(scale(q, T(1) / std::sqrt(static_cast<T>(dh))));
    auto kh = to_heads(k);
    auto vh = to_heads(v);
    auto scores = matmul(qh, transpose(kh));
    if (const std::size_t pad = layout.padded_slots()) {
        std::vector<T> bias(nw * G, T(0));
        for (std::size_t s = layout.window_size - pad; s < layout.window_size; ++s) bias[(nw - 1) * G + s] = T(-1e30);
        scores = add(scores, Tensor<T>({nw, 1, 1, G}, std::move(bias)));
    }
    auto probs = softmax(scores, -1);
    auto out = matmul(probs, vh);
    return reshape(permute(out, {0, 2, 1, 3}), {nw, G, c});
}

template <class T>
struct StreamProjections {
    Tensor<T> q, k, v;
};

/// Visual rows are video tokens followed by reference-latent tokens; text rows
/// are prompt tokens followed by semantic tokens. Returns per-stream outputs
/// with unchanged row counts.
template <class T>
std::pair<Tensor<T>, Tensor<T>> windowed_joint_attention(const StreamProjections<T>& visual,
                                                         const StreamProjections<T>& text,
                                                         const WindowLayout& layout, std::size_t heads)
{
    const std::size_t nv = layout.video_tokens;
    const std::size_t nr = layout.reference_visual;
    const std::size_t nt = layout.text + layout.reference_semantic;
    if (visual.q.size(0) != nv + nr) throw DimensionError("visual rows do not match layout");
    if (text.q.defined() && text.q.size(0) != nt) throw DimensionError("text rows do not match layout");

    auto build = [&](const Tensor<T>& vis, const Tensor<T>& txt) {
        auto parts = split(vis, 0, {nv, nr});
        std::vector<Tensor<T>> inj;
        if (nr) inj.push_back(parts[1]);
        if (nt) inj.push_back(txt);
        Tensor<T> injected = inj.empty() ? Tensor<T>() : (inj.size() == 1 ? inj[0] : concat(inj, 0));
        return assemble_groups(parts[0], injected, layout);
    };
    auto out = group_attention(build(visual.q, text.q), build(visual.k, text.k), build(visual.v, text.v), heads,
                               layout);
    auto [video_out, injected_out] = gather_and_average(out, layout);
    auto inj = split(injected_out, 0, {nr, nt});
    Tensor<T> visual_out = nr ? concat<T>({video_out, inj[0]}, 0) : video_out;
    return {visual_out, inj[1]};
}

// ---------------------------------------------------------------------------
// Blocks

template <class T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale_vec, T eps)
{
    return add(mul(layer_norm(x, eps), add_scalar(scale_vec, T(1))), shift);
}

template <class T>
struct BlockInputs {
    const WindowLayout& layout;
    const RopeTables<T>& rope;
    const Tensor<T>& condition;  // silu(timestep embedding), c
    std::size_t heads;
    T eps;
};

/// One dual-stream block: gated attention sublayer then gated MLP sublayer on
/// each stream, modulated by the timestep condition.
template <class T>
std::pair<Tensor<T>, Tensor<T>> mmdit_block(const Tensor<T>& visual, const Tensor<T>& text, const BlockWeights<T>& w,
                                            const BlockInputs<T>& in)
{
    const std::size_t c = visual.size(1);
    const bool has_text = text.defined() && text.size(0) > 0;
    auto mod_v = split(w.visual.modulation(in.condition), 0, {c, c, c, c, c, c});
    std::vector<Tensor<T>> mod_t;
    if (has_text) mod_t = split(w.text.modulation(in.condition), 0, {c, c, c, c, c, c});

    auto qkv_v = split(w.visual.qkv(modulate(visual, mod_v[0], mod_v[1], in.eps)), 1, {c, c, c});
    StreamProjections<T> pv{rope_rotate(qkv_v[0], in.rope), rope_rotate(qkv_v[1], in.rope), qkv_v[2]};
    StreamProjections<T> pt;
    if (has_text) {
        auto qkv_t = split(w.text.qkv(modulate(text, mod_t[0], mod_t[1], in.eps)), 1, {c, c, c});
        pt = {qkv_t[0], qkv_t[1], qkv_t[2]};
    }
    auto [attn_v, attn_t] = windowed_joint_attention(pv, pt, in.layout, in.heads);

    auto vis = add(visual, mul(mod_v[2], w.visual.out(attn_v)));
    vis = add(vis, mul(mod_v[5], w.visual.mlp_out(gelu(w.visual.mlp_in(modulate(vis, mod_v[3], mod_v[4], in.eps))))));
    if (!has_text) return {vis, text};
    auto txt = add(text, mul(mod_t[2], w.text.out(attn_t)));
    txt = add(txt, mul(mod_t[5], w.text.mlp_out(gelu(w.text.mlp_in(modulate(txt, mod_t[3], mod_t[4], in.eps))))));
    return {vis, txt};
}

// ---------------------------------------------------------------------------
// Full velocity model

/// cos/sin features of t * diffusion_steps.
template <class T>
Tensor<T> timestep_features(double t, std::size_t dim, double diffusion_steps)
{
    const std::size_t half = dim / 2;
    std::vector<T> v(dim);
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = t * diffusion_steps * freq;
        v[i] = static_cast<T>(std::cos(arg));
        v[half + i] = static_cast<T>(std::sin(arg));
    }
    return Tensor<T>({dim}, std::move(v));
}

template <class T>
Tensor<T> timestep_condition(const ModelParameters<T>& p, const ModelConfig& cfg, double t)
{
    auto emb = p.time_out(silu(p.time_in(timestep_features<T>(t, cfg.timestep_dim, cfg.diffusion_steps))));
    return silu(emb);
}

/// Everything between tokenisation and the output projection; exposed so the
/// identity-at-init property can be checked on the stacked blocks.
template <class T>
std::pair<Tensor<T>, Tensor<T>> run_blocks(const ModelParameters<T>& p, const ModelConfig& cfg,
                                           const Tensor<T>& visual_tokens, const std::vector<Position3>& positions,
                                           const Tensor<T>& text_tokens, const SegmentMap& map,
                                           std::size_t tokens_per_frame, const Tensor<T>& condition)
{
    const std::size_t nv = map.video_frames * tokens_per_frame;
    const std::size_t nr = map.reference_frames * tokens_per_frame;
    auto layout = inject_tokens(partition_windows(nv, cfg.window), nr, map.text_tokens, map.semantic_tokens());
    auto rope = rope_tables<T>(positions, cfg.heads, cfg.head_dim(), cfg.rope_base);
    BlockInputs<T> in{layout, rope, condition, cfg.heads, static_cast<T>(cfg.norm_eps)};
    Tensor<T> vis = visual_tokens;
    Tensor<T> txt = text_tokens;
    for (const auto& blk : p.blocks) std::tie(vis, txt) = mmdit_block(vis, txt, blk, in);
    return {vis, txt};
}

/// Calls to model_forward on the current thread, for instrumentation.
inline std::size_t& model_forward_calls()
{
    thread_local std::size_t calls = 0;
    return calls;
}

/// Predicted velocity for every frame of the visual stream, reference tail included.
template <class T>
Tensor<T> model_forward(const ModelParameters<T>& p, const ModelConfig& cfg, const VisualStream<T>& visual, double t,
                        const TextStream<T>& text)
{
    ++model_forward_calls();
    if (!(t > 0.0 && t <= 1.0)) throw ContractError("timestep " + std::to_string(t) + " outside (0, 1]");
    validate_visual_map(visual.map, visual.features.shape());
    validate_text_map(text.map, text.features.shape());
    if (text.map.reference_count() != visual.map.reference_frames) {
        throw ContractError("text stream carries " + std::to_string(text.map.reference_count()) +
                            " references but visual stream carries " + std::to_string(visual.map.reference_frames));
    }
    if (visual.features.size(3) != cfg.latent_channels()) {
        throw DimensionError("visual stream channels " + std::to_string(visual.features.size(3)) +
                             " do not match config " + std::to_string(cfg.latent_channels()));
    }
    SegmentMap map = visual.map;
    map.text_tokens = text.map.text_tokens;
    map.semantic_per_ref = text.map.semantic_per_ref;

    auto cond = timestep_condition(p, cfg, t);
    auto tokens = patchify(visual.features, p.patch_in);
    auto [vis, txt] = run_blocks(p, cfg, tokens.tokens, tokens.positions, text.features, map,
                                 tokens.height * tokens.width, cond);
    const std::size_t c = cfg.channels;
    auto fm = split(p.final_modulation(cond), 0, {c, c});
    auto out = modulate(vis, fm[0], fm[1], static_cast<T>(cfg.norm_eps));
    return unpatchify(out, tokens.frames, tokens.height, tokens.width, p.patch_out);
}

}  // namespace phantom
