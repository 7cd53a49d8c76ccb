#pragma once

// Turns a (prompt, references, noisy video latents) triple into the model's
// two input streams under a given condition mode, with learned null
// embeddings standing in for dropped conditions.

#include <string>
#include <vector>

#include "phantom/dataforge.hpp"
#include "phantom/encoders.hpp"
#include "phantom/fusion.hpp"
#include "phantom/mmdit.hpp"

namespace phantom {

/// TI: prompt and references; I: references only; Null: neither.
enum class ConditionMode { TextImage = 0, Image = 1, Null = 2 };

inline const char* condition_mode_name(ConditionMode m)
{
    switch (m) {
    case ConditionMode::TextImage: return "TI";
    case ConditionMode::Image: return "I";
    case ConditionMode::Null: return "null";
    }
    return "?";
}

struct ConditionDraw {
    ConditionMode mode = ConditionMode::TextImage;
    bool null_reference_latents = false;  // latent-path dropout; semantic tokens kept
};

/// Encoder outputs for one triplet. Semantic features are cached when the
/// embedder is frozen.
template <class T>
struct PreparedConditions {
    std::vector<int> prompt;
    std::vector<Image> refs;                 // letterboxed to the frame size
    std::vector<Tensor<T>> ref_latents;      // h x w x c_lat each
    std::vector<Tensor<T>> ref_semantic;     // tokens x semantic_dim each (frozen embedder only)
};

template <class T>
struct PreparedSample {
    Tensor<T> video;  // clean latents, t x h x w x c_lat
    PreparedConditions<T> conditions;
};

inline Image prepare_reference_image(const Image& ref, const ModelConfig& cfg)
{
    return letterbox(ref, cfg.frame_height(), cfg.frame_width(), 0.5f);
}

template <class T>
PreparedConditions<T> prepare_conditions(const ModelParameters<T>& p, const ModelConfig& cfg,
                                         const std::vector<int>& prompt, const std::vector<Image>& refs)
{
    if (refs.size() > kMaxReferences) {
        throw ContractError(std::to_string(refs.size()) + " references exceed the maximum of 4");
    }
    PreparedConditions<T> c;
    c.prompt = prompt;
    for (const auto& r : refs) {
        c.refs.push_back(prepare_reference_image(r, cfg));
        auto grid = encode_reference<T>(c.refs.back(), cfg.patch);
        c.ref_latents.push_back(reshape(grid.tensor(), {grid.height, grid.width, grid.channels}));
        if (!cfg.train_semantic_encoder) {
            NoGradGuard guard;
            c.ref_semantic.push_back(embed_reference_semantic(p.semantic, cfg.semantic_config(), c.refs.back()));
        }
    }
    return c;
}

template <class T>
PreparedSample<T> prepare_sample(const ModelParameters<T>& p, const ModelConfig& cfg, const TripletSample& s)
{
    if (s.video.frames != cfg.frames || s.video.height != cfg.frame_height() || s.video.width != cfg.frame_width()) {
        throw DimensionError("clip " + std::to_string(s.video.frames) + "x" + std::to_string(s.video.height) + "x" +
                             std::to_string(s.video.width) + " does not match model geometry " +
                             std::to_string(cfg.frames) + "x" + std::to_string(cfg.frame_height()) + "x" +
                             std::to_string(cfg.frame_width()));
    }
    PreparedSample<T> out;
    out.video = encode_video<T>(s.video, cfg.patch).tensor();
    out.conditions = prepare_conditions(p, cfg, s.prompt, s.refs);
    return out;
}

template <class T>
Tensor<T> null_reference_latent(const ModelParameters<T>& p, const ModelConfig& cfg)
{
    const std::size_t c = cfg.latent_channels();
    return add(Tensor<T>::zeros({cfg.grid_height, cfg.grid_width, 1}), reshape(p.null_reference_frame, {1, 1, c}));
}

/// Semantic tokens of reference `slot` projected to the model width, plus the slot's learned offset.
template <class T>
Tensor<T> reference_semantic_tokens(const ModelParameters<T>& p, const ModelConfig& cfg,
                                    const PreparedConditions<T>& c, std::size_t slot, bool null)
{
    auto offset = slice(p.reference_slots, 0, slot, 1);
    if (null) return add(p.null_semantic, offset);
    Tensor<T> raw = cfg.train_semantic_encoder
                        ? embed_reference_semantic(p.semantic, cfg.semantic_config(), c.refs.at(slot))
                        : c.ref_semantic.at(slot);
    return add(p.semantic_proj(raw), offset);
}

template <class T>
struct ModelInputs {
    VisualStream<T> visual;
    TextStream<T> text;
};

/// Streams for one model evaluation. The reference count is preserved in
/// every mode; dropped references are replaced by null embeddings in place.
template <class T>
ModelInputs<T> build_inputs(const ModelParameters<T>& p, const ModelConfig& cfg, const PreparedConditions<T>& c,
                            const Tensor<T>& noisy_video, ConditionDraw draw)
{
    const bool drop_text = draw.mode != ConditionMode::TextImage;
    const bool drop_refs = draw.mode == ConditionMode::Null;
    const bool null_latents = drop_refs || draw.null_reference_latents;

    Tensor<T> text = drop_text ? p.null_text : embed_text(p.text, c.prompt);
    std::vector<Tensor<T>> semantic;
    std::vector<Tensor<T>> latents;
    Tensor<T> null_latent;
    if (null_latents && !c.refs.empty()) null_latent = null_reference_latent(p, cfg);
    for (std::size_t i = 0; i < c.refs.size(); ++i) {
        semantic.push_back(reference_semantic_tokens(p, cfg, c, i, drop_refs));
        latents.push_back(null_latents ? null_latent : c.ref_latents[i]);
    }
    return {merge_visual_stream(noisy_video, latents), merge_text_stream(text, semantic)};
}

}  // namespace phantom
