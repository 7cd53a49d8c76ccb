#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "phantom/errors.hpp"

namespace phantom {

/// H x W x 3 RGB, values in [0, 1], row-major with interleaved channels.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> rgb;

    Image() = default;
    Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), rgb(h * w * 3, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }

    std::size_t pixels() const { return height * width; }
    bool empty() const { return rgb.empty(); }

    bool operator==(const Image&) const = default;
};

using ReferenceImage = Image;

/// t x H x W x 3 frames.
struct VideoClip {
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data;

    VideoClip() = default;
    VideoClip(std::size_t t, std::size_t h, std::size_t w, float fill = 0.0f)
        : frames(t), height(h), width(w), data(t * h * w * 3, fill)
    {
    }

    std::size_t frame_size() const { return height * width * 3; }

    float& at(std::size_t f, std::size_t y, std::size_t x, std::size_t c)
    {
        return data[((f * height + y) * width + x) * 3 + c];
    }
    float at(std::size_t f, std::size_t y, std::size_t x, std::size_t c) const
    {
        return data[((f * height + y) * width + x) * 3 + c];
    }

    Image frame(std::size_t f) const
    {
        if (f >= frames) throw ContractError("frame index out of range");
        Image img(height, width);
        std::copy(data.begin() + static_cast<long>(f * frame_size()),
                  data.begin() + static_cast<long>((f + 1) * frame_size()), img.rgb.begin());
        return img;
    }

    void set_frame(std::size_t f, const Image& img)
    {
        if (img.height != height || img.width != width) throw DimensionError("frame size mismatch");
        std::copy(img.rgb.begin(), img.rgb.end(), data.begin() + static_cast<long>(f * frame_size()));
    }

    bool operator==(const VideoClip&) const = default;
};

inline Image crop(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w)
{
    if (y0 + h > img.height || x0 + w > img.width) throw DimensionError("crop outside image");
    Image out(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

/// Nearest-neighbour resize preserving aspect ratio, centred on a canvas of
/// the target size filled with `pad`.
inline Image letterbox(const Image& img, std::size_t height, std::size_t width, float pad = 0.5f)
{
    if (img.empty()) throw DimensionError("letterbox of an empty image");
    if (img.height == height && img.width == width) return img;
    const double s = std::min(static_cast<double>(height) / static_cast<double>(img.height),
                              static_cast<double>(width) / static_cast<double>(img.width));
    const auto nh = std::max<std::size_t>(1, std::min(height, static_cast<std::size_t>(std::lround(img.height * s))));
    const auto nw = std::max<std::size_t>(1, std::min(width, static_cast<std::size_t>(std::lround(img.width * s))));
    const std::size_t oy = (height - nh) / 2;
    const std::size_t ox = (width - nw) / 2;
    Image out(height, width, pad);
    for (std::size_t y = 0; y < nh; ++y) {
        const auto sy = std::min(img.height - 1, static_cast<std::size_t>((y + 0.5) * img.height / nh));
        for (std::size_t x = 0; x < nw; ++x) {
            const auto sx = std::min(img.width - 1, static_cast<std::size_t>((x + 0.5) * img.width / nw));
            for (std::size_t c = 0; c < 3; ++c) out.at(oy + y, ox + x, c) = img.at(sy, sx, c);
        }
    }
    return out;
}

}  // namespace phantom
