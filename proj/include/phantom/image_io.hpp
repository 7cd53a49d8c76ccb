#pragma once

// PNG persistence for frames and reference images (8-bit RGB).

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "phantom/errors.hpp"
#include "phantom/image.hpp"

namespace phantom {

inline unsigned char quantize_8bit(float v)
{
    v = std::clamp(v, 0.0f, 1.0f);
    return static_cast<unsigned char>(std::lround(v * 255.0f));
}

inline void write_png(const std::filesystem::path& path, const Image& img)
{
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!fp) throw Error("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng initialisation failed");
    }
    std::vector<unsigned char> row(img.width * 3);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t i = 0; i < img.width * 3; ++i) row[i] = quantize_8bit(img.rgb[y * img.width * 3 + i]);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline Image read_png(const std::filesystem::path& path)
{
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
    if (!fp) throw LoadError("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw LoadError("libpng initialisation failed");
    }
    Image img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw LoadError("malformed PNG " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_gray_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const auto width = png_get_image_width(png, info);
    const auto height = png_get_image_height(png, info);
    img = Image(height, width);
    std::vector<unsigned char> row(png_get_rowbytes(png, info));
    for (std::size_t y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (std::size_t i = 0; i < std::size_t{width} * 3; ++i) img.rgb[y * width * 3 + i] = row[i] / 255.0f;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline std::string frame_filename(std::size_t index)
{
    std::ostringstream os;
    os << "frame_" << std::setw(4) << std::setfill('0') << index << ".png";
    return os.str();
}

inline void write_clip_dir(const std::filesystem::path& dir, const VideoClip& clip)
{
    std::filesystem::create_directories(dir);
    for (std::size_t f = 0; f < clip.frames; ++f) write_png(dir / frame_filename(f), clip.frame(f));
}

inline VideoClip read_clip_dir(const std::filesystem::path& dir)
{
    std::vector<Image> frames;
    for (std::size_t f = 0;; ++f) {
        auto path = dir / frame_filename(f);
        if (!std::filesystem::exists(path)) break;
        frames.push_back(read_png(path));
    }
    if (frames.empty()) throw LoadError("no frames found in " + dir.string());
    VideoClip clip(frames.size(), frames[0].height, frames[0].width);
    for (std::size_t f = 0; f < frames.size(); ++f) clip.set_frame(f, frames[f]);
    return clip;
}

}  // namespace phantom
