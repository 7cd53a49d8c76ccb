#pragma once

// Sprite hues and scene backgrounds. Sprites are fully saturated, full value
// colours 45 degrees apart; backgrounds are dull enough that no background
// pixel passes the subject segmentation thresholds.

#include <algorithm>
#include <array>
#include <cmath>

#include "phantom/vocabulary.hpp"

namespace phantom {

struct Rgb {
    float r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

struct Hsv {
    double h = 0;  // degrees in [0, 360)
    double s = 0;
    double v = 0;
};

inline Rgb hsv_to_rgb(double h, double s, double v)
{
    h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0);
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) r = c, g = x;
    else if (hp < 2) r = x, g = c;
    else if (hp < 3) g = c, b = x;
    else if (hp < 4) g = x, b = c;
    else if (hp < 5) r = x, b = c;
    else r = c, b = x;
    const double m = v - c;
    return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

inline Hsv rgb_to_hsv(double r, double g, double b)
{
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    Hsv out;
    out.v = mx;
    out.s = mx > 0 ? d / mx : 0.0;
    if (d <= 0) return out;
    double h;
    if (mx == r) h = 60.0 * std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = 60.0 * ((b - r) / d + 2.0);
    else h = 60.0 * ((r - g) / d + 4.0);
    if (h < 0) h += 360.0;
    out.h = h;
    return out;
}

/// Smallest absolute angle between two hues, in degrees.
inline double hue_distance(double a, double b)
{
    double d = std::fmod(std::fabs(a - b), 360.0);
    return d > 180.0 ? 360.0 - d : d;
}

inline double palette_hue(std::size_t color) { return 45.0 * static_cast<double>(color % kColorCount); }

inline Rgb palette_rgb(std::size_t color) { return hsv_to_rgb(palette_hue(color), 1.0, 1.0); }

inline constexpr std::array<Rgb, kBackgroundCount> kBackgroundRgb{{
    {0.15f, 0.15f, 0.15f},  // charcoal
    {0.10f, 0.12f, 0.35f},  // navy
    {0.45f, 0.45f, 0.45f},  // gray
    {0.60f, 0.55f, 0.40f},  // sand
}};

}  // namespace phantom
