#pragma once

// Closed prompt vocabulary: subject colours, shapes, motions, scene
// backgrounds and the subject separator.

#include <array>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "phantom/errors.hpp"

namespace phantom {

enum class SpriteShape { Square = 0, Circle = 1, Triangle = 2 };
enum class Motion { Left = 0, Right = 1, Up = 2, Down = 3 };

inline constexpr std::size_t kColorCount = 8;
inline constexpr std::size_t kShapeCount = 3;
inline constexpr std::size_t kMotionCount = 4;
inline constexpr std::size_t kBackgroundCount = 4;

inline constexpr std::array<std::string_view, kColorCount> kColorNames{
    "red", "orange", "lime", "green", "cyan", "blue", "violet", "magenta"};
inline constexpr std::array<std::string_view, kShapeCount> kShapeNames{"square", "circle", "triangle"};
inline constexpr std::array<std::string_view, kMotionCount> kMotionNames{"left", "right", "up", "down"};
inline constexpr std::array<std::string_view, kBackgroundCount> kBackgroundNames{"charcoal", "navy", "gray",
                                                                                 "sand"};

namespace vocab {

inline constexpr int kAnd = 0;
inline constexpr int kColorBase = 1;
inline constexpr int kShapeBase = kColorBase + static_cast<int>(kColorCount);
inline constexpr int kMotionBase = kShapeBase + static_cast<int>(kShapeCount);
inline constexpr int kBackgroundBase = kMotionBase + static_cast<int>(kMotionCount);
inline constexpr std::size_t kSize = static_cast<std::size_t>(kBackgroundBase) + kBackgroundCount;

inline int color(std::size_t c) { return kColorBase + static_cast<int>(c); }
inline int shape(SpriteShape s) { return kShapeBase + static_cast<int>(s); }
inline int motion(Motion m) { return kMotionBase + static_cast<int>(m); }
inline int background(std::size_t b) { return kBackgroundBase + static_cast<int>(b); }

inline std::string_view word(int id)
{
    if (id == kAnd) return "and";
    if (id >= kColorBase && id < kShapeBase) return kColorNames[static_cast<std::size_t>(id - kColorBase)];
    if (id >= kShapeBase && id < kMotionBase) return kShapeNames[static_cast<std::size_t>(id - kShapeBase)];
    if (id >= kMotionBase && id < kBackgroundBase) return kMotionNames[static_cast<std::size_t>(id - kMotionBase)];
    if (id >= kBackgroundBase && id < static_cast<int>(kSize))
        return kBackgroundNames[static_cast<std::size_t>(id - kBackgroundBase)];
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
}

inline int lookup(std::string_view w)
{
    for (int id = 0; id < static_cast<int>(kSize); ++id)
        if (word(id) == w) return id;
    throw VocabularyError("unknown word '" + std::string(w) + "'");
}

/// Whitespace-separated words to ids.
inline std::vector<int> parse(const std::string& text)
{
    std::istringstream is(text);
    std::vector<int> ids;
    for (std::string w; is >> w;) ids.push_back(lookup(w));
    return ids;
}

inline std::string render(const std::vector<int>& ids)
{
    std::string out;
    for (auto id : ids) {
        if (!out.empty()) out += ' ';
        out += word(id);
    }
    return out;
}

}  // namespace vocab

}  // namespace phantom
