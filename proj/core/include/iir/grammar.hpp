#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace iir {

struct NamedColor {
  std::string_view name;
  std::array<float, 3> rgb;
};

// Shape colors; captions name these, edit-success scoring measures against them.
inline constexpr std::array<NamedColor, 8> kShapeColors{{
    {"red", {1.0f, 0.0f, 0.0f}},
    {"green", {0.0f, 1.0f, 0.0f}},
    {"blue", {0.0f, 0.0f, 1.0f}},
    {"yellow", {1.0f, 1.0f, 0.0f}},
    {"cyan", {0.0f, 1.0f, 1.0f}},
    {"magenta", {1.0f, 0.0f, 1.0f}},
    {"white", {1.0f, 1.0f, 1.0f}},
    {"orange", {1.0f, 0.5f, 0.0f}},
}};

// Muted background tones; never named in captions.
inline constexpr std::array<NamedColor, 8> kTextureColors{{
    {"slate", {0.25f, 0.30f, 0.35f}},
    {"olive", {0.45f, 0.45f, 0.20f}},
    {"brown", {0.45f, 0.30f, 0.20f}},
    {"teal", {0.20f, 0.45f, 0.45f}},
    {"plum", {0.45f, 0.25f, 0.45f}},
    {"sand", {0.75f, 0.65f, 0.45f}},
    {"gray", {0.55f, 0.55f, 0.55f}},
    {"navy", {0.15f, 0.15f, 0.35f}},
}};

enum class Shape { kCircle = 0, kSquare = 1, kTriangle = 2 };
enum class Texture { kSolid = 0, kStripes = 1, kChecker = 2 };

inline constexpr std::array<std::string_view, 3> kShapeNames{"circle", "square", "triangle"};
inline constexpr std::array<std::string_view, 3> kTextureNames{"solid", "stripes", "checker"};

inline constexpr std::string_view kCaptionGrammar = "a {color} {shape} on {texture} background";

std::string make_caption(int color, Shape shape, Texture texture);

std::optional<int> color_index(std::string_view name);
std::optional<Shape> shape_from_name(std::string_view name);
std::optional<Texture> texture_from_name(std::string_view name);

}  // namespace iir
