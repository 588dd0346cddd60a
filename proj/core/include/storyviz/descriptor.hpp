#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "storyviz/common.hpp"
#include "storyviz/tensor.hpp"

namespace storyviz {

// Sentence vectors are fixed at 128 entries; a story concatenates T of them.
inline constexpr int64_t kTextDim = 128;

enum class Material : int { kMetal = 0, kRubber = 1 };
enum class Color : int {
  kGray = 0, kRed = 1, kBlue = 2, kGreen = 3,
  kBrown = 4, kPurple = 5, kCyan = 6, kYellow = 7
};
enum class ObjectSize : int { kSmall = 0, kLarge = 1 };
enum class ObjectShape : int { kCube = 0, kSphere = 1, kCylinder = 2 };

inline constexpr int kMaterialCount = 2;
inline constexpr int kColorCount = 8;
inline constexpr int kSizeCount = 2;
inline constexpr int kShapeCount = 3;

// One scene object: the "sentence" unit for the synthetic story corpus.
struct ObjectDescriptor {
  Material material = Material::kMetal;
  Color color = Color::kGray;
  ObjectSize size = ObjectSize::kSmall;
  ObjectShape shape = ObjectShape::kCube;
  double x = 0.0;
  double y = 0.0;
};

inline void validate(const ObjectDescriptor& d) {
  SV_CHECK(static_cast<int>(d.material) >= 0 && static_cast<int>(d.material) < kMaterialCount,
           "invalid material");
  SV_CHECK(static_cast<int>(d.color) >= 0 && static_cast<int>(d.color) < kColorCount,
           "invalid color");
  SV_CHECK(static_cast<int>(d.size) >= 0 && static_cast<int>(d.size) < kSizeCount,
           "invalid size");
  SV_CHECK(static_cast<int>(d.shape) >= 0 && static_cast<int>(d.shape) < kShapeCount,
           "invalid shape");
  SV_CHECK(d.x >= -3.0 && d.x <= 3.0, "position x out of [-3,3]: ", d.x);
  SV_CHECK(d.y >= -3.0 && d.y <= 3.0, "position y out of [-3,3]: ", d.y);
}

// Deterministic sentence embedding: one-hot material (2) | color (8) |
// size (2) | shape (3) | (x/3, y/3) | zero padding to 128. Positions are
// divided by 3 so every entry lies in [-1, 1].
inline constexpr int64_t kMaterialOffset = 0;
inline constexpr int64_t kColorOffset = kMaterialOffset + kMaterialCount;
inline constexpr int64_t kSizeOffset = kColorOffset + kColorCount;
inline constexpr int64_t kShapeOffset = kSizeOffset + kSizeCount;
inline constexpr int64_t kPositionOffset = kShapeOffset + kShapeCount;

inline TensorF encode_descriptor(const ObjectDescriptor& d) {
  validate(d);
  TensorF v({kTextDim});
  v[kMaterialOffset + static_cast<int>(d.material)] = 1.0f;
  v[kColorOffset + static_cast<int>(d.color)] = 1.0f;
  v[kSizeOffset + static_cast<int>(d.size)] = 1.0f;
  v[kShapeOffset + static_cast<int>(d.shape)] = 1.0f;
  v[kPositionOffset] = static_cast<float>(d.x / 3.0);
  v[kPositionOffset + 1] = static_cast<float>(d.y / 3.0);
  return v;
}

// Concatenated story embedding S in story order; length 128 * T.
inline TensorF encode_story(const std::vector<ObjectDescriptor>& descs) {
  SV_CHECK(!descs.empty(), "encode_story needs at least one descriptor");
  TensorF out({static_cast<int64_t>(descs.size()) * kTextDim});
  for (size_t t = 0; t < descs.size(); ++t) {
    TensorF s = encode_descriptor(descs[t]);
    std::copy(s.vec().begin(), s.vec().end(),
              out.vec().begin() + static_cast<int64_t>(t) * kTextDim);
  }
  return out;
}

// ---- enum names (manifest serialisation, reports) ---------------------------

inline const char* to_string(Material m) {
  static constexpr std::array<const char*, kMaterialCount> names{"metal", "rubber"};
  return names[static_cast<size_t>(m)];
}
inline const char* to_string(Color c) {
  static constexpr std::array<const char*, kColorCount> names{
      "gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow"};
  return names[static_cast<size_t>(c)];
}
inline const char* to_string(ObjectSize s) {
  static constexpr std::array<const char*, kSizeCount> names{"small", "large"};
  return names[static_cast<size_t>(s)];
}
inline const char* to_string(ObjectShape s) {
  static constexpr std::array<const char*, kShapeCount> names{"cube", "sphere",
                                                              "cylinder"};
  return names[static_cast<size_t>(s)];
}

template <typename Enum, int N>
Enum enum_from_string(const std::string& name, const char* what) {
  for (int i = 0; i < N; ++i) {
    if (name == to_string(static_cast<Enum>(i))) return static_cast<Enum>(i);
  }
  SV_CHECK(false, "unknown ", what, ": ", name);
  return static_cast<Enum>(0);
}

inline Material material_from_string(const std::string& s) {
  return enum_from_string<Material, kMaterialCount>(s, "material");
}
inline Color color_from_string(const std::string& s) {
  return enum_from_string<Color, kColorCount>(s, "color");
}
inline ObjectSize size_from_string(const std::string& s) {
  return enum_from_string<ObjectSize, kSizeCount>(s, "size");
}
inline ObjectShape shape_from_string(const std::string& s) {
  return enum_from_string<ObjectShape, kShapeCount>(s, "shape");
}

}  // namespace storyviz
