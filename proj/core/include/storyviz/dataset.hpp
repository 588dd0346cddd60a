#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "storyviz/descriptor.hpp"
#include "storyviz/image_io.hpp"
#include "storyviz/rng.hpp"
#include "storyviz/tensor.hpp"

namespace storyviz {

inline constexpr int64_t kStoryLen = 4;
inline constexpr double kMinCenterDist = 0.8;  // scene units, blocks full occlusion
inline constexpr double kLayoutRange = 2.0;    // sampled |x|,|y| bound keeps glyphs on-canvas

// One story: four descriptors, four cumulative frames (frame t shows objects
// 1..t), plus the per-story seed that reproduces it.
struct StoryRecord {
  std::string id;
  uint64_t seed = 0;
  std::vector<ObjectDescriptor> descriptors;  // exactly 4
  std::vector<TensorF> frames;                // exactly 4, each [3,64,64]
};

// ---- layout sampling -----------------------------------------------------------

inline ObjectDescriptor sample_descriptor(Rng& rng) {
  ObjectDescriptor d;
  d.material = static_cast<Material>(rng.uniform_int(kMaterialCount));
  d.color = static_cast<Color>(rng.uniform_int(kColorCount));
  d.size = static_cast<ObjectSize>(rng.uniform_int(kSizeCount));
  d.shape = static_cast<ObjectShape>(rng.uniform_int(kShapeCount));
  d.x = rng.uniform(-kLayoutRange, kLayoutRange);
  d.y = rng.uniform(-kLayoutRange, kLayoutRange);
  return d;
}

// Four objects, positions rejection-sampled to pairwise center distance
// >= 0.8; a blown per-object retry budget restarts the whole layout.
inline std::vector<ObjectDescriptor> sample_layout(Rng& rng) {
  constexpr int kPerObjectTries = 100;
  for (;;) {
    std::vector<ObjectDescriptor> layout;
    bool ok = true;
    for (int64_t i = 0; i < kStoryLen && ok; ++i) {
      ObjectDescriptor d = sample_descriptor(rng);
      int tries = 0;
      auto clashes = [&](const ObjectDescriptor& c) {
        for (const auto& prev : layout) {
          const double dx = c.x - prev.x, dy = c.y - prev.y;
          if (std::sqrt(dx * dx + dy * dy) < kMinCenterDist) return true;
        }
        return false;
      };
      while (clashes(d)) {
        if (++tries > kPerObjectTries) {
          ok = false;
          break;
        }
        d.x = rng.uniform(-kLayoutRange, kLayoutRange);
        d.y = rng.uniform(-kLayoutRange, kLayoutRange);
      }
      if (ok) layout.push_back(d);
    }
    if (ok) return layout;
  }
}

// ---- rasterization ------------------------------------------------------------

namespace render_detail {

// CLEVR palette, 0..255 RGB.
inline const float kPalette[kColorCount][3] = {
    {87, 87, 87},    // gray
    {173, 35, 35},   // red
    {42, 75, 215},   // blue
    {29, 105, 20},   // green
    {129, 74, 25},   // brown
    {129, 38, 192},  // purple
    {41, 208, 208},  // cyan
    {255, 238, 51},  // yellow
};

inline constexpr float kBackground = 200.0f;  // flat gray backdrop
inline constexpr double kRadiusLarge = 10.0;  // pixels at 64x64
inline constexpr double kRadiusSmall = 6.0;

// Scene [-3,3] maps affinely onto pixel centers 0..63.
inline double scene_to_px(double v) { return (v + 3.0) / 6.0 * 63.0; }
inline double px_to_scene(double p) { return p / 63.0 * 6.0 - 3.0; }

// Cylinder silhouette: 1.2r x 1.6r body plus a half-elliptical top cap
// (semi-axes 0.6r, 0.35r). The glyph is drawn shifted down by the composite
// centroid offset so the silhouette centroid lands exactly on the target.
inline constexpr double kCylBodyHalfW = 0.6, kCylBodyHalfH = 0.8, kCylCapB = 0.35;
inline double cylinder_centroid_shift() {
  const double area_body = (2 * kCylBodyHalfW) * (2 * kCylBodyHalfH);
  const double area_cap = M_PI * kCylBodyHalfW * kCylCapB / 2.0;
  const double cap_centroid = kCylBodyHalfH + 4.0 * kCylCapB / (3.0 * M_PI);
  return area_cap * cap_centroid / (area_body + area_cap);
}

inline bool in_silhouette(ObjectShape shape, double dx, double dy, double r) {
  switch (shape) {
    case ObjectShape::kSphere:
      return dx * dx + dy * dy <= r * r;
    case ObjectShape::kCube:
      return std::abs(dx) <= 0.9 * r && std::abs(dy) <= 0.9 * r;
    case ObjectShape::kCylinder: {
      const double sy = dy - cylinder_centroid_shift() * r;  // recenter on centroid
      if (std::abs(dx) <= kCylBodyHalfW * r && std::abs(sy) <= kCylBodyHalfH * r)
        return true;
      const double cy = sy + kCylBodyHalfH * r;  // cap sits above the body
      const double ex = dx / (kCylBodyHalfW * r), ey = cy / (kCylCapB * r);
      return sy < -kCylBodyHalfH * r && ex * ex + ey * ey <= 1.0;
    }
  }
  return false;
}

}  // namespace render_detail

// Deterministic 2-D rasterization of a cumulative scene at 64x64, output in
// [-1,1]. Later objects paint over earlier ones. Metal gets a radial
// brightness gradient toward an upper-left highlight plus a specular dot;
// rubber is a flat fill.
inline TensorF render_scene(const std::vector<ObjectDescriptor>& descs) {
  using namespace render_detail;
  SV_CHECK(!descs.empty() && descs.size() <= static_cast<size_t>(kStoryLen),
           "render_scene: need 1..4 descriptors");
  for (const auto& d : descs) validate(d);

  const float bg = kBackground / 255.0f * 2.0f - 1.0f;
  TensorF frame = TensorF::full({3, 64, 64}, bg);

  for (const auto& d : descs) {
    const double r =
        d.size == ObjectSize::kLarge ? kRadiusLarge : kRadiusSmall;
    const double cx = scene_to_px(d.x);
    const double cy = scene_to_px(d.y);
    const float* base = kPalette[static_cast<int>(d.color)];
    const double hx = cx - 0.35 * r, hy = cy - 0.35 * r;  // highlight point

    const int y0 = std::max(0, static_cast<int>(std::floor(cy - 2 * r)));
    const int y1 = std::min(63, static_cast<int>(std::ceil(cy + 2 * r)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - 2 * r)));
    const int x1 = std::min(63, static_cast<int>(std::ceil(cx + 2 * r)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (!in_silhouette(d.shape, x - cx, y - cy, r)) continue;
        float rgb[3];
        if (d.material == Material::kRubber) {
          for (int c = 0; c < 3; ++c) rgb[c] = base[c];
        } else {
          const double hd = std::sqrt((x - hx) * (x - hx) + (y - hy) * (y - hy));
          const double gain = std::clamp(1.25 - 0.8 * hd / r, 0.45, 1.25);
          for (int c = 0; c < 3; ++c)
            rgb[c] = std::min(255.0f, static_cast<float>(base[c] * gain));
          if (hd <= 0.18 * r) {
            for (int c = 0; c < 3; ++c) rgb[c] = 0.3f * rgb[c] + 0.7f * 255.0f;
          }
        }
        for (int c = 0; c < 3; ++c) {
          frame.at({c, y, x}) = rgb[c] / 255.0f * 2.0f - 1.0f;
        }
      }
    }
  }
  return frame;
}

inline StoryRecord make_story(const std::string& id, uint64_t story_seed) {
  Rng rng(story_seed);
  StoryRecord rec;
  rec.id = id;
  rec.seed = story_seed;
  rec.descriptors = sample_layout(rng);
  for (int64_t t = 1; t <= kStoryLen; ++t) {
    rec.frames.push_back(render_scene(
        {rec.descriptors.begin(), rec.descriptors.begin() + t}));
  }
  return rec;
}

// ---- persistence ---------------------------------------------------------------

struct DatasetManifest {
  int64_t n_train = 0;
  int64_t n_test = 0;
  uint64_t seed = 0;
  std::string image_format = "png8";
  int64_t resolution = 64;
  nlohmann::json records = nlohmann::json::array();
};

inline std::string story_id(const std::string& split, int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%06lld", split.c_str(),
                static_cast<long long>(index));
  return buf;
}

// Train story i uses derived counter i; test story j uses n_train + j, so the
// two seed sets are disjoint by construction.
inline uint64_t story_seed(uint64_t global_seed, int64_t counter) {
  return Rng::derive_seed(global_seed, 0x73746f72796c6f74ull + static_cast<uint64_t>(counter));
}

inline nlohmann::json descriptor_to_json(const ObjectDescriptor& d) {
  return nlohmann::json{{"material", to_string(d.material)},
                        {"color", to_string(d.color)},
                        {"size", to_string(d.size)},
                        {"shape", to_string(d.shape)},
                        {"x", d.x},
                        {"y", d.y}};
}

inline ObjectDescriptor descriptor_from_json(const nlohmann::json& j) {
  ObjectDescriptor d;
  d.material = material_from_string(j.at("material").get<std::string>());
  d.color = color_from_string(j.at("color").get<std::string>());
  d.size = size_from_string(j.at("size").get<std::string>());
  d.shape = shape_from_string(j.at("shape").get<std::string>());
  d.x = j.at("x").get<double>();
  d.y = j.at("y").get<double>();
  validate(d);
  return d;
}

// Builds frames/<id>_<t>.png plus manifest.json. The manifest is written
// last, atomically (temp + rename), so a partial build leaves no manifest.
inline DatasetManifest build_dataset(int64_t n_train, int64_t n_test, uint64_t seed,
                                     const std::string& out_path) {
  SV_CHECK(n_train >= 1 && n_test >= 0, "build_dataset: need n_train >= 1");
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_path) / "frames");

  DatasetManifest m;
  m.n_train = n_train;
  m.n_test = n_test;
  m.seed = seed;

  auto emit = [&](const std::string& split, int64_t index, int64_t counter) {
    const uint64_t s = story_seed(seed, counter);
    StoryRecord rec = make_story(story_id(split, index), s);
    nlohmann::json entry;
    entry["id"] = rec.id;
    entry["split"] = split;
    entry["seed"] = rec.seed;
    entry["descriptors"] = nlohmann::json::array();
    entry["frames"] = nlohmann::json::array();
    for (int64_t t = 0; t < kStoryLen; ++t) {
      entry["descriptors"].push_back(descriptor_to_json(rec.descriptors[t]));
      const std::string fname = rec.id + "_" + std::to_string(t) + ".png";
      write_frame_png((fs::path(out_path) / "frames" / fname).string(),
                      rec.frames[t]);
      entry["frames"].push_back("frames/" + fname);
    }
    m.records.push_back(std::move(entry));
  };

  for (int64_t i = 0; i < n_train; ++i) emit("train", i, i);
  for (int64_t j = 0; j < n_test; ++j) emit("test", j, n_train + j);

  nlohmann::json top;
  top["format"] = m.image_format;
  top["resolution"] = m.resolution;
  top["n_train"] = m.n_train;
  top["n_test"] = m.n_test;
  top["seed"] = m.seed;
  top["story_len"] = kStoryLen;
  top["records"] = m.records;

  const fs::path final_path = fs::path(out_path) / "manifest.json";
  const fs::path tmp_path = fs::path(out_path) / "manifest.json.tmp";
  {
    std::ofstream f(tmp_path, std::ios::trunc);
    SV_CHECK(f.good(), "cannot write manifest: ", tmp_path.string());
    f << top.dump(2) << "\n";
    SV_CHECK(f.good(), "manifest write failed");
  }
  fs::rename(tmp_path, final_path);
  return m;
}

struct Dataset {
  std::vector<StoryRecord> train;
  std::vector<StoryRecord> test;
  uint64_t seed = 0;
  uint32_t fingerprint = 0;  // CRC32 of manifest bytes
};

inline Dataset load_dataset(const std::string& path) {
  namespace fs = std::filesystem;
  const auto manifest_bytes = read_file_bytes((fs::path(path) / "manifest.json").string());
  Dataset ds;
  ds.fingerprint = static_cast<uint32_t>(
      ::crc32(0L, manifest_bytes.data(), static_cast<uInt>(manifest_bytes.size())));

  nlohmann::json top = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
  SV_CHECK(top.at("format") == "png8" && top.at("resolution") == 64 &&
               top.at("story_len") == kStoryLen,
           "load_dataset: unsupported manifest");
  ds.seed = top.at("seed").get<uint64_t>();

  for (const auto& entry : top.at("records")) {
    StoryRecord rec;
    rec.id = entry.at("id").get<std::string>();
    rec.seed = entry.at("seed").get<uint64_t>();
    for (const auto& dj : entry.at("descriptors")) {
      rec.descriptors.push_back(descriptor_from_json(dj));
    }
    SV_CHECK(rec.descriptors.size() == kStoryLen, "load_dataset: bad record ", rec.id);
    for (const auto& fj : entry.at("frames")) {
      TensorF frame = read_frame_png((fs::path(path) / fj.get<std::string>()).string());
      SV_CHECK(frame.dim(0) == 3 && frame.dim(1) == 64 && frame.dim(2) == 64,
               "load_dataset: bad frame shape in ", rec.id);
      rec.frames.push_back(std::move(frame));
    }
    SV_CHECK(rec.frames.size() == kStoryLen, "load_dataset: bad frame count ", rec.id);
    (entry.at("split") == "train" ? ds.train : ds.test).push_back(std::move(rec));
  }
  const int64_t n_train = top.at("n_train").get<int64_t>();
  const int64_t n_test = top.at("n_test").get<int64_t>();
  SV_CHECK(static_cast<int64_t>(ds.train.size()) == n_train &&
               static_cast<int64_t>(ds.test.size()) == n_test,
           "load_dataset: record counts disagree with manifest header");
  return ds;
}

}  // namespace storyviz
