#include "scenelab/toyscenes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "scenelab/image_io.hpp"

namespace scenelab {

namespace {

namespace fs = std::filesystem;

void hsv_px(float h, float s, float v, float& r, float& g, float& b) {
  h = std::fmod(std::fmod(h, 1.f) + 1.f, 1.f) * 6.f;
  const float c = v * s;
  const float x = c * (1.f - std::fabs(std::fmod(h, 2.f) - 1.f));
  float r1 = 0, g1 = 0, b1 = 0;
  if (h < 1) {
    r1 = c; g1 = x;
  } else if (h < 2) {
    r1 = x; g1 = c;
  } else if (h < 3) {
    g1 = c; b1 = x;
  } else if (h < 4) {
    g1 = x; b1 = c;
  } else if (h < 5) {
    r1 = x; b1 = c;
  } else {
    r1 = c; b1 = x;
  }
  const float m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

std::string slug(std::string s) {
  for (char& c : s) {
    if (c == ' ' || c == '\'') c = '_';
  }
  return s;
}

// one image: class-keyed texture over a class-keyed palette
Tensor render(int cls, int classes, int n, Rng& rng) {
  const int texture = cls % 8;
  const float hue = (cls + 0.5f) / classes + static_cast<float>(rng.uniform(-0.02, 0.02));
  const float hue2 = hue + 0.5f;
  const float phase = static_cast<float>(rng.uniform(0.0, 2.0 * M_PI));
  const float freq = static_cast<float>(rng.uniform(3.0, 6.0));
  std::vector<float> px(static_cast<size_t>(3) * n * n);
  auto put = [&](int y, int x, float h, float s, float v) {
    float r, g, b;
    hsv_px(h, std::clamp(s, 0.f, 1.f), std::clamp(v, 0.f, 1.f), r, g, b);
    px[(0 * n + y) * n + x] = r;
    px[(1 * n + y) * n + x] = g;
    px[(2 * n + y) * n + x] = b;
  };
  // blob / rectangle layouts drawn up front so the per-pixel pass is pure
  struct Rect { int y0, x0, y1, x1; };
  std::vector<Rect> rects;
  if (texture == 5 || texture == 6) {
    const int count = 3 + static_cast<int>(rng.uniform_int(4));
    for (int i = 0; i < count; ++i) {
      const int cy = static_cast<int>(rng.uniform_int(n));
      const int cx = static_cast<int>(rng.uniform_int(n));
      const int hh = n / 8 + static_cast<int>(rng.uniform_int(n / 4));
      const int ww = n / 8 + static_cast<int>(rng.uniform_int(n / 4));
      rects.push_back({std::max(0, cy - hh), std::max(0, cx - ww),
                       std::min(n, cy + hh), std::min(n, cx + ww)});
    }
  }
  // smoothed value-noise grid for the cloudy class
  const int gs = 5;
  std::vector<float> grid(gs * gs);
  for (auto& v : grid) v = static_cast<float>(rng.uniform());

  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      float t = 0.f;  // in [0,1], selects between the two palette tones
      switch (texture) {
        case 0:
          t = 0.5f + 0.5f * std::sin(phase + freq * 2.f * M_PI * y / n);
          break;
        case 1:
          t = 0.5f + 0.5f * std::sin(phase + freq * 2.f * M_PI * x / n);
          break;
        case 2: {
          const int cell = std::max(2, static_cast<int>(n / freq));
          t = ((y / cell) + (x / cell)) % 2 == 0 ? 0.f : 1.f;
          break;
        }
        case 3:
          t = 0.5f + 0.5f * std::sin(phase + freq * M_PI * (x + y) / n);
          break;
        case 4: {
          const float dy = y - n / 2.f, dx = x - n / 2.f;
          t = 0.5f + 0.5f * std::sin(phase +
                                     freq * 2.f * M_PI *
                                         std::sqrt(dy * dy + dx * dx) / n);
          break;
        }
        case 5:
        case 6: {
          t = 0.f;
          for (const auto& r : rects) {
            if (y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1) t = 1.f;
          }
          break;
        }
        case 7: {
          const float gy = static_cast<float>(y) / n * (gs - 1);
          const float gx = static_cast<float>(x) / n * (gs - 1);
          const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
          const int y1 = std::min(y0 + 1, gs - 1), x1 = std::min(x0 + 1, gs - 1);
          const float wy = gy - y0, wx = gx - x0;
          t = grid[y0 * gs + x0] * (1 - wy) * (1 - wx) +
              grid[y0 * gs + x1] * (1 - wy) * wx +
              grid[y1 * gs + x0] * wy * (1 - wx) + grid[y1 * gs + x1] * wy * wx;
          break;
        }
      }
      const float noise = static_cast<float>(rng.uniform(-0.04, 0.04));
      const float h = t < 0.5f ? hue : hue2;
      const float v = 0.45f + 0.35f * t + noise;
      put(y, x, h, 0.55f, v);
    }
  }
  return Tensor::from_data({3, n, n}, std::move(px));
}

}  // namespace

void ToySceneSpec::validate() const {
  if (classes < 2) throw ContractError("toy scenes: classes must be >= 2");
  if (image_size < 8) throw ContractError("toy scenes: image_size too small");
  if (per_class < 3) throw ContractError("toy scenes: per_class must be >= 3");
  if (!(train_frac > 0) || !(val_frac >= 0) || train_frac + val_frac >= 1.0) {
    throw ContractError("toy scenes: fractions must leave a test remainder");
  }
}

std::string toy_class_name(int c, int classes) {
  static const std::vector<std::string> indoor = RemapTable::places8().classes();
  if (classes == static_cast<int>(indoor.size())) return indoor[c];
  return "class" + std::to_string(c);
}

SampleManifest generate_toy_scenes(const ToySceneSpec& spec,
                                   const std::string& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  SampleManifest manifest;
  manifest.dataset_name = "toy-scenes";
  manifest.seed = spec.seed;
  Rng master(spec.seed);

  const int train_n =
      static_cast<int>(std::lround(spec.train_frac * spec.per_class));
  const int val_n =
      static_cast<int>(std::lround(spec.val_frac * spec.per_class));
  for (int c = 0; c < spec.classes; ++c) {
    const std::string cls = toy_class_name(c, spec.classes);
    const std::string dir = slug(cls);
    fs::create_directories(fs::path(out_dir) / dir);
    Rng class_rng = master.split("class-" + std::to_string(c));
    for (int i = 0; i < spec.per_class; ++i) {
      Rng img_rng = class_rng.split(static_cast<uint64_t>(i));
      Tensor img = render(c, spec.classes, spec.image_size, img_rng);
      char name[64];
      std::snprintf(name, sizeof name, "img_%04d.png", i);
      const std::string rel = dir + "/" + name;
      save_png((fs::path(out_dir) / rel).string(), img);
      ManifestRow row;
      row.uri = rel;
      row.original_category = cls;
      row.mapped_class = cls;
      row.split = i < train_n ? "train" : (i < train_n + val_n ? "val" : "test");
      row.source_tag = "toy";
      row.synthetic = false;
      manifest.rows.push_back(std::move(row));
    }
  }
  return manifest;
}

}  // namespace scenelab
