#include "scenelab/augment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace scenelab {

namespace {

std::atomic<uint64_t> g_fallbacks{0};

struct Image {
  int c = 0, h = 0, w = 0;
  std::vector<float> px;  // [C,H,W] row-major

  float at(int ch, int y, int x) const { return px[(ch * h + y) * w + x]; }
  float& at(int ch, int y, int x) { return px[(ch * h + y) * w + x]; }
};

Image from_tensor(const Tensor& t) {
  if (t.dim() != 3) {
    throw DimensionError("augment: image must be [C,H,W], got " +
                         shape_str(t.shape()));
  }
  Image img;
  img.c = static_cast<int>(t.shape()[0]);
  img.h = static_cast<int>(t.shape()[1]);
  img.w = static_cast<int>(t.shape()[2]);
  img.px = t.values();
  return img;
}

float sample_clamped(const Image& img, int ch, int y, int x) {
  y = std::clamp(y, 0, img.h - 1);
  x = std::clamp(x, 0, img.w - 1);
  return img.at(ch, y, x);
}

// bilinear with half-pixel centers: src = (dst + 0.5) * in/out - 0.5
Image resize_bilinear(const Image& in, int out_h, int out_w) {
  if (in.h == out_h && in.w == out_w) return in;
  Image out;
  out.c = in.c;
  out.h = out_h;
  out.w = out_w;
  out.px.resize(static_cast<size_t>(in.c) * out_h * out_w);
  const double sy = static_cast<double>(in.h) / out_h;
  const double sx = static_cast<double>(in.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(in.h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, in.h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(in.w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, in.w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < in.c; ++ch) {
        const double top =
            in.at(ch, y0, x0) * (1 - wx) + in.at(ch, y0, x1) * wx;
        const double bot =
            in.at(ch, y1, x0) * (1 - wx) + in.at(ch, y1, x1) * wx;
        out.at(ch, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Image crop_region(const Image& in, int top, int left, int ch_h, int ch_w) {
  Image out;
  out.c = in.c;
  out.h = ch_h;
  out.w = ch_w;
  out.px.resize(static_cast<size_t>(in.c) * ch_h * ch_w);
  for (int c = 0; c < in.c; ++c) {
    for (int y = 0; y < ch_h; ++y) {
      for (int x = 0; x < ch_w; ++x) {
        out.at(c, y, x) = in.at(c, top + y, left + x);
      }
    }
  }
  return out;
}

void apply_crop(Image& img, const TransformDesc& t, int out_h, int out_w,
                Rng& rng) {
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = static_cast<double>(img.h) * img.w;
    const double scale = rng.uniform(t.scale_min, t.scale_max);
    const double log_r =
        rng.uniform(std::log(t.ratio_min), std::log(t.ratio_max));
    const double ratio = std::exp(log_r);
    const int cw = static_cast<int>(std::lround(std::sqrt(area * scale * ratio)));
    const int ch = static_cast<int>(std::lround(std::sqrt(area * scale / ratio)));
    if (cw < 1 || ch < 1 || cw > img.w || ch > img.h) continue;
    const int top = static_cast<int>(rng.uniform_int(img.h - ch + 1));
    const int left = static_cast<int>(rng.uniform_int(img.w - cw + 1));
    img = resize_bilinear(crop_region(img, top, left, ch, cw), out_h, out_w);
    return;
  }
  g_fallbacks.fetch_add(1);
  img = resize_bilinear(img, out_h, out_w);
}

void apply_flip(Image& img) {
  for (int c = 0; c < img.c; ++c) {
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w / 2; ++x) {
        std::swap(img.at(c, y, x), img.at(c, y, img.w - 1 - x));
      }
    }
  }
}

float luma(const Image& img, int y, int x) {
  if (img.c < 3) return img.at(0, y, x);
  return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) +
         0.114f * img.at(2, y, x);
}

void clamp01(Image& img) {
  for (auto& v : img.px) v = std::clamp(v, 0.f, 1.f);
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  v = mx;
  const float d = mx - mn;
  s = mx == 0.f ? 0.f : d / mx;
  if (d == 0.f) {
    h = 0.f;
  } else if (mx == r) {
    h = 60.f * std::fmod((g - b) / d, 6.f);
  } else if (mx == g) {
    h = 60.f * ((b - r) / d + 2.f);
  } else {
    h = 60.f * ((r - g) / d + 4.f);
  }
  if (h < 0.f) h += 360.f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float c = v * s;
  const float hp = h / 60.f;
  const float x = c * (1.f - std::fabs(std::fmod(hp, 2.f) - 1.f));
  float r1 = 0, g1 = 0, b1 = 0;
  if (hp < 1) {
    r1 = c; g1 = x;
  } else if (hp < 2) {
    r1 = x; g1 = c;
  } else if (hp < 3) {
    g1 = c; b1 = x;
  } else if (hp < 4) {
    g1 = x; b1 = c;
  } else if (hp < 5) {
    r1 = x; b1 = c;
  } else {
    r1 = c; b1 = x;
  }
  const float m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

void apply_jitter(Image& img, const TransformDesc& t, Rng& rng) {
  // fixed sub-op order: brightness, contrast, saturation, hue
  const float fb = static_cast<float>(
      rng.uniform(std::max(0.f, 1.f - t.brightness), 1.f + t.brightness));
  for (auto& v : img.px) v *= fb;
  clamp01(img);

  const float fc = static_cast<float>(
      rng.uniform(std::max(0.f, 1.f - t.contrast), 1.f + t.contrast));
  double mean_gray = 0.0;
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) mean_gray += luma(img, y, x);
  }
  mean_gray /= static_cast<double>(img.h) * img.w;
  for (auto& v : img.px) {
    v = static_cast<float>((v - mean_gray) * fc + mean_gray);
  }
  clamp01(img);

  if (img.c >= 3) {
    const float fs = static_cast<float>(
        rng.uniform(std::max(0.f, 1.f - t.saturation), 1.f + t.saturation));
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        const float g = luma(img, y, x);
        for (int c = 0; c < img.c; ++c) {
          img.at(c, y, x) = g + (img.at(c, y, x) - g) * fs;
        }
      }
    }
    clamp01(img);

    const float dh = static_cast<float>(rng.uniform(-t.hue, t.hue)) * 360.f;
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        float h, s, v;
        rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x), h, s, v);
        h = std::fmod(h + dh + 360.f, 360.f);
        hsv_to_rgb(h, s, v, img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
      }
    }
    clamp01(img);
  }
}

void apply_grayscale(Image& img) {
  if (img.c < 3) return;
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      const float g = luma(img, y, x);
      for (int c = 0; c < img.c; ++c) img.at(c, y, x) = g;
    }
  }
}

void apply_blur(Image& img, const TransformDesc& t, Rng& rng) {
  const int k = t.kernel | 1;  // force odd
  const int half = k / 2;
  const double sigma = rng.uniform(t.sigma_min, t.sigma_max);
  std::vector<double> kern(k);
  double ksum = 0.0;
  for (int i = 0; i < k; ++i) {
    const double d = i - half;
    kern[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    ksum += kern[i];
  }
  for (auto& v : kern) v /= ksum;
  Image tmp = img;
  for (int c = 0; c < img.c; ++c) {
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i) {
          acc += kern[i] * sample_clamped(img, c, y, x + i - half);
        }
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
    }
  }
  for (int c = 0; c < img.c; ++c) {
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i) {
          acc += kern[i] * sample_clamped(tmp, c, y + i - half, x);
        }
        img.at(c, y, x) = static_cast<float>(acc);
      }
    }
  }
}

void apply_cutout(Image& img, const TransformDesc& t, Rng& rng) {
  const int cy = static_cast<int>(rng.uniform_int(img.h));
  const int cx = static_cast<int>(rng.uniform_int(img.w));
  const int half = t.cutout_size / 2;
  for (int c = 0; c < img.c; ++c) {
    for (int y = std::max(0, cy - half); y < std::min(img.h, cy + half + 1); ++y) {
      for (int x = std::max(0, cx - half); x < std::min(img.w, cx + half + 1);
           ++x) {
        img.at(c, y, x) = 0.f;
      }
    }
  }
}

void apply_rotation(Image& img, const TransformDesc& t, Rng& rng) {
  const double deg = rng.uniform(-t.degrees, t.degrees);
  const double rad = deg * M_PI / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (img.h - 1) / 2.0, cx = (img.w - 1) / 2.0;
  Image out = img;
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      // inverse map, clamp-to-edge
      const double dy = y - cy, dx = x - cx;
      const double sy = std::clamp(cs * dy + sn * dx + cy, 0.0,
                                   static_cast<double>(img.h - 1));
      const double sx = std::clamp(-sn * dy + cs * dx + cx, 0.0,
                                   static_cast<double>(img.w - 1));
      const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
      const int y1 = std::min(y0 + 1, img.h - 1);
      const int x1 = std::min(x0 + 1, img.w - 1);
      const double wy = sy - y0, wx = sx - x0;
      for (int c = 0; c < img.c; ++c) {
        const double top = img.at(c, y0, x0) * (1 - wx) + img.at(c, y0, x1) * wx;
        const double bot = img.at(c, y1, x0) * (1 - wx) + img.at(c, y1, x1) * wx;
        out.at(c, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  img = std::move(out);
}

Tensor finish(Image img, const AugmentPolicy& policy) {
  img = resize_bilinear(img, policy.out_h, policy.out_w);
  clamp01(img);
  for (int c = 0; c < img.c; ++c) {
    const float m = policy.norm_mean[std::min(c, 2)];
    const float s = policy.norm_std[std::min(c, 2)];
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        img.at(c, y, x) = (img.at(c, y, x) - m) / s;
      }
    }
  }
  return Tensor::from_data({img.c, img.h, img.w}, std::move(img.px));
}

Tensor one_view(const Image& input, const AugmentPolicy& policy, Rng& rng) {
  Image img = input;
  for (const auto& t : policy.transforms) {
    // the gate is always drawn so streams stay aligned across policies
    const bool fire = rng.uniform() < t.p;
    if (!fire) continue;
    switch (t.kind) {
      case TransformKind::RandomResizedCrop:
        apply_crop(img, t, policy.out_h, policy.out_w, rng);
        break;
      case TransformKind::HorizontalFlip:
        apply_flip(img);
        break;
      case TransformKind::ColorJitter:
        apply_jitter(img, t, rng);
        break;
      case TransformKind::Grayscale:
        apply_grayscale(img);
        break;
      case TransformKind::GaussianBlur:
        apply_blur(img, t, rng);
        break;
      case TransformKind::Cutout:
        apply_cutout(img, t, rng);
        break;
      case TransformKind::Rotation:
        apply_rotation(img, t, rng);
        break;
    }
  }
  return finish(std::move(img), policy);
}

const char* kind_name(TransformKind k) {
  switch (k) {
    case TransformKind::RandomResizedCrop: return "crop";
    case TransformKind::HorizontalFlip: return "flip";
    case TransformKind::ColorJitter: return "jitter";
    case TransformKind::Grayscale: return "grayscale";
    case TransformKind::GaussianBlur: return "blur";
    case TransformKind::Cutout: return "cutout";
    case TransformKind::Rotation: return "rotation";
  }
  return "?";
}

TransformKind kind_from(const std::string& s) {
  if (s == "crop") return TransformKind::RandomResizedCrop;
  if (s == "flip") return TransformKind::HorizontalFlip;
  if (s == "jitter") return TransformKind::ColorJitter;
  if (s == "grayscale") return TransformKind::Grayscale;
  if (s == "blur") return TransformKind::GaussianBlur;
  if (s == "cutout") return TransformKind::Cutout;
  if (s == "rotation") return TransformKind::Rotation;
  throw ContractError("augment: unknown transform kind '" + s + "'");
}

std::string fstr(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace

AugmentPolicy AugmentPolicy::simclr_default(int size) {
  AugmentPolicy p;
  p.out_h = p.out_w = size;
  TransformDesc crop;
  crop.kind = TransformKind::RandomResizedCrop;
  crop.p = 1.f;
  crop.scale_min = 0.2f;
  crop.scale_max = 1.f;
  p.transforms.push_back(crop);
  TransformDesc flip;
  flip.kind = TransformKind::HorizontalFlip;
  flip.p = 0.5f;
  p.transforms.push_back(flip);
  TransformDesc jitter;
  jitter.kind = TransformKind::ColorJitter;
  jitter.p = 0.8f;
  p.transforms.push_back(jitter);
  TransformDesc gray;
  gray.kind = TransformKind::Grayscale;
  gray.p = 0.2f;
  p.transforms.push_back(gray);
  TransformDesc blur;
  blur.kind = TransformKind::GaussianBlur;
  blur.p = 0.5f;
  p.transforms.push_back(blur);
  TransformDesc cutout;
  cutout.kind = TransformKind::Cutout;
  cutout.p = 0.f;
  p.transforms.push_back(cutout);
  TransformDesc rot;
  rot.kind = TransformKind::Rotation;
  rot.p = 0.f;
  p.transforms.push_back(rot);
  return p;
}

AugmentPolicy AugmentPolicy::identity(int size) {
  AugmentPolicy p;
  p.out_h = p.out_w = size;
  TransformDesc crop;
  crop.kind = TransformKind::RandomResizedCrop;
  crop.p = 0.f;
  crop.scale_min = 1.f;
  crop.scale_max = 1.f;
  crop.ratio_min = 1.f;
  crop.ratio_max = 1.f;
  p.transforms.push_back(crop);
  p.norm_mean = {0.f, 0.f, 0.f};
  p.norm_std = {1.f, 1.f, 1.f};
  return p;
}

AugmentPolicy AugmentPolicy::eval_only(int size) {
  AugmentPolicy p;
  p.out_h = p.out_w = size;
  return p;
}

std::string AugmentPolicy::serialize() const {
  std::ostringstream os;
  os << "out = " << out_h << 'x' << out_w << '\n';
  os << "norm_mean = " << fstr(norm_mean[0]) << ',' << fstr(norm_mean[1])
     << ',' << fstr(norm_mean[2]) << '\n';
  os << "norm_std = " << fstr(norm_std[0]) << ',' << fstr(norm_std[1]) << ','
     << fstr(norm_std[2]) << '\n';
  for (const auto& t : transforms) {
    os << "transform = " << kind_name(t.kind) << " p=" << fstr(t.p);
    switch (t.kind) {
      case TransformKind::RandomResizedCrop:
        os << " scale=" << fstr(t.scale_min) << ',' << fstr(t.scale_max)
           << " ratio=" << fstr(t.ratio_min) << ',' << fstr(t.ratio_max);
        break;
      case TransformKind::ColorJitter:
        os << " brightness=" << fstr(t.brightness)
           << " contrast=" << fstr(t.contrast)
           << " saturation=" << fstr(t.saturation) << " hue=" << fstr(t.hue);
        break;
      case TransformKind::GaussianBlur:
        os << " kernel=" << t.kernel << " sigma=" << fstr(t.sigma_min) << ','
           << fstr(t.sigma_max);
        break;
      case TransformKind::Cutout:
        os << " size=" << t.cutout_size;
        break;
      case TransformKind::Rotation:
        os << " degrees=" << fstr(t.degrees);
        break;
      default:
        break;
    }
    os << '\n';
  }
  return os.str();
}

AugmentPolicy AugmentPolicy::parse(const std::string& text) {
  AugmentPolicy p;
  p.transforms.clear();
  std::istringstream is(text);
  std::string line;
  auto split2 = [](const std::string& s, char sep, float& a, float& b) {
    const auto pos = s.find(sep);
    a = std::strtof(s.substr(0, pos).c_str(), nullptr);
    b = std::strtof(s.substr(pos + 1).c_str(), nullptr);
  };
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractError("augment: bad policy line '" + line + "'");
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "out") {
      std::sscanf(val.c_str(), "%dx%d", &p.out_h, &p.out_w);
    } else if (key == "norm_mean" || key == "norm_std") {
      auto& dst = key == "norm_mean" ? p.norm_mean : p.norm_std;
      std::sscanf(val.c_str(), "%f,%f,%f", &dst[0], &dst[1], &dst[2]);
    } else if (key == "transform") {
      std::istringstream ts(val);
      std::string kind_s;
      ts >> kind_s;
      TransformDesc t;
      t.kind = kind_from(kind_s);
      std::string tok;
      while (ts >> tok) {
        const auto teq = tok.find('=');
        if (teq == std::string::npos) {
          throw ContractError("augment: bad transform token '" + tok + "'");
        }
        const std::string k = tok.substr(0, teq);
        const std::string v = tok.substr(teq + 1);
        if (k == "p") {
          t.p = std::strtof(v.c_str(), nullptr);
        } else if (k == "scale") {
          split2(v, ',', t.scale_min, t.scale_max);
        } else if (k == "ratio") {
          split2(v, ',', t.ratio_min, t.ratio_max);
        } else if (k == "brightness") {
          t.brightness = std::strtof(v.c_str(), nullptr);
        } else if (k == "contrast") {
          t.contrast = std::strtof(v.c_str(), nullptr);
        } else if (k == "saturation") {
          t.saturation = std::strtof(v.c_str(), nullptr);
        } else if (k == "hue") {
          t.hue = std::strtof(v.c_str(), nullptr);
        } else if (k == "kernel") {
          t.kernel = std::atoi(v.c_str());
        } else if (k == "sigma") {
          split2(v, ',', t.sigma_min, t.sigma_max);
        } else if (k == "size") {
          t.cutout_size = std::atoi(v.c_str());
        } else if (k == "degrees") {
          t.degrees = std::strtof(v.c_str(), nullptr);
        } else {
          throw ContractError("augment: unknown transform key '" + k + "'");
        }
      }
      p.transforms.push_back(t);
    } else {
      throw ContractError("augment: unknown policy key '" + key + "'");
    }
  }
  return p;
}

std::vector<Tensor> make_views(const Tensor& image, const AugmentPolicy& policy,
                               Rng& rng, int n_views) {
  if (n_views < 2) {
    throw ContractError("make_views: contrastive use needs n_views >= 2");
  }
  const Image img = from_tensor(image);
  std::vector<Tensor> views;
  views.reserve(n_views);
  for (int v = 0; v < n_views; ++v) {
    Rng vrng = rng.split(static_cast<uint64_t>(v));
    views.push_back(one_view(img, policy, vrng));
  }
  return views;
}

Tensor augment_view(const Tensor& image, const AugmentPolicy& policy,
                    Rng& rng) {
  Rng vrng = rng.split(uint64_t{0});
  return one_view(from_tensor(image), policy, vrng);
}

Tensor apply_eval_transform(const Tensor& image, const AugmentPolicy& policy) {
  return finish(from_tensor(image), policy);
}

uint64_t augment_fallback_count() { return g_fallbacks.load(); }
void reset_augment_fallbacks() { g_fallbacks.store(0); }

}  // namespace scenelab
