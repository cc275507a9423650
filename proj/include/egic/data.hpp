#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egic/error.hpp"
#include "egic/image_io.hpp"
#include "egic/rng.hpp"
#include "egic/tensor.hpp"

namespace egic::data {

/// Label of the background class. Shape classes are 2..N.
inline constexpr int kBackground = 1;

struct LabeledImage {
  Tensor<float> image;  // 1x3xHxW, values k/255
  LabelMap labels;      // HxW, values in 1..N
  std::string id;
};

struct DatasetSpec {
  int num_samples = 64;
  int image_size = 64;
  int num_classes = 4;
  std::uint64_t seed = 0;
  int min_shapes = 1;
  int max_shapes = 4;

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2 (background plus one shape class)");
    if (num_classes > 255) throw ConfigError("num_classes must fit in an 8-bit label file");
    if (image_size <= 0 || image_size % 8 != 0) throw ConfigError("image_size must be a positive multiple of 8");
    if (num_samples < 0) throw ConfigError("num_samples must be >= 0");
    if (min_shapes < 0 || max_shapes < min_shapes) throw ConfigError("invalid shapes_per_image range");
  }

  bool operator==(const DatasetSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"num_samples", s.num_samples}, {"image_size", s.image_size}, {"num_classes", s.num_classes},
       {"seed", s.seed}, {"min_shapes", s.min_shapes}, {"max_shapes", s.max_shapes}};
}
inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  j.at("num_samples").get_to(s.num_samples);
  j.at("image_size").get_to(s.image_size);
  j.at("num_classes").get_to(s.num_classes);
  j.at("seed").get_to(s.seed);
  j.at("min_shapes").get_to(s.min_shapes);
  j.at("max_shapes").get_to(s.max_shapes);
}

namespace detail {

enum class ShapeKind { Rectangle, Ellipse, Triangle };

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0), f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline double quantize8(double v) { return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

struct Placed {
  int x0, y0, x1, y1;  // inclusive-exclusive box
};

inline bool overlaps(const Placed& a, const Placed& b) {
  return a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1;
}

inline bool inside(ShapeKind kind, const Placed& box, double px, double py) {
  const double w = box.x1 - box.x0, h = box.y1 - box.y0;
  const double u = (px - box.x0) / w, v = (py - box.y0) / h;  // box-relative in [0,1)
  switch (kind) {
    case ShapeKind::Rectangle: return u >= 0 && u < 1 && v >= 0 && v < 1;
    case ShapeKind::Ellipse: {
      const double dx = u - 0.5, dy = v - 0.5;
      return dx * dx + dy * dy <= 0.25;
    }
    case ShapeKind::Triangle:
      // apex at top centre, base along the bottom edge
      return v >= 0 && v < 1 && std::abs(u - 0.5) <= 0.5 * v;
  }
  return false;
}

}  // namespace detail

/// Generates sample `index` of the dataset described by `spec`. Independent of every other sample.
inline LabeledImage generate_sample(const DatasetSpec& spec, int index) {
  using detail::ShapeKind;
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const int S = spec.image_size;
  char id[16];
  std::snprintf(id, sizeof id, "s%06d", index);
  LabeledImage out{Tensor<float>(Shape{1, 3, S, S}), LabelMap(S, S, kBackground), id};

  // Textured background: low-saturation base colour, two oriented sinusoids, fine grain.
  const auto base = detail::hsv_to_rgb(rng.uniform(), rng.uniform(0.05, 0.25), rng.uniform(0.35, 0.65));
  const double f1 = rng.uniform(1.0, 4.0), f2 = rng.uniform(1.0, 4.0);
  const double th1 = rng.uniform(0, std::numbers::pi), th2 = rng.uniform(0, std::numbers::pi);
  const double amp = rng.uniform(0.04, 0.10);
  const double grain = rng.uniform(0.04, 0.08);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double u = static_cast<double>(x) / S, v = static_cast<double>(y) / S;
      const double tex = amp * (std::sin(2 * std::numbers::pi * f1 * (u * std::cos(th1) + v * std::sin(th1))) +
                                std::sin(2 * std::numbers::pi * f2 * (u * std::cos(th2) + v * std::sin(th2)))) /
                         2.0;
      const double noise = rng.uniform(-grain, grain);
      for (int c = 0; c < 3; ++c) out.image(0, c, y, x) = static_cast<float>(base[c] + tex + noise);
    }

  const int num_shapes = rng.uniform_int(spec.min_shapes, spec.max_shapes);
  const int shape_classes = spec.num_classes - 1;
  std::vector<detail::Placed> placed;
  for (int s = 0; s < num_shapes && shape_classes > 0; ++s) {
    const int cls = 2 + rng.uniform_int(0, shape_classes - 1);
    const auto kind = static_cast<ShapeKind>((cls - 2) % 3);
    const int lo = std::max(4, S * 3 / 16), hi = std::max(lo, S * 7 / 16);
    detail::Placed box{};
    for (int attempt = 0; attempt < 24; ++attempt) {
      const int bw = rng.uniform_int(lo, hi), bh = rng.uniform_int(lo, hi);
      const int x0 = rng.uniform_int(0, S - bw), y0 = rng.uniform_int(0, S - bh);
      box = {x0, y0, x0 + bw, y0 + bh};
      if (std::none_of(placed.begin(), placed.end(), [&](const auto& p) { return detail::overlaps(p, box); }))
        break;
    }
    placed.push_back(box);
    // each class owns a hue band so colour and geometry both carry the class
    const double hue = static_cast<double>(cls - 2) / shape_classes + rng.uniform(-0.04, 0.04);
    const auto col = detail::hsv_to_rgb(hue, rng.uniform(0.6, 0.9), rng.uniform(0.7, 0.95));
    const double shade = rng.uniform(-0.1, 0.1);
    const double shape_grain = rng.uniform(0.02, 0.05);
    for (int y = box.y0; y < box.y1; ++y)
      for (int x = box.x0; x < box.x1; ++x) {
        if (!detail::inside(kind, box, x + 0.5, y + 0.5)) continue;
        out.labels.at(y, x) = cls;
        const double grad = shade * (static_cast<double>(y - box.y0) / (box.y1 - box.y0) - 0.5) +
                            rng.uniform(-shape_grain, shape_grain);
        for (int c = 0; c < 3; ++c) out.image(0, c, y, x) = static_cast<float>(col[c] + grad);
      }
  }
  for (auto& v : out.image.vec()) v = static_cast<float>(detail::quantize8(v));
  return out;
}

/// Pure function of the spec; sample i depends only on (seed, i).
inline std::vector<LabeledImage> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<LabeledImage> out;
  out.reserve(spec.num_samples);
  for (int i = 0; i < spec.num_samples; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

// ---------------------------------------------------------------------------
// Padding

struct PaddedImage {
  Tensor<float> image;
  int original_h = 0;
  int original_w = 0;
};

/// Reflect index (edge not repeated); a length-1 axis replicates its only sample.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

template <class T>
Tensor<T> pad_reflect(const Tensor<T>& x, int out_h, int out_w) {
  EGIC_REQUIRE(out_h >= x.h() && out_w >= x.w(), "pad target smaller than input");
  Tensor<T> out(Shape{x.n(), x.c(), out_h, out_w});
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int y = 0; y < out_h; ++y)
        for (int xx = 0; xx < out_w; ++xx)
          out(n, c, y, xx) = x(n, c, reflect_index(y, x.h()), reflect_index(xx, x.w()));
  return out;
}

/// Rounds H and W up to multiples of `factor` with bottom/right reflect padding.
inline PaddedImage pad_to_factor(const Tensor<float>& x, int factor) {
  EGIC_REQUIRE(factor >= 1, "pad factor must be >= 1");
  const int H = (x.h() + factor - 1) / factor * factor;
  const int W = (x.w() + factor - 1) / factor * factor;
  return {pad_reflect(x, H, W), x.h(), x.w()};
}

/// Top-left anchored crop.
template <class T>
Tensor<T> crop_to_size(const Tensor<T>& x, int h, int w) {
  if (h > x.h() || w > x.w())
    throw ContractViolation("crop size " + std::to_string(h) + "x" + std::to_string(w) +
                            " exceeds input " + std::to_string(x.h()) + "x" + std::to_string(x.w()));
  Tensor<T> out(Shape{x.n(), x.c(), h, w});
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) out(n, c, y, xx) = x(n, c, y, xx);
  return out;
}

// ---------------------------------------------------------------------------
// Batching

/// Stateless batch order: epoch e is a permutation seeded by (seed, e), so the batch
/// for any step can be reproduced without replaying earlier steps.
class BatchSampler {
 public:
  BatchSampler(int dataset_size, int batch_size, std::uint64_t seed)
      : n_(dataset_size), b_(batch_size), seed_(seed) {
    EGIC_REQUIRE(n_ > 0 && b_ > 0, "batch sampler needs a non-empty dataset and batch");
  }

  std::vector<int> indices(long step) const {
    std::vector<int> out;
    out.reserve(b_);
    for (int k = 0; k < b_; ++k) {
      const long pos = step * b_ + k;
      const long epoch = pos / n_;
      if (epoch != cached_epoch_) {
        perm_.resize(n_);
        for (int i = 0; i < n_; ++i) perm_[i] = i;
        Rng rng(mix_seed(seed_, static_cast<std::uint64_t>(epoch) + 0x5151));
        rng.shuffle(perm_.begin(), perm_.end());
        cached_epoch_ = epoch;
      }
      out.push_back(perm_[pos % n_]);
    }
    return out;
  }

 private:
  int n_, b_;
  std::uint64_t seed_;
  mutable long cached_epoch_ = -1;
  mutable std::vector<int> perm_;
};

struct Batch {
  Tensor<float> images;  // Bx3xHxW
  std::vector<LabelMap> labels;
};

inline Batch make_batch(const std::vector<LabeledImage>& ds, const std::vector<int>& idx) {
  std::vector<Tensor<float>> imgs;
  Batch b;
  for (int i : idx) {
    imgs.push_back(ds.at(i).image);
    b.labels.push_back(ds.at(i).labels);
  }
  b.images = stack<float>(imgs);
  return b;
}

// ---------------------------------------------------------------------------
// Persistence

/// Writes <id>.png, <id>_labels.png and manifest.json.
inline void save_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                         const std::vector<LabeledImage>& items) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "egic-shapes";
  manifest["version"] = 1;
  manifest["spec"] = spec;
  manifest["samples"] = nlohmann::json::array();
  for (const auto& it : items) {
    io::write_png(dir / (it.id + ".png"), it.image);
    io::write_label_png(dir / (it.id + "_labels.png"), it.labels);
    manifest["samples"].push_back({{"id", it.id}, {"height", it.image.h()}, {"width", it.image.w()}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

inline std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir, DatasetSpec* spec_out = nullptr) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw InputError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed manifest: ") + e.what());
  }
  if (spec_out) *spec_out = manifest.at("spec").get<DatasetSpec>();
  std::vector<LabeledImage> out;
  for (const auto& s : manifest.at("samples")) {
    LabeledImage it;
    it.id = s.at("id").get<std::string>();
    it.image = io::read_png_rgb<float>(dir / (it.id + ".png"));
    it.labels = io::read_label_png(dir / (it.id + "_labels.png"));
    if (it.labels.h != it.image.h() || it.labels.w != it.image.w())
      throw InputError("label map size differs from image for " + it.id);
    out.push_back(std::move(it));
  }
  return out;
}

}  // namespace egic::data
