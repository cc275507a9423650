#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "egic/autograd.hpp"
#include "egic/data.hpp"
#include "egic/losses.hpp"
#include "egic/nn.hpp"

namespace egic::disc {

using ag::Var;

/// U-Net segmentation discriminator configuration. `down_channels[i]` is the width after
/// down block i; `up_channels[i]` the width after up block i (the last one must equal
/// `prep_width`, since the projection takes an inner product with the prepared latent).
struct OasisCConfig {
  int image_size = 64;
  int num_classes = 4;  // N semantic classes; the field has N+1 channels
  int latent_channels = 32;
  std::vector<int> down_channels{16, 32, 64, 64};
  std::vector<int> up_channels{64, 32, 16, 16};
  int prep_width = 16;

  int depth() const { return static_cast<int>(down_channels.size()); }

  void validate() const {
    if (depth() < 2) throw ConfigError("discriminator depth must be >= 2");
    if (static_cast<int>(up_channels.size()) != depth()) throw ConfigError("channel schedule lengths must match depth");
    if ((image_size >> depth()) < 4 || image_size % (1 << depth()) != 0)
      throw ConfigError("discriminator bottleneck must be at least 4x4 and evenly divide the image");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (up_channels.back() != prep_width) throw ConfigError("last up width must equal the latent pre-process width");
  }

  /// Full-size layout: six down/up blocks with the reference widths at 256 px.
  static OasisCConfig reference(int num_classes, int latent_channels) {
    OasisCConfig c;
    c.image_size = 256;
    c.num_classes = num_classes;
    c.latent_channels = latent_channels;
    c.down_channels = {128, 128, 256, 256, 512, 512};
    c.up_channels = {512, 256, 256, 128, 128, 64};
    c.prep_width = 64;
    return c;
  }
};

template <class T>
struct ResBlockDown {
  nn::Conv<T> c1, c2, skip;
  bool first = false;

  ResBlockDown() = default;
  ResBlockDown(nn::ParamStore<T>& ps, const std::string& name, int cin, int cout, bool is_first, Rng& rng)
      : c1(ps, name + ".c1", cin, cout, 3, 1, rng, true),
        c2(ps, name + ".c2", cout, cout, 3, 1, rng, true),
        skip(ps, name + ".skip", cin, cout, 1, 1, rng, true),
        first(is_first) {}

  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = c1(first ? x : ag::leaky_relu(x));
    h = ag::avg_pool2(c2(ag::leaky_relu(h)));
    return ag::add(h, ag::avg_pool2(skip(x)));
  }
};

template <class T>
struct ResBlockUp {
  nn::Conv<T> c1, c2, skip;

  ResBlockUp() = default;
  ResBlockUp(nn::ParamStore<T>& ps, const std::string& name, int cin, int cout, Rng& rng)
      : c1(ps, name + ".c1", cin, cout, 3, 1, rng, true),
        c2(ps, name + ".c2", cout, cout, 3, 1, rng, true),
        skip(ps, name + ".skip", cin, cout, 1, 1, rng, true) {}

  Var<T> operator()(const Var<T>& x) const {
    Var<T> up = ag::upsample2(x);
    Var<T> h = c2(ag::leaky_relu(c1(ag::leaky_relu(up))));
    // 1x1 conv commutes with nearest upsampling; run it at the lower resolution
    return ag::add(h, ag::upsample2(skip(x)));
  }
};

/// Latent pre-processing: 3x3 conv + leaky ReLU, then nearest resize to the image size.
template <class T>
struct LatentPrep {
  nn::Conv<T> conv;

  LatentPrep() = default;
  LatentPrep(nn::ParamStore<T>& ps, const std::string& name, int latent_channels, int width, Rng& rng,
             bool weight_normalized = true)
      : conv(ps, name, latent_channels, width, 3, 1, rng, weight_normalized) {}

  Var<T> operator()(const Var<T>& y, int target_h, int target_w) const {
    return ag::resize_nearest(ag::leaky_relu(conv(y)), target_h, target_w);
  }
};

/// Projection term: per-pixel inner product across channels.
template <class T>
Var<T> project(const Var<T>& features, const Var<T>& y_prep) {
  return ag::channel_dot(features, y_prep);
}

template <class T>
struct OasisOutput {
  Var<T> logits;      // B x (N+1) x H x W
  Var<T> features;    // final up-block features
  Var<T> bottleneck;  // deepest encoder features
};

/// OASIS-C: weight-normalized U-Net with skip concatenation, (N+1)-channel output and
/// pixel-wise projection conditioning on the latent.
template <class T>
class OasisC {
 public:
  OasisC() = default;
  OasisC(const OasisCConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0xD15C));
    int cin = 3;
    for (int i = 0; i < cfg.depth(); ++i) {
      down_.emplace_back(ps_, "down" + std::to_string(i), cin, cfg.down_channels[i], i == 0, rng);
      cin = cfg.down_channels[i];
    }
    for (int i = 0; i < cfg.depth(); ++i) {
      // input: previous up output concatenated with the matching skip (none for the first block)
      const int skip = i == 0 ? 0 : cfg.down_channels[cfg.depth() - 1 - i];
      const int in = (i == 0 ? cfg.down_channels.back() : cfg.up_channels[i - 1]) + skip;
      up_.emplace_back(ps_, "up" + std::to_string(i), in, cfg.up_channels[i], rng);
    }
    out_ = nn::Conv<T>(ps_, "out", cfg.up_channels.back(), cfg.num_classes + 1, 3, 1, rng, true);
    encoder_param_count_ = ps_.size();
    prep_ = LatentPrep<T>(ps_, "prep", cfg.latent_channels, cfg.prep_width, rng);
  }

  const OasisCConfig& config() const { return cfg_; }

  /// Encoder path only; returns every down-block output (skips), deepest last.
  std::vector<Var<T>> encode(const Var<T>& x) const {
    EGIC_REQUIRE(x->shape().c == 3, "discriminator expects RGB input");
    std::vector<Var<T>> skips;
    Var<T> h = x;
    for (const auto& d : down_) {
      h = d(h);
      skips.push_back(h);
    }
    return skips;
  }

  /// Unconditional segmentation forward (projection omitted).
  OasisOutput<T> forward_unconditional(const Var<T>& x) const {
    const auto skips = encode(x);
    Var<T> h = skips.back();
    const int D = cfg_.depth();
    for (int i = 0; i < D; ++i) {
      if (i > 0) h = ag::concat_channels(h, skips[D - 1 - i]);
      h = up_[i](h);
    }
    return {out_(ag::leaky_relu(h)), h, skips.back()};
  }

  /// Conditional forward: out + broadcast projection of the final features onto y_prep.
  OasisOutput<T> forward(const Var<T>& x, const Var<T>& y) const {
    auto base = forward_unconditional(x);
    Var<T> yp = prep_(y, x->shape().h, x->shape().w);
    Var<T> proj = project(base.features, yp);
    return {ag::add_to_channels(base.logits, proj), base.features, base.bottleneck};
  }

  Var<T> prep_latent(const Var<T>& y, int h, int w) const { return prep_(y, h, w); }

  /// Global-average-pooled bottleneck features, one row per batch element.
  std::vector<std::vector<double>> pooled_bottleneck(const Tensor<T>& images) const {
    ag::NoGrad ng;
    const auto b = encode(ag::constant(images)).back()->value;
    std::vector<std::vector<double>> out(b.n(), std::vector<double>(b.c(), 0.0));
    for (int n = 0; n < b.n(); ++n)
      for (int c = 0; c < b.c(); ++c) {
        double acc = 0;
        for (int y = 0; y < b.h(); ++y)
          for (int x = 0; x < b.w(); ++x) acc += b(n, c, y, x);
        out[n][c] = acc / static_cast<double>(b.h() * b.w());
      }
    return out;
  }

  nn::ParamStore<T>& params() { return ps_; }
  const nn::ParamStore<T>& params() const { return ps_; }
  /// Parameters of the unconditional segmentation network come first in the store.
  std::size_t segmentation_param_count() const { return encoder_param_count_; }

 private:
  OasisCConfig cfg_;
  nn::ParamStore<T> ps_;
  std::vector<ResBlockDown<T>> down_;
  std::vector<ResBlockUp<T>> up_;
  nn::Conv<T> out_;
  LatentPrep<T> prep_;
  std::size_t encoder_param_count_ = 0;
};

/// Concatenation-conditioned PatchGAN baseline: latent prepared to 12 channels, upsampled,
/// concatenated with the image, then three stride-2 convs and a 1-channel head.
template <class T>
class PatchGan {
 public:
  static constexpr int kPrepWidth = 12;

  PatchGan() = default;
  PatchGan(int latent_channels, std::uint64_t seed, int width = 16) {
    Rng rng(mix_seed(seed, 0x9A7C));
    prep_ = LatentPrep<T>(ps_, "prep", latent_channels, kPrepWidth, rng);
    c1_ = nn::Conv<T>(ps_, "c1", 3 + kPrepWidth, width, 3, 2, rng, true);
    c2_ = nn::Conv<T>(ps_, "c2", width, 2 * width, 3, 2, rng, true);
    c3_ = nn::Conv<T>(ps_, "c3", 2 * width, 4 * width, 3, 2, rng, true);
    c4_ = nn::Conv<T>(ps_, "c4", 4 * width, 1, 3, 1, rng, true);
  }

  Var<T> concat_input(const Var<T>& x, const Var<T>& y) const {
    return ag::concat_channels(x, prep_(y, x->shape().h, x->shape().w));
  }

  /// One logit per patch: B x 1 x H/8 x W/8.
  Var<T> operator()(const Var<T>& x, const Var<T>& y) const {
    Var<T> h = ag::leaky_relu(c1_(concat_input(x, y)));
    h = ag::leaky_relu(c2_(h));
    h = ag::leaky_relu(c3_(h));
    return c4_(h);
  }

  nn::ParamStore<T>& params() { return ps_; }
  const nn::ParamStore<T>& params() const { return ps_; }

 private:
  nn::ParamStore<T> ps_;
  LatentPrep<T> prep_;
  nn::Conv<T> c1_, c2_, c3_, c4_;
};

// ---------------------------------------------------------------------------
// Segmentation metrics

/// Per-pixel argmax over the first `num_classes` channels, returned as labels 1..N.
template <class T>
std::vector<LabelMap> predict_labels(const Tensor<T>& logits, int num_classes) {
  std::vector<LabelMap> out;
  for (int n = 0; n < logits.n(); ++n) {
    LabelMap m(logits.h(), logits.w());
    for (int y = 0; y < logits.h(); ++y)
      for (int x = 0; x < logits.w(); ++x) {
        int best = 0;
        for (int k = 1; k < num_classes; ++k)
          if (logits(n, k, y, x) > logits(n, best, y, x)) best = k;
        m.at(y, x) = best + 1;
      }
    out.push_back(std::move(m));
  }
  return out;
}

/// Confusion matrix [truth][prediction] over labels 1..N.
inline std::vector<std::vector<long>> confusion_matrix(const std::vector<LabelMap>& truth,
                                                       const std::vector<LabelMap>& pred, int num_classes) {
  EGIC_REQUIRE(truth.size() == pred.size(), "confusion matrix batch mismatch");
  std::vector<std::vector<long>> cm(num_classes, std::vector<long>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    EGIC_REQUIRE(truth[i].size() == pred[i].size(), "confusion matrix size mismatch");
    for (std::size_t p = 0; p < truth[i].size(); ++p) ++cm[truth[i].data[p] - 1][pred[i].data[p] - 1];
  }
  return cm;
}

/// Mean IoU over classes whose union is non-empty: TP / (row + column - TP).
inline double mean_iou(const std::vector<std::vector<long>>& cm) {
  const int N = static_cast<int>(cm.size());
  double acc = 0.0;
  int counted = 0;
  for (int c = 0; c < N; ++c) {
    long row = 0, col = 0;
    for (int k = 0; k < N; ++k) {
      row += cm[c][k];
      col += cm[k][c];
    }
    const long uni = row + col - cm[c][c];
    if (uni == 0) continue;
    acc += static_cast<double>(cm[c][c]) / static_cast<double>(uni);
    ++counted;
  }
  return counted ? acc / counted : 0.0;
}

struct PretrainSettings {
  int steps = 2000;
  int batch_size = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int area_threshold = 64 * 64;
};

struct PretrainResult {
  double miou = 0.0;
  double initial_miou = 0.0;
  std::vector<double> losses;
};

/// Segmentation mIoU of the unconditional network on a labeled set.
template <class T>
double evaluate_miou(const OasisC<T>& d, const std::vector<data::LabeledImage>& set, int batch = 8) {
  ag::NoGrad ng;
  std::vector<LabelMap> truth, pred;
  for (std::size_t i = 0; i < set.size(); i += batch) {
    std::vector<int> idx;
    for (std::size_t k = i; k < std::min(set.size(), i + batch); ++k) idx.push_back(static_cast<int>(k));
    const auto b = data::make_batch(set, idx);
    const auto logits = d.forward_unconditional(ag::constant(b.images.template cast<T>())).logits->value;
    auto p = predict_labels(logits, d.config().num_classes);
    truth.insert(truth.end(), b.labels.begin(), b.labels.end());
    pred.insert(pred.end(), p.begin(), p.end());
  }
  return mean_iou(confusion_matrix(truth, pred, d.config().num_classes));
}

/// Trains the unconditional U-Net on N-class pixel-weighted CE (fake channel and projection
/// untouched) and reports held-out mIoU.
template <class T>
PretrainResult pretrain_segmentation(OasisC<T>& d, const std::vector<data::LabeledImage>& train,
                                     const std::vector<data::LabeledImage>& held_out, const PretrainSettings& s) {
  PretrainResult r;
  r.initial_miou = evaluate_miou(d, held_out);
  if (s.steps > 0) {
    // Projection parameters receive no gradient here and keep their init.
    nn::Adam<T> opt({&d.params()}, nn::AdamSettings{s.lr});
    data::BatchSampler sampler(static_cast<int>(train.size()), s.batch_size, mix_seed(s.seed, 0x5E6));
    const int N = d.config().num_classes;
    for (int step = 0; step < s.steps; ++step) {
      const auto b = data::make_batch(train, sampler.indices(step));
      const auto w = loss::pixel_weights<T>(b.labels, s.area_threshold);
      auto out = d.forward_unconditional(ag::constant(b.images.template cast<T>()));
      auto seg = ag::slice_channels(out.logits, 0, N);
      auto l = loss::weighted_ce(seg, b.labels, w, loss::CeTarget::Segmentation);
      opt.zero_grad();
      ag::backward(l);
      if (!std::isfinite(static_cast<double>(l->value[0]))) throw Divergence("segmentation pretraining diverged");
      opt.step();
      r.losses.push_back(l->value[0]);
    }
  }
  r.miou = evaluate_miou(d, held_out);
  return r;
}

}  // namespace egic::disc
