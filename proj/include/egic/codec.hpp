#pragma once

#include <bit>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "egic/autograd.hpp"
#include "egic/losses.hpp"
#include "egic/nn.hpp"

namespace egic::codec {

using ag::Var;

struct CodecConfig {
  int latent_channels = 32;
  int downsample_factor = 8;
  int base_width = 32;
  int hyper_channels = 16;
  double lambda = 1.0;  // weight on bits per pixel
  bool use_hyperprior = true;

  void validate() const {
    if (latent_channels < 0) throw ConfigError("latent_channels must be >= 0");
    if (downsample_factor < 2 || !std::has_single_bit(static_cast<unsigned>(downsample_factor)))
      throw ConfigError("downsample_factor must be a power of two >= 2");
    if (base_width < 2) throw ConfigError("base_width must be >= 2");
    if (use_hyperprior && hyper_channels < 1) throw ConfigError("hyper_channels must be >= 1");
    if (!(lambda > 0)) throw ConfigError("lambda must be > 0");
  }
  int levels() const { return std::countr_zero(static_cast<unsigned>(downsample_factor)); }
  bool operator==(const CodecConfig&) const = default;
};

/// Lower bound applied to every Gaussian scale.
inline constexpr double kScaleFloor = 1e-2;
/// Lower bound on per-symbol likelihood inside the rate estimate.
inline constexpr double kLikelihoodFloor = 1e-9;

// ---------------------------------------------------------------------------
// Quantization

enum class QuantMode { Noise, Round, RoundSte };

/// noise: + U(-0.5, 0.5); round: nearest integer (half to even), no gradient;
/// round_ste: rounds forward, identity gradient backward.
template <class T>
Var<T> quantize(const Var<T>& v, QuantMode mode, Rng* rng = nullptr) {
  switch (mode) {
    case QuantMode::Noise: {
      EGIC_REQUIRE(rng != nullptr, "noise quantization needs a random source");
      Tensor<T> u(v->shape());
      for (auto& e : u.vec()) e = static_cast<T>(rng->uniform() - 0.5);
      return ag::add(v, ag::constant(std::move(u)));
    }
    case QuantMode::Round: {
      Tensor<T> r = v->value;
      for (auto& e : r.vec()) e = std::nearbyint(e);
      return ag::constant(std::move(r));
    }
    case QuantMode::RoundSte:
      return ag::round_ste(v);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Discretized Gaussian likelihood

inline double std_normal_cdf(double t) { return 0.5 * std::erfc(-t / std::numbers::sqrt2); }
inline double std_normal_pdf(double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); }

/// Probability mass of the integer bin [y-0.5, y+0.5] under N(mu, sigma), scale floored.
inline double gaussian_bin_mass(double y, double mu, double sigma) {
  sigma = std::max(sigma, kScaleFloor);
  const double v = std::abs(y - mu);
  return std_normal_cdf((0.5 - v) / sigma) - std_normal_cdf((-0.5 - v) / sigma);
}

/// Sum over elements of -log2 P(y) with P the discretized Gaussian bin mass.
/// Differentiable w.r.t. y, mu and sigma (sigma below the floor gets no gradient).
template <class T>
Var<T> gaussian_bits(const Var<T>& y, const Var<T>& mu, const Var<T>& sigma) {
  EGIC_REQUIRE(y->shape() == mu->shape() && y->shape() == sigma->shape(), "gaussian_bits shape mismatch");
  const std::size_t n = y->value.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::max(gaussian_bin_mass(y->value[i], mu->value[i], sigma->value[i]), kLikelihoodFloor);
    total -= std::log2(p);
  }
  return ag::detail::make_result<T>(Tensor<T>::scalar(static_cast<T>(total)), {y, mu, sigma}, [y, mu, sigma, n](ag::Node<T>& self) {
    const double up = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) {
      const double s_raw = sigma->value[i];
      const double s = std::max(s_raw, kScaleFloor);
      const double d = double(y->value[i]) - double(mu->value[i]);
      const double v = std::abs(d);
      const double a = (0.5 - v) / s, b = (-0.5 - v) / s;
      const double p = std_normal_cdf(a) - std_normal_cdf(b);
      if (p < kLikelihoodFloor) continue;
      const double dbits_dp = -1.0 / (p * std::numbers::ln2);
      const double dp_dv = (-std_normal_pdf(a) + std_normal_pdf(b)) / s;
      const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      const double gv = up * dbits_dp * dp_dv * sgn;
      if (y->requires_grad) y->ensure_grad()[i] += static_cast<T>(gv);
      if (mu->requires_grad) mu->ensure_grad()[i] -= static_cast<T>(gv);
      if (sigma->requires_grad && s_raw >= kScaleFloor) {
        const double dp_ds = (-a * std_normal_pdf(a) + b * std_normal_pdf(b)) / s;
        sigma->ensure_grad()[i] += static_cast<T>(up * dbits_dp * dp_ds);
      }
    }
  });
}

/// Broadcasts per-channel 1xCx1x1 parameters to the shape of `like`.
template <class T>
Var<T> broadcast_channels(const Var<T>& per_channel, const Shape& like) {
  EGIC_REQUIRE(per_channel->shape() == (Shape{1, like.c, 1, 1}), "per-channel parameter shape mismatch");
  Tensor<T> out(like);
  const std::size_t plane = like.plane();
  for (int n = 0; n < like.n; ++n)
    for (int c = 0; c < like.c; ++c)
      std::fill_n(out.data() + (static_cast<std::size_t>(n) * like.c + c) * plane, plane, per_channel->value[c]);
  return ag::detail::make_result<T>(std::move(out), {per_channel}, [per_channel, like, plane](ag::Node<T>& self) {
    auto& g = per_channel->ensure_grad();
    for (int n = 0; n < like.n; ++n)
      for (int c = 0; c < like.c; ++c) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(n) * like.c + c) * plane;
        T acc = T(0);
        for (std::size_t i = 0; i < plane; ++i) acc += src[i];
        g[c] += acc;
      }
  });
}

// ---------------------------------------------------------------------------
// Networks

/// Strided-convolution analysis transform E.
template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const CodecConfig& cfg, Rng& rng) : factor_(cfg.downsample_factor) {
    const int W = cfg.base_width;
    for (int l = 0; l < cfg.levels(); ++l)
      down_.emplace_back(ps_, "down" + std::to_string(l), l == 0 ? 3 : W, W, 5, 2, rng);
    res_ = nn::ResBlock<T>(ps_, "res", W, rng);
    out_ = nn::Conv<T>(ps_, "out", W, cfg.latent_channels, 3, 1, rng);
  }

  /// Continuous latent, h = H / factor.
  Var<T> operator()(const Var<T>& x) const {
    const Shape s = x->shape();
    if (s.h % factor_ != 0 || s.w % factor_ != 0)
      throw ContractViolation("analyze: input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                              " is not padded to a multiple of " + std::to_string(factor_));
    Var<T> h = x;
    for (const auto& c : down_) h = ag::leaky_relu(c(h));
    return out_(res_(h));
  }

  nn::ParamStore<T>& params() { return ps_; }
  const nn::ParamStore<T>& params() const { return ps_; }

 private:
  int factor_ = 8;
  nn::ParamStore<T> ps_;
  std::vector<nn::Conv<T>> down_;
  nn::ResBlock<T> res_;
  nn::Conv<T> out_;
};

template <class T>
struct SynthesisOutput {
  Var<T> image;     // unclamped reconstruction
  Var<T> features;  // penultimate feature field F
};

/// Upsampling synthesis transform (G1 and G2 share this architecture).
template <class T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const CodecConfig& cfg, Rng& rng) : latent_channels_(cfg.latent_channels) {
    const int W = cfg.base_width;
    in_ = nn::Conv<T>(ps_, "in", cfg.latent_channels, W, 3, 1, rng);
    res_ = nn::ResBlock<T>(ps_, "res", W, rng);
    int ch = W;
    for (int l = 0; l < cfg.levels(); ++l) {
      const int next = l + 1 == cfg.levels() ? std::max(4, W / 2) : W;
      up_.emplace_back(ps_, "up" + std::to_string(l), ch, next, 3, 1, rng);
      ch = next;
    }
    feature_channels_ = ch;
    out_ = nn::Conv<T>(ps_, "out", ch, 3, 3, 1, rng);
  }

  SynthesisOutput<T> operator()(const Var<T>& y) const {
    if (y->shape().c != latent_channels_)
      throw ContractViolation("synthesize: latent has " + std::to_string(y->shape().c) + " channels, expected " +
                              std::to_string(latent_channels_));
    Var<T> h = res_(ag::leaky_relu(in_(y)));
    for (const auto& c : up_) h = ag::leaky_relu(c(ag::upsample2(h)));
    Var<T> img = out_(h);
    Tensor<T> half(img->shape(), T(0.5));
    return {ag::add(img, ag::constant(std::move(half))), h};
  }

  int feature_channels() const { return feature_channels_; }
  const nn::Conv<T>& output_conv() const { return out_; }
  nn::ParamStore<T>& params() { return ps_; }
  const nn::ParamStore<T>& params() const { return ps_; }

 private:
  int latent_channels_ = 0;
  int feature_channels_ = 0;
  nn::ParamStore<T> ps_;
  nn::Conv<T> in_;
  nn::ResBlock<T> res_;
  std::vector<nn::Conv<T>> up_;
  nn::Conv<T> out_;
};

template <class T>
Tensor<T> clamp01(Tensor<T> x) {
  for (auto& v : x.vec()) v = std::clamp(v, T(0), T(1));
  return x;
}

template <class T>
struct RateTerms {
  Var<T> y_bits;
  Var<T> z_bits;  // zero scalar without hyperprior
  Var<T> total;
};

/// Per-element Gaussian parameters for coding.
struct GaussianField {
  Shape shape;
  std::vector<double> mean;
  std::vector<double> scale;
};

/// Learned entropy model P: mean-scale hyperprior (z coded under a per-channel Gaussian prior)
/// or a per-channel factorized Gaussian fallback.
template <class T>
class EntropyModel {
 public:
  EntropyModel() = default;
  EntropyModel(const CodecConfig& cfg, Rng& rng) : hyper_(cfg.use_hyperprior), latent_channels_(cfg.latent_channels) {
    const double init_scale_raw = std::log(std::expm1(1.0));  // softplus^-1(1)
    if (hyper_) {
      const int Ch = cfg.hyper_channels, Cy = cfg.latent_channels;
      ha1_ = nn::Conv<T>(ps_, "ha1", Cy, Ch, 3, 1, rng);
      ha2_ = nn::Conv<T>(ps_, "ha2", Ch, Ch, 3, 2, rng);
      hs1_ = nn::Conv<T>(ps_, "hs1", Ch, Ch, 3, 1, rng);
      hs2_ = nn::Conv<T>(ps_, "hs2", Ch, 2 * Cy, 3, 1, rng);
      prior_mean_ = ps_.add("z_prior.mean", Tensor<T>(Shape{1, Ch, 1, 1}));
      prior_scale_ = ps_.add("z_prior.scale_raw", Tensor<T>(Shape{1, Ch, 1, 1}, static_cast<T>(init_scale_raw)));
    } else {
      prior_mean_ = ps_.add("y_prior.mean", Tensor<T>(Shape{1, cfg.latent_channels, 1, 1}));
      prior_scale_ = ps_.add("y_prior.scale_raw",
                             Tensor<T>(Shape{1, cfg.latent_channels, 1, 1}, static_cast<T>(init_scale_raw)));
    }
  }

  bool has_hyperprior() const { return hyper_; }

  /// Continuous hyper-latent from the continuous latent.
  Var<T> hyper_analyze(const Var<T>& v) const { return ha2_(ag::leaky_relu(ha1_(v))); }

  /// (mean, scale) of y given the quantized hyper-latent.
  std::pair<Var<T>, Var<T>> hyper_synthesize(const Var<T>& z_hat, int out_h, int out_w) const {
    Var<T> h = ag::leaky_relu(hs1_(ag::resize_nearest(z_hat, out_h, out_w)));
    Var<T> params = hs2_(h);
    const int Cy = latent_channels_;
    return {ag::slice_channels(params, 0, Cy), ag::softplus(ag::slice_channels(params, Cy, Cy))};
  }

  /// Rate terms in bits. `y_q` is the quantized (or noisy) latent; `v` the continuous latent
  /// feeding the hyper-analysis; `z_mode` selects noise (training) or rounding.
  RateTerms<T> rate(const Var<T>& v, const Var<T>& y_q, QuantMode z_mode, Rng* rng) const {
    if (!hyper_) {
      auto mu = broadcast_channels(prior_mean_, y_q->shape());
      auto sigma = broadcast_channels(ag::softplus(prior_scale_), y_q->shape());
      auto yb = gaussian_bits(y_q, mu, sigma);
      auto zero = ag::constant(Tensor<T>::scalar(T(0)));
      return {yb, zero, yb};
    }
    auto z_q = quantize(hyper_analyze(v), z_mode == QuantMode::RoundSte ? QuantMode::Round : z_mode, rng);
    return rate_given_z(y_q, z_q);
  }

  RateTerms<T> rate_given_z(const Var<T>& y_q, const Var<T>& z_q) const {
    auto zmu = broadcast_channels(prior_mean_, z_q->shape());
    auto zsig = broadcast_channels(ag::softplus(prior_scale_), z_q->shape());
    auto zb = gaussian_bits(z_q, zmu, zsig);
    auto [mu, sigma] = hyper_synthesize(z_q, y_q->shape().h, y_q->shape().w);
    auto yb = gaussian_bits(y_q, mu, sigma);
    return {yb, zb, ag::add(yb, zb)};
  }

  /// Per-channel prior of the hyper-latent (or of y for the factorized model).
  std::vector<std::pair<double, double>> channel_prior() const {
    std::vector<std::pair<double, double>> out;
    for (std::size_t c = 0; c < prior_mean_->value.size(); ++c) {
      const double raw = prior_scale_->value[c];
      out.emplace_back(prior_mean_->value[c], raw > 20 ? raw : std::log1p(std::exp(raw)));
    }
    return out;
  }

  /// Conditional parameters of y for coding, given the integer hyper-latent.
  GaussianField y_field(const Tensor<T>& z_hat, const Shape& y_shape) const {
    ag::NoGrad ng;
    GaussianField f{y_shape, {}, {}};
    if (hyper_) {
      auto [mu, sigma] = hyper_synthesize(ag::constant(z_hat), y_shape.h, y_shape.w);
      EGIC_REQUIRE(mu->shape() == y_shape, "hyper-synthesis output does not match latent shape");
      f.mean.assign(mu->value.vec().begin(), mu->value.vec().end());
      f.scale.assign(sigma->value.vec().begin(), sigma->value.vec().end());
    } else {
      const auto prior = channel_prior();
      f.mean.resize(y_shape.size());
      f.scale.resize(y_shape.size());
      const std::size_t plane = y_shape.plane();
      for (std::size_t i = 0; i < y_shape.size(); ++i) {
        const auto c = (i / plane) % y_shape.c;
        f.mean[i] = prior[c].first;
        f.scale[i] = prior[c].second;
      }
    }
    return f;
  }

  nn::ParamStore<T>& params() { return ps_; }
  const nn::ParamStore<T>& params() const { return ps_; }

  /// Model id written into bitstreams.
  std::uint64_t digest() const { return ps_.digest() ^ (hyper_ ? 0x4859ULL : 0x4641ULL); }

 private:
  bool hyper_ = true;
  int latent_channels_ = 0;
  nn::ParamStore<T> ps_;
  nn::Conv<T> ha1_, ha2_, hs1_, hs2_;
  Var<T> prior_mean_, prior_scale_;
};

/// lambda * (bits / pixels) + distortion.
template <class T>
Var<T> rd_loss(const Var<T>& bits, double pixels, const Var<T>& distortion_value, double lambda) {
  return ag::add(ag::scale(bits, static_cast<T>(lambda / pixels)), distortion_value);
}

/// Full codec: E, P, G1 and (after stage two) G2.
template <class T>
struct Codec {
  CodecConfig config;
  Encoder<T> encoder;
  EntropyModel<T> entropy;
  Decoder<T> g1;
  Decoder<T> g2;

  Codec() = default;
  Codec(const CodecConfig& cfg, std::uint64_t seed) : config(cfg) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0xC0DEC));
    encoder = Encoder<T>(cfg, rng);
    entropy = EntropyModel<T>(cfg, rng);
    g1 = Decoder<T>(cfg, rng);
    // G2 starts as an exact copy of G1
    g2 = Decoder<T>(cfg, rng);
    g2.params().copy_from(g1.params());
  }

  Shape latent_shape(int n, int h, int w) const {
    return {n, config.latent_channels, h / config.downsample_factor, w / config.downsample_factor};
  }
  Shape hyper_shape(const Shape& y) const {
    if (!config.use_hyperprior) return {0, 0, 0, 0};
    return {y.n, config.hyper_channels, (y.h + 1) / 2, (y.w + 1) / 2};
  }
};

}  // namespace egic::codec
