#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "egic/codec.hpp"
#include "egic/data.hpp"
#include "egic/nn.hpp"

namespace egic::orp {

using ag::Var;

/// Residual predictor on G2's penultimate features. Structure mirrors the tail of the
/// decoder: a narrow residual block on F followed by a copy of G2's output conv, so a
/// freshly initialized head predicts exactly G2's image.
template <class T>
class OrpHead {
 public:
  static constexpr int kDefaultMidWidth = 6;

  OrpHead() = default;
  OrpHead(const codec::Decoder<T>& g2, std::uint64_t seed, int mid_width = kDefaultMidWidth) {
    Rng rng(mix_seed(seed, 0x0A9));
    const int F = g2.feature_channels();
    c1_ = nn::Conv<T>(ps_, "res.c1", F, mid_width, 3, 1, rng);
    c2_ = nn::Conv<T>(ps_, "res.c2", mid_width, F, 3, 1, rng);
    c2_.weight->value.fill(T(0));
    out_ = nn::Conv<T>(ps_, "out", F, 3, 3, 1, rng);
    out_.weight->value = g2.output_conv().weight->value;
    out_.bias->value = g2.output_conv().bias->value;
  }

  /// MSE_pred from the feature field.
  Var<T> operator()(const Var<T>& features) const {
    Var<T> h = ag::add(features, c2_(ag::leaky_relu(c1_(ag::leaky_relu(features)))));
    Var<T> img = out_(h);
    Tensor<T> half(img->shape(), T(0.5));
    return ag::add(img, ag::constant(std::move(half)));
  }

  nn::ParamStore<T>& params() { return ps_; }
  const nn::ParamStore<T>& params() const { return ps_; }

 private:
  nn::ParamStore<T> ps_;
  nn::Conv<T> c1_, c2_, out_;
};

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractViolation("alpha must be in [0, 1], got " + std::to_string(alpha));
}

/// g2 + (1 - alpha) * (mse_pred - g2). Both endpoints are returned as-is, so alpha = 1
/// reproduces G2 bit for bit and alpha = 0 reproduces the head's prediction.
template <class T>
Tensor<T> blend(const Tensor<T>& g2_out, const Tensor<T>& mse_pred, double alpha) {
  check_alpha(alpha);
  if (alpha == 1.0) return g2_out;
  if (alpha == 0.0) return mse_pred;
  EGIC_REQUIRE(g2_out.shape() == mse_pred.shape(), "ORP blend shape mismatch");
  Tensor<T> out(g2_out.shape());
  const double k = 1.0 - alpha;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double r = double(mse_pred[i]) - double(g2_out[i]);
    out[i] = static_cast<T>(double(g2_out[i]) + k * r);
  }
  return out;
}

/// Decoder-side ORP synthesis. The head is skipped entirely at alpha = 1.
template <class T>
Tensor<T> orp_output(const Tensor<T>& g2_out, const Tensor<T>& features, const OrpHead<T>& head, double alpha) {
  check_alpha(alpha);
  if (alpha == 1.0) return g2_out;
  ag::NoGrad ng;
  const auto pred = head(ag::constant(features))->value;
  EGIC_REQUIRE(pred.shape() == g2_out.shape(), "ORP head output does not match the image shape");
  return blend(g2_out, pred, alpha);
}

// ---------------------------------------------------------------------------
// Interpolation baselines

/// (1 - alpha) * x1 + alpha * x2.
template <class T>
Tensor<T> image_interpolate(const Tensor<T>& x1, const Tensor<T>& x2, double alpha) {
  EGIC_REQUIRE(x1.shape() == x2.shape(), "image_interpolate shape mismatch");
  if (alpha == 0.0) return x1;
  if (alpha == 1.0) return x2;
  Tensor<T> out(x1.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>((1.0 - alpha) * double(x1[i]) + alpha * double(x2[i]));
  return out;
}

template <class T>
using ParamSet = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
ParamSet<T> snapshot(const nn::ParamStore<T>& ps) {
  ParamSet<T> out;
  for (const auto& [name, v] : ps.items()) out.emplace_back(name, v->value);
  return out;
}

template <class T>
void load(nn::ParamStore<T>& ps, const ParamSet<T>& set) {
  EGIC_REQUIRE(set.size() == ps.size(), "parameter set does not match the network");
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& [name, v] = ps.items()[i];
    EGIC_REQUIRE(name == set[i].first && v->value.shape() == set[i].second.shape(),
                 "parameter set does not match the network at " + name);
    v->value = set[i].second;
  }
}

/// Per-parameter (1 - alpha) * theta1 + alpha * theta2.
template <class T>
ParamSet<T> weight_interpolate(const ParamSet<T>& a, const ParamSet<T>& b, double alpha) {
  if (a.size() != b.size()) throw ContractViolation("weight_interpolate: parameter counts differ");
  ParamSet<T> out;
  out.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second.shape() != b[i].second.shape())
      throw ContractViolation("weight_interpolate: structure mismatch at " + a[i].first);
    out.emplace_back(a[i].first, image_interpolate(a[i].second, b[i].second, alpha));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head training

struct OrpSettings {
  int steps = 1000;
  int batch_size = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Fits the head with alpha = 0, i.e. MSE(x, MSE_pred). E, P and G2 are evaluated under
/// NoGrad and never touched. `on_step(step, loss)` is called after every update.
template <class T, class StepFn>
void train_orp(const codec::Codec<T>& model, OrpHead<T>& head, nn::Adam<T>& opt,
               const std::vector<data::LabeledImage>& train, const OrpSettings& s, long first_step, StepFn on_step) {
  data::BatchSampler sampler(static_cast<int>(train.size()), s.batch_size, mix_seed(s.seed, 0x0A9B));
  for (long step = first_step; step < s.steps; ++step) {
    const auto b = data::make_batch(train, sampler.indices(step));
    const auto x = ag::constant(b.images.template cast<T>());
    Var<T> feats;
    {
      ag::NoGrad ng;
      auto y_hat = codec::quantize(model.encoder(x), codec::QuantMode::Round);
      feats = ag::constant(model.g2(y_hat).features->value);
    }
    auto loss = ag::mse(head(feats), x);
    opt.zero_grad();
    ag::backward(loss);
    const double l = loss->value[0];
    if (!std::isfinite(l)) throw Divergence("ORP training diverged at step " + std::to_string(step));
    opt.step();
    on_step(step, l);
  }
}

}  // namespace egic::orp
