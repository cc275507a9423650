#pragma once

// Training objectives: distortion, pixel weighting, (N+1)-class cross entropy for the
// segmentation discriminator, LabelMix, the non-saturating baseline pair, the focal
// frequency probe and the ORP objective.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <numeric>
#include <queue>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "egic/autograd.hpp"
#include "egic/nn.hpp"

namespace egic::loss {

using ag::Var;

// ---------------------------------------------------------------------------
// Connected components

struct Components {
  LabelMap id;                  // component index per pixel, 0-based, raster first-encounter order
  std::vector<int> area;        // pixels per component
  std::vector<int> class_of;    // label value per component
};

/// 4-connected components of equal-label regions.
inline Components connected_components(const LabelMap& labels) {
  Components out{LabelMap(labels.h, labels.w, -1), {}, {}};
  std::vector<std::pair<int, int>> queue;
  for (int y = 0; y < labels.h; ++y)
    for (int x = 0; x < labels.w; ++x) {
      if (out.id.at(y, x) >= 0) continue;
      const int comp = static_cast<int>(out.area.size());
      const int cls = labels.at(y, x);
      int area = 0;
      queue.clear();
      queue.emplace_back(y, x);
      out.id.at(y, x) = comp;
      for (std::size_t head = 0; head < queue.size(); ++head) {
        const auto [cy, cx] = queue[head];
        ++area;
        constexpr int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || nx < 0 || ny >= labels.h || nx >= labels.w) continue;
          if (out.id.at(ny, nx) >= 0 || labels.at(ny, nx) != cls) continue;
          out.id.at(ny, nx) = comp;
          queue.emplace_back(ny, nx);
        }
      }
      out.area.push_back(area);
      out.class_of.push_back(cls);
    }
  return out;
}

/// Pixel weight map with values in {1, small_weight}: components strictly smaller than
/// `area_threshold` pixels get `small_weight`.
template <class T = float>
Tensor<T> pixel_weights(const LabelMap& labels, int area_threshold = 64 * 64, T small_weight = T(3)) {
  const Components cc = connected_components(labels);
  Tensor<T> w(Shape{1, 1, labels.h, labels.w});
  for (std::size_t i = 0; i < labels.size(); ++i)
    w[i] = cc.area[cc.id.data[i]] < area_threshold ? small_weight : T(1);
  return w;
}

template <class T = float>
Tensor<T> pixel_weights(const std::vector<LabelMap>& batch, int area_threshold = 64 * 64) {
  std::vector<Tensor<T>> maps;
  for (const auto& l : batch) maps.push_back(pixel_weights<T>(l, area_threshold));
  return stack<T>(maps);
}

/// Binary mask drawing one fair coin per connected segment.
inline LabelMap labelmix_mask(const LabelMap& labels, std::uint64_t seed) {
  const Components cc = connected_components(labels);
  Rng rng(mix_seed(seed, 0x4C4D));
  std::vector<int> coin(cc.area.size());
  for (auto& c : coin) c = rng.coin() ? 1 : 0;
  LabelMap m(labels.h, labels.w);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = coin[cc.id.data[i]];
  return m;
}

template <class T>
Tensor<T> mask_tensor(const std::vector<LabelMap>& masks) {
  EGIC_REQUIRE(!masks.empty(), "empty mask batch");
  Tensor<T> out(Shape{static_cast<int>(masks.size()), 1, masks[0].h, masks[0].w});
  std::size_t k = 0;
  for (const auto& m : masks)
    for (int v : m.data) out[k++] = static_cast<T>(v);
  return out;
}

// ---------------------------------------------------------------------------
// Cross entropy over the (N+1)-class discriminator field

// Segmentation: plain K-class field (no fake channel), labels 1..K.
enum class CeTarget { RealClasses, FakeClass, Segmentation };

/// Mean over batch and pixels of -w * log softmax(logits)[target]. `weights` is Bx1xHxW
/// or empty (all ones). Real targets use label-1 as the channel; the fake target is the
/// last channel and ignores the weights.
template <class T>
Var<T> weighted_ce(const Var<T>& logits, const std::vector<LabelMap>& labels, const Tensor<T>& weights,
                   CeTarget target) {
  const Shape s = logits->shape();
  const int K = s.c;
  EGIC_REQUIRE(static_cast<int>(labels.size()) == s.n, "label batch size mismatch");
  const bool use_w = target != CeTarget::FakeClass && !weights.empty();
  if (use_w) EGIC_REQUIRE(weights.shape() == (Shape{s.n, 1, s.h, s.w}), "weight map shape mismatch");
  const std::size_t plane = s.plane();
  std::vector<int> tgt(static_cast<std::size_t>(s.n) * plane);
  for (int n = 0; n < s.n; ++n) {
    EGIC_REQUIRE(labels[n].h == s.h && labels[n].w == s.w, "label map does not match logits");
    for (std::size_t i = 0; i < plane; ++i) {
      if (target == CeTarget::FakeClass) {
        tgt[n * plane + i] = K - 1;
      } else {
        const int l = labels[n].data[i];
        const int max_label = target == CeTarget::Segmentation ? K : K - 1;
        if (l < 1 || l > max_label) throw ContractViolation("label " + std::to_string(l) + " outside 1.." + std::to_string(max_label));
        tgt[n * plane + i] = l - 1;
      }
    }
  }
  const double inv = 1.0 / (static_cast<double>(s.n) * plane);
  Buffer<T> probs(static_cast<std::size_t>(s.n) * K * plane);
  double total = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < plane; ++i) {
      double mx = -INFINITY;
      for (int k = 0; k < K; ++k) mx = std::max(mx, double(logits->value[(n * K + k) * plane + i]));
      double z = 0.0;
      for (int k = 0; k < K; ++k) z += std::exp(double(logits->value[(n * K + k) * plane + i]) - mx);
      const double lse = mx + std::log(z);
      for (int k = 0; k < K; ++k)
        probs[(n * K + k) * plane + i] = static_cast<T>(std::exp(double(logits->value[(n * K + k) * plane + i]) - lse));
      const int t = tgt[n * plane + i];
      const double w = use_w ? double(weights[n * plane + i]) : 1.0;
      total += w * (lse - double(logits->value[(n * K + t) * plane + i]));
    }
  return ag::detail::make_result<T>(
      Tensor<T>::scalar(static_cast<T>(total * inv)), {logits},
      [logits, probs = std::move(probs), tgt = std::move(tgt), weights, use_w, s, K, plane, inv](ag::Node<T>& self) {
        auto& g = logits->ensure_grad();
        const double up = double(self.grad[0]) * inv;
        for (int n = 0; n < s.n; ++n)
          for (std::size_t i = 0; i < plane; ++i) {
            const double w = (use_w ? double(weights[n * plane + i]) : 1.0) * up;
            const int t = tgt[n * plane + i];
            for (int k = 0; k < K; ++k) {
              const double p = probs[(n * K + k) * plane + i];
              g[(n * K + k) * plane + i] += static_cast<T>(w * (p - (k == t ? 1.0 : 0.0)));
            }
          }
      });
}

/// Generator side of the segmentation objective: beta * weighted CE against true classes.
template <class T>
Var<T> generator_adv_oasis(const Var<T>& logits_fake_input, const std::vector<LabelMap>& labels,
                           const Tensor<T>& weights, T beta) {
  if (beta == T(0)) return ag::constant(Tensor<T>::scalar(T(0)));
  return ag::scale(weighted_ce(logits_fake_input, labels, weights, CeTarget::RealClasses), beta);
}

/// Weighted CE on reals against true labels plus unweighted CE on fakes against class N+1.
template <class T>
Var<T> discriminator_loss_oasis(const Var<T>& logits_real, const Var<T>& logits_fake,
                                const std::vector<LabelMap>& labels, const Tensor<T>& weights) {
  return ag::add(weighted_ce(logits_real, labels, weights, CeTarget::RealClasses),
                 weighted_ce(logits_fake, labels, Tensor<T>(), CeTarget::FakeClass));
}

/// LabelMix consistency: mean squared difference between D's logits on the mixed image
/// and the same mix applied to D's logits on x and x'.
template <class T>
Var<T> labelmix_consistency(const std::function<Var<T>(const Var<T>&)>& d_logits, const Var<T>& x,
                            const Var<T>& x_fake, const Tensor<T>& mask) {
  const Var<T> mixed = ag::mix(x, x_fake, mask);
  const Var<T> lhs = d_logits(mixed);
  const Var<T> rhs = ag::mix(d_logits(x), d_logits(x_fake), mask);
  return ag::mse(lhs, rhs);
}

// ---------------------------------------------------------------------------
// Non-saturating baseline

/// Mean over elements of -log sigmoid(l) (target 1) or -log(1 - sigmoid(l)) (target 0).
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, bool target_real) {
  const std::size_t n = logits->value.size();
  const double sign = target_real ? -1.0 : 1.0;  // loss = softplus(sign * l)
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = sign * double(logits->value[i]);
    total += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
  }
  return ag::detail::make_result<T>(Tensor<T>::scalar(static_cast<T>(total / n)), {logits},
                                    [logits, sign, n](ag::Node<T>& self) {
                                      auto& g = logits->ensure_grad();
                                      const double up = double(self.grad[0]) / n;
                                      for (std::size_t i = 0; i < n; ++i) {
                                        const double z = sign * double(logits->value[i]);
                                        const double sig = 1.0 / (1.0 + std::exp(-z));
                                        g[i] += static_cast<T>(up * sign * sig);
                                      }
                                    });
}

template <class T>
struct AdversarialPair {
  Var<T> generator;      // -log D(x')
  Var<T> discriminator;  // -log(1 - D(x')) - log D(x)
};

/// Baseline non-saturating terms from PatchGAN logits (beta not applied).
template <class T>
AdversarialPair<T> nonsaturating_pair(const Var<T>& logits_real, const Var<T>& logits_fake) {
  return {bce_with_logits(logits_fake, true),
          ag::add(bce_with_logits(logits_fake, false), bce_with_logits(logits_real, true))};
}

// ---------------------------------------------------------------------------
// Focal frequency loss

namespace detail {

/// Orthonormal 2-D DFT of an HxW real or complex plane (row-major).
inline std::vector<std::complex<double>> dft2(std::vector<std::complex<double>> plane, int h, int w,
                                              bool inverse) {
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> in, out;
  in.resize(w);
  for (int y = 0; y < h; ++y) {
    std::copy_n(plane.begin() + static_cast<std::ptrdiff_t>(y) * w, w, in.begin());
    inverse ? fft.inv(out, in) : fft.fwd(out, in);
    std::copy_n(out.begin(), w, plane.begin() + static_cast<std::ptrdiff_t>(y) * w);
  }
  in.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) in[y] = plane[static_cast<std::size_t>(y) * w + x];
    inverse ? fft.inv(out, in) : fft.fwd(out, in);
    for (int y = 0; y < h; ++y) plane[static_cast<std::size_t>(y) * w + x] = out[y];
  }
  // Eigen's inverse already divides by the length; rescale both directions to unitary.
  const double k = inverse ? std::sqrt(static_cast<double>(h) * w) : 1.0 / std::sqrt(static_cast<double>(h) * w);
  for (auto& v : plane) v *= k;
  return plane;
}

}  // namespace detail

/// Focal frequency loss with focal exponent 1: per (sample, channel) spectrum of the error,
/// weights |dF| normalised to max 1, loss = mean over bins of w * |dF|^2. The weight is
/// differentiated through (not detached) so the value is a proper function of x, x'.
template <class T>
Var<T> focal_frequency_loss(const Var<T>& x, const Var<T>& x_fake) {
  const Shape s = x->shape();
  EGIC_REQUIRE(s == x_fake->shape(), "focal_frequency_loss shape mismatch");
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.size());
  std::vector<std::vector<std::complex<double>>> spectra;
  std::vector<double> maxima;
  double total = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      std::vector<std::complex<double>> e(plane);
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) e[i] = double(x->value[base + i]) - double(x_fake->value[base + i]);
      auto F = detail::dft2(std::move(e), s.h, s.w, false);
      double m = 0.0, cube = 0.0;
      for (const auto& f : F) {
        const double a = std::abs(f);
        m = std::max(m, a);
        cube += a * a * a;
      }
      if (m > 0.0) total += cube / m;
      spectra.push_back(std::move(F));
      maxima.push_back(m);
    }
  return ag::detail::make_result<T>(
      Tensor<T>::scalar(static_cast<T>(total / count)), {x, x_fake},
      [x, x_fake, s, plane, count, spectra = std::move(spectra), maxima = std::move(maxima)](ag::Node<T>& self) {
        const double up = double(self.grad[0]) / count;
        for (int n = 0; n < s.n; ++n)
          for (int c = 0; c < s.c; ++c) {
            const std::size_t slot = static_cast<std::size_t>(n) * s.c + c;
            const auto& F = spectra[slot];
            const double m = maxima[slot];
            if (m <= 0.0) continue;
            double cube = 0.0;
            std::size_t kmax = 0;
            for (std::size_t k = 0; k < F.size(); ++k) {
              const double a = std::abs(F[k]);
              cube += a * a * a;
              if (a > std::abs(F[kmax])) kmax = k;
            }
            std::vector<std::complex<double>> G(F.size());
            for (std::size_t k = 0; k < F.size(); ++k) {
              double coef = 3.0 * std::abs(F[k]) / m;
              if (k == kmax) coef = 3.0 - cube / (m * m * m);
              G[k] = coef * F[k];
            }
            const auto de = detail::dft2(std::move(G), s.h, s.w, true);
            const std::size_t base = slot * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const double g = up * de[i].real();
              if (x->requires_grad) x->ensure_grad()[base + i] += static_cast<T>(g);
              if (x_fake->requires_grad) x_fake->ensure_grad()[base + i] -= static_cast<T>(g);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Distortion

/// Frozen random-convolution feature extractor standing in for a learned perceptual metric.
template <class T>
class RandomFeatureDistance {
 public:
  explicit RandomFeatureDistance(std::uint64_t seed = 0xFEA7, int width = 8) {
    Rng rng(seed);
    c1_ = nn::Conv<T>(ps_, "p1", 3, width, 3, 1, rng);
    c2_ = nn::Conv<T>(ps_, "p2", width, width, 3, 2, rng);
    c3_ = nn::Conv<T>(ps_, "p3", width, width, 3, 2, rng);
    ps_.set_trainable(false);
  }

  /// Mean over the three layers of the feature-space mean squared difference.
  Var<T> operator()(const Var<T>& a, const Var<T>& b) const {
    auto fa1 = ag::leaky_relu(c1_(a)), fb1 = ag::leaky_relu(c1_(b));
    auto fa2 = ag::leaky_relu(c2_(fa1)), fb2 = ag::leaky_relu(c2_(fb1));
    auto fa3 = ag::leaky_relu(c3_(fa2)), fb3 = ag::leaky_relu(c3_(fb2));
    return ag::scale(ag::add(ag::add(ag::mse(fa1, fb1), ag::mse(fa2, fb2)), ag::mse(fa3, fb3)), T(1) / T(3));
  }

  const nn::ParamStore<T>& params() const { return ps_; }

 private:
  nn::ParamStore<T> ps_;
  nn::Conv<T> c1_, c2_, c3_;
};

template <class T>
using PerceptualFn = std::function<Var<T>(const Var<T>&, const Var<T>&)>;

/// k_M * MSE + k_P * perceptual distance. The perceptual term is skipped when k_P is zero.
template <class T>
Var<T> distortion(const Var<T>& x, const Var<T>& x_rec, T k_mse, T k_perceptual, const PerceptualFn<T>& perceptual) {
  Var<T> d = ag::scale(ag::mse(x, x_rec), k_mse);
  if (k_perceptual != T(0) && perceptual) d = ag::add(d, ag::scale(perceptual(x, x_rec), k_perceptual));
  return d;
}

/// Training objective for the residual head (evaluated with the realism knob at 0).
template <class T>
Var<T> orp_loss(const Var<T>& x, const Var<T>& x_alpha0) {
  return ag::mse(x, x_alpha0);
}

}  // namespace egic::loss
