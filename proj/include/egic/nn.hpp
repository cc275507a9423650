#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "egic/autograd.hpp"
#include "egic/hash.hpp"
#include "egic/rng.hpp"

namespace egic::nn {

using ag::Var;

/// Ordered collection of named trainable arrays. Order is insertion order, which
/// keeps digests, serialization and optimizer state deterministic.
template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Var<T> add(const std::string& name, Tensor<T> value) {
    EGIC_REQUIRE(!index_.count(name), "duplicate parameter name " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, ag::parameter(std::move(value)));
    return items_.back().second;
  }

  const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  Var<T> get(const std::string& name) const {
    auto it = index_.find(name);
    EGIC_REQUIRE(it != index_.end(), "unknown parameter " + name);
    return items_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : items_) n += v->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : items_) v->zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& [_, v] : items_) v->requires_grad = on;
  }

  /// Copies values from a structurally identical store.
  void copy_from(const ParamStore& other) {
    EGIC_REQUIRE(other.items_.size() == items_.size(), "parameter structure mismatch");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      EGIC_REQUIRE(items_[i].first == other.items_[i].first &&
                       items_[i].second->value.shape() == other.items_[i].second->value.shape(),
                   "parameter structure mismatch at " + items_[i].first);
      items_[i].second->value = other.items_[i].second->value;
    }
  }

  std::uint64_t digest() const {
    Fnv1a h;
    for (const auto& [name, v] : items_) {
      h.update(name);
      h.update(v->value.span());
    }
    return h.digest();
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

/// Convolution layer with optional weight normalization and "same" zero padding.
template <class T>
struct Conv {
  Var<T> weight;  // the direction v when weight-normalized
  Var<T> gain;    // null unless weight-normalized
  Var<T> bias;
  int stride = 1;
  int kernel = 3;

  Conv() = default;
  Conv(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int s, Rng& rng,
       bool weight_normalized = false, bool with_bias = true)
      : stride(s), kernel(k) {
    const double fan_in = static_cast<double>(cin) * k * k;
    const double bound = std::sqrt(6.0 / fan_in) / std::sqrt(1.0 + 0.2 * 0.2);
    Tensor<T> w(Shape{cout, cin, k, k});
    for (auto& v : w.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    weight = ps.add(name + ".weight", w);
    if (weight_normalized) {
      Tensor<T> g(Shape{cout, 1, 1, 1});
      const std::size_t per = w.size() / cout;
      for (int o = 0; o < cout; ++o) {
        double acc = 0;
        for (std::size_t i = 0; i < per; ++i) acc += double(w[o * per + i]) * double(w[o * per + i]);
        g[o] = static_cast<T>(std::sqrt(acc));
      }
      gain = ps.add(name + ".gain", g);
    }
    if (with_bias) bias = ps.add(name + ".bias", Tensor<T>(Shape{1, cout, 1, 1}));
  }

  int out_channels() const { return weight->value.n(); }

  Var<T> effective_weight() const { return gain ? ag::weight_norm(weight, gain) : weight; }

  Var<T> operator()(const Var<T>& x) const {
    return ag::conv2d(x, effective_weight(), bias, stride, kernel / 2);
  }
};

/// Pre-activation residual block: x + conv(lrelu(conv(lrelu(x)))).
template <class T>
struct ResBlock {
  Conv<T> c1, c2;

  ResBlock() = default;
  ResBlock(ParamStore<T>& ps, const std::string& name, int ch, Rng& rng, bool wn = false)
      : c1(ps, name + ".c1", ch, ch, 3, 1, rng, wn), c2(ps, name + ".c2", ch, ch, 3, 1, rng, wn) {}

  Var<T> operator()(const Var<T>& x) const {
    return ag::add(x, c2(ag::leaky_relu(c1(ag::leaky_relu(x)))));
  }
};

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed list of parameter stores. Moment buffers are keyed by position.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ParamStore<T>*> stores, AdamSettings s) : stores_(std::move(stores)), settings_(s) {
    for (auto* ps : stores_)
      for (const auto& [_, v] : ps->items()) {
        m_.emplace_back(v->value.shape());
        v_.emplace_back(v->value.shape());
      }
  }

  void set_lr(double lr) { settings_.lr = lr; }
  double lr() const { return settings_.lr; }
  long step_count() const { return t_; }

  void step() {
    ++t_;
    const double b1t = 1.0 - std::pow(settings_.beta1, static_cast<double>(t_));
    const double b2t = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto* ps : stores_)
      for (const auto& [_, p] : ps->items()) {
        auto& m = m_[k];
        auto& v = v_[k];
        ++k;
        if (p->grad.size() != p->value.size()) continue;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
          const double g = p->grad[i];
          m[i] = static_cast<T>(settings_.beta1 * m[i] + (1 - settings_.beta1) * g);
          v[i] = static_cast<T>(settings_.beta2 * v[i] + (1 - settings_.beta2) * g * g);
          const double mhat = m[i] / b1t, vhat = v[i] / b2t;
          p->value[i] = static_cast<T>(p->value[i] - settings_.lr * mhat / (std::sqrt(vhat) + settings_.eps));
        }
      }
  }

  void zero_grad() {
    for (auto* ps : stores_) ps->zero_grad();
  }

  // state access for checkpointing
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  void set_step_count(long t) { t_ = t; }

 private:
  std::vector<ParamStore<T>*> stores_;
  AdamSettings settings_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

}  // namespace egic::nn
