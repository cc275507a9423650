#pragma once

// Independent reference implementations used by the unit tests and the acceptance run.
// None of these call into the code they check.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "egic/autograd.hpp"
#include "egic/data.hpp"
#include "egic/rng.hpp"

namespace oracle {

using egic::Tensor;
using egic::ag::Var;

/// Builds a fresh graph from the leaves and returns a scalar.
using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct GradCheck {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||, tiny)
  double max_abs = 0.0;
};

/// Central finite differences over every element of every leaf.
inline GradCheck grad_check(const ScalarFn& f, const std::vector<Tensor<double>>& at, double step = 1e-4) {
  std::vector<Var<double>> leaves;
  for (const auto& t : at) leaves.push_back(egic::ag::parameter(t));
  egic::ag::backward(f(leaves));
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0, max_abs = 0.0;
  for (std::size_t l = 0; l < at.size(); ++l) {
    const Tensor<double> analytic =
        leaves[l]->grad.size() == at[l].size() ? leaves[l]->grad : Tensor<double>(at[l].shape());
    for (std::size_t i = 0; i < at[l].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Var<double>> probe;
        for (std::size_t k = 0; k < at.size(); ++k) {
          Tensor<double> v = at[k];
          if (k == l) v[i] += delta;
          probe.push_back(egic::ag::constant(v));
        }
        egic::ag::NoGrad ng;
        return f(probe)->value[0];
      };
      const double numeric = (eval(step) - eval(-step)) / (2 * step);
      const double a = analytic[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      max_abs = std::max(max_abs, std::abs(a - numeric));
    }
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
  return {std::sqrt(diff2) / denom, max_abs};
}

inline Tensor<double> random_tensor(egic::Shape s, egic::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

inline egic::LabelMap random_labels(int h, int w, int classes, egic::Rng& rng) {
  egic::LabelMap m(h, w, 1);
  for (auto& v : m.data) v = rng.uniform_int(1, classes);
  return m;
}

/// Blocky random label map: a few rectangles of random class over a background, so that
/// components of very different areas occur.
inline egic::LabelMap blocky_labels(int h, int w, int classes, egic::Rng& rng) {
  egic::LabelMap m(h, w, 1);
  const int rects = rng.uniform_int(0, 6);
  for (int r = 0; r < rects; ++r) {
    const int x0 = rng.uniform_int(0, w - 1), y0 = rng.uniform_int(0, h - 1);
    const int x1 = std::min(w, x0 + rng.uniform_int(1, w)), y1 = std::min(h, y0 + rng.uniform_int(1, h));
    const int cls = rng.uniform_int(1, classes);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) m.at(y, x) = cls;
  }
  return m;
}

/// Union-find 4-connected component areas, returned per pixel.
inline std::vector<int> component_area_per_pixel(const egic::LabelMap& m) {
  const int n = m.h * m.w;
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int a) { return parent[a] == a ? a : parent[a] = find(parent[a]); };
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      const int i = y * m.w + x;
      if (x + 1 < m.w && m.at(y, x + 1) == m.at(y, x)) parent[find(i)] = find(i + 1);
      if (y + 1 < m.h && m.at(y + 1, x) == m.at(y, x)) parent[find(i)] = find(i + m.w);
    }
  std::vector<int> size(n, 0);
  for (int i = 0; i < n; ++i) ++size[find(i)];
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) out[i] = size[find(i)];
  return out;
}

/// Denman-Beavers iteration for the principal square root of a PSD matrix.
inline Eigen::MatrixXd sqrtm_denman_beavers(const Eigen::MatrixXd& a, int iterations = 100) {
  Eigen::MatrixXd y = a;
  Eigen::MatrixXd z = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  for (int k = 0; k < iterations; ++k) {
    const Eigen::MatrixXd yi = y.inverse(), zi = z.inverse();
    const Eigen::MatrixXd yn = 0.5 * (y + zi);
    z = 0.5 * (z + yi);
    const double change = (yn - y).norm();
    y = yn;
    if (change < 1e-14 * std::max(1.0, y.norm())) break;
  }
  return y;
}

/// Frechet distance through the Denman-Beavers root of Sa * Sb.
inline double frechet_oracle(const Eigen::VectorXd& ma, const Eigen::MatrixXd& sa, const Eigen::VectorXd& mb,
                             const Eigen::MatrixXd& sb) {
  // sqrt(Sa Sb) is similar to sqrt(Sa^1/2 Sb Sa^1/2), which is symmetric PSD
  const Eigen::MatrixXd ra = sqrtm_denman_beavers(sa);
  const Eigen::MatrixXd inner = ra * sb * ra;
  const Eigen::MatrixXd root = sqrtm_denman_beavers(0.5 * (inner + inner.transpose()));
  return (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * root.trace();
}

/// Well-conditioned random PSD matrix: A A^T / d + eps I.
inline Eigen::MatrixXd random_psd(int d, egic::Rng& rng, double eps = 0.1) {
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
  return a * a.transpose() / d + eps * Eigen::MatrixXd::Identity(d, d);
}

/// -log2 of the mass of N(mu, sigma) on [v - 0.5, v + 0.5], by direct erfc.
inline double bin_bits(int v, double mu, double sigma, double floor = 1e-300) {
  sigma = std::max(sigma, 1e-2);
  auto cdf = [](double t) { return 0.5 * std::erfc(-t / std::sqrt(2.0)); };
  const double hi = (v + 0.5 - mu) / sigma, lo = (v - 0.5 - mu) / sigma;
  // upper tail computed from the right for accuracy when both ends are large
  const double p = lo > 0 ? cdf(-lo) - cdf(-hi) : cdf(hi) - cdf(lo);
  return -std::log2(std::max(p, floor));
}

/// Direct loop PSNR with a peak of 1.
inline double psnr_loop(const Tensor<float>& a, const Tensor<float>& b) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  const double mse = se / a.size();
  return mse == 0.0 ? 100.0 : std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

}  // namespace oracle
