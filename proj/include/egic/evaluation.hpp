#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "egic/losses.hpp"
#include "egic/pipeline.hpp"

namespace egic::eval {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) for [0,1] images, capped at 100 dB (identical inputs give the cap).
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  EGIC_REQUIRE(a.shape() == b.shape(), "psnr shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  EGIC_REQUIRE(a.size() > 0, "psnr of empty images");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// ---------------------------------------------------------------------------
// Frechet distance

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  long count = 0;

  int dim() const { return static_cast<int>(mean.size()); }

  /// Two-pass mean and unbiased covariance.
  static FeatureStats from_samples(const std::vector<std::vector<double>>& rows) {
    if (rows.size() < 2) throw InsufficientSamples("feature statistics need at least 2 samples, got " +
                                                   std::to_string(rows.size()));
    const int d = static_cast<int>(rows.front().size());
    Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      EGIC_REQUIRE(static_cast<int>(rows[i].size()) == d, "feature rows have different lengths");
      for (int j = 0; j < d; ++j) X(static_cast<Eigen::Index>(i), j) = rows[i][j];
    }
    FeatureStats s;
    s.count = static_cast<long>(rows.size());
    s.mean = X.colwise().mean().transpose();
    const Eigen::MatrixXd centered = X.rowwise() - s.mean.transpose();
    s.cov = (centered.transpose() * centered) / static_cast<double>(s.count - 1);
    s.cov = 0.5 * (s.cov + s.cov.transpose());
    return s;
  }
};

/// Square root of a symmetric PSD matrix; negative eigenvalues (round-off) are clipped to 0.
inline Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd r = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * r.asDiagonal() * es.eigenvectors().transpose();
}

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}). The trace term uses
/// tr((S_a S_b)^{1/2}) = tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), whose argument is symmetric PSD.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim() != b.dim())
    throw ContractViolation("frechet_distance: feature dimensions differ (" + std::to_string(a.dim()) + " vs " +
                            std::to_string(b.dim()) + ")");
  const Eigen::MatrixXd ra = sqrtm_psd(a.cov);
  const Eigen::MatrixXd inner = ra * b.cov * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

// ---------------------------------------------------------------------------
// Perception score

/// Non-overlapping patch tiling (row-major, remainder discarded) of 1x3xHxW images.
inline std::vector<Tensor<float>> extract_patches(const std::vector<Tensor<float>>& images, int patch) {
  EGIC_REQUIRE(patch > 0, "patch size must be positive");
  std::vector<Tensor<float>> out;
  for (const auto& img : images) {
    EGIC_REQUIRE(img.n() == 1, "extract_patches expects single images");
    if (img.h() < patch || img.w() < patch)
      throw ContractViolation("image " + std::to_string(img.h()) + "x" + std::to_string(img.w()) +
                              " is smaller than patch " + std::to_string(patch));
    for (int py = 0; py + patch <= img.h(); py += patch)
      for (int px = 0; px + patch <= img.w(); px += patch) {
        Tensor<float> p(Shape{1, img.c(), patch, patch});
        for (int c = 0; c < img.c(); ++c)
          for (int y = 0; y < patch; ++y)
            for (int x = 0; x < patch; ++x) p(0, c, y, x) = img(0, c, py + y, px + x);
        out.push_back(std::move(p));
      }
  }
  return out;
}

/// Maps a batch of patches (Bx3xPxP) to one feature row per patch.
using FeatureFn = std::function<std::vector<std::vector<double>>(const Tensor<float>&)>;

/// Raw pixels as features; handy for tests and as a dependency-free fallback.
inline std::vector<std::vector<double>> pixel_features(const Tensor<float>& batch) {
  std::vector<std::vector<double>> rows(batch.n());
  const std::size_t per = batch.size() / std::max(1, batch.n());
  for (int n = 0; n < batch.n(); ++n)
    rows[n].assign(batch.vec().begin() + static_cast<std::ptrdiff_t>(n * per),
                   batch.vec().begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
  return rows;
}

inline std::vector<std::vector<double>> features_of(const std::vector<Tensor<float>>& patches, const FeatureFn& fn,
                                                    int batch = 32) {
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < patches.size(); i += batch) {
    const std::size_t end = std::min(patches.size(), i + batch);
    const auto b = stack<float>(std::span<const Tensor<float>>(patches.data() + i, end - i));
    auto r = fn(b);
    rows.insert(rows.end(), std::make_move_iterator(r.begin()), std::make_move_iterator(r.end()));
  }
  return rows;
}

/// Patched Frechet distance between two image sets under `fn`.
inline double perception_score(const std::vector<Tensor<float>>& real, const std::vector<Tensor<float>>& fake,
                               const FeatureFn& fn, int patch = 32) {
  const auto pr = extract_patches(real, patch);
  const auto pf = extract_patches(fake, patch);
  if (pr.size() < 2 || pf.size() < 2)
    throw InsufficientSamples("perception score needs at least 2 patches per set");
  return frechet_distance(FeatureStats::from_samples(features_of(pr, fn)),
                          FeatureStats::from_samples(features_of(pf, fn)));
}

// ---------------------------------------------------------------------------
// Spectra

/// Unnormalized 2-D DFT of a real HxW plane.
inline std::vector<std::complex<double>> dft(const std::vector<double>& plane, int h, int w) {
  std::vector<std::complex<double>> c(plane.begin(), plane.end());
  auto f = loss::detail::dft2(std::move(c), h, w, false);
  const double k = std::sqrt(static_cast<double>(h) * w);
  for (auto& v : f) v *= k;
  return f;
}

/// Centered log(1 + |F|) map scaled to [0, 1] (all zeros for a zero input).
inline std::vector<double> spectrum(const std::vector<double>& plane, int h, int w) {
  EGIC_REQUIRE(h == w, "spectrum expects a square plane");
  EGIC_REQUIRE(plane.size() == static_cast<std::size_t>(h) * w, "spectrum plane size mismatch");
  const auto f = dft(plane, h, w);
  std::vector<double> out(plane.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sy = (y + h / 2) % h, sx = (x + w / 2) % w;
      out[static_cast<std::size_t>(sy) * w + sx] = std::log1p(std::abs(f[static_cast<std::size_t>(y) * w + x]));
    }
  const double mx = *std::max_element(out.begin(), out.end());
  if (mx > 0)
    for (auto& v : out) v /= mx;
  return out;
}

/// Luma plane (BT.601 weights) of sample 0.
inline std::vector<double> luma(const Tensor<float>& img) {
  std::vector<double> out(img.h() * static_cast<std::size_t>(img.w()));
  for (int y = 0; y < img.h(); ++y)
    for (int x = 0; x < img.w(); ++x)
      out[static_cast<std::size_t>(y) * img.w() + x] =
          0.299 * img(0, 0, y, x) + 0.587 * img(0, 1, y, x) + 0.114 * img(0, 2, y, x);
  return out;
}

inline void write_spectrum_png(const std::filesystem::path& path, const Tensor<float>& img) {
  const auto s = spectrum(luma(img), img.h(), img.w());
  Tensor<float> t(Shape{1, 1, img.h(), img.w()});
  std::transform(s.begin(), s.end(), t.vec().begin(), [](double v) { return static_cast<float>(v); });
  io::write_png(path, t);
}

// ---------------------------------------------------------------------------
// Sweeps and reports

struct SweepRow {
  std::string image_id;
  double alpha = 0.0;
  double bpp = 0.0;
  double psnr_db = 0.0;
  double perception = 0.0;  // set-level score for this alpha, repeated on every row
  std::uint64_t latent_digest = 0;
};

struct SweepPoint {
  double alpha = 0.0;
  double mean_bpp = 0.0;
  double mean_psnr = 0.0;
  double perception = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<SweepPoint> points;
};

inline std::vector<double> default_alpha_grid() { return {0.0, 1.0 / 6, 1.0 / 3, 0.5, 2.0 / 3, 5.0 / 6, 1.0}; }

/// Compresses every image once, decodes the latent once, and synthesizes at each alpha.
template <class T>
SweepResult sweep_alpha(const Model<T>& m, const std::vector<data::LabeledImage>& set, const std::vector<double>& alphas,
                        const FeatureFn& features, int patch = 32) {
  if (set.empty()) throw InsufficientSamples("sweep over an empty dataset");
  for (double a : alphas) orp::check_alpha(a);
  std::vector<Tensor<float>> originals;
  std::vector<std::vector<Tensor<float>>> recon(alphas.size());
  SweepResult r;
  for (const auto& item : set) {
    const auto comp = compress_image(m.codec, item.image);
    const double rate = entropy::bpp(comp.stream);
    const auto lat = entropy::decode_stream(comp.stream, m.codec.entropy);
    ag::NoGrad ng;
    const auto g = m.generator()(ag::constant(lat.y.template to_tensor<T>()));
    std::optional<Tensor<T>> pred;
    for (std::size_t k = 0; k < alphas.size(); ++k) {
      Tensor<T> img = g.image->value;
      if (m.head && alphas[k] != 1.0) {
        if (!pred) pred = (*m.head)(g.features)->value;
        img = orp::blend(g.image->value, *pred, alphas[k]);
      }
      auto out = data::crop_to_size(codec::clamp01(img), item.image.h(), item.image.w()).template cast<float>();
      r.rows.push_back({item.id, alphas[k], rate, psnr(item.image, out), 0.0, lat.y.digest()});
      recon[k].push_back(std::move(out));
    }
    originals.push_back(item.image);
  }
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    SweepPoint p{alphas[k], 0, 0, features ? perception_score(originals, recon[k], features, patch) : 0.0};
    for (std::size_t i = 0; i < set.size(); ++i) {
      auto& row = r.rows[i * alphas.size() + k];
      row.perception = p.perception;
      p.mean_bpp += row.bpp / set.size();
      p.mean_psnr += row.psnr_db / set.size();
    }
    r.points.push_back(p);
  }
  return r;
}

inline void write_sweep_csv(const std::filesystem::path& path, const SweepResult& r) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << "image_id,alpha,bpp,psnr_db,perception_score\n" << std::setprecision(10);
  for (const auto& row : r.rows)
    f << row.image_id << ',' << row.alpha << ',' << row.bpp << ',' << row.psnr_db << ',' << row.perception << '\n';
}

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

/// Minimal scatter/line chart as a standalone SVG file.
inline void write_svg_plot(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<PlotSeries>& series) {
  constexpr double W = 480, H = 360, L = 64, R = 16, Tm = 32, B = 48;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - Tm - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << std::setprecision(6);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  f << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    f << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"10\">" << xv
      << "</text>\n";
    f << "<text x=\"" << L - 4 << "\" y=\"" << py(yv) + 3 << "\" text-anchor=\"end\" font-size=\"10\">" << yv
      << "</text>\n";
  }
  f << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << x_label << "</text>\n";
  f << "<text x=\"14\" y=\"" << (Tm + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
    << (Tm + H - B) / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* col = colors[k % 5];
    const auto& s = series[k];
    if (s.points.size() > 1) {
      f << "<polyline fill=\"none\" stroke=\"" << col << "\" points=\"";
      for (auto [x, y] : s.points) f << px(x) << ',' << py(y) << ' ';
      f << "\"/>\n";
    }
    for (auto [x, y] : s.points)
      f << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    f << "<text x=\"" << W - R - 4 << "\" y=\"" << Tm + 14 * (k + 1) << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
      << col << "\">" << s.label << "</text>\n";
  }
  f << "</svg>\n";
}

/// D-P scatter of a sweep: perception score against PSNR, one point per alpha.
inline void write_dp_plot(const std::filesystem::path& path, const SweepResult& r) {
  PlotSeries s{"ORP alpha sweep", {}};
  for (const auto& p : r.points) s.points.emplace_back(p.mean_psnr, p.perception);
  write_svg_plot(path, "Distortion-perception", "PSNR [dB]", "perception score (lower is better)", {s});
}

}  // namespace egic::eval
