// Acceptance run: one PASS/FAIL line per criterion.
//
//   egic_acceptance                 check every criterion against the committed fixture
//   egic_acceptance --only 1,2,6    run a subset
//   egic_acceptance --record        run the pipeline criteria and write the fixture
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <unistd.h>

#include "egic/training.hpp"
#include "oracles.hpp"

using namespace egic;
namespace fs = std::filesystem;

namespace {

using V = ag::Var<double>;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. bitstream round trip

Outcome bitstream_round_trip() {
  // fit a small codec briefly so the entropy model is not at its initialization
  data::DatasetSpec ds;
  ds.num_samples = 32;
  ds.image_size = 32;
  const auto set = data::generate_dataset(ds);
  codec::CodecConfig cfg;
  cfg.latent_channels = 8;
  cfg.hyper_channels = 4;
  cfg.base_width = 8;
  auto state = train::new_state(cfg, 11);
  train::TrainPlan plan;
  plan.steps = 150;
  plan.batch_size = 4;
  plan.log_every = 1000;
  train::run_stage1(plan, state, set, {});
  const auto& m = state.model.codec.entropy;

  Rng rng(12);
  const auto prior = m.channel_prior();
  int exact = 0, within = 0;
  double worst = -1e300;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    const Shape ys{1, cfg.latent_channels, rng.uniform_int(1, 4), rng.uniform_int(1, 4)};
    const Shape zs{1, cfg.hyper_channels, (ys.h + 1) / 2, (ys.w + 1) / 2};
    entropy::LatentCode z{zs, std::vector<std::int32_t>(zs.size())};
    double ce = 0.0;
    for (std::size_t i = 0; i < zs.size(); ++i) {
      const auto& [mu, s] = prior[(i / zs.plane()) % zs.c];
      z.values[i] = static_cast<std::int32_t>(std::nearbyint(mu + s * rng.normal()));
      ce += oracle::bin_bits(z.values[i], mu, s, codec::kLikelihoodFloor);
    }
    const auto field = m.y_field(z.to_tensor<float>(), ys);
    entropy::LatentCode y{ys, std::vector<std::int32_t>(ys.size())};
    for (std::size_t i = 0; i < ys.size(); ++i) {
      y.values[i] = static_cast<std::int32_t>(std::nearbyint(field.mean[i] + field.scale[i] * rng.normal()));
      ce += oracle::bin_bits(y.values[i], field.mean[i], field.scale[i], codec::kLikelihoodFloor);
    }
    const auto bs = entropy::encode_stream(y, z, m, ys.w * 8, ys.h * 8);
    const auto dec = entropy::decode_stream(entropy::Bitstream::parse(bs.serialize()), m);
    exact += dec.y == y && dec.z && *dec.z == z;
    const double payload = 8.0 * static_cast<double>(bs.payload.size());
    within += payload <= 1.02 * ce + 32.0;
    worst = std::max(worst, payload - 1.02 * ce);
  }
  return {exact == trials && within == trials,
          fmt("%d/%d bit-exact, %d/%d within 2%% + 32 bits (worst excess over 1.02*CE: %.1f bits)", exact, trials,
              within, trials, worst)};
}

// ---------------------------------------------------------------------------
// 2. ORP algebra

Outcome orp_algebra() {
  codec::CodecConfig cfg;
  Rng rng(21);
  Model<double> md{codec::Codec<double>(cfg, 22), std::nullopt, true};
  md.head.emplace(md.codec.g2, 23);
  for (auto& [name, v] : md.head->params().items())
    for (auto& x : v->value.vec()) x += rng.uniform(-0.05, 0.05);  // non-trivial head
  Model<float> mf{codec::Codec<float>(cfg, 22), std::nullopt, true};
  mf.head.emplace(mf.codec.g2, 23);
  for (auto& [name, v] : mf.head->params().items())
    for (auto& x : v->value.vec()) x += static_cast<float>(rng.uniform(-0.05, 0.05));

  Tensor<float> y(Shape{1, cfg.latent_channels, 8, 8});
  for (auto& v : y.vec()) v = std::nearbyint(static_cast<float>(rng.uniform(-3, 3)));
  bool bit_exact;
  {
    ag::NoGrad ng;
    const auto g2 = mf.codec.g2(ag::constant(y));
    bit_exact = orp::orp_output(g2.image->value, g2.features->value, *mf.head, 1.0).vec() == g2.image->value.vec() &&
                synthesize(mf, y, 1.0).vec() == g2.image->value.vec();
  }

  const auto yd = y.cast<double>();
  const auto x0 = synthesize(md, yd, 0.0), x1 = synthesize(md, yd, 1.0);
  double affine_err = 0.0;
  for (double a : {0.1, 0.25, 0.5, 0.75, 0.9}) {
    const auto xa = synthesize(md, yd, a);
    for (std::size_t i = 0; i < xa.size(); ++i) affine_err = std::max(affine_err, std::abs(xa[i] - (a * x1[i] + (1 - a) * x0[i])));
  }

  Tensor<float> img(Shape{1, 3, 64, 64});
  for (auto& v : img.vec()) v = static_cast<float>(rng.uniform());
  const auto packed = compress_image(mf.codec, img);
  bool same_digest = true;
  for (double a : eval::default_alpha_grid())
    same_digest = same_digest && decompress_image(mf, packed.stream, a).latent_digest == packed.latent_digest;
  return {bit_exact && affine_err < 1e-6 && same_digest,
          fmt("alpha=1 bit-exact: %s, max affine deviation %.2e, one latent digest across alphas: %s",
              bit_exact ? "yes" : "no", affine_err, same_digest ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 3. loss identities

Outcome loss_identities() {
  Rng rng(31);
  // LabelMix consistency vanishes when both inputs coincide, whatever the mask
  auto cw = ag::constant(oracle::random_tensor({5, 3, 3, 3}, rng));
  auto cb = ag::constant(oracle::random_tensor({1, 5, 1, 1}, rng));
  std::function<V(const V&)> d = [&](const V& x) { return ag::leaky_relu(ag::conv2d(x, cw, cb, 1, 1)); };
  double labelmix_max = 0.0;
  for (int t = 0; t < 20; ++t) {
    auto x = ag::constant(oracle::random_tensor({2, 3, 8, 8}, rng));
    Tensor<double> mask(Shape{2, 1, 8, 8});
    for (auto& m : mask.vec()) m = rng.coin();
    labelmix_max = std::max(labelmix_max, std::abs(loss::labelmix_consistency(d, x, x, mask)->value[0]));
  }

  // fake term of the discriminator loss ignores pixel weights
  double fake_dev = 0.0;
  for (int t = 0; t < 10; ++t) {
    std::vector<LabelMap> labels{oracle::random_labels(6, 6, 3, rng), oracle::random_labels(6, 6, 3, rng)};
    auto fake = ag::constant(oracle::random_tensor({2, 4, 6, 6}, rng));
    const double plain = loss::weighted_ce(fake, labels, Tensor<double>(), loss::CeTarget::FakeClass)->value[0];
    Tensor<double> w(Shape{2, 1, 6, 6});
    for (auto& v : w.vec()) v = rng.coin() ? 3.0 : 1.0;
    fake_dev = std::max(fake_dev, std::abs(loss::weighted_ce(fake, labels, w, loss::CeTarget::FakeClass)->value[0] - plain));
  }

  // uniform logits: weighted CE equals ln(N + 1)
  double uniform_err = 0.0;
  for (int classes : {2, 4, 9, 19}) {
    std::vector<LabelMap> labels{oracle::random_labels(5, 5, classes, rng)};
    auto logits = ag::constant(Tensor<double>(Shape{1, classes + 1, 5, 5}, rng.uniform(-2, 2)));
    for (auto target : {loss::CeTarget::RealClasses, loss::CeTarget::FakeClass})
      uniform_err = std::max(uniform_err, std::abs(loss::weighted_ce(logits, labels, Tensor<double>(), target)->value[0] -
                                                   std::log(classes + 1.0)));
  }

  // D = sigmoid(0) = 0.5 on every patch: generator term ln 2, discriminator term 2 ln 2
  auto zero = ag::constant(Tensor<double>(Shape{3, 1, 8, 8}, 0.0));
  const auto pair = loss::nonsaturating_pair(zero, zero);
  const double ns_err = std::max(std::abs(pair.generator->value[0] - std::numbers::ln2),
                                 std::abs(pair.discriminator->value[0] - 2 * std::numbers::ln2));
  const bool ok = labelmix_max == 0.0 && fake_dev == 0.0 && uniform_err < 1e-6 && ns_err < 1e-12;
  return {ok, fmt("labelmix(x,x) max %.1e, fake-term weight sensitivity %.1e, uniform CE error %.1e, "
                  "nonsaturating error %.1e",
                  labelmix_max, fake_dev, uniform_err, ns_err)};
}

// ---------------------------------------------------------------------------
// 4. gradient checks

Outcome gradient_checks() {
  Rng rng(41);
  std::vector<std::pair<std::string, double>> errs;
  std::vector<LabelMap> labels{oracle::random_labels(4, 4, 3, rng), oracle::random_labels(4, 4, 3, rng)};
  Tensor<double> w(Shape{2, 1, 4, 4});
  for (auto& v : w.vec()) v = rng.coin() ? 3.0 : 1.0;
  auto logits = oracle::random_tensor({2, 4, 4, 4}, rng, -2, 2);
  errs.emplace_back("weighted CE", oracle::grad_check([&](const auto& v) {
                                     return loss::discriminator_loss_oasis(v[0], v[1], labels, w);
                                   },
                                   {logits, oracle::random_tensor({2, 4, 4, 4}, rng, -2, 2)})
                                       .rel_error);
  errs.emplace_back("generator CE", oracle::grad_check([&](const auto& v) {
                                      return loss::generator_adv_oasis(v[0], labels, w, 0.3);
                                    },
                                    {logits})
                                        .rel_error);

  auto cw = ag::constant(oracle::random_tensor({4, 3, 3, 3}, rng));
  auto cb = ag::constant(oracle::random_tensor({1, 4, 1, 1}, rng));
  std::function<V(const V&)> d = [&](const V& x) { return ag::softplus(ag::conv2d(x, cw, cb, 1, 1)); };
  Tensor<double> mask(Shape{2, 1, 4, 4});
  for (auto& m : mask.vec()) m = rng.coin();
  errs.emplace_back("LabelMix", oracle::grad_check([&](const auto& v) { return loss::labelmix_consistency(d, v[0], v[1], mask); },
                                                   {oracle::random_tensor({2, 3, 4, 4}, rng), oracle::random_tensor({2, 3, 4, 4}, rng)})
                                    .rel_error);

  auto lr = oracle::random_tensor({2, 1, 4, 4}, rng), lf = oracle::random_tensor({2, 1, 4, 4}, rng);
  errs.emplace_back("nonsaturating D",
                    oracle::grad_check([](const auto& v) { return loss::nonsaturating_pair(v[0], v[1]).discriminator; }, {lr, lf})
                        .rel_error);
  errs.emplace_back("nonsaturating G",
                    oracle::grad_check([](const auto& v) { return loss::nonsaturating_pair(v[0], v[1]).generator; }, {lr, lf})
                        .rel_error);
  errs.emplace_back("FFL", oracle::grad_check([](const auto& v) { return loss::focal_frequency_loss(v[0], v[1]); },
                                              {oracle::random_tensor({1, 2, 4, 4}, rng), oracle::random_tensor({1, 2, 4, 4}, rng)})
                               .rel_error);

  codec::CodecConfig cfg;
  cfg.latent_channels = 3;
  cfg.hyper_channels = 2;
  cfg.base_width = 4;
  cfg.downsample_factor = 2;
  codec::Codec<double> c(cfg, 42);
  auto x = oracle::random_tensor({1, 3, 4, 4}, rng, 0.0, 1.0);
  errs.emplace_back("rd_loss", oracle::grad_check([&c](const std::vector<V>& v) {
                                 Rng noise(43);  // identical draws on every evaluation
                                 auto latent = c.encoder(v[0]);
                                 auto y_q = codec::quantize(latent, codec::QuantMode::Noise, &noise);
                                 auto rate = c.entropy.rate(latent, y_q, codec::QuantMode::Noise, &noise);
                                 auto dist = ag::scale(ag::mse(v[0], c.g1(y_q).image), 150.0);
                                 return codec::rd_loss(rate.total, 16.0, dist, 1.0);
                               },
                               {x})
                                   .rel_error);
  bool ok = true;
  std::string detail;
  for (const auto& [name, e] : errs) {
    ok = ok && e < 1e-3;
    detail += fmt("%s%s %.1e", detail.empty() ? "" : ", ", name.c_str(), e);
  }
  return {ok, "relative errors: " + detail};
}

// ---------------------------------------------------------------------------
// 5. pixel weighting

Outcome pixel_weighting() {
  Rng rng(51);
  int maps_ok = 0, small = 0, large = 0;
  for (int t = 0; t < 50; ++t) {
    const int size = t % 2 ? 96 : 128;
    const auto m = oracle::blocky_labels(size, size, 3, rng);
    const auto w = loss::pixel_weights<double>(m);
    const auto area = oracle::component_area_per_pixel(m);
    bool ok = true;
    for (std::size_t i = 0; i < m.size(); ++i) {
      ok = ok && w[i] == (area[i] < 4096 ? 3.0 : 1.0);
      (area[i] < 4096 ? small : large) += 1;
    }
    maps_ok += ok;
  }
  return {maps_ok == 50 && small > 0 && large > 0,
          fmt("%d/50 maps agree with the connected-component oracle (%d small-component px, %d large)", maps_ok, small,
              large)};
}

// ---------------------------------------------------------------------------
// 6. Frechet metric

eval::FeatureStats stats(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  eval::FeatureStats s;
  s.mean = mean;
  s.cov = cov;
  s.count = 100;
  return s;
}

Outcome frechet_metric() {
  Rng rng(61);
  double self = 0.0, closed = 0.0, rel = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int d = 2 + t % 9;
    const auto a = oracle::random_psd(d, rng), b = oracle::random_psd(d, rng);
    Eigen::VectorXd ma(d), mb(d);
    for (int i = 0; i < d; ++i) ma(i) = rng.normal(), mb(i) = rng.normal();
    self = std::max(self, std::abs(eval::frechet_distance(stats(ma, a), stats(ma, a))));
    closed = std::max(closed, std::abs(eval::frechet_distance(stats(ma, a), stats(mb, a)) - (ma - mb).squaredNorm()));
    const double expected = oracle::frechet_oracle(ma, a, mb, b);
    rel = std::max(rel, std::abs(eval::frechet_distance(stats(ma, a), stats(mb, b)) - expected) / std::abs(expected));
  }
  return {self < 1e-6 && closed < 1e-6 && rel < 1e-4,
          fmt("f(a,a) max %.1e, equal-covariance error %.1e, max relative error vs Denman-Beavers %.1e", self, closed,
              rel)};
}

// ---------------------------------------------------------------------------
// 7 / 8. desk pipeline

/// Desk-scale schedule for the end-to-end run.
struct DeskPlan {
  int train_samples = 256;
  int held_out = 16;
  long stage1_steps = 3000;
  double lambda = 0.25;
  double k_mse = 150.0;
  long disc_steps = 300;
  long stage2_steps = 400;
  double stage2_lr = 1e-4;
  double labelmix = 1.0;
  long orp_steps = 300;
  int batch_size = 4;
  std::uint64_t seed = 7;

  nlohmann::json json() const {
    return {{"train_samples", train_samples}, {"held_out", held_out},   {"stage1_steps", stage1_steps},
            {"lambda", lambda},               {"k_mse", k_mse},         {"disc_steps", disc_steps},
            {"stage2_steps", stage2_steps},   {"stage2_lr", stage2_lr}, {"labelmix", labelmix},
            {"orp_steps", orp_steps},         {"batch_size", batch_size}, {"seed", seed}};
  }
};

struct PipelineRun {
  double seconds = 0;
  double init_psnr = 0, stage1_psnr = 0, logged_bpp = 0, coded_bpp = 0;
  double psnr_a0 = 0, psnr_a1 = 0, perc_a0 = 0, perc_a1 = 0;
  bool frozen_ok = false;
  std::string frozen_detail;
  std::vector<eval::SweepPoint> sweep;
};

const char* const kArtifacts[] = {"stage1.ckpt", "disc.ckpt", "stage2.ckpt", "orp.ckpt",
                                  "metrics_1.jsonl", "metrics_disc.jsonl", "metrics_2.jsonl", "metrics_orp.jsonl"};

PipelineRun run_pipeline(const DeskPlan& dp, const fs::path& dir) {
  fs::create_directories(dir);
  Clock clock;
  data::DatasetSpec ds;
  ds.num_samples = dp.train_samples;
  ds.seed = 1;
  const auto train_set = data::generate_dataset(ds);
  data::DatasetSpec hs = ds;
  hs.num_samples = dp.held_out;
  hs.seed = 2;
  const auto held = data::generate_dataset(hs);

  PipelineRun r;
  auto st = train::new_state(codec::CodecConfig{}, dp.seed);
  r.init_psnr = train::evaluate_codec(st.model, held).psnr;

  train::TrainPlan p;
  p.steps = dp.stage1_steps;
  p.lambda = dp.lambda;
  p.weights.k_mse = dp.k_mse;
  p.weights.labelmix = dp.labelmix;
  p.batch_size = dp.batch_size;
  p.seed = dp.seed;
  p.log_every = 50;
  train::run_stage1(p, st, train_set, {dir / kArtifacts[0], dir / kArtifacts[4], false, {}});
  r.stage1_psnr = train::evaluate_codec(st.model, held).psnr;
  r.logged_bpp = st.meta["stage1"]["final_bpp"].get<double>();

  const auto& c = st.model.codec;
  const auto e1 = c.encoder.params().digest(), p1 = c.entropy.params().digest(), g1 = c.g1.params().digest();

  auto pd = p;
  pd.stage = train::Stage::DiscPretrain;
  pd.steps = dp.disc_steps;
  train::run_disc_pretrain(pd, st, disc::OasisCConfig{}, train_set, held, {dir / kArtifacts[1], dir / kArtifacts[5], false, {}});

  auto p2 = p;
  p2.stage = train::Stage::Two;
  p2.strategy = train::Strategy::I;
  p2.steps = dp.stage2_steps;
  p2.lr = dp.stage2_lr;
  train::run_stage2(p2, st, train_set, {dir / kArtifacts[2], dir / kArtifacts[6], false, {}});
  const auto e2 = c.encoder.params().digest(), p2d = c.entropy.params().digest(), g2 = st.model.codec.g2.params().digest();

  auto po = p;
  po.stage = train::Stage::Orp;
  po.steps = dp.orp_steps;
  train::run_orp(po, st, train_set, {dir / kArtifacts[3], dir / kArtifacts[7], false, {}});
  const auto& co = st.model.codec;
  const bool ep = e1 == e2 && p1 == p2d && e2 == co.encoder.params().digest() && p2d == co.entropy.params().digest();
  const bool g2_kept = g2 == co.g2.params().digest();
  const bool g1_kept = g1 == co.g1.params().digest();
  r.frozen_ok = ep && g2_kept && g1_kept;
  r.frozen_detail = fmt("E/P through stage 2 and ORP: %s, G2 through ORP: %s", ep ? "unchanged" : "CHANGED",
                        g2_kept ? "unchanged" : "CHANGED");

  const auto& D = *st.disc;
  const eval::FeatureFn features = [&D](const Tensor<float>& b) { return D.pooled_bottleneck(b); };
  const auto sweep = eval::sweep_alpha(st.model, held, eval::default_alpha_grid(), features, 32);
  r.sweep = sweep.points;
  r.psnr_a0 = sweep.points.front().mean_psnr;
  r.psnr_a1 = sweep.points.back().mean_psnr;
  r.perc_a0 = sweep.points.front().perception;
  r.perc_a1 = sweep.points.back().perception;
  r.coded_bpp = sweep.points.front().mean_bpp;
  r.seconds = clock.seconds();
  return r;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

// ---------------------------------------------------------------------------
// 9. discriminator pretraining

struct MiouRun {
  double miou = 0, initial = 0, seconds = 0;
};

MiouRun disc_pretraining(const DeskPlan& dp) {
  Clock clock;
  data::DatasetSpec ds;
  ds.num_samples = dp.train_samples;
  ds.seed = 1;
  const auto train_set = data::generate_dataset(ds);
  data::DatasetSpec hs = ds;
  hs.num_samples = 32;
  hs.seed = 3;
  const auto held = data::generate_dataset(hs);
  disc::OasisC<float> d(disc::OasisCConfig{}, 9);
  disc::PretrainSettings s;
  s.steps = 2000;
  s.batch_size = dp.batch_size;
  s.seed = 9;
  const auto r = disc::pretrain_segmentation(d, train_set, held, s);
  return {r.miou, r.initial_miou, clock.seconds()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"egic acceptance criteria"};
  std::string only;
  std::string fixture_path = EGIC_FIXTURE_PATH;
  std::string work = (fs::temp_directory_path() / ("egic_acceptance_" + std::to_string(::getpid()))).string();
  bool record = false, keep = false;
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--fixture", fixture_path, "recorded-oracle fixture file");
  app.add_option("--work", work, "scratch directory for pipeline artifacts");
  app.add_flag("--record", record, "write the fixture from this run");
  app.add_flag("--keep", keep, "keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  for (std::size_t pos = 0; pos < only.size();) {
    const auto comma = only.find(',', pos);
    selected.insert(std::stoi(only.substr(pos, comma - pos)));
    pos = comma == std::string::npos ? only.size() : comma + 1;
  }
  auto wanted = [&](int k) { return selected.empty() || selected.count(k); };

  nlohmann::json fixture = nlohmann::json::object();
  if (!record) {
    std::ifstream f(fixture_path);
    if (f) fixture = nlohmann::json::parse(f);
  }

  int failures = 0;
  auto report = [&](int k, const std::string& name, bool pass, const std::string& detail, double seconds) {
    std::printf("%s [%d] %s: %s (%.1f s)\n", pass ? "PASS" : "FAIL", k, name.c_str(), detail.c_str(), seconds);
    std::fflush(stdout);
    failures += !pass;
  };
  auto timed = [&](int k, const std::string& name, double limit, Outcome (*fn)()) {
    if (!wanted(k)) return;
    Clock clock;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = clock.seconds();
    report(k, name, o.pass && s < limit, o.detail + fmt(", limit %.0f s", limit), s);
  };

  timed(1, "bitstream round trip", 30, bitstream_round_trip);
  timed(2, "ORP algebra", 5, orp_algebra);
  timed(3, "loss identities", 10, loss_identities);
  timed(4, "gradient checks", 60, gradient_checks);
  timed(5, "pixel weighting", 10, pixel_weighting);
  timed(6, "Frechet metric", 20, frechet_metric);

  const DeskPlan dp;
  if (wanted(9)) {
    try {
      const auto m = disc_pretraining(dp);
      const double threshold = fixture.value("disc_miou_threshold", 0.90);
      report(9, "discriminator pretraining",
             m.miou >= threshold && m.seconds < 600,
             fmt("held-out mIoU %.4f (from %.4f) after 2000 steps, threshold %.2f, limit 600 s", m.miou, m.initial,
                 threshold),
             m.seconds);
      if (record) {
        fixture["disc_miou_recorded"] = m.miou;
        fixture["disc_miou_threshold"] = 0.90;
      }
    } catch (const std::exception& e) {
      report(9, "discriminator pretraining", false, std::string("exception: ") + e.what(), 0);
    }
  }

  if (wanted(7) || wanted(8)) {
    try {
      const auto a = run_pipeline(dp, fs::path(work) / "run_a");
      const double gain = a.init_psnr > 0 ? a.stage1_psnr - a.init_psnr : 0;
      if (record) {
        fixture["desk_plan"] = dp.json();
        fixture["stage1_psnr_gain_db"] = gain;
        // regression margin: 90% of the recorded gain, leaving room for other CPUs' rounding
        fixture["stage1_psnr_margin_db"] = std::floor(0.9 * gain * 10) / 10;
        fixture["recorded"] = {{"init_psnr", a.init_psnr}, {"stage1_psnr", a.stage1_psnr},
                               {"logged_bpp", a.logged_bpp}, {"coded_bpp", a.coded_bpp},
                               {"psnr_alpha0", a.psnr_a0},   {"psnr_alpha1", a.psnr_a1},
                               {"perception_alpha0", a.perc_a0}, {"perception_alpha1", a.perc_a1},
                               {"seconds", a.seconds}};
      }
      for (const auto& pt : a.sweep)
        std::printf("     alpha %.3f  bpp %.4f  psnr %.3f dB  perception %.4f\n", pt.alpha, pt.mean_bpp, pt.mean_psnr,
                    pt.perception);
      if (wanted(7)) {
        const bool has_margin = fixture.contains("stage1_psnr_margin_db");
        const double margin = fixture.value("stage1_psnr_margin_db", 0.0);
        const double ratio = a.coded_bpp / a.logged_bpp;
        const bool ok_a = has_margin && gain >= margin;
        const bool ok_c = a.psnr_a0 > a.psnr_a1;
        const bool ok_d = a.perc_a1 <= a.perc_a0;
        const bool ok_e = std::abs(ratio - 1.0) <= 0.25;
        const bool ok_t = a.seconds < 45 * 60;
        std::string detail =
            fmt("(a) stage-1 gain %.2f dB vs margin %s: %s; ", gain,
                has_margin ? fmt("%.2f dB", margin).c_str() : "MISSING", ok_a ? "ok" : "no") +
            fmt("(b) %s: %s; ", a.frozen_detail.c_str(), a.frozen_ok ? "ok" : "no") +
            fmt("(c) PSNR a=0 %.3f > a=1 %.3f: %s; ", a.psnr_a0, a.psnr_a1, ok_c ? "ok" : "no") +
            fmt("(d) perception a=1 %.4f <= a=0 %.4f: %s; ", a.perc_a1, a.perc_a0, ok_d ? "ok" : "no") +
            fmt("(e) coded %.4f bpp vs logged %.4f (ratio %.3f): %s; limit 2700 s", a.coded_bpp, a.logged_bpp, ratio,
                ok_e ? "ok" : "no");
        report(7, "desk pipeline", ok_a && a.frozen_ok && ok_c && ok_d && ok_e && ok_t, detail, a.seconds);
      }
      if (wanted(8)) {
        const auto b = run_pipeline(dp, fs::path(work) / "run_b");
        int same = 0;
        std::string differing;
        for (const char* name : kArtifacts) {
          const auto fa = file_bytes(fs::path(work) / "run_a" / name), fb = file_bytes(fs::path(work) / "run_b" / name);
          if (!fa.empty() && fa == fb) ++same;
          else differing += std::string(" ") + name;
        }
        const int total = static_cast<int>(std::size(kArtifacts));
        report(8, "determinism", same == total,
               fmt("%d/%d checkpoints and metrics logs bit-identical across two seeded runs", same, total) +
                   (differing.empty() ? "" : "; differing:" + differing),
               b.seconds);
      }
    } catch (const std::exception& e) {
      if (wanted(7)) report(7, "desk pipeline", false, std::string("exception: ") + e.what(), 0);
      if (wanted(8)) report(8, "determinism", false, std::string("exception: ") + e.what(), 0);
    }
  }

  if (record) {
    fs::create_directories(fs::path(fixture_path).parent_path());
    std::ofstream(fixture_path) << fixture.dump(2) << "\n";
    std::printf("fixture written to %s\n", fixture_path.c_str());
  }
  if (!keep) {
    std::error_code ec;
    fs::remove_all(work, ec);
  }
  std::printf("%s: %d criterion failure(s)\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
