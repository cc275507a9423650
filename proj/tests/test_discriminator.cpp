#include <gtest/gtest.h>

#include <numeric>

#include "egic/discriminator.hpp"
#include "oracles.hpp"

using namespace egic;

namespace {

disc::OasisCConfig tiny_config() {
  disc::OasisCConfig c;
  c.image_size = 16;
  c.num_classes = 3;
  c.latent_channels = 2;
  c.down_channels = {4, 6};
  c.up_channels = {6, 4};
  c.prep_width = 4;
  return c;
}

// mIoU by a direct per-class count over pixels.
double miou_oracle(const std::vector<LabelMap>& truth, const std::vector<LabelMap>& pred, int classes) {
  double acc = 0;
  int counted = 0;
  for (int c = 1; c <= classes; ++c) {
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
      for (std::size_t p = 0; p < truth[i].size(); ++p) {
        const bool t = truth[i].data[p] == c, q = pred[i].data[p] == c;
        inter += t && q;
        uni += t || q;
      }
    if (uni == 0) continue;
    acc += double(inter) / uni;
    ++counted;
  }
  return counted ? acc / counted : 0.0;
}

}  // namespace

TEST(Discriminator, DeskLayoutShapes) {
  disc::OasisCConfig cfg;
  disc::OasisC<float> d(cfg, 1);
  Rng rng(2);
  Tensor<float> x(Shape{2, 3, 64, 64}, 0.5f);
  Tensor<float> y(Shape{2, cfg.latent_channels, 8, 8}, 1.0f);
  const auto out = d.forward(ag::constant(x), ag::constant(y));
  EXPECT_EQ(out.logits->shape(), (Shape{2, cfg.num_classes + 1, 64, 64}));
  EXPECT_EQ(out.features->shape(), (Shape{2, cfg.prep_width, 64, 64}));
  EXPECT_EQ(out.bottleneck->shape(), (Shape{2, 64, 4, 4}));
  const auto pooled = d.pooled_bottleneck(x);
  ASSERT_EQ(pooled.size(), 2u);
  EXPECT_EQ(pooled[0].size(), 64u);
}

TEST(Discriminator, ReferenceLayoutIsValid) {
  const auto ref = disc::OasisCConfig::reference(19, 320);
  EXPECT_NO_THROW(ref.validate());
  EXPECT_EQ(ref.depth(), 6);
  EXPECT_EQ(ref.prep_width, 64);
  EXPECT_EQ(ref.up_channels.back(), 64);
  // 64-filter latent pre-processing lands on the image grid
  nn::ParamStore<float> ps;
  Rng rng(3);
  disc::LatentPrep<float> prep(ps, "prep", 5, 64, rng);
  EXPECT_EQ(prep(ag::constant(Tensor<float>(Shape{1, 5, 4, 4})), 32, 32)->shape(), (Shape{1, 64, 32, 32}));
}

TEST(Discriminator, InvalidLayoutsAreRejected) {
  auto c = tiny_config();
  c.prep_width = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.image_size = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.up_channels = {4};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Discriminator, ProjectionIsAddedToEveryChannel) {
  const auto cfg = tiny_config();
  disc::OasisC<double> d(cfg, 4);
  Rng rng(5);
  auto x = ag::constant(oracle::random_tensor({2, 3, 16, 16}, rng));
  auto y = ag::constant(oracle::random_tensor({2, 2, 2, 2}, rng, -3, 3));
  const auto cond = d.forward(x, y).logits->value;
  const auto base = d.forward_unconditional(x);
  const auto prep = d.prep_latent(y, 16, 16)->value;
  for (int n = 0; n < 2; ++n)
    for (int py = 0; py < 16; ++py)
      for (int px = 0; px < 16; ++px) {
        double dot = 0;
        for (int c = 0; c < cfg.prep_width; ++c) dot += base.features->value(n, c, py, px) * prep(n, c, py, px);
        for (int k = 0; k <= cfg.num_classes; ++k)
          EXPECT_NEAR(cond(n, k, py, px), base.logits->value(n, k, py, px) + dot, 1e-10);
      }
  // nearest resize: each latent cell covers an 8x8 block of the prepared field
  EXPECT_EQ(prep(1, 2, 0, 0), prep(1, 2, 7, 7));
}

TEST(Discriminator, AllLayersAreWeightNormalized) {
  disc::OasisC<float> d(tiny_config(), 6);
  int gains = 0, weights = 0;
  for (const auto& [name, v] : d.params().items()) {
    gains += name.ends_with(".gain");
    weights += name.ends_with(".weight");
  }
  EXPECT_EQ(gains, weights);
  disc::PatchGan<float> p(2, 7);
  for (const auto& [name, v] : p.params().items())
    if (name.ends_with(".weight")) EXPECT_TRUE(p.params().contains(name.substr(0, name.size() - 7) + ".gain"));
}

TEST(Discriminator, InputGradientMatchesFiniteDifferences) {
  disc::OasisC<double> d(tiny_config(), 8);
  Rng rng(9);
  auto x = oracle::random_tensor({1, 3, 16, 16}, rng);
  auto y = oracle::random_tensor({1, 2, 2, 2}, rng);
  Rng proj_rng(10);
  auto r = oracle::random_tensor({1, 4, 16, 16}, proj_rng);
  const auto check = oracle::grad_check(
      [&](const auto& v) { return ag::sum(ag::mul(d.forward(v[0], v[1]).logits, ag::constant(r))); }, {x, y});
  EXPECT_LT(check.rel_error, 1e-5);
}

TEST(Discriminator, PatchGanGridAt64Pixels) {
  disc::PatchGan<float> p(32, 1);
  Tensor<float> x(Shape{3, 3, 64, 64}, 0.2f);
  Tensor<float> y(Shape{3, 32, 8, 8}, 0.5f);
  EXPECT_EQ(p(ag::constant(x), ag::constant(y))->shape(), (Shape{3, 1, 8, 8}));
  EXPECT_EQ(p.concat_input(ag::constant(x), ag::constant(y))->shape(), (Shape{3, 3 + 12, 64, 64}));
}

TEST(Discriminator, MeanIouMatchesDirectCount) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<LabelMap> truth, pred;
    for (int i = 0; i < 3; ++i) {
      truth.push_back(oracle::blocky_labels(12, 12, 4, rng));
      pred.push_back(oracle::blocky_labels(12, 12, 4, rng));
    }
    EXPECT_NEAR(disc::mean_iou(disc::confusion_matrix(truth, pred, 4)), miou_oracle(truth, pred, 4), 1e-12);
    EXPECT_DOUBLE_EQ(disc::mean_iou(disc::confusion_matrix(truth, truth, 4)), 1.0);
  }
}

TEST(Discriminator, PredictionIgnoresFakeChannel) {
  Tensor<float> logits(Shape{1, 4, 1, 2});
  logits(0, 3, 0, 0) = 10.0f;  // fake channel dominates but is not a class
  logits(0, 1, 0, 0) = 1.0f;
  logits(0, 2, 0, 1) = 2.0f;
  const auto p = disc::predict_labels(logits, 3);
  EXPECT_EQ(p[0].at(0, 0), 2);
  EXPECT_EQ(p[0].at(0, 1), 3);
}

TEST(Discriminator, SegmentationPretrainingLearnsAndLeavesProjectionAlone) {
  auto cfg = tiny_config();
  data::DatasetSpec ds;
  ds.num_samples = 16;
  ds.image_size = 16;
  ds.num_classes = 3;
  const auto set = data::generate_dataset(ds);
  disc::OasisC<float> d(cfg, 12);
  const auto prep_before = d.params().get("prep.weight")->value.vec();
  const auto out_before = d.params().get("out.weight")->value.vec();
  disc::PretrainSettings s;
  s.steps = 60;
  s.lr = 3e-3;
  const auto r = disc::pretrain_segmentation(d, set, set, s);
  const double first = std::accumulate(r.losses.begin(), r.losses.begin() + 10, 0.0);
  const double last = std::accumulate(r.losses.end() - 10, r.losses.end(), 0.0);
  EXPECT_LT(last, first);
  EXPECT_EQ(d.params().get("prep.weight")->value.vec(), prep_before);
  EXPECT_NE(d.params().get("out.weight")->value.vec(), out_before);
}
