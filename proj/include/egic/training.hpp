#pragma once

#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "egic/checkpoint.hpp"
#include "egic/discriminator.hpp"
#include "egic/evaluation.hpp"
#include "egic/losses.hpp"
#include "egic/multi_realism.hpp"
#include "egic/pipeline.hpp"

namespace egic::codec {

inline void to_json(nlohmann::json& j, const CodecConfig& c) {
  j = {{"latent_channels", c.latent_channels}, {"downsample_factor", c.downsample_factor},
       {"base_width", c.base_width},           {"hyper_channels", c.hyper_channels},
       {"lambda", c.lambda},                   {"use_hyperprior", c.use_hyperprior}};
}
inline void from_json(const nlohmann::json& j, CodecConfig& c) {
  j.at("latent_channels").get_to(c.latent_channels);
  j.at("downsample_factor").get_to(c.downsample_factor);
  j.at("base_width").get_to(c.base_width);
  j.at("hyper_channels").get_to(c.hyper_channels);
  j.at("lambda").get_to(c.lambda);
  j.at("use_hyperprior").get_to(c.use_hyperprior);
}

}  // namespace egic::codec

namespace egic::disc {

inline void to_json(nlohmann::json& j, const OasisCConfig& c) {
  j = {{"image_size", c.image_size},       {"num_classes", c.num_classes}, {"latent_channels", c.latent_channels},
       {"down_channels", c.down_channels}, {"up_channels", c.up_channels}, {"prep_width", c.prep_width}};
}
inline void from_json(const nlohmann::json& j, OasisCConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("num_classes").get_to(c.num_classes);
  j.at("latent_channels").get_to(c.latent_channels);
  j.at("down_channels").get_to(c.down_channels);
  j.at("up_channels").get_to(c.up_channels);
  j.at("prep_width").get_to(c.prep_width);
}

}  // namespace egic::disc

namespace egic::train {

enum class Stage { One, Two, Orp, DiscPretrain };
enum class Strategy { I, II };
enum class DiscKind { OasisC, PatchGan };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::One: return "1";
    case Stage::Two: return "2";
    case Stage::Orp: return "orp";
    case Stage::DiscPretrain: return "disc_pretrain";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "1") return Stage::One;
  if (s == "2") return Stage::Two;
  if (s == "orp") return Stage::Orp;
  if (s == "disc_pretrain" || s == "disc") return Stage::DiscPretrain;
  throw ConfigError("unknown stage '" + s + "' (expected 1, 2, orp or disc_pretrain)");
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "I" || s == "1") return Strategy::I;
  if (s == "II" || s == "2") return Strategy::II;
  throw ConfigError("unknown strategy '" + s + "' (expected I or II)");
}

inline DiscKind parse_disc_kind(const std::string& s) {
  if (s == "oasis_c") return DiscKind::OasisC;
  if (s == "patchgan") return DiscKind::PatchGan;
  throw ConfigError("unknown discriminator '" + s + "' (expected oasis_c or patchgan)");
}

struct LossWeights {
  double k_mse = 150.0;  // MSE measured on [0,1] images
  double k_perc = 1.0;
  double beta = 0.3;
  double labelmix = 10.0;
  double ffl = 0.0;  // optional focal frequency term

  void validate() const {
    for (double v : {k_mse, k_perc, beta, labelmix, ffl})
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and >= 0");
  }
};

struct TrainPlan {
  Stage stage = Stage::One;
  Strategy strategy = Strategy::I;
  DiscKind disc = DiscKind::OasisC;
  long steps = 1000;
  int batch_size = 4;
  double lr = 1e-3;
  long lr_decay_step = 0;  // 0 disables the decay
  double lr_decayed = 1e-4;
  double lambda = 1.0;
  LossWeights weights;
  std::uint64_t seed = 0;
  long checkpoint_every = 0;  // 0: only the final checkpoint
  long log_every = 10;

  void validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr >= 0.0) || !(lr_decayed >= 0.0)) throw ConfigError("learning rates must be >= 0");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    weights.validate();
  }

  /// Strategy II drops the distortion term and rebalances with beta = 1.
  LossWeights effective_weights() const {
    LossWeights w = weights;
    if (stage == Stage::Two && strategy == Strategy::II) {
      w.k_mse = 0.0;
      w.k_perc = 0.0;
      w.beta = 1.0;
    }
    return w;
  }

  double lr_at(long step) const { return lr_decay_step > 0 && step >= lr_decay_step ? lr_decayed : lr; }
};

inline nlohmann::json plan_json(const TrainPlan& p) {
  const auto w = p.effective_weights();
  return {{"stage", to_string(p.stage)},
          {"strategy", p.strategy == Strategy::I ? "I" : "II"},
          {"disc", p.disc == DiscKind::OasisC ? "oasis_c" : "patchgan"},
          {"steps", p.steps},
          {"batch_size", p.batch_size},
          {"lr", p.lr},
          {"lr_decay_step", p.lr_decay_step},
          {"lr_decayed", p.lr_decayed},
          {"lambda", p.lambda},
          {"k_mse", w.k_mse},
          {"k_perc", w.k_perc},
          {"beta", w.beta},
          {"labelmix", w.labelmix},
          {"ffl", w.ffl},
          {"seed", p.seed}};
}

// ---------------------------------------------------------------------------
// Checkpoint <-> model

struct ModelState {
  Model<float> model;
  std::optional<disc::OasisC<float>> disc;
  std::optional<disc::PatchGan<float>> patchgan;
  nlohmann::json meta = nlohmann::json::object();
};

inline constexpr const char* kE = "E";
inline constexpr const char* kP = "P";
inline constexpr const char* kG1 = "G1";
inline constexpr const char* kG2 = "G2";
inline constexpr const char* kD = "D";
inline constexpr const char* kPatch = "D_PATCH";
inline constexpr const char* kOrp = "ORP";

inline ModelState new_state(const codec::CodecConfig& cfg, std::uint64_t seed) {
  ModelState s;
  s.model.codec = codec::Codec<float>(cfg, seed);
  s.meta["format"] = "egic-checkpoint";
  s.meta["codec"] = cfg;
  s.meta["seed"] = seed;
  s.meta["stages"] = nlohmann::json::array();
  return s;
}

inline ckpt::Checkpoint to_checkpoint(const ModelState& s) {
  ckpt::Checkpoint c;
  c.meta = s.meta;
  c.meta["has_g2"] = s.model.has_g2;
  c.meta["has_orp"] = s.model.head.has_value();
  c.put(kE, s.model.codec.encoder.params());
  c.put(kP, s.model.codec.entropy.params());
  c.put(kG1, s.model.codec.g1.params());
  if (s.model.has_g2) c.put(kG2, s.model.codec.g2.params());
  if (s.model.head) c.put(kOrp, s.model.head->params());
  if (s.disc) {
    c.put(kD, s.disc->params());
    c.meta["disc"] = s.disc->config();
  }
  if (s.patchgan) c.put(kPatch, s.patchgan->params());
  return c;
}

inline ModelState from_checkpoint(const ckpt::Checkpoint& c) {
  if (!c.meta.contains("format") || c.meta["format"] != "egic-checkpoint")
    throw IncompatibleModel("file is not an egic model checkpoint");
  ModelState s;
  s.meta = c.meta;
  const auto cfg = c.meta.at("codec").get<codec::CodecConfig>();
  const auto seed = c.meta.at("seed").get<std::uint64_t>();
  s.model.codec = codec::Codec<float>(cfg, seed);
  c.get(kE, s.model.codec.encoder.params());
  c.get(kP, s.model.codec.entropy.params());
  c.get(kG1, s.model.codec.g1.params());
  s.model.has_g2 = c.meta.value("has_g2", false);
  if (s.model.has_g2) c.get(kG2, s.model.codec.g2.params());
  else s.model.codec.g2.params().copy_from(s.model.codec.g1.params());
  if (c.meta.value("has_orp", false)) {
    s.model.head.emplace(s.model.codec.g2, seed, c.meta.value("orp_mid_width", orp::OrpHead<float>::kDefaultMidWidth));
    c.get(kOrp, s.model.head->params());
  }
  if (c.has(kD)) {
    s.disc.emplace(c.meta.at("disc").get<disc::OasisCConfig>(), seed);
    c.get(kD, s.disc->params());
  }
  if (c.has(kPatch)) {
    s.patchgan.emplace(cfg.latent_channels, seed);
    c.get(kPatch, s.patchgan->params());
  }
  return s;
}

inline bool stage_done(const nlohmann::json& meta, Stage st) {
  if (!meta.contains("stages")) return false;
  for (const auto& v : meta["stages"])
    if (v == to_string(st)) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Metrics log

/// Line-delimited JSON records. On resume, records at or after the resume step are dropped
/// so a replay produces the same file as an uninterrupted run.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::filesystem::path& path, long resume_step) : path_(path) {
    if (path.empty()) return;
    std::vector<std::string> keep;
    if (resume_step > 0 && std::filesystem::exists(path)) {
      std::ifstream in(path);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.contains("step") && j["step"].get<long>() < resume_step) keep.push_back(line);
      }
    }
    out_.open(path, std::ios::trunc);
    if (!out_) throw Error("cannot write metrics log " + path.string());
    for (const auto& l : keep) out_ << l << '\n';
    out_.flush();
  }

  void write(const nlohmann::json& record) {
    if (!out_.is_open()) return;
    out_ << record.dump() << '\n';
  }
  void flush() {
    if (out_.is_open()) out_.flush();
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

struct StageIo {
  std::filesystem::path checkpoint;  // written at cadence and at the end
  std::filesystem::path metrics;
  bool resume = false;
  std::function<void(const nlohmann::json&)> on_log;  // optional progress sink
};

namespace detail {

inline void check_finite(double v, const std::string& what, long step) {
  if (!std::isfinite(v)) throw Divergence(what + " became non-finite at step " + std::to_string(step));
}

/// Resume point recorded in a partially trained checkpoint (0 when starting fresh).
inline long resume_step(const ckpt::Checkpoint& c, Stage st) {
  if (!c.meta.contains("progress")) return 0;
  const auto& p = c.meta["progress"];
  if (p.at("stage") != to_string(st)) return 0;
  return p.at("step").get<long>();
}

inline void mark_progress(nlohmann::json& meta, Stage st, long step, long total) {
  meta["progress"] = {{"stage", to_string(st)}, {"step", step}, {"total", total}};
  if (step >= total) {
    auto& stages = meta["stages"];
    bool present = false;
    for (const auto& v : stages) present = present || v == to_string(st);
    if (!present) stages.push_back(to_string(st));
  }
}

inline bool cadence(const TrainPlan& p, long step) {
  return p.checkpoint_every > 0 && step % p.checkpoint_every == 0;
}

/// Moving average over the most recent `n` values.
class Window {
 public:
  explicit Window(std::size_t n) : n_(n) {}
  void push(double v) {
    q_.push_back(v);
    sum_ += v;
    if (q_.size() > n_) {
      sum_ -= q_.front();
      q_.pop_front();
    }
  }
  double mean() const { return q_.empty() ? 0.0 : sum_ / static_cast<double>(q_.size()); }
  std::vector<double> values() const { return {q_.begin(), q_.end()}; }

 private:
  std::size_t n_;
  std::deque<double> q_;
  double sum_ = 0.0;
};

inline double batch_psnr(const Tensor<float>& x, const Tensor<float>& rec) { return eval::psnr(x, codec::clamp01(rec)); }

}  // namespace detail

/// Mean PSNR and mean coded bpp of a model over a set (actual bitstreams, alpha = 1 unless given).
struct CodecEval {
  double psnr = 0.0;
  double bpp = 0.0;
};

inline CodecEval evaluate_codec(const Model<float>& m, const std::vector<data::LabeledImage>& set, double alpha = 1.0) {
  if (set.empty()) throw InsufficientSamples("evaluation over an empty dataset");
  CodecEval r;
  for (const auto& item : set) {
    const auto comp = compress_image(m.codec, item.image);
    const auto dec = decompress_image(m, comp.stream, alpha);
    r.psnr += eval::psnr(item.image, dec.image) / set.size();
    r.bpp += entropy::bpp(comp.stream) / set.size();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Stage one: rate-distortion training of E, P, G1

struct StageResult {
  long steps = 0;
  double final_loss = 0.0;
  nlohmann::json summary = nlohmann::json::object();
};

inline StageResult run_stage1(const TrainPlan& plan, ModelState& state, const std::vector<data::LabeledImage>& train,
                              const StageIo& io) {
  EGIC_REQUIRE(plan.stage == Stage::One, "run_stage1 called with a different stage");
  plan.validate();
  if (train.empty()) throw InsufficientSamples("stage 1 needs a non-empty training set");
  auto& c = state.model.codec;
  nn::Adam<float> opt({&c.encoder.params(), &c.entropy.params(), &c.g1.params()}, nn::AdamSettings{plan.lr});
  long start = 0;
  if (io.resume && std::filesystem::exists(io.checkpoint)) {
    const auto ck = ckpt::Checkpoint::load(io.checkpoint);
    start = detail::resume_step(ck, Stage::One);
    if (start > 0) {
      state = from_checkpoint(ck);
      auto& cr = state.model.codec;
      opt = nn::Adam<float>({&cr.encoder.params(), &cr.entropy.params(), &cr.g1.params()}, nn::AdamSettings{plan.lr});
      ck.get_optimizer("OPT_STAGE1", opt);
    }
  }
  auto& cm = state.model.codec;
  state.meta["plan_stage1"] = plan_json(plan);
  MetricsLog log(io.metrics, start);
  const loss::RandomFeatureDistance<float> perc;
  const loss::PerceptualFn<float> perc_fn = [&perc](const ag::Var<float>& a, const ag::Var<float>& b) {
    return perc(a, b);
  };
  data::BatchSampler sampler(static_cast<int>(train.size()), plan.batch_size, mix_seed(plan.seed, 0x51));
  const auto w = plan.effective_weights();
  detail::Window bpp_window(100), loss_window(100);
  if (start > 0 && state.meta.contains("stage1_windows")) {
    for (double v : state.meta["stage1_windows"]["bpp"]) bpp_window.push(v);
    for (double v : state.meta["stage1_windows"]["loss"]) loss_window.push(v);
  }
  auto save = [&](long step) {
    detail::mark_progress(state.meta, Stage::One, step, plan.steps);
    state.meta["stage1"] = {{"final_bpp", bpp_window.mean()}, {"final_loss", loss_window.mean()}};
    state.meta["stage1_windows"] = {{"bpp", bpp_window.values()}, {"loss", loss_window.values()}};
    auto ck = to_checkpoint(state);
    ck.put_optimizer("OPT_STAGE1", opt);
    if (!io.checkpoint.empty()) ck.save(io.checkpoint);
  };
  StageResult r;
  for (long step = start; step < plan.steps; ++step) {
    Rng rng(mix_seed(plan.seed, 0x5701 + static_cast<std::uint64_t>(step) * 2));
    opt.set_lr(plan.lr_at(step));
    const auto b = data::make_batch(train, sampler.indices(step));
    const auto x = ag::constant(b.images);
    const double pixels = static_cast<double>(b.images.n()) * b.images.h() * b.images.w();
    auto v = cm.encoder(x);
    auto y_noisy = codec::quantize(v, codec::QuantMode::Noise, &rng);
    auto rate = cm.entropy.rate(v, y_noisy, codec::QuantMode::Noise, &rng);
    auto rec = cm.g1(codec::quantize(v, codec::QuantMode::RoundSte));
    auto d = loss::distortion(x, rec.image, static_cast<float>(w.k_mse), static_cast<float>(w.k_perc), perc_fn);
    auto total = codec::rd_loss(rate.total, pixels, d, plan.lambda);
    const double lv = total->value[0];
    detail::check_finite(lv, "stage-1 loss", step);
    opt.zero_grad();
    ag::backward(total);
    opt.step();
    const double bpp = rate.total->value[0] / pixels;
    bpp_window.push(bpp);
    loss_window.push(lv);
    r.final_loss = lv;
    if (step % plan.log_every == 0 || step + 1 == plan.steps) {
      nlohmann::json rec_j = {{"step", step},
                              {"loss", lv},
                              {"bpp", bpp},
                              {"y_bpp", rate.y_bits->value[0] / pixels},
                              {"distortion", double(d->value[0])},
                              {"psnr", detail::batch_psnr(b.images, rec.image->value)},
                              {"lr", opt.lr()}};
      log.write(rec_j);
      if (io.on_log) io.on_log(rec_j);
    }
    if (detail::cadence(plan, step + 1) && step + 1 < plan.steps) {
      log.flush();
      save(step + 1);
    }
  }
  log.flush();
  save(plan.steps);
  r.steps = plan.steps;
  r.summary = state.meta["stage1"];
  return r;
}

// ---------------------------------------------------------------------------
// Stage two: adversarial fine-tuning of G2 with E and P frozen

struct Stage2Metrics {
  double d_loss = 0, g_adv = 0, distortion = 0, acc_real = 0, acc_fake = 0;
};

/// Real pixels count as correct when the arg-max is any semantic class, fake pixels when it
/// is the fake class.
inline std::pair<double, double> real_fake_accuracy(const Tensor<float>& logits_real, const Tensor<float>& logits_fake) {
  auto frac = [](const Tensor<float>& l, bool want_fake) {
    const int K = l.c();
    long good = 0, total = 0;
    for (int n = 0; n < l.n(); ++n)
      for (int y = 0; y < l.h(); ++y)
        for (int x = 0; x < l.w(); ++x) {
          int best = 0;
          for (int k = 1; k < K; ++k)
            if (l(n, k, y, x) > l(n, best, y, x)) best = k;
          good += ((best == K - 1) == want_fake);
          ++total;
        }
    return static_cast<double>(good) / static_cast<double>(total);
  };
  return {frac(logits_real, false), frac(logits_fake, true)};
}

inline StageResult run_stage2(const TrainPlan& plan, ModelState& state, const std::vector<data::LabeledImage>& train,
                              const StageIo& io) {
  EGIC_REQUIRE(plan.stage == Stage::Two, "run_stage2 called with a different stage");
  plan.validate();
  if (!stage_done(state.meta, Stage::One)) throw ConfigError("stage 2 requires a completed stage-1 checkpoint");
  if (train.empty()) throw InsufficientSamples("stage 2 needs a non-empty training set");
  if (plan.disc == DiscKind::OasisC && !state.disc) throw ConfigError("stage 2 needs a discriminator; none configured");
  if (plan.disc == DiscKind::PatchGan && !state.patchgan)
    state.patchgan.emplace(state.model.codec.config.latent_channels, state.meta.at("seed").get<std::uint64_t>());
  if (!state.model.has_g2) {
    state.model.codec.g2.params().copy_from(state.model.codec.g1.params());
    state.model.has_g2 = true;
  }
  auto& c = state.model.codec;
  nn::Adam<float> opt_g({&c.g2.params()}, nn::AdamSettings{plan.lr});
  nn::ParamStore<float>& dps = plan.disc == DiscKind::OasisC ? state.disc->params() : state.patchgan->params();
  nn::Adam<float> opt_d({&dps}, nn::AdamSettings{plan.lr});
  long start = 0;
  if (io.resume && std::filesystem::exists(io.checkpoint)) {
    const auto ck = ckpt::Checkpoint::load(io.checkpoint);
    start = detail::resume_step(ck, Stage::Two);
    if (start > 0) {
      state = from_checkpoint(ck);
      if (plan.disc == DiscKind::PatchGan && !state.patchgan) throw IncompatibleModel("resume checkpoint lacks PatchGAN");
      opt_g = nn::Adam<float>({&state.model.codec.g2.params()}, nn::AdamSettings{plan.lr});
      opt_d = nn::Adam<float>(
          {plan.disc == DiscKind::OasisC ? &state.disc->params() : &state.patchgan->params()}, nn::AdamSettings{plan.lr});
      ck.get_optimizer("OPT_G2", opt_g);
      ck.get_optimizer("OPT_D", opt_d);
    }
  }
  auto& cm = state.model.codec;
  cm.encoder.params().set_trainable(false);
  cm.entropy.params().set_trainable(false);
  state.meta["plan_stage2"] = plan_json(plan);
  MetricsLog log(io.metrics, start);
  const auto w = plan.effective_weights();
  const loss::RandomFeatureDistance<float> perc;
  const loss::PerceptualFn<float> perc_fn = [&perc](const ag::Var<float>& a, const ag::Var<float>& b) {
    return perc(a, b);
  };
  data::BatchSampler sampler(static_cast<int>(train.size()), plan.batch_size, mix_seed(plan.seed, 0x52));
  auto save = [&](long step) {
    detail::mark_progress(state.meta, Stage::Two, step, plan.steps);
    auto ck = to_checkpoint(state);
    ck.put_optimizer("OPT_G2", opt_g);
    ck.put_optimizer("OPT_D", opt_d);
    if (!io.checkpoint.empty()) ck.save(io.checkpoint);
  };
  StageResult r;
  for (long step = start; step < plan.steps; ++step) {
    opt_g.set_lr(plan.lr_at(step));
    opt_d.set_lr(plan.lr_at(step));
    const auto b = data::make_batch(train, sampler.indices(step));
    const auto x = ag::constant(b.images);
    const auto weights = loss::pixel_weights<float>(b.labels);
    Tensor<float> y_hat;
    Tensor<float> x_fake;
    {
      ag::NoGrad ng;
      y_hat = codec::quantize(cm.encoder(x), codec::QuantMode::Round)->value;
      x_fake = cm.g2(ag::constant(y_hat)).image->value;
    }
    const auto yc = ag::constant(y_hat);
    Stage2Metrics m;

    // discriminator update
    if (plan.disc == DiscKind::OasisC) {
      const auto& D = *state.disc;
      auto lr_ = D.forward(x, yc).logits;
      auto lf = D.forward(ag::constant(x_fake), yc).logits;
      auto ld = loss::discriminator_loss_oasis(lr_, lf, b.labels, weights);
      std::vector<LabelMap> masks;
      for (int i = 0; i < b.images.n(); ++i)
        masks.push_back(loss::labelmix_mask(b.labels[i], mix_seed(plan.seed ^ 0x1AB, static_cast<std::uint64_t>(step) * 64 + i)));
      const auto mt = loss::mask_tensor<float>(masks);
      auto lm = ag::mse(D.forward(ag::mix(x, ag::constant(x_fake), mt), yc).logits, ag::mix(lr_, lf, mt));
      auto total = ag::add(ld, ag::scale(lm, static_cast<float>(w.labelmix)));
      detail::check_finite(total->value[0], "discriminator loss", step);
      opt_d.zero_grad();
      ag::backward(total);
      opt_d.step();
      m.d_loss = total->value[0];
      std::tie(m.acc_real, m.acc_fake) = real_fake_accuracy(lr_->value, lf->value);
    } else {
      const auto& D = *state.patchgan;
      auto pair = loss::nonsaturating_pair(D(x, yc), D(ag::constant(x_fake), yc));
      detail::check_finite(pair.discriminator->value[0], "discriminator loss", step);
      opt_d.zero_grad();
      ag::backward(pair.discriminator);
      opt_d.step();
      m.d_loss = pair.discriminator->value[0];
    }

    // generator update (G2 only)
    auto out = cm.g2(yc);
    ag::Var<float> adv;
    if (plan.disc == DiscKind::OasisC) {
      adv = loss::generator_adv_oasis(state.disc->forward(out.image, yc).logits, b.labels, weights,
                                      static_cast<float>(w.beta));
    } else {
      auto logits = (*state.patchgan)(out.image, yc);
      adv = ag::scale(loss::bce_with_logits(logits, true), static_cast<float>(w.beta));
    }
    auto g_total = adv;
    ag::Var<float> d;
    if (w.k_mse > 0 || w.k_perc > 0) {
      d = loss::distortion(x, out.image, static_cast<float>(w.k_mse), static_cast<float>(w.k_perc), perc_fn);
      g_total = ag::add(g_total, d);
    }
    if (w.ffl > 0) g_total = ag::add(g_total, ag::scale(loss::focal_frequency_loss(x, out.image), static_cast<float>(w.ffl)));
    detail::check_finite(g_total->value[0], "generator loss", step);
    opt_g.zero_grad();
    ag::backward(g_total);
    opt_g.step();
    m.g_adv = adv->value[0];
    m.distortion = d ? d->value[0] : 0.0;
    r.final_loss = g_total->value[0];
    if (step % plan.log_every == 0 || step + 1 == plan.steps) {
      nlohmann::json rec = {{"step", step},
                            {"d_loss", m.d_loss},
                            {"g_adv", m.g_adv},
                            {"distortion", m.distortion},
                            {"g_loss", double(g_total->value[0])},
                            {"acc_real", m.acc_real},
                            {"acc_fake", m.acc_fake},
                            {"psnr", detail::batch_psnr(b.images, out.image->value)},
                            {"lr", opt_g.lr()}};
      log.write(rec);
      if (io.on_log) io.on_log(rec);
    }
    if (detail::cadence(plan, step + 1) && step + 1 < plan.steps) {
      log.flush();
      save(step + 1);
    }
  }
  cm.encoder.params().set_trainable(true);
  cm.entropy.params().set_trainable(true);
  log.flush();
  save(plan.steps);
  r.steps = plan.steps;
  return r;
}

// ---------------------------------------------------------------------------
// Discriminator segmentation pretraining

inline StageResult run_disc_pretrain(const TrainPlan& plan, ModelState& state, const disc::OasisCConfig& cfg,
                                     const std::vector<data::LabeledImage>& train,
                                     const std::vector<data::LabeledImage>& held_out, const StageIo& io) {
  EGIC_REQUIRE(plan.stage == Stage::DiscPretrain, "run_disc_pretrain called with a different stage");
  plan.validate();
  if (train.empty() || held_out.empty()) throw InsufficientSamples("discriminator pretraining needs train and held-out sets");
  if (!state.disc) state.disc.emplace(cfg, plan.seed);
  disc::PretrainSettings s;
  s.steps = static_cast<int>(plan.steps);
  s.batch_size = plan.batch_size;
  s.lr = plan.lr;
  s.seed = plan.seed;
  const auto res = disc::pretrain_segmentation(*state.disc, train, held_out, s);
  MetricsLog log(io.metrics, 0);
  for (std::size_t i = 0; i < res.losses.size(); ++i)
    if (static_cast<long>(i) % plan.log_every == 0 || i + 1 == res.losses.size()) log.write({{"step", i}, {"seg_loss", res.losses[i]}});
  log.write({{"step", plan.steps}, {"miou", res.miou}, {"initial_miou", res.initial_miou}});
  log.flush();
  state.meta["disc"] = state.disc->config();
  state.meta["disc_miou"] = res.miou;
  state.meta["plan_disc_pretrain"] = plan_json(plan);
  detail::mark_progress(state.meta, Stage::DiscPretrain, plan.steps, plan.steps);
  if (!io.checkpoint.empty()) to_checkpoint(state).save(io.checkpoint);
  StageResult r;
  r.steps = plan.steps;
  r.final_loss = res.losses.empty() ? 0.0 : res.losses.back();
  r.summary = {{"miou", res.miou}, {"initial_miou", res.initial_miou}};
  return r;
}

// ---------------------------------------------------------------------------
// ORP head fine-tuning

inline StageResult run_orp(const TrainPlan& plan, ModelState& state, const std::vector<data::LabeledImage>& train,
                           const StageIo& io) {
  EGIC_REQUIRE(plan.stage == Stage::Orp, "run_orp called with a different stage");
  plan.validate();
  if (!stage_done(state.meta, Stage::Two)) throw ConfigError("ORP training requires a completed stage-2 checkpoint");
  if (train.empty()) throw InsufficientSamples("ORP training needs a non-empty training set");
  if (!state.model.head) {
    state.model.head.emplace(state.model.codec.g2, state.meta.at("seed").get<std::uint64_t>());
    state.meta["orp_mid_width"] = orp::OrpHead<float>::kDefaultMidWidth;
  }
  nn::Adam<float> opt({&state.model.head->params()}, nn::AdamSettings{plan.lr});
  long start = 0;
  if (io.resume && std::filesystem::exists(io.checkpoint)) {
    const auto ck = ckpt::Checkpoint::load(io.checkpoint);
    start = detail::resume_step(ck, Stage::Orp);
    if (start > 0) {
      state = from_checkpoint(ck);
      opt = nn::Adam<float>({&state.model.head->params()}, nn::AdamSettings{plan.lr});
      ck.get_optimizer("OPT_ORP", opt);
    }
  }
  state.meta["plan_orp"] = plan_json(plan);
  MetricsLog log(io.metrics, start);
  detail::Window window(100);
  if (start > 0 && state.meta.contains("orp_window"))
    for (double v : state.meta["orp_window"]) window.push(v);
  auto save = [&](long step) {
    detail::mark_progress(state.meta, Stage::Orp, step, plan.steps);
    state.meta["orp"] = {{"final_loss", window.mean()}};
    state.meta["orp_window"] = window.values();
    auto ck = to_checkpoint(state);
    ck.put_optimizer("OPT_ORP", opt);
    if (!io.checkpoint.empty()) ck.save(io.checkpoint);
  };
  orp::OrpSettings s{static_cast<int>(plan.steps), plan.batch_size, plan.lr, plan.seed};
  StageResult r;
  opt.set_lr(plan.lr_at(start));
  orp::train_orp(state.model.codec, *state.model.head, opt, train, s, start, [&](long step, double l) {
    window.push(l);
    r.final_loss = l;
    if (step % plan.log_every == 0 || step + 1 == plan.steps) {
      nlohmann::json rec = {{"step", step}, {"orp_loss", l}};
      log.write(rec);
      if (io.on_log) io.on_log(rec);
    }
    opt.set_lr(plan.lr_at(step + 1));
    if (detail::cadence(plan, step + 1) && step + 1 < plan.steps) {
      log.flush();
      save(step + 1);
    }
  });
  log.flush();
  save(plan.steps);
  r.steps = plan.steps;
  r.summary = state.meta["orp"];
  return r;
}

}  // namespace egic::train
