// egic command-line front end.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "egic/config.hpp"
#include "egic/image_io.hpp"

namespace fs = std::filesystem;
using namespace egic;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIncompatible = 2, kDiverged = 3 };

/// Advisory lock on a run directory; refuses a second concurrent writer.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw ConfigError("run directory " + dir.string() + " is locked by another process (" + path_.string() + ")");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

bool dir_nonempty(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw Error("cannot write " + p.string());
  f << text;
}

/// Shared options: config file plus repeated key=value overrides.
struct ConfigOptions {
  std::string file;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value configuration file");
    cmd->add_option("--set", sets, "override one key (key=value); repeatable");
  }

  /// defaults < file < --set < dedicated flags (applied by the caller afterwards)
  config::RunConfig resolve() const {
    config::RunConfig c;
    if (!file.empty()) c.apply_file(file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      c.set(config::trim(s.substr(0, eq)), s.substr(eq + 1));
    }
    return c;
  }
};

struct Split {
  std::vector<data::LabeledImage> train, held_out;
};

/// The last `held_out` samples (capped at a quarter of the set) are kept for reporting.
Split split_dataset(std::vector<data::LabeledImage> all, int held_out) {
  if (all.empty()) throw InsufficientSamples("dataset is empty");
  const int k = std::min<int>(held_out, static_cast<int>(all.size()) / 4);
  Split s;
  if (k == 0) {
    s.train = all;
    s.held_out = std::move(all);
    return s;
  }
  s.held_out.assign(all.end() - k, all.end());
  all.resize(all.size() - k);
  s.train = std::move(all);
  return s;
}

/// Feature map for perception scores: the checkpoint's (pretrained) discriminator encoder
/// if present, otherwise a fixed-seed randomly initialized one.
struct Features {
  std::optional<disc::OasisC<float>> owned;
  const disc::OasisC<float>* d = nullptr;

  Features(const train::ModelState& st, const config::RunConfig& cfg) {
    if (st.disc) {
      d = &*st.disc;
      return;
    }
    std::cerr << "warning: checkpoint has no discriminator; perception features use a random-init encoder\n";
    owned.emplace(cfg.disc, 0xFEA7);
    d = &*owned;
  }
  eval::FeatureFn fn() const {
    const auto* p = d;
    return [p](const Tensor<float>& b) { return p->pooled_bottleneck(b); };
  }
};

std::vector<data::LabeledImage> load_images(const fs::path& dir) {
  if (fs::exists(dir / "manifest.json")) return data::load_dataset(dir);
  // plain directory of PNGs (labels not needed for evaluation)
  std::vector<fs::path> files;
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".png" && e.path().stem().string().find("_labels") == std::string::npos)
        files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<data::LabeledImage> out;
  for (const auto& f : files) out.push_back({io::read_png_rgb<float>(f), {}, f.stem().string()});
  if (out.empty()) throw InsufficientSamples("no images found in " + dir.string());
  return out;
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const ConfigOptions& co, std::optional<int> n, std::optional<int> size, std::optional<int> classes,
                 std::optional<std::uint64_t> seed, const fs::path& out, bool force) {
  auto cfg = co.resolve();
  if (n) cfg.data.num_samples = *n;
  if (size) cfg.data.image_size = *size;
  if (classes) cfg.data.num_classes = *classes;
  if (seed) cfg.data.seed = *seed;
  cfg.data.validate();
  if (dir_nonempty(out) && !force)
    throw ConfigError("output directory " + out.string() + " is not empty (use --force to overwrite)");
  RunLock lock(out);
  const auto items = data::generate_dataset(cfg.data);
  data::save_dataset(out, cfg.data, items);
  std::cout << "wrote " << items.size() << " samples to " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

fs::path stage_checkpoint(const fs::path& run, train::Stage s) {
  switch (s) {
    case train::Stage::One: return run / "stage1.ckpt";
    case train::Stage::Two: return run / "stage2.ckpt";
    case train::Stage::Orp: return run / "orp.ckpt";
    case train::Stage::DiscPretrain: return run / "disc.ckpt";
  }
  return {};
}

train::ModelState load_prerequisite(const fs::path& path, train::Stage needed, const std::string& for_stage) {
  if (!fs::exists(path))
    throw IncompatibleModel("stage " + for_stage + " requires a stage-" + train::to_string(needed) +
                            " checkpoint; run `egic train --stage " + train::to_string(needed) +
                            "` first (looked for " + path.string() + ")");
  auto st = train::from_checkpoint(ckpt::Checkpoint::load(path));
  if (!train::stage_done(st.meta, needed))
    throw IncompatibleModel(path.string() + " has not completed stage " + train::to_string(needed));
  return st;
}

int cmd_train(const ConfigOptions& co, std::optional<std::string> stage, std::optional<std::string> strategy,
              std::optional<long> steps, std::optional<std::uint64_t> seed, const fs::path& data_dir,
              const fs::path& run, const std::string& from, bool resume, bool force) {
  auto cfg = co.resolve();
  if (stage) cfg.train.stage = train::parse_stage(*stage);
  if (strategy) cfg.train.strategy = train::parse_strategy(*strategy);
  if (steps) cfg.train.steps = *steps;
  if (seed) cfg.train.seed = *seed;

  data::DatasetSpec spec;
  auto all = data::load_dataset(data_dir, &spec);
  cfg.data = spec;  // the dataset on disk is authoritative for data.* keys
  cfg.finalize();

  RunLock lock(run);
  const auto st_kind = cfg.train.stage;
  const auto out = stage_checkpoint(run, st_kind);
  if (fs::exists(out) && !force && !resume)
    throw ConfigError(out.string() + " already exists (use --resume to continue or --force to retrain)");
  const std::string tag = train::to_string(st_kind);
  write_text(run / ("config_" + tag + ".txt"), cfg.to_text());

  const auto split = split_dataset(std::move(all), cfg.held_out);
  train::StageIo io;
  io.checkpoint = out;
  io.metrics = run / ("metrics_" + tag + ".jsonl");
  io.resume = resume;
  const auto t0 = std::chrono::steady_clock::now();
  io.on_log = [&](const nlohmann::json& j) {
    const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "[" << std::fixed << std::setprecision(1) << el << "s] " << j.dump() << "\n" << std::flush;
  };

  nlohmann::json report;
  train::ModelState state;
  switch (st_kind) {
    case train::Stage::One: {
      state = train::new_state(cfg.codec, cfg.codec_seed);
      const auto before = train::evaluate_codec(state.model, split.held_out);
      train::run_stage1(cfg.train, state, split.train, io);
      const auto after = train::evaluate_codec(state.model, split.held_out);
      report = {{"init_psnr", before.psnr}, {"init_bpp", before.bpp}, {"psnr", after.psnr}, {"bpp", after.bpp},
                {"logged_bpp", state.meta["stage1"]["final_bpp"]}};
      break;
    }
    case train::Stage::DiscPretrain: {
      const fs::path s1 = from.empty() ? stage_checkpoint(run, train::Stage::One) : fs::path(from);
      state = fs::exists(s1) ? train::from_checkpoint(ckpt::Checkpoint::load(s1))
                             : train::new_state(cfg.codec, cfg.codec_seed);
      state.disc.reset();
      auto r = train::run_disc_pretrain(cfg.train, state, cfg.disc, split.train, split.held_out, io);
      report = r.summary;
      break;
    }
    case train::Stage::Two: {
      const fs::path s1 = from.empty() ? stage_checkpoint(run, train::Stage::One) : fs::path(from);
      state = load_prerequisite(s1, train::Stage::One, "2");
      if (cfg.train.disc == train::DiscKind::OasisC) {
        const auto dpath = stage_checkpoint(run, train::Stage::DiscPretrain);
        if (fs::exists(dpath)) {
          const auto dck = ckpt::Checkpoint::load(dpath);
          const auto dcfg = dck.meta.at("disc").get<disc::OasisCConfig>();
          state.disc.emplace(dcfg, cfg.train.seed);
          dck.get(train::kD, state.disc->params());
          state.meta["disc_miou"] = dck.meta.value("disc_miou", 0.0);
          std::cout << "using pretrained discriminator from " << dpath.string() << "\n";
        } else {
          std::cerr << "warning: no " << dpath.string() << "; stage 2 starts from a random discriminator\n";
          state.disc.emplace(cfg.disc, cfg.train.seed);
        }
      }
      train::run_stage2(cfg.train, state, split.train, io);
      const auto after = train::evaluate_codec(state.model, split.held_out);
      report = {{"psnr", after.psnr}, {"bpp", after.bpp}};
      break;
    }
    case train::Stage::Orp: {
      const fs::path s2 = from.empty() ? stage_checkpoint(run, train::Stage::Two) : fs::path(from);
      state = load_prerequisite(s2, train::Stage::Two, "orp");
      train::run_orp(cfg.train, state, split.train, io);
      report = {{"psnr_alpha0", train::evaluate_codec(state.model, split.held_out, 0.0).psnr},
                {"psnr_alpha1", train::evaluate_codec(state.model, split.held_out, 1.0).psnr},
                {"final_loss", state.meta["orp"]["final_loss"]}};
      break;
    }
  }
  write_text(run / ("report_" + tag + ".json"), report.dump(2) + "\n");
  std::cout << "stage " << tag << " done: " << report.dump() << "\ncheckpoint " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// compress / decompress

int cmd_compress(const fs::path& input, const fs::path& checkpoint, const fs::path& output) {
  const auto st = train::from_checkpoint(ckpt::Checkpoint::load(checkpoint));
  const auto img = io::read_png_rgb<float>(input);
  const auto comp = compress_image(st.model.codec, img);
  entropy::write_bitstream(output, comp.stream);
  std::cout << "bpp " << std::setprecision(6) << entropy::bpp(comp.stream) << "\n"
            << "bytes " << comp.stream.size_bytes() << "\n"
            << "latent_digest " << std::hex << comp.latent_digest << std::dec << "\n";
  return kOk;
}

int cmd_decompress(const fs::path& input, const fs::path& checkpoint, double alpha, const fs::path& output) {
  orp::check_alpha(alpha);
  const auto st = train::from_checkpoint(ckpt::Checkpoint::load(checkpoint));
  if (!st.model.head && alpha != 1.0)
    std::cerr << "warning: checkpoint has no ORP head; alpha " << alpha << " is ignored\n";
  const auto bs = entropy::read_bitstream(input);
  const auto dec = decompress_image(st.model, bs, alpha);
  io::write_png(output, dec.image);
  std::cout << "wrote " << output.string() << " (" << dec.image.w() << "x" << dec.image.h() << ")\n"
            << "latent_digest " << std::hex << dec.latent_digest << std::dec << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval / sweep

int cmd_eval(const ConfigOptions& co, const fs::path& data_dir, const std::string& checkpoint, const std::string& fake_dir,
             std::optional<double> alpha, const fs::path& out) {
  auto cfg = co.resolve();
  if (alpha) cfg.alpha = *alpha;
  const auto real = load_images(data_dir);
  if (real.empty()) throw InsufficientSamples("evaluation dataset is empty");
  cfg.data.image_size = real.front().image.h();
  cfg.finalize();
  fs::create_directories(out);
  write_text(out / "config.txt", cfg.to_text());
  std::optional<train::ModelState> st;
  if (!checkpoint.empty()) st = train::from_checkpoint(ckpt::Checkpoint::load(checkpoint));
  train::ModelState fallback;
  const Features feats(st ? *st : fallback, cfg);

  std::vector<Tensor<float>> reals, fakes;
  nlohmann::json per_image = nlohmann::json::array();
  double mean_psnr = 0, mean_bpp = 0;
  if (!fake_dir.empty()) {
    const auto fake = load_images(fake_dir);
    if (fake.size() != real.size()) throw InputError("real and fake sets differ in size");
    for (std::size_t i = 0; i < real.size(); ++i) {
      const double p = eval::psnr(real[i].image, fake[i].image);
      per_image.push_back({{"image_id", real[i].id}, {"psnr_db", p}});
      mean_psnr += p / real.size();
      reals.push_back(real[i].image);
      fakes.push_back(fake[i].image);
    }
  } else {
    if (!st) throw ConfigError("eval needs --checkpoint or --fake");
    fs::create_directories(out / "reconstructions");
    for (const auto& item : real) {
      const auto comp = compress_image(st->model.codec, item.image);
      const auto dec = decompress_image(st->model, comp.stream, cfg.alpha);
      const double p = eval::psnr(item.image, dec.image), b = entropy::bpp(comp.stream);
      per_image.push_back({{"image_id", item.id}, {"psnr_db", p}, {"bpp", b}});
      mean_psnr += p / real.size();
      mean_bpp += b / real.size();
      io::write_png(out / "reconstructions" / (item.id + ".png"), dec.image);
      eval::write_spectrum_png(out / "reconstructions" / (item.id + "_spectrum.png"), dec.image);
      reals.push_back(item.image);
      fakes.push_back(dec.image);
    }
  }
  const double perception = eval::perception_score(reals, fakes, feats.fn(), cfg.patch);
  nlohmann::json report = {{"images", per_image},
                           {"aggregate", {{"psnr_db", mean_psnr}, {"bpp", mean_bpp}, {"perception_score", perception},
                                          {"count", real.size()}, {"alpha", cfg.alpha}}}};
  write_text(out / "report.json", report.dump(2) + "\n");
  std::cout << report["aggregate"].dump() << "\n";
  return kOk;
}

int cmd_sweep(const ConfigOptions& co, const fs::path& data_dir, const fs::path& checkpoint, const std::string& alphas,
              const fs::path& out) {
  auto cfg = co.resolve();
  if (!alphas.empty()) cfg.set("sweep.alphas", alphas);
  const auto set = load_images(data_dir);
  cfg.data.image_size = set.front().image.h();
  cfg.finalize();
  fs::create_directories(out);
  write_text(out / "config.txt", cfg.to_text());
  const auto st = train::from_checkpoint(ckpt::Checkpoint::load(checkpoint));
  if (!st.model.head) std::cerr << "warning: checkpoint has no ORP head; every alpha decodes the same image\n";
  const Features feats(st, cfg);
  const auto r = eval::sweep_alpha(st.model, set, cfg.alphas, feats.fn(), cfg.patch);
  eval::write_sweep_csv(out / "sweep.csv", r);
  eval::write_dp_plot(out / "dp_plot.svg", r);
  for (const auto& p : r.points)
    std::cout << "alpha " << p.alpha << "  bpp " << p.mean_bpp << "  psnr " << p.mean_psnr << "  perception "
              << p.perception << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"egic: generative image compression with a segmentation discriminator and decode-time realism control"};
  app.require_subcommand(1);
  int rc = kOk;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic labeled shapes dataset");
  ConfigOptions gen_co;
  gen_co.attach(gen);
  std::optional<int> g_n, g_size, g_classes;
  std::optional<std::uint64_t> g_seed;
  std::string g_out;
  bool g_force = false;
  gen->add_option("--n", g_n, "number of samples");
  gen->add_option("--size", g_size, "image side length (multiple of 8)");
  gen->add_option("--classes", g_classes, "number of semantic classes N (>= 2)");
  gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("out", g_out, "output directory")->required();
  gen->add_flag("--force", g_force, "overwrite a non-empty output directory");

  // train
  auto* tr = app.add_subcommand("train", "run one training stage (1, disc_pretrain, 2, orp)");
  ConfigOptions tr_co;
  tr_co.attach(tr);
  std::optional<std::string> t_stage, t_strategy;
  std::optional<long> t_steps;
  std::optional<std::uint64_t> t_seed;
  std::string t_data, t_run, t_from;
  bool t_resume = false, t_force = false;
  tr->add_option("--stage", t_stage, "1, disc_pretrain, 2 or orp");
  tr->add_option("--strategy", t_strategy, "stage-2 strategy: I or II");
  tr->add_option("--steps", t_steps, "number of steps");
  tr->add_option("--seed", t_seed, "training seed");
  tr->add_option("--data", t_data, "dataset directory (from gen-data)")->required();
  tr->add_option("--run-dir", t_run, "run directory (checkpoints, logs, reports)")->required();
  tr->add_option("--from", t_from, "prerequisite checkpoint (default: the run directory's)");
  tr->add_flag("--resume", t_resume, "continue from this stage's partial checkpoint");
  tr->add_flag("--force", t_force, "retrain even if the stage checkpoint exists");

  // compress
  auto* cp = app.add_subcommand("compress", "encode a PNG image into a bitstream");
  std::string c_in, c_ckpt, c_out;
  cp->add_option("input", c_in, "input PNG")->required();
  cp->add_option("--checkpoint", c_ckpt, "model checkpoint")->required();
  cp->add_option("-o,--out", c_out, "output bitstream")->required();

  // decompress
  auto* dp = app.add_subcommand("decompress", "decode a bitstream at realism level alpha");
  std::string d_in, d_ckpt, d_out;
  double d_alpha = 1.0;
  dp->add_option("input", d_in, "input bitstream")->required();
  dp->add_option("--checkpoint", d_ckpt, "model checkpoint")->required();
  dp->add_option("--alpha", d_alpha, "realism in [0,1]: 0 = MSE-optimized, 1 = GAN output");
  dp->add_option("-o,--out", d_out, "output PNG")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "PSNR / bpp / perception report");
  ConfigOptions ev_co;
  ev_co.attach(ev);
  std::string e_data, e_ckpt, e_fake, e_out;
  std::optional<double> e_alpha;
  ev->add_option("--data", e_data, "dataset or PNG directory")->required();
  ev->add_option("--checkpoint", e_ckpt, "model checkpoint (reconstructions are the fake set)");
  ev->add_option("--fake", e_fake, "directory of fake images to compare instead of reconstructions");
  ev->add_option("--alpha", e_alpha, "realism level for reconstructions");
  ev->add_option("-o,--out", e_out, "report directory")->required();

  // sweep
  auto* sw = app.add_subcommand("sweep", "decode every image at several alphas (D-P curve)");
  ConfigOptions sw_co;
  sw_co.attach(sw);
  std::string s_data, s_ckpt, s_alphas, s_out;
  sw->add_option("--data", s_data, "dataset or PNG directory")->required();
  sw->add_option("--checkpoint", s_ckpt, "model checkpoint")->required();
  sw->add_option("--alphas", s_alphas, "comma-separated alpha list");
  sw->add_option("-o,--out", s_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) rc = cmd_gen_data(gen_co, g_n, g_size, g_classes, g_seed, g_out, g_force);
    else if (*tr) rc = cmd_train(tr_co, t_stage, t_strategy, t_steps, t_seed, t_data, t_run, t_from, t_resume, t_force);
    else if (*cp) rc = cmd_compress(c_in, c_ckpt, c_out);
    else if (*dp) rc = cmd_decompress(d_in, d_ckpt, d_alpha, d_out);
    else if (*ev) rc = cmd_eval(ev_co, e_data, e_ckpt, e_fake, e_alpha, e_out);
    else if (*sw) rc = cmd_sweep(sw_co, s_data, s_ckpt, s_alphas, s_out);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractViolation& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kUsage;
  } catch (const Divergence& e) {
    std::cerr << "numerical divergence: " << e.what() << "\n";
    return kDiverged;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIncompatible;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return rc;
}
