// Minimal end-to-end run: a short stage-1 fit on synthetic shapes, then one bitstream
// decoded at several realism levels with a freshly attached ORP head.
#include <cstdio>

#include "egic/training.hpp"

using namespace egic;

int main() {
  data::DatasetSpec ds;
  ds.num_samples = 16;
  ds.image_size = 32;
  const auto set = data::generate_dataset(ds);

  codec::CodecConfig cfg;
  cfg.base_width = 16;
  cfg.latent_channels = 16;
  cfg.hyper_channels = 8;
  auto state = train::new_state(cfg, 1);

  train::TrainPlan plan;
  plan.steps = 150;
  plan.log_every = 50;
  train::StageIo io;
  io.on_log = [](const nlohmann::json& j) {
    std::printf("step %4ld  loss %.3f  bpp %.3f  psnr %.2f\n", j["step"].get<long>(), j["loss"].get<double>(),
                j["bpp"].get<double>(), j["psnr"].get<double>());
  };
  train::run_stage1(plan, state, set, io);

  // G2 starts as a copy of G1; a fresh head reproduces it, so every alpha agrees here.
  state.model.codec.g2.params().copy_from(state.model.codec.g1.params());
  state.model.has_g2 = true;
  state.model.head.emplace(state.model.codec.g2, 2);

  const auto& img = set.front().image;
  const auto packed = compress_image(state.model.codec, img);
  std::printf("bitstream: %zu bytes, %.3f bpp\n", packed.stream.size_bytes(), entropy::bpp(packed.stream));
  for (double alpha : {0.0, 0.5, 1.0}) {
    const auto d = decompress_image(state.model, packed.stream, alpha);
    std::printf("alpha %.1f  psnr %.2f dB  latent %016llx\n", alpha, eval::psnr(img, d.image),
                static_cast<unsigned long long>(d.latent_digest));
  }
}
