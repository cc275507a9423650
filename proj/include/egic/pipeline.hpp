#pragma once

#include <optional>

#include "egic/codec.hpp"
#include "egic/data.hpp"
#include "egic/entropy_coding.hpp"
#include "egic/multi_realism.hpp"

namespace egic {

/// Everything a decoder needs: the codec plus the optional ORP head. `has_g2` is false
/// for stage-one models, in which case synthesis uses G1.
template <class T>
struct Model {
  codec::Codec<T> codec;
  std::optional<orp::OrpHead<T>> head;
  bool has_g2 = false;

  const codec::Decoder<T>& generator() const { return has_g2 ? codec.g2 : codec.g1; }
};

struct Compressed {
  entropy::Bitstream stream;
  std::uint64_t latent_digest = 0;
};

/// Pads to the downsampling factor, analyzes, rounds and entropy-codes one image.
template <class T>
Compressed compress_image(const codec::Codec<T>& c, const Tensor<float>& image) {
  EGIC_REQUIRE(image.n() == 1 && image.c() == 3, "compress expects a single RGB image");
  ag::NoGrad ng;
  const auto padded = data::pad_to_factor(image, c.config.downsample_factor);
  const auto v = c.encoder(ag::constant(padded.image.template cast<T>()));
  const auto y = entropy::LatentCode::from_tensor(codec::quantize(v, codec::QuantMode::Round)->value);
  std::optional<entropy::LatentCode> z;
  if (c.entropy.has_hyperprior())
    z = entropy::LatentCode::from_tensor(codec::quantize(c.entropy.hyper_analyze(v), codec::QuantMode::Round)->value);
  Compressed out;
  out.stream = entropy::encode_stream(y, z, c.entropy, padded.original_w, padded.original_h);
  out.latent_digest = y.digest();
  return out;
}

struct Decoded {
  Tensor<float> image;  // clamped and cropped to the header size
  std::uint64_t latent_digest = 0;
};

/// Synthesis at the padded resolution: G2 (or G1) output blended with the ORP prediction.
template <class T>
Tensor<T> synthesize(const Model<T>& m, const Tensor<T>& y_hat, double alpha) {
  orp::check_alpha(alpha);
  ag::NoGrad ng;
  const auto out = m.generator()(ag::constant(y_hat));
  if (!m.head) return out.image->value;
  return orp::orp_output(out.image->value, out.features->value, *m.head, alpha);
}

template <class T>
Decoded decompress_image(const Model<T>& m, const entropy::Bitstream& bs, double alpha) {
  const auto lat = entropy::decode_stream(bs, m.codec.entropy);
  const auto img = synthesize(m, lat.y.template to_tensor<T>(), alpha);
  Decoded d;
  d.image = data::crop_to_size(codec::clamp01(img), bs.header.height, bs.header.width).template cast<float>();
  d.latent_digest = lat.y.digest();
  return d;
}

}  // namespace egic
