#pragma once

// Range coding of integer latents under the learned Gaussian entropy model, and the
// on-disk bitstream container.
//
// Container layout (little-endian):
//   "EGIC" | version u8 | model digest u64 | width u16 | height u16
//   | latent h, w, C (u16 each) | hyper h, w, C (u16 each, zero when absent)
//   | payload length u32 | payload | CRC32 of everything before it (u32)

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <vector>

#include "egic/codec.hpp"
#include "egic/error.hpp"

namespace egic::entropy {

inline constexpr int kPrecisionBits = 16;
inline constexpr std::uint32_t kTotal = 1u << kPrecisionBits;
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 4 + 1 + 8 + 2 + 2 + 6 + 6 + 4;
inline constexpr std::size_t kTrailerBytes = 4;
/// Largest half-width of the explicitly modelled alphabet around the rounded mean.
inline constexpr int kMaxRadius = 1024;

/// Integer-valued latent array.
struct LatentCode {
  Shape shape{};
  std::vector<std::int32_t> values;

  bool operator==(const LatentCode&) const = default;

  template <class T>
  static LatentCode from_tensor(const Tensor<T>& t) {
    LatentCode c{t.shape(), std::vector<std::int32_t>(t.size())};
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double r = std::nearbyint(static_cast<double>(t[i]));
      EGIC_REQUIRE(r == static_cast<double>(t[i]), "latent is not integer-valued");
      c.values[i] = static_cast<std::int32_t>(r);
    }
    return c;
  }

  template <class T>
  Tensor<T> to_tensor() const {
    Tensor<T> t(shape);
    for (std::size_t i = 0; i < values.size(); ++i) t[i] = static_cast<T>(values[i]);
    return t;
  }

  std::uint64_t digest() const {
    Fnv1a h;
    h.update_value(shape);
    h.update(std::span<const std::int32_t>(values));
    return h.digest();
  }
};

// ---------------------------------------------------------------------------
// Quantized CDFs

/// Alphabet {center-radius .. center+radius} plus a trailing escape symbol.
struct SymbolTable {
  int center = 0;
  int radius = 0;
  std::vector<std::uint32_t> cdf;  // size = alphabet + 1, cdf.front() = 0, cdf.back() = kTotal

  int escape_index() const { return 2 * radius + 1; }
  std::uint32_t freq(int s) const { return cdf[s + 1] - cdf[s]; }
};

/// Quantizes the discretized Gaussian N(mean, scale) to 16-bit frequencies; every symbol,
/// including the escape, gets at least one count.
inline SymbolTable build_table(double mean, double scale) {
  if (!std::isfinite(mean) || !std::isfinite(scale))
    throw ModelPreparationError("non-finite entropy parameters");
  scale = std::max(scale, codec::kScaleFloor);
  SymbolTable t;
  const double c = std::nearbyint(mean);
  if (std::abs(c) > 1e9) throw ModelPreparationError("entropy model mean out of range");
  t.center = static_cast<int>(c);
  t.radius = std::clamp(static_cast<int>(std::ceil(7.0 * scale + std::abs(mean - c))) + 1, 1, kMaxRadius);
  const int n = 2 * t.radius + 2;
  std::vector<double> p(n);
  double covered = 0.0;
  for (int k = 0; k < n - 1; ++k) {
    p[k] = codec::gaussian_bin_mass(t.center - t.radius + k, mean, scale);
    covered += p[k];
  }
  p[n - 1] = std::max(0.0, 1.0 - covered);
  const double budget = static_cast<double>(kTotal - n);
  std::vector<std::uint32_t> f(n);
  std::uint64_t used = 0;
  int best = 0;
  for (int k = 0; k < n; ++k) {
    f[k] = 1 + static_cast<std::uint32_t>(std::floor(p[k] * budget));
    used += f[k];
    if (p[k] > p[best]) best = k;
  }
  if (used > kTotal) throw ModelPreparationError("CDF quantization overflow");
  f[best] += static_cast<std::uint32_t>(kTotal - used);
  t.cdf.resize(n + 1);
  t.cdf[0] = 0;
  for (int k = 0; k < n; ++k) {
    if (f[k] == 0) throw ModelPreparationError("zero-width CDF interval");
    t.cdf[k + 1] = t.cdf[k] + f[k];
  }
  return t;
}

// ---------------------------------------------------------------------------
// Range coder (32-bit range, byte-wise renormalization with carry propagation)

class RangeEncoder {
 public:
  void encode(std::uint32_t cum, std::uint32_t freq) {
    const std::uint32_t r = range_ >> kPrecisionBits;
    low_ += static_cast<std::uint64_t>(r) * cum;
    range_ = r * freq;
    while (range_ < (1u << 24)) {
      range_ <<= 8;
      shift_low();
    }
  }

  void encode_bit(int bit) { encode(bit ? kTotal / 2 : 0, kTotal / 2); }

  /// Emits the shortest tail that still identifies a value inside the final interval;
  /// the decoder reads the omitted low bytes as zero.
  std::vector<std::uint8_t> finish() {
    int k = 4;
    for (int bytes = 1; bytes <= 4; ++bytes) {
      const std::uint64_t mask = (1ULL << (32 - 8 * bytes)) - 1;
      const std::uint64_t v = (low_ + mask) & ~mask;
      if (v < low_ + range_) {
        low_ = v;
        k = bytes;
        break;
      }
    }
    for (int i = 0; i <= k; ++i) shift_low();
    return std::move(out_);
  }

 private:
  void shift_low() {
    if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
      const auto carry = static_cast<std::uint8_t>(low_ >> 32);
      if (started_) out_.push_back(static_cast<std::uint8_t>(cache_ + carry));
      started_ = true;
      for (; pending_ > 0; --pending_) out_.push_back(static_cast<std::uint8_t>(0xFF + carry));
      cache_ = static_cast<std::uint8_t>(low_ >> 24);
    } else {
      ++pending_;
    }
    low_ = (low_ & 0x00FFFFFFu) << 8;
  }

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t pending_ = 0;
  bool started_ = false;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> data) : data_(data) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next();
  }

  /// Decodes one symbol from a cumulative table (front 0, back kTotal).
  int decode(std::span<const std::uint32_t> cdf) {
    const std::uint32_t r = range_ >> kPrecisionBits;
    const std::uint32_t v = std::min<std::uint32_t>(code_ / r, kTotal - 1);
    // cdf is non-decreasing; find last s with cdf[s] <= v
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), v);
    const int s = static_cast<int>(it - cdf.begin()) - 1;
    if (s < 0 || s + 1 >= static_cast<int>(cdf.size())) throw CorruptData("range decoder left the symbol table");
    code_ -= r * cdf[s];
    range_ = r * (cdf[s + 1] - cdf[s]);
    normalize();
    return s;
  }

  int decode_bit() {
    static constexpr std::uint32_t kBitCdf[] = {0, kTotal / 2, kTotal};
    return decode(kBitCdf);
  }

 private:
  std::uint8_t next() {
    if (pos_ < data_.size()) return data_[pos_++];
    // the encoder's shortened tail leaves at most 3 implicit zero bytes
    if (++pos_ > data_.size() + 4) throw CorruptData("truncated payload");
    return 0;
  }
  void normalize() {
    while (range_ < (1u << 24)) {
      code_ = (code_ << 8) | next();
      range_ <<= 8;
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
};

namespace detail {

inline void put_exp_golomb(RangeEncoder& enc, std::uint64_t value) {
  const std::uint64_t v = value + 1;
  int nbits = 0;
  while ((v >> (nbits + 1)) != 0) ++nbits;
  for (int i = 0; i < nbits; ++i) enc.encode_bit(0);
  for (int i = nbits; i >= 0; --i) enc.encode_bit(static_cast<int>((v >> i) & 1));
}

inline std::uint64_t get_exp_golomb(RangeDecoder& dec) {
  int nbits = 0;
  while (dec.decode_bit() == 0) {
    if (++nbits > 40) throw CorruptData("escape code too long");
  }
  std::uint64_t v = 1;
  for (int i = 0; i < nbits; ++i) v = (v << 1) | static_cast<std::uint64_t>(dec.decode_bit());
  return v - 1;
}

inline void encode_symbol(RangeEncoder& enc, const SymbolTable& t, std::int32_t value) {
  const std::int64_t d = static_cast<std::int64_t>(value) - t.center;
  if (d >= -t.radius && d <= t.radius) {
    const int s = static_cast<int>(d + t.radius);
    enc.encode(t.cdf[s], t.freq(s));
    return;
  }
  const int esc = t.escape_index();
  enc.encode(t.cdf[esc], t.freq(esc));
  enc.encode_bit(d < 0 ? 1 : 0);
  put_exp_golomb(enc, static_cast<std::uint64_t>((d < 0 ? -d : d) - t.radius - 1));
}

inline std::int32_t decode_symbol(RangeDecoder& dec, const SymbolTable& t) {
  const int s = dec.decode(t.cdf);
  if (s != t.escape_index()) return t.center - t.radius + s;
  const bool negative = dec.decode_bit() != 0;
  const std::int64_t mag = static_cast<std::int64_t>(get_exp_golomb(dec)) + t.radius + 1;
  const std::int64_t v = t.center + (negative ? -mag : mag);
  if (v < INT32_MIN || v > INT32_MAX) throw CorruptData("escape value out of range");
  return static_cast<std::int32_t>(v);
}

inline void put_u16(std::vector<std::uint8_t>& b, std::uint32_t v) {
  if (v > 0xFFFF) throw ContractViolation("header field exceeds 16 bits");
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint64_t get_le(std::span<const std::uint8_t> b, std::size_t& pos, int bytes) {
  if (pos + bytes > b.size()) throw CorruptData("truncated bitstream header");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[pos + i]) << (8 * i);
  pos += bytes;
  return v;
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Bitstream container

struct BitstreamHeader {
  std::uint64_t model_digest = 0;
  int width = 0, height = 0;  // original (pre-padding) image size
  int latent_h = 0, latent_w = 0, latent_c = 0;
  int hyper_h = 0, hyper_w = 0, hyper_c = 0;

  bool operator==(const BitstreamHeader&) const = default;
};

struct Bitstream {
  BitstreamHeader header;
  std::vector<std::uint8_t> payload;

  std::size_t size_bytes() const { return kHeaderBytes + payload.size() + kTrailerBytes; }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> b{'E', 'G', 'I', 'C', kVersion};
    detail::put_u64(b, header.model_digest);
    for (int v : {header.width, header.height, header.latent_h, header.latent_w, header.latent_c, header.hyper_h,
                  header.hyper_w, header.hyper_c})
      detail::put_u16(b, static_cast<std::uint32_t>(v));
    detail::put_u32(b, static_cast<std::uint32_t>(payload.size()));
    b.insert(b.end(), payload.begin(), payload.end());
    detail::put_u32(b, detail::crc32_of(b));
    return b;
  }

  static Bitstream parse(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kHeaderBytes + kTrailerBytes) throw CorruptData("bitstream shorter than its header");
    if (!(bytes[0] == 'E' && bytes[1] == 'G' && bytes[2] == 'I' && bytes[3] == 'C'))
      throw CorruptData("bad bitstream magic");
    if (bytes[4] != kVersion) throw CorruptData("unsupported bitstream version " + std::to_string(bytes[4]));
    std::size_t pos = 5;
    Bitstream bs;
    bs.header.model_digest = detail::get_le(bytes, pos, 8);
    int* fields[] = {&bs.header.width,    &bs.header.height,  &bs.header.latent_h, &bs.header.latent_w,
                     &bs.header.latent_c, &bs.header.hyper_h, &bs.header.hyper_w,  &bs.header.hyper_c};
    for (int* f : fields) *f = static_cast<int>(detail::get_le(bytes, pos, 2));
    const auto len = detail::get_le(bytes, pos, 4);
    if (pos + len + kTrailerBytes != bytes.size()) throw CorruptData("payload length does not match file size");
    std::size_t crc_pos = pos + len;
    const auto stored_crc = static_cast<std::uint32_t>(detail::get_le(bytes, crc_pos, 4));
    if (stored_crc != detail::crc32_of(bytes.first(pos + len))) throw CorruptData("bitstream checksum mismatch");
    bs.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + len));
    return bs;
  }
};

/// Bits per pixel of the whole container relative to the original image area.
inline double bpp(const Bitstream& b) {
  EGIC_REQUIRE(b.header.width > 0 && b.header.height > 0, "bpp of a stream with empty image size");
  return 8.0 * static_cast<double>(b.size_bytes()) / (static_cast<double>(b.header.width) * b.header.height);
}

/// Codes the hyper-latent (if any) under its per-channel prior, then y under the
/// conditional Gaussians reconstructed from the decoded hyper-latent.
template <class T>
Bitstream encode_stream(const LatentCode& y, const std::optional<LatentCode>& z, const codec::EntropyModel<T>& model,
                        int width, int height) {
  EGIC_REQUIRE(y.shape.n == 1, "encode_stream codes a single image");
  EGIC_REQUIRE(model.has_hyperprior() == z.has_value(), "hyper-latent presence does not match the model");
  Bitstream bs;
  bs.header = {model.digest(), width, height, y.shape.h, y.shape.w, y.shape.c, 0, 0, 0};
  if (z) {
    bs.header.hyper_h = z->shape.h;
    bs.header.hyper_w = z->shape.w;
    bs.header.hyper_c = z->shape.c;
  }
  const bool any = y.shape.size() > 0 || (z && z->shape.size() > 0);
  if (!any) return bs;
  RangeEncoder enc;
  if (z) {
    const auto prior = model.channel_prior();
    std::vector<SymbolTable> tables;
    for (const auto& [m, s] : prior) tables.push_back(build_table(m, s));
    const std::size_t plane = z->shape.plane();
    for (std::size_t i = 0; i < z->values.size(); ++i)
      detail::encode_symbol(enc, tables[(i / plane) % z->shape.c], z->values[i]);
  }
  if (y.shape.size() > 0) {
    const Tensor<T> z_hat = z ? z->template to_tensor<T>() : Tensor<T>();
    const auto field = model.y_field(z_hat, y.shape);
    for (std::size_t i = 0; i < y.values.size(); ++i)
      detail::encode_symbol(enc, build_table(field.mean[i], field.scale[i]), y.values[i]);
  }
  bs.payload = enc.finish();
  return bs;
}

struct DecodedLatents {
  LatentCode y;
  std::optional<LatentCode> z;
};

template <class T>
DecodedLatents decode_stream(const Bitstream& bs, const codec::EntropyModel<T>& model) {
  if (bs.header.model_digest != model.digest())
    throw IncompatibleModel("bitstream was produced by a different entropy model");
  const auto& h = bs.header;
  DecodedLatents out;
  out.y.shape = Shape{1, h.latent_c, h.latent_h, h.latent_w};
  out.y.values.resize(out.y.shape.size());
  const bool has_z = h.hyper_c > 0 || h.hyper_h > 0 || h.hyper_w > 0;
  if (has_z != model.has_hyperprior()) throw IncompatibleModel("hyper-latent presence does not match the model");
  if (has_z) {
    out.z = LatentCode{Shape{1, h.hyper_c, h.hyper_h, h.hyper_w}, {}};
    out.z->values.resize(out.z->shape.size());
  }
  const bool any = out.y.shape.size() > 0 || (out.z && out.z->shape.size() > 0);
  if (!any) {
    if (!bs.payload.empty()) throw CorruptData("payload present for an empty latent");
    return out;
  }
  RangeDecoder dec(bs.payload);
  if (out.z) {
    const auto prior = model.channel_prior();
    if (static_cast<int>(prior.size()) != h.hyper_c) throw IncompatibleModel("hyper-latent channel count mismatch");
    std::vector<SymbolTable> tables;
    for (const auto& [m, s] : prior) tables.push_back(build_table(m, s));
    const std::size_t plane = out.z->shape.plane();
    for (std::size_t i = 0; i < out.z->values.size(); ++i)
      out.z->values[i] = detail::decode_symbol(dec, tables[(i / plane) % h.hyper_c]);
  }
  if (out.y.shape.size() > 0) {
    const Tensor<T> z_hat = out.z ? out.z->template to_tensor<T>() : Tensor<T>();
    const auto field = model.y_field(z_hat, out.y.shape);
    for (std::size_t i = 0; i < out.y.values.size(); ++i)
      out.y.values[i] = detail::decode_symbol(dec, build_table(field.mean[i], field.scale[i]));
  }
  return out;
}

inline void write_bitstream(const std::filesystem::path& path, const Bitstream& bs) {
  const auto bytes = bs.serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Bitstream read_bitstream(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return Bitstream::parse(bytes);
}

}  // namespace egic::entropy
