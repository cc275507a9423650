#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "egic/training.hpp"

namespace egic::config {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("invalid value '" + text + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("invalid boolean '" + text + "' for " + key);
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_floating_point_v<T>) s += format_double(v[i]);
    else s += std::to_string(v[i]);
  }
  return s;
}

/// Every tunable of every command, with defaults. Precedence: flags > file > defaults.
struct RunConfig {
  data::DatasetSpec data;
  int held_out = 8;  // samples reserved from the end of the dataset for reporting
  codec::CodecConfig codec;
  std::uint64_t codec_seed = 0;
  disc::OasisCConfig disc;
  train::TrainPlan train;
  std::vector<double> alphas = eval::default_alpha_grid();
  double alpha = 1.0;
  int patch = 32;

  RunConfig() {
    // desk-scale defaults
    train.steps = 2000;
  }

  /// Ordered key table; each entry knows how to set and print its field.
  struct Entry {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
  };

  static const std::vector<std::pair<std::string, Entry>>& table() {
    static const std::vector<std::pair<std::string, Entry>> t = [] {
      std::vector<std::pair<std::string, Entry>> v;
      auto add_int = [&v](const std::string& key, auto member_ptr) {
        v.push_back({key,
                     {[key, member_ptr](RunConfig& c, const std::string& s) {
                        using M = std::remove_reference_t<decltype(member_ptr(c))>;
                        member_ptr(c) = parse_number<M>(key, s);
                      },
                      [member_ptr](const RunConfig& c) {
                        auto& cc = const_cast<RunConfig&>(c);
                        return std::to_string(member_ptr(cc));
                      }}});
      };
      auto add_double = [&v](const std::string& key, auto member_ptr) {
        v.push_back({key,
                     {[key, member_ptr](RunConfig& c, const std::string& s) { member_ptr(c) = parse_number<double>(key, s); },
                      [member_ptr](const RunConfig& c) {
                        return format_double(member_ptr(const_cast<RunConfig&>(c)));
                      }}});
      };
      add_int("data.num_samples", [](RunConfig& c) -> int& { return c.data.num_samples; });
      add_int("data.image_size", [](RunConfig& c) -> int& { return c.data.image_size; });
      add_int("data.num_classes", [](RunConfig& c) -> int& { return c.data.num_classes; });
      add_int("data.seed", [](RunConfig& c) -> std::uint64_t& { return c.data.seed; });
      add_int("data.min_shapes", [](RunConfig& c) -> int& { return c.data.min_shapes; });
      add_int("data.max_shapes", [](RunConfig& c) -> int& { return c.data.max_shapes; });
      add_int("data.held_out", [](RunConfig& c) -> int& { return c.held_out; });
      add_int("codec.latent_channels", [](RunConfig& c) -> int& { return c.codec.latent_channels; });
      add_int("codec.downsample_factor", [](RunConfig& c) -> int& { return c.codec.downsample_factor; });
      add_int("codec.base_width", [](RunConfig& c) -> int& { return c.codec.base_width; });
      add_int("codec.hyper_channels", [](RunConfig& c) -> int& { return c.codec.hyper_channels; });
      v.push_back({"codec.use_hyperprior",
                   {[](RunConfig& c, const std::string& s) { c.codec.use_hyperprior = parse_bool("codec.use_hyperprior", s); },
                    [](const RunConfig& c) { return std::string(c.codec.use_hyperprior ? "true" : "false"); }}});
      add_int("codec.seed", [](RunConfig& c) -> std::uint64_t& { return c.codec_seed; });
      v.push_back({"disc.kind",
                   {[](RunConfig& c, const std::string& s) { c.train.disc = train::parse_disc_kind(s); },
                    [](const RunConfig& c) {
                      return std::string(c.train.disc == train::DiscKind::OasisC ? "oasis_c" : "patchgan");
                    }}});
      v.push_back({"disc.down_channels",
                   {[](RunConfig& c, const std::string& s) { c.disc.down_channels = parse_list<int>("disc.down_channels", s); },
                    [](const RunConfig& c) { return join(c.disc.down_channels); }}});
      v.push_back({"disc.up_channels",
                   {[](RunConfig& c, const std::string& s) { c.disc.up_channels = parse_list<int>("disc.up_channels", s); },
                    [](const RunConfig& c) { return join(c.disc.up_channels); }}});
      add_int("disc.prep_width", [](RunConfig& c) -> int& { return c.disc.prep_width; });
      v.push_back({"train.stage",
                   {[](RunConfig& c, const std::string& s) { c.train.stage = train::parse_stage(s); },
                    [](const RunConfig& c) { return train::to_string(c.train.stage); }}});
      v.push_back({"train.strategy",
                   {[](RunConfig& c, const std::string& s) { c.train.strategy = train::parse_strategy(s); },
                    [](const RunConfig& c) { return std::string(c.train.strategy == train::Strategy::I ? "I" : "II"); }}});
      add_int("train.steps", [](RunConfig& c) -> long& { return c.train.steps; });
      add_int("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; });
      add_double("train.lr", [](RunConfig& c) -> double& { return c.train.lr; });
      add_int("train.lr_decay_step", [](RunConfig& c) -> long& { return c.train.lr_decay_step; });
      add_double("train.lr_decayed", [](RunConfig& c) -> double& { return c.train.lr_decayed; });
      add_double("train.lambda", [](RunConfig& c) -> double& { return c.train.lambda; });
      add_int("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
      add_int("train.checkpoint_every", [](RunConfig& c) -> long& { return c.train.checkpoint_every; });
      add_int("train.log_every", [](RunConfig& c) -> long& { return c.train.log_every; });
      // Loss weights print their effective values (strategy II overrides three of them).
      auto add_weight = [&v](const std::string& key, double train::LossWeights::*field) {
        v.push_back({key,
                     {[key, field](RunConfig& c, const std::string& s) { c.train.weights.*field = parse_number<double>(key, s); },
                      [field](const RunConfig& c) { return format_double(c.train.effective_weights().*field); }}});
      };
      add_weight("loss.k_mse", &train::LossWeights::k_mse);
      add_weight("loss.k_perc", &train::LossWeights::k_perc);
      add_weight("loss.beta", &train::LossWeights::beta);
      add_weight("loss.labelmix", &train::LossWeights::labelmix);
      add_weight("loss.ffl", &train::LossWeights::ffl);
      v.push_back({"sweep.alphas",
                   {[](RunConfig& c, const std::string& s) { c.alphas = parse_list<double>("sweep.alphas", s); },
                    [](const RunConfig& c) { return join(c.alphas); }}});
      add_double("decode.alpha", [](RunConfig& c) -> double& { return c.alpha; });
      add_int("eval.patch", [](RunConfig& c) -> int& { return c.patch; });
      return v;
    }();
    return t;
  }

  void set(const std::string& key, const std::string& value) {
    for (const auto& [k, e] : table())
      if (k == key) {
        e.set(*this, trim(value));
        return;
      }
    throw ConfigError("unknown configuration key '" + key + "'");
  }

  std::string get(const std::string& key) const {
    for (const auto& [k, e] : table())
      if (k == key) return e.get(*this);
    throw ConfigError("unknown configuration key '" + key + "'");
  }

  /// key = value lines; '#' starts a comment.
  void apply_text(const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void apply_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    apply_text(ss.str(), path.string());
  }

  /// Resolved configuration, one key per line, replayable through apply_text.
  std::string to_text() const {
    std::string out;
    for (const auto& [k, e] : table()) out += k + " = " + e.get(*this) + "\n";
    return out;
  }

  /// Derives dependent settings and checks everything.
  void finalize() {
    data.validate();
    codec.lambda = train.lambda > 0 ? train.lambda : codec.lambda;
    codec.validate();
    train.validate();
    if (held_out < 0) throw ConfigError("data.held_out must be >= 0");
    if (patch < 1) throw ConfigError("eval.patch must be >= 1");
    for (double a : alphas)
      if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("sweep.alphas entries must be in [0, 1]");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("decode.alpha must be in [0, 1]");
    disc.image_size = data.image_size;
    disc.num_classes = data.num_classes;
    disc.latent_channels = codec.latent_channels;
  }
};

}  // namespace egic::config
