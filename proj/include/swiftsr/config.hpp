#pragma once

// Flat key=value training configuration. '#' starts a comment; blank lines
// are ignored. Every key maps onto one TrainConfig field.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <string>

#include "swiftsr/train.hpp"

namespace swiftsr {

/// A key the parser does not know; `key()` is the offending name.
class ConfigKeyError : public Error {
 public:
  explicit ConfigKeyError(std::string key)
      : Error("unknown config key '" + key + "'"), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) {
    throw Error("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const std::string item = trim(v.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    out.push_back(parse_number<std::size_t>(key, item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

/// Applies one assignment to `cfg`. Throws ConfigKeyError for unknown keys.
inline void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& v) {
  using detail::parse_list;
  using detail::parse_number;
  using Setter = std::function<void(const std::string&)>;
  auto size = [&](std::size_t& f) -> Setter { return [&f, &key](const std::string& s) { f = parse_number<std::size_t>(key, s); }; };
  auto real = [&](float& f) -> Setter { return [&f, &key](const std::string& s) { f = parse_number<float>(key, s); }; };
  auto dbl = [&](double& f) -> Setter { return [&f, &key](const std::string& s) { f = parse_number<double>(key, s); }; };
  auto u64 = [&](std::uint64_t& f) -> Setter { return [&f, &key](const std::string& s) { f = parse_number<std::uint64_t>(key, s); }; };
  auto list = [&](std::vector<std::size_t>& f) -> Setter { return [&f, &key](const std::string& s) { f = parse_list(key, s); }; };

  const std::map<std::string, Setter> table{
      {"seed", u64(cfg.seed)},
      {"batch_size", size(cfg.batch_size)},
      {"adversarial_weight", dbl(cfg.adversarial_weight)},
      {"content_norm",
       [&](const std::string& s) {
         if (s == "mean") cfg.content_norm = ContentNorm::Mean;
         else if (s == "literal") cfg.content_norm = ContentNorm::Literal;
         else throw Error("config key 'content_norm': expected mean or literal, got '" + s + "'");
       }},
      {"adversarial_reduction",
       [&](const std::string& s) {
         if (s == "sum") cfg.adversarial_reduction = AdversarialReduction::Sum;
         else if (s == "mean") cfg.adversarial_reduction = AdversarialReduction::Mean;
         else throw Error("config key 'adversarial_reduction': expected sum or mean, got '" + s + "'");
       }},
      {"generator.base_channels", size(cfg.generator.base_channels)},
      {"generator.residual_blocks", size(cfg.generator.num_residual_blocks)},
      {"scale",
       [&](const std::string& s) {
         cfg.generator.upscale_factor = parse_number<std::size_t>(key, s);
         cfg.pipeline.scale = cfg.generator.upscale_factor;
       }},
      {"discriminator.block_channels", list(cfg.discriminator.block_channels)},
      {"discriminator.strides", list(cfg.discriminator.strides)},
      {"discriminator.pool_size", size(cfg.discriminator.pool_size)},
      {"discriminator.hidden_units", size(cfg.discriminator.hidden_units)},
      {"extractor.channels", list(cfg.extractor.channels)},
      {"extractor.strides", list(cfg.extractor.strides)},
      {"extractor.tap_block", size(cfg.extractor.tap_block)},
      {"extractor.seed", u64(cfg.extractor_seed)},
      {"data.crop_size", size(cfg.pipeline.crop_size)},
      {"data.flip_prob", dbl(cfg.pipeline.flip_prob)},
      {"data.rot90_prob", dbl(cfg.pipeline.rot90_prob)},
      {"optim.lr_g", real(cfg.opt_g.lr)},
      {"optim.lr_d", real(cfg.opt_d.lr)},
      {"optim.beta1", [&](const std::string& s) { cfg.opt_g.beta1 = cfg.opt_d.beta1 = parse_number<float>(key, s); }},
      {"optim.beta2", [&](const std::string& s) { cfg.opt_g.beta2 = cfg.opt_d.beta2 = parse_number<float>(key, s); }},
      {"optim.eps", [&](const std::string& s) { cfg.opt_g.eps = cfg.opt_d.eps = parse_number<float>(key, s); }},
      {"optim.weight_decay",
       [&](const std::string& s) { cfg.opt_g.weight_decay = cfg.opt_d.weight_decay = parse_number<float>(key, s); }},
      {"plateau.factor", real(cfg.plateau.factor)},
      {"plateau.patience", size(cfg.plateau.patience)},
      {"plateau.min_lr", real(cfg.plateau.min_lr)},
  };
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigKeyError(key);
  it->second(v);
}

/// Checks cross-field constraints once every key has been applied.
inline void validate_config(const TrainConfig& cfg) {
  cfg.generator.validate();
  cfg.discriminator.validate();
  cfg.extractor.validate();
  cfg.pipeline.validate();
  cfg.opt_g.validate();
  cfg.opt_d.validate();
  cfg.plateau.validate();
  if (cfg.batch_size == 0) throw Error("batch_size must be >= 1");
  if (cfg.pipeline.scale != cfg.generator.upscale_factor) throw Error("data scale differs from generator scale");
}

inline void parse_config(std::istream& in, TrainConfig& cfg) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key=value");
    apply_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig cfg = {}) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read config '" + path.string() + "'");
  parse_config(f, cfg);
  return cfg;
}

}  // namespace swiftsr
