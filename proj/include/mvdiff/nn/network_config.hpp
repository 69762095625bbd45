#pragma once

#include <string>
#include <vector>

#include "mvdiff/config.hpp"
#include "mvdiff/error.hpp"

namespace mvdiff::nn {

enum class ConditioningMode { pose_token, concat_input, concat_multiscale, rcn };

inline const char* to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::pose_token: return "pose_token";
    case ConditioningMode::concat_input: return "concat_input";
    case ConditioningMode::concat_multiscale: return "concat_multiscale";
    case ConditioningMode::rcn: return "rcn";
  }
  return "?";
}

inline ConditioningMode parse_conditioning_mode(const std::string& s) {
  if (s == "pose_token") return ConditioningMode::pose_token;
  if (s == "concat_input") return ConditioningMode::concat_input;
  if (s == "concat_multiscale") return ConditioningMode::concat_multiscale;
  if (s == "rcn") return ConditioningMode::rcn;
  throw ConfigError("conditioning_mode: '" + s +
                    "' is not one of pose_token, concat_input, concat_multiscale, rcn");
}

struct NetworkConfig {
  int image_size = 32;
  int image_channels = 3;
  std::vector<int> channels{32, 64, 128};  // one entry per level
  ConditioningMode mode = ConditioningMode::rcn;
  bool attention = false;
  int time_dim = 64;
  int mod_hidden = 64;
  int fourier_bands = 6;
  int encoder_channels = 16;

  static constexpr int pose_dim = 4;  // (dθ, sin dφ, cos dφ, dz)

  int levels() const { return static_cast<int>(channels.size()); }
  int ray_dim() const { return 6 * (2 * fourier_bands + 1); }
  int level_size(int level) const { return image_size >> level; }
  bool rays_at_input() const {
    return mode == ConditioningMode::concat_input || mode == ConditioningMode::concat_multiscale;
  }
  bool uses_rays() const { return mode != ConditioningMode::pose_token; }

  void validate() const {
    if (levels() < 2) throw ConfigError("network: at least 2 levels required");
    if (image_size < 1 || image_size % (1 << (levels() - 1)) != 0)
      throw ConfigError("network: image_size must be divisible by 2^(levels-1)");
    for (int c : channels)
      if (c < 1) throw ConfigError("network: channel counts must be positive");
    if (time_dim < 2 || mod_hidden < 1 || fourier_bands < 1 || encoder_channels < 1 || image_channels < 1)
      throw ConfigError("network: dimensions must be positive");
  }

  void write(KeyValues& kv, const std::string& prefix = "net.") const {
    kv.set_value(prefix + "image_size", image_size);
    kv.set_value(prefix + "image_channels", image_channels);
    kv.set(prefix + "channels", join_list(channels));
    kv.set(prefix + "conditioning_mode", to_string(mode));
    kv.set(prefix + "attention", attention ? "true" : "false");
    kv.set_value(prefix + "time_dim", time_dim);
    kv.set_value(prefix + "mod_hidden", mod_hidden);
    kv.set_value(prefix + "fourier_bands", fourier_bands);
    kv.set_value(prefix + "encoder_channels", encoder_channels);
  }

  static NetworkConfig read(const KeyValues& kv, const std::string& prefix = "net.") {
    NetworkConfig c;
    c.image_size = kv.get_number(prefix + "image_size", c.image_size);
    c.image_channels = kv.get_number(prefix + "image_channels", c.image_channels);
    c.channels = kv.get_list(prefix + "channels", c.channels);
    c.mode = parse_conditioning_mode(kv.get(prefix + "conditioning_mode", to_string(c.mode)));
    c.attention = kv.get_bool(prefix + "attention", c.attention);
    c.time_dim = kv.get_number(prefix + "time_dim", c.time_dim);
    c.mod_hidden = kv.get_number(prefix + "mod_hidden", c.mod_hidden);
    c.fourier_bands = kv.get_number(prefix + "fourier_bands", c.fourier_bands);
    c.encoder_channels = kv.get_number(prefix + "encoder_channels", c.encoder_channels);
    c.validate();
    return c;
  }

  bool operator==(const NetworkConfig&) const = default;
};

}  // namespace mvdiff::nn
