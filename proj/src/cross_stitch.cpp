#include "xstitch/cross_stitch.hpp"

#include "xstitch/errors.hpp"

namespace xstitch {

std::string_view to_string(Granularity g) {
  return g == Granularity::per_map ? "per_map" : "per_channel";
}

Granularity parse_granularity(std::string_view text) {
  if (text == "per_channel") return Granularity::per_channel;
  if (text == "per_map") return Granularity::per_map;
  throw ConfigError("unknown granularity '" + std::string(text) + "'");
}

}  // namespace xstitch
