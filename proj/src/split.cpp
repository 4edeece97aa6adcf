#include "xstitch/split.hpp"

namespace xstitch {

std::vector<SplitArchitecture> enumerate_splits(const NetworkSpec& spec) {
  validate(spec);
  std::vector<SplitArchitecture> out;
  for (Index k = 0; k <= spec.trunk_depth(); ++k) out.push_back({spec, k});
  return out;
}

}  // namespace xstitch
