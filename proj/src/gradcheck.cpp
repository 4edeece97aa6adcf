#include "xstitch/gradcheck.hpp"

#include <cstdio>
#include <sstream>

namespace xstitch {

std::vector<double> finite_diff(const std::function<double(const std::vector<double>&)>& loss_fn,
                                std::vector<double> params, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff: epsilon must be positive");
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    const double hi = saved + eps;
    const double lo = saved - eps;
    params[i] = hi;
    const double up = loss_fn(params);
    params[i] = lo;
    const double down = loss_fn(params);
    params[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw DivergenceError("finite_diff: non-finite loss at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (hi - lo);
  }
  return grad;
}

const GroupReport& GradReport::worst() const {
  if (groups.empty()) throw ContractError("gradient report has no groups");
  return *std::max_element(groups.begin(), groups.end(), [](const GroupReport& a, const GroupReport& b) {
    return a.max_relative_error < b.max_relative_error;
  });
}

double GradReport::max_relative_error() const { return groups.empty() ? 0.0 : worst().max_relative_error; }

Index GradReport::coordinates() const {
  Index n = 0;
  for (const auto& g : groups) n += g.size;
  return n;
}

std::string format_report(const GradReport& report) {
  std::ostringstream out;
  char line[256];
  for (const auto& g : report.groups) {
    std::snprintf(line, sizeof line, "%-24s n=%-6lld max_rel=%.3e max_abs=%.3e worst=%lld (analytic %.6e, numeric %.6e)\n",
                  g.name.c_str(), static_cast<long long>(g.size), g.max_relative_error, g.max_absolute_error,
                  static_cast<long long>(g.worst_coordinate), g.worst_analytic, g.worst_numeric);
    out << line;
  }
  std::snprintf(line, sizeof line, "%s: max_rel=%.3e tol=%.1e eps=%.1e oracle=%s coordinates=%lld",
                report.pass ? "PASS" : "FAIL", report.max_relative_error(), report.tolerance, report.epsilon,
                report.oracle == GradOracle::extended ? "extended" : "native",
                static_cast<long long>(report.coordinates()));
  out << line;
  if (!report.groups.empty()) out << " worst=" << report.worst().name << "[" << report.worst().worst_coordinate << "]";
  out << "\n";
  return out.str();
}

}  // namespace xstitch
