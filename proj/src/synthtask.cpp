#include "xstitch/synthtask.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "xstitch/hash.hpp"

namespace xstitch {
namespace {

struct Segment {
  double x0, y0, x1, y1;
};

// Glyphs in [-1, 1]^2 (y down). None is rotationally symmetric, so every
// rotation bin renders distinctly.
const std::vector<std::vector<Segment>>& glyphs() {
  static const std::vector<std::vector<Segment>> g = {
      {{-0.5, -1, -0.5, 1}, {-0.5, 1, 0.6, 1}},
      {{-1, -1, 1, -1}, {0.4, -1, 0.4, 1}},
      {{0, -1, 0, 1}, {0, -1, 0.7, -0.3}},
      {{-0.5, -0.2, 1, -0.2}, {0, -1, 0, 0.6}},
      {{-1, -1, 0, -1}, {0, -1, 0, 1}, {0, 1, 0.5, 1}},
      {{-0.7, -1, -0.7, 1}, {-0.7, 1, 0.7, 1}, {0.7, 1, 0.7, 0}},
      {{-0.5, -1, -0.5, 1}, {-0.5, -1, 0.7, -1}, {-0.5, 0, 0.3, 0}},
      {{0, 0, 0, 1}, {0, 0, -0.7, -1}, {0, 0, 0.5, -0.8}},
  };
  return g;
}

double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0;
  const double dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = s.x0 + t * dx - px;
  const double ey = s.y0 + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

void validate(const GeneratorConfig& c) {
  if (c.count < 1) throw ConfigError("dataset count must be positive");
  if (c.height < 1 || c.width < 1) throw ConfigError("canvas extents must be positive");
  if (c.classes_a < 1 || c.classes_a > glyph_count()) {
    throw ConfigError("classes_a must lie in [1, " + std::to_string(glyph_count()) + "]");
  }
  if (c.classes_b < 1) throw ConfigError("classes_b must be positive");
  if (!(c.relatedness >= 0.0 && c.relatedness <= 1.0)) throw ConfigError("relatedness must lie in [0, 1]");
  if (!(c.noise_level >= 0.0)) throw ConfigError("noise_level must be non-negative");
  if (c.jitter < 0) throw ConfigError("jitter must be non-negative");
  if (!(c.shape_size > 0.0) ||
      c.shape_size + 2.0 * static_cast<double>(c.jitter) > static_cast<double>(std::min(c.height, c.width))) {
    throw ConfigError("glyph of size " + std::to_string(c.shape_size) + " with jitter " +
                      std::to_string(c.jitter) + " does not fit a " + std::to_string(c.height) + "x" +
                      std::to_string(c.width) + " canvas");
  }
  if (c.train_fraction <= 0.0 || c.val_fraction < 0.0 || c.train_fraction + c.val_fraction > 1.0) {
    throw ConfigError("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1");
  }
}

void render(float* out, const GeneratorConfig& c, int shape, int rotation, Index dx, Index dy) {
  const double theta = 2.0 * std::numbers::pi * rotation / static_cast<double>(c.classes_b);
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  const double radius = c.shape_size / 2.0;
  const double cx = static_cast<double>(c.width) / 2.0 + static_cast<double>(dx);
  const double cy = static_cast<double>(c.height) / 2.0 + static_cast<double>(dy);
  std::vector<Segment> segs;
  for (const auto& s : glyphs()[static_cast<std::size_t>(shape)]) {
    auto place = [&](double x, double y) {
      return std::pair{cx + radius * (cs * x - sn * y), cy + radius * (sn * x + cs * y)};
    };
    const auto [x0, y0] = place(s.x0, s.y0);
    const auto [x1, y1] = place(s.x1, s.y1);
    segs.push_back({x0, y0, x1, y1});
  }
  for (Index r = 0; r < c.height; ++r) {
    for (Index col = 0; col < c.width; ++col) {
      const double px = static_cast<double>(col) + 0.5;
      const double py = static_cast<double>(r) + 0.5;
      double d = std::numeric_limits<double>::infinity();
      for (const auto& s : segs) d = std::min(d, segment_distance(px, py, s));
      out[r * c.width + col] = static_cast<float>(std::clamp(1.25 - d, 0.0, 1.0));
    }
  }
}

nlohmann::json config_to_json(const GeneratorConfig& c) {
  return {{"count", c.count},           {"height", c.height},
          {"width", c.width},           {"classes_a", c.classes_a},
          {"classes_b", c.classes_b},   {"noise_level", c.noise_level},
          {"relatedness", c.relatedness}, {"shape_size", c.shape_size},
          {"jitter", c.jitter},         {"train_fraction", c.train_fraction},
          {"val_fraction", c.val_fraction}};
}

GeneratorConfig config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.count = j.at("count");
  c.height = j.at("height");
  c.width = j.at("width");
  c.classes_a = j.at("classes_a");
  c.classes_b = j.at("classes_b");
  c.noise_level = j.at("noise_level");
  c.relatedness = j.at("relatedness");
  c.shape_size = j.at("shape_size");
  c.jitter = j.at("jitter");
  c.train_fraction = j.at("train_fraction");
  c.val_fraction = j.at("val_fraction");
  return c;
}

constexpr const char* kFormat = "xstitch-dataset";
constexpr int kVersion = 1;

}  // namespace

const char* to_string(SplitTag s) {
  switch (s) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "?";
}

Index glyph_count() { return static_cast<Index>(glyphs().size()); }

std::vector<Index> TwoTaskDataset::indices(SplitTag tag) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == tag) out.push_back(static_cast<Index>(i));
  }
  return out;
}

TwoTaskDataset generate(const GeneratorConfig& config, std::uint64_t seed) {
  validate(config);
  const auto n = static_cast<std::size_t>(config.count);
  TwoTaskDataset ds;
  ds.config = config;
  ds.seed = seed;
  ds.inputs = Tensor<float>(Shape{config.count, 1, config.height, config.width});
  ds.labels_a.resize(n);
  ds.labels_b.resize(n);
  ds.mask_b.assign(n, 1);
  ds.split.resize(n);

  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) ds.labels_a[i] = static_cast<int>(i % static_cast<std::size_t>(config.classes_a));
  std::shuffle(ds.labels_a.begin(), ds.labels_a.end(), rng);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> any_b(0, static_cast<int>(config.classes_b) - 1);
  std::uniform_int_distribution<Index> shift(-config.jitter, config.jitter);
  std::normal_distribution<double> noise(0.0, 1.0);
  const Index pixels = config.height * config.width;
  for (std::size_t i = 0; i < n; ++i) {
    const int a = ds.labels_a[i];
    const bool tied = unit(rng) < config.relatedness;
    const int resampled = any_b(rng);
    ds.labels_b[i] = tied ? a % static_cast<int>(config.classes_b) : resampled;
    const Index dx = shift(rng);
    const Index dy = shift(rng);
    float* px = ds.inputs.data().data() + static_cast<Index>(i) * pixels;
    render(px, config, a, ds.labels_b[i], dx, dy);
    for (Index p = 0; p < pixels; ++p) px[p] += static_cast<float>(config.noise_level * noise(rng));
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(config.train_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::floor(config.val_fraction * static_cast<double>(n)));
  for (std::size_t k = 0; k < n; ++k) {
    ds.split[order[k]] = k < n_train ? SplitTag::train : (k < n_train + n_val ? SplitTag::val : SplitTag::test);
  }
  return ds;
}

StarveResult starve(const TwoTaskDataset& dataset, const std::vector<int>& classes, double keep_fraction,
                    std::uint64_t seed) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("keep_fraction must lie in (0, 1]");
  const std::set<int> unique(classes.begin(), classes.end());
  for (int c : unique) {
    if (c < 0 || c >= dataset.config.classes_b) throw ConfigError("starved class " + std::to_string(c) + " out of range");
  }
  StarveResult r{dataset, {}};
  r.report.classes.assign(unique.begin(), unique.end());
  r.report.labels_before = label_counts(dataset, Task::b, SplitTag::train);

  std::mt19937_64 rng(seed);
  for (int c : unique) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < dataset.labels_b.size(); ++i) {
      if (dataset.split[i] == SplitTag::train && dataset.mask_b[i] && dataset.labels_b[i] == c) members.push_back(i);
    }
    if (members.empty()) {
      r.report.warnings.push_back("class " + std::to_string(c) + " has no labeled training examples");
      continue;
    }
    auto keep = static_cast<std::size_t>(std::floor(keep_fraction * static_cast<double>(members.size())));
    keep = std::max<std::size_t>(keep, 1);
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = keep; k < members.size(); ++k) r.dataset.mask_b[members[k]] = 0;
  }
  r.dataset.starvations.push_back({r.report.classes, keep_fraction, seed});
  r.report.labels_after = label_counts(r.dataset, Task::b, SplitTag::train);
  return r;
}

std::vector<Index> label_counts(const TwoTaskDataset& ds, Task task, SplitTag tag) {
  const Index classes = task == Task::a ? ds.config.classes_a : ds.config.classes_b;
  std::vector<Index> counts(static_cast<std::size_t>(classes), 0);
  for (std::size_t i = 0; i < ds.split.size(); ++i) {
    if (ds.split[i] != tag) continue;
    if (task == Task::a) {
      ++counts[static_cast<std::size_t>(ds.labels_a[i])];
    } else if (ds.mask_b[i]) {
      ++counts[static_cast<std::size_t>(ds.labels_b[i])];
    }
  }
  return counts;
}

void save_dataset(const TwoTaskDataset& ds, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "dataset payload is little-endian float32");
  nlohmann::json starv = nlohmann::json::array();
  for (const auto& s : ds.starvations) {
    starv.push_back({{"classes", s.classes}, {"keep_fraction", s.keep_fraction}, {"seed", s.seed}});
  }
  std::vector<int> split(ds.split.size());
  std::transform(ds.split.begin(), ds.split.end(), split.begin(), [](SplitTag t) { return static_cast<int>(t); });
  const nlohmann::json header = {
      {"format", kFormat},
      {"version", kVersion},
      {"config", config_to_json(ds.config)},
      {"seed", ds.seed},
      {"shape", ds.inputs.shape()},
      {"labels_a", ds.labels_a},
      {"labels_b", ds.labels_b},
      {"mask_b", ds.mask_b},
      {"split", split},
      {"starvations", starv},
      {"config_hash", ds.config_hash},
      {"payload_bytes", ds.inputs.size() * static_cast<Index>(sizeof(float))},
  };
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write dataset file " + path.string());
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(ds.inputs.data().data()),
            static_cast<std::streamsize>(ds.inputs.size() * static_cast<Index>(sizeof(float))));
  if (!out) throw FormatError("failed writing dataset file " + path.string());
}

TwoTaskDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("dataset file " + path.string() + " is empty");
  try {
    const auto h = nlohmann::json::parse(line);
    if (h.at("format") != kFormat || h.at("version") != kVersion) {
      throw FormatError("unsupported dataset format in " + path.string());
    }
    TwoTaskDataset ds;
    ds.config = config_from_json(h.at("config"));
    ds.seed = h.at("seed");
    const Shape shape = h.at("shape").get<Shape>();
    ds.inputs = Tensor<float>(shape);
    ds.labels_a = h.at("labels_a").get<std::vector<int>>();
    ds.labels_b = h.at("labels_b").get<std::vector<int>>();
    ds.mask_b = h.at("mask_b").get<std::vector<std::uint8_t>>();
    for (int s : h.at("split").get<std::vector<int>>()) {
      if (s < 0 || s > 2) throw FormatError("bad split tag in " + path.string());
      ds.split.push_back(static_cast<SplitTag>(s));
    }
    for (const auto& s : h.at("starvations")) {
      ds.starvations.push_back({s.at("classes").get<std::vector<int>>(), s.at("keep_fraction"), s.at("seed")});
    }
    if (h.contains("config_hash")) ds.config_hash = h.at("config_hash").get<std::string>();
    const auto n = static_cast<std::size_t>(shape.at(0));
    if (ds.labels_a.size() != n || ds.labels_b.size() != n || ds.mask_b.size() != n || ds.split.size() != n) {
      throw FormatError("dataset header label lengths disagree with shape in " + path.string());
    }
    const auto bytes = static_cast<std::streamsize>(ds.inputs.size() * static_cast<Index>(sizeof(float)));
    if (h.at("payload_bytes").get<std::streamsize>() != bytes) throw FormatError("payload size mismatch");
    in.read(reinterpret_cast<char*>(ds.inputs.data().data()), bytes);
    if (in.gcount() != bytes) throw FormatError("truncated dataset payload in " + path.string());
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed dataset header in " + path.string() + ": " + e.what());
  } catch (const ShapeError& e) {
    throw FormatError("malformed dataset shape in " + path.string() + ": " + e.what());
  }
}

std::uint64_t fingerprint(const TwoTaskDataset& ds) {
  Fnv1a h;
  h.update(ds.inputs.data().data(), static_cast<std::size_t>(ds.inputs.size()) * sizeof(float));
  h.update(ds.labels_a.data(), ds.labels_a.size() * sizeof(int));
  h.update(ds.labels_b.data(), ds.labels_b.size() * sizeof(int));
  h.update(ds.mask_b.data(), ds.mask_b.size());
  h.update(ds.split.data(), ds.split.size());
  return h.digest();
}

}  // namespace xstitch
