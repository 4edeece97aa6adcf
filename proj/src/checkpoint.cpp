#include "xstitch/checkpoint.hpp"

#include <fstream>
#include <sstream>

namespace xstitch {

namespace {

constexpr const char* kFormat = "xstitch-checkpoint";
constexpr int kVersion = 1;

template <typename Scalar>
constexpr const char* scalar_name() {
  return sizeof(Scalar) == 4 ? "float32" : "float64";
}

template <typename T>
T field(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(std::string("checkpoint: missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad field '") + key + "': " + e.what());
  }
}

const Json& member(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(std::string("checkpoint: missing field '") + key + "'");
  return j.at(key);
}

Json meta_to_json(const CheckpointMeta& m) {
  Json lineage = Json::array();
  for (const auto& r : m.seed_lineage) lineage.push_back({{"role", r.role}, {"seed", r.seed}});
  return {{"config_hash", m.config_hash}, {"seed", m.seed}, {"seed_lineage", lineage}};
}

CheckpointMeta meta_from_json(const Json& j) {
  CheckpointMeta m{field<std::string>(j, "config_hash"), field<std::uint64_t>(j, "seed"), {}};
  for (const auto& r : member(j, "seed_lineage")) {
    m.seed_lineage.push_back({field<std::string>(r, "role"), field<std::uint64_t>(r, "seed")});
  }
  return m;
}

template <typename Scalar>
Json values_to_json(const Tensor<Scalar>& t) {
  Json a = Json::array();
  for (Index i = 0; i < t.size(); ++i) a.push_back(static_cast<double>(t[i]));
  return a;
}

template <typename Scalar>
Tensor<Scalar> values_from_json(const Json& j, const Shape& shape, const std::string& what) {
  if (!j.is_array() || static_cast<Index>(j.size()) != shape_product(shape)) {
    throw FormatError("checkpoint: '" + what + "' should hold " + std::to_string(shape_product(shape)) + " values");
  }
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) {
    const auto& v = j[static_cast<std::size_t>(i)];
    if (!v.is_number()) throw FormatError("checkpoint: non-numeric entry in '" + what + "'");
    t[i] = static_cast<Scalar>(v.get<double>());
  }
  return t;
}

template <typename Scalar>
Json layers_to_json(std::span<const LayerSpec> layers, std::span<const LayerParams<Scalar>> params) {
  Json out = Json::array();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].has_params()) continue;
    out.push_back({{"name", layers[i].name},
                   {"weight", values_to_json(params[i].weight)},
                   {"bias", values_to_json(params[i].bias)}});
  }
  return out;
}

/// `inputs[i]` is the per-example input shape of layers[i].
template <typename Scalar>
std::vector<LayerParams<Scalar>> layers_from_json(const Json& j, std::span<const LayerSpec> layers,
                                                  const std::vector<Shape>& inputs) {
  std::vector<LayerParams<Scalar>> params(layers.size());
  std::size_t next = 0;
  if (!j.is_array()) throw FormatError("checkpoint: layer list must be an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].has_params()) continue;
    if (next >= j.size()) throw FormatError("checkpoint: missing parameters for layer '" + layers[i].name + "'");
    const Json& entry = j[next++];
    if (field<std::string>(entry, "name") != layers[i].name) {
      throw FormatError("checkpoint: expected parameters for '" + layers[i].name + "'");
    }
    const auto [wshape, bshape] = layer_param_shapes(layers[i], inputs[i]);
    params[i].weight = values_from_json<Scalar>(member(entry, "weight"), wshape, layers[i].name + ".weight");
    params[i].bias = values_from_json<Scalar>(member(entry, "bias"), bshape, layers[i].name + ".bias");
  }
  if (next != j.size()) throw FormatError("checkpoint: unexpected extra layer parameters");
  return params;
}

std::vector<Shape> layer_inputs(const NetworkSpec& spec) {
  std::vector<Shape> inputs{spec.input_shape};
  const auto outs = activation_shapes(spec);
  inputs.insert(inputs.end(), outs.begin(), outs.end() - 1);
  return inputs;
}

Json header(ModelKind kind, const char* scalar, const CheckpointMeta& meta) {
  return {{"format", kFormat},
          {"version", kVersion},
          {"kind", std::string(to_string(kind))},
          {"scalar", scalar},
          {"meta", meta_to_json(meta)}};
}

Json network_body(const NetworkSpec& spec, Task task, const Json& layers) {
  return {{"task", to_string(task)}, {"spec", to_json(spec)}, {"layers", layers}};
}

Task parse_task(const std::string& s) {
  if (s == "A") return Task::a;
  if (s == "B") return Task::b;
  throw FormatError("checkpoint: unknown task '" + s + "'");
}

template <typename Scalar>
Network<Scalar> network_from_json(const Json& j) {
  Network<Scalar> net;
  try {
    net.spec = network_spec_from_json(member(j, "spec"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid spec: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint: invalid spec: ") + e.what());
  }
  net.task = parse_task(field<std::string>(j, "task"));
  net.params = layers_from_json<Scalar>(member(j, "layers"), net.spec.layers, layer_inputs(net.spec));
  return net;
}

std::string dump(const Json& j) { return j.dump(1) + "\n"; }

Json parse(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("format") || j["format"] != kFormat) {
    throw FormatError("checkpoint: not an xstitch checkpoint");
  }
  if (field<int>(j, "version") != kVersion) throw FormatError("checkpoint: unsupported version");
  const auto scalar = field<std::string>(j, "scalar");
  if (scalar != "float32" && scalar != "float64") throw FormatError("checkpoint: unknown scalar '" + scalar + "'");
  return j;
}

ModelKind parse_kind(const std::string& s) {
  for (ModelKind k : {ModelKind::one_task, ModelKind::split, ModelKind::stitched}) {
    if (s == to_string(k)) return k;
  }
  throw FormatError("checkpoint: unknown kind '" + s + "'");
}

void expect_kind(const Json& j, ModelKind k) {
  const auto got = parse_kind(field<std::string>(j, "kind"));
  if (got != k) {
    throw FormatError("checkpoint holds a " + std::string(to_string(got)) + " model, expected " +
                      std::string(to_string(k)));
  }
}

template <typename Scalar>
Checkpoint<Network<Scalar>> load_one_task(const Json& j) {
  expect_kind(j, ModelKind::one_task);
  return {network_from_json<Scalar>(member(j, "network")), meta_from_json(member(j, "meta"))};
}

template <typename Scalar>
Checkpoint<SplitNetwork<Scalar>> load_split(const Json& j) {
  expect_kind(j, ModelKind::split);
  SplitNetwork<Scalar> s;
  try {
    s.spec_a = network_spec_from_json(member(j, "spec_a"));
    s.spec_b = network_spec_from_json(member(j, "spec_b"));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: invalid spec: ") + e.what());
  }
  s.split = field<Index>(j, "split");
  if (!same_topology(s.spec_a, s.spec_b) || s.split < 0 || s.split > s.spec_a.trunk_depth()) {
    throw FormatError("checkpoint: inconsistent split architecture");
  }
  const auto k = static_cast<std::size_t>(s.split);
  const auto in_a = layer_inputs(s.spec_a);
  const auto in_b = layer_inputs(s.spec_b);
  s.shared = layers_from_json<Scalar>(member(j, "shared"), s.shared_layers(),
                                      std::vector<Shape>(in_a.begin(), in_a.begin() + static_cast<std::ptrdiff_t>(k)));
  s.branch_a = layers_from_json<Scalar>(member(j, "branch_a"), s.branch_layers(Task::a),
                                        std::vector<Shape>(in_a.begin() + static_cast<std::ptrdiff_t>(k), in_a.end()));
  s.branch_b = layers_from_json<Scalar>(member(j, "branch_b"), s.branch_layers(Task::b),
                                        std::vector<Shape>(in_b.begin() + static_cast<std::ptrdiff_t>(k), in_b.end()));
  return {std::move(s), meta_from_json(member(j, "meta"))};
}

template <typename Scalar>
Checkpoint<StitchedNetwork<Scalar>> load_stitched(const Json& j) {
  expect_kind(j, ModelKind::stitched);
  StitchedNetwork<Scalar> s{network_from_json<Scalar>(member(j, "network_a")),
                            network_from_json<Scalar>(member(j, "network_b")), {}};
  if (!same_topology(s.net_a.spec, s.net_b.spec)) throw FormatError("checkpoint: stitched topologies differ");
  const auto shapes = activation_shapes(s.net_a.spec);
  for (const auto& u : member(j, "units")) {
    CrossStitchUnit<Scalar> unit;
    unit.site = field<std::string>(u, "site");
    try {
      unit.granularity = parse_granularity(field<std::string>(u, "granularity"));
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
    unit.lr_scale = field<double>(u, "lr_scale");
    const auto at = s.net_a.spec.find(unit.site);
    if (!at || *at + 1 == shapes.size()) throw FormatError("checkpoint: unit at unknown site '" + unit.site + "'");
    const std::size_t expected =
        unit.granularity == Granularity::per_map ? 1 : static_cast<std::size_t>(shapes[*at].front());
    const Json& rows = member(u, "alphas");
    if (!rows.is_array() || rows.size() != expected) {
      throw FormatError("checkpoint: unit '" + unit.site + "' should hold " + std::to_string(expected) + " matrices");
    }
    for (const auto& r : rows) {
      if (!r.is_array() || r.size() != 4) throw FormatError("checkpoint: alpha rows hold 4 entries");
      AlphaMatrix<Scalar> m;
      m << static_cast<Scalar>(r[0].get<double>()), static_cast<Scalar>(r[1].get<double>()),
          static_cast<Scalar>(r[2].get<double>()), static_cast<Scalar>(r[3].get<double>());
      unit.alphas.push_back(m);
    }
    s.units.push_back(std::move(unit));
  }
  return {std::move(s), meta_from_json(member(j, "meta"))};
}

}  // namespace

Json to_json(const LayerSpec& spec) {
  Json j{{"kind", std::string(to_string(spec.kind))}, {"name", spec.name}};
  switch (spec.kind) {
    case LayerKind::dense:
    case LayerKind::softmax_ce_head:
      j["units"] = spec.units;
      break;
    case LayerKind::conv2d:
      j["units"] = spec.units;
      j["kernel"] = spec.kernel;
      j["stride"] = spec.stride;
      j["padding"] = spec.padding;
      break;
    case LayerKind::maxpool2d:
      j["kernel"] = spec.kernel;
      j["stride"] = spec.stride;
      break;
    case LayerKind::relu:
    case LayerKind::flatten:
      break;
  }
  return j;
}

LayerSpec layer_spec_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("layer entries must be objects");
  LayerSpec s;
  try {
    s.kind = parse_layer_kind(j.at("kind").get<std::string>());
    s.name = j.at("name").get<std::string>();
    s.units = j.value("units", Index{0});
    s.kernel = j.value("kernel", Index{0});
    s.stride = j.value("stride", Index{1});
    s.padding = j.value("padding", Index{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad layer entry: ") + e.what());
  }
  return s;
}

Json to_json(const NetworkSpec& spec) {
  Json layers = Json::array();
  for (const auto& l : spec.layers) layers.push_back(to_json(l));
  return {{"input_shape", spec.input_shape}, {"layers", layers}, {"stitch_sites", spec.stitch_sites}};
}

NetworkSpec network_spec_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("input_shape") || !j.contains("layers")) {
    throw ConfigError("network spec needs 'input_shape' and 'layers'");
  }
  NetworkSpec spec;
  try {
    spec.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& l : j.at("layers")) spec.layers.push_back(layer_spec_from_json(l));
    spec.stitch_sites = j.contains("stitch_sites") ? j.at("stitch_sites").get<std::vector<std::string>>()
                                                   : default_stitch_sites(spec.layers);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad network spec: ") + e.what());
  }
  validate(spec);
  return spec;
}

std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::one_task:
      return "one_task";
    case ModelKind::split:
      return "split";
    case ModelKind::stitched:
      return "stitched";
  }
  return "?";
}

template <typename Scalar>
std::string serialize(const Network<Scalar>& net, const CheckpointMeta& meta) {
  Json j = header(ModelKind::one_task, scalar_name<Scalar>(), meta);
  j["network"] = network_body(net.spec, net.task, layers_to_json<Scalar>(net.spec.layers, net.params));
  return dump(j);
}

template <typename Scalar>
std::string serialize(const SplitNetwork<Scalar>& s, const CheckpointMeta& meta) {
  Json j = header(ModelKind::split, scalar_name<Scalar>(), meta);
  j["spec_a"] = to_json(s.spec_a);
  j["spec_b"] = to_json(s.spec_b);
  j["split"] = s.split;
  j["shared"] = layers_to_json<Scalar>(s.shared_layers(), s.shared);
  j["branch_a"] = layers_to_json<Scalar>(s.branch_layers(Task::a), s.branch_a);
  j["branch_b"] = layers_to_json<Scalar>(s.branch_layers(Task::b), s.branch_b);
  return dump(j);
}

template <typename Scalar>
std::string serialize(const StitchedNetwork<Scalar>& s, const CheckpointMeta& meta) {
  Json j = header(ModelKind::stitched, scalar_name<Scalar>(), meta);
  j["network_a"] = network_body(s.net_a.spec, s.net_a.task, layers_to_json<Scalar>(s.net_a.spec.layers, s.net_a.params));
  j["network_b"] = network_body(s.net_b.spec, s.net_b.task, layers_to_json<Scalar>(s.net_b.spec.layers, s.net_b.params));
  Json units = Json::array();
  for (const auto& u : s.units) {
    Json rows = Json::array();
    for (const auto& m : u.alphas) {
      rows.push_back({static_cast<double>(m(0, 0)), static_cast<double>(m(0, 1)), static_cast<double>(m(1, 0)),
                      static_cast<double>(m(1, 1))});
    }
    units.push_back({{"site", u.site},
                     {"granularity", std::string(to_string(u.granularity))},
                     {"lr_scale", u.lr_scale},
                     {"alphas", rows}});
  }
  j["units"] = units;
  return dump(j);
}

ModelKind checkpoint_kind(std::string_view text) { return parse_kind(field<std::string>(parse(text), "kind")); }

template <typename Model>
Checkpoint<Model> deserialize(std::string_view text) {
  const Json j = parse(text);
  if constexpr (std::is_same_v<Model, Network<float>>) return load_one_task<float>(j);
  if constexpr (std::is_same_v<Model, Network<double>>) return load_one_task<double>(j);
  if constexpr (std::is_same_v<Model, SplitNetwork<float>>) return load_split<float>(j);
  if constexpr (std::is_same_v<Model, SplitNetwork<double>>) return load_split<double>(j);
  if constexpr (std::is_same_v<Model, StitchedNetwork<float>>) return load_stitched<float>(j);
  if constexpr (std::is_same_v<Model, StitchedNetwork<double>>) return load_stitched<double>(j);
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw FormatError("write failed for '" + path.string() + "'");
}

template <typename Model>
void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  write_text_file(path, serialize(model, meta));
}

template <typename Model>
Checkpoint<Model> load_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize<Model>(read_text_file(path));
  } catch (const FormatError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

std::string_view to_string(InitStrategy s) { return s == InitStrategy::task_init ? "task_init" : "common_init"; }

InitStrategy parse_init_strategy(std::string_view text) {
  if (text == "task_init") return InitStrategy::task_init;
  if (text == "common_init") return InitStrategy::common_init;
  throw ConfigError("unknown init strategy '" + std::string(text) + "'");
}

template <typename Scalar>
std::pair<Network<Scalar>, Network<Scalar>> init_networks(InitStrategy strategy, const NetworkSpec& spec_a,
                                                          const NetworkSpec& spec_b, std::uint64_t seed,
                                                          const std::vector<std::filesystem::path>& checkpoints) {
  if (!same_topology(spec_a, spec_b)) throw ConfigError("init_networks: task specs have different topologies");
  if (strategy == InitStrategy::task_init) {
    if (checkpoints.size() != 2) throw ConfigError("task_init needs two one-task checkpoints");
    auto a = load_checkpoint<Network<Scalar>>(checkpoints[0]).model;
    auto b = load_checkpoint<Network<Scalar>>(checkpoints[1]).model;
    if (!same_topology(a.spec, spec_a) || !same_topology(b.spec, spec_b) || !(a.spec.head() == spec_a.head()) ||
        !(b.spec.head() == spec_b.head())) {
      throw ConfigError("task_init checkpoints do not match the configured architecture");
    }
    a.task = Task::a;
    b.task = Task::b;
    return {std::move(a), std::move(b)};
  }
  auto a = build_one_task<Scalar>(spec_a, seed, Task::a);
  Network<Scalar> b = a;
  b.task = Task::b;
  if (!(spec_a.head() == spec_b.head())) {
    const auto fresh = build_one_task<Scalar>(spec_b, seed, Task::b);
    b.spec = spec_b;
    b.params.back() = fresh.params.back();
  }
  return {std::move(a), std::move(b)};
}

#define XSTITCH_INSTANTIATE(S)                                                                                   \
  template std::string serialize(const Network<S>&, const CheckpointMeta&);                                      \
  template std::string serialize(const SplitNetwork<S>&, const CheckpointMeta&);                                 \
  template std::string serialize(const StitchedNetwork<S>&, const CheckpointMeta&);                              \
  template Checkpoint<Network<S>> deserialize<Network<S>>(std::string_view);                                     \
  template Checkpoint<SplitNetwork<S>> deserialize<SplitNetwork<S>>(std::string_view);                           \
  template Checkpoint<StitchedNetwork<S>> deserialize<StitchedNetwork<S>>(std::string_view);                     \
  template void save_checkpoint(const Network<S>&, const CheckpointMeta&, const std::filesystem::path&);         \
  template void save_checkpoint(const SplitNetwork<S>&, const CheckpointMeta&, const std::filesystem::path&);    \
  template void save_checkpoint(const StitchedNetwork<S>&, const CheckpointMeta&, const std::filesystem::path&); \
  template Checkpoint<Network<S>> load_checkpoint<Network<S>>(const std::filesystem::path&);                     \
  template Checkpoint<SplitNetwork<S>> load_checkpoint<SplitNetwork<S>>(const std::filesystem::path&);           \
  template Checkpoint<StitchedNetwork<S>> load_checkpoint<StitchedNetwork<S>>(const std::filesystem::path&);     \
  template std::pair<Network<S>, Network<S>> init_networks<S>(InitStrategy, const NetworkSpec&, const NetworkSpec&, \
                                                              std::uint64_t, const std::vector<std::filesystem::path>&);

XSTITCH_INSTANTIATE(float)
XSTITCH_INSTANTIATE(double)

#undef XSTITCH_INSTANTIATE

}  // namespace xstitch
