#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "support.hpp"
#include "xstitch/checkpoint.hpp"
#include "xstitch/gradcheck.hpp"
#include "xstitch/split.hpp"
#include "xstitch/stitched.hpp"
#include "xstitch/synthtask.hpp"
#include "xstitch/trainer.hpp"

namespace xstitch {
namespace {

using testing::Gen;
using testing::kSeeds;

NetworkSpec small_spec(Index classes = 3) {
  return make_network_spec({1, 6, 6}, {conv2d("conv1", 2, 3), relu("relu1"), maxpool2d("pool1", 2, 2),
                                       dense("fc1", 4), relu("relu2"), softmax_ce_head("head", classes)});
}

NetworkSpec tiny_dense_spec() { return make_network_spec({4, 1, 1}, {dense("fc", 3), softmax_ce_head("head", 2)}); }

Tensor<double> random_inputs(const NetworkSpec& spec, Index n, Gen& gen) {
  Shape shape{n};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  return gen.tensor<double>(shape);
}

TEST(OneTask, SameSeedIsBitwiseIdentical) {
  const auto spec = default_network_spec();
  EXPECT_EQ(build_one_task<float>(spec, 7), build_one_task<float>(spec, 7));
  EXPECT_NE(build_one_task<float>(spec, 7), build_one_task<float>(spec, 8));
}

TEST(OneTask, HandCountedParameters) {
  EXPECT_EQ(parameter_count(build_one_task<double>(tiny_dense_spec(), 0)), 23);
  // conv1 8x1x5x5+8, fc1 32x288+32, head 8x32+8
  EXPECT_EQ(parameter_count(build_one_task<double>(default_network_spec(), 0)), 208 + 9248 + 264);
}

TEST(OneTask, BiasesStartAtZero) {
  const auto net = build_one_task<double>(default_network_spec(), 3);
  for (const auto& p : net.params) {
    if (!p.bias.empty()) EXPECT_EQ(p.bias.data().cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Spec, DefaultSitesArePoolAndDenseLayers) {
  const auto spec = default_network_spec();
  EXPECT_EQ(spec.stitch_sites, (std::vector<std::string>{"pool1", "fc1"}));
  EXPECT_EQ(spec.trunk_depth(), 4);
}

TEST(Spec, ValidationErrors) {
  EXPECT_THROW(make_network_spec({4, 1, 1}, {dense("fc", 3)}), ConfigError);
  EXPECT_THROW(make_network_spec({4, 1, 1}, {dense("fc", 3), dense("fc", 3), softmax_ce_head("h", 2)}), ConfigError);
  EXPECT_THROW(make_network_spec({4, 1, 1}, {softmax_ce_head("h", 2), dense("fc", 3)}), ConfigError);
  auto spec = tiny_dense_spec();
  spec.stitch_sites = {"nope"};
  EXPECT_THROW(validate(spec), ConfigError);
  spec.stitch_sites = {"head"};
  EXPECT_THROW(validate(spec), ConfigError);
  EXPECT_THROW(make_network_spec({1, 3, 3}, {conv2d("c", 2, 5), softmax_ce_head("h", 2)}), ShapeError);
}

TEST(Splits, CountsAndOrder) {
  const auto three = make_network_spec({4, 1, 1}, {dense("fc1", 5), relu("r"), dense("fc2", 3), softmax_ce_head("h", 2)});
  const auto splits = enumerate_splits(three);
  ASSERT_EQ(splits.size(), 4U);
  std::set<Index> ks;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    EXPECT_EQ(splits[i].split, static_cast<Index>(i));
    ks.insert(splits[i].split);
  }
  EXPECT_EQ(ks.size(), 4U);
  EXPECT_EQ(enumerate_splits(default_network_spec()).size(), 5U);
}

TEST(Splits, SharingExtremes) {
  const auto spec = default_network_spec();
  const auto a = build_one_task<double>(spec, 1, Task::a);
  const auto b = build_one_task<double>(spec, 2, Task::b);
  const auto splits = enumerate_splits(spec);
  const auto none = build_split(splits.front(), a, b);
  EXPECT_EQ(shared_parameter_count(none), 0);
  EXPECT_EQ(parameter_count(none), parameter_count(a) + parameter_count(b));
  const auto all = build_split(splits.back(), a, b);
  const Index head = a.params.back().size();
  EXPECT_EQ(shared_parameter_count(all), parameter_count(a) - head);
  EXPECT_EQ(parameter_count(all), parameter_count(a) + head);
}

TEST(Splits, ZeroSplitMatchesIndependentNetworks) {
  Gen gen(4);
  const auto spec = small_spec();
  const auto a = build_one_task<double>(spec, 1, Task::a);
  const auto b = build_one_task<double>(spec, 2, Task::b);
  const auto s = build_split(enumerate_splits(spec).front(), a, b);
  const auto x = random_inputs(spec, 3, gen);
  EXPECT_EQ(predict(s, x).a, predict(a, x).a);
  EXPECT_EQ(predict(s, x).b, predict(b, x).b);
}

TEST(Splits, GradientsMatchFiniteDifferencesAtEverySplit) {
  const auto spec = small_spec();
  const auto a = build_one_task<double>(spec, 11, Task::a);
  const auto b = build_one_task<double>(spec, 12, Task::b);
  for (const auto& arch : enumerate_splits(spec)) {
    const auto s = build_split(arch, a, b);
    const auto batch = smooth_batch(s, spec, 4, 3, 3, 99 + static_cast<std::uint64_t>(arch.split));
    const auto report = check_network(s, batch, {1.0, 0.7});
    EXPECT_LT(report.max_relative_error(), 1e-6) << "split " << arch.split << "\n" << format_report(report);
  }
}

TEST(InitAlphas, ConvexInitialization) {
  const auto spec = default_network_spec();
  const auto units = init_alphas<double>(0.9, 0.1, Granularity::per_channel, spec, spec.stitch_sites);
  ASSERT_EQ(units.size(), 2U);
  EXPECT_EQ(units[0].alphas.size(), 8U);
  EXPECT_EQ(units[1].alphas.size(), 32U);
  for (const auto& u : units) {
    for (const auto& m : u.alphas) {
      EXPECT_EQ(m(0, 0), 0.9);
      EXPECT_EQ(m(0, 1), 0.1);
      EXPECT_EQ(m(1, 0), 0.1);
      EXPECT_EQ(m(1, 1), 0.9);
    }
  }
  EXPECT_THROW(init_alphas<double>(std::nan(""), 0.1, Granularity::per_map, spec, spec.stitch_sites), ConfigError);
  EXPECT_THROW(init_alphas<double>(0.9, 0.1, Granularity::per_map, spec, {"head"}), ConfigError);
}

TEST(InitAlphas, NinetySixChannelSite) {
  const auto spec = make_network_spec(
      {3, 12, 12}, {conv2d("conv1", 96, 3), relu("relu1"), maxpool2d("pool1", 2, 2), softmax_ce_head("head", 4)});
  const auto units = init_alphas<float>(0.9, 0.1, Granularity::per_channel, spec, {"pool1"});
  EXPECT_EQ(units.at(0).alphas.size(), 96U);
  EXPECT_EQ(init_alphas<float>(0.9, 0.1, Granularity::per_map, spec, {"pool1"}).at(0).alphas.size(), 1U);
}

TEST(InitAlphas, HalfHalfOnEqualInputsIsIdentity) {
  const auto spec = small_spec();
  const auto unit = init_alphas<double>(0.5, 0.5, Granularity::per_map, spec, {"fc1"}).front();
  Gen gen(2);
  const auto x = gen.tensor<double>({3, 4});
  const auto out = cross_stitch_forward(x, x, unit);
  EXPECT_EQ(out.a, x);
  EXPECT_EQ(out.b, x);
}

TEST(Stitch, IdentityAlphasMatchIndependentNetworks) {
  for (int s = 0; s < kSeeds; ++s) {
    Gen gen(100 + s);
    const auto spec = small_spec();
    const auto a = build_one_task<double>(spec, 2 * s, Task::a);
    const auto b = build_one_task<double>(spec, 2 * s + 1, Task::b);
    const auto g = gen.coin() ? Granularity::per_map : Granularity::per_channel;
    const auto st = stitch(a, b, {}, g, 1.0, 0.0);
    const auto x = random_inputs(spec, 3, gen);
    const auto p = predict(st, x);
    EXPECT_EQ(p.a, predict(a, x).a);
    EXPECT_EQ(p.b, predict(b, x).b);
  }
}

TEST(Stitch, ParameterAccounting) {
  const auto spec = default_network_spec();
  const auto a = build_one_task<float>(spec, 1);
  const auto b = build_one_task<float>(spec, 2);
  const Index one = parameter_count(a);
  const auto per_map = stitch(a, b, {"pool1", "fc1"}, Granularity::per_map, 0.9, 0.1);
  EXPECT_EQ(parameter_count(per_map), 2 * one + 8);
  const auto per_channel = stitch(a, b, {}, Granularity::per_channel, 0.9, 0.1);
  EXPECT_EQ(alpha_matrix_count(per_channel), 8 + 32);
  EXPECT_EQ(parameter_count(per_channel), 2 * one + 4 * 40);
}

TEST(Stitch, PerMapAtThreeSitesAddsTwelve) {
  const auto spec = small_spec();
  const auto a = build_one_task<double>(spec, 1);
  const auto b = build_one_task<double>(spec, 2);
  const auto st = stitch(a, b, {"conv1", "pool1", "fc1"}, Granularity::per_map, 0.9, 0.1);
  EXPECT_EQ(parameter_count(st) - parameter_count(a) - parameter_count(b), 12);
  Index alpha_values = 0;
  auto copy = st;
  for (const auto& r : param_refs(copy)) {
    if (r.alpha) alpha_values += static_cast<Index>(r.values.size());
  }
  EXPECT_EQ(alpha_values, 12);
}

TEST(Stitch, RejectsMismatchedTopologyAndUnknownSite) {
  const auto a = build_one_task<double>(small_spec(), 1);
  const auto other = build_one_task<double>(default_network_spec(), 1);
  EXPECT_THROW(stitch(a, other, {}, Granularity::per_map, 0.9, 0.1), ConfigError);
  EXPECT_THROW(stitch(a, a, {"missing"}, Granularity::per_map, 0.9, 0.1), ConfigError);
}

TEST(Stitch, FullySharedHalfHalfKeepsStreamsEqual) {
  Gen gen(5);
  const auto spec = small_spec();
  const auto [a, b] = init_networks<double>(InitStrategy::common_init, spec, spec, 9, {});
  const auto st = stitch(a, b, {}, Granularity::per_channel, 0.5, 0.5);
  const auto t = forward_trace(st, random_inputs(spec, 4, gen));
  for (std::size_t l = 0; l < t.caches_a.size(); ++l) EXPECT_EQ(t.caches_a[l].input, t.caches_b[l].input);
  for (std::size_t l = 0; l < t.post_a.size(); ++l) EXPECT_EQ(t.post_a[l], t.post_b[l]);
  EXPECT_EQ(t.probabilities_a, t.probabilities_b);
}

TEST(Stitch, GradientsMatchFiniteDifferences) {
  for (const auto g : {Granularity::per_channel, Granularity::per_map}) {
    Gen gen(6);
    const auto spec = small_spec();
    auto st = stitch(build_one_task<double>(spec, 1), build_one_task<double>(spec, 2), {}, g, 0.9, 0.1);
    for (auto& u : st.units) {
      for (auto& m : u.alphas) m += 0.2 * gen.alpha<double>();
    }
    const auto batch = smooth_batch(st, spec, 4, 3, 3, 17);
    const auto report = check_network(st, batch, {1.0, 1.0});
    EXPECT_LT(report.max_relative_error(), 1e-6) << format_report(report);
  }
}

TEST(InitNetworks, CommonInitCopiesOneNetwork) {
  const auto spec = default_network_spec();
  const auto [a, b] = init_networks<float>(InitStrategy::common_init, spec, spec, 4, {});
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.task, Task::a);
  EXPECT_EQ(b.task, Task::b);
  const auto [c, d] = init_networks<float>(InitStrategy::common_init, spec, with_head_classes(spec, 5), 4, {});
  for (std::size_t l = 0; l + 1 < c.params.size(); ++l) EXPECT_EQ(c.params[l], d.params[l]);
  EXPECT_EQ(d.params.back().bias.size(), 5);
}

TEST(InitNetworks, TaskInitLoadsTrainedCheckpoints) {
  const auto dir = testing::scratch_dir();
  GeneratorConfig gc;
  gc.count = 200;
  const auto ds = generate(gc, 1);
  const auto spec = default_network_spec();
  TrainConfig cfg;
  cfg.iterations = 3;
  cfg.eval_every = 3;
  const auto ta = train(build_one_task<float>(spec, 1, Task::a), ds, cfg).model;
  auto net_b = build_one_task<float>(spec, 1, Task::b);
  const auto tb = train(net_b, ds, cfg).model;
  save_checkpoint(ta, {"h", 1, {{"init", 1}}}, dir / "a.json");
  save_checkpoint(tb, {"h", 1, {{"init", 1}}}, dir / "b.json");
  const auto [a, b] =
      init_networks<float>(InitStrategy::task_init, spec, spec, 0, {dir / "a.json", dir / "b.json"});
  EXPECT_EQ(a.params, ta.params);
  EXPECT_EQ(b.params, tb.params);
  EXPECT_NE(a.params, b.params);
  EXPECT_THROW(init_networks<float>(InitStrategy::task_init, spec, spec, 0, {dir / "a.json"}), ConfigError);
  EXPECT_ANY_THROW(init_networks<float>(InitStrategy::task_init, spec, spec, 0, {dir / "a.json", dir / "zz.json"}));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Gen gen(8);
  const auto spec = default_network_spec();
  const CheckpointMeta meta{"abc123", 42, {{"init.A", 1}, {"train", 2}}};
  auto st = stitch(build_one_task<float>(spec, 1), build_one_task<float>(spec, 2), {}, Granularity::per_channel,
                   0.9, 0.1, 10.0);
  for (auto& u : st.units) {
    for (auto& m : u.alphas) m += gen.alpha<float>() * 0.01f;
  }
  const auto text = serialize(st, meta);
  const auto back = deserialize<StitchedNetwork<float>>(text);
  EXPECT_EQ(back.model, st);
  EXPECT_EQ(back.meta, meta);
  EXPECT_EQ(serialize(back.model, back.meta), text);
  EXPECT_EQ(checkpoint_kind(text), ModelKind::stitched);

  const auto one = build_one_task<float>(spec, 5, Task::b);
  const auto one_text = serialize(one, meta);
  EXPECT_EQ(serialize(deserialize<Network<float>>(one_text).model, meta), one_text);
  EXPECT_THROW(deserialize<StitchedNetwork<float>>(one_text), FormatError);

  const auto split = build_split(enumerate_splits(spec)[2], one, one);
  const auto split_text = serialize(split, meta);
  EXPECT_EQ(serialize(deserialize<SplitNetwork<float>>(split_text).model, meta), split_text);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = testing::scratch_dir();
  const auto net = build_one_task<float>(small_spec(), 3);
  save_checkpoint(net, {"h", 3, {}}, dir / "net.json");
  const auto first = read_text_file(dir / "net.json");
  const auto loaded = load_checkpoint<Network<float>>(dir / "net.json");
  EXPECT_EQ(loaded.model, net);
  save_checkpoint(loaded.model, loaded.meta, dir / "again.json");
  EXPECT_EQ(read_text_file(dir / "again.json"), first);
  write_text_file(dir / "bad.json", first.substr(0, first.size() / 2));
  EXPECT_THROW(load_checkpoint<Network<float>>(dir / "bad.json"), FormatError);
}

}  // namespace
}  // namespace xstitch
