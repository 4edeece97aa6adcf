#pragma once

#include <Eigen/Core>

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xstitch/tensor.hpp"

namespace xstitch {

enum class Granularity { per_channel, per_map };

std::string_view to_string(Granularity g);
Granularity parse_granularity(std::string_view text);

/// Mixing matrix of one unit, laid out as
///   [ a_AA  a_AB ]
///   [ a_BA  a_BB ]
/// so that (x~A, x~B) = M * (xA, xB).
template <typename Scalar>
using AlphaMatrix = Eigen::Matrix<Scalar, 2, 2>;

/// Learnable linear combination of the two task streams at one site.
/// per_channel holds one matrix per channel of the site's activation;
/// per_map holds exactly one. Dense activations count as n channels of 1x1 maps.
template <typename Scalar>
struct CrossStitchUnit {
  Granularity granularity = Granularity::per_channel;
  std::vector<AlphaMatrix<Scalar>> alphas;
  std::string site;
  double lr_scale = 1.0;  // relative to the trainer's alpha learning rate

  template <typename Other>
  CrossStitchUnit<Other> cast() const {
    CrossStitchUnit<Other> u{granularity, {}, site, lr_scale};
    u.alphas.reserve(alphas.size());
    for (const auto& m : alphas) u.alphas.push_back(m.template cast<Other>());
    return u;
  }

  friend bool operator==(const CrossStitchUnit& a, const CrossStitchUnit& b) {
    return a.granularity == b.granularity && a.site == b.site && a.lr_scale == b.lr_scale &&
           a.alphas == b.alphas;
  }
};

template <typename Scalar>
struct CrossStitchOutput {
  Tensor<Scalar> a;
  Tensor<Scalar> b;
};

template <typename Scalar>
struct CrossStitchGrads {
  Tensor<Scalar> a;
  Tensor<Scalar> b;
  std::vector<AlphaMatrix<Scalar>> alphas;
};

namespace detail {

template <typename Scalar>
void check_stitch_operands(const Tensor<Scalar>& xa, const Tensor<Scalar>& xb,
                           const CrossStitchUnit<Scalar>& unit) {
  if (xa.shape() != xb.shape()) {
    throw ShapeError("cross-stitch at '" + unit.site + "': stream shapes differ, " + to_string(xa.shape()) +
                     " vs " + to_string(xb.shape()));
  }
  const std::size_t expected =
      unit.granularity == Granularity::per_map ? 1 : static_cast<std::size_t>(channel_count(xa));
  if (unit.alphas.size() != expected) {
    throw ShapeError("cross-stitch at '" + unit.site + "': " + std::to_string(unit.alphas.size()) +
                     " alpha matrices, expected " + std::to_string(expected));
  }
}

template <typename Scalar>
const AlphaMatrix<Scalar>& alpha_for(const CrossStitchUnit<Scalar>& unit, Index channel) {
  return unit.granularity == Granularity::per_map ? unit.alphas.front()
                                                  : unit.alphas[static_cast<std::size_t>(channel)];
}

}  // namespace detail

template <typename Scalar>
CrossStitchOutput<Scalar> cross_stitch_forward(const Tensor<Scalar>& xa, const Tensor<Scalar>& xb,
                                               const CrossStitchUnit<Scalar>& unit) {
  detail::check_stitch_operands(xa, xb, unit);
  using Segment = Eigen::Map<const typename Tensor<Scalar>::Vector>;
  using MutSegment = Eigen::Map<typename Tensor<Scalar>::Vector>;
  CrossStitchOutput<Scalar> out{Tensor<Scalar>(xa.shape()), Tensor<Scalar>(xb.shape())};
  const Index channels = channel_count(xa);
  const Index inner = channel_stride(xa);
  for (Index n = 0; n < xa.dim(0); ++n) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (n * channels + c) * inner;
      const auto& m = detail::alpha_for(unit, c);
      Segment a(xa.data().data() + off, inner);
      Segment b(xb.data().data() + off, inner);
      MutSegment(out.a.data().data() + off, inner) = m(0, 0) * a + m(0, 1) * b;
      MutSegment(out.b.data().data() + off, inner) = m(1, 0) * a + m(1, 1) * b;
    }
  }
  return out;
}

/// Input gradients use the transposed mixing matrix. Alpha gradients sum
/// upstream-times-input products over every location (and every channel
/// for per_map):
///   dL/da_AA = sum gA~ xA   dL/da_AB = sum gA~ xB
///   dL/da_BA = sum gB~ xA   dL/da_BB = sum gB~ xB
template <typename Scalar>
CrossStitchGrads<Scalar> cross_stitch_backward(const Tensor<Scalar>& xa, const Tensor<Scalar>& xb,
                                               const Tensor<Scalar>& ga_out, const Tensor<Scalar>& gb_out,
                                               const CrossStitchUnit<Scalar>& unit) {
  detail::check_stitch_operands(xa, xb, unit);
  if (ga_out.shape() != xa.shape() || gb_out.shape() != xa.shape()) {
    throw ShapeError("cross-stitch at '" + unit.site + "': gradient shapes do not match activations");
  }
  using Segment = Eigen::Map<const typename Tensor<Scalar>::Vector>;
  using MutSegment = Eigen::Map<typename Tensor<Scalar>::Vector>;
  CrossStitchGrads<Scalar> g{Tensor<Scalar>(xa.shape()), Tensor<Scalar>(xb.shape()),
                             std::vector<AlphaMatrix<Scalar>>(unit.alphas.size(), AlphaMatrix<Scalar>::Zero())};
  const Index channels = channel_count(xa);
  const Index inner = channel_stride(xa);
  const bool shared = unit.granularity == Granularity::per_map;
  for (Index n = 0; n < xa.dim(0); ++n) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (n * channels + c) * inner;
      const auto& m = detail::alpha_for(unit, c);
      Segment a(xa.data().data() + off, inner);
      Segment b(xb.data().data() + off, inner);
      Segment da(ga_out.data().data() + off, inner);
      Segment db(gb_out.data().data() + off, inner);
      MutSegment(g.a.data().data() + off, inner) = m(0, 0) * da + m(1, 0) * db;
      MutSegment(g.b.data().data() + off, inner) = m(0, 1) * da + m(1, 1) * db;
      auto& acc = g.alphas[shared ? 0 : static_cast<std::size_t>(c)];
      acc(0, 0) += da.dot(a);
      acc(0, 1) += da.dot(b);
      acc(1, 0) += db.dot(a);
      acc(1, 1) += db.dot(b);
    }
  }
  return g;
}

}  // namespace xstitch
