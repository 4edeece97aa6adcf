#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "xstitch/layer_spec.hpp"
#include "xstitch/tensor.hpp"

namespace xstitch {

/// Trainable state of one layer. Both tensors are empty for
/// parameter-free layers. Weights are (out, in) for dense layers and heads,
/// (filters, channels, k, k) for convolutions.
template <typename Scalar>
struct LayerParams {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  Index size() const { return weight.size() + bias.size(); }

  template <typename Other>
  LayerParams<Other> cast() const {
    return {weight.template cast<Other>(), bias.template cast<Other>()};
  }

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <typename Scalar>
LayerParams<Scalar> zeros_like(const LayerParams<Scalar>& p) {
  return {zeros_like(p.weight), zeros_like(p.bias)};
}

/// Everything layer_backward needs from the matching forward call.
template <typename Scalar>
struct ForwardCache {
  std::string layer;
  LayerKind kind = LayerKind::relu;
  Tensor<Scalar> input;
  Shape output_shape;
  std::vector<Index> argmax;        // maxpool2d: flat input offset per output
  Tensor<Scalar> probabilities;     // softmax_ce_head
  std::vector<int> labels;          // softmax_ce_head; negative entries are ignored
  // relu: min |input|; maxpool2d: min gap between a window's best and runner-up
  // over windows with a nonzero maximum.
  double kink_margin = std::numeric_limits<double>::infinity();
};

template <typename Scalar>
struct LayerForward {
  Tensor<Scalar> output;
  Tensor<Scalar> losses;  // softmax_ce_head with labels: per-example cross-entropy
  ForwardCache<Scalar> cache;
};

template <typename Scalar>
struct LayerBackward {
  Tensor<Scalar> input_grad;
  LayerParams<Scalar> param_grads;
};

namespace detail {

[[noreturn]] inline void layer_shape_error(const LayerSpec& spec, const std::string& what) {
  throw ShapeError("layer '" + spec.name + "' (" + std::string(to_string(spec.kind)) + "): " + what);
}

template <typename Scalar>
void require_params(const LayerSpec& spec, const LayerParams<Scalar>& params, Index in_features) {
  if (params.weight.empty() || params.bias.empty()) layer_shape_error(spec, "missing parameters");
  if (params.weight.dim(0) != spec.units || params.bias.size() != spec.units) {
    layer_shape_error(spec, "parameter shape " + to_string(params.weight.shape()) +
                                " does not match " + std::to_string(spec.units) + " outputs");
  }
  const Index fan_in = params.weight.size() / params.weight.dim(0);
  if (fan_in != in_features) {
    layer_shape_error(spec, "expects " + std::to_string(fan_in) + " input features per example, got " +
                                std::to_string(in_features));
  }
}

template <typename Scalar>
Tensor<Scalar> affine_forward(const LayerSpec& spec, const LayerParams<Scalar>& params,
                              const Tensor<Scalar>& input) {
  require_params(spec, params, input.size() / input.dim(0));
  Tensor<Scalar> out(Shape{input.dim(0), spec.units});
  out.matrix().noalias() = input.matrix() * params.weight.matrix().transpose();
  out.matrix().rowwise() += params.bias.data().transpose();
  return out;
}

template <typename Scalar>
LayerBackward<Scalar> affine_backward(const LayerParams<Scalar>& params, const Tensor<Scalar>& input,
                                      const Tensor<Scalar>& dout) {
  LayerBackward<Scalar> r;
  r.param_grads.weight = Tensor<Scalar>(params.weight.shape());
  r.param_grads.bias = Tensor<Scalar>(params.bias.shape());
  r.param_grads.weight.matrix().noalias() = dout.matrix().transpose() * input.matrix();
  r.param_grads.bias.data() = dout.matrix().colwise().sum().transpose();
  r.input_grad = Tensor<Scalar>(input.shape());
  r.input_grad.matrix().noalias() = dout.matrix() * params.weight.matrix();
  return r;
}

struct ConvGeometry {
  Index channels, height, width, kernel, stride, padding, out_height, out_width;
  Index patch() const { return channels * kernel * kernel; }
  Index positions() const { return out_height * out_width; }
};

inline ConvGeometry conv_geometry(const LayerSpec& spec, const Shape& input) {
  const Shape out = layer_output_shape(spec, {input[1], input[2], input[3]});
  const Index pad = spec.kind == LayerKind::conv2d ? spec.padding : 0;
  return {input[1], input[2], input[3], spec.kernel, spec.stride, pad, out[1], out[2]};
}

/// Unrolls example `n` into a (patch, positions) matrix.
template <typename Scalar>
typename Tensor<Scalar>::RowMatrix im2col(const Tensor<Scalar>& input, Index n, const ConvGeometry& g) {
  typename Tensor<Scalar>::RowMatrix cols(g.patch(), g.positions());
  const Scalar* x = input.data().data() + n * g.channels * g.height * g.width;
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel; ++ki) {
      for (Index kj = 0; kj < g.kernel; ++kj) {
        const Index row = (c * g.kernel + ki) * g.kernel + kj;
        for (Index oi = 0; oi < g.out_height; ++oi) {
          const Index ii = oi * g.stride + ki - g.padding;
          for (Index oj = 0; oj < g.out_width; ++oj) {
            const Index jj = oj * g.stride + kj - g.padding;
            const bool inside = ii >= 0 && ii < g.height && jj >= 0 && jj < g.width;
            cols(row, oi * g.out_width + oj) = inside ? x[(c * g.height + ii) * g.width + jj] : Scalar(0);
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im_add(const typename Tensor<Scalar>::RowMatrix& cols, Tensor<Scalar>& grad, Index n,
                const ConvGeometry& g) {
  Scalar* dx = grad.data().data() + n * g.channels * g.height * g.width;
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel; ++ki) {
      for (Index kj = 0; kj < g.kernel; ++kj) {
        const Index row = (c * g.kernel + ki) * g.kernel + kj;
        for (Index oi = 0; oi < g.out_height; ++oi) {
          const Index ii = oi * g.stride + ki - g.padding;
          if (ii < 0 || ii >= g.height) continue;
          for (Index oj = 0; oj < g.out_width; ++oj) {
            const Index jj = oj * g.stride + kj - g.padding;
            if (jj < 0 || jj >= g.width) continue;
            dx[(c * g.height + ii) * g.width + jj] += cols(row, oi * g.out_width + oj);
          }
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> conv_forward(const LayerSpec& spec, const LayerParams<Scalar>& params,
                            const Tensor<Scalar>& input) {
  if (input.rank() != 4) layer_shape_error(spec, "expects (batch, channels, height, width) input");
  const ConvGeometry g = conv_geometry(spec, input.shape());
  require_params(spec, params, g.patch());
  const Index batch = input.dim(0);
  Tensor<Scalar> out(Shape{batch, spec.units, g.out_height, g.out_width});
  const auto w = params.weight.matrix();
  for (Index n = 0; n < batch; ++n) {
    const auto cols = im2col(input, n, g);
    typename Tensor<Scalar>::MatrixMap y(out.data().data() + n * spec.units * g.positions(), spec.units,
                                         g.positions());
    y.noalias() = w * cols;
    y.colwise() += params.bias.data();
  }
  return out;
}

template <typename Scalar>
LayerBackward<Scalar> conv_backward(const LayerSpec& spec, const LayerParams<Scalar>& params,
                                    const Tensor<Scalar>& input, const Tensor<Scalar>& dout) {
  const ConvGeometry g = conv_geometry(spec, input.shape());
  LayerBackward<Scalar> r;
  r.param_grads.weight = Tensor<Scalar>(params.weight.shape());
  r.param_grads.bias = Tensor<Scalar>(params.bias.shape());
  r.input_grad = Tensor<Scalar>(input.shape());
  const auto w = params.weight.matrix();
  auto dw = r.param_grads.weight.matrix();
  for (Index n = 0; n < input.dim(0); ++n) {
    const auto cols = im2col(input, n, g);
    typename Tensor<Scalar>::ConstMatrixMap dy(dout.data().data() + n * spec.units * g.positions(),
                                               spec.units, g.positions());
    dw.noalias() += dy * cols.transpose();
    r.param_grads.bias.data() += dy.rowwise().sum();
    const typename Tensor<Scalar>::RowMatrix dcols = w.transpose() * dy;
    col2im_add(dcols, r.input_grad, n, g);
  }
  return r;
}

}  // namespace detail

/// Runs one layer. `labels` is consulted by softmax_ce_head only; when given
/// it must hold one entry per example (negative = no label) and the per-example
/// cross-entropy is returned in `losses`. The head's output is the class
/// probability matrix.
template <typename Scalar>
LayerForward<Scalar> layer_forward(const LayerSpec& spec, const LayerParams<Scalar>& params,
                                   const Tensor<Scalar>& input, std::span<const int> labels = {}) {
  if (input.empty() || input.rank() < 2) {
    detail::layer_shape_error(spec, "expects a batched input, got " + to_string(input.shape()));
  }
  LayerForward<Scalar> r;
  r.cache.layer = spec.name;
  r.cache.kind = spec.kind;
  r.cache.input = input;
  const Index batch = input.dim(0);

  switch (spec.kind) {
    case LayerKind::dense:
      r.output = detail::affine_forward(spec, params, input);
      break;
    case LayerKind::conv2d:
      r.output = detail::conv_forward(spec, params, input);
      break;
    case LayerKind::relu:
      r.output = Tensor<Scalar>(input.shape(), input.data().cwiseMax(Scalar(0)));
      r.cache.kink_margin = static_cast<double>(input.data().cwiseAbs().minCoeff());
      break;
    case LayerKind::flatten:
      r.output = input.reshaped({batch, input.size() / batch});
      break;
    case LayerKind::maxpool2d: {
      if (input.rank() != 4) detail::layer_shape_error(spec, "expects (batch, channels, height, width) input");
      const detail::ConvGeometry g = detail::conv_geometry(spec, input.shape());
      r.output = Tensor<Scalar>(Shape{batch, g.channels, g.out_height, g.out_width});
      r.cache.argmax.resize(static_cast<std::size_t>(r.output.size()));
      const Scalar* x = input.data().data();
      Index o = 0;
      for (Index nc = 0; nc < batch * g.channels; ++nc) {
        const Index base = nc * g.height * g.width;
        for (Index oi = 0; oi < g.out_height; ++oi) {
          for (Index oj = 0; oj < g.out_width; ++oj, ++o) {
            Index best = base + (oi * g.stride) * g.width + oj * g.stride;
            Scalar runner_up = -std::numeric_limits<Scalar>::infinity();
            for (Index ki = 0; ki < g.kernel; ++ki) {
              for (Index kj = 0; kj < g.kernel; ++kj) {
                const Index at = base + (oi * g.stride + ki) * g.width + oj * g.stride + kj;
                if (at == best) continue;
                if (x[at] > x[best]) {
                  runner_up = x[best];
                  best = at;
                } else {
                  runner_up = std::max(runner_up, x[at]);
                }
              }
            }
            // A window of exact zeros is a block of inactive ReLUs, not a tie that can flip.
            if (x[best] != Scalar(0)) {
              r.cache.kink_margin = std::min(r.cache.kink_margin, static_cast<double>(x[best] - runner_up));
            }
            r.cache.argmax[static_cast<std::size_t>(o)] = best;
            r.output[o] = x[best];
          }
        }
      }
      break;
    }
    case LayerKind::softmax_ce_head: {
      Tensor<Scalar> logits = detail::affine_forward(spec, params, input);
      auto z = logits.matrix();
      const typename Tensor<Scalar>::Vector row_max = z.rowwise().maxCoeff();
      z.colwise() -= row_max;
      const typename Tensor<Scalar>::Vector log_norm = z.array().exp().rowwise().sum().log().matrix();
      r.cache.probabilities = Tensor<Scalar>(logits.shape());
      r.cache.probabilities.matrix() = (z.colwise() - log_norm).array().exp().matrix();
      r.output = r.cache.probabilities;
      if (!labels.empty()) {
        if (static_cast<Index>(labels.size()) != batch) {
          detail::layer_shape_error(spec, "expects one label per example");
        }
        r.losses = Tensor<Scalar>(Shape{batch});
        for (Index n = 0; n < batch; ++n) {
          const int y = labels[static_cast<std::size_t>(n)];
          if (y >= spec.units) detail::layer_shape_error(spec, "label " + std::to_string(y) + " out of range");
          r.losses[n] = y < 0 ? Scalar(0) : log_norm[n] - z(n, y);
        }
        r.cache.labels.assign(labels.begin(), labels.end());
      }
      break;
    }
  }
  r.cache.output_shape = r.output.shape();
  return r;
}

/// Backward pass of one layer. `upstream` has the shape of the forward output,
/// except for softmax_ce_head where it holds dL/d(loss_n), one entry per example.
template <typename Scalar>
LayerBackward<Scalar> layer_backward(const LayerSpec& spec, const LayerParams<Scalar>& params,
                                     const ForwardCache<Scalar>& cache, const Tensor<Scalar>& upstream) {
  if (cache.layer != spec.name || cache.kind != spec.kind || cache.input.empty()) {
    throw ContractError("layer '" + spec.name + "': backward called with a cache from '" + cache.layer + "'");
  }
  const bool head = spec.kind == LayerKind::softmax_ce_head;
  const Shape expected = head ? Shape{cache.input.dim(0)} : cache.output_shape;
  if (upstream.shape() != expected) {
    throw ContractError("layer '" + spec.name + "': upstream shape " + to_string(upstream.shape()) +
                        " does not match " + to_string(expected));
  }

  switch (spec.kind) {
    case LayerKind::dense:
      return detail::affine_backward(params, cache.input, upstream);
    case LayerKind::conv2d:
      return detail::conv_backward(spec, params, cache.input, upstream);
    case LayerKind::relu: {
      LayerBackward<Scalar> r;
      r.input_grad = Tensor<Scalar>(
          cache.input.shape(),
          (cache.input.data().array() > Scalar(0)).select(upstream.data(), Scalar(0)).matrix());
      return r;
    }
    case LayerKind::flatten: {
      LayerBackward<Scalar> r;
      r.input_grad = upstream.reshaped(cache.input.shape());
      return r;
    }
    case LayerKind::maxpool2d: {
      LayerBackward<Scalar> r;
      r.input_grad = Tensor<Scalar>(cache.input.shape());
      for (Index o = 0; o < upstream.size(); ++o) {
        r.input_grad[cache.argmax[static_cast<std::size_t>(o)]] += upstream[o];
      }
      return r;
    }
    case LayerKind::softmax_ce_head: {
      if (cache.labels.empty()) {
        throw ContractError("layer '" + spec.name + "': backward needs the labels given to forward");
      }
      Tensor<Scalar> dlogits = cache.probabilities;
      auto d = dlogits.matrix();
      for (Index n = 0; n < d.rows(); ++n) {
        const Scalar w = upstream[n];
        const int y = cache.labels[static_cast<std::size_t>(n)];
        if (y < 0) {
          if (w != Scalar(0)) {
            throw ContractError("layer '" + spec.name + "': nonzero loss weight on an unlabeled example");
          }
          d.row(n).setZero();
          continue;
        }
        d(n, y) -= Scalar(1);
        d.row(n) *= w;
      }
      return detail::affine_backward(params, cache.input, dlogits);
    }
  }
  throw ContractError("unhandled layer kind");
}

}  // namespace xstitch
