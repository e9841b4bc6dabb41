#pragma once

#include <cmath>
#include <vector>

#include "skynet/arch.hpp"
#include "skynet/grad.hpp"

// Reverse-mode differentiation through a whole NetSpec and a plain SGD step.
// Batch norm stays in inference form; only conv weights, gamma and beta are
// updated by the trainer, though gradients are produced for every tensor.

namespace skynet {

template <class T>
struct Tape {
  std::vector<LayerTrace> plan;
  std::vector<Tensor<T>> inputs;  // running tensor entering each step
  std::optional<Tensor<T>> held;  // reordered bypass tensor
  Tensor<T> output;
};

template <class T>
Tape<T> forward_tape(const NetSpec& net, const WeightSet<T>& ws, const Tensor<T>& x) {
  if (x.shape() != net.input_shape) {
    throw ShapeError("input: tensor " + to_string(x.shape()) + " does not match network input " +
                     to_string(net.input_shape));
  }
  check_weights(net, ws);
  Tape<T> tape;
  tape.plan = infer_shapes(net);
  tape.inputs.reserve(tape.plan.size());
  Tensor<T> cur = x;
  for (const auto& step : tape.plan) {
    tape.inputs.push_back(cur);
    if (step.branch) {
      tape.held = apply_layer(step, ws, cur);
    } else if (step.layer.kind == LayerKind::BypassConcat) {
      cur = concat_channels(cur, *tape.held);
    } else {
      cur = apply_layer(step, ws, cur);
    }
  }
  tape.output = std::move(cur);
  return tape;
}

template <class T>
struct NetGradients {
  WeightSet<T> weights;
  Tensor<T> input;
};

template <class T>
void add_into(Tensor<T>& acc, const Tensor<T>& g) {
  for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
}

template <class T>
NetGradients<T> backward_net(const WeightSet<T>& ws, const Tape<T>& tape, const Tensor<T>& grad_out) {
  if (grad_out.shape() != tape.output.shape()) {
    throw ShapeError("backward_net: grad_out " + to_string(grad_out.shape()) + " != output " +
                     to_string(tape.output.shape()));
  }
  NetGradients<T> grads;
  Tensor<T> g = grad_out;
  std::optional<Tensor<T>> g_held;
  for (std::size_t s = tape.plan.size(); s-- > 0;) {
    const auto& step = tape.plan[s];
    const auto& x = tape.inputs[s];
    switch (step.layer.kind) {
      case LayerKind::DWConv3: {
        auto r = dw_conv3_backward(x, ws.at(step.name + ".weight"), g);
        grads.weights.set(step.name + ".weight", std::move(r.weights));
        g = std::move(r.input);
        break;
      }
      case LayerKind::PWConv1: {
        auto r = pw_conv1_backward(x, ws.at(step.name + ".weight"), g);
        grads.weights.set(step.name + ".weight", std::move(r.weights));
        g = std::move(r.input);
        break;
      }
      case LayerKind::BatchNorm: {
        auto r = batchnorm_backward(x, ws.batchnorm(step.name), g);
        const Shape c{x.channels()};
        grads.weights.set(step.name + ".gamma", Tensor<T>(c, std::move(r.gamma)));
        grads.weights.set(step.name + ".beta", Tensor<T>(c, std::move(r.beta)));
        grads.weights.set(step.name + ".mean", Tensor<T>(c, std::move(r.mean)));
        grads.weights.set(step.name + ".var", Tensor<T>(c, std::move(r.var)));
        g = std::move(r.input);
        break;
      }
      case LayerKind::ReLU6: g = relu6_backward(x, g); break;
      case LayerKind::ReLU: g = relu_backward(x, g); break;
      case LayerKind::MaxPool2: g = maxpool2_backward(x, g); break;
      case LayerKind::SpaceToDepth: {
        // Branch: its gradient comes from the concat, and adds to the trunk.
        if (g_held) add_into(g, space_to_depth_backward(x, *g_held));
        break;
      }
      case LayerKind::BypassConcat: {
        auto r = concat_channels_backward(x, *tape.held, g);
        g = std::move(r.lhs);
        g_held = std::move(r.rhs);
        break;
      }
    }
  }
  grads.input = std::move(g);
  return grads;
}

/// w -= lr * dL/dw for conv weights, gamma and beta.
template <class T>
void sgd_step(WeightSet<T>& ws, const WeightSet<T>& grads, T lr) {
  for (auto& [name, t] : ws) {
    const auto suffix = name.substr(name.rfind('.'));
    if (suffix == ".mean" || suffix == ".var" || !grads.contains(name)) continue;
    const auto& g = grads.at(name);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] -= lr * g[k];
  }
}

}  // namespace skynet
