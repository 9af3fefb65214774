// Copyright 2026 The pasdl Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef PASDL_AUTODIFF_HPP
#define PASDL_AUTODIFF_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pasdl/array4.hpp"

namespace pasdl::diff {

/// Trainable tensor. Gradients accumulate across backward() calls until
/// zero_grad().
struct Parameter {
  std::string name;
  Array4 value;
  Array4 grad;
  std::uint64_t id;

  Parameter(std::string n, Shape4 s)
      : name(std::move(n)), value(s), grad(s), id(next_id()) {}

  void zero_grad() { grad.fill(0.0); }

 private:
  static std::uint64_t next_id();
};

using NodeId = std::int32_t;

enum class BnMode { kTrain, kEval };

/// Running statistics of one batch-norm layer. Owned by the network, updated
/// in place by train-mode forward passes (momentum 0.1, PyTorch convention:
/// unbiased batch variance feeds the running estimate).
struct BatchNormState {
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(int channels)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Inclusive-exclusive row/col rectangle on an (H, W) map.
struct Rect {
  int r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  int rows() const { return r1 - r0; }
  int cols() const { return c1 - c0; }
  bool empty() const { return rows() <= 0 || cols() <= 0; }
};

/// Eagerly-evaluated reverse-mode graph. Construction order is topological;
/// backward() walks the node list once in reverse and accumulates parameter
/// gradients into the bound Parameter objects. One graph is confined to one
/// thread; distinct graphs are independent.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves.
  NodeId constant(Array4 v);
  NodeId param(Parameter& p);

  // Layer vocabulary.
  NodeId conv2d(NodeId x, NodeId w, NodeId bias, std::pair<int, int> stride,
                std::pair<int, int> pad);  // bias = -1 for none
  /// Zero-padded "same" convolution evaluated only on `roi` of the output.
  NodeId conv2d_roi(NodeId x, NodeId w, Rect roi);
  NodeId maxpool_1x2(NodeId x);
  NodeId batchnorm2d(NodeId x, NodeId gamma, NodeId beta, BatchNormState& state,
                     BnMode mode);
  NodeId relu(NodeId x);
  NodeId upsample_nn2(NodeId x);
  NodeId softmax_all(NodeId x);  // per channel over all H*W entries
  NodeId concat_channels(NodeId a, NodeId b);

  // Elementwise / reduction vocabulary for the losses.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId square(NodeId a);
  NodeId scale(NodeId a, double s);
  NodeId mul_const(NodeId a, Array4 m);
  NodeId hypot_eps(NodeId a, NodeId b);  // sqrt(a^2 + b^2 + 1e-24)
  NodeId sum_all(NodeId a);              // -> (1,1,1,1)

  /// Expected heatmap coordinates per channel: output (B, C, 1, 2) holding
  /// (row coordinate, column coordinate), grids -1 + 2j/(n-1). Channels must
  /// sum to 1 within 1e-6.
  NodeId dsnt(NodeId h);

  /// Masked Jensen-Shannon divergence, natural log, 1e-12 floor inside logs.
  /// mask has one entry per (batch, channel); output is the masked sum, a
  /// scalar node. Negative entries raise NumericError.
  NodeId js_divergence(NodeId p, NodeId q, const std::vector<double>& mask);

  /// Seeds d(loss)/d(loss) = 1 and accumulates gradients. `loss` must be a
  /// scalar node (numel 1). May be called repeatedly; parameter gradients
  /// accumulate.
  void backward(NodeId loss);

  const Array4& value(NodeId id) const { return nodes_[id]->value; }
  /// Gradient of the most recent backward() w.r.t. a node (test hook).
  const Array4& grad(NodeId id) const { return nodes_[id]->grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Array4 value;
    Array4 grad;
    bool requires_grad = false;
    std::vector<NodeId> inputs;
    std::function<void(Graph&, Node&)> backward;
    Parameter* bound = nullptr;
  };

  NodeId push(Array4 value, std::vector<NodeId> inputs,
              std::function<void(Graph&, Node&)> bw);
  Node& node(NodeId id) { return *nodes_[id]; }
  bool any_requires_grad(const std::vector<NodeId>& ids) const;

  std::vector<std::unique_ptr<Node>> nodes_;
};

}  // namespace pasdl::diff

#endif  // PASDL_AUTODIFF_HPP
