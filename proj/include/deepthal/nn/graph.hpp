#pragma once

#include "deepthal/nn/ops.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace deepthal::nn {

enum class LayerKind {
  input,
  conv,
  batch_norm,
  relu,
  dropout,
  avg_pool,
  max_pool,
  upsample,
  concat,
  softmax,
  space_to_depth,
  depth_to_space,
  add,
  center,
  dense,
};

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

/// One node of a declarative layer graph. Only the fields relevant to `kind`
/// are meaningful.
struct Layer {
  LayerKind kind = LayerKind::input;
  std::vector<int> inputs;
  int channels = 0;  // output channels (inferred for shape-only layers)
  int kernel = 3;
  int factor = 2;
  double rate = 0.0;
  bool bias = true;
  double init_scale = 1.0;  // multiplies the He-normal init std of conv/dense weights
  Shape dense_shape{};  // output shape of a dense layer
  std::string name;
};

/// Declarative network: layer 0 is the input; `outputs` lists the layers
/// returned by a forward pass (primary output first).
class Graph {
 public:
  Graph() = default;
  explicit Graph(int input_channels);

  int input() const { return 0; }
  int input_channels() const { return layers_.front().channels; }

  int conv(int in, int channels, int kernel = 3, bool bias = true, std::string name = {},
           double init_scale = 1.0);
  int batch_norm(int in);
  int relu(int in);
  int dropout(int in, double rate);
  int avg_pool(int in, int factor);
  int max_pool(int in, int factor);
  int upsample(int in, int factor);
  int concat(std::vector<int> ins);
  int softmax(int in);
  int space_to_depth(int in);
  int depth_to_space(int in);
  int add(int a, int b);
  int center(int in);
  int dense(int in, Shape out_shape);

  /// conv 3x3x3 -> ReLU -> batch normalization.
  int conv_block(int in, int channels);

  void set_outputs(std::vector<int> outs) { outputs_ = std::move(outs); }
  const std::vector<int>& outputs() const { return outputs_; }
  const std::vector<Layer>& layers() const { return layers_; }
  int channels(int id) const { return layers_.at(std::size_t(id)).channels; }

  /// Output shape of every layer for a given input shape; throws when the
  /// input is incompatible (indivisible grid, channel mismatch, dense size).
  std::vector<Shape> infer_shapes(const Shape& input) const;

  /// Trainable scalar count. Needs a reference input grid only when the
  /// graph contains dense layers.
  std::int64_t parameter_count(std::array<int, 3> grid = {0, 0, 0}) const;

  /// Largest pooling factor applied along any path; inputs must be divisible by it.
  int grid_divisor() const;

  std::string describe() const;

 private:
  int push(Layer layer);
  std::vector<Layer> layers_;
  std::vector<int> outputs_;
};

/// Parameter store plus interpreter for a Graph.
template <typename Scalar>
class Network {
 public:
  struct LayerParams {
    Var<Scalar> weight, bias, gamma, beta;
    NormState<Scalar> norm;
  };

  Network() = default;
  Network(Graph graph, std::uint64_t init_seed, std::array<int, 3> reference_grid = {0, 0, 0});
  // Copies are deep: parameters are never shared between networks.
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const Graph& graph() const { return graph_; }

  /// Forward pass. `training` enables dropout and batch statistics (and
  /// updates running statistics).
  std::vector<Var<Scalar>> forward(const Var<Scalar>& input, bool training, std::mt19937_64& rng);
  std::vector<Var<Scalar>> forward(const Tensor<Scalar>& input, bool training, std::mt19937_64& rng) {
    return forward(constant(input), training, rng);
  }
  /// Inference: primary output only, no tape kept.
  Tensor<Scalar> predict(const Tensor<Scalar>& input) const;

  /// Trainable parameters in layer order (weight, bias, gamma, beta).
  std::vector<Var<Scalar>> parameters() const;
  std::int64_t parameter_count() const;
  void zero_grad();

  std::vector<LayerParams>& layer_params() { return params_; }
  const std::vector<LayerParams>& layer_params() const { return params_; }

  /// Flattened copy of every parameter and normalization buffer.
  std::vector<Scalar> state() const;
  void load_state(const std::vector<Scalar>& flat);

  template <typename Other>
  Network<Other> cast() const;

 private:
  template <typename>
  friend class Network;

  Graph graph_;
  std::vector<LayerParams> params_;
};

}  // namespace deepthal::nn

#include "deepthal/nn/graph_impl.hpp"
