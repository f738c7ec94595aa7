#pragma once

// Template definitions for Network<Scalar>; included from graph.hpp.

namespace deepthal::nn {

template <typename Scalar>
Network<Scalar>::Network(Graph graph, std::uint64_t init_seed, std::array<int, 3> reference_grid)
    : graph_(std::move(graph)) {
  std::mt19937_64 rng(init_seed);
  const auto& layers = graph_.layers();
  std::vector<Shape> shapes;
  const bool has_dense = std::any_of(layers.begin(), layers.end(),
                                     [](const Layer& l) { return l.kind == LayerKind::dense; });
  if (has_dense)
    shapes = graph_.infer_shapes({graph_.input_channels(), reference_grid[0], reference_grid[1], reference_grid[2]});
  params_.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    LayerParams& p = params_[i];
    if (l.kind == LayerKind::conv) {
      const int cin = graph_.channels(l.inputs.front());
      const int fan_in = cin * l.kernel * l.kernel * l.kernel;
      std::normal_distribution<double> dist(0.0, l.init_scale * std::sqrt(2.0 / fan_in));
      RowMatrix<Scalar> w(l.channels, fan_in);
      for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = Scalar(dist(rng));
      p.weight = parameter(Tensor<Scalar>({l.channels, fan_in, 1, 1}, std::move(w)));
      if (l.bias) p.bias = parameter(Tensor<Scalar>::zeros({l.channels, 1, 1, 1}));
    } else if (l.kind == LayerKind::batch_norm) {
      p.gamma = parameter(Tensor<Scalar>::constant({l.channels, 1, 1, 1}, Scalar(1)));
      p.beta = parameter(Tensor<Scalar>::zeros({l.channels, 1, 1, 1}));
      p.norm.mean = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(l.channels);
      p.norm.var = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Ones(l.channels);
    } else if (l.kind == LayerKind::dense) {
      const int fan_in = int(shapes[std::size_t(l.inputs.front())].size());
      const int out = int(l.dense_shape.size());
      std::normal_distribution<double> dist(0.0, l.init_scale * std::sqrt(1.0 / fan_in));
      RowMatrix<Scalar> w(out, fan_in);
      for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = Scalar(dist(rng));
      p.weight = parameter(Tensor<Scalar>({out, fan_in, 1, 1}, std::move(w)));
      p.bias = parameter(Tensor<Scalar>::zeros({out, 1, 1, 1}));
    }
  }
}

namespace detail {

template <typename Scalar>
Var<Scalar> clone_param(const Var<Scalar>& v) {
  return v ? parameter(v->value) : Var<Scalar>{};
}

}  // namespace detail

template <typename Scalar>
Network<Scalar>::Network(const Network& other) : graph_(other.graph_) {
  params_.resize(other.params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& o = other.params_[i];
    auto& p = params_[i];
    p.weight = detail::clone_param(o.weight);
    p.bias = detail::clone_param(o.bias);
    p.gamma = detail::clone_param(o.gamma);
    p.beta = detail::clone_param(o.beta);
    p.norm = o.norm;
  }
}

template <typename Scalar>
Network<Scalar>& Network<Scalar>::operator=(const Network& other) {
  if (this != &other) {
    Network tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

template <typename Scalar>
std::vector<Var<Scalar>> Network<Scalar>::forward(const Var<Scalar>& input, bool training,
                                                  std::mt19937_64& rng) {
  const auto& layers = graph_.layers();
  graph_.infer_shapes(input->value.shape);  // validates the input once, with a readable error
  std::vector<Var<Scalar>> acts(layers.size());
  acts[0] = input;
  for (std::size_t i = 1; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const Var<Scalar>& x = acts[std::size_t(l.inputs.front())];
    LayerParams& p = params_[i];
    switch (l.kind) {
      case LayerKind::conv: acts[i] = conv3d(x, p.weight, p.bias, l.kernel); break;
      case LayerKind::batch_norm: acts[i] = batch_norm(x, p.gamma, p.beta, p.norm, training); break;
      case LayerKind::relu: acts[i] = relu(x); break;
      case LayerKind::dropout: acts[i] = dropout(x, l.rate, training, rng); break;
      case LayerKind::avg_pool: acts[i] = avg_pool(x, l.factor); break;
      case LayerKind::max_pool: acts[i] = max_pool(x, l.factor); break;
      case LayerKind::upsample: acts[i] = upsample(x, l.factor); break;
      case LayerKind::concat: {
        std::vector<Var<Scalar>> xs;
        for (int j : l.inputs) xs.push_back(acts[std::size_t(j)]);
        acts[i] = concat(xs);
        break;
      }
      case LayerKind::softmax: acts[i] = softmax(x); break;
      case LayerKind::space_to_depth: acts[i] = space_to_depth(x); break;
      case LayerKind::depth_to_space: acts[i] = depth_to_space(x); break;
      case LayerKind::add: acts[i] = add(x, acts[std::size_t(l.inputs[1])]); break;
      case LayerKind::center: acts[i] = center(x); break;
      case LayerKind::dense: acts[i] = dense(x, p.weight, p.bias, l.dense_shape); break;
      case LayerKind::input: throw std::logic_error("graph: second input layer");
    }
  }
  std::vector<Var<Scalar>> outs;
  for (int o : graph_.outputs()) outs.push_back(acts[std::size_t(o)]);
  return outs;
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::predict(const Tensor<Scalar>& input) const {
  NoGradGuard guard;
  std::mt19937_64 rng(0);
  // Inference never touches running statistics, so the const_cast is safe.
  auto outs = const_cast<Network*>(this)->forward(constant(input), false, rng);
  return outs.front()->value;
}

template <typename Scalar>
std::vector<Var<Scalar>> Network<Scalar>::parameters() const {
  std::vector<Var<Scalar>> out;
  for (const auto& p : params_)
    for (const auto* v : {&p.weight, &p.bias, &p.gamma, &p.beta})
      if (*v) out.push_back(*v);
  return out;
}

template <typename Scalar>
std::int64_t Network<Scalar>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& v : parameters()) n += v->value.data.size();
  return n;
}

template <typename Scalar>
void Network<Scalar>::zero_grad() {
  for (auto& v : parameters()) v->zero_grad();
}

template <typename Scalar>
std::vector<Scalar> Network<Scalar>::state() const {
  std::vector<Scalar> flat;
  for (const auto& v : parameters())
    flat.insert(flat.end(), v->value.data.data(), v->value.data.data() + v->value.data.size());
  for (const auto& p : params_) {
    flat.insert(flat.end(), p.norm.mean.data(), p.norm.mean.data() + p.norm.mean.size());
    flat.insert(flat.end(), p.norm.var.data(), p.norm.var.data() + p.norm.var.size());
  }
  return flat;
}

template <typename Scalar>
void Network<Scalar>::load_state(const std::vector<Scalar>& flat) {
  std::size_t at = 0;
  auto take = [&](Scalar* dst, std::size_t n) {
    if (at + n > flat.size()) throw std::invalid_argument("network state is too short");
    std::copy(flat.begin() + std::ptrdiff_t(at), flat.begin() + std::ptrdiff_t(at + n), dst);
    at += n;
  };
  for (auto& v : parameters()) take(v->value.data.data(), std::size_t(v->value.data.size()));
  for (auto& p : params_) {
    take(p.norm.mean.data(), std::size_t(p.norm.mean.size()));
    take(p.norm.var.data(), std::size_t(p.norm.var.size()));
  }
  if (at != flat.size()) throw std::invalid_argument("network state has trailing values");
}

template <typename Scalar>
template <typename Other>
Network<Other> Network<Scalar>::cast() const {
  Network<Other> out;
  out.graph_ = graph_;
  out.params_.resize(params_.size());
  auto conv = [](const Var<Scalar>& v) {
    return v ? parameter(v->value.template cast<Other>()) : Var<Other>{};
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    auto& q = out.params_[i];
    q.weight = conv(p.weight);
    q.bias = conv(p.bias);
    q.gamma = conv(p.gamma);
    q.beta = conv(p.beta);
    q.norm.mean = p.norm.mean.template cast<Other>();
    q.norm.var = p.norm.var.template cast<Other>();
  }
  return out;
}

}  // namespace deepthal::nn
