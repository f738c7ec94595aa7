#include "deepthal/nn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace deepthal::nn {

namespace {

struct KindName {
  LayerKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {LayerKind::input, "input"},
    {LayerKind::conv, "conv"},
    {LayerKind::batch_norm, "batch_norm"},
    {LayerKind::relu, "relu"},
    {LayerKind::dropout, "dropout"},
    {LayerKind::avg_pool, "avg_pool"},
    {LayerKind::max_pool, "max_pool"},
    {LayerKind::upsample, "upsample"},
    {LayerKind::concat, "concat"},
    {LayerKind::softmax, "softmax"},
    {LayerKind::space_to_depth, "space_to_depth"},
    {LayerKind::depth_to_space, "depth_to_space"},
    {LayerKind::add, "add"},
    {LayerKind::center, "center"},
    {LayerKind::dense, "dense"},
};

}  // namespace

std::string to_string(LayerKind kind) {
  for (const auto& kn : kKindNames)
    if (kn.kind == kind) return kn.name;
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (const auto& kn : kKindNames)
    if (name == kn.name) return kn.kind;
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

Graph::Graph(int input_channels) {
  if (input_channels < 1) throw std::invalid_argument("graph: input_channels must be >= 1");
  Layer in;
  in.kind = LayerKind::input;
  in.channels = input_channels;
  in.name = "input";
  layers_.push_back(in);
  outputs_ = {0};
}

int Graph::push(Layer layer) {
  for (int i : layer.inputs)
    if (i < 0 || i >= int(layers_.size()))
      throw std::invalid_argument("graph: layer input " + std::to_string(i) + " does not exist");
  layers_.push_back(std::move(layer));
  return int(layers_.size()) - 1;
}

int Graph::conv(int in, int channels, int kernel, bool bias, std::string name, double init_scale) {
  Layer l;
  l.kind = LayerKind::conv;
  l.inputs = {in};
  l.channels = channels;
  l.kernel = kernel;
  l.bias = bias;
  l.init_scale = init_scale;
  l.name = std::move(name);
  return push(std::move(l));
}

int Graph::batch_norm(int in) {
  Layer l;
  l.kind = LayerKind::batch_norm;
  l.inputs = {in};
  l.channels = channels(in);
  return push(std::move(l));
}

int Graph::relu(int in) {
  Layer l;
  l.kind = LayerKind::relu;
  l.inputs = {in};
  l.channels = channels(in);
  return push(std::move(l));
}

int Graph::dropout(int in, double rate) {
  Layer l;
  l.kind = LayerKind::dropout;
  l.inputs = {in};
  l.channels = channels(in);
  l.rate = rate;
  return push(std::move(l));
}

int Graph::avg_pool(int in, int factor) {
  Layer l;
  l.kind = LayerKind::avg_pool;
  l.inputs = {in};
  l.channels = channels(in);
  l.factor = factor;
  return push(std::move(l));
}

int Graph::max_pool(int in, int factor) {
  Layer l;
  l.kind = LayerKind::max_pool;
  l.inputs = {in};
  l.channels = channels(in);
  l.factor = factor;
  return push(std::move(l));
}

int Graph::upsample(int in, int factor) {
  Layer l;
  l.kind = LayerKind::upsample;
  l.inputs = {in};
  l.channels = channels(in);
  l.factor = factor;
  return push(std::move(l));
}

int Graph::concat(std::vector<int> ins) {
  Layer l;
  l.kind = LayerKind::concat;
  l.channels = 0;
  for (int i : ins) l.channels += channels(i);
  l.inputs = std::move(ins);
  return push(std::move(l));
}

int Graph::softmax(int in) {
  Layer l;
  l.kind = LayerKind::softmax;
  l.inputs = {in};
  l.channels = channels(in);
  return push(std::move(l));
}

int Graph::space_to_depth(int in) {
  Layer l;
  l.kind = LayerKind::space_to_depth;
  l.inputs = {in};
  l.channels = channels(in) * 8;
  return push(std::move(l));
}

int Graph::depth_to_space(int in) {
  if (channels(in) % 8 != 0) throw std::invalid_argument("graph: depth_to_space needs channels % 8 == 0");
  Layer l;
  l.kind = LayerKind::depth_to_space;
  l.inputs = {in};
  l.channels = channels(in) / 8;
  return push(std::move(l));
}

int Graph::add(int a, int b) {
  if (channels(a) != channels(b)) throw std::invalid_argument("graph: add channel mismatch");
  Layer l;
  l.kind = LayerKind::add;
  l.inputs = {a, b};
  l.channels = channels(a);
  return push(std::move(l));
}

int Graph::center(int in) {
  Layer l;
  l.kind = LayerKind::center;
  l.inputs = {in};
  l.channels = channels(in);
  return push(std::move(l));
}

int Graph::dense(int in, Shape out_shape) {
  Layer l;
  l.kind = LayerKind::dense;
  l.inputs = {in};
  l.channels = out_shape.c;
  l.dense_shape = out_shape;
  return push(std::move(l));
}

int Graph::conv_block(int in, int ch) { return batch_norm(relu(conv(in, ch, 3))); }

std::vector<Shape> Graph::infer_shapes(const Shape& input) const {
  if (input.c != input_channels())
    throw std::invalid_argument("network expects " + std::to_string(input_channels()) +
                                " input channels, got " + input.str());
  std::vector<Shape> shapes(layers_.size());
  shapes[0] = input;
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    Shape s = shapes[std::size_t(l.inputs.front())];
    switch (l.kind) {
      case LayerKind::avg_pool:
      case LayerKind::max_pool:
        if (s.x % l.factor || s.y % l.factor || s.z % l.factor)
          throw std::invalid_argument("input grid " + input.str() + " is not divisible by " +
                                      std::to_string(grid_divisor()) + "; use pad_to_multiple first");
        s = {s.c, s.x / l.factor, s.y / l.factor, s.z / l.factor};
        break;
      case LayerKind::upsample:
        s = {s.c, s.x * l.factor, s.y * l.factor, s.z * l.factor};
        break;
      case LayerKind::space_to_depth:
        if (s.x % 2 || s.y % 2 || s.z % 2)
          throw std::invalid_argument("space_to_depth needs even grid dims, got " + input.str());
        s = {s.c * 8, s.x / 2, s.y / 2, s.z / 2};
        break;
      case LayerKind::depth_to_space:
        s = {s.c / 8, s.x * 2, s.y * 2, s.z * 2};
        break;
      case LayerKind::concat:
        for (int j : l.inputs)
          if (shapes[std::size_t(j)].grid() != s.grid())
            throw std::invalid_argument("concat grid mismatch for input " + input.str());
        s.c = l.channels;
        break;
      case LayerKind::dense:
        s = l.dense_shape;
        break;
      default:
        s.c = l.channels;
        break;
    }
    shapes[i] = s;
  }
  return shapes;
}

std::int64_t Graph::parameter_count(std::array<int, 3> grid) const {
  std::vector<Shape> shapes;
  bool has_dense = std::any_of(layers_.begin(), layers_.end(),
                               [](const Layer& l) { return l.kind == LayerKind::dense; });
  if (has_dense) shapes = infer_shapes({input_channels(), grid[0], grid[1], grid[2]});
  std::int64_t total = 0;
  for (const Layer& l : layers_) {
    if (l.kind == LayerKind::conv) {
      const std::int64_t cin = channels(l.inputs.front());
      total += cin * l.kernel * l.kernel * l.kernel * l.channels + (l.bias ? l.channels : 0);
    } else if (l.kind == LayerKind::batch_norm) {
      total += 2 * std::int64_t(l.channels);
    } else if (l.kind == LayerKind::dense) {
      const std::int64_t in = shapes[std::size_t(l.inputs.front())].size();
      total += in * l.dense_shape.size() + l.dense_shape.size();
    }
  }
  return total;
}

int Graph::grid_divisor() const {
  // Track each layer's resolution as a power of two relative to the input.
  std::vector<int> level(layers_.size(), 0);
  int worst = 0;
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    int lv = level[std::size_t(l.inputs.front())];
    if (l.kind == LayerKind::avg_pool || l.kind == LayerKind::max_pool || l.kind == LayerKind::space_to_depth)
      lv += int(std::lround(std::log2(l.kind == LayerKind::space_to_depth ? 2 : l.factor)));
    else if (l.kind == LayerKind::upsample || l.kind == LayerKind::depth_to_space)
      lv -= int(std::lround(std::log2(l.kind == LayerKind::depth_to_space ? 2 : l.factor)));
    level[i] = lv;
    worst = std::max(worst, lv);
  }
  return 1 << worst;
}

std::string Graph::describe() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    os << i << ": " << to_string(l.kind) << " ch=" << l.channels;
    if (l.kind == LayerKind::conv) os << " k=" << l.kernel << (l.bias ? "" : " nobias");
    if (l.kind == LayerKind::avg_pool || l.kind == LayerKind::max_pool || l.kind == LayerKind::upsample)
      os << " f=" << l.factor;
    if (l.kind == LayerKind::dropout) os << " rate=" << l.rate;
    os << " <-";
    for (int j : l.inputs) os << " " << j;
    if (!l.name.empty()) os << " [" << l.name << "]";
    os << "\n";
  }
  return os.str();
}

}  // namespace deepthal::nn
