#include "deepthal/models.hpp"

#include "json.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace deepthal {

using json = nlohmann::json;
using TensorF = nn::Tensor<float>;

namespace {

const std::vector<std::pair<Architecture, std::string>> kArchNames{
    {Architecture::dpn, "dpn"},
    {Architecture::unet, "unet"},
    {Architecture::synthesis, "synthesis"},
    {Architecture::superres, "superres"},
    {Architecture::autoencoder, "autoencoder"},
    {Architecture::registration, "registration"},
};

std::array<int, 3> as_grid(const Dims& d) { return {d[0], d[1], d[2]}; }

}  // namespace

std::string to_string(Architecture a) {
  for (const auto& [k, n] : kArchNames)
    if (k == a) return n;
  throw DataError("unknown architecture");
}

Architecture architecture_from_string(const std::string& s) {
  for (const auto& [k, n] : kArchNames)
    if (n == s) return k;
  throw DataError("unknown architecture '" + s + "'");
}

std::string to_string(Head h) {
  switch (h) {
    case Head::softmax: return "softmax";
    case Head::linear: return "linear";
    case Head::displacement: return "displacement";
  }
  return "?";
}

namespace {

Head head_from_string(const std::string& s) {
  for (Head h : {Head::softmax, Head::linear, Head::displacement})
    if (to_string(h) == s) return h;
  throw DataError("unknown head '" + s + "'");
}

}  // namespace

void NetworkSpec::validate() const {
  if (width < 1) throw DataError("network spec: width must be >= 1");
  if (levels < 2) throw DataError("network spec: levels must be >= 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw DataError("network spec: dropout_rate must be in [0, 1)");
  if (input_channels < 1 || output_channels < 1) throw DataError("network spec: channel counts must be >= 1");
  if (arch == Architecture::dpn) {
    if (int(blocks.size()) != levels)
      throw DataError("network spec: dpn needs one block count per level (" + std::to_string(levels) + ")");
    for (int b : blocks)
      if (b < 1) throw DataError("network spec: block counts must be >= 1");
  }
  if (arch == Architecture::superres && factor != 2) throw DataError("network spec: only factor 2 superresolution");
  if (arch == Architecture::autoencoder) {
    if (latent_dim < 1) throw DataError("network spec: latent_dim must be >= 1");
    for (int a = 0; a < 3; ++a)
      if (reference_grid[a] < 8 || reference_grid[a] % 8)
        throw DataError("network spec: autoencoder reference grid must be a positive multiple of 8");
  }
}

// ---------------------------------------------------------------------------
// Builders

nn::Graph dpn_graph(const NetworkSpec& spec) {
  spec.validate();
  nn::Graph g(spec.input_channels);
  const int L = spec.levels, W = spec.width;
  std::vector<int> pooled{g.input()};
  for (int k = 1; k < L; ++k) pooled.push_back(g.avg_pool(pooled.back(), 2));

  int x = pooled.back();
  for (int b = 0; b < spec.blocks[0]; ++b) x = g.conv_block(x, W);
  x = g.dropout(x, spec.dropout_rate);
  for (int level = L - 2; level >= 0; --level) {
    const int up = g.upsample(x, 2);
    const int branch = g.conv_block(pooled[std::size_t(level)], W);
    x = g.concat({up, branch});
    for (int b = 0; b < spec.blocks[std::size_t(L - 1 - level)]; ++b) x = g.conv_block(x, W);
    if (level > 0) x = g.dropout(x, spec.dropout_rate);
  }
  x = g.conv(x, spec.output_channels, 1);
  g.set_outputs({g.softmax(x)});
  return g;
}

namespace {

struct UnetCore {
  int out = 0;
  std::vector<int> decoder;  // decoder outputs, finest first
};

/// Encoder-decoder with one conv block per level, filters doubling per pooling.
UnetCore unet_core(nn::Graph& g, int in, int width, int levels, double dropout, bool max_pool) {
  std::vector<int> skips;
  int x = in;
  for (int k = 0; k < levels; ++k) {
    x = g.conv_block(x, width << k);
    if (k + 1 < levels) {
      skips.push_back(x);
      x = max_pool ? g.max_pool(x, 2) : g.avg_pool(x, 2);
    }
  }
  if (dropout > 0) x = g.dropout(x, dropout);
  UnetCore core;
  std::vector<int> dec;
  for (int k = levels - 2; k >= 0; --k) {
    x = g.conv_block(g.concat({g.upsample(x, 2), skips[std::size_t(k)]}), width << k);
    dec.push_back(x);
  }
  core.decoder.assign(dec.rbegin(), dec.rend());
  core.out = x;
  return core;
}

}  // namespace

nn::Graph unet_graph(const NetworkSpec& spec) {
  spec.validate();
  nn::Graph g(spec.input_channels);
  const UnetCore core = unet_core(g, g.input(), spec.width, spec.levels, spec.dropout_rate, true);
  g.set_outputs({g.softmax(g.conv(core.out, spec.output_channels, 1))});
  return g;
}

nn::Graph synthesis_graph(const NetworkSpec& spec) {
  spec.validate();
  nn::Graph g(spec.input_channels);
  const int s = g.space_to_depth(g.input());
  const UnetCore core = unet_core(g, s, spec.width, spec.levels, spec.dropout_rate, false);
  std::vector<int> outs;
  // decoder[0] is the half-resolution level; each head predicts 8 sub-voxels.
  const std::size_t heads = spec.deeply_supervised ? core.decoder.size() : 1;
  for (std::size_t k = 0; k < heads; ++k)
    outs.push_back(g.depth_to_space(g.conv(core.decoder[k], 8 * spec.output_channels, 1)));
  g.set_outputs(outs);
  return g;
}

nn::Graph superres_graph(const NetworkSpec& spec) {
  spec.validate();
  nn::Graph g(1);
  const int up = g.upsample(g.input(), 2);
  // Bias-free residual branch: a constant input has zero centred signal and
  // therefore zero residual.
  int r = g.center(g.input());
  for (int i = 0; i < spec.levels; ++i) r = g.relu(g.conv(r, spec.width, 3, false));
  r = g.depth_to_space(g.conv(r, 8, 3, false, "residual", 0.1));
  g.set_outputs({g.add(up, r)});
  return g;
}

nn::Graph autoencoder_graph(const NetworkSpec& spec) {
  spec.validate();
  nn::Graph g(spec.input_channels);
  const int W = spec.width;
  int x = g.max_pool(g.conv_block(g.input(), W), 2);
  x = g.max_pool(g.conv_block(x, 2 * W), 2);
  x = g.max_pool(g.conv_block(x, 2 * W), 2);
  const Dims& r = spec.reference_grid;
  const nn::Shape coarse{2 * W, r[0] / 8, r[1] / 8, r[2] / 8};
  const int latent = g.dense(x, nn::Shape{spec.latent_dim, 1, 1, 1});
  int y = g.relu(g.dense(latent, coarse));
  y = g.conv_block(g.upsample(y, 2), 2 * W);
  y = g.conv_block(g.upsample(y, 2), W);
  y = g.conv_block(g.upsample(y, 2), W);
  g.set_outputs({g.conv(y, spec.input_channels, 1), latent});
  return g;
}

nn::Graph registration_graph(const NetworkSpec& spec) {
  spec.validate();
  if (spec.input_channels != 2) throw DataError("registration net takes (moving, fixed): 2 input channels");
  nn::Graph g(2);
  const UnetCore core = unet_core(g, g.input(), spec.width, spec.levels, 0.0, false);
  g.set_outputs({g.conv(core.out, 3, 1, true, "displacement", 0.01)});
  return g;
}

nn::Graph build_graph(const NetworkSpec& spec) {
  switch (spec.arch) {
    case Architecture::dpn: return dpn_graph(spec);
    case Architecture::unet: return unet_graph(spec);
    case Architecture::synthesis: return synthesis_graph(spec);
    case Architecture::superres: return superres_graph(spec);
    case Architecture::autoencoder: return autoencoder_graph(spec);
    case Architecture::registration: return registration_graph(spec);
  }
  throw DataError("unknown architecture");
}

TrainedModel build_model(const NetworkSpec& spec) {
  TrainedModel m;
  m.spec = spec;
  m.net = nn::Network<float>(build_graph(spec), spec.init_seed, as_grid(spec.reference_grid));
  return m;
}

TrainedModel build_dpn(NetworkSpec spec) {
  spec.arch = Architecture::dpn;
  spec.head = Head::softmax;
  return build_model(spec);
}

TrainedModel build_unet(NetworkSpec spec) {
  spec.arch = Architecture::unet;
  spec.head = Head::softmax;
  if (spec.name == "dpn") spec.name = "unet";
  return build_model(spec);
}

TrainedModel build_synthesis_net(int in_channels, bool deeply_supervised, int width, int levels) {
  if (in_channels != 1 && in_channels != 2) throw DataError("synthesis net takes 1 (T1) or 2 (T1+T2) channels");
  NetworkSpec s;
  s.name = in_channels == 1 ? "synthesis_mono" : "synthesis_multi";
  s.arch = Architecture::synthesis;
  s.input_channels = in_channels;
  s.output_channels = 1;
  s.width = width;
  s.levels = levels;
  s.dropout_rate = 0.0;
  s.head = Head::linear;
  s.deeply_supervised = deeply_supervised;
  return build_model(s);
}

TrainedModel build_superres_net(int factor, int width) {
  NetworkSpec s;
  s.name = "superres";
  s.arch = Architecture::superres;
  s.input_channels = 1;
  s.output_channels = 1;
  s.width = width;
  s.levels = 2;  // hidden conv layers
  s.dropout_rate = 0.0;
  s.head = Head::linear;
  s.factor = factor;
  return build_model(s);
}

TrainedModel build_autoencoder(int latent_dim, Dims reference_grid, int width) {
  NetworkSpec s;
  s.name = "autoencoder";
  s.arch = Architecture::autoencoder;
  s.input_channels = 1;
  s.output_channels = 1;
  s.width = width;
  s.levels = 4;
  s.dropout_rate = 0.0;
  s.head = Head::linear;
  s.latent_dim = latent_dim;
  s.reference_grid = reference_grid;
  return build_model(s);
}

TrainedModel build_registration_net(int width, int levels) {
  NetworkSpec s;
  s.name = "registration";
  s.arch = Architecture::registration;
  s.input_channels = 2;
  s.output_channels = 3;
  s.width = width;
  s.levels = levels;
  s.dropout_rate = 0.0;
  s.head = Head::displacement;
  return build_model(s);
}

namespace {

// conv 3x3x3 with bias followed by batch-norm affine terms.
std::int64_t block_params(std::int64_t cin, std::int64_t cout) { return 27 * cin * cout + cout + 2 * cout; }

}  // namespace

std::int64_t dpn_parameter_formula(const NetworkSpec& spec) {
  spec.validate();
  const std::int64_t W = spec.width, cin = spec.input_channels;
  std::int64_t n = block_params(cin, W) + (spec.blocks[0] - 1) * block_params(W, W);
  for (int i = 1; i < spec.levels; ++i)
    n += block_params(cin, W) + block_params(2 * W, W) + (spec.blocks[std::size_t(i)] - 1) * block_params(W, W);
  return n + W * spec.output_channels + spec.output_channels;
}

std::int64_t unet_parameter_formula(const NetworkSpec& spec) {
  spec.validate();
  const std::int64_t W = spec.width;
  std::int64_t n = 0, prev = spec.input_channels;
  for (int k = 0; k < spec.levels; ++k) {
    n += block_params(prev, W << k);
    prev = W << k;
  }
  for (int k = spec.levels - 2; k >= 0; --k) {
    n += block_params(prev + (W << k), W << k);
    prev = W << k;
  }
  return n + W * spec.output_channels + spec.output_channels;
}

std::int64_t count_parameters(const TrainedModel& model) { return model.net.parameter_count(); }

// ---------------------------------------------------------------------------
// Samples

Volume3D atlas_channel(const LabelMap& atlas) {
  Volume3D v = atlas.like<float>(atlas.dims);
  v.data = atlas.data.cast<float>();
  return zscore(v);
}

Sample make_sample(const CaseBundle& c, const std::vector<std::string>& modalities, const LabelMap* atlas) {
  if (modalities.empty()) throw DataError("make_sample: no input modalities");
  std::vector<Volume3D> vols;
  for (const auto& m : modalities) vols.push_back(zscore(c.modality(m)));
  if (atlas) {
    if (atlas->dims != vols.front().dims) throw DataError("make_sample: atlas grid differs from case grid");
    vols.push_back(atlas_channel(*atlas));
  }
  std::vector<const Volume3D*> ptrs;
  for (const auto& v : vols) ptrs.push_back(&v);
  Sample s;
  s.id = c.meta.id;
  s.input = to_tensor(ptrs);
  s.labels = c.labels;
  return s;
}

Sample make_regression_sample(const std::vector<const Volume3D*>& inputs, const Volume3D& target, bool shared_stats) {
  if (inputs.empty()) throw DataError("make_regression_sample: no inputs");
  std::vector<Volume3D> z;
  for (const Volume3D* v : inputs) z.push_back(zscore(*v));
  std::vector<const Volume3D*> ptrs;
  for (const auto& v : z) ptrs.push_back(&v);
  Sample s;
  s.input = to_tensor(ptrs);
  Volume3D t = target;
  if (shared_stats) {
    const Eigen::ArrayXd d = inputs.front()->data.cast<double>();
    const double mean = d.mean(), sd = std::sqrt((d - mean).square().mean());
    if (!(sd > 0)) throw DataError("make_regression_sample: constant input");
    t.data = ((target.data.cast<double>() - mean) / sd).cast<float>();
  } else {
    t = zscore(target);
  }
  s.target = to_tensor({&t});
  return s;
}

// ---------------------------------------------------------------------------
// Augmentation

void AugmentationPolicy::validate() const {
  for (double v : {probability, resize_range, rotation_degrees, elastic_amplitude, contrast_range, brightness_range,
                   noise_sigma_max})
    if (!std::isfinite(v) || v < 0) throw DataError("augmentation: ranges must be finite and non-negative");
  if (probability > 1) throw DataError("augmentation: probability must be <= 1");
  if (resize_range >= 1) throw DataError("augmentation: resize range must be < 1");
}

namespace {

/// Source coordinate of every output voxel under a random similarity
/// transform plus smooth elastic displacement about the grid centre.
std::vector<Eigen::Vector3f> random_mapping(const nn::Shape& s, const AugmentationPolicy& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), coin(0.0, 1.0);
  Eigen::Matrix3d A = Eigen::Matrix3d::Identity();
  if (coin(rng) < p.probability) {
    const double scale = 1.0 + p.resize_range * u(rng);
    const double deg = M_PI / 180.0 * p.rotation_degrees;
    const Eigen::Matrix3d R = (Eigen::AngleAxisd(deg * u(rng), Eigen::Vector3d::UnitX()) *
                               Eigen::AngleAxisd(deg * u(rng), Eigen::Vector3d::UnitY()) *
                               Eigen::AngleAxisd(deg * u(rng), Eigen::Vector3d::UnitZ()))
                                  .toRotationMatrix();
    A = R.transpose() / scale;
  }
  TensorF elastic;
  if (p.elastic_amplitude > 0 && coin(rng) < p.probability) {
    std::normal_distribution<float> n(0.0f, float(p.elastic_amplitude));
    TensorF coarse({3, 4, 4, 4});
    for (Eigen::Index i = 0; i < coarse.data.size(); ++i) coarse.data.data()[i] = n(rng);
    nn::NoGradGuard guard;
    elastic = nn::resize_trilinear(nn::constant(coarse), s.grid())->value;
  }
  const Eigen::Vector3d c((s.x - 1) / 2.0, (s.y - 1) / 2.0, (s.z - 1) / 2.0);
  std::vector<Eigen::Vector3f> src(std::size_t(s.voxels()));
  std::int64_t v = 0;
  for (int x = 0; x < s.x; ++x)
    for (int y = 0; y < s.y; ++y)
      for (int z = 0; z < s.z; ++z, ++v) {
        Eigen::Vector3d q = c + A * (Eigen::Vector3d(x, y, z) - c);
        if (elastic.data.size()) q += elastic.data.col(v).cast<double>();
        src[std::size_t(v)] = q.cast<float>();
      }
  return src;
}

TensorF sample_trilinear(const TensorF& t, const std::vector<Eigen::Vector3f>& src) {
  const nn::Shape& s = t.shape;
  TensorF out(s);
  const int dims[3] = {s.x, s.y, s.z};
  for (std::size_t v = 0; v < src.size(); ++v) {
    int lo[3], hi[3];
    float f[3];
    for (int a = 0; a < 3; ++a) {
      const float p = std::clamp(src[v][a], 0.0f, float(dims[a] - 1));
      lo[a] = std::min(int(std::floor(p)), dims[a] - 1);
      hi[a] = std::min(lo[a] + 1, dims[a] - 1);
      f[a] = p - float(lo[a]);
    }
    for (int bx = 0; bx < 2; ++bx)
      for (int by = 0; by < 2; ++by)
        for (int bz = 0; bz < 2; ++bz) {
          const float w = (bx ? f[0] : 1 - f[0]) * (by ? f[1] : 1 - f[1]) * (bz ? f[2] : 1 - f[2]);
          if (w == 0.0f) continue;
          const std::int64_t idx = t.index(bx ? hi[0] : lo[0], by ? hi[1] : lo[1], bz ? hi[2] : lo[2]);
          out.data.col(std::int64_t(v)) += w * t.data.col(idx);
        }
  }
  return out;
}

LabelMap sample_nearest(const LabelMap& m, const std::vector<Eigen::Vector3f>& src) {
  LabelMap out = m;
  for (std::size_t v = 0; v < src.size(); ++v) {
    int q[3];
    for (int a = 0; a < 3; ++a) q[a] = std::clamp(int(std::lround(src[v][a])), 0, m.dims[a] - 1);
    out.data(std::int64_t(v)) = m(q[0], q[1], q[2]);
  }
  return out;
}

}  // namespace

Sample augment(const Sample& s, const AugmentationPolicy& policy, std::mt19937_64& rng) {
  policy.validate();
  if (policy.probability == 0.0) return s;
  Sample out = s;
  const auto src = random_mapping(s.input.shape, policy, rng);
  out.input = sample_trilinear(s.input, src);
  if (s.labels) out.labels = sample_nearest(*s.labels, src);
  if (s.target) {
    if (!(s.target->shape.grid() == s.input.shape.grid()))
      throw DataError("augment: regression target grid differs from input grid");
    out.target = sample_trilinear(*s.target, src);
  }
  std::uniform_real_distribution<double> u(-1.0, 1.0), coin(0.0, 1.0);
  if (coin(rng) < policy.probability) {
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (int c = 0; c < out.input.shape.c; ++c) {
      const float gain = float(1.0 + policy.contrast_range * u(rng));
      const float shift = float(policy.brightness_range * u(rng));
      const float sigma = float(policy.noise_sigma_max * 0.5 * (1.0 + u(rng)));
      auto row = out.input.data.row(c);
      for (Eigen::Index v = 0; v < row.size(); ++v) row(v) = gain * row(v) + shift + sigma * n(rng);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw DataError("optimizer: learning rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw DataError("optimizer: moments must be in [0, 1)");
  if (epochs < 0 || steps_per_epoch < 1) throw DataError("optimizer: epochs >= 0 and steps_per_epoch >= 1");
}

namespace {

void check_divisible(const nn::Graph& g, const nn::Shape& s, const std::string& id) {
  const int d = g.grid_divisor();
  if (s.x % d || s.y % d || s.z % d)
    throw DataError("sample '" + id + "' grid " + s.str() + " is not divisible by " + std::to_string(d) +
                    "; use pad_to_multiple first");
}

TensorF swap_pair(const TensorF& t) {
  TensorF s = t;
  s.data.row(0) = t.data.row(1);
  s.data.row(1) = t.data.row(0);
  return s;
}

nn::Var<float> half_difference(const nn::Var<float>& a, const nn::Var<float>& b) {
  TensorF v(a->value.shape, 0.5f * (a->value.data - b->value.data));
  return nn::make_node<float>(std::move(v), {a, b}, [](nn::Node<float>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->ensure_grad().data += 0.5f * n.grad.data;
    if (n.parents[1]->requires_grad) n.parents[1]->ensure_grad().data -= 0.5f * n.grad.data;
  });
}

/// Network outputs. Registration fields are antisymmetrised,
/// u = (F(m, f) - F(f, m)) / 2, so identical inputs give exactly zero.
std::vector<nn::Var<float>> run_network(nn::Network<float>& net, Architecture arch, const TensorF& input,
                                        bool training, std::mt19937_64& rng) {
  auto outs = net.forward(input, training, rng);
  if (arch == Architecture::registration) {
    const auto back = net.forward(swap_pair(input), training, rng);
    outs = {half_difference(outs.front(), back.front())};
  }
  return outs;
}

/// Graph-side loss of one (possibly augmented) sample.
nn::Var<float> sample_loss(const TrainedModel& m, const std::vector<nn::Var<float>>& outs, const Sample& s,
                           const TrainOptions& o) {
  switch (o.loss) {
    case LossKind::composite: {
      if (!s.labels) throw DataError("composite loss needs labels for sample '" + s.id + "'");
      const TensorF y = one_hot<float>(*s.labels, m.spec.output_channels);
      return composite_loss(outs.front(), y, m.weights, o.eps);
    }
    case LossKind::mse: {
      if (!s.target) throw DataError("mse loss needs a regression target for sample '" + s.id + "'");
      std::vector<nn::Var<float>> terms;
      std::vector<double> weights;
      // Auxiliary outputs are compared with the target pooled to their grid.
      const std::size_t n = m.spec.arch == Architecture::autoencoder ? 1 : outs.size();
      for (std::size_t i = 0; i < n; ++i) {
        const nn::Shape& os = outs[i]->value.shape;
        TensorF t = *s.target;
        if (os.x != t.shape.x) {
          nn::NoGradGuard guard;
          t = nn::avg_pool(nn::constant(t), t.shape.x / os.x)->value;
        }
        terms.push_back(nn::mse_loss(outs[i], t));
        weights.push_back(1.0 / double(1 << i));
      }
      return nn::weighted_sum(terms, weights);
    }
    case LossKind::registration: {
      if (s.input.shape.c != 2) throw DataError("registration loss needs (moving, fixed) inputs");
      const nn::Shape one{1, s.input.shape.x, s.input.shape.y, s.input.shape.z};
      const TensorF moving(one, s.input.data.row(0));
      const TensorF fixed(one, s.input.data.row(1));
      auto warped = nn::warp(nn::constant(moving), outs.front());
      return nn::weighted_sum<float>({nn::mse_loss(warped, fixed), nn::smoothness_loss(outs.front())},
                              {1.0, o.smoothness_weight});
    }
  }
  throw DataError("unknown loss");
}

double validation_score(const TrainedModel& m, const std::vector<Sample>& val, const TrainOptions& o) {
  if (o.loss == LossKind::composite) return mean_dice(m, val);
  double total = 0;
  for (const auto& s : val) total += evaluate_loss(m, s, o);
  return -total / double(val.size());
}

}  // namespace

double evaluate_loss(const TrainedModel& model, const Sample& s, const TrainOptions& options) {
  nn::NoGradGuard guard;
  std::mt19937_64 rng(0);
  auto& net = const_cast<nn::Network<float>&>(model.net);
  const auto outs = run_network(net, model.spec.arch, s.input, false, rng);
  return sample_loss(model, outs, s, options)->value.data(0, 0);
}

TrainedModel train(TrainedModel model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                   const OptimizerConfig& opt, const AugmentationPolicy& aug, std::uint64_t seed,
                   const TrainOptions& options) {
  opt.validate();
  aug.validate();
  if (opt.epochs == 0) return model;
  if (train_set.empty()) throw DataError("train: empty training set");
  const nn::Shape shape0 = train_set.front().input.shape;
  for (const auto* set : {&train_set, &val_set})
    for (const auto& s : *set) {
      if (!(s.input.shape == shape0)) throw DataError("train: sample '" + s.id + "' has a different geometry");
      check_divisible(model.net.graph(), s.input.shape, s.id);
    }
  if (shape0.c != model.spec.input_channels)
    throw DataError("train: model expects " + std::to_string(model.spec.input_channels) + " channels, data has " +
                    std::to_string(shape0.c));

  if (options.loss == LossKind::composite) {
    std::vector<const LabelMap*> labels;
    for (const auto& s : train_set) {
      if (!s.labels) throw DataError("train: sample '" + s.id + "' has no labels");
      labels.push_back(&*s.labels);
    }
    if (labels.front()->schema.max_id() + 1 != model.spec.output_channels)
      throw DataError("train: label schema has " + std::to_string(labels.front()->schema.max_id() + 1) +
                      " classes, model outputs " + std::to_string(model.spec.output_channels));
    if (model.weights.w.empty()) model.weights = label_weights_from_training(labels);
    model.schema = labels.front()->schema;
  }

  std::mt19937_64 rng(seed);
  nn::Optimizer<float> optimizer(model.net.parameters(),
                                 {opt.algorithm, opt.learning_rate, opt.beta1, opt.beta2, 1e-7});
  std::vector<float> best_state = model.net.state();
  double best_score = -std::numeric_limits<double>::infinity();
  const int first_epoch = model.training_log.empty() ? 1 : model.training_log.back().epoch + 1;

  for (int e = 0; e < opt.epochs; ++e) {
    const int epoch = first_epoch + e;
    double loss_sum = 0;
    for (int step = 0; step < opt.steps_per_epoch; ++step) {
      const std::size_t idx = options.sampler ? options.sampler(rng)
                                              : std::uniform_int_distribution<std::size_t>(0, train_set.size() - 1)(rng);
      if (idx >= train_set.size()) throw DataError("train: sampler returned an out-of-range index");
      const Sample s = augment(train_set[idx], aug, rng);
      auto outs = run_network(model.net, model.spec.arch, s.input, true, rng);
      auto loss = sample_loss(model, outs, s, options);
      const double value = loss->value.data(0, 0);
      if (!std::isfinite(value))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step + 1) +
                           " (sample '" + s.id + "')");
      nn::backward(loss);
      optimizer.step();
      optimizer.zero_grad();
      loss_sum += value;
    }
    LogEntry entry{epoch, loss_sum / opt.steps_per_epoch, 0.0};
    entry.val_score = val_set.empty() ? -entry.loss : validation_score(model, val_set, options);
    model.training_log.push_back(entry);
    if (entry.val_score > best_score) {
      best_score = entry.val_score;
      best_state = model.net.state();
      model.best_epoch = epoch;
    }
    if (options.on_epoch) options.on_epoch(entry);
  }
  if (options.keep_best) model.net.load_state(best_state);
  else model.best_epoch = model.training_log.back().epoch;
  return model;
}

// ---------------------------------------------------------------------------
// Inference

namespace {

TensorF pad_tensor(const TensorF& t, const PadRecord& r) {
  const nn::Shape s = t.shape;
  const nn::Shape o{s.c, s.x + r.before[0] + r.after[0], s.y + r.before[1] + r.after[1],
                    s.z + r.before[2] + r.after[2]};
  TensorF out(o);
  for (int x = 0; x < o.x; ++x)
    for (int y = 0; y < o.y; ++y)
      for (int z = 0; z < o.z; ++z) {
        const int sx = std::clamp(x - r.before[0], 0, s.x - 1), sy = std::clamp(y - r.before[1], 0, s.y - 1),
                  sz = std::clamp(z - r.before[2], 0, s.z - 1);
        out.data.col(out.index(x, y, z)) = t.data.col(t.index(sx, sy, sz));
      }
  return out;
}

TensorF unpad_tensor(const TensorF& t, const PadRecord& r, std::array<int, 3> grid) {
  TensorF out(nn::Shape{t.shape.c, grid[0], grid[1], grid[2]});
  for (int x = 0; x < grid[0]; ++x)
    for (int y = 0; y < grid[1]; ++y)
      for (int z = 0; z < grid[2]; ++z)
        out.data.col(out.index(x, y, z)) = t.data.col(t.index(x + r.before[0], y + r.before[1], z + r.before[2]));
  return out;
}

TensorF predict_raw(const TrainedModel& model, const TensorF& input) {
  if (input.shape.c != model.spec.input_channels)
    throw DataError("predict: model expects " + std::to_string(model.spec.input_channels) + " channels, got " +
                    input.shape.str());
  const int d = model.net.graph().grid_divisor();
  const nn::Shape s = input.shape;
  if (model.spec.arch == Architecture::autoencoder || (s.x % d == 0 && s.y % d == 0 && s.z % d == 0)) {
    TensorF out = model.net.predict(input);
    if (!out.data.allFinite()) throw NumericError("predict: non-finite network output");
    return out;
  }
  PadRecord r;
  const int dims[3] = {s.x, s.y, s.z};
  for (int a = 0; a < 3; ++a) {
    const int total = round_up(dims[a], d) - dims[a];
    r.before[a] = total / 2;
    r.after[a] = total - total / 2;
  }
  TensorF out = model.net.predict(pad_tensor(input, r));
  if (!out.data.allFinite()) throw NumericError("predict: non-finite network output");
  // Outputs at the input grid (or a multiple of it for superresolution).
  const int f = out.shape.x / (s.x + r.before[0] + r.after[0]);
  PadRecord rf;
  for (int a = 0; a < 3; ++a) {
    rf.before[a] = r.before[a] * f;
    rf.after[a] = r.after[a] * f;
  }
  return unpad_tensor(out, rf, {s.x * f, s.y * f, s.z * f});
}

}  // namespace

TensorF predict(const TrainedModel& model, const TensorF& input) {
  TensorF out = predict_raw(model, input);
  if (model.spec.arch == Architecture::registration)
    out.data = 0.5f * (out.data - predict_raw(model, swap_pair(input)).data);
  return out;
}

LabelMap segment(const TrainedModel& model, const TensorF& input, const Volume3D& like) {
  if (model.spec.head != Head::softmax) throw DataError("segment: model does not have a softmax head");
  return argmax_labels(predict(model, input), like, model.schema);
}

TensorF ensemble_probs(const std::vector<const TrainedModel*>& models, const std::vector<TensorF>& inputs) {
  if (models.empty() || models.size() != inputs.size()) throw DataError("ensemble: one input per model required");
  TensorF acc = predict(*models.front(), inputs.front());
  for (std::size_t i = 1; i < models.size(); ++i) {
    const TensorF p = predict(*models[i], inputs[i]);
    if (!(p.shape == acc.shape)) throw DataError("ensemble: member outputs differ in shape");
    acc.data += p.data;
  }
  acc.data /= float(models.size());
  return acc;
}

double mean_dice(const TrainedModel& model, const std::vector<Sample>& samples) {
  if (samples.empty()) throw DataError("mean_dice: no samples");
  double total = 0;
  for (const auto& s : samples) {
    if (!s.labels) throw DataError("mean_dice: sample '" + s.id + "' has no labels");
    const Volume3D like = s.labels->like<float>(s.labels->dims);
    total += dice_report(segment(model, s.input, like), *s.labels).mean;
  }
  return total / double(samples.size());
}

Eigen::VectorXf encode(const TrainedModel& ae, const TensorF& input) {
  if (ae.spec.arch != Architecture::autoencoder) throw DataError("encode: not an autoencoder");
  const Dims& r = ae.spec.reference_grid;
  if (input.shape != nn::Shape{ae.spec.input_channels, r[0], r[1], r[2]})
    throw DataError("encode: input " + input.shape.str() + " does not match the autoencoder grid");
  nn::NoGradGuard guard;
  std::mt19937_64 rng(0);
  const auto outs = const_cast<nn::Network<float>&>(ae.net).forward(input, false, rng);
  return outs[1]->value.data.col(0);
}

TensorF register_pair(const TrainedModel& reg, const Volume3D& moving, const Volume3D& fixed) {
  if (reg.spec.arch != Architecture::registration) throw DataError("register_pair: not a registration net");
  if (moving.dims != fixed.dims) throw DataError("register_pair: moving and fixed grids differ");
  const Volume3D zm = zscore(moving), zf = zscore(fixed);
  return predict(reg, to_tensor({&zm, &zf}));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[] = "DEEPTHAL-CKPT 1\n";

json spec_to_json(const NetworkSpec& s) {
  return json{{"name", s.name},
              {"arch", to_string(s.arch)},
              {"input_channels", s.input_channels},
              {"output_channels", s.output_channels},
              {"width", s.width},
              {"levels", s.levels},
              {"dropout_rate", s.dropout_rate},
              {"head", to_string(s.head)},
              {"blocks", s.blocks},
              {"deeply_supervised", s.deeply_supervised},
              {"latent_dim", s.latent_dim},
              {"reference_grid", s.reference_grid},
              {"factor", s.factor},
              {"init_seed", s.init_seed}};
}

NetworkSpec spec_from_json(const json& j) {
  NetworkSpec s;
  s.name = j.at("name").get<std::string>();
  s.arch = architecture_from_string(j.at("arch").get<std::string>());
  s.input_channels = j.at("input_channels").get<int>();
  s.output_channels = j.at("output_channels").get<int>();
  s.width = j.at("width").get<int>();
  s.levels = j.at("levels").get<int>();
  s.dropout_rate = j.at("dropout_rate").get<double>();
  s.head = head_from_string(j.at("head").get<std::string>());
  s.blocks = j.at("blocks").get<std::vector<int>>();
  s.deeply_supervised = j.at("deeply_supervised").get<bool>();
  s.latent_dim = j.at("latent_dim").get<int>();
  s.reference_grid = j.at("reference_grid").get<Dims>();
  s.factor = j.at("factor").get<int>();
  s.init_seed = j.at("init_seed").get<std::uint64_t>();
  return s;
}

}  // namespace

void save_model(const TrainedModel& m, const std::string& path) {
  json h;
  h["spec"] = spec_to_json(m.spec);
  h["parameter_count"] = m.parameter_count();
  h["layers"] = m.net.graph().describe();
  h["label_weights"] = m.weights.w;
  json schema = json::array();
  for (const auto& [id, name] : m.schema.entries) schema.push_back({id, name});
  h["schema"] = schema;
  json log = json::array();
  for (const auto& e : m.training_log) log.push_back({e.epoch, e.loss, e.val_score});
  h["training_log"] = log;
  h["best_epoch"] = m.best_epoch;
  const std::vector<float> state = m.net.state();
  h["state_size"] = state.size();
  const std::string header = h.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint '" + path + "'");
  f.write(kMagic, sizeof(kMagic) - 1);
  std::uint64_t len = header.size();
  unsigned char lb[8];
  for (int i = 0; i < 8; ++i) lb[i] = static_cast<unsigned char>(len >> (8 * i));
  f.write(reinterpret_cast<const char*>(lb), 8);
  f.write(header.data(), std::streamsize(header.size()));
  static_assert(sizeof(float) == 4);
  f.write(reinterpret_cast<const char*>(state.data()), std::streamsize(state.size() * sizeof(float)));
  if (!f) throw DataError("failed writing checkpoint '" + path + "'");
}

TrainedModel load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::string magic(sizeof(kMagic) - 1, '\0');
  f.read(magic.data(), std::streamsize(magic.size()));
  if (!f || magic != kMagic) throw DataError("'" + path + "' is not a model checkpoint");
  unsigned char lb[8];
  f.read(reinterpret_cast<char*>(lb), 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(lb[i]) << (8 * i);
  if (!f || len > (1u << 26)) throw DataError("checkpoint '" + path + "': corrupt header length");
  std::string header(len, '\0');
  f.read(header.data(), std::streamsize(len));
  if (!f) throw DataError("checkpoint '" + path + "': truncated header");
  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw DataError("checkpoint '" + path + "': bad header: " + e.what());
  }
  TrainedModel m;
  try {
    m = build_model(spec_from_json(h.at("spec")));
    m.weights.w = h.at("label_weights").get<std::vector<double>>();
    m.schema.entries.clear();
    for (const auto& e : h.at("schema")) m.schema.entries.emplace_back(e.at(0).get<int>(), e.at(1).get<std::string>());
    for (const auto& e : h.at("training_log"))
      m.training_log.push_back({e.at(0).get<int>(), e.at(1).get<double>(), e.at(2).get<double>()});
    m.best_epoch = h.at("best_epoch").get<int>();
    if (h.at("layers").get<std::string>() != m.net.graph().describe())
      throw DataError("checkpoint '" + path + "': layer graph does not match its spec");
  } catch (const json::exception& e) {
    throw DataError("checkpoint '" + path + "': " + e.what());
  }
  const std::size_t n = h.at("state_size").get<std::size_t>();
  std::vector<float> state(n);
  f.read(reinterpret_cast<char*>(state.data()), std::streamsize(n * sizeof(float)));
  if (!f) throw DataError("checkpoint '" + path + "': truncated weights");
  if (f.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint '" + path + "': trailing bytes");
  m.net.load_state(state);
  return m;
}

}  // namespace deepthal
