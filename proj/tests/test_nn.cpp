#include "doctest.h"

#include "deepthal/nn/graph.hpp"
#include "deepthal/nn/optim.hpp"

#include <functional>
#include <random>

using namespace deepthal::nn;
using T = Tensor<double>;
using V = Var<double>;

namespace {

T random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  T t(s);
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data.data()[i] = u(rng);
  return t;
}

// Scalar probe sum(R * out) so any op can be checked through one backward pass.
V probe(const V& out, const T& r) {
  const double val = (out->value.data.array() * r.data.array()).sum();
  return make_node<double>(T::constant({1, 1, 1, 1}, val), {out}, [r](Node<double>& n) {
    n.parents[0]->ensure_grad().data += n.grad.data(0, 0) * r.data;
  });
}

// Max relative error between analytic and central-difference gradients.
double grad_check(std::vector<V> inputs, const std::function<V(const std::vector<V>&)>& fn, double h = 1e-6) {
  for (auto& v : inputs) v->requires_grad = true;
  V out = fn(inputs);
  backward(out);
  double worst = 0;
  for (auto& v : inputs) {
    T analytic = v->has_grad() ? v->grad : T::zeros(v->value.shape);
    v->zero_grad();
    for (Eigen::Index i = 0; i < v->value.data.size(); ++i) {
      double& x = v->value.data.data()[i];
      const double keep = x;
      double plus, minus;
      {
        NoGradGuard g;
        x = keep + h;
        plus = fn(inputs)->value.data(0, 0);
        x = keep - h;
        minus = fn(inputs)->value.data(0, 0);
      }
      x = keep;
      const double numeric = (plus - minus) / (2 * h);
      const double a = analytic.data.data()[i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("conv3d gradients (k=3 and k=1)") {
  std::mt19937_64 rng(1);
  for (int k : {1, 3}) {
    V x = constant(random_tensor({2, 3, 4, 3}, rng));
    V w = constant(random_tensor({3, 2 * k * k * k, 1, 1}, rng));
    V b = constant(random_tensor({3, 1, 1, 1}, rng));
    T r = random_tensor({3, 3, 4, 3}, rng);
    double err = grad_check({x, w, b}, [&](const std::vector<V>& in) { return probe(conv3d(in[0], in[1], in[2], k), r); });
    CHECK(err < 1e-6);
  }
}

TEST_CASE("conv3d matches a direct loop") {
  std::mt19937_64 rng(2);
  T x = random_tensor({2, 4, 3, 5}, rng);
  T w = random_tensor({3, 54, 1, 1}, rng);
  T out = conv3d(constant(x), constant(w), V{}, 3)->value;
  for (int co = 0; co < 3; ++co)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 3; ++j)
        for (int l = 0; l < 5; ++l) {
          double s = 0;
          for (int ci = 0; ci < 2; ++ci)
            for (int dx = 0; dx < 3; ++dx)
              for (int dy = 0; dy < 3; ++dy)
                for (int dz = 0; dz < 3; ++dz) {
                  const int a = i + dx - 1, bb = j + dy - 1, c = l + dz - 1;
                  if (a < 0 || a >= 4 || bb < 0 || bb >= 3 || c < 0 || c >= 5) continue;
                  s += w.data(co, ((ci * 3 + dx) * 3 + dy) * 3 + dz) * x.at(ci, a, bb, c);
                }
          CHECK(out.at(co, i, j, l) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("elementwise and resampling op gradients") {
  std::mt19937_64 rng(3);
  const Shape s{2, 4, 4, 2};
  T r = random_tensor(s, rng);
  auto check = [&](std::function<V(const V&)> op, Shape out_shape) {
    T rr = random_tensor(out_shape, rng);
    V x = constant(random_tensor(s, rng));
    return grad_check({x}, [&](const std::vector<V>& in) { return probe(op(in[0]), rr); });
  };
  CHECK(check([](const V& x) { return relu(x); }, s) < 1e-6);
  CHECK(check([](const V& x) { return softmax(x); }, s) < 1e-6);
  CHECK(check([](const V& x) { return avg_pool(x, 2); }, {2, 2, 2, 1}) < 1e-6);
  CHECK(check([](const V& x) { return max_pool(x, 2); }, {2, 2, 2, 1}) < 1e-6);
  CHECK(check([](const V& x) { return upsample(x, 2); }, {2, 8, 8, 4}) < 1e-6);
  CHECK(check([](const V& x) { return resize_trilinear(x, {3, 5, 3}); }, {2, 3, 5, 3}) < 1e-6);
  CHECK(check([](const V& x) { return space_to_depth(x); }, {16, 2, 2, 1}) < 1e-6);
  CHECK(check([](const V& x) { return center(x); }, s) < 1e-6);
  CHECK(check([](const V& x) { return concat<double>({x, relu(x)}); }, {4, 4, 4, 2}) < 1e-6);
  CHECK(check([](const V& x) { return add(x, x); }, s) < 1e-6);
  CHECK(check([](const V& x) { return smoothness_loss(x); }, {1, 1, 1, 1}) < 1e-6);
  CHECK(check([](const V& x) { return mse_loss(x, T::constant(x->value.shape, 0.3)); }, {1, 1, 1, 1}) < 1e-6);
  (void)r;
}

TEST_CASE("batch norm and dense gradients") {
  std::mt19937_64 rng(4);
  V x = constant(random_tensor({3, 2, 3, 2}, rng));
  V g = constant(random_tensor({3, 1, 1, 1}, rng, 0.5, 1.5));
  V b = constant(random_tensor({3, 1, 1, 1}, rng));
  T r = random_tensor({3, 2, 3, 2}, rng);
  NormState<double> st{Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3)};
  CHECK(grad_check({x, g, b}, [&](const std::vector<V>& in) {
          return probe(batch_norm(in[0], in[1], in[2], st, true), r);
        }) < 1e-5);
  CHECK(grad_check({x, g, b}, [&](const std::vector<V>& in) {
          return probe(batch_norm(in[0], in[1], in[2], st, false), r);
        }) < 1e-6);

  V w = constant(random_tensor({5, 36, 1, 1}, rng));
  V bias = constant(random_tensor({5, 1, 1, 1}, rng));
  T r2 = random_tensor({5, 1, 1, 1}, rng);
  CHECK(grad_check({x, w, bias}, [&](const std::vector<V>& in) {
          return probe(dense(in[0], in[1], in[2], Shape{5, 1, 1, 1}), r2);
        }) < 1e-6);
}

TEST_CASE("warp: zero displacement is identity and gradients match") {
  std::mt19937_64 rng(5);
  T img = random_tensor({1, 4, 3, 5}, rng);
  V out = warp(constant(img), constant(T::zeros({3, 4, 3, 5})));
  CHECK((out->value.data - img.data).cwiseAbs().maxCoeff() < 1e-12);

  // Keep sample points away from voxel boundaries where trilinear weights kink.
  T d = random_tensor({3, 4, 3, 5}, rng, 0.1, 0.4);
  T r = random_tensor({1, 4, 3, 5}, rng);
  CHECK(grad_check({constant(img), constant(d)},
                   [&](const std::vector<V>& in) { return probe(warp(in[0], in[1]), r); }) < 1e-6);
}

TEST_CASE("space_to_depth and depth_to_space are exact inverses") {
  std::mt19937_64 rng(6);
  T x = random_tensor({3, 4, 6, 2}, rng);
  T y = depth_to_space(space_to_depth(constant(x)))->value;
  CHECK(y.shape == x.shape);
  CHECK(y.data == x.data);
}

TEST_CASE("upsample of constants is constant; avg_pool of 0..7 block is 3.5") {
  T c = T::constant({1, 3, 3, 3}, 2.5);
  T u = upsample(constant(c), 2)->value;
  CHECK((u.data.array() - 2.5).abs().maxCoeff() < 1e-12);
  T b({1, 2, 2, 2});
  for (int i = 0; i < 8; ++i) b.data(0, i) = i;
  CHECK(avg_pool(constant(b), 2)->value.data(0, 0) == doctest::Approx(3.5));
}

TEST_CASE("graph shape inference, parameter counting and network forward") {
  Graph g(1);
  int a = g.conv(0, 1, 3, true);
  g.set_outputs({a});
  CHECK(g.parameter_count() == 28);

  Graph h(2);
  int p = h.avg_pool(0, 2);
  int c = h.conv_block(p, 4);
  int u = h.upsample(c, 2);
  int cat = h.concat({u, h.conv(0, 4)});
  int s = h.softmax(h.conv(cat, 3, 1));
  h.set_outputs({s});
  // conv(2->4)+bn(4) + conv(2->4) + conv1(8->3)
  CHECK(h.parameter_count() == (54 * 4 + 4) + 8 + (54 * 4 + 4) + (8 * 3 + 3));
  Network<float> net(h, 7);
  CHECK(net.parameter_count() == h.parameter_count());
  std::mt19937_64 rng(0);
  Tensor<float> x = Tensor<double>::constant({2, 4, 4, 4}, 0.5).cast<float>();
  Tensor<float> y = net.predict(x);
  CHECK(y.shape == Shape{3, 4, 4, 4});
  Eigen::VectorXf sums = y.data.colwise().sum();
  CHECK((sums.array() - 1.0f).abs().maxCoeff() < 1e-5f);
  CHECK_THROWS(net.predict(Tensor<float>({2, 5, 4, 4})));
}

TEST_CASE("network copies are deep and state round-trips") {
  Graph g(1);
  g.set_outputs({g.conv_block(0, 2)});
  Network<float> a(g, 3);
  Network<float> b = a;
  b.parameters()[0]->value.data.setZero();
  CHECK(a.parameters()[0]->value.data.cwiseAbs().sum() > 0);
  b.load_state(a.state());
  CHECK(b.state() == a.state());
  Network<double> d = a.cast<double>();
  CHECK(d.parameter_count() == a.parameter_count());
}

TEST_CASE("adamax decreases a quadratic") {
  V p = parameter(T::constant({1, 4, 1, 1}, 3.0));
  Optimizer<double> opt({p}, OptimizerSettings{});
  double first = 0, last = 0;
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    V l = mse_loss(p, T::zeros({1, 4, 1, 1}));
    if (i == 0) first = l->value.data(0, 0);
    last = l->value.data(0, 0);
    backward(l);
    opt.step();
  }
  CHECK(last < first);
  CHECK_THROWS(Optimizer<double>({p}, OptimizerSettings{OptimizerKind::adamax, 0.0}));
}
