#include "doctest.h"

#include "deepthal/models.hpp"
#include "deepthal/phantom.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

using namespace deepthal;

namespace {

NetworkSpec small_dpn(int width = 2, int in = 1, int out = 2) {
  NetworkSpec s;
  s.width = width;
  s.input_channels = in;
  s.output_channels = out;
  return s;
}

void check_softmax(const nn::Tensor<float>& p) {
  REQUIRE(p.data.allFinite());
  const Eigen::RowVectorXf sums = p.data.colwise().sum();
  CHECK((sums.array() - 1.0f).abs().maxCoeff() < 1e-5f);
}

nn::Tensor<float> random_input(nn::Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0, 1);
  nn::Tensor<float> t(s);
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data.data()[i] = n(rng);
  return t;
}

std::vector<Sample> phantom_samples(int n, int nuclei, Dims grid, std::uint64_t seed,
                                    std::vector<std::string> mods = {"T1", "WMn"}) {
  const auto cases = generate_dataset(default_phantom_spec(nuclei, grid), n, seed);
  std::vector<Sample> out;
  for (const auto& c : cases) out.push_back(make_sample(c, mods));
  return out;
}

double mae(const nn::Tensor<float>& a, const nn::Tensor<float>& b) {
  return double((a.data - b.data).cwiseAbs().mean());
}

}  // namespace

TEST_CASE("single conv parameter count") {
  nn::Graph g(1);
  g.set_outputs({g.conv(g.input(), 1, 3)});
  TrainedModel m;
  m.net = nn::Network<float>(g, 1);
  CHECK(count_parameters(m) == 28);
}

TEST_CASE("width-56 parameter accounting") {
  NetworkSpec dpn;  // width 56, 2 -> 14
  const TrainedModel d = build_dpn(dpn);
  CHECK(count_parameters(d) == dpn_parameter_formula(dpn));
  CHECK(count_parameters(d) == 1031142);
  CHECK(std::abs(double(count_parameters(d)) / 1034355.0 - 1.0) < 0.05);

  NetworkSpec unet = dpn;
  unet.arch = Architecture::unet;
  const TrainedModel u = build_unet(unet);
  CHECK(count_parameters(u) == unet_parameter_formula(unet));
  CHECK(count_parameters(u) == 8898078);
  CHECK(double(count_parameters(u)) / double(count_parameters(d)) >= 8.0);
}

TEST_CASE("closed-form counts for many configurations") {
  for (int w : {1, 3, 8})
    for (int in : {1, 2, 3})
      for (int levels : {2, 3, 4}) {
        NetworkSpec s = small_dpn(w, in, 5);
        s.levels = levels;
        s.blocks.assign(std::size_t(levels), 1);
        s.blocks[0] = 3;
        if (levels > 2) s.blocks[1] = 2;
        CHECK(count_parameters(build_dpn(s)) == dpn_parameter_formula(s));
        s.arch = Architecture::unet;
        CHECK(count_parameters(build_unet(s)) == unet_parameter_formula(s));
      }
}

TEST_CASE("tiny dpn forward") {
  NetworkSpec s = small_dpn(1, 1, 2);
  const TrainedModel m = build_dpn(s);
  const auto p = predict(m, random_input({1, 16, 16, 16}, 1));
  CHECK(p.shape == nn::Shape{2, 16, 16, 16});
  check_softmax(p);
  CHECK(count_parameters(m) == dpn_parameter_formula(s));

  // Raw graph evaluation needs divisible grids; predict pads and crops.
  std::mt19937_64 rng(0);
  auto net = m.net;
  CHECK_THROWS(net.forward(random_input({1, 20, 16, 16}, 2), false, rng));
  const auto q = predict(m, random_input({1, 20, 18, 13}, 2));
  CHECK(q.shape == nn::Shape{2, 20, 18, 13});
  check_softmax(q);
}

TEST_CASE("dpn on a full-size crop grid") {
  NetworkSpec s = small_dpn(2, 2, 14);
  const auto p = predict(build_dpn(s), random_input({2, 80, 96, 80}, 3));
  CHECK(p.shape == nn::Shape{14, 80, 96, 80});
  check_softmax(p);
}

TEST_CASE("unet forward shape") {
  NetworkSpec s = small_dpn(2, 2, 3);
  s.arch = Architecture::unet;
  const auto p = predict(build_unet(s), random_input({2, 16, 16, 16}, 4));
  CHECK(p.shape == nn::Shape{3, 16, 16, 16});
  check_softmax(p);
}

TEST_CASE("spec validation") {
  NetworkSpec s;
  s.width = 0;
  CHECK_THROWS_AS(build_dpn(s), DataError);
  s = NetworkSpec{};
  s.levels = 1;
  CHECK_THROWS_AS(build_dpn(s), DataError);
  s = NetworkSpec{};
  s.dropout_rate = 1.0;
  CHECK_THROWS_AS(build_dpn(s), DataError);
  s = NetworkSpec{};
  s.blocks = {3, 3};
  CHECK_THROWS_AS(build_dpn(s), DataError);
  CHECK_THROWS_AS(build_synthesis_net(3, true), DataError);
  CHECK_THROWS_AS(build_superres_net(3), DataError);
}

TEST_CASE("synthesis net shapes") {
  const TrainedModel mono = build_synthesis_net(1, true, 4, 3);
  std::mt19937_64 rng(0);
  auto net = mono.net;
  const auto outs = net.forward(random_input({1, 16, 16, 16}, 5), false, rng);
  REQUIRE(outs.size() == 2);  // final head plus one auxiliary head
  CHECK(outs[0]->value.shape == nn::Shape{1, 16, 16, 16});
  CHECK(outs[1]->value.shape == nn::Shape{1, 8, 8, 8});
  const TrainedModel plain = build_synthesis_net(2, false, 4, 3);
  CHECK(plain.net.graph().outputs().size() == 1);
  auto net2 = plain.net;
  CHECK_THROWS(net2.forward(random_input({2, 15, 16, 16}, 6), false, rng));
}

TEST_CASE("synthesis training beats the global-mean predictor") {
  // Noise-free WMn targets: voxel noise is irreducible for any predictor.
  PhantomSpec spec = default_phantom_spec(4, {16, 16, 16});
  auto& wmn = spec.contrast.at("WMn").noise_scale;
  std::fill(wmn.begin(), wmn.end(), 0.0);
  const auto cases = generate_dataset(spec, 36, 100);
  std::vector<Sample> tr, te;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    Sample s = make_regression_sample({&c.modality("T1"), &c.modality("T2")}, c.modality("WMn"));
    (i < 30 ? tr : te).push_back(std::move(s));
  }
  OptimizerConfig opt;
  opt.epochs = 30;
  opt.steps_per_epoch = 25;
  TrainOptions o;
  o.loss = LossKind::mse;
  const TrainedModel m = train(build_synthesis_net(2, true, 8, 3), tr, {}, opt, AugmentationPolicy::none(), 7, o);
  double model_err = 0, mean_err = 0;
  for (const auto& s : te) {
    model_err += mae(predict(m, s.input), *s.target);
    mean_err += double((s.target->data.array() - s.target->data.mean()).abs().mean());
  }
  MESSAGE("synthesis MAE " << model_err / te.size() << " vs mean predictor " << mean_err / te.size());
  CHECK(model_err <= 0.5 * mean_err);
}

TEST_CASE("superresolution shape, constants and cycle consistency") {
  TrainedModel sr = build_superres_net(2, 8);
  CHECK(predict(sr, random_input({1, 24, 24, 24}, 8)).shape == nn::Shape{1, 48, 48, 48});

  const PhantomSpec spec = default_phantom_spec(4, {32, 32, 32});
  const auto cases = generate_dataset(spec, 24, 200);
  std::vector<Sample> tr, te;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Volume3D& hr = cases[i].modality("T1");
    const Volume3D lr = avg_pool(hr, 2);
    Sample s = make_regression_sample({&lr}, hr, true);
    (i < 20 ? tr : te).push_back(std::move(s));
  }
  OptimizerConfig opt;
  opt.epochs = 6;
  opt.steps_per_epoch = 20;
  TrainOptions o;
  o.loss = LossKind::mse;
  sr = train(sr, tr, {}, opt, AugmentationPolicy::none(), 9, o);

  const auto c = predict(sr, nn::Tensor<float>::constant({1, 12, 12, 12}, 0.37f));
  CHECK((c.data.array() - 0.37f).abs().maxCoeff() < 1e-3f);

  double sr_err = 0, up_err = 0, cycle_err = 0, base_cycle = 0;
  nn::NoGradGuard guard;
  for (const auto& s : te) {
    const auto out = predict(sr, s.input);
    const auto up = nn::upsample(nn::constant(s.input), 2)->value;
    sr_err += mae(out, *s.target);
    up_err += mae(up, *s.target);
    cycle_err += mae(nn::avg_pool(nn::constant(out), 2)->value, s.input);
    base_cycle += mae(nn::avg_pool(nn::constant(up), 2)->value, s.input);
  }
  MESSAGE("SR MAE " << sr_err / te.size() << " vs upsampling " << up_err / te.size() << "; cycle " << cycle_err / te.size()
                     << " vs " << base_cycle / te.size());
  CHECK(sr_err < up_err);
  CHECK(cycle_err < base_cycle);
}

TEST_CASE("registration self-consistency") {
  const PhantomSpec spec = default_phantom_spec(4, {16, 16, 16});
  const auto cases = generate_dataset(spec, 12, 300);
  std::vector<Sample> tr;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Volume3D& mov = cases[i].modality("T1");
    // Every fifth pair is identical so the net sees the zero-field solution.
    const Volume3D& fix = cases[i % 5 == 0 ? i : (i + 1) % cases.size()].modality("T1");
    const Volume3D zm = zscore(mov), zf = zscore(fix);
    Sample s;
    s.id = cases[i].meta.id;
    s.input = to_tensor({&zm, &zf});
    tr.push_back(std::move(s));
  }
  OptimizerConfig opt;
  opt.epochs = 12;
  opt.steps_per_epoch = 20;
  TrainOptions o;
  o.loss = LossKind::registration;
  const TrainedModel reg = train(build_registration_net(8, 3), tr, {}, opt, AugmentationPolicy::none(), 11, o);
  const Volume3D& v = cases[3].modality("T1");
  const auto field = register_pair(reg, v, v);
  CHECK(field.shape == nn::Shape{3, 16, 16, 16});
  const double mean_mag = double(field.data.colwise().norm().mean());
  MESSAGE("self-registration mean |u| = " << mean_mag);
  CHECK(mean_mag < 0.1);
  // Distinct pairs still produce a non-trivial field.
  const auto moved = register_pair(reg, cases[1].modality("T1"), cases[2].modality("T1"));
  CHECK(double(moved.data.colwise().norm().mean()) > 0.01);
  CHECK_THROWS_AS(register_pair(reg, v, avg_pool(v, 2)), DataError);
}

TEST_CASE("autoencoder encode") {
  const TrainedModel ae = build_autoencoder(6, {16, 16, 16}, 2);
  const auto x = random_input({1, 16, 16, 16}, 12);
  const Eigen::VectorXf a = encode(ae, x), b = encode(ae, x);
  CHECK(a.size() == 6);
  CHECK(a == b);
  CHECK(a.allFinite());
  CHECK_THROWS_AS(encode(ae, random_input({1, 24, 16, 16}, 13)), DataError);
}

TEST_CASE("zero epochs leave the model unchanged") {
  auto tr = phantom_samples(2, 4, {16, 16, 16}, 400);
  const TrainedModel m = build_dpn(small_dpn(2, 2, 5));
  OptimizerConfig opt;
  opt.epochs = 0;
  const TrainedModel t = train(m, tr, {}, opt, AugmentationPolicy{}, 1);
  CHECK(t.net.state() == m.net.state());
  CHECK(t.training_log.empty());
}

TEST_CASE("training is reproducible and keeps the best epoch") {
  auto tr = phantom_samples(4, 4, {16, 16, 16}, 500);
  auto va = phantom_samples(2, 4, {16, 16, 16}, 501);
  OptimizerConfig opt;
  opt.epochs = 3;
  opt.steps_per_epoch = 4;
  const TrainedModel a = train(build_dpn(small_dpn(3, 2, 5)), tr, va, opt, AugmentationPolicy{}, 42);
  const TrainedModel b = train(build_dpn(small_dpn(3, 2, 5)), tr, va, opt, AugmentationPolicy{}, 42);
  REQUIRE(a.training_log.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.training_log[i].loss == b.training_log[i].loss);
    CHECK(a.training_log[i].val_score == b.training_log[i].val_score);
  }
  CHECK(a.net.state() == b.net.state());
  double best = -1;
  for (const auto& e : a.training_log) best = std::max(best, e.val_score);
  CHECK(a.training_log[std::size_t(a.best_epoch - 1)].val_score == best);
  CHECK(mean_dice(a, va) == doctest::Approx(best));
  CHECK(a.weights.labels() == 4);
}

TEST_CASE("non-finite loss aborts with context") {
  auto tr = phantom_samples(1, 4, {16, 16, 16}, 600);
  tr[0].input.data(0, 5) = std::numeric_limits<float>::quiet_NaN();
  OptimizerConfig opt;
  opt.epochs = 1;
  opt.steps_per_epoch = 1;
  try {
    train(build_dpn(small_dpn(2, 2, 5)), tr, {}, opt, AugmentationPolicy::none(), 1);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch 1, step 1") != std::string::npos);
  }
}

TEST_CASE("training rejects inconsistent data") {
  auto tr = phantom_samples(2, 4, {16, 16, 16}, 700);
  OptimizerConfig opt;
  opt.epochs = 1;
  opt.steps_per_epoch = 1;
  CHECK_THROWS_AS(train(build_dpn(small_dpn(2, 2, 14)), tr, {}, opt, {}, 1), DataError);  // 5 classes vs 14
  CHECK_THROWS_AS(train(build_dpn(small_dpn(2, 1, 5)), tr, {}, opt, {}, 1), DataError);   // channels
  auto odd = phantom_samples(1, 4, {20, 20, 20}, 701);
  CHECK_THROWS_AS(train(build_dpn(small_dpn(2, 2, 5)), odd, {}, opt, {}, 1), DataError);
  opt.learning_rate = 0;
  CHECK_THROWS_AS(train(build_dpn(small_dpn(2, 2, 5)), tr, {}, opt, {}, 1), DataError);
}

TEST_CASE("augmentation keeps labels consistent with the image") {
  auto s = phantom_samples(1, 6, {24, 24, 24}, 800).front();
  // Replace the image with the label map so geometric agreement is visible.
  for (Eigen::Index v = 0; v < s.input.data.cols(); ++v) s.input.data(0, v) = float(s.labels->data(v));
  AugmentationPolicy p;
  p.probability = 1.0;
  p.contrast_range = p.brightness_range = p.noise_sigma_max = 0.0;
  p.rotation_degrees = 15;
  std::mt19937_64 rng(3);
  std::set<int> allowed;
  for (Eigen::Index v = 0; v < s.labels->data.size(); ++v) allowed.insert(s.labels->data(v));
  for (int t = 0; t < 5; ++t) {
    const Sample a = augment(s, p, rng);
    CHECK(a.labels->schema == s.labels->schema);
    std::int64_t agree = 0, changed = 0;
    for (Eigen::Index v = 0; v < a.labels->data.size(); ++v) {
      CHECK(allowed.count(a.labels->data(v)) == 1);
      agree += std::lround(a.input.data(0, v)) == a.labels->data(v);
      changed += a.labels->data(v) != s.labels->data(v);
    }
    CHECK(double(agree) / double(a.labels->data.size()) > 0.9);
    CHECK(changed > 0);
  }
  const Sample same = augment(s, AugmentationPolicy::none(), rng);
  CHECK(same.input.data == s.input.data);
  p.rotation_degrees = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(augment(s, p, rng), DataError);
}

TEST_CASE("checkpoint round trip") {
  auto tr = phantom_samples(2, 4, {16, 16, 16}, 900);
  OptimizerConfig opt;
  opt.epochs = 2;
  opt.steps_per_epoch = 2;
  const TrainedModel m = train(build_dpn(small_dpn(2, 2, 5)), tr, tr, opt, AugmentationPolicy::none(), 3);
  const auto path = (std::filesystem::temp_directory_path() / "deepthal_ckpt_test.bin").string();
  save_model(m, path);
  const TrainedModel l = load_model(path);
  CHECK(l.net.state() == m.net.state());
  CHECK(l.training_log.size() == m.training_log.size());
  CHECK(l.training_log.back().val_score == m.training_log.back().val_score);
  CHECK(l.schema == m.schema);
  CHECK(l.weights.w == m.weights.w);
  CHECK(predict(l, tr[0].input).data == predict(m, tr[0].input).data);

  {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    f << "x";
  }
  CHECK_THROWS_AS(load_model(path), DataError);
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_model(path), DataError);
  std::filesystem::remove(path);
}
