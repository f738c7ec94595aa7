#include "doctest.h"

#include "deepthal/phantom.hpp"
#include "deepthal/preprocess.hpp"

#include <random>

using namespace deepthal;

namespace {

HeadPhantomSpec small_head() {
  HeadPhantomSpec hs;
  hs.hr_grid = {128, 128, 128};
  hs.thalamus = default_phantom_spec(13, {32, 32, 32});
  hs.left_box = {{32, 48, 48}, {32, 32, 32}};
  hs.right_box = {{64, 48, 48}, {32, 32, 32}};
  return hs;
}

const HeadPhantom& head() {
  static const HeadPhantom h = generate_head(small_head(), 11);
  return h;
}

double std_dev(const Eigen::ArrayXf& a) {
  const Eigen::ArrayXd d = a.cast<double>();
  return std::sqrt((d - d.mean()).square().mean());
}

double correlation(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
  const Eigen::ArrayXd x = a - a.mean(), y = b - b.mean();
  return (x * y).sum() / std::sqrt(x.square().sum() * y.square().sum());
}

}  // namespace

TEST_CASE("noise estimate and denoising") {
  const Volume3D clean = head().t1_mni_std;
  CHECK(estimate_noise_sigma(clean) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK((denoise(clean).data - clean.data).abs().maxCoeff() < 1e-3f);

  Volume3D c(Dims{12, 12, 12});
  c.data.setConstant(0.7f);
  CHECK((denoise(c).data == c.data).all());

  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0, 0.1f);
  Volume3D noisy = clean;
  for (Eigen::Index i = 0; i < noisy.data.size(); ++i) noisy.data(i) += n(rng);
  CHECK(estimate_noise_sigma(noisy) == doctest::Approx(0.1).epsilon(0.1));
  const Volume3D den = denoise(noisy);
  const double residual = std_dev(den.data - clean.data);
  MESSAGE("residual std " << residual);
  CHECK(residual < 0.1);
  CHECK(residual < 0.6 * std_dev(noisy.data - clean.data));

  // Pure noise: the variance never grows.
  Volume3D pure(Dims{24, 24, 24});
  for (Eigen::Index i = 0; i < pure.data.size(); ++i) pure.data(i) = n(rng);
  CHECK(std_dev(denoise(pure).data) <= std_dev(pure.data));
  DenoiseParams bad;
  bad.search_radius = 0;
  CHECK_THROWS_AS(denoise(pure, bad), DataError);
}

TEST_CASE("bias field recovery") {
  const Volume3D clean = head().t1_mni_std;
  const Dims d = clean.dims;
  Volume3D truth = clean, biased = clean;
  for (int x = 0; x < d[0]; ++x)
    for (int y = 0; y < d[1]; ++y)
      for (int z = 0; z < d[2]; ++z) {
        const double u = 2.0 * x / (d[0] - 1) - 1, v = 2.0 * y / (d[1] - 1) - 1, w = 2.0 * z / (d[2] - 1) - 1;
        const double f = 1.0 + 0.15 * u + 0.1 * v * v - 0.1 * u * w;
        truth(x, y, z) = float(f);
        biased(x, y, z) = float(clean(x, y, z) * f);
      }
  const BiasResult r = bias_correct(biased);
  const Volume3D icv = head().icv_mask;
  std::vector<double> est, ref;
  for (Eigen::Index i = 0; i < icv.data.size(); ++i)
    if (icv.data(i) > 0) {
      est.push_back(r.field.data(i));
      ref.push_back(truth.data(i));
    }
  const double corr = correlation(Eigen::Map<Eigen::ArrayXd>(est.data(), Eigen::Index(est.size())),
                                  Eigen::Map<Eigen::ArrayXd>(ref.data(), Eigen::Index(ref.size())));
  MESSAGE("field correlation " << corr);
  CHECK(corr > 0.95);
  CHECK(r.warnings.empty());

  // Bias-free input stays within 2% over the head; the masked mean is kept.
  const BiasResult same = bias_correct(clean, &icv);
  double worst = 0, mean_in = 0, mean_out = 0;
  int count = 0;
  for (Eigen::Index i = 0; i < clean.data.size(); ++i)
    if (icv.data(i) > 0) {
      worst = std::max(worst, double(std::abs(same.corrected.data(i) - clean.data(i)) / clean.data(i)));
      mean_in += clean.data(i);
      mean_out += same.corrected.data(i);
      ++count;
    }
  MESSAGE("bias-free worst relative change " << worst);
  CHECK(worst < 0.02);
  CHECK(mean_out / count == doctest::Approx(mean_in / count).epsilon(1e-5));

  Volume3D c(Dims{10, 10, 10});
  c.data.setConstant(2.0f);
  CHECK((bias_correct(c).corrected.data - c.data).abs().maxCoeff() < 1e-6f);

  Volume3D neg = clean;
  neg.data -= 0.5f;
  const BiasResult shifted = bias_correct(neg, &icv);
  CHECK(shifted.warnings.size() == 1);
  CHECK(shifted.corrected.data.allFinite());
}

TEST_CASE("affine registration") {
  const Volume3D tmpl = head().t1_mni_std;
  const AffineResult self = affine_to_template(tmpl, tmpl);
  CHECK(self.transform.distance_to_identity() < 0.01);

  HeadPhantomSpec hs = small_head();
  hs.shift = {3.0, -2.0, 1.0};
  hs.noise_sigma = 0.0;
  const HeadPhantom moved = generate_head(hs, 11);
  const AffineResult r = affine_to_template(moved.t1_native, tmpl);
  MESSAGE("recovered t " << r.transform.t.transpose() << " A-I max " << (r.transform.A - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff());
  // Displacement of every grid corner relative to the true shift.
  double worst = 0;
  for (int cx : {0, 63})
    for (int cy : {0, 63})
      for (int cz : {0, 63}) {
        const Eigen::Vector3d p(cx, cy, cz);
        const Eigen::Vector3d q = r.transform.apply(p, tmpl.dims, moved.t1_native.dims);
        worst = std::max(worst, (q - p - Eigen::Vector3d(3, -2, 1)).norm());
      }
  MESSAGE("worst corner error " << worst);
  CHECK(worst < 0.5);
  CHECK(r.trace.back() >= r.trace.front());
  CHECK(r.image.space == tmpl.space);

  // Labels follow by nearest neighbour and keep schema membership.
  const LabelMap lab = downsample_labels(head().labels_mni_hr, 2);
  const LabelMap moved_lab = apply_affine(lab, r.transform, tmpl);
  CHECK(moved_lab.schema == lab.schema);
  CHECK_NOTHROW(moved_lab.validate());

  Volume3D broken = moved.t1_native;
  broken.data(0) = std::numeric_limits<float>::quiet_NaN();
  try {
    affine_to_template(broken, tmpl);
    FAIL("expected rejection");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("objective trace") != std::string::npos);
  }
}

TEST_CASE("intensity normalisation") {
  std::mt19937_64 rng(5);
  Volume3D v(Dims{16, 16, 16});
  std::normal_distribution<float> n(0, 0.02f);
  const float levels[3] = {0.2f, 0.5f, 0.9f};
  for (Eigen::Index i = 0; i < v.data.size(); ++i) v.data(i) = levels[i % 3] + n(rng);
  const auto a = intensity_anchors(v, 3);
  REQUIRE(a.size() == 3);
  for (int c = 0; c < 3; ++c) CHECK(a[std::size_t(c)] == doctest::Approx(levels[c]).epsilon(0.05));

  const Volume3D same = normalize_intensity(v, 3, a);
  CHECK((same.data - v.data).abs().maxCoeff() < 1e-6f);

  const Volume3D mapped = normalize_intensity(v, 3, {1.0, 2.0, 3.0});
  std::vector<Eigen::Index> order(std::size_t(v.data.size()));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return v.data(x) < v.data(y); });
  for (std::size_t i = 1; i < order.size(); ++i) CHECK(mapped.data(order[i]) >= mapped.data(order[i - 1]));

  Volume3D flat(Dims{8, 8, 8});
  flat.data.setConstant(1.0f);
  CHECK_THROWS_AS(intensity_anchors(flat, 3), DataError);
  CHECK_THROWS_AS(piecewise_linear(v, {1, 1}, {0, 1}), DataError);
}

TEST_CASE("morphology helpers") {
  Volume3D m(Dims{7, 7, 7});
  for (int x = 1; x < 6; ++x)
    for (int y = 1; y < 6; ++y)
      for (int z = 1; z < 6; ++z) m(x, y, z) = 1.0f;
  m(3, 3, 3) = 0.0f;  // enclosed hole
  m(0, 0, 0) = 1.0f;  // separate speck
  const Volume3D filled = fill_holes(m);
  CHECK(filled(3, 3, 3) == 1.0f);
  const Volume3D big = largest_component(m);
  CHECK(big(0, 0, 0) == 0.0f);
  CHECK(big.data.sum() == doctest::Approx(124.0));
}

TEST_CASE("intracranial volume of the head phantom") {
  const HeadPhantom& h = head();
  const IcvResult r = extract_icv(h.t1_mni_std);
  MESSAGE("icv " << r.mm3 << " truth " << h.icv_mm3);
  CHECK(std::abs(r.mm3 - h.icv_mm3) / h.icv_mm3 < 0.05);
  // Noisy, biased native acquisition after denoising.
  HeadPhantomSpec hs = small_head();
  hs.bias_strength = 0.2;
  const HeadPhantom n = generate_head(hs, 11);
  const IcvResult rn = extract_icv(denoise(n.t1_native));
  MESSAGE("icv native " << rn.mm3);
  CHECK(std::abs(rn.mm3 - h.icv_mm3) / h.icv_mm3 < 0.05);
}
