#include "doctest.h"

#include "deepthal/phantom.hpp"

#include <cmath>
#include <filesystem>
#include <set>

using namespace deepthal;
namespace fs = std::filesystem;

TEST_CASE("same spec and seed give bit-identical bundles") {
  PhantomSpec spec = default_phantom_spec(13, {32, 32, 32});
  CaseBundle a = generate_case(spec, 11);
  CaseBundle b = generate_case(spec, 11);
  CHECK((a.labels->data == b.labels->data).all());
  for (const auto& [name, v] : a.modalities) CHECK((v.data == b.modality(name).data).all());
  CHECK(a.meta.age == b.meta.age);
}

TEST_CASE("noiseless undeformed phantom is piecewise constant at the contrast means") {
  PhantomSpec spec = default_phantom_spec(13, {32, 32, 32});
  spec.noise_sigma = 0;
  spec.deform_amplitude = 0;
  CaseBundle c = generate_case(spec, 3);
  for (const auto& [name, v] : c.modalities) {
    const auto& mean = spec.contrast.at(name).mean;
    for (Eigen::Index i = 0; i < v.data.size(); ++i) REQUIRE(v.data(i) == float(mean[c.labels->data(i)]));
  }
}

TEST_CASE("four-nucleus phantom has exactly five label values") {
  CaseBundle c = generate_case(default_phantom_spec(4), 1);
  std::set<int> values(c.labels->data.data(), c.labels->data.data() + c.labels->data.size());
  CHECK(values == std::set<int>{0, 1, 2, 3, 4});
  c.validate();
}

TEST_CASE("every structure is present with at least 8 voxels") {
  for (int n : {4, 8, 12, 13}) {
    CaseBundle c = generate_case(default_phantom_spec(n), 7);
    c.labels->validate();
    const auto h = c.labels->histogram();
    for (int l = 1; l <= n; ++l) CHECK(h[std::size_t(l)] >= 8);
  }
}

TEST_CASE("overlapping seeds are rejected") {
  PhantomSpec spec = default_phantom_spec(4);
  spec.centers = {{{20, 20, 20}}, {{20.2, 20, 20}}, {{28, 24, 24}}, {{24, 30, 24}}};
  CHECK_THROWS_AS(build_layout(spec), DataError);
  spec.contrast.at("T1").mean.pop_back();
  CHECK_THROWS_AS(spec.validate(), DataError);
}

TEST_CASE("dataset cases differ when deformation is on") {
  PhantomSpec spec = default_phantom_spec(13, {32, 32, 32});
  auto cases = generate_dataset(spec, 40, 5);
  CHECK(cases.size() == 40);
  int identical = 0;
  for (std::size_t i = 1; i < cases.size(); ++i)
    identical += (cases[i].labels->data == cases[0].labels->data).all();
  CHECK(identical < 39);
  CHECK(cases[3].meta.id == "case3");
}

TEST_CASE("split sizes") {
  auto s = split_dataset(40, 0.8, 0.1, 0.1);
  CHECK(s.train.size() == 32);
  CHECK(s.val.size() == 4);
  CHECK(s.test.size() == 4);
  auto p = split_dataset(150, 0.8, 10.0 / 150, 20.0 / 150);
  CHECK(p.train.size() == 120);
  CHECK(p.val.size() == 10);
  CHECK(p.test.size() == 20);
  CHECK(double(p.val.size()) / 150 == doctest::Approx(0.0667).epsilon(1e-3));
}

namespace {

// Expected accuracy of nearest-mean classification of each voxel's clean
// value under Gaussian noise (the Bayes rule for equal priors and variances).
double bayes_accuracy(const PhantomSpec& spec, const CaseBundle& clean, const std::string& modality) {
  std::vector<double> means = spec.contrast.at(modality).mean;
  std::vector<double> sorted = means;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  auto cdf = [&](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  const LabelMap& lab = *clean.labels;
  double acc = 0;
  for (Eigen::Index i = 0; i < lab.data.size(); ++i) {
    const double m = means[lab.data(i)];
    // Tied means share one decision interval; split credit evenly among them.
    const auto it = std::find(sorted.begin(), sorted.end(), m);
    const std::size_t k = std::size_t(it - sorted.begin());
    const double lo = k == 0 ? -1e300 : 0.5 * (sorted[k - 1] + m);
    const double hi = k + 1 == sorted.size() ? 1e300 : 0.5 * (sorted[k + 1] + m);
    const int ties = int(std::count(means.begin(), means.end(), m));
    acc += (cdf((hi - m) / spec.noise_sigma) - cdf((lo - m) / spec.noise_sigma)) / ties;
  }
  return acc / double(lab.data.size());
}

}  // namespace

TEST_CASE("increasing contrast separation never lowers Bayes accuracy") {
  PhantomSpec base = default_phantom_spec(13, {32, 32, 32});
  base.noise_sigma = 0.05;
  base.deform_amplitude = 0;
  double previous = 0;
  for (double k : {0.25, 0.5, 1.0, 2.0, 4.0}) {
    PhantomSpec s = base;
    auto& mean = s.contrast.at("WMn").mean;
    const double centre = 0.5;
    for (double& m : mean) m = centre + k * (m - centre);
    PhantomSpec noiseless = s;
    noiseless.noise_sigma = 0;
    const double acc = bayes_accuracy(s, generate_case(noiseless, 1), "WMn");
    CHECK(acc >= previous - 1e-12);
    previous = acc;
  }
}

TEST_CASE("head phantom geometry") {
  HeadPhantomSpec hs;
  hs.hr_grid = {128, 96, 96};
  hs.thalamus = default_phantom_spec(13, {32, 32, 32});
  hs.left_box = {{32, 32, 32}, {32, 32, 32}};
  hs.right_box = {{64, 32, 32}, {32, 32, 32}};
  HeadPhantom h = generate_head(hs, 3);
  CHECK(h.t1_native.dims == Dims{64, 48, 48});
  CHECK(h.t1_mni_hr.space == Space::mni_hr);
  CHECK(h.left_labels.histogram()[6] > 0);
  CHECK(h.right_labels.histogram()[6] > 0);
  // The right crop mirrored looks like a left thalamus.
  CHECK(mirror_lr(h.right_labels).side == Side::left);
  CHECK(h.icv_mm3 > 0);
}

TEST_CASE("dataset directory round trip") {
  const fs::path dir = fs::temp_directory_path() / "deepthal_test_dataset";
  fs::remove_all(dir);
  const PhantomSpec spec = default_phantom_spec(4, {16, 16, 16});
  auto cases = generate_dataset(spec, 3, 5);
  cases[1].labels.reset();
  cases[2].meta.pseudo_label = true;
  write_dataset(dir.string(), cases, {case_seed(5, 0), case_seed(5, 1), case_seed(5, 2)});
  const auto back = read_dataset(dir.string());
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].meta.id == cases[i].meta.id);
    CHECK(back[i].meta.age == cases[i].meta.age);
    CHECK(back[i].meta.sex == cases[i].meta.sex);
    CHECK(back[i].meta.side == cases[i].meta.side);
    CHECK(back[i].meta.pseudo_label == cases[i].meta.pseudo_label);
    CHECK((back[i].modality("WMn").data == cases[i].modality("WMn").data).all());
    CHECK(bool(back[i].labels) == bool(cases[i].labels));
  }
  CHECK((back[0].labels->data == cases[0].labels->data).all());
  CHECK_THROWS_AS(read_dataset((dir / "missing").string()), DataError);
  cases[1].meta.id = cases[0].meta.id;
  CHECK_THROWS_AS(write_dataset((dir / "dup").string(), cases), DataError);
  fs::remove_all(dir);
}
