#include "doctest.h"

#include "deepthal/phantom.hpp"
#include "deepthal/report.hpp"

#include "json.hpp"

#include <random>

using namespace deepthal;

namespace {

LabelMap empty_map(Side side) { return LabelMap({8, 8, 8}, kHighResSpacing, Space::crop, side, LabelSchema::thalamus()); }

// Population whose structure volumes shrink with age; `noise` is the
// segmentation error added on top of the biological spread.
std::vector<NormativeSubject> population(int n, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::mt19937_64 bio(99);  // shared anatomy across models
  std::uniform_real_distribution<double> age(20, 80);
  std::normal_distribution<double> spread(0, 0.02), err(0, noise);
  std::vector<NormativeSubject> out;
  for (int i = 0; i < n; ++i) {
    NormativeSubject s;
    s.id = "s" + std::to_string(i);
    s.age = age(bio);
    s.sex = i % 2 ? "F" : "M";
    for (int k = 0; k < 10; ++k) {
      const double v = (0.5 + 0.05 * k) * (1.0 - 0.003 * (s.age - 20)) + spread(bio);
      s.volumes["S" + std::to_string(k) + "|left"] = v + err(rng);
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("volumes from label maps") {
  const VolumetryReport e = compute_volumes(empty_map(Side::left), empty_map(Side::right), kHighResSpacing);
  CHECK(e.rows.size() == 28);
  for (const auto& r : e.rows) {
    CHECK(r.mm3 == 0.0);
    CHECK(!r.asymmetry);
  }

  LabelMap l = empty_map(Side::left);
  for (int i = 0; i < 100; ++i) l.data(i) = 6;
  const VolumetryReport r = compute_volumes(l, empty_map(Side::right), kHighResSpacing);
  CHECK(r.row(6, Side::left).mm3 == 12.5);
  CHECK(r.row(6, Side::left).voxels == 100);
  CHECK(r.row(kWholeThalamusId, Side::left).mm3 == 12.5);
  CHECK(*r.row(6, Side::left).asymmetry == 200.0);
  CHECK(*r.row(6, Side::right).asymmetry == 200.0);

  CHECK_THROWS_AS(compute_volumes(l, l, {0.5, 0.0, 0.5}), DataError);
  CHECK_THROWS_AS(compute_volumes(l, l, {-1.0, 1.0, 1.0}), DataError);
  LabelMap other = l;
  other.schema = LabelSchema::first(4);
  CHECK_THROWS_AS(compute_volumes(l, other, kHighResSpacing), DataError);

  // Sum of parts equals the whole on a phantom, and every row equals direct counting.
  const CaseBundle c = generate_case(default_phantom_spec(13, {32, 32, 32}), 3);
  const LabelMap pl = *c.labels;
  LabelMap pr = mirror_lr(pl);
  pr.side = Side::right;
  const VolumetryReport v = compute_volumes(pl, pr, pl.spacing);
  for (Side side : {Side::left, Side::right}) {
    double sum = 0;
    std::int64_t count = 0;
    for (int id = 1; id <= 13; ++id) {
      sum += v.row(id, side).mm3;
      count += v.row(id, side).voxels;
      const LabelMap& m = side == Side::left ? pl : pr;
      CHECK(v.row(id, side).voxels == (m.data == std::uint8_t(id)).count());
    }
    CHECK(sum == v.row(kWholeThalamusId, side).mm3);
    CHECK(count == v.row(kWholeThalamusId, side).voxels);
    CHECK(count == (pl.data != 0).count());
  }
}

TEST_CASE("asymmetry index") {
  CHECK(*asymmetry(5, 5) == 0.0);
  CHECK(*asymmetry(110, 90) == doctest::Approx(20.0));
  CHECK(!asymmetry(0, 0));
  CHECK(*asymmetry(3, 0) == 200.0);
  CHECK_THROWS_AS(asymmetry(-1, 2), DataError);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1000);
  for (int i = 0; i < 100; ++i) {
    const double a = u(rng), b = u(rng);
    CHECK(*asymmetry(a, b) == -*asymmetry(b, a));
    CHECK(std::abs(*asymmetry(a, b)) <= 200.0);
  }
}

TEST_CASE("ICV normalisation and serialization") {
  LabelMap l = empty_map(Side::left);
  for (int i = 0; i < 80; ++i) l.data(i) = 1;
  VolumetryReport r = compute_volumes(l, empty_map(Side::right), kHighResSpacing);
  r.subject_id = "a,b";
  CHECK_THROWS_AS(r.measures("percent_icv"), DataError);
  CHECK_THROWS_AS(set_icv(r, 0.0), DataError);
  set_icv(r, 1000.0);
  CHECK(*r.row(1, Side::left).percent_icv == doctest::Approx(1.0));

  const auto j = nlohmann::json::parse(report_to_json(r));
  CHECK(j["structures"].size() == 28);
  CHECK(j["structures"][0]["volume_mm3"].get<double>() == 10.0);
  CHECK(j["structures"][1]["asymmetry_index"].is_null());
  CHECK(j["age"].is_null());

  const std::string csv = report_to_csv(r);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 29);
  CHECK(csv.find("\"a,b\",left,1,Anterior Ventral Nucleus,80,10,1,200,none") != std::string::npos);
}

TEST_CASE("normative bounds") {
  // Identical subjects: zero-width bounds everywhere.
  std::vector<NormativeSubject> same;
  for (int i = 0; i < 40; ++i) same.push_back({"s", 20.0 + i, i % 2 ? "F" : "M", {{"x|left", 1.5}}});
  const NormativeModel flat = fit_normative(same);
  for (const auto& [sex, bins] : flat.bounds.at("x|left"))
    for (const auto& b : bins) CHECK(b.width() == 0.0);

  const auto pop = population(60, 0.0, 1);
  const NormativeModel m = fit_normative(pop);
  CHECK_NOTHROW(m.validate());
  for (const auto& [key, by_sex] : m.bounds)
    for (const auto& [sex, bins] : by_sex) {
      CHECK(bins.front().age_lo <= m.age_min);
      CHECK(bins.back().age_hi >= m.age_max);
      for (std::size_t i = 1; i < bins.size(); ++i) CHECK(bins[i].age_lo <= bins[i - 1].age_hi);
    }
  NormativeParams wide;
  wide.lower_percentile = 1;
  wide.upper_percentile = 99;
  const NormativeModel w = fit_normative(pop, wide);
  for (const auto& [key, by_sex] : m.bounds)
    for (const auto& [sex, bins] : by_sex)
      for (std::size_t i = 0; i < bins.size(); ++i) {
        CHECK(w.bounds.at(key).at(sex)[i].lower <= bins[i].lower);
        CHECK(w.bounds.at(key).at(sex)[i].upper >= bins[i].upper);
      }

  std::vector<NormativeSubject> few(pop.begin(), pop.begin() + 30);
  CHECK_THROWS_AS(fit_normative(few), DataError);
  auto mixed = pop;
  mixed[3].volumes.erase(mixed[3].volumes.begin());
  CHECK_THROWS_AS(fit_normative(mixed), DataError);

  const NormativeModel back = normative_from_json(normative_to_json(m));
  CHECK(back.bounds.at("S3|left").at("F")[2].upper == m.bounds.at("S3|left").at("F")[2].upper);
  CHECK_THROWS_AS(normative_from_json("{}"), DataError);

  // Flagging against the model.
  LabelMap l = empty_map(Side::left);
  VolumetryReport r = compute_volumes(l, empty_map(Side::right), kHighResSpacing);
  r.age = 50;
  r.sex = "F";
  NormativeParams mm;
  mm.measure = "mm3";
  std::vector<NormativeSubject> ref;
  for (int i = 0; i < 40; ++i)
    ref.push_back({"r", 20.0 + i, i % 2 ? "F" : "M", {{std::string(kWholeThalamusName) + "|left", 10.0 + i % 5}}});
  apply_normative(r, fit_normative(ref, mm));
  CHECK(r.row(kWholeThalamusId, Side::left).flag == NormFlag::below);
  CHECK(r.row(1, Side::left).flag == NormFlag::none);
}

TEST_CASE("dispersion comparison") {
  NormativeParams p;
  p.measure = "mm3";
  const NormativeModel clean = fit_normative(population(60, 0.005, 2), p);
  const NormativeModel noisy = fit_normative(population(60, 0.05, 3), p);
  const DispersionComparison d = compare_dispersion(clean, noisy);
  MESSAGE("widths " << d.mean_width_a << " vs " << d.mean_width_b << " p " << d.overall->p_value);
  CHECK(d.structures.size() == 10);
  CHECK(d.mean_width_a < d.mean_width_b);
  REQUIRE(d.overall);
  CHECK(d.overall->p_value < 0.05);
  CHECK(d.significant >= 5);

  const DispersionComparison self = compare_dispersion(clean, clean);
  CHECK(self.mean_width_a == self.mean_width_b);
  CHECK(!self.overall);
  CHECK(self.significant == 0);
}
