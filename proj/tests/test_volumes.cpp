#include "doctest.h"

#include "deepthal/volumes.hpp"

#include <filesystem>
#include <random>

using namespace deepthal;

namespace {

Volume3D ramp(Dims d, Space s = Space::mni_hr) {
  Volume3D v(d, s == Space::mni_hr ? kHighResSpacing : Spacing{1, 1, 1}, s);
  for (int x = 0; x < d[0]; ++x)
    for (int y = 0; y < d[1]; ++y)
      for (int z = 0; z < d[2]; ++z) v(x, y, z) = float(x * 10000 + y * 100 + z);
  return v;
}

Volume3D random_volume(Dims d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(3.0f, 2.0f);
  Volume3D v(d);
  for (Eigen::Index i = 0; i < v.data.size(); ++i) v.data(i) = n(rng);
  return v;
}

}  // namespace

TEST_CASE("crop_roi extents, identity crop and index arithmetic") {
  Volume3D v = ramp({40, 40, 40});
  Volume3D c = crop_roi(v, CropBox{{10, 20, 30}, {4, 4, 4}});
  CHECK(c.dims == Dims{4, 4, 4});
  CHECK(c.space == Space::crop);
  CHECK(c.origin == Dims{10, 20, 30});
  for (int x = 0; x < 4; ++x)
    for (int y = 0; y < 4; ++y)
      for (int z = 0; z < 4; ++z) CHECK(c(x, y, z) == float((10 + x) * 10000 + (20 + y) * 100 + 30 + z));

  Volume3D full = crop_roi(v, CropBox{{0, 0, 0}, v.dims});
  CHECK(full.data.isApprox(v.data));
  CHECK((full.data == v.data).all());

  CHECK_THROWS_AS(crop_roi(v, CropBox{{38, 0, 0}, {4, 4, 4}}), DataError);
  CHECK_THROWS_AS(crop_roi(ramp({8, 8, 8}, Space::mni_std), CropBox{{0, 0, 0}, {2, 2, 2}}), DataError);
}

TEST_CASE("crop_roi on a full-size template grid") {
  Volume3D v(Dims{362, 434, 362}, kHighResSpacing, Space::mni_hr);
  Volume3D c = crop_roi(v, CropBox{{100, 150, 120}, {76, 91, 79}});
  CHECK(c.dims == Dims{76, 91, 79});
}

TEST_CASE("mirror_lr is an involution and toggles side") {
  Volume3D v = random_volume({5, 4, 3}, 1);
  v.side = Side::left;
  Volume3D m = mirror_lr(v);
  CHECK(m.side == Side::right);
  Volume3D mm = mirror_lr(m);
  CHECK((mm.data == v.data).all());
  CHECK(mm.side == Side::left);

  Volume3D ab(Dims{2, 1, 1});
  ab.data << 1.0f, 2.0f;
  Volume3D ba = mirror_lr(ab);
  CHECK(ba.data(0) == 2.0f);
  CHECK(ba.data(1) == 1.0f);

  LabelMap l(Dims{3, 2, 2}, {1, 1, 1}, Space::crop, Side::right, LabelSchema::thalamus());
  l.data << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
  LabelMap lm = mirror_lr(l);
  CHECK(lm.schema == l.schema);
  CHECK(lm(0, 0, 0) == 9);
  CHECK((mirror_lr(lm).data == l.data).all());
}

TEST_CASE("pad_to_multiple and unpad") {
  Volume3D v = random_volume({76, 91, 79}, 2);
  auto [p, rec] = pad_to_multiple(v, 8);
  CHECK(p.dims == Dims{80, 96, 80});
  Volume3D back = unpad(p, rec);
  CHECK(back.dims == v.dims);
  CHECK((back.data == v.data).all());
  CHECK(back.origin == v.origin);

  Volume3D w = random_volume({8, 16, 24}, 3);
  auto [q, rec2] = pad_to_multiple(w, 8);
  CHECK(rec2.empty());
  CHECK((q.data == w.data).all());

  auto [z, rz] = pad_to_multiple(Volume3D(Dims{3, 3, 3}), 4, PadMode::zero);
  CHECK(z.dims == Dims{4, 4, 4});
  CHECK(rz.after == Dims{1, 1, 1});
  CHECK_THROWS_AS(pad_to_multiple(w, 0), DataError);
}

TEST_CASE("zscore statistics, idempotence and affine invariance") {
  Volume3D v(Dims{2, 1, 1});
  v.data << 0.0f, 2.0f;
  Volume3D z = zscore(v);
  CHECK(z.data(0) == doctest::Approx(-1.0));
  CHECK(z.data(1) == doctest::Approx(1.0));

  Volume3D r = random_volume({10, 9, 8}, 4);
  Volume3D a = zscore(r);
  const double mean = a.data.cast<double>().mean();
  const double sd = std::sqrt((a.data.cast<double>() - mean).square().mean());
  CHECK(std::abs(mean) < 1e-5);
  CHECK(std::abs(sd - 1.0) < 1e-5);
  CHECK((zscore(a).data - a.data).abs().maxCoeff() < 1e-5);

  Volume3D scaled = r;
  scaled.data = r.data * 3.5f - 7.0f;
  CHECK((zscore(scaled).data - a.data).abs().maxCoeff() < 1e-5);

  CHECK_THROWS_AS(zscore(Volume3D(Dims{3, 3, 3})), DataError);
}

TEST_CASE("avg_pool and upsample") {
  Volume3D c(Dims{80, 96, 80});
  c.data.setConstant(4.25f);
  Volume3D p = avg_pool(c, 8);
  CHECK(p.dims == Dims{10, 12, 10});
  CHECK((p.data - 4.25f).abs().maxCoeff() < 1e-6);
  CHECK(p.spacing == Spacing{8, 8, 8});

  Volume3D b(Dims{2, 2, 2});
  for (int i = 0; i < 8; ++i) b.data(i) = float(i);
  CHECK(avg_pool(b, 2).data(0) == doctest::Approx(3.5));
  CHECK_THROWS_AS(avg_pool(Volume3D(Dims{3, 4, 4}), 2), DataError);

  Volume3D u = upsample(p, 2, Interp::nearest);
  CHECK(u.dims == Dims{20, 24, 20});
  CHECK((upsample(p, 2).data - 4.25f).abs().maxCoeff() < 1e-6);

  // A constant region larger than the block survives pool followed by nearest upsample.
  Volume3D half(Dims{8, 4, 4});
  for (int x = 0; x < 8; ++x)
    for (int y = 0; y < 4; ++y)
      for (int z = 0; z < 4; ++z) half(x, y, z) = x < 4 ? 1.0f : 5.0f;
  Volume3D rt = upsample(avg_pool(half, 2), 2, Interp::nearest);
  CHECK((rt.data == half.data).all());
}

TEST_CASE("label resampling keeps schema membership") {
  LabelMap l(Dims{4, 4, 4}, {1, 1, 1}, Space::mni_std, Side::none, LabelSchema::first(4));
  for (Eigen::Index i = 0; i < l.data.size(); ++i) l.data(i) = std::uint8_t(i % 5);
  LabelMap up = upsample(l, 2);
  CHECK(up.dims == Dims{8, 8, 8});
  up.validate();
  LabelMap down = downsample_labels(up, 2);
  CHECK((down.data == l.data).all());
  l.data(0) = 9;
  CHECK_THROWS_AS(l.validate(), DataError);
}

TEST_CASE("schema has the thirteen structures") {
  const auto& s = LabelSchema::thalamus();
  CHECK(s.size() == 13);
  CHECK(s.name(6) == "Pulvinar Nucleus");
  CHECK(s.name(13) == "Intermediate Space");
  CHECK(s.ids().front() == 1);
  CHECK(LabelSchema::first(4).max_id() == 4);
}

TEST_CASE("raw + header round trip is bit exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "deepthal_test_volumes";
  fs::create_directories(dir);
  Volume3D v = random_volume({5, 6, 7}, 9);
  v.spacing = {0.7, 1.1, 0.3333333333333333};
  v.side = Side::left;
  v.origin = {3, -2, 1};
  write_volume((dir / "v").string(), v);
  Volume3D r = read_volume((dir / "v").string());
  CHECK((r.data == v.data).all());
  CHECK(r.spacing == v.spacing);
  CHECK(r.side == Side::left);
  CHECK(r.origin == v.origin);

  LabelMap l(Dims{3, 3, 3}, kHighResSpacing, Space::mni_hr, Side::none, LabelSchema::first(5));
  for (Eigen::Index i = 0; i < l.data.size(); ++i) l.data(i) = std::uint8_t(i % 6);
  write_labels((dir / "l").string(), l);
  LabelMap rl = read_labels((dir / "l").string());
  CHECK((rl.data == l.data).all());
  CHECK(rl.schema.size() == 5);
  CHECK_THROWS_AS(read_volume((dir / "l").string()), DataError);
  CHECK_THROWS_AS(read_volume((dir / "missing").string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("case bundle validation") {
  CaseBundle b;
  b.meta.id = "c0";
  b.modalities["T1"] = Volume3D(Dims{4, 4, 4}, {1, 1, 1}, Space::crop, Side::left);
  b.modalities["T2"] = Volume3D(Dims{4, 4, 5}, {1, 1, 1}, Space::crop, Side::left);
  CHECK_THROWS_AS(b.validate(), DataError);
  b.modalities["T2"] = b.modalities["T1"];
  CHECK_THROWS_AS(b.validate(), DataError);  // side missing in meta
  b.meta.side = Side::left;
  b.validate();
}
