#include "deepthal/phantom.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

namespace deepthal {

const std::array<double, 13>& reference_nucleus_voxels() {
  static const std::array<double, 13> v{574, 1440, 493, 4518, 1918, 7294, 463, 427, 704, 3188, 124, 112, 11636};
  return v;
}

namespace {

// Nucleus centres in envelope-normalized coordinates (x medial-lateral,
// y posterior-anterior, z inferior-superior), loosely anatomical.
const std::array<std::array<double, 3>, 12> kLayout{{
    {0.05, 0.72, 0.42},    // anterior ventral
    {0.40, 0.52, -0.12},   // ventral anterior
    {0.50, 0.25, 0.12},    // ventral lateral anterior
    {0.50, -0.05, 0.22},   // ventral lateral posterior
    {0.50, -0.35, -0.22},  // ventral posterior lateral
    {0.10, -0.68, 0.05},   // pulvinar
    {0.62, -0.62, -0.55},  // lateral geniculate
    {0.22, -0.58, -0.62},  // medial geniculate
    {0.02, -0.18, -0.22},  // centromedian
    {-0.45, 0.05, 0.18},   // mediodorsal
    {-0.68, -0.45, 0.50},  // habenular
    {-0.32, 0.45, -0.55},  // mammillothalamic tract
}};

constexpr double kEnvelopePower = 2.5;
const Eigen::Vector3d kSemiAxesFraction{0.26, 0.34, 0.26};

struct Geometry {
  const PhantomSpec& spec;
  const PhantomLayout& layout;

  bool inside_envelope(const Eigen::Vector3d& p) const {
    const Eigen::Vector3d q = (p - layout.center).cwiseQuotient(layout.semi_axes);
    return std::pow(std::abs(q.x()), kEnvelopePower) + std::pow(std::abs(q.y()), kEnvelopePower) +
               std::pow(std::abs(q.z()), kEnvelopePower) <=
           1.0;
  }

  // Label at a continuous point: power-diagram cell, intermediate space
  // within `gap` of a cell boundary (13-structure schema only).
  int label(const Eigen::Vector3d& p) const {
    if (!inside_envelope(p)) return 0;
    const auto& c = layout.centers;
    const auto& w = layout.weights;
    int best = 0, second = -1;
    double s_best = (p - c[0]).squaredNorm() - w[0], s_second = 1e300;
    for (std::size_t l = 1; l < c.size(); ++l) {
      const double s = (p - c[l]).squaredNorm() - w[l];
      if (s < s_best) {
        second = best;
        s_second = s_best;
        best = int(l);
        s_best = s;
      } else if (s < s_second) {
        second = int(l);
        s_second = s;
      }
    }
    if (spec.n_nuclei == 13 && second >= 0) {
      // Distance from p to the bisector of the two best power cells.
      const double dist = (s_second - s_best) / (2.0 * (c[std::size_t(best)] - c[std::size_t(second)]).norm());
      if (dist < spec.gap) return 13;
    }
    return best + 1;
  }
};

std::vector<double> label_counts(const PhantomSpec& spec, const PhantomLayout& layout) {
  Geometry g{spec, layout};
  std::vector<double> counts(std::size_t(spec.n_nuclei + 1), 0.0);
  for (int x = 0; x < spec.grid[0]; ++x)
    for (int y = 0; y < spec.grid[1]; ++y)
      for (int z = 0; z < spec.grid[2]; ++z) counts[std::size_t(g.label(Eigen::Vector3d(x, y, z)))] += 1;
  return counts;
}

// Smooth displacement: a few random Fourier modes per component.
struct Deformation {
  struct Mode {
    Eigen::Vector3d omega;
    double phase;
    double amp;
  };
  std::array<std::vector<Mode>, 3> modes;
  Eigen::Vector3d scale{1, 1, 1};
  Eigen::Vector3d shift{0, 0, 0};
  Eigen::Vector3d center{0, 0, 0};

  Eigen::Vector3d source(const Eigen::Vector3d& p) const {
    Eigen::Vector3d q = center + (p - center).cwiseQuotient(scale) + shift;
    for (int a = 0; a < 3; ++a)
      for (const Mode& m : modes[std::size_t(a)]) q[a] += m.amp * std::sin(m.omega.dot(p) + m.phase);
    return q;
  }
};

Deformation make_deformation(const PhantomSpec& spec, const Eigen::Vector3d& center, std::mt19937_64& rng) {
  Deformation d;
  d.center = center;
  if (spec.deform_amplitude <= 0) return d;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
  const double amp = spec.deform_amplitude;
  const int n_modes = 3;
  const double extent = double(*std::max_element(spec.grid.begin(), spec.grid.end()));
  for (int a = 0; a < 3; ++a)
    for (int k = 0; k < n_modes; ++k) {
      Eigen::Vector3d dir(u(rng), u(rng), u(rng));
      if (dir.norm() < 1e-6) dir = Eigen::Vector3d::UnitX();
      const double wavelength = extent * (0.6 + 0.4 * (u(rng) + 1.0));
      Deformation::Mode m{dir.normalized() * (2 * std::numbers::pi / wavelength), phase(rng),
                          amp / n_modes * (0.5 + 0.25 * (u(rng) + 1.0))};
      d.modes[std::size_t(a)].push_back(m);
    }
  for (int a = 0; a < 3; ++a) {
    d.scale[a] = 1.0 + 0.025 * amp * u(rng);
    d.shift[a] = 0.4 * amp * u(rng);
  }
  return d;
}

ModalityContrast make_contrast(double background, const std::array<double, 13>& nuclei, int n_nuclei) {
  ModalityContrast c;
  c.mean.push_back(background);
  for (int l = 0; l < n_nuclei; ++l) c.mean.push_back(nuclei[std::size_t(l)]);
  c.noise_scale.assign(c.mean.size(), 1.0);
  return c;
}

}  // namespace

std::map<std::string, ModalityContrast> default_contrast(int n_nuclei) {
  // T1: nuclei barely distinguishable (three grey levels), bright white matter.
  const std::array<double, 13> t1{0.62, 0.64, 0.62, 0.64, 0.62, 0.60, 0.62, 0.60, 0.64, 0.60, 0.62, 0.64, 0.66};
  // WMn: nulled white matter, strongly separated nuclei, dark intermediate space.
  const std::array<double, 13> wmn{0.80, 0.45, 0.70, 0.35, 0.60, 0.90, 0.30, 0.55, 0.75, 0.95, 0.40, 0.65, 0.18};
  // T2: low contrast, dark white matter.
  const std::array<double, 13> t2{0.50, 0.54, 0.52, 0.55, 0.51, 0.53, 0.56, 0.50, 0.52, 0.55, 0.54, 0.51, 0.58};
  return {
      {"T1", make_contrast(0.85, t1, n_nuclei)},
      {"T2", make_contrast(0.30, t2, n_nuclei)},
      {"WMn", make_contrast(0.08, wmn, n_nuclei)},
  };
}

PhantomSpec default_phantom_spec(int n_nuclei, Dims grid) {
  PhantomSpec s;
  s.grid = grid;
  s.n_nuclei = n_nuclei;
  s.contrast = default_contrast(n_nuclei);
  return s;
}

void PhantomSpec::validate() const {
  if (n_nuclei < 1 || n_nuclei > 13) throw DataError("phantom: n_nuclei must be in 1..13");
  for (int a = 0; a < 3; ++a)
    if (grid[a] < 8) throw DataError("phantom: grid dims must be >= 8");
  if (!(noise_sigma >= 0) || !(deform_amplitude >= 0) || !(envelope_scale > 0) || !(gap >= 0))
    throw DataError("phantom: noise, deformation, envelope scale and gap must be non-negative");
  if (supersample < 1) throw DataError("phantom: supersample must be >= 1");
  if (contrast.empty()) throw DataError("phantom: no modalities in contrast table");
  for (const auto& [name, c] : contrast)
    if (c.mean.size() != std::size_t(n_nuclei + 1) || c.noise_scale.size() != c.mean.size())
      throw DataError("phantom: contrast table for '" + name + "' must cover labels 0.." + std::to_string(n_nuclei));
  if (!centers.empty() && int(centers.size()) != seeded())
    throw DataError("phantom: expected " + std::to_string(seeded()) + " explicit centres");
}

PhantomLayout build_layout(const PhantomSpec& spec) {
  spec.validate();
  PhantomLayout layout;
  layout.center = Eigen::Vector3d((spec.grid[0] - 1) / 2.0, (spec.grid[1] - 1) / 2.0, (spec.grid[2] - 1) / 2.0);
  layout.semi_axes = Eigen::Vector3d(spec.grid[0], spec.grid[1], spec.grid[2]).cwiseProduct(kSemiAxesFraction) *
                     spec.envelope_scale;
  const int n = spec.seeded();
  if (!spec.centers.empty()) {
    for (const auto& c : spec.centers) layout.centers.emplace_back(c[0], c[1], c[2]);
  } else {
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> jitter(-0.06, 0.06);
    for (int l = 0; l < n; ++l) {
      Eigen::Vector3d q(kLayout[std::size_t(l)][0] + jitter(rng), kLayout[std::size_t(l)][1] + jitter(rng),
                        kLayout[std::size_t(l)][2] + jitter(rng));
      // Squeeze toward the centre so every seed lies inside the super-ellipsoid.
      layout.centers.push_back(layout.center + 0.8 * q.cwiseProduct(layout.semi_axes));
    }
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if ((layout.centers[std::size_t(i)] - layout.centers[std::size_t(j)]).norm() < 1.0)
        throw DataError("phantom: nucleus seeds " + std::to_string(i + 1) + " and " + std::to_string(j + 1) +
                        " overlap");

  // Fit power weights so cell volumes follow the reference ratios.
  const auto& ref = reference_nucleus_voxels();
  double ref_total = 0;
  for (int l = 0; l < n; ++l) ref_total += ref[std::size_t(l)];
  layout.weights.assign(std::size_t(n), 0.0);
  for (int iter = 0; iter < 40; ++iter) {
    const std::vector<double> counts = label_counts(spec, layout);
    double seeded_total = 0;
    for (int l = 1; l <= n; ++l) seeded_total += counts[std::size_t(l)];
    for (int l = 0; l < n; ++l) {
      const double target = std::max(ref[std::size_t(l)] / ref_total * seeded_total, 1.0);
      const double r_target = std::cbrt(3.0 * target / (4.0 * std::numbers::pi));
      const double r_actual = std::cbrt(3.0 * std::max(counts[std::size_t(l + 1)], 0.5) / (4.0 * std::numbers::pi));
      layout.weights[std::size_t(l)] += 0.7 * (r_target * r_target - r_actual * r_actual);
    }
  }
  const std::vector<double> counts = label_counts(spec, layout);
  for (int l = 1; l <= spec.n_nuclei; ++l)
    if (counts[std::size_t(l)] < 8)
      throw DataError("phantom: structure " + std::to_string(l) + " occupies fewer than 8 voxels; enlarge the grid");
  return layout;
}

std::uint64_t case_seed(std::uint64_t base_seed, int i) {
  // splitmix64 over (base, index)
  std::uint64_t z = base_seed + 0x9e3779b97f4a7c15ULL * (std::uint64_t(i) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

CaseBundle generate_case(const PhantomSpec& spec, std::uint64_t seed) {
  return generate_case(spec, build_layout(spec), seed);
}

CaseBundle generate_case(const PhantomSpec& spec, const PhantomLayout& layout, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const Deformation deform = make_deformation(spec, layout.center, rng);
  const Geometry geom{spec, layout};
  const Dims d = spec.grid;
  const int ss = spec.supersample;

  LabelMap labels(d, spec.spacing, Space::crop, Side::left, spec.schema());
  // Fraction of sub-samples falling in each label, per voxel, folded into
  // modality means below.
  std::map<std::string, Volume3D> clean;
  for (const auto& [name, c] : spec.contrast) clean[name] = Volume3D(d, spec.spacing, Space::crop, Side::left);
  std::vector<int> hits(std::size_t(spec.n_nuclei + 1));
  for (int x = 0; x < d[0]; ++x)
    for (int y = 0; y < d[1]; ++y)
      for (int z = 0; z < d[2]; ++z) {
        labels(x, y, z) = std::uint8_t(geom.label(deform.source(Eigen::Vector3d(x, y, z))));
        std::fill(hits.begin(), hits.end(), 0);
        for (int i = 0; i < ss; ++i)
          for (int j = 0; j < ss; ++j)
            for (int k = 0; k < ss; ++k) {
              const Eigen::Vector3d p(x + (i + 0.5) / ss - 0.5, y + (j + 0.5) / ss - 0.5, z + (k + 0.5) / ss - 0.5);
              ++hits[std::size_t(ss == 1 ? labels(x, y, z) : geom.label(deform.source(p)))];
            }
        const double inv = 1.0 / (ss * ss * ss);
        for (auto& [name, vol] : clean) {
          const auto& mean = spec.contrast.at(name).mean;
          double v = 0;
          for (std::size_t l = 0; l < hits.size(); ++l) v += hits[l] * mean[l];
          vol(x, y, z) = float(v * inv);
        }
      }

  CaseBundle b;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& [name, vol] : clean) {
    const auto& scale = spec.contrast.at(name).noise_scale;
    if (spec.noise_sigma > 0)
      for (Eigen::Index i = 0; i < vol.data.size(); ++i)
        vol.data(i) += float(spec.noise_sigma * scale[labels.data(i)] * noise(rng));
    b.modalities[name] = std::move(vol);
  }
  b.labels = std::move(labels);
  std::uniform_real_distribution<double> age(20.0, 80.0);
  b.meta.side = Side::left;
  b.meta.age = std::round(age(rng) * 10.0) / 10.0;
  b.meta.sex = (rng() & 1) ? "F" : "M";
  b.meta.source = "phantom";
  b.meta.id = "phantom-" + std::to_string(seed);
  return b;
}

std::vector<CaseBundle> generate_dataset(const PhantomSpec& spec, int n_cases, std::uint64_t base_seed) {
  if (n_cases < 1) throw DataError("generate_dataset: n_cases must be >= 1");
  const PhantomLayout layout = build_layout(spec);
  std::vector<CaseBundle> out;
  out.reserve(std::size_t(n_cases));
  for (int i = 0; i < n_cases; ++i) {
    out.push_back(generate_case(spec, layout, case_seed(base_seed, i)));
    out.back().meta.id = "case" + std::to_string(i);
  }
  return out;
}

SplitIndices split_dataset(int n, double train_ratio, double val_ratio, double test_ratio) {
  if (n < 1 || train_ratio < 0 || val_ratio < 0 || test_ratio < 0)
    throw DataError("split_dataset: invalid sizes or ratios");
  const double total = train_ratio + val_ratio + test_ratio;
  if (!(total > 0)) throw DataError("split_dataset: ratios sum to zero");
  const int n_val = int(std::lround(n * val_ratio / total));
  const int n_test = int(std::lround(n * test_ratio / total));
  if (n_val + n_test > n) throw DataError("split_dataset: too few cases for the requested split");
  SplitIndices s;
  const int n_train = n - n_val - n_test;
  for (int i = 0; i < n; ++i) (i < n_train ? s.train : i < n_train + n_val ? s.val : s.test).push_back(i);
  return s;
}

// ---------------------------------------------------------------------------

namespace {

double ellipsoid_level(const Eigen::Vector3d& p, const Eigen::Vector3d& c, const Eigen::Vector3d& r) {
  return (p - c).cwiseQuotient(r).squaredNorm();
}

void paste(Volume3D& dst, const Volume3D& src, const CropBox& box) {
  for (int x = 0; x < box.extent[0]; ++x)
    for (int y = 0; y < box.extent[1]; ++y)
      for (int z = 0; z < box.extent[2]; ++z)
        dst(x + box.offset[0], y + box.offset[1], z + box.offset[2]) = src(x, y, z);
}

}  // namespace

HeadPhantom generate_head(const HeadPhantomSpec& spec, std::uint64_t seed) {
  for (int a = 0; a < 3; ++a)
    if (spec.hr_grid[a] % 2) throw DataError("generate_head: high-resolution grid must be even");
  detail::check_box(spec.hr_grid, spec.left_box);
  detail::check_box(spec.hr_grid, spec.right_box);
  if (spec.left_box.extent != spec.thalamus.grid || spec.right_box.extent != spec.thalamus.grid)
    throw DataError("generate_head: crop boxes must match the thalamus grid");

  PhantomSpec th = spec.thalamus;
  th.noise_sigma = 0.0;
  for (const char* m : {"T1", "WMn"})
    if (!th.contrast.count(m)) throw DataError(std::string("generate_head: thalamus contrast lacks ") + m);
  const PhantomLayout layout = build_layout(th);
  CaseBundle left = generate_case(th, layout, case_seed(seed, 0));
  CaseBundle right_as_left = generate_case(th, layout, case_seed(seed, 1));

  const Dims g = spec.hr_grid;
  Volume3D t1(g, kHighResSpacing, Space::mni_hr);
  Volume3D wmn(g, kHighResSpacing, Space::mni_hr);
  const Eigen::Vector3d c((g[0] - 1) / 2.0, (g[1] - 1) / 2.0, (g[2] - 1) / 2.0);
  const Eigen::Vector3d head = Eigen::Vector3d(g[0], g[1], g[2]) * 0.46;
  const Eigen::Vector3d skull_out = head * 0.95;
  const Eigen::Vector3d skull_in = head * 0.88;
  const Eigen::Vector3d brain = head * 0.83;
  const Eigen::Vector3d wm = head * 0.68;
  const double t1_wm = th.contrast.at("T1").mean[0];
  const double wmn_wm = th.contrast.at("WMn").mean[0];
  for (int x = 0; x < g[0]; ++x)
    for (int y = 0; y < g[1]; ++y)
      for (int z = 0; z < g[2]; ++z) {
        const Eigen::Vector3d p(x, y, z);
        double a = 0.0, b = 0.0;  // air
        if (ellipsoid_level(p, c, head) <= 1) { a = 0.35; b = 0.30; }      // scalp
        if (ellipsoid_level(p, c, skull_out) <= 1) { a = 0.03; b = 0.02; } // bone
        if (ellipsoid_level(p, c, skull_in) <= 1) { a = 0.15; b = 0.10; }  // CSF
        if (ellipsoid_level(p, c, brain) <= 1) { a = 0.55; b = 0.45; }     // grey matter
        if (ellipsoid_level(p, c, wm) <= 1) { a = t1_wm; b = wmn_wm; }     // white matter
        t1(x, y, z) = float(a);
        wmn(x, y, z) = float(b);
      }

  Volume3D rt1 = mirror_lr(right_as_left.modality("T1"));
  Volume3D rwmn = mirror_lr(right_as_left.modality("WMn"));
  LabelMap rlab = mirror_lr(*right_as_left.labels);
  paste(t1, left.modality("T1"), spec.left_box);
  paste(wmn, left.modality("WMn"), spec.left_box);
  paste(t1, rt1, spec.right_box);
  paste(wmn, rwmn, spec.right_box);

  LabelMap lab(g, kHighResSpacing, Space::mni_hr, Side::none, th.schema());
  auto paste_labels = [&](const LabelMap& src, const CropBox& box) {
    for (int x = 0; x < box.extent[0]; ++x)
      for (int y = 0; y < box.extent[1]; ++y)
        for (int z = 0; z < box.extent[2]; ++z)
          lab(x + box.offset[0], y + box.offset[1], z + box.offset[2]) = src(x, y, z);
  };
  paste_labels(*left.labels, spec.left_box);
  paste_labels(rlab, spec.right_box);

  HeadPhantom h;
  h.t1_mni_hr = t1;
  h.wmn_mni_hr = wmn;
  h.labels_mni_hr = lab;
  h.left_labels = crop_roi(lab, spec.left_box);
  h.left_labels.side = Side::left;
  h.right_labels = crop_roi(lab, spec.right_box);
  h.right_labels.side = Side::right;

  std::mt19937_64 rng(case_seed(seed, 2));
  std::normal_distribution<double> noise(0.0, 1.0);
  Volume3D std_res = avg_pool(t1, 2);
  std_res.space = Space::mni_std;
  h.t1_mni_std = std_res;

  // Intracranial mask on the standard grid.
  const Dims sg = std_res.dims;
  h.icv_mask = Volume3D(sg, std_res.spacing, Space::mni_std);
  const Eigen::Vector3d cs((sg[0] - 1) / 2.0, (sg[1] - 1) / 2.0, (sg[2] - 1) / 2.0);
  std::int64_t icv = 0;
  for (int x = 0; x < sg[0]; ++x)
    for (int y = 0; y < sg[1]; ++y)
      for (int z = 0; z < sg[2]; ++z)
        if (ellipsoid_level(Eigen::Vector3d(x, y, z), cs, skull_in / 2.0) <= 1) {
          h.icv_mask(x, y, z) = 1.0f;
          ++icv;
        }
  h.icv_mm3 = double(icv) * std_res.voxel_volume();

  // Native acquisition: translated, bias-modulated, noisy.
  Volume3D native = std_res;
  native.space = Space::native;
  const Eigen::Vector3d shift(spec.shift[0], spec.shift[1], spec.shift[2]);
  const Eigen::Vector3d scs = cs;
  for (int x = 0; x < sg[0]; ++x)
    for (int y = 0; y < sg[1]; ++y)
      for (int z = 0; z < sg[2]; ++z) {
        // Trilinear sample of the aligned volume at p - shift.
        const Eigen::Vector3d p = Eigen::Vector3d(x, y, z) - shift;
        double acc = 0;
        const int x0 = int(std::floor(p.x())), y0 = int(std::floor(p.y())), z0 = int(std::floor(p.z()));
        const double fx = p.x() - x0, fy = p.y() - y0, fz = p.z() - z0;
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k) {
              const int xi = std::clamp(x0 + i, 0, sg[0] - 1), yi = std::clamp(y0 + j, 0, sg[1] - 1),
                        zi = std::clamp(z0 + k, 0, sg[2] - 1);
              acc += (i ? fx : 1 - fx) * (j ? fy : 1 - fy) * (k ? fz : 1 - fz) * std_res(xi, yi, zi);
            }
        const Eigen::Vector3d q = (Eigen::Vector3d(x, y, z) - scs) / double(sg[0]);
        const double bias = 1.0 + spec.bias_strength * (q.x() + 0.5 * q.y() * q.y() - 0.7 * q.z() * q.x());
        native(x, y, z) = float(acc * bias + spec.noise_sigma * noise(rng));
      }
  h.t1_native = native;
  return h;
}

// ---------------------------------------------------------------------------

void write_dataset(const std::string& dir, const std::vector<CaseBundle>& cases,
                   const std::vector<std::uint64_t>& seeds) {
  namespace fs = std::filesystem;
  if (!seeds.empty() && seeds.size() != cases.size()) throw DataError("write_dataset: one seed per case expected");
  fs::create_directories(dir);
  nlohmann::json manifest{{"format", "deepthal-dataset"}, {"version", 1}, {"cases", nlohmann::json::array()}};
  std::set<std::string> ids;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const CaseBundle& c = cases[i];
    c.validate();
    if (c.meta.id.empty() || c.meta.id.find('/') != std::string::npos || !ids.insert(c.meta.id).second)
      throw DataError("write_dataset: case ids must be unique, nonempty and path-free");
    const fs::path sub = fs::path(dir) / c.meta.id;
    fs::create_directories(sub);
    nlohmann::json e{{"id", c.meta.id},     {"side", to_string(c.meta.side)}, {"age", c.meta.age},
                     {"sex", c.meta.sex},   {"source", c.meta.source},        {"pseudo_label", c.meta.pseudo_label},
                     {"labels", bool(c.labels)}};
    if (!seeds.empty()) e["seed"] = seeds[i];
    nlohmann::json mods = nlohmann::json::array();
    for (const auto& [name, v] : c.modalities) {
      write_volume((sub / name).string(), v);
      mods.push_back(name);
    }
    e["modalities"] = mods;
    if (c.labels) write_labels((sub / "labels").string(), *c.labels);
    manifest["cases"].push_back(e);
  }
  std::ofstream out(fs::path(dir) / "dataset.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw DataError("write_dataset: cannot write manifest in " + dir);
}

std::vector<CaseBundle> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path path = fs::path(dir) / "dataset.json";
  std::ifstream in(path);
  if (!in) throw DataError("read_dataset: missing " + path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("read_dataset: malformed " + path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "deepthal-dataset") throw DataError("read_dataset: not a dataset manifest: " + path.string());
  std::vector<CaseBundle> out;
  for (const auto& e : manifest.at("cases")) {
    CaseBundle c;
    c.meta.id = e.at("id").get<std::string>();
    c.meta.side = side_from_string(e.at("side").get<std::string>());
    c.meta.age = e.at("age").get<double>();
    c.meta.sex = e.at("sex").get<std::string>();
    c.meta.source = e.at("source").get<std::string>();
    c.meta.pseudo_label = e.at("pseudo_label").get<bool>();
    const fs::path sub = fs::path(dir) / c.meta.id;
    for (const auto& m : e.at("modalities")) c.modalities[m.get<std::string>()] = read_volume((sub / m.get<std::string>()).string());
    if (e.at("labels").get<bool>()) c.labels = read_labels((sub / "labels").string());
    c.validate();
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace deepthal
