#include "deepthal/preprocess.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <sstream>

namespace deepthal {

namespace {

double median_inplace(std::vector<double>& v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(mid)));
  return m;
}

// Deterministic 1-D k-means; centres start at evenly spaced quantiles.
struct KMeans1D {
  std::vector<double> centres;
  std::vector<int> assign;
};

KMeans1D kmeans_1d(const std::vector<double>& x, int k, int iterations = 30) {
  KMeans1D r;
  std::vector<double> sorted = x;
  std::sort(sorted.begin(), sorted.end());
  for (int c = 0; c < k; ++c) {
    const double q = (c + 0.5) / k * double(sorted.size() - 1);
    r.centres.push_back(sorted[std::size_t(std::llround(q))]);
  }
  r.assign.assign(x.size(), 0);
  for (int it = 0; it < iterations; ++it) {
    // Sorted centres make assignment a boundary search.
    std::sort(r.centres.begin(), r.centres.end());
    std::vector<double> sum(std::size_t(k), 0.0);
    std::vector<std::int64_t> cnt(std::size_t(k), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      int best = 0;
      double bd = std::abs(x[i] - r.centres[0]);
      for (int c = 1; c < k; ++c) {
        const double d = std::abs(x[i] - r.centres[std::size_t(c)]);
        if (d < bd) { bd = d; best = c; }
      }
      r.assign[i] = best;
      sum[std::size_t(best)] += x[i];
      ++cnt[std::size_t(best)];
    }
    bool moved = false;
    for (int c = 0; c < k; ++c) {
      if (!cnt[std::size_t(c)]) continue;  // empty cluster keeps its centre
      const double m = sum[std::size_t(c)] / double(cnt[std::size_t(c)]);
      moved = moved || m != r.centres[std::size_t(c)];
      r.centres[std::size_t(c)] = m;
    }
    if (!moved) break;
  }
  return r;
}

std::vector<std::uint8_t> foreground(const Volume3D& v, const Volume3D* mask, double fraction) {
  std::vector<std::uint8_t> m(std::size_t(v.voxels()), 1);
  if (mask) {
    if (mask->dims != v.dims) throw DataError("mask dims differ from the volume");
    for (std::int64_t i = 0; i < v.voxels(); ++i) m[std::size_t(i)] = mask->data(i) != 0.0f;
    return m;
  }
  const double p99 = percentile(std::vector<float>(v.data.begin(), v.data.end()), 0.99);
  if (p99 <= 0) return m;
  for (std::int64_t i = 0; i < v.voxels(); ++i) m[std::size_t(i)] = v.data(i) > fraction * p99;
  return m;
}

// Normalised coordinate in [-1, 1].
double unit_coord(int i, int n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; }

struct Monomials {
  std::vector<std::array<int, 3>> powers;
  explicit Monomials(int order) {
    for (int a = 0; a <= order; ++a)
      for (int b = 0; a + b <= order; ++b)
        for (int c = 0; a + b + c <= order; ++c) powers.push_back({a, b, c});
  }
  void row(double x, double y, double z, double* out) const {
    for (std::size_t j = 0; j < powers.size(); ++j)
      out[j] = std::pow(x, powers[j][0]) * std::pow(y, powers[j][1]) * std::pow(z, powers[j][2]);
  }
};

template <typename Fn>
void for_each_voxel(const Dims& d, Fn&& fn) {
  for (int x = 0; x < d[0]; ++x)
    for (int y = 0; y < d[1]; ++y)
      for (int z = 0; z < d[2]; ++z) fn(x, y, z);
}

// Trilinear sample with edge clamping. Returns false when the point lies
// outside the grid (the value is still the clamped sample).
bool sample(const Volume3D& v, double x, double y, double z, float& out) {
  const Dims& d = v.dims;
  const bool inside = x >= 0 && y >= 0 && z >= 0 && x <= d[0] - 1 && y <= d[1] - 1 && z <= d[2] - 1;
  x = std::clamp(x, 0.0, double(d[0] - 1));
  y = std::clamp(y, 0.0, double(d[1] - 1));
  z = std::clamp(z, 0.0, double(d[2] - 1));
  const int x0 = std::min(int(x), d[0] - 1), y0 = std::min(int(y), d[1] - 1), z0 = std::min(int(z), d[2] - 1);
  const int x1 = std::min(x0 + 1, d[0] - 1), y1 = std::min(y0 + 1, d[1] - 1), z1 = std::min(z0 + 1, d[2] - 1);
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  const double c00 = v(x0, y0, z0) * (1 - fz) + v(x0, y0, z1) * fz;
  const double c01 = v(x0, y1, z0) * (1 - fz) + v(x0, y1, z1) * fz;
  const double c10 = v(x1, y0, z0) * (1 - fz) + v(x1, y0, z1) * fz;
  const double c11 = v(x1, y1, z0) * (1 - fz) + v(x1, y1, z1) * fz;
  out = float((c00 * (1 - fy) + c01 * fy) * (1 - fx) + (c10 * (1 - fy) + c11 * fy) * fx);
  return inside;
}

Eigen::Vector3d centre(const Dims& d) { return Eigen::Vector3d(d[0] - 1, d[1] - 1, d[2] - 1) / 2.0; }

}  // namespace

double percentile(std::vector<float> values, double q) {
  if (values.empty()) throw DataError("percentile of an empty set");
  q = std::clamp(q, 0.0, 1.0);
  const double pos = q * double(values.size() - 1);
  const auto lo = std::size_t(std::floor(pos));
  std::nth_element(values.begin(), values.begin() + std::ptrdiff_t(lo), values.end());
  const double a = values[lo];
  if (lo + 1 >= values.size()) return a;
  const double b = *std::min_element(values.begin() + std::ptrdiff_t(lo) + 1, values.end());
  return a + (pos - double(lo)) * (b - a);
}

// ---------------------------------------------------------------------------

void DenoiseParams::validate() const {
  if (patch_radius < 0 || search_radius < 1) throw DataError("denoise: radii must be patch >= 0, search >= 1");
  if (!(h > 0)) throw DataError("denoise: h must be > 0");
}

double estimate_noise_sigma(const Volume3D& v) {
  const Dims d = v.dims;
  if (d[0] < 3 || d[1] < 3 || d[2] < 3) return 0.0;
  std::vector<double> eps;
  eps.reserve(std::size_t(d[0] - 2) * std::size_t(d[1] - 2) * std::size_t(d[2] - 2));
  const double k = std::sqrt(6.0 / 7.0);
  for (int x = 1; x < d[0] - 1; ++x)
    for (int y = 1; y < d[1] - 1; ++y)
      for (int z = 1; z < d[2] - 1; ++z) {
        const double nb = (double(v(x - 1, y, z)) + v(x + 1, y, z) + v(x, y - 1, z) + v(x, y + 1, z) +
                           v(x, y, z - 1) + v(x, y, z + 1)) / 6.0;
        eps.push_back(k * (v(x, y, z) - nb));
      }
  const double med = median_inplace(eps);
  for (auto& e : eps) e = std::abs(e - med);
  return 1.4826 * median_inplace(eps);
}

Volume3D denoise(const Volume3D& v, const DenoiseParams& params) {
  params.validate();
  const double sigma = params.sigma >= 0 ? params.sigma : estimate_noise_sigma(v);
  if (!(sigma > 0)) return v;

  const int m = params.patch_radius + params.search_radius;
  const Dims pd{v.dims[0] + 2 * m, v.dims[1] + 2 * m, v.dims[2] + 2 * m};
  const std::int64_t sx = std::int64_t(pd[1]) * pd[2], sy = pd[2];
  const std::int64_t n = std::int64_t(pd[0]) * sx;
  // Edge-padded copy, flattened; every offset below is a flat index shift.
  Eigen::ArrayXf p(n);
  for (int x = 0; x < pd[0]; ++x)
    for (int y = 0; y < pd[1]; ++y)
      for (int z = 0; z < pd[2]; ++z)
        p(x * sx + y * sy + z) = v(std::clamp(x - m, 0, v.dims[0] - 1), std::clamp(y - m, 0, v.dims[1] - 1),
                                   std::clamp(z - m, 0, v.dims[2] - 1));

  const std::int64_t margin = m * (sx + sy + 1);
  const std::int64_t lo = margin, len = n - 2 * margin;
  const int pr = params.patch_radius;
  const float patch_n = float(std::pow(2 * pr + 1, 3));
  const float two_s2 = float(2 * sigma * sigma);
  const float inv_h2 = float(1.0 / std::pow(params.h * sigma, 2));

  Eigen::ArrayXf acc = Eigen::ArrayXf::Zero(n), wsum = Eigen::ArrayXf::Zero(n), wmax = Eigen::ArrayXf::Zero(n);
  Eigen::ArrayXf diff(n), box(n);
  auto box_axis = [&](Eigen::ArrayXf& src, Eigen::ArrayXf& dst, std::int64_t stride) {
    const std::int64_t r = pr * stride;
    dst.setZero();
    dst.segment(r, n - 2 * r) = src.segment(r, n - 2 * r);
    for (int k = 1; k <= pr; ++k)
      dst.segment(r, n - 2 * r) +=
          src.segment(r - k * stride, n - 2 * r) + src.segment(r + k * stride, n - 2 * r);
    std::swap(src, dst);
  };

  const int sr = params.search_radius;
  for (int ox = -sr; ox <= sr; ++ox)
    for (int oy = -sr; oy <= sr; ++oy)
      for (int oz = -sr; oz <= sr; ++oz) {
        if (!ox && !oy && !oz) continue;
        const std::int64_t d = ox * sx + oy * sy + oz;
        const std::int64_t a = std::max<std::int64_t>(0, -d), b = std::min<std::int64_t>(n, n - d);
        diff.setZero();
        diff.segment(a, b - a) = (p.segment(a, b - a) - p.segment(a + d, b - a)).square();
        box_axis(diff, box, 1);
        box_axis(diff, box, sy);
        box_axis(diff, box, sx);
        auto w = ((diff.segment(lo, len) / patch_n - two_s2).max(0.0f) * -inv_h2).exp().eval();
        acc.segment(lo, len) += w * p.segment(lo + d, len);
        wsum.segment(lo, len) += w;
        wmax.segment(lo, len) = wmax.segment(lo, len).max(w);
      }

  Volume3D out = v;
  for (int x = 0; x < v.dims[0]; ++x)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int z = 0; z < v.dims[2]; ++z) {
        const std::int64_t i = (x + m) * sx + (y + m) * sy + (z + m);
        const float den = wsum(i) + wmax(i);
        if (den > 0) out(x, y, z) = (acc(i) + wmax(i) * p(i)) / den;
      }
  return out;
}

// ---------------------------------------------------------------------------

void BiasParams::validate() const {
  if (order < 0 || order > 6) throw DataError("bias_correct: order must be in [0, 6]");
  if (!(edge_threshold > 0)) throw DataError("bias_correct: edge_threshold must be > 0");
  if (iterations < 1) throw DataError("bias_correct: iterations must be >= 1");
  if (!(mask_fraction >= 0 && mask_fraction < 1)) throw DataError("bias_correct: mask_fraction must be in [0, 1)");
}

BiasResult bias_correct(const Volume3D& v, const Volume3D* mask, const BiasParams& params) {
  params.validate();
  BiasResult r;
  const std::vector<std::uint8_t> fg = foreground(v, mask, params.mask_fraction);
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < v.voxels(); ++i)
    if (fg[std::size_t(i)]) idx.push_back(i);
  const Monomials mono(params.order);
  const auto terms = Eigen::Index(mono.powers.size());
  r.field = v;
  r.field.data.setOnes();
  if (idx.empty()) {
    r.corrected = v;
    r.warnings.push_back("bias_correct: empty mask, volume left unchanged");
    return r;
  }

  double lo = v.data(idx[0]), hi = lo;
  for (auto i : idx) {
    lo = std::min(lo, double(v.data(i)));
    hi = std::max(hi, double(v.data(i)));
  }
  double shift = 0.0;
  if (lo <= 0) {
    shift = -lo + 1e-3 * std::max(hi - lo, 1e-6);
    std::ostringstream w;
    w << "bias_correct: nonpositive intensities, shifted by " << shift << " before correction";
    r.warnings.push_back(w.str());
  }

  // Neighbour differences of log intensity inside the mask. Within a tissue
  // they only carry the field; tissue edges are rejected as outliers.
  const Dims d = v.dims;
  const std::int64_t strides[3] = {std::int64_t(d[1]) * d[2], d[2], 1};
  std::vector<std::array<std::int64_t, 2>> pairs;
  for (auto i : idx) {
    const int c[3] = {int(i / strides[0]), int((i / d[2]) % d[1]), int(i % d[2])};
    for (int a = 0; a < 3; ++a)
      if (c[a] + 1 < d[a] && fg[std::size_t(i + strides[a])]) pairs.push_back({i, i + strides[a]});
  }
  const std::size_t stride = std::max<std::size_t>(1, pairs.size() / 200000);
  std::vector<std::array<std::int64_t, 2>> fit;
  for (std::size_t i = 0; i < pairs.size(); i += stride) fit.push_back(pairs[i]);
  const Eigen::Index nf = Eigen::Index(fit.size());
  if (nf < 4 * terms) {
    r.corrected = v;
    r.warnings.push_back("bias_correct: too few foreground voxels, volume left unchanged");
    return r;
  }
  // The constant monomial has zero difference and is dropped.
  auto basis_at = [&](std::int64_t i, double* out) {
    const int x = int(i / strides[0]), y = int((i / d[2]) % d[1]), z = int(i % d[2]);
    mono.row(unit_coord(x, d[0]), unit_coord(y, d[1]), unit_coord(z, d[2]), out);
  };
  Eigen::MatrixXd basis(nf, terms - 1);
  Eigen::VectorXd rhs(nf);
  double r0[84], r1[84];
  for (Eigen::Index j = 0; j < nf; ++j) {
    const auto [i0, i1] = fit[std::size_t(j)];
    basis_at(i0, r0);
    basis_at(i1, r1);
    for (Eigen::Index t = 1; t < terms; ++t) basis(j, t - 1) = r1[t] - r0[t];
    rhs(j) = std::log(double(v.data(i1)) + shift) - std::log(double(v.data(i0)) + shift);
  }

  Eigen::VectorXd inlier = (rhs.array().abs() < params.edge_threshold).cast<double>();
  Eigen::VectorXd coef = Eigen::VectorXd::Zero(terms);
  for (int it = 0; it < params.iterations; ++it) {
    if (inlier.sum() < double(4 * terms)) break;
    const Eigen::MatrixXd bw = basis.array().colwise() * inlier.array();
    const Eigen::VectorXd sol = (bw.transpose() * basis).ldlt().solve(bw.transpose() * rhs);
    coef.tail(terms - 1) = sol;
    const Eigen::VectorXd dev = rhs - basis * sol;
    std::vector<double> absdev;
    for (Eigen::Index j = 0; j < nf; ++j)
      if (inlier(j) > 0) absdev.push_back(std::abs(dev(j)));
    const double cut = std::max(3.0 * 1.4826 * median_inplace(absdev), 1e-9);
    for (Eigen::Index j = 0; j < nf; ++j) inlier(j) = std::abs(dev(j)) <= cut ? 1.0 : 0.0;
  }
  if (!coef.allFinite()) throw NumericError("bias_correct: non-finite field coefficients");

  Eigen::ArrayXd field(v.voxels());
  std::vector<double> row(static_cast<std::size_t>(terms));
  for_each_voxel(d, [&](int x, int y, int z) {
    mono.row(unit_coord(x, d[0]), unit_coord(y, d[1]), unit_coord(z, d[2]), row.data());
    field(v.index(x, y, z)) = std::exp(Eigen::Map<const Eigen::VectorXd>(row.data(), terms).dot(coef));
  });
  double mean_in = 0, mean_out = 0;
  for (auto i : idx) {
    mean_in += double(v.data(i)) + shift;
    mean_out += (double(v.data(i)) + shift) / field(i);
  }
  field *= mean_out / mean_in;
  if (!field.allFinite()) throw NumericError("bias_correct: non-finite field");
  r.field.data = field.cast<float>();
  r.corrected = v;
  r.corrected.data = (((v.data.cast<double>() + shift) / field) - shift).cast<float>();
  return r;
}

// ---------------------------------------------------------------------------

Eigen::Vector3d AffineTransform::apply(const Eigen::Vector3d& p, const Dims& fixed, const Dims& moving) const {
  return centre(moving) + t + A * (p - centre(fixed));
}

double AffineTransform::distance_to_identity() const {
  return std::max((A - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), t.cwiseAbs().maxCoeff());
}

void AffineParams::validate() const {
  if (pyramid.empty()) throw DataError("affine: empty pyramid");
  for (int f : pyramid)
    if (f < 1) throw DataError("affine: pyramid factors must be >= 1");
  if (iterations < 1) throw DataError("affine: iterations must be >= 1");
}

namespace {

struct AffineLevel {
  int factor = 1;
  Volume3D fixed, moving;
  std::array<Volume3D, 3> grad;  // central differences of the moving image
  Dims fine_fixed, fine_moving;
  double radius = 1.0;
};

Volume3D pool_to(const Volume3D& v, int f) {
  if (f == 1) return v;
  bool divisible = true;
  for (int a = 0; a < 3; ++a) divisible = divisible && v.dims[a] % f == 0;
  if (divisible) return avg_pool(v, f);
  return resize(v, {std::max(1, v.dims[0] / f), std::max(1, v.dims[1] / f), std::max(1, v.dims[2] / f)});
}

AffineLevel make_level(const Volume3D& moving, const Volume3D& fixed, int f) {
  AffineLevel L;
  L.factor = f;
  L.fixed = pool_to(fixed, f);
  L.moving = pool_to(moving, f);
  L.fine_fixed = fixed.dims;
  L.fine_moving = moving.dims;
  L.radius = std::max({fixed.dims[0], fixed.dims[1], fixed.dims[2]}) / 2.0;
  const Dims d = L.moving.dims;
  for (int a = 0; a < 3; ++a) L.grad[std::size_t(a)] = L.moving;
  for_each_voxel(d, [&](int x, int y, int z) {
    const int c[3] = {x, y, z};
    for (int a = 0; a < 3; ++a) {
      int lo[3] = {x, y, z}, hi[3] = {x, y, z};
      lo[a] = std::max(0, c[a] - 1);
      hi[a] = std::min(d[a] - 1, c[a] + 1);
      const double span = hi[a] - lo[a];
      L.grad[std::size_t(a)](x, y, z) =
          span > 0 ? float((L.moving(hi[0], hi[1], hi[2]) - L.moving(lo[0], lo[1], lo[2])) / span) : 0.0f;
    }
  });
  return L;
}

AffineTransform from_params(const Eigen::Matrix<double, 12, 1>& th, double radius) {
  AffineTransform tr;
  tr.t = th.head<3>();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) tr.A(r, c) += th(3 + 3 * r + c) / radius;
  return tr;
}

// Returns NCC and its gradient with respect to the 12 parameters.
double ncc_objective(const AffineLevel& L, const Eigen::Matrix<double, 12, 1>& th, Eigen::Matrix<double, 12, 1>* g) {
  const AffineTransform tr = from_params(th, L.radius);
  const Dims fd = L.fixed.dims;
  const std::int64_t n = L.fixed.voxels();
  const Eigen::Vector3d cf = centre(L.fine_fixed), cm = centre(L.fine_moving);
  const double f = L.factor;
  Eigen::ArrayXd w(n);
  Eigen::Array<double, Eigen::Dynamic, 3> dw(n, 3);
  Eigen::Array<double, Eigen::Dynamic, 3> rel(n, 3);
  for_each_voxel(fd, [&](int x, int y, int z) {
    const std::int64_t i = L.fixed.index(x, y, z);
    const Eigen::Vector3d pf(f * (x + 0.5) - 0.5, f * (y + 0.5) - 0.5, f * (z + 0.5) - 0.5);
    const Eigen::Vector3d r = pf - cf;
    const Eigen::Vector3d pm = cm + tr.t + tr.A * r;
    const Eigen::Vector3d s = (pm.array() + 0.5) / f - 0.5;
    float val;
    const bool inside = sample(L.moving, s.x(), s.y(), s.z(), val);
    w(i) = val;
    for (int a = 0; a < 3; ++a) {
      float gv = 0.0f;
      if (inside) sample(L.grad[std::size_t(a)], s.x(), s.y(), s.z(), gv);
      dw(i, a) = gv / f;
      rel(i, a) = r(a) / L.radius;
    }
  });
  const Eigen::ArrayXd fx = L.fixed.data.cast<double>();
  const Eigen::ArrayXd wc = w - w.mean(), fc = fx - fx.mean();
  const double sww = wc.square().sum(), sff = fc.square().sum();
  if (!std::isfinite(sww) || !std::isfinite(sff)) return std::numeric_limits<double>::quiet_NaN();
  if (!(sww > 0) || !(sff > 0)) {
    if (g) g->setZero();
    return 0.0;
  }
  const double den = std::sqrt(sww * sff);
  const double ncc_v = (wc * fc).sum() / den;
  if (g) {
    const Eigen::ArrayXd gi = fc / den - ncc_v * wc / sww;
    for (int a = 0; a < 3; ++a) (*g)(a) = (gi * dw.col(a)).sum();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) (*g)(3 + 3 * r + c) = (gi * dw.col(r) * rel.col(c)).sum();
  }
  return ncc_v;
}

}  // namespace

AffineResult affine_to_template(const Volume3D& v, const Volume3D& tmpl, const AffineParams& params) {
  params.validate();
  using Vec = Eigen::Matrix<double, 12, 1>;
  using Mat = Eigen::Matrix<double, 12, 12>;
  AffineResult res;
  Vec th = Vec::Zero();
  double first = std::numeric_limits<double>::quiet_NaN(), last = first;
  auto fail = [&](const std::string& why) {
    std::ostringstream os;
    os << "affine_to_template: optimizer diverged (" << why << "); objective trace:";
    for (double x : res.trace) os << ' ' << x;
    throw DataError(os.str());
  };

  for (const int& f : params.pyramid) {
    const AffineLevel L = make_level(v, tmpl, f);
    Vec g;
    double phi = -ncc_objective(L, th, &g);
    g = -g;
    res.trace.push_back(-phi);
    if (!std::isfinite(phi) || !g.allFinite()) fail("non-finite objective");
    // Reference for the divergence check: identity at the finest level.
    if (&f == &params.pyramid.back()) first = ncc_objective(L, Vec::Zero(), nullptr);
    const double gn = g.norm();
    if (!(gn > params.gradient_tolerance)) continue;
    // Inverse Hessian guess: first step moves about one level voxel.
    Mat H = Mat::Identity() * (double(f) / gn);
    for (int it = 0; it < params.iterations; ++it) {
      if (!(g.norm() > params.gradient_tolerance)) break;
      Vec dir = -H * g;
      double slope = g.dot(dir);
      if (slope >= 0) {
        H = Mat::Identity() * (double(f) / g.norm());
        dir = -H * g;
        slope = g.dot(dir);
      }
      double alpha = 1.0, phi_new = 0.0;
      Vec g_new;
      bool accepted = false;
      for (int bt = 0; bt < 30; ++bt) {
        phi_new = -ncc_objective(L, th + alpha * dir, &g_new);
        if (std::isfinite(phi_new) && phi_new <= phi + 1e-4 * alpha * slope) {
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted) break;
      g_new = -g_new;
      const Vec s = alpha * dir, y = g_new - g;
      const double sy = s.dot(y);
      if (sy > 1e-12) {
        const double rho = 1.0 / sy;
        const Mat I = Mat::Identity();
        H = (I - rho * s * y.transpose()) * H * (I - rho * y * s.transpose()) + rho * s * s.transpose();
      }
      th += s;
      g = g_new;
      phi = phi_new;
      res.trace.push_back(-phi);
      if (!th.allFinite()) fail("non-finite parameters");
    }
    last = -phi;
  }
  if (std::isnan(last)) last = first;
  res.transform = from_params(th, std::max({tmpl.dims[0], tmpl.dims[1], tmpl.dims[2]}) / 2.0);
  const double det = res.transform.A.determinant();
  if (!std::isfinite(last) || !res.transform.A.allFinite()) fail("non-finite objective");
  if (det < 0.25 || det > 4.0) fail("degenerate transform, det " + std::to_string(det));
  if (last < first - 1e-3) fail("objective decreased");
  res.image = apply_affine(v, res.transform, tmpl);
  return res;
}

Volume3D apply_affine(const Volume3D& moving, const AffineTransform& tr, const Volume3D& fixed) {
  Volume3D out = fixed;
  out.side = moving.side;
  for_each_voxel(fixed.dims, [&](int x, int y, int z) {
    const Eigen::Vector3d p = tr.apply(Eigen::Vector3d(x, y, z), fixed.dims, moving.dims);
    float val;
    sample(moving, p.x(), p.y(), p.z(), val);
    out(x, y, z) = val;
  });
  return out;
}

LabelMap apply_affine(const LabelMap& moving, const AffineTransform& tr, const Volume3D& fixed) {
  LabelMap out(fixed.dims, fixed.spacing, fixed.space, moving.side, moving.schema);
  for_each_voxel(fixed.dims, [&](int x, int y, int z) {
    const Eigen::Vector3d p = tr.apply(Eigen::Vector3d(x, y, z), fixed.dims, moving.dims);
    const int ix = std::clamp(int(std::lround(p.x())), 0, moving.dims[0] - 1);
    const int iy = std::clamp(int(std::lround(p.y())), 0, moving.dims[1] - 1);
    const int iz = std::clamp(int(std::lround(p.z())), 0, moving.dims[2] - 1);
    out(x, y, z) = moving(ix, iy, iz);
  });
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> intensity_anchors(const Volume3D& v, int k, const Volume3D* mask) {
  if (k < 1) throw DataError("intensity_anchors: need at least one anchor");
  const std::vector<std::uint8_t> fg = foreground(v, mask, 0.1);
  std::vector<double> x;
  for (std::int64_t i = 0; i < v.voxels(); ++i)
    if (fg[std::size_t(i)]) x.push_back(v.data(i));
  std::vector<double> distinct = x;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (int(distinct.size()) < k)
    throw DataError("intensity_anchors: degenerate histogram (" + std::to_string(distinct.size()) +
                    " distinct values for " + std::to_string(k) + " anchors)");
  const KMeans1D km = kmeans_1d(x, k);
  std::vector<double> anchors;
  for (int c = 0; c < k; ++c) {
    std::vector<double> members;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (km.assign[i] == c) members.push_back(x[i]);
    if (members.empty()) throw DataError("intensity_anchors: degenerate histogram (empty intensity class)");
    // Median: the histogram mode flips between similar-sized tissue peaks under noise.
    auto mid = members.begin() + std::ptrdiff_t(members.size() / 2);
    std::nth_element(members.begin(), mid, members.end());
    anchors.push_back(*mid);
  }
  for (int c = 1; c < k; ++c)
    if (!(anchors[std::size_t(c)] > anchors[std::size_t(c - 1)]))
      throw DataError("intensity_anchors: degenerate histogram (anchors not distinct)");
  return anchors;
}

Volume3D piecewise_linear(const Volume3D& v, const std::vector<double>& from, const std::vector<double>& to) {
  if (from.empty() || from.size() != to.size()) throw DataError("piecewise_linear: anchor lists differ in size");
  for (std::size_t i = 1; i < from.size(); ++i)
    if (!(from[i] > from[i - 1]) || !(to[i] > to[i - 1]))
      throw DataError("piecewise_linear: anchors must be strictly increasing");
  Volume3D out = v;
  if (from.size() == 1) {
    out.data += float(to[0] - from[0]);
    return out;
  }
  const std::size_t k = from.size();
  for (std::int64_t i = 0; i < v.voxels(); ++i) {
    const double x = v.data(i);
    std::size_t s = std::size_t(std::upper_bound(from.begin(), from.end(), x) - from.begin());
    s = std::clamp<std::size_t>(s, 1, k - 1);  // segment [s-1, s], ends extend
    const double slope = (to[s] - to[s - 1]) / (from[s] - from[s - 1]);
    out.data(i) = float(to[s - 1] + slope * (x - from[s - 1]));
  }
  return out;
}

Volume3D normalize_intensity(const Volume3D& v, int anchors, const std::vector<double>& targets, const Volume3D* mask) {
  std::vector<double> to = targets;
  if (to.empty())
    for (int c = 0; c < anchors; ++c) to.push_back((c + 1.0) / anchors);
  if (int(to.size()) != anchors) throw DataError("normalize_intensity: target count differs from anchor count");
  std::vector<double> from = intensity_anchors(v, anchors, mask);
  // Air stays at zero when both anchor sets are positive.
  if (from.front() > 0 && to.front() > 0) {
    from.insert(from.begin(), 0.0);
    to.insert(to.begin(), 0.0);
  }
  return piecewise_linear(v, from, to);
}

// ---------------------------------------------------------------------------

void IcvParams::validate() const {
  if (!(threshold_fraction > 0 && threshold_fraction < 1)) throw DataError("icv: threshold_fraction must be in (0, 1)");
  if (closing_radius < 0) throw DataError("icv: closing_radius must be >= 0");
}

namespace {

const int kNeighbours[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};

// Components of voxels where `in(i)` holds (6-connectivity); returns labels (0 = none).
template <typename Pred>
std::vector<int> components(const Dims& d, Pred in, std::vector<std::int64_t>& sizes) {
  const std::int64_t n = std::int64_t(d[0]) * d[1] * d[2];
  std::vector<int> lab(std::size_t(n), 0);
  sizes.assign(1, 0);
  std::deque<std::int64_t> q;
  for (std::int64_t s = 0; s < n; ++s) {
    if (!in(s) || lab[std::size_t(s)]) continue;
    const int id = int(sizes.size());
    sizes.push_back(0);
    lab[std::size_t(s)] = id;
    q.push_back(s);
    while (!q.empty()) {
      const std::int64_t i = q.front();
      q.pop_front();
      ++sizes.back();
      const int x = int(i / (std::int64_t(d[1]) * d[2])), y = int((i / d[2]) % d[1]), z = int(i % d[2]);
      for (const auto& o : kNeighbours) {
        const int a = x + o[0], b = y + o[1], c = z + o[2];
        if (a < 0 || b < 0 || c < 0 || a >= d[0] || b >= d[1] || c >= d[2]) continue;
        const std::int64_t j = (std::int64_t(a) * d[1] + b) * d[2] + c;
        if (in(j) && !lab[std::size_t(j)]) {
          lab[std::size_t(j)] = id;
          q.push_back(j);
        }
      }
    }
  }
  return lab;
}

// Separable box max (dilate) or min (erode) with a (2r+1)^3 cube.
Volume3D morph(const Volume3D& m, int r, bool dilate) {
  Volume3D cur = m;
  const Dims d = m.dims;
  for (int axis = 0; axis < 3; ++axis) {
    Volume3D next = cur;
    for_each_voxel(d, [&](int x, int y, int z) {
      float acc = dilate ? 0.0f : 1.0f;
      for (int k = -r; k <= r; ++k) {
        int p[3] = {x, y, z};
        p[axis] += k;
        // Outside the grid counts as background.
        const float val = (p[axis] < 0 || p[axis] >= d[axis]) ? 0.0f : cur(p[0], p[1], p[2]);
        acc = dilate ? std::max(acc, val) : std::min(acc, val);
      }
      next(x, y, z) = acc;
    });
    cur = std::move(next);
  }
  return cur;
}

}  // namespace

Volume3D largest_component(const Volume3D& mask) {
  std::vector<std::int64_t> sizes;
  const auto lab = components(mask.dims, [&](std::int64_t i) { return mask.data(i) != 0.0f; }, sizes);
  Volume3D out = mask;
  out.data.setZero();
  if (sizes.size() < 2) return out;
  const int best = int(std::max_element(sizes.begin() + 1, sizes.end()) - sizes.begin());
  for (std::int64_t i = 0; i < mask.voxels(); ++i)
    if (lab[std::size_t(i)] == best) out.data(i) = 1.0f;
  return out;
}

Volume3D fill_holes(const Volume3D& mask) {
  std::vector<std::int64_t> sizes;
  const Dims d = mask.dims;
  const auto lab = components(d, [&](std::int64_t i) { return mask.data(i) == 0.0f; }, sizes);
  std::vector<bool> outside(sizes.size(), false);
  for_each_voxel(d, [&](int x, int y, int z) {
    if (x == 0 || y == 0 || z == 0 || x == d[0] - 1 || y == d[1] - 1 || z == d[2] - 1)
      outside[std::size_t(lab[std::size_t(mask.index(x, y, z))])] = true;
  });
  Volume3D out = mask;
  for (std::int64_t i = 0; i < mask.voxels(); ++i) {
    const int l = lab[std::size_t(i)];
    out.data(i) = (l == 0 || !outside[std::size_t(l)]) ? 1.0f : 0.0f;
  }
  return out;
}

IcvResult extract_icv(const Volume3D& v, const IcvParams& params) {
  params.validate();
  const double p99 = percentile(std::vector<float>(v.data.begin(), v.data.end()), 0.99);
  if (!(p99 > 0)) throw DataError("extract_icv: volume has no positive intensities");
  Volume3D m = v;
  for (std::int64_t i = 0; i < v.voxels(); ++i) m.data(i) = v.data(i) > params.threshold_fraction * p99 ? 1.0f : 0.0f;
  m = largest_component(m);
  if (params.closing_radius > 0) m = morph(morph(m, params.closing_radius, true), params.closing_radius, false);
  m = fill_holes(m);
  IcvResult r;
  r.mask = m;
  r.voxels = std::int64_t(m.data.sum());
  r.mm3 = double(r.voxels) * v.voxel_volume();
  return r;
}

}  // namespace deepthal
