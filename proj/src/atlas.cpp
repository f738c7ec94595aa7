#include "deepthal/atlas.hpp"

#include "deepthal/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace deepthal {

AtlasLibrary::AtlasLibrary(std::vector<AtlasEntry> entries) : entries_(std::move(entries)) {
  if (entries_.empty()) throw DataError("atlas library is empty");
  const AtlasEntry& first = entries_.front();
  for (const auto& e : entries_) {
    if (!e.image.same_geometry(first.image) || e.labels.dims != e.image.dims)
      throw DataError("atlas library entry '" + e.id + "' differs in geometry");
    if (!(e.labels.schema == first.labels.schema))
      throw DataError("atlas library entry '" + e.id + "' uses a different label schema");
    z_.push_back(zscore(e.image));
  }
}

AtlasLibrary AtlasLibrary::from_cases(const std::vector<CaseBundle>& cases, const std::string& modality) {
  std::vector<AtlasEntry> entries;
  for (const auto& c : cases) {
    if (!c.labels) throw DataError("atlas library case '" + c.meta.id + "' has no labels");
    entries.push_back({c.meta.id, c.modality(modality), *c.labels});
  }
  return AtlasLibrary(std::move(entries));
}

void FusionParams::validate() const {
  if (!(h > 0) || !std::isfinite(h)) throw DataError("fusion: h must be > 0");
  if (radius < 0) throw DataError("fusion: radius must be >= 0");
}

double ncc(const Volume3D& a, const Volume3D& b) {
  if (a.dims != b.dims) throw DataError("ncc: volumes differ in dims");
  const Eigen::ArrayXd x = a.data.cast<double>(), y = b.data.cast<double>();
  const Eigen::ArrayXd dx = x - x.mean(), dy = y - y.mean();
  const double den = std::sqrt(dx.square().sum() * dy.square().sum());
  if (!(den > 0)) throw DataError("ncc: constant volume");
  return (dx * dy).sum() / den;
}

std::vector<std::size_t> select_similar(const AtlasLibrary& lib, const Volume3D& target, std::size_t n,
                                        const std::string& exclude_id, std::vector<std::string>* warnings,
                                        std::vector<double>* scores) {
  if (n == 0) throw DataError("select_similar: n must be >= 1");
  std::vector<std::size_t> idx;
  std::vector<double> sim(lib.size(), 0.0);
  for (std::size_t i = 0; i < lib.size(); ++i) {
    if (!exclude_id.empty() && lib.entry(i).id == exclude_id) continue;
    if (lib.entry(i).image.dims != target.dims) throw DataError("select_similar: target grid differs from library");
    sim[i] = ncc(lib.entry(i).image, target);
    idx.push_back(i);
  }
  if (idx.empty()) throw DataError("select_similar: no library entries left after excluding '" + exclude_id + "'");
  if (idx.size() < n && warnings)
    warnings->push_back("atlas library has " + std::to_string(idx.size()) + " eligible cases, fewer than " +
                        std::to_string(n) + "; using all");
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  if (idx.size() > n) idx.resize(n);
  if (scores) {
    scores->clear();
    for (std::size_t i : idx) scores->push_back(sim[i]);
  }
  return idx;
}

AtlasPrior fuse_labels(const std::vector<WarpedAtlas>& warped, const Volume3D& target, const FusionParams& params) {
  params.validate();
  if (warped.empty()) throw DataError("fuse_labels: no warped atlases");
  for (const auto& w : warped)
    if (w.image.dims != target.dims || w.labels.dims != target.dims)
      throw DataError("fuse_labels: warped atlas grid differs from target");
  const LabelSchema& schema = warped.front().labels.schema;
  for (const auto& w : warped)
    if (!(w.labels.schema == schema)) throw DataError("fuse_labels: atlases use different schemas");

  const std::size_t K = warped.size();
  const Dims d = target.dims;
  const std::int64_t nv = target.voxels();
  const double inv_h2 = 1.0 / (params.h * params.h);
  const Volume3D tz = zscore(target);

  // Log patch weight of every case at every voxel. Log-sum-exp keeps the
  // weights strictly positive even for very dissimilar intensities.
  std::vector<Eigen::ArrayXd> logw(K);
  for (std::size_t k = 0; k < K; ++k) {
    const Volume3D iz = zscore(warped[k].image);
    Eigen::ArrayXd e = -(iz.data.cast<double>() - tz.data.cast<double>()).square() * inv_h2;
    Eigen::ArrayXd& lw = logw[k];
    lw.resize(nv);
    const int r = params.radius;
    for (int x = 0; x < d[0]; ++x)
      for (int y = 0; y < d[1]; ++y)
        for (int z = 0; z < d[2]; ++z) {
          double m = -std::numeric_limits<double>::infinity();
          for (int a = std::max(0, x - r); a <= std::min(d[0] - 1, x + r); ++a)
            for (int b = std::max(0, y - r); b <= std::min(d[1] - 1, y + r); ++b)
              for (int c = std::max(0, z - r); c <= std::min(d[2] - 1, z + r); ++c)
                m = std::max(m, e(target.index(a, b, c)));
          double s = 0;
          for (int a = std::max(0, x - r); a <= std::min(d[0] - 1, x + r); ++a)
            for (int b = std::max(0, y - r); b <= std::min(d[1] - 1, y + r); ++b)
              for (int c = std::max(0, z - r); c <= std::min(d[2] - 1, z + r); ++c)
                s += std::exp(e(target.index(a, b, c)) - m);
          lw(target.index(x, y, z)) = m + std::log(s);
        }
  }

  AtlasPrior out;
  out.params = params;
  out.labels = LabelMap(target.like<std::uint8_t>(target.dims), schema);
  std::vector<std::pair<int, double>> votes(K);
  std::vector<double> score(std::size_t(schema.max_id() + 1));
  for (std::int64_t v = 0; v < nv; ++v) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) top = std::max(top, logw[k](v));
    for (std::size_t k = 0; k < K; ++k) votes[k] = {warped[k].labels.data(v), std::exp(logw[k](v) - top)};
    // Canonical summation order makes the result independent of list order.
    std::sort(votes.begin(), votes.end());
    std::fill(score.begin(), score.end(), 0.0);
    for (const auto& [label, w] : votes) score[std::size_t(label)] += w;
    int best = 0;
    for (std::size_t l = 1; l < score.size(); ++l)
      if (score[l] > score[std::size_t(best)]) best = int(l);
    out.labels.data(v) = std::uint8_t(best);
  }
  return out;
}

namespace {

void check_field(const Dims& d, const nn::Tensor<float>& field) {
  if (!(field.shape == nn::Shape{3, d[0], d[1], d[2]}))
    throw DataError("warp: displacement field " + field.shape.str() + " does not match grid");
}

}  // namespace

Volume3D warp_volume(const Volume3D& v, const nn::Tensor<float>& field) {
  check_field(v.dims, field);
  nn::NoGradGuard guard;
  nn::Tensor<float> img(nn::Shape{1, v.dims[0], v.dims[1], v.dims[2]});
  img.data.row(0) = v.data.matrix().transpose();
  const auto out = nn::warp(nn::constant(img), nn::constant(field))->value;
  Volume3D r = v;
  r.data = out.data.row(0).transpose().array();
  return r;
}

LabelMap warp_labels(const LabelMap& m, const nn::Tensor<float>& field) {
  check_field(m.dims, field);
  LabelMap out = m;
  std::int64_t v = 0;
  for (int x = 0; x < m.dims[0]; ++x)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int z = 0; z < m.dims[2]; ++z, ++v) {
        const int p[3] = {x, y, z};
        int q[3];
        for (int a = 0; a < 3; ++a)
          q[a] = std::clamp(int(std::lround(double(p[a]) + double(field.data(a, v)))), 0, m.dims[a] - 1);
        out.data(v) = m(q[0], q[1], q[2]);
      }
  return out;
}

AtlasPrior build_subject_atlas(const AtlasLibrary& lib, const Volume3D& target, const TrainedModel& reg_model,
                               std::size_t n, const FusionParams& params, const std::string& exclude_id) {
  std::vector<std::string> warnings;
  std::vector<double> scores;
  const auto idx = select_similar(lib, target, n, exclude_id, &warnings, &scores);
  std::vector<WarpedAtlas> warped;
  for (std::size_t i : idx) {
    const AtlasEntry& e = lib.entry(i);
    const auto field = register_pair(reg_model, e.image, target);
    warped.push_back({warp_volume(e.image, field), warp_labels(e.labels, field)});
  }
  AtlasPrior prior = fuse_labels(warped, target, params);
  for (std::size_t i : idx) prior.selected_ids.push_back(lib.entry(i).id);
  prior.similarities = scores;
  prior.warnings = std::move(warnings);
  return prior;
}

}  // namespace deepthal
