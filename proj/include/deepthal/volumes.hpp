#pragma once

#include "deepthal/nn/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deepthal {

using Dims = std::array<int, 3>;
using Spacing = std::array<double, 3>;

/// Anatomical space of a grid. `mni_hr` is the 0.5 mm isotropic template space.
enum class Space { native, mni_std, mni_hr, crop };
/// Hemisphere of a cropped thalamus; `none` for whole-head grids.
enum class Side { left, right, none };

std::string to_string(Space s);
std::string to_string(Side s);
Space space_from_string(const std::string& s);
Side side_from_string(const std::string& s);

inline constexpr Spacing kHighResSpacing{0.5, 0.5, 0.5};

/// Thrown for invalid geometry, schema or data (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a computation produces non-finite values (CLI exit code 3).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scalar grid with geometry metadata. Axis 0 is the left-right axis in
/// MNI-oriented spaces; index order is (x, y, z) with z fastest.
template <typename T>
struct Grid {
  Dims dims{0, 0, 0};
  Spacing spacing{1.0, 1.0, 1.0};
  Space space = Space::native;
  Side side = Side::none;
  /// Offset of voxel (0,0,0) inside the grid this one was cropped from.
  Dims origin{0, 0, 0};
  Eigen::Array<T, Eigen::Dynamic, 1> data;

  Grid() = default;
  Grid(Dims d, Spacing sp = {1.0, 1.0, 1.0}, Space s = Space::native, Side sd = Side::none)
      : dims(d), spacing(sp), space(s), side(sd) {
    check_geometry();
    data = Eigen::Array<T, Eigen::Dynamic, 1>::Zero(voxels());
  }

  std::int64_t voxels() const { return std::int64_t(dims[0]) * dims[1] * dims[2]; }
  std::int64_t index(int x, int y, int z) const { return (std::int64_t(x) * dims[1] + y) * dims[2] + z; }
  T& operator()(int x, int y, int z) { return data(index(x, y, z)); }
  T operator()(int x, int y, int z) const { return data(index(x, y, z)); }
  double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }

  template <typename U>
  bool same_geometry(const Grid<U>& o) const {
    return dims == o.dims && spacing == o.spacing && space == o.space;
  }

  void check_geometry() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw DataError("grid dims must be positive");
      if (!(spacing[a] > 0) || !std::isfinite(spacing[a])) throw DataError("grid spacing must be > 0");
    }
    if (space == Space::mni_hr && spacing != kHighResSpacing)
      throw DataError("mni_hr grids must have 0.5 mm isotropic spacing");
  }

  /// Same metadata, new dims, zero data.
  template <typename U = T>
  Grid<U> like(Dims d) const {
    Grid<U> g;
    g.dims = d;
    g.spacing = spacing;
    g.space = space;
    g.side = side;
    g.origin = origin;
    g.data = Eigen::Array<U, Eigen::Dynamic, 1>::Zero(std::int64_t(d[0]) * d[1] * d[2]);
    return g;
  }
};

using Volume3D = Grid<float>;

/// Ordered (id, name) list of the thalamic structures.
struct LabelSchema {
  std::vector<std::pair<int, std::string>> entries;

  /// The 13-structure thalamic schema (ids 1..13).
  static const LabelSchema& thalamus();
  /// First `n` structures of the thalamic schema.
  static LabelSchema first(int n);

  int size() const { return int(entries.size()); }
  int max_id() const { return entries.empty() ? 0 : entries.back().first; }
  bool contains(int id) const;
  const std::string& name(int id) const;
  std::vector<int> ids() const;
  bool operator==(const LabelSchema& o) const { return entries == o.entries; }
};

struct LabelMap : Grid<std::uint8_t> {
  LabelSchema schema = LabelSchema::thalamus();

  LabelMap() = default;
  LabelMap(Grid<std::uint8_t> g, LabelSchema s) : Grid<std::uint8_t>(std::move(g)), schema(std::move(s)) {}
  LabelMap(Dims d, Spacing sp, Space s, Side side, LabelSchema schema_)
      : Grid<std::uint8_t>(d, sp, s, side), schema(std::move(schema_)) {}

  /// Throws DataError when any value lies outside {0} ∪ schema ids.
  void validate() const;
  /// Voxel count for every id 0..schema.max_id().
  std::vector<std::int64_t> histogram() const;
};

struct CaseMeta {
  std::string id;
  Side side = Side::none;
  double age = 0.0;
  std::string sex = "n/a";
  std::string source;
  bool pseudo_label = false;
};

/// One thalamus sample: named modalities sharing one geometry plus optional labels.
struct CaseBundle {
  std::map<std::string, Volume3D> modalities;
  std::optional<LabelMap> labels;
  CaseMeta meta;

  const Volume3D& modality(const std::string& name) const;
  const Volume3D& any_modality() const;
  /// Throws DataError when member geometries differ or a cropped case lacks a side.
  void validate() const;
};

struct CropBox {
  Dims offset{0, 0, 0};
  Dims extent{0, 0, 0};
};

struct PadRecord {
  Dims before{0, 0, 0};
  Dims after{0, 0, 0};
  bool empty() const { return before == Dims{0, 0, 0} && after == Dims{0, 0, 0}; }
};

enum class PadMode { edge, zero };
enum class Interp { trilinear, nearest };

// ---------------------------------------------------------------------------
// Geometry operations. All are pure; label maps keep their schema.

namespace detail {

inline void check_box(const Dims& dims, const CropBox& box) {
  for (int a = 0; a < 3; ++a)
    if (box.offset[a] < 0 || box.extent[a] < 1 || box.offset[a] + box.extent[a] > dims[a])
      throw DataError("crop box offset (" + std::to_string(box.offset[0]) + "," + std::to_string(box.offset[1]) +
                      "," + std::to_string(box.offset[2]) + ") extent (" + std::to_string(box.extent[0]) + "," +
                      std::to_string(box.extent[1]) + "," + std::to_string(box.extent[2]) +
                      ") does not fit volume " + std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + "x" +
                      std::to_string(dims[2]));
}

template <typename G, typename Fn>
G remap(const G& v, Dims out_dims, Fn&& source_index) {
  G out = v;
  static_cast<Grid<typename decltype(v.data)::Scalar>&>(out) =
      v.template like<typename decltype(v.data)::Scalar>(out_dims);
  for (int x = 0; x < out_dims[0]; ++x)
    for (int y = 0; y < out_dims[1]; ++y)
      for (int z = 0; z < out_dims[2]; ++z) out.data(out.index(x, y, z)) = v.data(source_index(x, y, z));
  return out;
}

}  // namespace detail

/// Extracts `box`. Requires the source to be in mni_hr space (or already a
/// crop); output space is `crop` and `origin` accumulates the offset.
template <typename G>
G crop_roi(const G& v, const CropBox& box, bool require_mni_hr = true) {
  if (require_mni_hr && v.space != Space::mni_hr && v.space != Space::crop)
    throw DataError("crop_roi: input must be in mni_hr space, got " + to_string(v.space));
  detail::check_box(v.dims, box);
  G out = detail::remap(v, box.extent, [&](int x, int y, int z) {
    return v.index(x + box.offset[0], y + box.offset[1], z + box.offset[2]);
  });
  out.space = Space::crop;
  for (int a = 0; a < 3; ++a) out.origin[a] = v.origin[a] + box.offset[a];
  return out;
}

/// Reverses axis 0 (left-right) and toggles the side tag.
template <typename G>
G mirror_lr(const G& v) {
  G out = detail::remap(v, v.dims, [&](int x, int y, int z) { return v.index(v.dims[0] - 1 - x, y, z); });
  if (v.side == Side::left) out.side = Side::right;
  else if (v.side == Side::right) out.side = Side::left;
  return out;
}

inline int round_up(int n, int m) { return (n + m - 1) / m * m; }

/// Pads every axis up to the next multiple of `m` (padding split evenly,
/// extra voxel after). Returns the padded grid and the record needed to undo it.
template <typename G>
std::pair<G, PadRecord> pad_to_multiple(const G& v, int m, PadMode mode = PadMode::edge) {
  if (m < 1) throw DataError("pad_to_multiple: m must be >= 1");
  PadRecord rec;
  Dims nd;
  for (int a = 0; a < 3; ++a) {
    nd[a] = round_up(v.dims[a], m);
    const int total = nd[a] - v.dims[a];
    rec.before[a] = total / 2;
    rec.after[a] = total - total / 2;
  }
  if (rec.empty()) return {v, rec};
  using T = typename decltype(v.data)::Scalar;
  G out = v;
  static_cast<Grid<T>&>(out) = v.template like<T>(nd);
  for (int x = 0; x < nd[0]; ++x)
    for (int y = 0; y < nd[1]; ++y)
      for (int z = 0; z < nd[2]; ++z) {
        const int p[3] = {x - rec.before[0], y - rec.before[1], z - rec.before[2]};
        bool inside = true;
        int s[3];
        for (int a = 0; a < 3; ++a) {
          inside = inside && p[a] >= 0 && p[a] < v.dims[a];
          s[a] = std::clamp(p[a], 0, v.dims[a] - 1);
        }
        out(x, y, z) = (inside || mode == PadMode::edge) ? v(s[0], s[1], s[2]) : T(0);
      }
  for (int a = 0; a < 3; ++a) out.origin[a] = v.origin[a] - rec.before[a];
  return {out, rec};
}

template <typename G>
G unpad(const G& v, const PadRecord& rec) {
  if (rec.empty()) return v;
  CropBox box;
  for (int a = 0; a < 3; ++a) {
    box.offset[a] = rec.before[a];
    box.extent[a] = v.dims[a] - rec.before[a] - rec.after[a];
  }
  const Space keep = v.space;
  G out = crop_roi(v, box, false);
  out.space = keep;
  return out;
}

/// Zero-mean, unit population standard deviation. Rejects constant volumes.
Volume3D zscore(const Volume3D& v);

/// Block mean over factor^3 neighbourhoods; dims must be divisible by factor.
Volume3D avg_pool(const Volume3D& v, int factor);

/// Integer-factor upsampling. Label maps are always nearest-neighbour.
Volume3D upsample(const Volume3D& v, int factor, Interp kind = Interp::trilinear);
LabelMap upsample(const LabelMap& v, int factor);

/// Majority-vote downsampling of a label map by an integer factor (ties -> lowest id).
LabelMap downsample_labels(const LabelMap& v, int factor);

/// Resizes to arbitrary dims (trilinear), keeping physical extent.
Volume3D resize(const Volume3D& v, Dims dims);

/// Multi-channel network input from same-geometry volumes.
nn::Tensor<float> to_tensor(const std::vector<const Volume3D*>& channels);
/// One channel of a tensor as a volume with `like`'s metadata.
Volume3D from_tensor(const nn::Tensor<float>& t, int channel, const Volume3D& like);

// ---------------------------------------------------------------------------
// Serialization: raw little-endian block `<base>.raw` plus text header `<base>.hdr`.

void write_volume(const std::string& base, const Volume3D& v);
void write_labels(const std::string& base, const LabelMap& v);
Volume3D read_volume(const std::string& base);
LabelMap read_labels(const std::string& base);

}  // namespace deepthal
