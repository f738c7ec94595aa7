#pragma once

#include "deepthal/models.hpp"
#include "deepthal/volumes.hpp"

#include <string>
#include <vector>

namespace deepthal {

struct AtlasEntry {
  std::string id;
  Volume3D image;  // cropped T1
  LabelMap labels;
};

/// Labelled crops plus their z-scored images.
class AtlasLibrary {
 public:
  AtlasLibrary() = default;
  /// Throws DataError when empty or when entries differ in geometry or schema.
  explicit AtlasLibrary(std::vector<AtlasEntry> entries);
  static AtlasLibrary from_cases(const std::vector<CaseBundle>& cases, const std::string& modality = "T1");

  std::size_t size() const { return entries_.size(); }
  const AtlasEntry& entry(std::size_t i) const { return entries_.at(i); }
  const Volume3D& zscored(std::size_t i) const { return z_.at(i); }
  const std::vector<AtlasEntry>& entries() const { return entries_; }

 private:
  std::vector<AtlasEntry> entries_;
  std::vector<Volume3D> z_;
};

struct FusionParams {
  double h = 0.5;  // Gaussian width on z-scored intensity differences
  int radius = 1;  // patch radius (voxels)
  void validate() const;
};

struct AtlasPrior {
  LabelMap labels;
  std::vector<std::string> selected_ids;
  std::vector<double> similarities;
  FusionParams params;
  std::vector<std::string> warnings;
};

/// Normalized cross-correlation of two same-geometry volumes.
double ncc(const Volume3D& a, const Volume3D& b);

/// Indices of the `n` library images most similar (NCC) to `target`, best
/// first, ties by index. Entries whose id equals `exclude_id` are skipped.
/// A library smaller than `n` yields every index and a warning.
std::vector<std::size_t> select_similar(const AtlasLibrary& lib, const Volume3D& target, std::size_t n = 20,
                                        const std::string& exclude_id = {},
                                        std::vector<std::string>* warnings = nullptr,
                                        std::vector<double>* scores = nullptr);

struct WarpedAtlas {
  Volume3D image;
  LabelMap labels;
};

/// Local weighted majority vote: case i votes for its label at x with weight
/// sum over the patch of exp(-(I_i(y) - T(y))^2 / h^2), intensities z-scored
/// per image. Ties go to the lowest label id. Order of `warped` is irrelevant.
AtlasPrior fuse_labels(const std::vector<WarpedAtlas>& warped, const Volume3D& target, const FusionParams& params = {});

/// Trilinear (images) and nearest-neighbour (labels) resampling at
/// x + u(x), u in voxels with one channel per axis.
Volume3D warp_volume(const Volume3D& v, const nn::Tensor<float>& field);
LabelMap warp_labels(const LabelMap& m, const nn::Tensor<float>& field);

/// select_similar -> register each selected image onto `target` -> fuse_labels.
AtlasPrior build_subject_atlas(const AtlasLibrary& lib, const Volume3D& target, const TrainedModel& reg_model,
                               std::size_t n = 20, const FusionParams& params = {},
                               const std::string& exclude_id = {});

}  // namespace deepthal
