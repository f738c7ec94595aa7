#pragma once

#include "deepthal/volumes.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace deepthal {

/// Intensity model of one modality, indexed by label id (0 = background).
/// Voxel noise std is `noise_sigma * noise_scale[label]`.
struct ModalityContrast {
  std::vector<double> mean;
  std::vector<double> noise_scale;
};

struct PhantomSpec {
  Dims grid{48, 48, 48};
  Spacing spacing = kHighResSpacing;
  int n_nuclei = 13;
  std::map<std::string, ModalityContrast> contrast;
  double noise_sigma = 0.03;
  /// Peak amplitude (voxels) of the smooth per-case displacement field.
  double deform_amplitude = 2.0;
  /// Multiplies the semi-axes of the thalamic envelope.
  double envelope_scale = 1.0;
  /// Half-width (voxels) of the intermediate-space layer between nuclei.
  /// Only used with the 13-structure schema.
  double gap = 0.5;
  /// Sub-samples per axis averaged into each voxel (partial-volume effect).
  int supersample = 1;
  std::uint64_t seed = 1;
  /// Optional explicit nucleus centres in voxel coordinates; replaces the
  /// built-in layout when non-empty.
  std::vector<std::array<double, 3>> centers;

  /// Number of seeded nuclei (the intermediate space is not seeded).
  int seeded() const { return n_nuclei == 13 ? 12 : n_nuclei; }
  LabelSchema schema() const { return LabelSchema::first(n_nuclei); }
  /// Throws DataError on an inconsistent spec (contrast tables, counts, ranges).
  void validate() const;
};

/// Mean structure volumes (voxels) of the 13 structures in the reference
/// library, used as relative phantom nucleus sizes.
const std::array<double, 13>& reference_nucleus_voxels();

/// Default T1/T2/WMn contrast tables. WMn separates nuclei much more than T1.
std::map<std::string, ModalityContrast> default_contrast(int n_nuclei);

PhantomSpec default_phantom_spec(int n_nuclei = 13, Dims grid = {48, 48, 48});

/// Nucleus centres and power-diagram weights of a spec, fitted once so the
/// undeformed nucleus volumes follow the reference ratios.
struct PhantomLayout {
  std::vector<Eigen::Vector3d> centers;
  std::vector<double> weights;
  Eigen::Vector3d center;     // envelope centre
  Eigen::Vector3d semi_axes;  // envelope semi-axes
};

PhantomLayout build_layout(const PhantomSpec& spec);

/// One cropped left-thalamus case with T1, T2 and WMn plus ground truth.
/// Deterministic in (spec, case_seed).
CaseBundle generate_case(const PhantomSpec& spec, std::uint64_t case_seed);
CaseBundle generate_case(const PhantomSpec& spec, const PhantomLayout& layout, std::uint64_t case_seed);

std::vector<CaseBundle> generate_dataset(const PhantomSpec& spec, int n_cases, std::uint64_t base_seed);

/// Seed of case `i` in a dataset generated from `base_seed`.
std::uint64_t case_seed(std::uint64_t base_seed, int i);

struct SplitIndices {
  std::vector<int> train, val, test;
};

/// Contiguous split: val and test sizes are round(n * ratio), train takes the rest.
SplitIndices split_dataset(int n, double train_ratio, double val_ratio, double test_ratio);

// ---------------------------------------------------------------------------
// Whole-head phantom used by the end-to-end pipeline.

struct HeadPhantomSpec {
  PhantomSpec thalamus = default_phantom_spec();
  /// High-resolution head grid (0.5 mm); the standard-resolution T1 is 2x coarser.
  Dims hr_grid{192, 192, 192};
  /// Crop boxes of the left and right thalamus in the high-resolution grid.
  CropBox left_box{{48, 72, 72}, {48, 48, 48}};
  CropBox right_box{{96, 72, 72}, {48, 48, 48}};
  /// Native-space misalignment: translation in standard-grid voxels and the
  /// strength of a smooth multiplicative bias field.
  std::array<double, 3> shift{0.0, 0.0, 0.0};
  double bias_strength = 0.0;
  double noise_sigma = 0.02;
};

struct HeadPhantom {
  Volume3D t1_native;        // standard-resolution input (1 mm)
  Volume3D t1_mni_std;       // aligned, bias-free standard-resolution T1
  Volume3D t1_mni_hr;        // high-resolution T1 (0.5 mm)
  Volume3D wmn_mni_hr;
  LabelMap labels_mni_hr;    // both thalami
  LabelMap left_labels;      // crop of the left thalamus
  LabelMap right_labels;     // crop of the right thalamus (not mirrored)
  Volume3D icv_mask;         // standard-resolution intracranial mask (0/1)
  double icv_mm3 = 0.0;
};

/// Head with two thalami (left at low x), skull, CSF and brain tissue.
HeadPhantom generate_head(const HeadPhantomSpec& spec, std::uint64_t case_seed);

// ---------------------------------------------------------------------------
// Dataset directories: one subdirectory per case (<id>/<modality>, <id>/labels)
// plus dataset.json listing ids, seeds and metadata.

/// `seeds` may be empty (unknown provenance); otherwise one per case.
void write_dataset(const std::string& dir, const std::vector<CaseBundle>& cases,
                   const std::vector<std::uint64_t>& seeds = {});
std::vector<CaseBundle> read_dataset(const std::string& dir);

}  // namespace deepthal
