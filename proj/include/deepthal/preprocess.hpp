#pragma once

#include "deepthal/volumes.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace deepthal {

// ---------------------------------------------------------------------------
// Denoising: non-local means over patch_radius / search_radius neighbourhoods.

struct DenoiseParams {
  int patch_radius = 1;   // 3^3 patches
  int search_radius = 3;  // 7^3 search window
  double h = 1.0;         // filtering strength in units of the noise sigma
  double sigma = -1.0;    // < 0: estimated from the volume
  void validate() const;
};

/// Robust noise estimate from pseudo-residuals against the 6-neighbour mean.
double estimate_noise_sigma(const Volume3D& v);

Volume3D denoise(const Volume3D& v, const DenoiseParams& params = {});

// ---------------------------------------------------------------------------
// Multiplicative bias field: polynomial in log intensity fitted to
// neighbour differences, with tissue edges rejected by robust reweighting.

struct BiasParams {
  int order = 3;
  double edge_threshold = 0.2;  // initial cut on |log ratio| between neighbours
  int iterations = 5;
  /// Automatic mask: voxels above this fraction of the 99th percentile.
  double mask_fraction = 0.1;
  void validate() const;
};

struct BiasResult {
  Volume3D corrected;
  Volume3D field;  // corrected = input / field (mean over the mask preserved)
  std::vector<std::string> warnings;
};

/// `mask` (nonzero voxels) restricts the fit; the field is applied everywhere.
BiasResult bias_correct(const Volume3D& v, const Volume3D* mask = nullptr, const BiasParams& params = {});

// ---------------------------------------------------------------------------
// Affine registration to a template (12 degrees of freedom, NCC objective).

/// Maps fixed voxel p to moving voxel c_m + t + A (p - c_f), where c_f and c_m
/// are the grid centres.
struct AffineTransform {
  Eigen::Matrix3d A = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p, const Dims& fixed, const Dims& moving) const;
  double distance_to_identity() const;
};

struct AffineParams {
  std::vector<int> pyramid{4, 2, 1};  // coarse to fine downsampling factors
  int iterations = 40;                // BFGS iterations per level
  double gradient_tolerance = 1e-7;
  void validate() const;
};

struct AffineResult {
  Volume3D image;  // resampled onto the template grid
  AffineTransform transform;
  std::vector<double> trace;  // objective (NCC) after every accepted step
};

AffineResult affine_to_template(const Volume3D& v, const Volume3D& tmpl, const AffineParams& params = {});

/// Resamples `moving` on `fixed`'s grid (trilinear, edge clamped).
Volume3D apply_affine(const Volume3D& moving, const AffineTransform& tr, const Volume3D& fixed);
/// Nearest-neighbour version for label maps; the schema is kept.
LabelMap apply_affine(const LabelMap& moving, const AffineTransform& tr, const Volume3D& fixed);

// ---------------------------------------------------------------------------
// Intensity normalisation through tissue anchors.

/// Medians of `k` k-means intensity classes, ascending. Rejects
/// degenerate histograms (fewer distinct classes than anchors).
std::vector<double> intensity_anchors(const Volume3D& v, int k, const Volume3D* mask = nullptr);

/// Piecewise-linear map through strictly increasing anchors; the end
/// segments extend linearly.
Volume3D piecewise_linear(const Volume3D& v, const std::vector<double>& from, const std::vector<double>& to);

/// Maps the anchors of `v` onto `targets` (same count). Empty targets map
/// onto evenly spaced values in (0, 1]. Zero is kept fixed when all anchors
/// and targets are positive.
Volume3D normalize_intensity(const Volume3D& v, int anchors = 3, const std::vector<double>& targets = {},
                             const Volume3D* mask = nullptr);

// ---------------------------------------------------------------------------
// Intracranial cavity.

struct IcvParams {
  double threshold_fraction = 0.1;  // of the 99th percentile
  int closing_radius = 1;
  void validate() const;
};

struct IcvResult {
  Volume3D mask;  // 0/1
  std::int64_t voxels = 0;
  double mm3 = 0.0;
};

IcvResult extract_icv(const Volume3D& v, const IcvParams& params = {});

/// Helpers shared with the tests.
double percentile(std::vector<float> values, double q);
Volume3D fill_holes(const Volume3D& mask);
Volume3D largest_component(const Volume3D& mask);

}  // namespace deepthal
