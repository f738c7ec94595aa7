#pragma once

#include "deepthal/losses_metrics.hpp"
#include "deepthal/volumes.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace deepthal {

// ---------------------------------------------------------------------------
// Volumetry.

inline constexpr int kWholeThalamusId = 0;
inline constexpr const char* kWholeThalamusName = "Whole Thalamus";

enum class NormFlag { none, below, within, above };
std::string to_string(NormFlag f);

struct StructureVolume {
  int id = 0;  // 0: whole thalamus
  std::string name;
  Side side = Side::left;
  std::int64_t voxels = 0;
  double mm3 = 0.0;
  std::optional<double> percent_icv;
  std::optional<double> asymmetry;  // same value on both sides' rows
  NormFlag flag = NormFlag::none;
};

struct VolumetryReport {
  std::string subject_id;
  std::optional<double> age;
  std::string sex = "n/a";
  std::optional<double> icv_mm3;
  double voxel_mm3 = 0.0;
  std::vector<StructureVolume> rows;  // per side: schema structures in order, then whole thalamus

  const StructureVolume& row(int id, Side side) const;
  /// "<name>|<side>" -> value of `measure` ("mm3" or "percent_icv").
  std::map<std::string, double> measures(const std::string& measure) const;
};

/// 200 (L - R) / (L + R); nullopt when both are zero. Rejects negative volumes.
std::optional<double> asymmetry(double left_volume, double right_volume);

/// Voxel counts per schema label times the voxel volume. The whole thalamus
/// is the union of the schema labels. Both maps must share dims and schema.
VolumetryReport compute_volumes(const LabelMap& left, const LabelMap& right, const Spacing& spacing);

/// Fills percent-of-ICV values. Rejects a nonpositive ICV.
void set_icv(VolumetryReport& r, double icv_mm3);

// ---------------------------------------------------------------------------
// Normative bounds: sliding age windows of percentiles per structure and sex.

struct NormativeParams {
  double window = 10.0;  // years
  double step = 5.0;
  double lower_percentile = 5.0;
  double upper_percentile = 95.0;
  int min_per_sex = 20;
  /// Windows with fewer subjects use this many age-nearest subjects instead.
  int min_per_bin = 5;
  std::string measure = "percent_icv";  // or "mm3"
  void validate() const;
};

struct NormativeSubject {
  std::string id;
  double age = 0.0;
  std::string sex;
  std::map<std::string, double> volumes;  // keys as VolumetryReport::measures
};

struct NormativeBin {
  double center = 0.0, age_lo = 0.0, age_hi = 0.0;
  double lower = 0.0, upper = 0.0;
  int n = 0;
  double width() const { return upper - lower; }
};

struct NormativeModel {
  NormativeParams params;
  double age_min = 0.0, age_max = 0.0;
  /// structure key -> sex -> bins ordered by age.
  std::map<std::string, std::map<std::string, std::vector<NormativeBin>>> bounds;

  /// Bin whose centre is closest to `age` (ties: the younger bin).
  const NormativeBin& bin(const std::string& key, const std::string& sex, double age) const;
  /// Throws DataError when lower > upper or consecutive windows leave a gap.
  void validate() const;
};

/// Rejects fewer than `min_per_sex` subjects for any sex present, or
/// subjects with differing structure keys.
NormativeModel fit_normative(const std::vector<NormativeSubject>& population, const NormativeParams& params = {});

NormativeSubject to_normative_subject(const VolumetryReport& r, const std::string& measure);

/// Sets each row's flag against the model (needs age and sex; rows without
/// a matching structure stay `none`).
void apply_normative(VolumetryReport& r, const NormativeModel& model);

struct StructureDispersion {
  std::string key;
  double mean_width_a = 0.0, mean_width_b = 0.0;
  std::optional<WilcoxonResult> test;  // over paired bins; empty when too few differ
};

struct DispersionComparison {
  std::vector<StructureDispersion> structures;
  double mean_width_a = 0.0, mean_width_b = 0.0;
  std::optional<WilcoxonResult> overall;  // over per-structure mean widths; empty when too few differ
  int significant = 0;  // structures with p < 0.05
};

/// Pairs bins by structure, sex and centre; both models need the same layout.
DispersionComparison compare_dispersion(const NormativeModel& a, const NormativeModel& b);

// ---------------------------------------------------------------------------
// Serialization. CSV has one row per structure and side.

std::string report_to_json(const VolumetryReport& r, bool pretty = true);
std::string report_to_csv(const VolumetryReport& r);
void write_report(const VolumetryReport& r, const std::string& dir);

std::string normative_to_json(const NormativeModel& m);
NormativeModel normative_from_json(const std::string& text);

}  // namespace deepthal
