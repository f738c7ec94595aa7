#pragma once

#include "deepthal/atlas.hpp"
#include "deepthal/curriculum.hpp"
#include "deepthal/losses_metrics.hpp"
#include "deepthal/models.hpp"
#include "deepthal/phantom.hpp"
#include "deepthal/report.hpp"

#include <functional>
#include <string>
#include <vector>

namespace deepthal {

using Logger = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Phantom helpers.

/// Every modality average-pooled by `factor` and upsampled back (trilinear);
/// labels and geometry unchanged.
CaseBundle degrade_resolution(const CaseBundle& c, int factor = 2);

/// Contrast and noise of `base` moved toward another acquisition: strength 0
/// is the identity, 1 the fully shifted domain.
PhantomSpec shifted_phantom_spec(const PhantomSpec& base, double strength);

/// Per-case Dice means of `model` on `cases` (inputs built from `modalities`,
/// plus the matching atlas prior when `priors` is given).
std::vector<double> case_dice(const TrainedModel& model, const std::vector<CaseBundle>& cases,
                              const std::vector<std::string>& modalities,
                              const std::vector<LabelMap>* priors = nullptr);

/// Registration network trained on pairs of `cases` (every fifth pair is
/// the identity).
TrainedModel train_registration(const std::vector<CaseBundle>& cases, int width, const OptimizerConfig& opt,
                                std::uint64_t seed);

/// Subject atlas priors for `targets` from a library of `library` (a case
/// never votes for itself).
std::vector<LabelMap> atlas_priors(const AtlasLibrary& library, const std::vector<CaseBundle>& targets,
                                   const TrainedModel& registration, std::size_t n, const FusionParams& fusion);

// ---------------------------------------------------------------------------
// Ablations on phantoms: architecture, resolution, modality, atlas.

struct AblationConfig {
  PhantomSpec phantom = default_phantom_spec(8, {32, 32, 32});
  int train_cases = 8;
  int test_cases = 8;
  int seeds = 5;
  std::uint64_t base_seed = 1;
  int width = 8;
  OptimizerConfig opt{nn::OptimizerKind::adamax, 4e-3, 0.9, 0.999, 8, 40};
  OptimizerConfig registration_opt{nn::OptimizerKind::adamax, 2e-3, 0.9, 0.999, 4, 25};
  AugmentationPolicy augmentation;
  std::size_t atlas_cases = 5;
  FusionParams fusion;
};

struct AblationRow {
  std::string experiment, variant;
  std::uint64_t seed = 0;
  std::vector<double> case_dice;
  double mean = 0.0;
};

/// `better` is expected to beat `worse`. Strict claims need a higher mean and
/// paired Wilcoxon p < 0.05 over (seed, test case) pairs; non-inferiority
/// claims need mean(better) >= mean(worse) - margin.
struct AblationComparison {
  std::string experiment, better, worse;
  double mean_better = 0.0, mean_worse = 0.0;
  std::optional<WilcoxonResult> test;
  bool strict = false;
  double margin = 0.0;
  bool holds = false;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<AblationComparison> comparisons;
};

AblationResult run_ablation(const AblationConfig& config, const Logger& log = {});
/// Comparison table as CSV.
std::string ablation_csv(const AblationResult& r);

// ---------------------------------------------------------------------------
// Dispersion of normative bounds from a cleaner versus a noisier segmentation
// of the same population. The noisier one is the trained model's output with
// random per-subject, per-structure boundary relabelling.

struct DispersionConfig {
  PhantomSpec phantom = default_phantom_spec(8, {32, 32, 32});
  int subjects = 60;  // alternating sex
  int train_cases = 12;
  double label_noise = 0.3;  // std of the per-structure boundary flip rates
  int width = 8;
  OptimizerConfig opt{nn::OptimizerKind::adamax, 4e-3, 0.9, 0.999, 10, 40};
  NormativeParams normative{10.0, 5.0, 5.0, 95.0, 20, 5, "mm3"};
  std::uint64_t seed = 1;
};

struct DispersionResult {
  NormativeModel clean, noisy;
  DispersionComparison comparison;
  double clean_dice = 0.0, noisy_dice = 0.0;
};

/// Synthetic population: ages 20-80, thalamus size shrinking with age and
/// smaller in one sex, plus individual spread.
std::vector<CaseBundle> aging_population(const PhantomSpec& base, int n, std::uint64_t seed);

DispersionResult run_dispersion_experiment(const DispersionConfig& config, const Logger& log = {});

// ---------------------------------------------------------------------------
// Self-training under domain shift.

struct CurriculumExperimentConfig {
  PhantomSpec phantom = default_phantom_spec(8, {32, 32, 32});
  int seed_cases = 24;
  int pool_cases = 60;
  int test_cases = 8;  // per domain
  double shift = 1.0;  // pool strengths spread over [0, shift]; shifted test at `shift`
  int width = 8;
  OptimizerConfig initial_opt{nn::OptimizerKind::adamax, 4e-3, 0.9, 0.999, 10, 40};
  int latent_dim = 16;
  OptimizerConfig autoencoder_opt{nn::OptimizerKind::adamax, 2e-3, 0.9, 0.999, 3, 25};
  CurriculumConfig curriculum;  // iterations/batch_size default to 6 x 10 here
  std::uint64_t seed = 1;
  CurriculumExperimentConfig();
};

struct CurriculumExperimentResult {
  double seed_before = 0, seed_after = 0;
  double shifted_before = 0, shifted_after = 0;
  CurriculumState state;
};

CurriculumExperimentResult run_curriculum_experiment(const CurriculumExperimentConfig& config, const Logger& log = {});

}  // namespace deepthal
