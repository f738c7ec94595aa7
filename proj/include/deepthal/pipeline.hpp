#pragma once

#include "deepthal/atlas.hpp"
#include "deepthal/models.hpp"
#include "deepthal/phantom.hpp"
#include "deepthal/preprocess.hpp"
#include "deepthal/volumes.hpp"

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepthal {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Step list. Steps run in order; each declares the space it consumes and
// produces, and the list is type-checked before anything runs.

struct StepSpec {
  std::string name;
  /// "builtin", or "external": params["command"] is run through the shell
  /// with {input} and {output} replaced by volume base paths (.hdr/.raw).
  std::string implementation = "builtin";
  std::map<std::string, std::string> params;
  bool enabled = true;
  Space input = Space::native;
  Space output = Space::native;
};

/// denoise, affine, bias, normalize, icv, second_pass, superres, crop, mirror,
/// synthesize, atlas, segment, unmirror.
std::vector<StepSpec> default_steps();

/// Throws DataError when a step is unknown, out of order, disabled although
/// required, externally implemented without an adapter, or when the space
/// tags do not chain from `input`.
void check_steps(const std::vector<StepSpec>& steps, Space input = Space::native);

// ---------------------------------------------------------------------------

struct ModelBundle {
  TrainedModel superres;      // factor 2, one channel
  TrainedModel synthesis;     // T1 -> WMn
  TrainedModel seg_atlas;     // T1, WMn, atlas prior
  TrainedModel seg_plain;     // T1, WMn
  TrainedModel registration;  // crop-space T1 pairs
  AtlasLibrary library;       // left-oriented T1 crops with labels
  Volume3D template_t1;       // mni_std
};

void save_bundle(const ModelBundle& b, const std::string& dir);
ModelBundle load_bundle(const std::string& dir);

struct PipelineConfig {
  std::vector<StepSpec> steps = default_steps();
  /// Thalamus boxes in the high-resolution template grid.
  CropBox left_box{{48, 72, 72}, {48, 48, 48}};
  CropBox right_box{{96, 72, 72}, {48, 48, 48}};
  DenoiseParams denoise;
  AffineParams affine;
  BiasParams bias;
  IcvParams icv;
  int anchors = 3;
  std::size_t atlas_cases = 20;
  FusionParams fusion;
  std::uint64_t seed = 1;
  int workers = 1;
  /// When set, intermediates are written here (and external steps exchange files here).
  std::string artifact_dir;
};

struct StepRecord {
  std::string name;
  std::string implementation;
  Space input = Space::native, output = Space::native;
  bool enabled = true;
  double seconds = 0.0;
  std::vector<std::string> artifacts;
};

struct PipelineRun {
  std::string version = kVersion;
  std::string input_id;
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;
  double total_seconds = 0.0;
  CropBox left_box, right_box;
  AffineTransform affine;
  double icv_mm3 = 0.0;
  std::vector<std::string> left_atlas_ids, right_atlas_ids;
  std::vector<std::string> warnings;
  std::string failed_step;  // empty on success
  std::optional<LabelMap> left, right;  // crop space; right is un-mirrored
};

/// Raised when a step fails; carries the partial run.
class StepFailure : public std::runtime_error {
 public:
  StepFailure(const std::string& what, std::string step, PipelineRun partial, bool numeric)
      : std::runtime_error(what), step(std::move(step)), partial(std::move(partial)), numeric(numeric) {}
  std::string step;
  PipelineRun partial;
  bool numeric = false;
};

/// Thalamus part of the pipeline on a left-oriented high-resolution T1 crop:
/// synthesize WMn, build the subject atlas, average both networks'
/// probabilities. `prior` receives the atlas when given.
nn::Tensor<float> thalamus_probabilities(const Volume3D& t1_crop, const ModelBundle& models,
                                         const PipelineConfig& config, AtlasPrior* prior = nullptr);

PipelineRun run_pipeline(const Volume3D& t1, const ModelBundle& models, const PipelineConfig& config,
                         const std::string& input_id = "subject");

/// Runs cases concurrently with `config.workers` threads; models are shared read-only.
std::vector<PipelineRun> run_pipeline_batch(const std::vector<Volume3D>& t1s, const ModelBundle& models,
                                            const PipelineConfig& config);

/// JSON provenance (labels are referenced by path when written with write_run).
std::string run_to_json(const PipelineRun& run, bool pretty = true);
/// Writes run.json plus left/right label volumes into `dir`.
void write_run(const PipelineRun& run, const std::string& dir);
PipelineRun read_run(const std::string& dir);

// ---------------------------------------------------------------------------
// Library creation: synthesize the labelling modality for unlabelled targets,
// segment with a source-trained model, and add left-right mirrored copies.

struct TransferModels {
  const TrainedModel* synthesis = nullptr;
  std::vector<std::string> synthesis_inputs{"T1"};
  const TrainedModel* segmentation = nullptr;
  std::vector<std::string> segmentation_inputs{"WMn"};
  std::string synthesized = "WMn";
};

std::vector<CaseBundle> label_transfer_workflow(const std::vector<CaseBundle>& source_labeled,
                                                const std::vector<CaseBundle>& targets, const TransferModels& models);

/// Left-right mirror of a whole case (all modalities and labels).
CaseBundle mirror_case(const CaseBundle& c);

// ---------------------------------------------------------------------------
// Phantom bundle for tests, the CLI and the acceptance runs.

struct BundleTrainingConfig {
  PhantomSpec phantom = default_phantom_spec(13, {48, 48, 48});
  int cases = 24;
  int seg_width = 8;
  int synth_width = 8;
  int superres_width = 8;
  int registration_width = 8;
  OptimizerConfig seg_opt{nn::OptimizerKind::adamax, 2e-3, 0.9, 0.999, 12, 50};
  OptimizerConfig aux_opt{nn::OptimizerKind::adamax, 2e-3, 0.9, 0.999, 6, 25};
  AugmentationPolicy augmentation;
  std::size_t atlas_cases = 20;
  std::uint64_t seed = 1;
  std::uint64_t template_seed = 999;
  HeadPhantomSpec head;  // template geometry; its thalamus spec is replaced by `phantom`
};

ModelBundle train_bundle(const BundleTrainingConfig& config);

/// Standard-resolution template of the phantom head (aligned, noise-free).
Volume3D phantom_template(const HeadPhantomSpec& head, std::uint64_t seed);

}  // namespace deepthal
