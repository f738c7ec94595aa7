#pragma once

#include "deepthal/losses_metrics.hpp"
#include "deepthal/nn/graph.hpp"
#include "deepthal/nn/optim.hpp"
#include "deepthal/volumes.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace deepthal {

enum class Architecture { dpn, unet, synthesis, superres, autoencoder, registration };
enum class Head { softmax, linear, displacement };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);
std::string to_string(Head h);

struct NetworkSpec {
  std::string name = "dpn";
  Architecture arch = Architecture::dpn;
  int input_channels = 2;
  int output_channels = 14;
  int width = 56;
  int levels = 4;
  double dropout_rate = 0.2;
  Head head = Head::softmax;
  /// DPN conv blocks per level, coarsest first (the 1/8 level has three).
  std::vector<int> blocks{3, 3, 3, 1};
  /// Synthesis only: auxiliary heads on the coarser decoder levels.
  bool deeply_supervised = true;
  /// Autoencoder only.
  int latent_dim = 16;
  /// Grid the dense layers of the autoencoder are sized for.
  Dims reference_grid{0, 0, 0};
  /// Superresolution factor.
  int factor = 2;
  std::uint64_t init_seed = 1;

  /// Throws DataError when fields are out of range.
  void validate() const;
};

struct LogEntry {
  int epoch = 0;
  double loss = 0.0;
  double val_score = 0.0;  // mean validation Dice for segmentation, -loss otherwise
};

struct TrainedModel {
  NetworkSpec spec;
  nn::Network<float> net;
  LabelWeights weights;  // segmentation only
  LabelSchema schema;    // segmentation only
  std::vector<LogEntry> training_log;
  int best_epoch = 0;

  std::int64_t parameter_count() const { return net.parameter_count(); }
};

// ---------------------------------------------------------------------------
// Builders. Every builder returns an untrained model with He-normal weights.

nn::Graph dpn_graph(const NetworkSpec& spec);
nn::Graph unet_graph(const NetworkSpec& spec);
nn::Graph synthesis_graph(const NetworkSpec& spec);
nn::Graph superres_graph(const NetworkSpec& spec);
nn::Graph autoencoder_graph(const NetworkSpec& spec);
nn::Graph registration_graph(const NetworkSpec& spec);
nn::Graph build_graph(const NetworkSpec& spec);

TrainedModel build_model(const NetworkSpec& spec);
TrainedModel build_dpn(NetworkSpec spec);
TrainedModel build_unet(NetworkSpec spec);
/// in_channels 1 (T1) or 2 (T1 + T2); linear head regressing WMn.
TrainedModel build_synthesis_net(int in_channels, bool deeply_supervised, int width = 16, int levels = 3);
TrainedModel build_superres_net(int factor = 2, int width = 16);
TrainedModel build_autoencoder(int latent_dim, Dims reference_grid, int width = 8);
TrainedModel build_registration_net(int width = 8, int levels = 3);

/// Closed-form trainable-parameter count of the DPN and UNET builders,
/// computed from the spec alone (no graph).
std::int64_t dpn_parameter_formula(const NetworkSpec& spec);
std::int64_t unet_parameter_formula(const NetworkSpec& spec);

std::int64_t count_parameters(const TrainedModel& model);

// ---------------------------------------------------------------------------
// Data and training.

/// One training or evaluation example. `input` channels are z-scored.
struct Sample {
  std::string id;
  nn::Tensor<float> input;
  std::optional<LabelMap> labels;           // segmentation target
  std::optional<nn::Tensor<float>> target;  // regression target
};

/// Stacks the named modalities (z-scored) plus an optional z-scored
/// hard-label atlas channel.
Sample make_sample(const CaseBundle& c, const std::vector<std::string>& modalities,
                   const LabelMap* atlas = nullptr);
/// Regression pair with z-scored inputs. The target is z-scored on its own,
/// or with the first input's mean and std when `shared_stats` is set.
Sample make_regression_sample(const std::vector<const Volume3D*>& inputs, const Volume3D& target,
                              bool shared_stats = false);
/// z-scored atlas label map as a float volume.
Volume3D atlas_channel(const LabelMap& atlas);

struct AugmentationPolicy {
  double probability = 0.5;  // per transform family
  double resize_range = 0.08;
  double rotation_degrees = 8.0;
  double elastic_amplitude = 1.0;  // voxels
  double contrast_range = 0.1;
  double brightness_range = 0.1;
  double noise_sigma_max = 0.05;

  static AugmentationPolicy none() { return {0.0, 0, 0, 0, 0, 0, 0}; }
  void validate() const;
};

/// Random geometric and intensity transform; labels use nearest neighbour,
/// images and regression targets trilinear.
Sample augment(const Sample& s, const AugmentationPolicy& policy, std::mt19937_64& rng);

struct OptimizerConfig {
  nn::OptimizerKind algorithm = nn::OptimizerKind::adamax;
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int epochs = 1500;
  int steps_per_epoch = 50;

  void validate() const;
};

enum class LossKind { composite, mse, registration };

struct TrainOptions {
  LossKind loss = LossKind::composite;
  double eps = 1e-7;
  double smoothness_weight = 0.5;  // registration
  /// Optional custom case sampler (curriculum mixing); uniform otherwise.
  std::function<std::size_t(std::mt19937_64&)> sampler;
  /// Keep the best-validation weights (otherwise the last ones).
  bool keep_best = true;
  /// Called after every epoch with the newest log entry.
  std::function<void(const LogEntry&)> on_epoch;
};

/// Trains in place and returns the model with appended log. Segmentation
/// models compute label weights from `train_set` when none are set yet.
/// Throws NumericError on a non-finite loss.
TrainedModel train(TrainedModel model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                   const OptimizerConfig& opt, const AugmentationPolicy& aug, std::uint64_t seed,
                   const TrainOptions& options = {});

/// Loss of one sample without augmentation or parameter updates.
double evaluate_loss(const TrainedModel& model, const Sample& s, const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Inference.

/// Probabilities (softmax head) or primary output, padded internally to the
/// graph's divisor and cropped back.
nn::Tensor<float> predict(const TrainedModel& model, const nn::Tensor<float>& input);
LabelMap segment(const TrainedModel& model, const nn::Tensor<float>& input, const Volume3D& like);
/// Average of ensemble member probabilities.
nn::Tensor<float> ensemble_probs(const std::vector<const TrainedModel*>& models,
                                 const std::vector<nn::Tensor<float>>& inputs);
double mean_dice(const TrainedModel& model, const std::vector<Sample>& samples);

/// Latent vector of the autoencoder.
Eigen::VectorXf encode(const TrainedModel& autoencoder, const nn::Tensor<float>& input);
/// Displacement field (3 channels, voxels) mapping `moving` onto `fixed`.
nn::Tensor<float> register_pair(const TrainedModel& reg, const Volume3D& moving, const Volume3D& fixed);

// ---------------------------------------------------------------------------
// Checkpoints: magic line, 8-byte little-endian header length, JSON header
// (spec, layer list, label weights, log), then float32 state.

void save_model(const TrainedModel& model, const std::string& path);
TrainedModel load_model(const std::string& path);

}  // namespace deepthal
