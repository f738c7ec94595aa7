#pragma once

#include "deepthal/models.hpp"
#include "deepthal/volumes.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace deepthal {

/// Maps an (n x d) latent matrix to (n x 2) coordinates.
using Reducer = std::function<Eigen::MatrixX2d(const Eigen::MatrixXd&, std::uint64_t seed)>;

/// Deterministic 2-D PCA projection (sign fixed by the largest loading).
Eigen::MatrixX2d pca_2d(const Eigen::MatrixXd& latents, std::uint64_t seed = 0);

struct EmbeddingIndex {
  std::vector<std::string> ids;
  std::vector<bool> labeled;
  std::vector<std::string> source;
  Eigen::MatrixXd latent;  // one row per case
  Eigen::MatrixX2d coords;

  std::size_t size() const { return ids.size(); }
  void validate() const;
};

/// Encodes `modality` of every case (cases with labels count as labeled).
/// Rejects an autoencoder without a training log.
EmbeddingIndex embed_all(const std::vector<CaseBundle>& cases, const TrainedModel& autoencoder,
                         const std::string& modality = "T1", const Reducer& reducer = pca_2d,
                         std::uint64_t seed = 0);

/// Ordered batches of unlabeled indices. Each unlabeled case is scored by its
/// mean 2-D distance to the k nearest labeled or already incorporated points;
/// every batch takes the `batch_size` lowest scores (ties by index). With
/// `chaining`, scores are updated after each batch.
std::vector<std::vector<std::size_t>> rank_and_batch(const EmbeddingIndex& index, std::size_t batch_size = 197,
                                                     std::size_t k = 50, bool chaining = true);

/// Sizes of the batches that exhaust a pool.
std::vector<std::size_t> batch_sizes(std::size_t pool, std::size_t batch_size);

enum class MixSource { seed, fresh, old };

struct MixingPolicy {
  double first_seed = 0.5, first_new = 0.5;
  double seed = 0.5, fresh = 0.25, old = 0.25;

  void validate() const;
  /// Source of one training draw in a (1-based) iteration.
  MixSource draw(int iteration, std::mt19937_64& rng) const;
};

/// Argmax of the averaged ensemble probabilities; marks the cases as pseudo-labelled.
std::vector<CaseBundle> pseudo_label(const std::vector<CaseBundle>& batch,
                                     const std::vector<const TrainedModel*>& ensemble,
                                     const std::vector<std::string>& modalities);

struct IterationMetrics {
  int iteration = 0;
  std::vector<std::string> batch_ids;
  double seed_test_dice = 0, seed_test_whole = 0;
  double shifted_dice = -1, shifted_whole = -1;  // -1 when no shifted test set
  double pseudo_label_dice = -1;                 // against hidden ground truth, when known
};

struct CurriculumState {
  int iteration = 0;
  std::vector<std::string> incorporated;
  std::vector<std::string> remaining;
  std::string checkpoint;  // model file of the latest iteration
  std::vector<IterationMetrics> history;
};

struct CurriculumConfig {
  std::size_t batch_size = 10;
  std::size_t k = 50;
  int iterations = 50;
  bool chaining = true;
  MixingPolicy policy;
  OptimizerConfig finetune{nn::OptimizerKind::adamax, 2e-3, 0.9, 0.999, 5, 50};
  AugmentationPolicy augmentation;
  std::vector<std::string> modalities{"T1", "WMn"};
  std::uint64_t seed = 1;
  /// Directory for state.json, metrics.jsonl, checkpoints and pseudo-labels.
  std::string state_dir;
};

struct CurriculumInputs {
  std::vector<CaseBundle> seed_set;   // labelled
  std::vector<CaseBundle> pool;       // labels, if present, are hidden ground truth
  std::vector<CaseBundle> seed_test;  // labelled
  std::vector<CaseBundle> shifted_test;
  EmbeddingIndex index;  // over seed_set followed by pool
};

struct CurriculumResult {
  CurriculumState state;
  TrainedModel model;
};

/// Runs (or resumes from `config.state_dir`) the self-training curriculum.
/// Every iteration selects a batch, pseudo-labels it with the current model,
/// fine-tunes under the mixing policy, evaluates and checkpoints. A
/// non-finite loss rethrows NumericError with the last completed state on disk.
CurriculumResult run_curriculum(const CurriculumInputs& inputs, const TrainedModel& initial,
                                const CurriculumConfig& config);

void save_state(const CurriculumState& s, const std::string& path);
CurriculumState load_state(const std::string& path);

}  // namespace deepthal
