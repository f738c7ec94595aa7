#pragma once

#include "deepthal/experiments.hpp"
#include "deepthal/pipeline.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace deepthal {

/// Invalid configuration; `key` is the offending "section.key" path.
struct ConfigError : std::runtime_error {
  ConfigError(const std::string& key, const std::string& what)
      : std::runtime_error(key + ": " + what), key(key) {}
  std::string key;
};

struct DataSection {
  PhantomSpec phantom = default_phantom_spec(13, {48, 48, 48});
  int cases = 40;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
};

struct ModelSection {
  Architecture arch = Architecture::dpn;
  int width = 8;
  int levels = 4;
  double dropout = 0.2;
  std::vector<std::string> modalities{"T1", "WMn"};
};

struct TrainSection {
  OptimizerConfig opt{nn::OptimizerKind::adamax, 4e-3, 0.9, 0.999, 20, 50};
  AugmentationPolicy augmentation;
  bool keep_best = true;
  // Pipeline bundle (train --kind bundle).
  int bundle_cases = 24;
  int synth_width = 8;
  int superres_width = 8;
  OptimizerConfig bundle_seg_opt{nn::OptimizerKind::adamax, 2e-3, 0.9, 0.999, 12, 50};
  OptimizerConfig bundle_aux_opt{nn::OptimizerKind::adamax, 2e-3, 0.9, 0.999, 6, 25};
};

struct AtlasSection {
  std::size_t cases = 20;
  FusionParams fusion;
  int registration_width = 8;
  OptimizerConfig registration_opt{nn::OptimizerKind::adamax, 2e-3, 0.9, 0.999, 4, 25};
};

struct ReportSection {
  NormativeParams normative;
};

/// Every knob of every subcommand. `seed` is the single source of randomness:
/// section seeds are derived from it when a run starts.
struct Config {
  std::uint64_t seed = 1;
  DataSection data;
  ModelSection model;
  TrainSection train;
  AtlasSection atlas;
  CurriculumExperimentConfig curriculum;
  PipelineConfig pipeline;
  HeadPhantomSpec head;  // geometry for pipeline bundles and demo subjects
  ReportSection report;
  AblationConfig ablate;
  DispersionConfig dispersion;

  /// Cross-field checks; throws ConfigError.
  void validate() const;
};

/// INI text; keys before the first section are top level. Unknown sections
/// or keys throw ConfigError naming the path. Missing keys keep defaults.
Config config_from_ini(const std::string& text);
Config load_config(const std::string& path);
/// Complete resolved config; config_from_ini(to_ini(c)) reproduces c.
std::string to_ini(const Config& c);

/// Sets one "section.key" (or top-level "key") value.
void set_config_value(Config& c, const std::string& path, const std::string& value);
/// All known "section.key" paths in file order.
std::vector<std::string> config_keys();

}  // namespace deepthal
