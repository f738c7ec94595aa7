#include "deepthal/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace deepthal {

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

std::vector<Sample> samples(const std::vector<CaseBundle>& cases, const std::vector<std::string>& modalities,
                            const std::vector<LabelMap>* priors = nullptr) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < cases.size(); ++i)
    out.push_back(make_sample(cases[i], modalities, priors ? &(*priors)[i] : nullptr));
  return out;
}

NetworkSpec seg_spec(Architecture arch, int width, int in_channels, int out_channels, std::uint64_t seed) {
  NetworkSpec s;
  s.arch = arch;
  s.name = to_string(arch);
  s.width = width;
  s.input_channels = in_channels;
  s.output_channels = out_channels;
  s.init_seed = seed;
  return s;
}

TrainedModel train_segmenter(Architecture arch, const std::vector<Sample>& tr, int width, int out_channels,
                             const OptimizerConfig& opt, const AugmentationPolicy& aug, std::uint64_t seed) {
  const int in = int(tr.front().input.shape.c);
  const NetworkSpec spec = seg_spec(arch, width, in, out_channels, seed);
  TrainedModel m = arch == Architecture::unet ? build_unet(spec) : build_dpn(spec);
  TrainOptions o;
  o.keep_best = false;  // no validation split at this scale
  return train(std::move(m), tr, {}, opt, aug, seed + 100, o);
}

/// Random boundary relabelling with per-structure rates: structure l loses
/// boundary voxels with probability -d_l (d_l < 0) or takes neighbouring
/// voxels with probability d_l (d_l > 0), d_l ~ N(0, sigma).
LabelMap perturb_segmentation(const LabelMap& m, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> d(std::size_t(m.schema.max_id()) + 1, 0.0);
  for (int id : m.schema.ids()) d[std::size_t(id)] = std::clamp(n(rng), -1.0, 1.0);
  LabelMap out = m;
  const auto [nx, ny, nz] = m.dims;
  auto at = [&](int x, int y, int z) { return m.data(Eigen::Index(x + nx * (y + ny * z))); };
  const int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const int l = at(x, y, z);
        for (const auto& o : off) {
          const int X = x + o[0], Y = y + o[1], Z = z + o[2];
          if (X < 0 || Y < 0 || Z < 0 || X >= nx || Y >= ny || Z >= nz) continue;
          const int k = at(X, Y, Z);
          if (k == l) continue;
          const double r = u(rng);
          if (d[std::size_t(l)] < 0 && r < -d[std::size_t(l)]) {
            out.data(Eigen::Index(x + nx * (y + ny * z))) = std::uint8_t(k);
            break;
          }
          if (d[std::size_t(k)] > 0 && r < d[std::size_t(k)]) {
            out.data(Eigen::Index(x + nx * (y + ny * z))) = std::uint8_t(k);
            break;
          }
        }
      }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

CaseBundle degrade_resolution(const CaseBundle& c, int factor) {
  CaseBundle out = c;
  for (auto& [name, v] : out.modalities) {
    Volume3D lr = upsample(avg_pool(v, factor), factor, Interp::trilinear);
    lr.space = v.space;
    lr.side = v.side;
    lr.origin = v.origin;
    lr.spacing = v.spacing;
    v = lr;
  }
  return out;
}

PhantomSpec shifted_phantom_spec(const PhantomSpec& base, double strength) {
  if (!(strength >= 0 && strength <= 1)) throw DataError("shifted_phantom_spec: strength must be in [0, 1]");
  PhantomSpec s = base;
  // Compressed, brightened contrast and more noise.
  for (auto& [name, c] : s.contrast)
    for (double& m : c.mean) m = m * (1.0 - 0.35 * strength) + 0.2 * strength;
  s.noise_sigma = base.noise_sigma * (1.0 + strength);
  return s;
}

std::vector<double> case_dice(const TrainedModel& model, const std::vector<CaseBundle>& cases,
                              const std::vector<std::string>& modalities, const std::vector<LabelMap>* priors) {
  std::vector<double> out;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (!cases[i].labels) throw DataError("case_dice: case '" + cases[i].meta.id + "' has no labels");
    const Sample s = make_sample(cases[i], modalities, priors ? &(*priors)[i] : nullptr);
    out.push_back(dice_report(segment(model, s.input, cases[i].any_modality()), *cases[i].labels).mean);
  }
  return out;
}

TrainedModel train_registration(const std::vector<CaseBundle>& cases, int width, const OptimizerConfig& opt,
                                std::uint64_t seed) {
  if (cases.size() < 2) throw DataError("train_registration: need at least two cases");
  std::vector<Sample> pairs;
  const std::size_t n = cases.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k : {std::size_t(0), std::size_t(1), std::size_t(3)}) {
      if (k == 0 && i % 5) continue;
      const Volume3D zm = zscore(cases[i].modality("T1"));
      const Volume3D zf = zscore(cases[(i + k) % n].modality("T1"));
      Sample s;
      s.id = cases[i].meta.id + "_" + std::to_string(k);
      s.input = to_tensor({&zm, &zf});
      pairs.push_back(std::move(s));
    }
  TrainOptions o;
  o.loss = LossKind::registration;
  o.keep_best = false;
  return train(build_registration_net(width, 3), pairs, {}, opt, AugmentationPolicy::none(), seed, o);
}

std::vector<LabelMap> atlas_priors(const AtlasLibrary& library, const std::vector<CaseBundle>& targets,
                                   const TrainedModel& registration, std::size_t n, const FusionParams& fusion) {
  std::vector<LabelMap> out;
  for (const auto& t : targets)
    out.push_back(build_subject_atlas(library, t.modality("T1"), registration, n, fusion, t.meta.id).labels);
  return out;
}

// ---------------------------------------------------------------------------

AblationResult run_ablation(const AblationConfig& config, const Logger& log) {
  if (config.seeds < 1 || config.train_cases < 2 || config.test_cases < 1)
    throw DataError("ablation: need seeds >= 1, train_cases >= 2, test_cases >= 1");
  AblationResult result;
  const int labels = config.phantom.n_nuclei + 1;
  const std::vector<std::string> both{"T1", "WMn"}, t1{"T1"};
  std::map<std::string, std::vector<double>> pooled;
  auto record = [&](const std::string& exp, const std::string& variant, std::uint64_t seed, std::vector<double> d) {
    AblationRow r{exp, variant, seed, d, mean_of(d)};
    say(log, exp + " " + variant + " seed " + std::to_string(seed) + " mean Dice " + std::to_string(r.mean));
    auto& p = pooled[exp + "/" + variant];
    p.insert(p.end(), d.begin(), d.end());
    result.rows.push_back(std::move(r));
  };

  for (int si = 0; si < config.seeds; ++si) {
    const std::uint64_t seed = config.base_seed + std::uint64_t(si) * 1000;
    PhantomSpec spec = config.phantom;
    spec.seed = seed;
    const auto all = generate_dataset(spec, config.train_cases + config.test_cases, seed);
    const std::vector<CaseBundle> train_set(all.begin(), all.begin() + config.train_cases);
    const std::vector<CaseBundle> test_set(all.begin() + config.train_cases, all.end());

    // Reference: DPN on T1 + WMn at full resolution, no atlas.
    const TrainedModel dpn = train_segmenter(Architecture::dpn, samples(train_set, both), config.width, labels,
                                             config.opt, config.augmentation, seed + 1);
    const auto dpn_dice = case_dice(dpn, test_set, both);
    record("architecture", "dpn", seed, dpn_dice);
    const TrainedModel unet = train_segmenter(Architecture::unet, samples(train_set, both), config.width, labels,
                                              config.opt, config.augmentation, seed + 1);
    record("architecture", "unet", seed, case_dice(unet, test_set, both));

    record("resolution", "high", seed, dpn_dice);
    std::vector<CaseBundle> lr_train, lr_test;
    for (const auto& c : train_set) lr_train.push_back(degrade_resolution(c));
    for (const auto& c : test_set) lr_test.push_back(degrade_resolution(c));
    const TrainedModel lr = train_segmenter(Architecture::dpn, samples(lr_train, both), config.width, labels,
                                            config.opt, config.augmentation, seed + 1);
    record("resolution", "standard", seed, case_dice(lr, lr_test, both));

    record("modality", "T1+WMn", seed, dpn_dice);
    const TrainedModel mono = train_segmenter(Architecture::dpn, samples(train_set, t1), config.width, labels,
                                              config.opt, config.augmentation, seed + 1);
    record("modality", "T1", seed, case_dice(mono, test_set, t1));

    // Atlas: library = training cases, leave-one-out priors for training.
    const TrainedModel reg = train_registration(train_set, 8, config.registration_opt, seed + 2);
    const AtlasLibrary library = AtlasLibrary::from_cases(train_set);
    const std::size_t n = std::min(config.atlas_cases, library.size() - 1);
    const auto train_priors = atlas_priors(library, train_set, reg, n, config.fusion);
    const auto test_priors = atlas_priors(library, test_set, reg, n, config.fusion);
    const TrainedModel with_atlas = train_segmenter(Architecture::dpn, samples(train_set, both, &train_priors),
                                                    config.width, labels, config.opt, config.augmentation, seed + 1);
    record("atlas", "no-atlas", seed, dpn_dice);
    record("atlas", "atlas", seed, case_dice(with_atlas, test_set, both, &test_priors));
    std::vector<double> ens;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
      const Sample a = make_sample(test_set[i], both);
      const Sample b = make_sample(test_set[i], both, &test_priors[i]);
      const auto p = ensemble_probs({&dpn, &with_atlas}, {a.input, b.input});
      ens.push_back(
          dice_report(argmax_labels(p, test_set[i].any_modality(), dpn.schema), *test_set[i].labels).mean);
    }
    record("atlas", "ensemble", seed, ens);
  }

  auto compare = [&](const std::string& exp, const std::string& better, const std::string& worse, bool strict,
                     double margin) {
    AblationComparison c;
    c.experiment = exp;
    c.better = better;
    c.worse = worse;
    c.strict = strict;
    c.margin = margin;
    const auto& b = pooled.at(exp + "/" + better);
    const auto& w = pooled.at(exp + "/" + worse);
    c.mean_better = mean_of(b);
    c.mean_worse = mean_of(w);
    try {
      c.test = wilcoxon_signed_rank(b, w);
    } catch (const DataError&) {
    }
    c.holds = strict ? (c.mean_better > c.mean_worse && c.test && c.test->p_value < 0.05)
                     : c.mean_better >= c.mean_worse - margin;
    result.comparisons.push_back(c);
  };
  compare("architecture", "dpn", "unet", false, 0.0);
  compare("resolution", "high", "standard", true, 0.0);
  compare("modality", "T1+WMn", "T1", true, 0.0);
  // Ensemble against the better single model of each seed and case.
  {
    std::vector<double> best;
    const auto& a = pooled.at("atlas/atlas");
    const auto& p = pooled.at("atlas/no-atlas");
    const double ma = mean_of(a), mp = mean_of(p);
    pooled["atlas/best-single"] = ma >= mp ? a : p;
    compare("atlas", "ensemble", "best-single", false, 0.005);
  }
  return result;
}

std::string ablation_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "experiment,better,worse,mean_better,mean_worse,wilcoxon_p,claim,holds\n";
  for (const auto& c : r.comparisons)
    os << c.experiment << ',' << c.better << ',' << c.worse << ',' << c.mean_better << ',' << c.mean_worse << ','
       << (c.test ? std::to_string(c.test->p_value) : "") << ','
       << (c.strict ? "better with p<0.05" : "not worse by more than " + std::to_string(c.margin)) << ','
       << (c.holds ? "yes" : "no") << '\n';
  os << "\nexperiment,variant,seed,mean_dice\n";
  for (const auto& row : r.rows) os << row.experiment << ',' << row.variant << ',' << row.seed << ',' << row.mean << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

std::vector<CaseBundle> aging_population(const PhantomSpec& base, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> age(20.0, 80.0);
  std::normal_distribution<double> spread(0.0, 0.015);
  std::vector<CaseBundle> out;
  for (int i = 0; i < n; ++i) {
    const double a = std::round(age(rng) * 10.0) / 10.0;
    const std::string sex = i % 2 ? "F" : "M";
    PhantomSpec s = base;
    s.envelope_scale = 1.0 - 0.002 * (a - 20.0) - (sex == "F" ? 0.03 : 0.0) + spread(rng);
    CaseBundle c = generate_case(s, case_seed(seed, i));
    c.meta.age = a;
    c.meta.sex = sex;
    c.meta.id = "subject" + std::to_string(i);
    out.push_back(std::move(c));
  }
  return out;
}

namespace {

NormativeSubject normative_subject(const LabelMap& labels, const CaseMeta& meta, const std::string& measure) {
  LabelMap right = labels;
  right.data.setZero();
  right.side = Side::right;
  VolumetryReport r = compute_volumes(labels, right, labels.spacing);
  r.subject_id = meta.id;
  r.age = meta.age;
  r.sex = meta.sex;
  NormativeSubject s;
  s.id = meta.id;
  s.age = meta.age;
  s.sex = meta.sex;
  for (const auto& [key, v] : r.measures(measure))
    if (key.size() > 5 && key.compare(key.size() - 5, 5, "|left") == 0) s.volumes[key] = v;
  return s;
}

}  // namespace

DispersionResult run_dispersion_experiment(const DispersionConfig& config, const Logger& log) {
  if (config.normative.measure != "mm3") throw DataError("dispersion experiment: phantom crops have no ICV, use mm3");
  const std::vector<std::string> both{"T1", "WMn"};
  PhantomSpec spec = config.phantom;
  spec.seed = config.seed;
  const auto train_set = generate_dataset(spec, config.train_cases, config.seed + 7);
  const TrainedModel model = train_segmenter(Architecture::dpn, samples(train_set, both), config.width,
                                             spec.n_nuclei + 1, config.opt, AugmentationPolicy{}, config.seed + 1);
  const auto population = aging_population(spec, config.subjects, config.seed + 11);
  std::mt19937_64 rng(config.seed + 13);
  std::vector<NormativeSubject> clean, noisy;
  std::vector<double> dc, dn;
  for (const auto& c : population) {
    const LabelMap a = segment(model, make_sample(c, both).input, c.any_modality());
    const LabelMap b = perturb_segmentation(a, config.label_noise, rng);
    dc.push_back(dice_report(a, *c.labels).mean);
    dn.push_back(dice_report(b, *c.labels).mean);
    clean.push_back(normative_subject(a, c.meta, config.normative.measure));
    noisy.push_back(normative_subject(b, c.meta, config.normative.measure));
  }
  DispersionResult r;
  r.clean_dice = mean_of(dc);
  r.noisy_dice = mean_of(dn);
  say(log, "population Dice clean " + std::to_string(r.clean_dice) + " noisy " + std::to_string(r.noisy_dice));
  r.clean = fit_normative(clean, config.normative);
  r.noisy = fit_normative(noisy, config.normative);
  r.comparison = compare_dispersion(r.clean, r.noisy);
  return r;
}

// ---------------------------------------------------------------------------

CurriculumExperimentConfig::CurriculumExperimentConfig() {
  curriculum.iterations = 6;
  curriculum.batch_size = 10;
  curriculum.k = 5;
  curriculum.finetune = {nn::OptimizerKind::adamax, 1e-3, 0.9, 0.999, 2, 40};
}

CurriculumExperimentResult run_curriculum_experiment(const CurriculumExperimentConfig& config, const Logger& log) {
  const auto& mods = config.curriculum.modalities;
  PhantomSpec base = config.phantom;
  base.seed = config.seed;
  CurriculumInputs in;
  in.seed_set = generate_dataset(base, config.seed_cases, config.seed + 1);
  for (auto& c : in.seed_set) c.meta.id = "seed-" + c.meta.id;
  in.seed_test = generate_dataset(base, config.test_cases, config.seed + 2);
  for (auto& c : in.seed_test) c.meta.id = "seedtest-" + c.meta.id;
  for (int i = 0; i < config.pool_cases; ++i) {
    const double strength = config.shift * (i + 1.0) / config.pool_cases;
    CaseBundle c = generate_case(shifted_phantom_spec(base, strength), case_seed(config.seed + 3, i));
    c.meta.id = "pool" + std::to_string(i);
    c.meta.source = "shifted";
    in.pool.push_back(std::move(c));
  }
  const PhantomSpec far = shifted_phantom_spec(base, config.shift);
  in.shifted_test = generate_dataset(far, config.test_cases, config.seed + 4);
  for (auto& c : in.shifted_test) c.meta.id = "shiftedtest-" + c.meta.id;

  const TrainedModel initial = train_segmenter(Architecture::dpn, samples(in.seed_set, mods), config.width,
                                               base.n_nuclei + 1, config.initial_opt, config.curriculum.augmentation,
                                               config.seed + 5);

  // Autoencoder over seed and pool T1 for the embedding.
  std::vector<CaseBundle> everything = in.seed_set;
  for (const auto& c : in.pool) {
    everything.push_back(c);
    everything.back().labels.reset();  // hidden ground truth
  }
  std::vector<Sample> ae_set;
  for (const auto& c : everything) {
    const Volume3D z = zscore(c.modality("T1"));
    Sample s;
    s.input = to_tensor({&z});
    s.target = s.input;
    ae_set.push_back(std::move(s));
  }
  TrainOptions mse;
  mse.loss = LossKind::mse;
  mse.keep_best = false;
  const TrainedModel ae = train(build_autoencoder(config.latent_dim, base.grid, 4), ae_set, {}, config.autoencoder_opt,
                                AugmentationPolicy::none(), config.seed + 6, mse);
  in.index = embed_all(everything, ae, "T1", pca_2d, config.seed);

  CurriculumExperimentResult r;
  r.seed_before = mean_of(case_dice(initial, in.seed_test, mods));
  r.shifted_before = mean_of(case_dice(initial, in.shifted_test, mods));
  say(log, "before: seed-test " + std::to_string(r.seed_before) + " shifted " + std::to_string(r.shifted_before));
  CurriculumConfig cc = config.curriculum;
  cc.seed = config.seed + 8;
  const CurriculumResult run = run_curriculum(in, initial, cc);
  r.seed_after = mean_of(case_dice(run.model, in.seed_test, mods));
  r.shifted_after = mean_of(case_dice(run.model, in.shifted_test, mods));
  r.state = run.state;
  say(log, "after: seed-test " + std::to_string(r.seed_after) + " shifted " + std::to_string(r.shifted_after));
  return r;
}

}  // namespace deepthal
