// deepthal: command-line entry point. Exit codes: 0 ok, 1 usage or config,
// 2 data error, 3 numeric failure.

#include "deepthal/config.hpp"
#include "deepthal/experiments.hpp"
#include "deepthal/pipeline.hpp"
#include "deepthal/report.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace deepthal;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flags shared by every subcommand.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "INI configuration file (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "Overrides the configured seed");
  cmd->add_option("--out", c.out, "Output directory")->required();
  cmd->add_flag("--quiet", c.quiet, "No progress messages");
}

/// One subcommand invocation: resolved config, output directory and the
/// primary outputs listed in the manifest.
class Run {
 public:
  Run(std::string command, const Common& common) : command_(std::move(command)), common_(common) {
    if (!common.config_path.empty()) {
      if (!fs::exists(common.config_path)) throw DataError("config file not found: " + common.config_path);
      config = load_config(common.config_path);
    }
    if (common.seed) config.seed = *common.seed;
    config.validate();
    fs::create_directories(common.out);
  }

  Config config;

  fs::path path(const std::string& name) const { return fs::path(common_.out) / name; }
  void log(const std::string& msg) const {
    if (!common_.quiet) std::cerr << "[" << command_ << "] " << msg << std::endl;
  }
  Logger logger() const {
    return [this](const std::string& m) { log(m); };
  }
  void output(const std::string& name) { outputs_.push_back(name); }
  void write_text(const std::string& name, const std::string& text) {
    std::ofstream f(path(name));
    f << text;
    if (!f) throw DataError("cannot write " + path(name).string());
    output(name);
  }
  /// Volume/label pairs are written as <base>.hdr + <base>.raw.
  void output_volume(const std::string& base) {
    output(base + ".hdr");
    output(base + ".raw");
  }

  void finish() const {
    {
      std::ofstream f(path("config.ini"));
      f << "; resolved configuration of this run\n" << to_ini(config);
    }
    json files = json::array();
    for (const auto& name : outputs_) {
      const fs::path p = path(name);
      if (!fs::exists(p)) continue;
      files.push_back({{"path", name}, {"bytes", fs::file_size(p)}, {"fnv1a64", fnv1a(p)}});
    }
    const json manifest{{"tool", "deepthal"}, {"version", kVersion}, {"command", command_}, {"seed", config.seed},
                        {"config", "config.ini"},  {"outputs", files}};
    std::ofstream f(path("manifest.json"));
    f << manifest.dump(2) << '\n';
  }

 private:
  static std::string fnv1a(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::uint64_t h = 14695981039346656037ull;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
      for (std::streamsize i = 0; i < in.gcount(); ++i) {
        h ^= static_cast<unsigned char>(buf[i]);
        h *= 1099511628211ull;
      }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }

  std::string command_;
  Common common_;
  std::vector<std::string> outputs_;
};

void require_path(const std::string& p, const std::string& what) {
  if (p.empty()) throw UsageError(what + " is required");
  if (!fs::exists(p)) throw DataError(what + " not found: " + p);
}

void require_volume(const std::string& base, const std::string& what) {
  if (!fs::exists(base + ".hdr")) throw DataError(what + " not found: " + base + ".hdr");
}

SplitIndices split_of(const Config& c, int n) {
  return split_dataset(n, c.data.train_fraction, c.data.val_fraction, 1.0 - c.data.train_fraction - c.data.val_fraction);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands.

void phantom_gen(Run& run, int cases) {
  const Config& c = run.config;
  const int n = cases > 0 ? cases : c.data.cases;
  run.log("generating " + std::to_string(n) + " cases");
  const auto ds = generate_dataset(c.data.phantom, n, c.seed);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < n; ++i) seeds.push_back(case_seed(c.seed, i));
  write_dataset(run.path("").string(), ds, seeds);
  run.output("dataset.json");
  for (const auto& cs : ds) {
    for (const auto& [m, v] : cs.modalities) run.output_volume(cs.meta.id + "/" + m);
    run.output_volume(cs.meta.id + "/labels");
  }
}

/// Demo subject for `segment`: native T1 of a whole-head phantom plus truth.
void phantom_head(Run& run) {
  const Config& c = run.config;
  HeadPhantomSpec hs = c.head;
  hs.thalamus = c.data.phantom;
  hs.thalamus.grid = c.pipeline.left_box.extent;
  const HeadPhantom h = generate_head(hs, c.seed);
  write_volume(run.path("t1").string(), h.t1_native);
  write_labels(run.path("left_truth").string(), h.left_labels);
  write_labels(run.path("right_truth").string(), h.right_labels);
  run.output_volume("t1");
  run.output_volume("left_truth");
  run.output_volume("right_truth");
  run.write_text("head.json", json{{"seed", c.seed}, {"icv_mm3", h.icv_mm3}}.dump(2) + "\n");
}

NetworkSpec segmentation_spec(const Config& c, int in_channels, int out_channels) {
  NetworkSpec s;
  s.arch = c.model.arch;
  s.name = to_string(c.model.arch);
  s.width = c.model.width;
  s.levels = c.model.levels;
  s.dropout_rate = c.model.dropout;
  s.input_channels = in_channels;
  s.output_channels = out_channels;
  s.init_seed = c.seed;
  return s;
}

void train_segmentation(Run& run, const std::string& data) {
  const Config& c = run.config;
  require_path(data, "dataset directory");
  const auto ds = read_dataset(data);
  const SplitIndices split = split_of(c, int(ds.size()));
  if (split.train.empty()) throw DataError("dataset too small for the configured split");
  std::vector<Sample> tr, va;
  for (int i : split.train) tr.push_back(make_sample(ds[std::size_t(i)], c.model.modalities));
  for (int i : split.val) va.push_back(make_sample(ds[std::size_t(i)], c.model.modalities));
  if (!tr.front().labels) throw DataError("training cases need labels");
  const int out_channels = tr.front().labels->schema.max_id() + 1;
  const NetworkSpec spec = segmentation_spec(c, int(c.model.modalities.size()), out_channels);
  TrainedModel model = spec.arch == Architecture::unet ? build_unet(spec) : build_dpn(spec);
  TrainOptions opts;
  opts.keep_best = c.train.keep_best && !va.empty();
  opts.on_epoch = [&](const LogEntry& e) {
    run.log("epoch " + std::to_string(e.epoch) + " loss " + fmt(e.loss) + " val " + fmt(e.val_score));
  };
  run.log("training " + spec.name + " on " + std::to_string(tr.size()) + " cases");
  model = train(std::move(model), tr, va, c.train.opt, c.train.augmentation, c.seed + 1, opts);
  save_model(model, run.path("model.ckpt").string());
  run.output("model.ckpt");
  std::ostringstream log;
  log << "epoch,loss,val_score\n";
  for (const auto& e : model.training_log) log << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.val_score) << '\n';
  run.write_text("training_log.csv", log.str());
}

void train_pipeline_bundle(Run& run) {
  const Config& c = run.config;
  BundleTrainingConfig b;
  b.phantom = c.data.phantom;
  b.phantom.grid = c.pipeline.left_box.extent;
  b.cases = c.train.bundle_cases;
  b.seg_width = c.model.width;
  b.synth_width = c.train.synth_width;
  b.superres_width = c.train.superres_width;
  b.registration_width = c.atlas.registration_width;
  b.seg_opt = c.train.bundle_seg_opt;
  b.aux_opt = c.train.bundle_aux_opt;
  b.augmentation = c.train.augmentation;
  b.atlas_cases = c.atlas.cases;
  b.seed = c.seed;
  b.head = c.head;
  run.log("training pipeline bundle on " + std::to_string(b.cases) + " phantom cases");
  const ModelBundle bundle = train_bundle(b);
  save_bundle(bundle, run.path("bundle").string());
  for (const char* f : {"superres.ckpt", "synthesis.ckpt", "seg_atlas.ckpt", "seg_plain.ckpt", "registration.ckpt",
                        "bundle.json"})
    run.output(std::string("bundle/") + f);
}

void evaluate(Run& run, const std::string& model_path, const std::string& data, const std::string& which) {
  const Config& c = run.config;
  require_path(model_path, "model");
  require_path(data, "dataset directory");
  const TrainedModel model = load_model(model_path);
  const auto ds = read_dataset(data);
  std::vector<int> idx;
  if (which == "test") {
    idx = split_of(c, int(ds.size())).test;
  } else if (which == "all") {
    for (int i = 0; i < int(ds.size()); ++i) idx.push_back(i);
  } else {
    throw UsageError("--split must be test or all");
  }
  if (idx.empty()) throw DataError("no cases to evaluate");
  if (model.spec.input_channels != int(c.model.modalities.size()))
    throw DataError("model expects " + std::to_string(model.spec.input_channels) + " input channels, config lists " +
                    std::to_string(c.model.modalities.size()) + " modalities");
  std::ostringstream csv;
  json cases = json::array();
  double sum = 0.0, whole = 0.0;
  bool header = false;
  for (int i : idx) {
    const CaseBundle& cs = ds[std::size_t(i)];
    if (!cs.labels) throw DataError("case '" + cs.meta.id + "' has no labels");
    const LabelMap pred = segment(model, make_sample(cs, c.model.modalities).input, cs.any_modality());
    const DiceReport r = dice_report(pred, *cs.labels);
    if (!header) {
      csv << "case";
      for (const auto& n : r.names) csv << ',' << n;
      csv << ",Mean,Whole Thalamus\n";
      header = true;
    }
    csv << cs.meta.id;
    for (double d : r.per_label) csv << ',' << fmt(d);
    csv << ',' << fmt(r.mean) << ',' << fmt(r.whole_thalamus) << '\n';
    json per;
    for (std::size_t k = 0; k < r.names.size(); ++k) per[r.names[k]] = r.per_label[k];
    cases.push_back({{"id", cs.meta.id}, {"per_structure", per}, {"mean", r.mean}, {"whole_thalamus", r.whole_thalamus}});
    sum += r.mean;
    whole += r.whole_thalamus;
  }
  const double n = double(idx.size());
  run.log("mean Dice " + fmt(sum / n) + " over " + std::to_string(idx.size()) + " cases");
  run.write_text("dice.csv", csv.str());
  run.write_text("dice.json",
                 json{{"split", which}, {"mean_dice", sum / n}, {"whole_thalamus", whole / n}, {"cases", cases}}.dump(2) +
                     "\n");
}

void atlas_build(Run& run, const std::string& library_dir, const std::string& target, const std::string& reg_path,
                 const std::string& exclude) {
  const Config& c = run.config;
  require_path(library_dir, "library directory");
  require_volume(target, "target volume");
  const auto cases = read_dataset(library_dir);
  const AtlasLibrary library = AtlasLibrary::from_cases(cases);
  TrainedModel reg;
  if (!reg_path.empty()) {
    require_path(reg_path, "registration model");
    reg = load_model(reg_path);
  } else {
    run.log("training registration network on the library");
    reg = train_registration(cases, c.atlas.registration_width, c.atlas.registration_opt, c.seed);
    save_model(reg, run.path("registration.ckpt").string());
    run.output("registration.ckpt");
  }
  const Volume3D t = read_volume(target);
  const AtlasPrior prior = build_subject_atlas(library, t, reg, c.atlas.cases, c.atlas.fusion, exclude);
  write_labels(run.path("atlas_prior").string(), prior.labels);
  run.output_volume("atlas_prior");
  run.write_text("atlas.json", json{{"target", target},
                                    {"selected_ids", prior.selected_ids},
                                    {"similarities", prior.similarities},
                                    {"h", prior.params.h},
                                    {"radius", prior.params.radius},
                                    {"warnings", prior.warnings}}
                                       .dump(2) +
                                   "\n");
}

void curriculum_run(Run& run) {
  CurriculumExperimentConfig cfg = run.config.curriculum;
  cfg.seed = run.config.seed;
  cfg.curriculum.state_dir = run.path("state").string();
  const auto r = run_curriculum_experiment(cfg, run.logger());
  run.output("state/metrics.jsonl");
  run.output("state/state.json");
  run.write_text("curriculum.json", json{{"seed_test_before", r.seed_before},
                                         {"seed_test_after", r.seed_after},
                                         {"shifted_before", r.shifted_before},
                                         {"shifted_after", r.shifted_after},
                                         {"iterations", r.state.iteration},
                                         {"incorporated", r.state.incorporated.size()}}
                                            .dump(2) +
                                        "\n");
}

void segment_cmd(Run& run, const std::string& input, const std::string& bundle_dir, const std::string& artifacts) {
  require_volume(input, "input volume");
  require_path(bundle_dir, "model bundle");
  PipelineConfig pc = run.config.pipeline;
  pc.seed = run.config.seed;
  pc.artifact_dir = artifacts;
  const ModelBundle bundle = load_bundle(bundle_dir);
  const Volume3D t1 = read_volume(input);
  const PipelineRun r = run_pipeline(t1, bundle, pc, fs::path(input).filename().string());
  for (const auto& w : r.warnings) run.log("warning: " + w);
  write_run(r, run.path("").string());
  run.output_volume("left_labels");
  run.output_volume("right_labels");
  run.log("done in " + fmt(r.total_seconds) + " s");
}

void report_cmd(Run& run, const std::string& run_dir, std::optional<double> icv, const std::string& normative,
                std::optional<double> age, const std::string& sex, const std::string& id) {
  require_path(run_dir, "pipeline run directory");
  const PipelineRun pr = read_run(run_dir);
  if (!pr.left || !pr.right) throw DataError("pipeline run has no label maps: " + run_dir);
  VolumetryReport r = compute_volumes(*pr.left, *pr.right, pr.left->spacing);
  r.subject_id = id.empty() ? pr.input_id : id;
  r.age = age;
  if (!sex.empty()) r.sex = sex;
  const double v = icv ? *icv : pr.icv_mm3;
  if (v > 0) set_icv(r, v);
  if (!normative.empty()) {
    require_path(normative, "normative model");
    std::ifstream f(normative);
    std::ostringstream os;
    os << f.rdbuf();
    apply_normative(r, normative_from_json(os.str()));
  }
  write_report(r, run.path("").string());
  run.output("report.json");
  run.output("report.csv");
}

void ablate(Run& run, const std::string& which) {
  const Config& c = run.config;
  if (which != "tables" && which != "dispersion" && which != "all") throw UsageError("--experiment must be tables, dispersion or all");
  if (which != "dispersion") {
    AblationConfig a = c.ablate;
    a.base_seed = c.seed;
    a.augmentation = c.train.augmentation;
    a.fusion = c.atlas.fusion;
    const AblationResult r = run_ablation(a, run.logger());
    run.write_text("ablation.csv", ablation_csv(r));
    json comps = json::array();
    for (const auto& k : r.comparisons)
      comps.push_back({{"experiment", k.experiment},
                       {"better", k.better},
                       {"worse", k.worse},
                       {"mean_better", k.mean_better},
                       {"mean_worse", k.mean_worse},
                       {"wilcoxon_p", k.test ? json(k.test->p_value) : json(nullptr)},
                       {"strict", k.strict},
                       {"margin", k.margin},
                       {"holds", k.holds}});
    run.write_text("ablation.json", json{{"comparisons", comps}}.dump(2) + "\n");
    for (const auto& k : r.comparisons)
      run.log(k.experiment + ": " + k.better + " " + fmt(k.mean_better) + " vs " + k.worse + " " + fmt(k.mean_worse) +
              (k.holds ? " (holds)" : " (does not hold)"));
  }
  if (which != "tables") {
    DispersionConfig d = c.dispersion;
    d.seed = c.seed;
    d.normative = c.report.normative;
    if (d.normative.measure != "mm3") {
      run.log("dispersion uses crop volumes without ICV: measure set to mm3");
      d.normative.measure = "mm3";
    }
    const DispersionResult r = run_dispersion_experiment(d, run.logger());
    run.write_text("normative_clean.json", normative_to_json(r.clean));
    run.write_text("normative_noisy.json", normative_to_json(r.noisy));
    json rows = json::array();
    for (const auto& s : r.comparison.structures)
      rows.push_back({{"structure", s.key},
                      {"mean_width_clean", s.mean_width_a},
                      {"mean_width_noisy", s.mean_width_b},
                      {"wilcoxon_p", s.test ? json(s.test->p_value) : json(nullptr)}});
    run.write_text("dispersion.json",
                   json{{"clean_dice", r.clean_dice},
                        {"noisy_dice", r.noisy_dice},
                        {"mean_width_clean", r.comparison.mean_width_a},
                        {"mean_width_noisy", r.comparison.mean_width_b},
                        {"wilcoxon_p", r.comparison.overall ? json(r.comparison.overall->p_value) : json(nullptr)},
                        {"significant_structures", r.comparison.significant},
                        {"structures", rows}}
                           .dump(2) +
                       "\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Thalamic nuclei segmentation on synthetic phantoms"};
  app.require_subcommand(1);
  Common common;
  std::function<void()> action;

  auto* phantom = app.add_subcommand("phantom", "Synthetic data");
  phantom->require_subcommand(1);
  int n_cases = 0;
  auto* gen = phantom->add_subcommand("gen", "Write a labelled phantom dataset");
  add_common(gen, common);
  gen->add_option("--cases", n_cases, "Overrides data.cases");
  gen->callback([&] { action = [&] { Run r("phantom gen", common); phantom_gen(r, n_cases); r.finish(); }; });
  auto* head = phantom->add_subcommand("head", "Write a whole-head phantom subject for segment");
  add_common(head, common);
  head->callback([&] { action = [&] { Run r("phantom head", common); phantom_head(r); r.finish(); }; });

  std::string data, kind = "segmentation";
  auto* train_cmd = app.add_subcommand("train", "Train a segmentation model or a pipeline bundle");
  add_common(train_cmd, common);
  train_cmd->add_option("--data", data, "Dataset directory (segmentation)");
  train_cmd->add_option("--kind", kind, "segmentation or bundle")->check(CLI::IsMember({"segmentation", "bundle"}));
  train_cmd->callback([&] {
    action = [&] {
      Run r("train", common);
      if (kind == "bundle") train_pipeline_bundle(r);
      else train_segmentation(r, data);
      r.finish();
    };
  });

  std::string model, split = "test";
  auto* eval = app.add_subcommand("evaluate", "Dice of a model on a dataset");
  add_common(eval, common);
  eval->add_option("--model", model, "Model checkpoint")->required();
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--split", split, "test (held-out split of the configured fractions) or all");
  eval->callback([&] { action = [&] { Run r("evaluate", common); evaluate(r, model, data, split); r.finish(); }; });

  std::string library, target, registration, exclude;
  auto* atlas = app.add_subcommand("atlas", "Subject atlases");
  atlas->require_subcommand(1);
  auto* build = atlas->add_subcommand("build", "Fuse a subject atlas for a target crop");
  add_common(build, common);
  build->add_option("--library", library, "Dataset directory of labelled crops")->required();
  build->add_option("--target", target, "Target volume (base path without .hdr)")->required();
  build->add_option("--registration", registration, "Registration checkpoint (trained on the library when omitted)");
  build->add_option("--exclude", exclude, "Library id that must not vote");
  build->callback([&] {
    action = [&] { Run r("atlas build", common); atlas_build(r, library, target, registration, exclude); r.finish(); };
  });

  auto* curriculum = app.add_subcommand("curriculum", "Self-training under domain shift");
  curriculum->require_subcommand(1);
  auto* crun = curriculum->add_subcommand("run", "Run the phantom curriculum experiment");
  add_common(crun, common);
  crun->callback([&] { action = [&] { Run r("curriculum run", common); curriculum_run(r); r.finish(); }; });

  std::string input, bundle, artifacts;
  auto* seg = app.add_subcommand("segment", "Full pipeline on one native T1");
  add_common(seg, common);
  seg->add_option("--input", input, "Native T1 (base path without .hdr)")->required();
  seg->add_option("--bundle", bundle, "Model bundle directory")->required();
  seg->add_option("--artifacts", artifacts, "Directory for per-step intermediate volumes");
  seg->callback([&] { action = [&] { Run r("segment", common); segment_cmd(r, input, bundle, artifacts); r.finish(); }; });

  std::string run_dir, normative, sex, id;
  std::optional<double> icv, age;
  auto* rep = app.add_subcommand("report", "Volumetry report from a segment run");
  add_common(rep, common);
  rep->add_option("--run", run_dir, "Output directory of segment")->required();
  rep->add_option("--icv", icv, "Intracranial volume in mm3 (default: the run's estimate)");
  rep->add_option("--normative", normative, "Normative model JSON");
  rep->add_option("--age", age, "Subject age in years");
  rep->add_option("--sex", sex, "Subject sex (as in the normative model)");
  rep->add_option("--id", id, "Subject id (default: the run's input id)");
  rep->callback([&] {
    action = [&] { Run r("report", common); report_cmd(r, run_dir, icv, normative, age, sex, id); r.finish(); };
  });

  std::string experiment = "tables";
  auto* abl = app.add_subcommand("ablate", "Phantom ablations and the dispersion experiment");
  add_common(abl, common);
  abl->add_option("--experiment", experiment, "tables, dispersion or all");
  abl->callback([&] { action = [&] { Run r("ablate", common); ablate(r, experiment); r.finish(); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (action) action();
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const StepFailure& e) {
    std::cerr << "pipeline failed at step '" << e.step << "': " << e.what() << '\n';
    if (!common.out.empty()) {
      try {
        write_run(e.partial, common.out);
      } catch (...) {
      }
    }
    return e.numeric ? 3 : 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
