#include "deepthal/pipeline.hpp"

#include "deepthal/losses_metrics.hpp"

#include "json.hpp"

#include <Eigen/LU>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <unistd.h>

namespace deepthal {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct StepInfo {
  const char* name;
  Space in, out;
  bool required;
  bool external_ok;
};

const std::vector<StepInfo>& step_table() {
  static const std::vector<StepInfo> t{
      {"denoise", Space::native, Space::native, false, true},
      {"affine", Space::native, Space::mni_std, false, true},
      {"bias", Space::mni_std, Space::mni_std, false, true},
      {"normalize", Space::mni_std, Space::mni_std, false, true},
      {"icv", Space::mni_std, Space::mni_std, false, false},
      {"second_pass", Space::mni_std, Space::mni_std, false, true},
      {"superres", Space::mni_std, Space::mni_hr, true, true},
      {"crop", Space::mni_hr, Space::crop, true, false},
      {"mirror", Space::crop, Space::crop, false, false},
      {"synthesize", Space::crop, Space::crop, true, false},
      {"atlas", Space::crop, Space::crop, false, false},
      {"segment", Space::crop, Space::crop, true, false},
      {"unmirror", Space::crop, Space::crop, false, false},
  };
  return t;
}

int step_index(const std::string& name) {
  const auto& t = step_table();
  for (std::size_t i = 0; i < t.size(); ++i)
    if (name == t[i].name) return int(i);
  return -1;
}

const StepSpec* find_step(const std::vector<StepSpec>& steps, const std::string& name) {
  for (const auto& s : steps)
    if (s.name == name) return &s;
  return nullptr;
}

bool enabled(const std::vector<StepSpec>& steps, const std::string& name) {
  const StepSpec* s = find_step(steps, name);
  return s && s->enabled;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// z-scored single-volume tensor, with the statistics for undoing it.
struct Normalized {
  nn::Tensor<float> tensor;
  double mean = 0, sd = 1;
};

Normalized normalize_with(const Volume3D& v, const Volume3D* mask) {
  Normalized n;
  double s = 0, ss = 0, c = 0;
  for (std::int64_t i = 0; i < v.voxels(); ++i) {
    if (mask && mask->data(i) == 0.0f) continue;
    s += v.data(i);
    ss += double(v.data(i)) * v.data(i);
    c += 1;
  }
  if (c < 2) throw DataError("normalization mask is empty");
  n.mean = s / c;
  n.sd = std::sqrt(std::max(ss / c - n.mean * n.mean, 0.0));
  if (!(n.sd > 0)) throw DataError("cannot normalize a constant volume");
  Volume3D z = v;
  z.data = ((v.data.cast<double>() - n.mean) / n.sd).cast<float>();
  n.tensor = to_tensor({&z});
  return n;
}

Volume3D synthesize_wmn(const TrainedModel& synthesis, const Volume3D& t1_crop) {
  const Volume3D z = zscore(t1_crop);
  const nn::Tensor<float> out = predict(synthesis, to_tensor({&z}));
  Volume3D w = from_tensor(out, 0, t1_crop);
  if (!w.data.allFinite()) throw NumericError("synthesis produced non-finite values");
  return w;
}

nn::Tensor<float> segmentation_probs(const ModelBundle& m, const Volume3D& t1, const Volume3D& wmn,
                                     const AtlasPrior* prior) {
  CaseBundle c;
  c.modalities.emplace("T1", t1);
  c.modalities.emplace("WMn", wmn);
  c.meta.side = t1.side;
  std::vector<const TrainedModel*> models{&m.seg_plain};
  std::vector<nn::Tensor<float>> inputs{make_sample(c, {"T1", "WMn"}).input};
  if (prior) {
    models.push_back(&m.seg_atlas);
    inputs.push_back(make_sample(c, {"T1", "WMn"}, &prior->labels).input);
  }
  nn::Tensor<float> p = ensemble_probs(models, inputs);
  if (!p.data.allFinite()) throw NumericError("segmentation produced non-finite probabilities");
  return p;
}

std::string make_work_dir(const PipelineConfig& config) {
  if (!config.artifact_dir.empty()) {
    fs::create_directories(config.artifact_dir);
    return config.artifact_dir;
  }
  static std::mutex mu;
  static int counter = 0;
  std::lock_guard<std::mutex> lock(mu);
  const fs::path p = fs::temp_directory_path() / ("deepthal-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::create_directories(p);
  return p.string();
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
  return s;
}

// Adapter contract: the current volume is written to <dir>/<step>_in, the
// command writes <dir>/<step>_out with the expected dims.
Volume3D run_external(const StepSpec& step, const Volume3D& in, const std::string& dir, Dims expect,
                      const Volume3D& like_out) {
  const auto it = step.params.find("command");
  if (it == step.params.end() || it->second.empty()) throw DataError("external step has no command");
  const std::string in_base = (fs::path(dir) / (step.name + "_in")).string();
  const std::string out_base = (fs::path(dir) / (step.name + "_out")).string();
  write_volume(in_base, in);
  for (const char* ext : {".hdr", ".raw"}) fs::remove(out_base + ext);
  const std::string cmd = replace_all(replace_all(it->second, "{input}", in_base), "{output}", out_base);
  const int status = std::system(cmd.c_str());
  if (status != 0) throw DataError("external command exited with status " + std::to_string(status) + ": " + cmd);
  Volume3D out = read_volume(out_base);
  if (out.dims != expect)
    throw DataError("external command produced dims " + std::to_string(out.dims[0]) + "x" +
                    std::to_string(out.dims[1]) + "x" + std::to_string(out.dims[2]) + ", expected " +
                    std::to_string(expect[0]) + "x" + std::to_string(expect[1]) + "x" + std::to_string(expect[2]));
  Volume3D tagged = like_out;
  tagged.data = out.data;
  return tagged;
}

json box_json(const CropBox& b) {
  return {{"offset", {b.offset[0], b.offset[1], b.offset[2]}}, {"extent", {b.extent[0], b.extent[1], b.extent[2]}}};
}

CropBox box_from_json(const json& j) {
  CropBox b;
  for (int a = 0; a < 3; ++a) {
    b.offset[std::size_t(a)] = j.at("offset").at(std::size_t(a)).get<int>();
    b.extent[std::size_t(a)] = j.at("extent").at(std::size_t(a)).get<int>();
  }
  return b;
}

}  // namespace

std::vector<StepSpec> default_steps() {
  std::vector<StepSpec> out;
  for (const auto& s : step_table()) {
    StepSpec spec;
    spec.name = s.name;
    spec.input = s.in;
    spec.output = s.out;
    out.push_back(spec);
  }
  return out;
}

void check_steps(const std::vector<StepSpec>& steps, Space input) {
  const auto& table = step_table();
  int last = -1;
  std::set<std::string> seen;
  for (const auto& s : steps) {
    const int i = step_index(s.name);
    if (i < 0) throw DataError("pipeline: unknown step '" + s.name + "'");
    if (!seen.insert(s.name).second) throw DataError("pipeline: step '" + s.name + "' listed twice");
    if (i < last) throw DataError("pipeline: step '" + s.name + "' is out of order");
    last = i;
    const StepInfo& info = table[std::size_t(i)];
    if (s.input != info.in || s.output != info.out)
      throw DataError("pipeline: step '" + s.name + "' must map " + to_string(info.in) + " -> " + to_string(info.out));
    if (s.implementation == "external") {
      if (!info.external_ok) throw DataError("pipeline: step '" + s.name + "' has no external adapter");
      if (!s.params.count("command")) throw DataError("pipeline: external step '" + s.name + "' needs a command");
    } else if (s.implementation != "builtin") {
      throw DataError("pipeline: step '" + s.name + "' has unknown implementation '" + s.implementation + "'");
    }
    if (info.required && !s.enabled) throw DataError("pipeline: step '" + s.name + "' cannot be disabled");
  }
  for (const auto& info : table)
    if (info.required && !seen.count(info.name)) throw DataError(std::string("pipeline: required step '") + info.name + "' is missing");
  if (enabled(steps, "mirror") != enabled(steps, "unmirror"))
    throw DataError("pipeline: mirror and unmirror must be enabled together");
  if (enabled(steps, "second_pass") && !enabled(steps, "icv"))
    throw DataError("pipeline: second_pass needs the icv step");
  Space cur = input;
  for (const auto& s : steps) {
    if (!s.enabled) continue;
    if (s.input != cur)
      throw DataError("pipeline: step '" + s.name + "' expects " + to_string(s.input) + " input but receives " +
                      to_string(cur));
    cur = s.output;
  }
}

// ---------------------------------------------------------------------------

nn::Tensor<float> thalamus_probabilities(const Volume3D& t1_crop, const ModelBundle& models,
                                         const PipelineConfig& config, AtlasPrior* prior) {
  const Volume3D wmn = synthesize_wmn(models.synthesis, t1_crop);
  std::optional<AtlasPrior> atlas;
  if (enabled(config.steps, "atlas"))
    atlas = build_subject_atlas(models.library, t1_crop, models.registration, config.atlas_cases, config.fusion);
  if (prior && atlas) *prior = *atlas;
  return segmentation_probs(models, t1_crop, wmn, atlas ? &*atlas : nullptr);
}

PipelineRun run_pipeline(const Volume3D& t1, const ModelBundle& models, const PipelineConfig& config,
                         const std::string& input_id) {
  check_steps(config.steps, t1.space);
  const auto start = std::chrono::steady_clock::now();
  PipelineRun run;
  run.input_id = input_id;
  run.seed = config.seed;
  run.left_box = config.left_box;
  run.right_box = config.right_box;

  Volume3D cur = t1;
  std::optional<Volume3D> icv_mask;
  double affine_det = 1.0;
  std::optional<std::vector<double>> template_anchors;
  struct SideState {
    Side side;
    CropBox box;
    Volume3D t1, wmn;
    std::optional<AtlasPrior> prior;
    LabelMap labels;
    bool mirrored = false;
  };
  std::vector<SideState> sides;
  std::string work_dir;
  auto artifact = [&](StepRecord& rec, const std::string& suffix, const Volume3D& v) {
    if (config.artifact_dir.empty()) return;
    fs::create_directories(config.artifact_dir);
    const std::string base = (fs::path(config.artifact_dir) / (rec.name + suffix)).string();
    write_volume(base, v);
    rec.artifacts.push_back(base);
  };
  auto anchors_of_template = [&]() -> const std::vector<double>& {
    if (!template_anchors) template_anchors = intensity_anchors(models.template_t1, config.anchors);
    return *template_anchors;
  };

  for (const StepSpec& step : config.steps) {
    StepRecord rec;
    rec.name = step.name;
    rec.implementation = step.implementation;
    rec.input = step.input;
    rec.output = step.output;
    rec.enabled = step.enabled;
    if (!step.enabled) {
      run.steps.push_back(rec);
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const bool external = step.implementation == "external";
    if (external && work_dir.empty()) work_dir = make_work_dir(config);
    try {
      const std::string& n = step.name;
      if (n == "denoise") {
        cur = external ? run_external(step, cur, work_dir, cur.dims, cur) : denoise(cur, config.denoise);
        artifact(rec, "", cur);
      } else if (n == "affine") {
        if (models.template_t1.space != Space::mni_std) throw DataError("template must be in mni_std space");
        if (external) {
          cur = run_external(step, cur, work_dir, models.template_t1.dims, models.template_t1);
          run.warnings.push_back("affine: external step, transform not recorded");
        } else {
          const AffineResult a = affine_to_template(cur, models.template_t1, config.affine);
          run.affine = a.transform;
          affine_det = a.transform.A.determinant();
          cur = a.image;
        }
        artifact(rec, "", cur);
      } else if (n == "bias") {
        if (external) {
          cur = run_external(step, cur, work_dir, cur.dims, cur);
        } else {
          BiasResult b = bias_correct(cur, nullptr, config.bias);
          run.warnings.insert(run.warnings.end(), b.warnings.begin(), b.warnings.end());
          cur = b.corrected;
        }
        artifact(rec, "", cur);
      } else if (n == "normalize") {
        cur = external ? run_external(step, cur, work_dir, cur.dims, cur)
                       : normalize_intensity(cur, config.anchors, anchors_of_template());
        artifact(rec, "", cur);
      } else if (n == "icv") {
        const IcvResult r = extract_icv(cur, config.icv);
        icv_mask = r.mask;
        // Template-space voxels map to det(A) input voxels.
        run.icv_mm3 = double(r.voxels) * affine_det * t1.voxel_volume();
        artifact(rec, "_mask", r.mask);
      } else if (n == "second_pass") {
        if (external) {
          cur = run_external(step, cur, work_dir, cur.dims, cur);
        } else {
          BiasResult b = bias_correct(cur, &*icv_mask, config.bias);
          run.warnings.insert(run.warnings.end(), b.warnings.begin(), b.warnings.end());
          cur = normalize_intensity(b.corrected, config.anchors, anchors_of_template(), &*icv_mask);
        }
        artifact(rec, "", cur);
      } else if (n == "superres") {
        const int f = models.superres.spec.factor;
        Volume3D hr(Dims{cur.dims[0] * f, cur.dims[1] * f, cur.dims[2] * f}, kHighResSpacing, Space::mni_hr);
        if (external) {
          cur = run_external(step, cur, work_dir, hr.dims, hr);
        } else {
          const Normalized z = normalize_with(cur, icv_mask ? &*icv_mask : nullptr);
          const nn::Tensor<float> out = predict(models.superres, z.tensor);
          if (out.shape.x != hr.dims[0] || out.shape.y != hr.dims[1] || out.shape.z != hr.dims[2])
            throw DataError("superresolution output does not match the high-resolution grid");
          hr.data = ((out.data.row(0).transpose().array().cast<double>() * z.sd) + z.mean).cast<float>();
          if (!hr.data.allFinite()) throw NumericError("superresolution produced non-finite values");
          cur = hr;
        }
        artifact(rec, "", cur);
      } else if (n == "crop") {
        for (auto [side, box] : {std::pair{Side::left, config.left_box}, std::pair{Side::right, config.right_box}}) {
          SideState s;
          s.side = side;
          s.box = box;
          s.t1 = crop_roi(cur, box);
          s.t1.side = side;
          sides.push_back(std::move(s));
        }
        for (const auto& s : sides) artifact(rec, "_" + to_string(s.side), s.t1);
      } else if (n == "mirror") {
        for (auto& s : sides)
          if (s.side == Side::right) {
            s.t1 = mirror_lr(s.t1);
            s.mirrored = true;
          }
      } else if (n == "synthesize") {
        for (auto& s : sides) {
          s.wmn = synthesize_wmn(models.synthesis, s.t1);
          artifact(rec, "_" + to_string(s.side), s.wmn);
        }
      } else if (n == "atlas") {
        for (auto& s : sides) {
          s.prior = build_subject_atlas(models.library, s.t1, models.registration, config.atlas_cases, config.fusion);
          (s.side == Side::left ? run.left_atlas_ids : run.right_atlas_ids) = s.prior->selected_ids;
          for (const auto& w : s.prior->warnings) run.warnings.push_back("atlas " + to_string(s.side) + ": " + w);
        }
      } else if (n == "segment") {
        for (auto& s : sides) {
          const nn::Tensor<float> p = segmentation_probs(models, s.t1, s.wmn, s.prior ? &*s.prior : nullptr);
          s.labels = argmax_labels(p, s.t1, models.seg_plain.schema);
        }
      } else if (n == "unmirror") {
        for (auto& s : sides)
          if (s.mirrored) {
            s.labels = mirror_lr(s.labels);
            s.mirrored = false;
          }
      }
    } catch (const NumericError& e) {
      run.failed_step = step.name;
      run.steps.push_back(rec);
      run.total_seconds = seconds_since(start);
      throw StepFailure("step '" + step.name + "' failed: " + e.what(), step.name, run, true);
    } catch (const std::exception& e) {
      run.failed_step = step.name;
      run.steps.push_back(rec);
      run.total_seconds = seconds_since(start);
      throw StepFailure("step '" + step.name + "' failed: " + e.what(), step.name, run, false);
    }
    rec.seconds = seconds_since(t0);
    run.steps.push_back(rec);
  }

  for (auto& s : sides) {
    s.labels.side = s.side;
    if (!config.artifact_dir.empty())
      write_labels((fs::path(config.artifact_dir) / ("labels_" + to_string(s.side))).string(), s.labels);
    (s.side == Side::left ? run.left : run.right) = s.labels;
  }
  if (work_dir != config.artifact_dir && !work_dir.empty()) fs::remove_all(work_dir);
  run.total_seconds = seconds_since(start);
  return run;
}

std::vector<PipelineRun> run_pipeline_batch(const std::vector<Volume3D>& t1s, const ModelBundle& models,
                                            const PipelineConfig& config) {
  if (config.workers < 1) throw DataError("pipeline: workers must be >= 1");
  std::vector<std::optional<PipelineRun>> out(t1s.size());
  std::vector<std::exception_ptr> errors(t1s.size());
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&]() {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= t1s.size()) return;
        i = next++;
      }
      PipelineConfig c = config;
      if (!c.artifact_dir.empty()) c.artifact_dir = (fs::path(c.artifact_dir) / ("case" + std::to_string(i))).string();
      try {
        out[i] = run_pipeline(t1s[i], models, c, "case" + std::to_string(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::min<int>(config.workers, int(std::max<std::size_t>(1, t1s.size())));
  for (int w = 0; w < n; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<PipelineRun> runs;
  for (auto& r : out) runs.push_back(std::move(*r));
  return runs;
}

// ---------------------------------------------------------------------------

std::string run_to_json(const PipelineRun& run, bool pretty) {
  json j;
  j["version"] = run.version;
  j["input_id"] = run.input_id;
  j["seed"] = run.seed;
  j["total_seconds"] = run.total_seconds;
  j["steps"] = json::array();
  for (const auto& s : run.steps)
    j["steps"].push_back({{"name", s.name},
                          {"implementation", s.implementation},
                          {"input", to_string(s.input)},
                          {"output", to_string(s.output)},
                          {"enabled", s.enabled},
                          {"seconds", s.seconds},
                          {"artifacts", s.artifacts}});
  j["crop"] = {{"left", box_json(run.left_box)}, {"right", box_json(run.right_box)}};
  std::vector<double> a(run.affine.A.data(), run.affine.A.data() + 9);
  j["affine"] = {{"A_column_major", a}, {"t", {run.affine.t.x(), run.affine.t.y(), run.affine.t.z()}}};
  j["icv_mm3"] = run.icv_mm3;
  j["atlas"] = {{"left", run.left_atlas_ids}, {"right", run.right_atlas_ids}};
  j["warnings"] = run.warnings;
  j["failed_step"] = run.failed_step;
  j["labels"] = {{"left", run.left ? "left_labels" : ""}, {"right", run.right ? "right_labels" : ""}};
  return pretty ? j.dump(2) : j.dump();
}

void write_run(const PipelineRun& run, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream f(fs::path(dir) / "run.json");
  if (!f) throw DataError("cannot write " + (fs::path(dir) / "run.json").string());
  f << run_to_json(run) << "\n";
  if (run.left) write_labels((fs::path(dir) / "left_labels").string(), *run.left);
  if (run.right) write_labels((fs::path(dir) / "right_labels").string(), *run.right);
}

PipelineRun read_run(const std::string& dir) {
  const fs::path p = fs::path(dir) / "run.json";
  std::ifstream f(p);
  if (!f) throw DataError("cannot read " + p.string());
  json j;
  try {
    f >> j;
    PipelineRun run;
    run.version = j.at("version").get<std::string>();
    run.input_id = j.at("input_id").get<std::string>();
    run.seed = j.at("seed").get<std::uint64_t>();
    run.total_seconds = j.at("total_seconds").get<double>();
    for (const auto& s : j.at("steps")) {
      StepRecord r;
      r.name = s.at("name").get<std::string>();
      r.implementation = s.at("implementation").get<std::string>();
      r.input = space_from_string(s.at("input").get<std::string>());
      r.output = space_from_string(s.at("output").get<std::string>());
      r.enabled = s.at("enabled").get<bool>();
      r.seconds = s.at("seconds").get<double>();
      r.artifacts = s.at("artifacts").get<std::vector<std::string>>();
      run.steps.push_back(r);
    }
    run.left_box = box_from_json(j.at("crop").at("left"));
    run.right_box = box_from_json(j.at("crop").at("right"));
    const auto a = j.at("affine").at("A_column_major").get<std::vector<double>>();
    if (a.size() != 9) throw DataError("run.json: affine matrix needs 9 entries");
    run.affine.A = Eigen::Map<const Eigen::Matrix3d>(a.data());
    const auto t = j.at("affine").at("t").get<std::vector<double>>();
    if (t.size() != 3) throw DataError("run.json: affine translation needs 3 entries");
    run.affine.t = Eigen::Vector3d(t[0], t[1], t[2]);
    run.icv_mm3 = j.at("icv_mm3").get<double>();
    run.left_atlas_ids = j.at("atlas").at("left").get<std::vector<std::string>>();
    run.right_atlas_ids = j.at("atlas").at("right").get<std::vector<std::string>>();
    run.warnings = j.at("warnings").get<std::vector<std::string>>();
    run.failed_step = j.at("failed_step").get<std::string>();
    const auto left = j.at("labels").at("left").get<std::string>();
    const auto right = j.at("labels").at("right").get<std::string>();
    if (!left.empty()) run.left = read_labels((fs::path(dir) / left).string());
    if (!right.empty()) run.right = read_labels((fs::path(dir) / right).string());
    return run;
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

void save_bundle(const ModelBundle& b, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "library");
  const fs::path d(dir);
  save_model(b.superres, (d / "superres.ckpt").string());
  save_model(b.synthesis, (d / "synthesis.ckpt").string());
  save_model(b.seg_atlas, (d / "seg_atlas.ckpt").string());
  save_model(b.seg_plain, (d / "seg_plain.ckpt").string());
  save_model(b.registration, (d / "registration.ckpt").string());
  write_volume((d / "template_t1").string(), b.template_t1);
  json manifest;
  manifest["version"] = kVersion;
  manifest["library"] = json::array();
  for (std::size_t i = 0; i < b.library.size(); ++i) {
    const AtlasEntry& e = b.library.entry(i);
    const std::string stem = "entry" + std::to_string(i);
    write_volume((d / "library" / (stem + "_t1")).string(), e.image);
    write_labels((d / "library" / (stem + "_labels")).string(), e.labels);
    manifest["library"].push_back({{"id", e.id}, {"stem", stem}});
  }
  std::ofstream f(d / "bundle.json");
  if (!f) throw DataError("cannot write " + (d / "bundle.json").string());
  f << manifest.dump(2) << "\n";
}

ModelBundle load_bundle(const std::string& dir) {
  const fs::path d(dir);
  std::ifstream f(d / "bundle.json");
  if (!f) throw DataError("model bundle not found: " + (d / "bundle.json").string());
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw DataError((d / "bundle.json").string() + ": " + e.what());
  }
  ModelBundle b;
  b.superres = load_model((d / "superres.ckpt").string());
  b.synthesis = load_model((d / "synthesis.ckpt").string());
  b.seg_atlas = load_model((d / "seg_atlas.ckpt").string());
  b.seg_plain = load_model((d / "seg_plain.ckpt").string());
  b.registration = load_model((d / "registration.ckpt").string());
  b.template_t1 = read_volume((d / "template_t1").string());
  std::vector<AtlasEntry> entries;
  for (const auto& e : manifest.at("library")) {
    const std::string stem = e.at("stem").get<std::string>();
    LabelMap labels = read_labels((d / "library" / (stem + "_labels")).string());
    labels.schema = b.seg_plain.schema;
    labels.validate();
    entries.push_back({e.at("id").get<std::string>(), read_volume((d / "library" / (stem + "_t1")).string()), labels});
  }
  b.library = AtlasLibrary(std::move(entries));
  return b;
}

// ---------------------------------------------------------------------------

CaseBundle mirror_case(const CaseBundle& c) {
  CaseBundle m;
  for (const auto& [name, v] : c.modalities) m.modalities.emplace(name, mirror_lr(v));
  if (c.labels) m.labels = mirror_lr(*c.labels);
  m.meta = c.meta;
  m.meta.id = c.meta.id + "_mirrored";
  if (c.meta.side == Side::left) m.meta.side = Side::right;
  else if (c.meta.side == Side::right) m.meta.side = Side::left;
  return m;
}

std::vector<CaseBundle> label_transfer_workflow(const std::vector<CaseBundle>& source_labeled,
                                                const std::vector<CaseBundle>& targets, const TransferModels& models) {
  if (targets.empty()) return {};
  if (!models.synthesis || !models.segmentation) throw DataError("label transfer: models missing");
  if (int(models.synthesis_inputs.size()) != models.synthesis->spec.input_channels)
    throw DataError("label transfer: synthesis model expects " + std::to_string(models.synthesis->spec.input_channels) +
                    " modalities");
  if (int(models.segmentation_inputs.size()) != models.segmentation->spec.input_channels)
    throw DataError("label transfer: segmentation model expects " +
                    std::to_string(models.segmentation->spec.input_channels) + " modalities");
  for (const auto& s : source_labeled) {
    if (!s.labels) throw DataError("label transfer: source case '" + s.meta.id + "' has no labels");
    for (const auto& m : models.segmentation_inputs)
      if (!s.modalities.count(m))
        throw DataError("label transfer: modality mismatch, source case '" + s.meta.id + "' lacks " + m);
  }
  std::vector<CaseBundle> out;
  for (const auto& t : targets) {
    for (const auto& m : models.synthesis_inputs)
      if (!t.modalities.count(m))
        throw DataError("label transfer: modality mismatch, target '" + t.meta.id + "' lacks " + m);
    for (const auto& m : models.segmentation_inputs)
      if (m != models.synthesized && !t.modalities.count(m))
        throw DataError("label transfer: modality mismatch, target '" + t.meta.id + "' lacks " + m);
    CaseBundle c = t;
    std::vector<Volume3D> z;
    for (const auto& m : models.synthesis_inputs) z.push_back(zscore(t.modality(m)));
    std::vector<const Volume3D*> ptrs;
    for (const auto& v : z) ptrs.push_back(&v);
    Volume3D syn = from_tensor(predict(*models.synthesis, to_tensor(ptrs)), 0, t.modality(models.synthesis_inputs[0]));
    c.modalities.insert_or_assign(models.synthesized, syn);
    const Sample s = make_sample(c, models.segmentation_inputs);
    c.labels = segment(*models.segmentation, s.input, c.modality(models.synthesized));
    c.meta.pseudo_label = true;
    c.meta.source = "transfer";
    out.push_back(std::move(c));
  }
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out.push_back(mirror_case(out[i]));
  return out;
}

// ---------------------------------------------------------------------------

Volume3D phantom_template(const HeadPhantomSpec& head, std::uint64_t seed) {
  HeadPhantomSpec h = head;
  h.shift = {0.0, 0.0, 0.0};
  h.bias_strength = 0.0;
  h.noise_sigma = 0.0;
  return generate_head(h, seed).t1_mni_std;
}

ModelBundle train_bundle(const BundleTrainingConfig& config) {
  if (config.cases < 4) throw DataError("train_bundle: need at least 4 cases");
  ModelBundle b;
  HeadPhantomSpec head = config.head;
  head.thalamus = config.phantom;
  b.template_t1 = phantom_template(head, config.template_seed);

  const auto cases = generate_dataset(config.phantom, config.cases, config.seed);
  const std::size_t n_val = std::max<std::size_t>(2, cases.size() / 8);
  const std::size_t n_train = cases.size() - n_val;
  std::vector<CaseBundle> train_cases(cases.begin(), cases.begin() + std::ptrdiff_t(n_train));
  b.library = AtlasLibrary::from_cases(train_cases);
  const AugmentationPolicy none = AugmentationPolicy::none();

  // Registration on crop pairs; every fifth pair is the identity.
  {
    std::vector<Sample> pairs;
    for (std::size_t i = 0; i < n_train; ++i)
      for (std::size_t k : {std::size_t(0), std::size_t(1), std::size_t(3)}) {
        if (k == 0 && i % 5) continue;
        const Volume3D zm = zscore(train_cases[i].modality("T1"));
        const Volume3D zf = zscore(train_cases[(i + k) % n_train].modality("T1"));
        Sample s;
        s.id = train_cases[i].meta.id + "_" + std::to_string(k);
        s.input = to_tensor({&zm, &zf});
        pairs.push_back(std::move(s));
      }
    TrainOptions o;
    o.loss = LossKind::registration;
    o.keep_best = false;
    b.registration = train(build_registration_net(config.registration_width, 3), pairs, {}, config.aux_opt, none,
                           config.seed + 1, o);
  }
  // WMn synthesis from T1.
  {
    std::vector<Sample> tr;
    for (const auto& c : train_cases) tr.push_back(make_regression_sample({&c.modality("T1")}, c.modality("WMn")));
    TrainOptions o;
    o.loss = LossKind::mse;
    o.keep_best = false;
    b.synthesis = train(build_synthesis_net(1, true, config.synth_width, 3), tr, {}, config.aux_opt, none,
                        config.seed + 2, o);
  }
  // Superresolution on pooled crops.
  {
    std::vector<Sample> tr;
    for (const auto& c : train_cases) {
      const Volume3D lr = avg_pool(c.modality("T1"), 2);
      tr.push_back(make_regression_sample({&lr}, c.modality("T1"), true));
    }
    TrainOptions o;
    o.loss = LossKind::mse;
    o.keep_best = false;
    b.superres = train(build_superres_net(2, config.superres_width), tr, {}, config.aux_opt, none, config.seed + 3, o);
  }
  // Segmentation networks see synthetic WMn, as in the pipeline.
  auto with_synthetic = [&](const CaseBundle& c) {
    CaseBundle s = c;
    s.modalities.insert_or_assign("WMn", synthesize_wmn(b.synthesis, c.modality("T1")));
    return s;
  };
  NetworkSpec spec;
  spec.width = config.seg_width;
  spec.output_channels = config.phantom.n_nuclei + 1;
  spec.input_channels = 2;
  spec.init_seed = config.seed + 4;
  std::vector<Sample> plain_tr, plain_val, atlas_tr, atlas_val;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const CaseBundle c = with_synthetic(cases[i]);
    // Leave-one-out prior for library members.
    const AtlasPrior prior = build_subject_atlas(b.library, c.modality("T1"), b.registration, config.atlas_cases,
                                                 FusionParams{}, c.meta.id);
    (i < n_train ? plain_tr : plain_val).push_back(make_sample(c, {"T1", "WMn"}));
    (i < n_train ? atlas_tr : atlas_val).push_back(make_sample(c, {"T1", "WMn"}, &prior.labels));
  }
  b.seg_plain = train(build_dpn(spec), plain_tr, plain_val, config.seg_opt, config.augmentation, config.seed + 5);
  spec.input_channels = 3;
  spec.init_seed = config.seed + 6;
  b.seg_atlas = train(build_dpn(spec), atlas_tr, atlas_val, config.seg_opt, config.augmentation, config.seed + 7);
  return b;
}

}  // namespace deepthal
