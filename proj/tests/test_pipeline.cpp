#include "doctest.h"

#include "deepthal/losses_metrics.hpp"
#include "deepthal/pipeline.hpp"

#include <filesystem>
#include <fstream>

using namespace deepthal;
namespace fs = std::filesystem;

namespace {

HeadPhantomSpec small_head() {
  HeadPhantomSpec hs;
  hs.hr_grid = {128, 128, 128};
  hs.thalamus = default_phantom_spec(13, {32, 32, 32});
  hs.left_box = {{32, 48, 48}, {32, 32, 32}};
  hs.right_box = {{64, 48, 48}, {32, 32, 32}};
  return hs;
}

PipelineConfig small_config() {
  PipelineConfig c;
  const HeadPhantomSpec hs = small_head();
  c.left_box = hs.left_box;
  c.right_box = hs.right_box;
  c.atlas_cases = 3;
  c.affine.iterations = 15;
  return c;
}

// Mechanics only: barely trained networks.
const ModelBundle& bundle() {
  static const ModelBundle b = [] {
    BundleTrainingConfig bc;
    bc.phantom = small_head().thalamus;
    bc.head = small_head();
    bc.cases = 6;
    bc.seg_opt.epochs = 1;
    bc.seg_opt.steps_per_epoch = 4;
    bc.aux_opt.epochs = 1;
    bc.aux_opt.steps_per_epoch = 4;
    bc.atlas_cases = 3;
    bc.augmentation = AugmentationPolicy::none();
    return train_bundle(bc);
  }();
  return b;
}

const HeadPhantom& subject() {
  static const HeadPhantom h = [] {
    HeadPhantomSpec hs = small_head();
    hs.shift = {1.0, -1.0, 0.5};
    return generate_head(hs, 21);
  }();
  return h;
}

std::string tmp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("deepthal_test_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace

TEST_CASE("step list type checking") {
  CHECK_NOTHROW(check_steps(default_steps()));
  CHECK(default_steps().size() == 13);

  auto steps = default_steps();
  std::swap(steps[0], steps[1]);
  CHECK_THROWS_AS(check_steps(steps), DataError);

  steps = default_steps();
  steps[6].enabled = false;  // superres
  CHECK_THROWS_AS(check_steps(steps), DataError);

  steps = default_steps();
  steps[8].enabled = false;  // mirror without unmirror
  CHECK_THROWS_AS(check_steps(steps), DataError);
  steps[12].enabled = false;
  CHECK_NOTHROW(check_steps(steps));

  steps = default_steps();
  steps[1].enabled = false;  // no affine: native input never reaches mni_std
  CHECK_THROWS_AS(check_steps(steps), DataError);
  steps[0].enabled = false;
  CHECK_NOTHROW(check_steps(steps, Space::mni_std));

  steps = default_steps();
  steps[2].output = Space::mni_hr;
  CHECK_THROWS_AS(check_steps(steps), DataError);

  steps = default_steps();
  steps[7].implementation = "external";
  steps[7].params["command"] = "true";
  CHECK_THROWS_AS(check_steps(steps), DataError);  // crop has no adapter
  steps = default_steps();
  steps[0].implementation = "external";
  CHECK_THROWS_AS(check_steps(steps), DataError);  // missing command
  steps[0].params["command"] = "cp {input}.hdr {output}.hdr";
  CHECK_NOTHROW(check_steps(steps));

  steps = default_steps();
  steps.push_back(steps[0]);
  CHECK_THROWS_AS(check_steps(steps), DataError);
  steps = default_steps();
  steps[3].name = "sharpen";
  CHECK_THROWS_AS(check_steps(steps), DataError);
  steps = default_steps();
  steps[4].enabled = false;  // second pass needs the ICV
  CHECK_THROWS_AS(check_steps(steps), DataError);
}

TEST_CASE("ensemble of identical models equals the single model") {
  const ModelBundle& b = bundle();
  const CaseBundle c = generate_case(small_head().thalamus, 5);
  const Sample s = make_sample(c, {"T1", "WMn"});
  const nn::Tensor<float> single = predict(b.seg_plain, s.input);
  const nn::Tensor<float> pair = ensemble_probs({&b.seg_plain, &b.seg_plain}, {s.input, s.input});
  CHECK((pair.data - single.data).cwiseAbs().maxCoeff() < 1e-6f);
  const LabelMap a = argmax_labels(single, c.modality("T1"), b.seg_plain.schema);
  const LabelMap e = argmax_labels(pair, c.modality("T1"), b.seg_plain.schema);
  CHECK((a.data == e.data).all());
}

TEST_CASE("full run: disjoint outputs, provenance, determinism") {
  const ModelBundle& b = bundle();
  PipelineConfig cfg = small_config();
  cfg.artifact_dir = tmp_dir("artifacts");
  const PipelineRun run = run_pipeline(subject().t1_native, b, cfg, "subj");
  REQUIRE(run.left);
  REQUIRE(run.right);
  CHECK(run.failed_step.empty());
  CHECK(run.steps.size() == 13);
  CHECK(run.total_seconds > 0);
  CHECK(run.left->side == Side::left);
  CHECK(run.right->side == Side::right);
  CHECK(run.left->space == Space::crop);
  CHECK(run.left->dims == Dims{32, 32, 32});
  CHECK_NOTHROW(run.left->validate());
  // Disjoint ROIs of the high-resolution template.
  for (int a = 0; a < 3; ++a) CHECK(run.left->origin[std::size_t(a)] == cfg.left_box.offset[std::size_t(a)]);
  CHECK(cfg.left_box.offset[0] + cfg.left_box.extent[0] <= cfg.right_box.offset[0]);
  CHECK(run.right->origin[0] == cfg.right_box.offset[0]);
  CHECK(run.left_atlas_ids.size() == 3);
  CHECK(run.icv_mm3 > 0);
  CHECK(std::abs(run.icv_mm3 - subject().icv_mm3) / subject().icv_mm3 < 0.1);
  CHECK(fs::exists(fs::path(cfg.artifact_dir) / "denoise.hdr"));
  CHECK(fs::exists(fs::path(cfg.artifact_dir) / "labels_right.raw"));

  PipelineConfig again = small_config();
  const PipelineRun second = run_pipeline(subject().t1_native, b, again, "subj");
  CHECK((second.left->data == run.left->data).all());
  CHECK((second.right->data == run.right->data).all());

  const std::string dir = tmp_dir("run");
  write_run(run, dir);
  const PipelineRun back = read_run(dir);
  CHECK(back.input_id == "subj");
  CHECK(back.steps.size() == run.steps.size());
  CHECK(back.affine.A.isApprox(run.affine.A));
  CHECK((back.left->data == run.left->data).all());
  CHECK(back.right->origin == run.right->origin);
  CHECK(back.left_atlas_ids == run.left_atlas_ids);
}

TEST_CASE("unmirroring restores right-side orientation") {
  // Without mirroring the right crop is segmented in its own orientation; both
  // paths must report the right thalamus in the same (unmirrored) frame.
  const ModelBundle& b = bundle();
  PipelineConfig cfg = small_config();
  for (auto& s : cfg.steps)
    if (s.name == "atlas") s.enabled = false;
  const PipelineRun with = run_pipeline(subject().t1_native, b, cfg);
  for (auto& s : cfg.steps)
    if (s.name == "mirror" || s.name == "unmirror") s.enabled = false;
  const PipelineRun without = run_pipeline(subject().t1_native, b, cfg);
  CHECK(with.right->side == without.right->side);
  CHECK(with.right->origin == without.right->origin);
  CHECK((with.left->data == without.left->data).all());
}

TEST_CASE("step failure carries the partial run") {
  const ModelBundle& b = bundle();
  PipelineConfig cfg = small_config();
  cfg.steps[2].implementation = "external";  // bias
  cfg.steps[2].params["command"] = "exit 3";
  try {
    run_pipeline(subject().t1_native, b, cfg);
    FAIL("expected failure");
  } catch (const StepFailure& e) {
    CHECK(e.step == "bias");
    CHECK(e.partial.failed_step == "bias");
    CHECK(e.partial.steps.size() == 3);
    CHECK(e.partial.steps[0].seconds > 0);
    CHECK(!e.numeric);
  }

  Volume3D broken = subject().t1_native;
  broken.data(0) = std::numeric_limits<float>::quiet_NaN();
  cfg = small_config();
  cfg.steps[0].enabled = false;
  CHECK_THROWS_AS(run_pipeline(broken, b, cfg), StepFailure);

  PipelineConfig wrong = small_config();
  CHECK_THROWS_AS(run_pipeline(subject().t1_mni_std, b, wrong), DataError);
}

TEST_CASE("external adapter round trip") {
  const ModelBundle& b = bundle();
  PipelineConfig cfg = small_config();
  cfg.artifact_dir = tmp_dir("external");
  cfg.steps[0].implementation = "external";
  cfg.steps[0].params["command"] = "cp {input}.hdr {output}.hdr && cp {input}.raw {output}.raw";
  const PipelineRun run = run_pipeline(subject().t1_native, b, cfg);
  CHECK(run.steps[0].implementation == "external");
  CHECK(run.left);

  cfg.steps[0].params["command"] = "echo nothing";
  CHECK_THROWS_AS(run_pipeline(subject().t1_native, b, cfg), StepFailure);
}

TEST_CASE("batch runs match sequential runs") {
  const ModelBundle& b = bundle();
  HeadPhantomSpec hs = small_head();
  std::vector<Volume3D> inputs;
  for (std::uint64_t s : {31u, 32u}) inputs.push_back(generate_head(hs, s).t1_native);
  PipelineConfig cfg = small_config();
  cfg.workers = 1;
  const auto one = run_pipeline_batch(inputs, b, cfg);
  cfg.workers = 2;
  const auto two = run_pipeline_batch(inputs, b, cfg);
  REQUIRE(one.size() == 2);
  REQUIRE(two.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK((one[i].left->data == two[i].left->data).all());
    CHECK((one[i].right->data == two[i].right->data).all());
  }
  cfg.workers = 0;
  CHECK_THROWS_AS(run_pipeline_batch(inputs, b, cfg), DataError);
}

TEST_CASE("bundle save and load") {
  const ModelBundle& b = bundle();
  const std::string dir = tmp_dir("bundle");
  save_bundle(b, dir);
  const ModelBundle back = load_bundle(dir);
  CHECK(back.library.size() == b.library.size());
  CHECK((back.template_t1.data == b.template_t1.data).all());
  const PipelineConfig cfg = small_config();
  const PipelineRun r1 = run_pipeline(subject().t1_native, b, cfg);
  const PipelineRun r2 = run_pipeline(subject().t1_native, back, cfg);
  CHECK((r1.left->data == r2.left->data).all());
  CHECK_THROWS_AS(load_bundle(tmp_dir("missing")), DataError);
}

TEST_CASE("label transfer workflow") {
  const PhantomSpec spec = default_phantom_spec(4, {32, 32, 32});
  const auto cases = generate_dataset(spec, 10, 77);
  std::vector<Sample> synth_tr, seg_tr;
  for (const auto& c : cases) {
    synth_tr.push_back(make_regression_sample({&c.modality("T1")}, c.modality("WMn")));
    seg_tr.push_back(make_sample(c, {"WMn"}));
  }
  TrainOptions mse;
  mse.loss = LossKind::mse;
  mse.keep_best = false;
  const OptimizerConfig opt{nn::OptimizerKind::adamax, 4e-3, 0.9, 0.999, 6, 40};
  // T1 barely separates the nuclei, so synthesis needs the larger budget.
  const OptimizerConfig synth_opt{nn::OptimizerKind::adamax, 4e-3, 0.9, 0.999, 100, 40};
  const TrainedModel synth =
      train(build_synthesis_net(1, true, 16, 3), synth_tr, {}, synth_opt, AugmentationPolicy::none(), 3, mse);
  NetworkSpec ns;
  ns.width = 8;
  ns.input_channels = 1;
  ns.output_channels = 5;
  TrainOptions last;
  last.keep_best = false;
  const TrainedModel seg = train(build_dpn(ns), seg_tr, {}, opt, AugmentationPolicy::none(), 4, last);

  TransferModels tm;
  tm.synthesis = &synth;
  tm.segmentation = &seg;
  std::vector<CaseBundle> targets;
  for (const auto& c : cases) {
    CaseBundle t;
    t.modalities.emplace("T1", c.modality("T1"));
    t.meta = c.meta;
    targets.push_back(t);
  }
  const auto out = label_transfer_workflow(cases, targets, tm);
  REQUIRE(out.size() == 2 * targets.size());
  double dice = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    CHECK(out[i].meta.pseudo_label);
    dice += dice_report(*out[i].labels, *cases[i].labels).mean;
    // Mirrored copies are the exact mirror of the transferred case.
    CHECK((out[i + cases.size()].labels->data == mirror_lr(*out[i].labels).data).all());
  }
  dice /= double(cases.size());
  MESSAGE("self-transfer Dice " << dice);
  CHECK(dice >= 0.95);

  CHECK(label_transfer_workflow(cases, {}, tm).empty());
  std::vector<CaseBundle> wrong = targets;
  wrong[0].modalities.clear();
  wrong[0].modalities.emplace("T2", cases[0].modality("T1"));
  CHECK_THROWS_AS(label_transfer_workflow(cases, wrong, tm), DataError);
  TransferModels two = tm;
  two.synthesis_inputs = {"T1", "T2"};
  CHECK_THROWS_AS(label_transfer_workflow(cases, targets, two), DataError);
}
