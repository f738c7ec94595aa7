#include "deepthal/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace deepthal {

namespace {

namespace pt = boost::property_tree;

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string fmt(long long v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  if (out.size() == 1 && out[0].empty()) out.clear();
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

long long to_int(const std::string& s) {
  long long v = 0;
  const auto t = trim(s);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size()) throw std::invalid_argument("not an integer: '" + s + "'");
  return v;
}

double to_double(const std::string& s) {
  double v = 0;
  const auto t = trim(s);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  const auto t = trim(s);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw std::invalid_argument("not a boolean: '" + s + "'");
}

Dims to_dims(const std::string& s) {
  const auto p = split(s);
  if (p.size() != 3) throw std::invalid_argument("expected three comma-separated integers: '" + s + "'");
  return {int(to_int(p[0])), int(to_int(p[1])), int(to_int(p[2]))};
}
std::string fmt(const Dims& d) { return fmt((long long)d[0]) + "," + fmt((long long)d[1]) + "," + fmt((long long)d[2]); }

std::vector<double> to_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& p : split(s)) out.push_back(to_double(p));
  return out;
}
std::string fmt(const std::vector<double>& v) {
  std::vector<std::string> s;
  for (double x : v) s.push_back(fmt(x));
  return join(s);
}

nn::OptimizerKind to_optimizer(const std::string& s) {
  if (trim(s) == "adamax") return nn::OptimizerKind::adamax;
  if (trim(s) == "adam") return nn::OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (adamax, adam)");
}
std::string fmt(nn::OptimizerKind k) { return k == nn::OptimizerKind::adam ? "adam" : "adamax"; }

struct Binding {
  std::string path;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

// Field binders. `F` maps a Config to the field.
template <typename F>
Binding int_key(std::string path, F f) {
  return {std::move(path), [f](const Config& c) { return fmt((long long)f(const_cast<Config&>(c))); },
          [f](Config& c, const std::string& v) { f(c) = static_cast<std::remove_reference_t<decltype(f(c))>>(to_int(v)); }};
}
template <typename F>
Binding real_key(std::string path, F f) {
  return {std::move(path), [f](const Config& c) { return fmt(double(f(const_cast<Config&>(c)))); },
          [f](Config& c, const std::string& v) { f(c) = to_double(v); }};
}
template <typename F>
Binding bool_key(std::string path, F f) {
  return {std::move(path), [f](const Config& c) { return fmt(bool(f(const_cast<Config&>(c)))); },
          [f](Config& c, const std::string& v) { f(c) = to_bool(v); }};
}
template <typename F>
Binding dims_key(std::string path, F f) {
  return {std::move(path), [f](const Config& c) { return fmt(f(const_cast<Config&>(c))); },
          [f](Config& c, const std::string& v) { f(c) = to_dims(v); }};
}
template <typename F>
Binding string_key(std::string path, F f) {
  return {std::move(path), [f](const Config& c) { return f(const_cast<Config&>(c)); },
          [f](Config& c, const std::string& v) { f(c) = trim(v); }};
}
template <typename F>
Binding list_key(std::string path, F f) {
  return {std::move(path), [f](const Config& c) { return join(f(const_cast<Config&>(c))); },
          [f](Config& c, const std::string& v) { f(c) = split(v); }};
}

void optimizer_keys(std::vector<Binding>& out, const std::string& prefix,
                    std::function<OptimizerConfig&(Config&)> f, bool full = true) {
  if (full) {
    out.push_back({prefix + "algorithm", [f](const Config& c) { return fmt(f(const_cast<Config&>(c)).algorithm); },
                   [f](Config& c, const std::string& v) { f(c).algorithm = to_optimizer(v); }});
    out.push_back(real_key(prefix + "beta1", [f](Config& c) -> double& { return f(c).beta1; }));
    out.push_back(real_key(prefix + "beta2", [f](Config& c) -> double& { return f(c).beta2; }));
  }
  out.push_back(real_key(prefix + "learning_rate", [f](Config& c) -> double& { return f(c).learning_rate; }));
  out.push_back(int_key(prefix + "epochs", [f](Config& c) -> int& { return f(c).epochs; }));
  out.push_back(int_key(prefix + "steps_per_epoch", [f](Config& c) -> int& { return f(c).steps_per_epoch; }));
}

void augmentation_keys(std::vector<Binding>& out, const std::string& prefix,
                       std::function<AugmentationPolicy&(Config&)> f) {
  out.push_back(real_key(prefix + "probability", [f](Config& c) -> double& { return f(c).probability; }));
  out.push_back(real_key(prefix + "resize_range", [f](Config& c) -> double& { return f(c).resize_range; }));
  out.push_back(real_key(prefix + "rotation_degrees", [f](Config& c) -> double& { return f(c).rotation_degrees; }));
  out.push_back(real_key(prefix + "elastic_amplitude", [f](Config& c) -> double& { return f(c).elastic_amplitude; }));
  out.push_back(real_key(prefix + "contrast_range", [f](Config& c) -> double& { return f(c).contrast_range; }));
  out.push_back(real_key(prefix + "brightness_range", [f](Config& c) -> double& { return f(c).brightness_range; }));
  out.push_back(real_key(prefix + "noise_sigma_max", [f](Config& c) -> double& { return f(c).noise_sigma_max; }));
}

/// Nucleus count and grid of a secondary phantom; other knobs follow the defaults.
void phantom_shape_keys(std::vector<Binding>& out, const std::string& prefix,
                        std::function<PhantomSpec&(Config&)> f) {
  out.push_back({prefix + "nuclei", [f](const Config& c) { return fmt((long long)f(const_cast<Config&>(c)).n_nuclei); },
                 [f](Config& c, const std::string& v) {
                   PhantomSpec& p = f(c);
                   p = default_phantom_spec(int(to_int(v)), p.grid);
                 }});
  out.push_back(dims_key(prefix + "grid", [f](Config& c) -> Dims& { return f(c).grid; }));
}

StepSpec& step(Config& c, const std::string& name) {
  for (auto& s : c.pipeline.steps)
    if (s.name == name) return s;
  throw std::invalid_argument("no step '" + name + "'");
}

std::vector<Binding> build_bindings() {
  std::vector<Binding> b;
  b.push_back(int_key("seed", [](Config& c) -> std::uint64_t& { return c.seed; }));

  // data
  b.push_back({"data.nuclei", [](const Config& c) { return fmt((long long)c.data.phantom.n_nuclei); },
               [](Config& c, const std::string& v) {
                 PhantomSpec p = default_phantom_spec(int(to_int(v)), c.data.phantom.grid);
                 p.noise_sigma = c.data.phantom.noise_sigma;
                 p.deform_amplitude = c.data.phantom.deform_amplitude;
                 p.envelope_scale = c.data.phantom.envelope_scale;
                 p.gap = c.data.phantom.gap;
                 p.supersample = c.data.phantom.supersample;
                 c.data.phantom = p;
               }});
  b.push_back(dims_key("data.grid", [](Config& c) -> Dims& { return c.data.phantom.grid; }));
  b.push_back(int_key("data.cases", [](Config& c) -> int& { return c.data.cases; }));
  b.push_back(real_key("data.train_fraction", [](Config& c) -> double& { return c.data.train_fraction; }));
  b.push_back(real_key("data.val_fraction", [](Config& c) -> double& { return c.data.val_fraction; }));
  b.push_back(real_key("data.noise_sigma", [](Config& c) -> double& { return c.data.phantom.noise_sigma; }));
  b.push_back(real_key("data.deform_amplitude", [](Config& c) -> double& { return c.data.phantom.deform_amplitude; }));
  b.push_back(real_key("data.envelope_scale", [](Config& c) -> double& { return c.data.phantom.envelope_scale; }));
  b.push_back(real_key("data.gap", [](Config& c) -> double& { return c.data.phantom.gap; }));
  b.push_back(int_key("data.supersample", [](Config& c) -> int& { return c.data.phantom.supersample; }));
  for (const char* m : {"T1", "T2", "WMn"}) {
    const std::string mod = m;
    b.push_back({"data.contrast_" + mod,
                 [mod](const Config& c) {
                   const auto it = c.data.phantom.contrast.find(mod);
                   return it == c.data.phantom.contrast.end() ? std::string() : fmt(it->second.mean);
                 },
                 [mod](Config& c, const std::string& v) { c.data.phantom.contrast[mod].mean = to_doubles(v); }});
  }

  // model
  b.push_back({"model.arch", [](const Config& c) { return to_string(c.model.arch); },
               [](Config& c, const std::string& v) {
                 const Architecture a = architecture_from_string(trim(v));
                 if (a != Architecture::dpn && a != Architecture::unet)
                   throw std::invalid_argument("segmentation architecture must be dpn or unet");
                 c.model.arch = a;
               }});
  b.push_back(int_key("model.width", [](Config& c) -> int& { return c.model.width; }));
  b.push_back(int_key("model.levels", [](Config& c) -> int& { return c.model.levels; }));
  b.push_back(real_key("model.dropout", [](Config& c) -> double& { return c.model.dropout; }));
  b.push_back(list_key("model.modalities", [](Config& c) -> std::vector<std::string>& { return c.model.modalities; }));

  // train
  optimizer_keys(b, "train.", [](Config& c) -> OptimizerConfig& { return c.train.opt; });
  b.push_back(bool_key("train.keep_best", [](Config& c) -> bool& { return c.train.keep_best; }));
  augmentation_keys(b, "train.augment_", [](Config& c) -> AugmentationPolicy& { return c.train.augmentation; });
  b.push_back(int_key("train.bundle_cases", [](Config& c) -> int& { return c.train.bundle_cases; }));
  b.push_back(int_key("train.synth_width", [](Config& c) -> int& { return c.train.synth_width; }));
  b.push_back(int_key("train.superres_width", [](Config& c) -> int& { return c.train.superres_width; }));
  optimizer_keys(b, "train.bundle_seg_", [](Config& c) -> OptimizerConfig& { return c.train.bundle_seg_opt; }, false);
  optimizer_keys(b, "train.bundle_aux_", [](Config& c) -> OptimizerConfig& { return c.train.bundle_aux_opt; }, false);

  // atlas
  b.push_back(int_key("atlas.cases", [](Config& c) -> std::size_t& { return c.atlas.cases; }));
  b.push_back(real_key("atlas.h", [](Config& c) -> double& { return c.atlas.fusion.h; }));
  b.push_back(int_key("atlas.radius", [](Config& c) -> int& { return c.atlas.fusion.radius; }));
  b.push_back(int_key("atlas.registration_width", [](Config& c) -> int& { return c.atlas.registration_width; }));
  optimizer_keys(b, "atlas.registration_", [](Config& c) -> OptimizerConfig& { return c.atlas.registration_opt; },
                 false);

  // curriculum
  auto cur = [](Config& c) -> CurriculumConfig& { return c.curriculum.curriculum; };
  phantom_shape_keys(b, "curriculum.", [](Config& c) -> PhantomSpec& { return c.curriculum.phantom; });
  b.push_back(int_key("curriculum.seed_cases", [](Config& c) -> int& { return c.curriculum.seed_cases; }));
  b.push_back(int_key("curriculum.pool_cases", [](Config& c) -> int& { return c.curriculum.pool_cases; }));
  b.push_back(int_key("curriculum.test_cases", [](Config& c) -> int& { return c.curriculum.test_cases; }));
  b.push_back(real_key("curriculum.shift", [](Config& c) -> double& { return c.curriculum.shift; }));
  b.push_back(int_key("curriculum.width", [](Config& c) -> int& { return c.curriculum.width; }));
  optimizer_keys(b, "curriculum.initial_", [](Config& c) -> OptimizerConfig& { return c.curriculum.initial_opt; },
                 false);
  b.push_back(int_key("curriculum.latent_dim", [](Config& c) -> int& { return c.curriculum.latent_dim; }));
  optimizer_keys(b, "curriculum.autoencoder_",
                 [](Config& c) -> OptimizerConfig& { return c.curriculum.autoencoder_opt; }, false);
  b.push_back(int_key("curriculum.iterations", [cur](Config& c) -> int& { return cur(c).iterations; }));
  b.push_back(int_key("curriculum.batch_size", [cur](Config& c) -> std::size_t& { return cur(c).batch_size; }));
  b.push_back(int_key("curriculum.k", [cur](Config& c) -> std::size_t& { return cur(c).k; }));
  b.push_back(bool_key("curriculum.chaining", [cur](Config& c) -> bool& { return cur(c).chaining; }));
  b.push_back(real_key("curriculum.first_seed", [cur](Config& c) -> double& { return cur(c).policy.first_seed; }));
  b.push_back(real_key("curriculum.first_new", [cur](Config& c) -> double& { return cur(c).policy.first_new; }));
  b.push_back(real_key("curriculum.mix_seed", [cur](Config& c) -> double& { return cur(c).policy.seed; }));
  b.push_back(real_key("curriculum.mix_fresh", [cur](Config& c) -> double& { return cur(c).policy.fresh; }));
  b.push_back(real_key("curriculum.mix_old", [cur](Config& c) -> double& { return cur(c).policy.old; }));
  optimizer_keys(b, "curriculum.finetune_", [cur](Config& c) -> OptimizerConfig& { return cur(c).finetune; }, false);
  b.push_back(list_key("curriculum.modalities", [cur](Config& c) -> std::vector<std::string>& { return cur(c).modalities; }));

  // pipeline
  for (const auto& s : default_steps()) {
    const std::string name = s.name;
    b.push_back({"pipeline.step_" + name,
                 [name](const Config& c) {
                   const StepSpec& st = step(const_cast<Config&>(c), name);
                   return st.enabled ? st.implementation : std::string("off");
                 },
                 [name](Config& c, const std::string& v) {
                   StepSpec& st = step(c, name);
                   const std::string t = trim(v);
                   if (t == "off") {
                     st.enabled = false;
                   } else if (t == "builtin" || t == "external") {
                     st.enabled = true;
                     st.implementation = t;
                   } else {
                     throw std::invalid_argument("expected builtin, external or off");
                   }
                 }});
    b.push_back({"pipeline.command_" + name,
                 [name](const Config& c) {
                   const auto& p = step(const_cast<Config&>(c), name).params;
                   const auto it = p.find("command");
                   return it == p.end() ? std::string() : it->second;
                 },
                 [name](Config& c, const std::string& v) {
                   auto& p = step(c, name).params;
                   if (trim(v).empty()) p.erase("command");
                   else p["command"] = trim(v);
                 }});
  }
  // Crop boxes apply to the pipeline and to the phantom head geometry alike.
  b.push_back({"pipeline.left_offset", [](const Config& c) { return fmt(c.pipeline.left_box.offset); },
               [](Config& c, const std::string& v) { c.head.left_box.offset = c.pipeline.left_box.offset = to_dims(v); }});
  b.push_back({"pipeline.right_offset", [](const Config& c) { return fmt(c.pipeline.right_box.offset); },
               [](Config& c, const std::string& v) { c.head.right_box.offset = c.pipeline.right_box.offset = to_dims(v); }});
  b.push_back({"pipeline.box_extent", [](const Config& c) { return fmt(c.pipeline.left_box.extent); },
               [](Config& c, const std::string& v) {
                 const Dims d = to_dims(v);
                 c.pipeline.left_box.extent = c.pipeline.right_box.extent = d;
                 c.head.left_box.extent = c.head.right_box.extent = d;
               }});
  b.push_back(dims_key("pipeline.hr_grid", [](Config& c) -> Dims& { return c.head.hr_grid; }));
  b.push_back(int_key("pipeline.workers", [](Config& c) -> int& { return c.pipeline.workers; }));
  b.push_back(int_key("pipeline.anchors", [](Config& c) -> int& { return c.pipeline.anchors; }));
  b.push_back(int_key("pipeline.atlas_cases", [](Config& c) -> std::size_t& { return c.pipeline.atlas_cases; }));
  b.push_back(int_key("pipeline.denoise_patch_radius", [](Config& c) -> int& { return c.pipeline.denoise.patch_radius; }));
  b.push_back(int_key("pipeline.denoise_search_radius", [](Config& c) -> int& { return c.pipeline.denoise.search_radius; }));
  b.push_back(real_key("pipeline.denoise_h", [](Config& c) -> double& { return c.pipeline.denoise.h; }));
  b.push_back(int_key("pipeline.affine_iterations", [](Config& c) -> int& { return c.pipeline.affine.iterations; }));
  b.push_back({"pipeline.affine_pyramid",
               [](const Config& c) {
                 std::vector<std::string> s;
                 for (int f : c.pipeline.affine.pyramid) s.push_back(std::to_string(f));
                 return join(s);
               },
               [](Config& c, const std::string& v) {
                 c.pipeline.affine.pyramid.clear();
                 for (const auto& p : split(v)) c.pipeline.affine.pyramid.push_back(int(to_int(p)));
               }});
  b.push_back(int_key("pipeline.bias_order", [](Config& c) -> int& { return c.pipeline.bias.order; }));
  b.push_back(int_key("pipeline.bias_iterations", [](Config& c) -> int& { return c.pipeline.bias.iterations; }));
  b.push_back(real_key("pipeline.icv_threshold", [](Config& c) -> double& { return c.pipeline.icv.threshold_fraction; }));
  b.push_back(int_key("pipeline.icv_closing_radius", [](Config& c) -> int& { return c.pipeline.icv.closing_radius; }));
  b.push_back(real_key("pipeline.h", [](Config& c) -> double& { return c.pipeline.fusion.h; }));
  b.push_back(int_key("pipeline.radius", [](Config& c) -> int& { return c.pipeline.fusion.radius; }));
  b.push_back(real_key("pipeline.subject_noise", [](Config& c) -> double& { return c.head.noise_sigma; }));
  b.push_back(real_key("pipeline.subject_bias", [](Config& c) -> double& { return c.head.bias_strength; }));
  b.push_back({"pipeline.subject_shift", [](const Config& c) { return fmt(std::vector<double>(c.head.shift.begin(), c.head.shift.end())); },
               [](Config& c, const std::string& v) {
                 const auto d = to_doubles(v);
                 if (d.size() != 3) throw std::invalid_argument("expected three numbers");
                 c.head.shift = {d[0], d[1], d[2]};
               }});

  // report
  auto norm = [](Config& c) -> NormativeParams& { return c.report.normative; };
  b.push_back(real_key("report.window", [norm](Config& c) -> double& { return norm(c).window; }));
  b.push_back(real_key("report.step", [norm](Config& c) -> double& { return norm(c).step; }));
  b.push_back(real_key("report.lower_percentile", [norm](Config& c) -> double& { return norm(c).lower_percentile; }));
  b.push_back(real_key("report.upper_percentile", [norm](Config& c) -> double& { return norm(c).upper_percentile; }));
  b.push_back(int_key("report.min_per_sex", [norm](Config& c) -> int& { return norm(c).min_per_sex; }));
  b.push_back(int_key("report.min_per_bin", [norm](Config& c) -> int& { return norm(c).min_per_bin; }));
  b.push_back(string_key("report.measure", [norm](Config& c) -> std::string& { return norm(c).measure; }));
  b.push_back(int_key("report.population", [](Config& c) -> int& { return c.dispersion.subjects; }));
  b.push_back(real_key("report.label_noise", [](Config& c) -> double& { return c.dispersion.label_noise; }));

  // ablate
  phantom_shape_keys(b, "ablate.", [](Config& c) -> PhantomSpec& { return c.ablate.phantom; });
  b.push_back(int_key("ablate.seeds", [](Config& c) -> int& { return c.ablate.seeds; }));
  b.push_back(int_key("ablate.train_cases", [](Config& c) -> int& { return c.ablate.train_cases; }));
  b.push_back(int_key("ablate.test_cases", [](Config& c) -> int& { return c.ablate.test_cases; }));
  b.push_back(int_key("ablate.width", [](Config& c) -> int& { return c.ablate.width; }));
  optimizer_keys(b, "ablate.", [](Config& c) -> OptimizerConfig& { return c.ablate.opt; }, false);
  optimizer_keys(b, "ablate.registration_", [](Config& c) -> OptimizerConfig& { return c.ablate.registration_opt; },
                 false);
  b.push_back(int_key("ablate.atlas_cases", [](Config& c) -> std::size_t& { return c.ablate.atlas_cases; }));
  return b;
}

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> b = build_bindings();
  return b;
}

const Binding& binding(const std::string& path) {
  for (const auto& b : bindings())
    if (b.path == path) return b;
  throw ConfigError(path, "unknown key");
}

}  // namespace

void set_config_value(Config& c, const std::string& path, const std::string& value) {
  const Binding& b = binding(path);
  try {
    b.set(c, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path, e.what());
  }
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& b : bindings()) out.push_back(b.path);
  return out;
}

void Config::validate() const {
  auto check = [](const std::string& key, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      throw ConfigError(key, e.what());
    }
  };
  check("data", [&] { data.phantom.validate(); });
  if (data.cases < 3) throw ConfigError("data.cases", "need at least 3 cases");
  if (!(data.train_fraction > 0 && data.val_fraction >= 0 && data.train_fraction + data.val_fraction < 1))
    throw ConfigError("data.train_fraction", "fractions must leave a nonempty test split");
  if (model.width < 1) throw ConfigError("model.width", "must be >= 1");
  if (model.levels < 1) throw ConfigError("model.levels", "must be >= 1");
  if (!(model.dropout >= 0 && model.dropout < 1)) throw ConfigError("model.dropout", "must be in [0, 1)");
  if (model.modalities.empty()) throw ConfigError("model.modalities", "empty");
  for (const auto& m : model.modalities)
    if (!data.phantom.contrast.count(m)) throw ConfigError("model.modalities", "phantom has no modality '" + m + "'");
  check("train", [&] { train.opt.validate(); });
  check("train.augment_probability", [&] { train.augmentation.validate(); });
  check("train.bundle_seg_epochs", [&] { train.bundle_seg_opt.validate(); });
  check("train.bundle_aux_epochs", [&] { train.bundle_aux_opt.validate(); });
  if (train.bundle_cases < 3) throw ConfigError("train.bundle_cases", "need at least 3 cases");
  if (atlas.cases < 1) throw ConfigError("atlas.cases", "must be >= 1");
  check("atlas.h", [&] { atlas.fusion.validate(); });
  check("atlas.registration_epochs", [&] { atlas.registration_opt.validate(); });
  check("curriculum", [&] { curriculum.phantom.validate(); });
  check("curriculum.mix_seed", [&] { curriculum.curriculum.policy.validate(); });
  check("curriculum.finetune_epochs", [&] { curriculum.curriculum.finetune.validate(); });
  if (curriculum.curriculum.batch_size < 1) throw ConfigError("curriculum.batch_size", "must be >= 1");
  if (curriculum.curriculum.iterations < 0) throw ConfigError("curriculum.iterations", "must be >= 0");
  if (!(curriculum.shift >= 0 && curriculum.shift <= 1)) throw ConfigError("curriculum.shift", "must be in [0, 1]");
  check("pipeline", [&] { check_steps(pipeline.steps, Space::native); });
  if (pipeline.workers < 1) throw ConfigError("pipeline.workers", "must be >= 1");
  for (const auto& [key, box] : {std::pair{"pipeline.left_offset", pipeline.left_box}, {"pipeline.right_offset", pipeline.right_box}})
    for (int a = 0; a < 3; ++a)
      if (box.offset[a] < 0 || box.extent[a] < 1 || box.offset[a] + box.extent[a] > head.hr_grid[a])
        throw ConfigError(key, "crop box leaves the high-resolution grid");
  if (head.hr_grid[0] % 2 || head.hr_grid[1] % 2 || head.hr_grid[2] % 2)
    throw ConfigError("pipeline.hr_grid", "must be even");
  check("pipeline.denoise_h", [&] { pipeline.denoise.validate(); });
  check("pipeline.affine_iterations", [&] { pipeline.affine.validate(); });
  check("pipeline.bias_order", [&] { pipeline.bias.validate(); });
  check("pipeline.icv_threshold", [&] { pipeline.icv.validate(); });
  check("pipeline.h", [&] { pipeline.fusion.validate(); });
  check("report", [&] { report.normative.validate(); });
  if (dispersion.subjects < 2) throw ConfigError("report.population", "must be >= 2");
  check("ablate", [&] { ablate.phantom.validate(); });
  if (ablate.seeds < 1) throw ConfigError("ablate.seeds", "must be >= 1");
  if (ablate.train_cases < 2) throw ConfigError("ablate.train_cases", "need at least 2 cases");
  if (ablate.test_cases < 1) throw ConfigError("ablate.test_cases", "must be >= 1");
}

Config config_from_ini(const std::string& text) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("line " + std::to_string(e.line()), e.message());
  }
  static const std::set<std::string> sections{"data", "model", "train", "atlas", "curriculum", "pipeline", "report", "ablate"};
  Config c;
  // nuclei before the contrast tables and other phantom knobs: it resets them.
  auto apply = [&](const std::string& path, const std::string& value) { set_config_value(c, path, value); };
  std::vector<std::pair<std::string, std::string>> deferred;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      if (sections.count(name)) continue;  // empty section
      apply(name, node.data());
      continue;
    }
    if (!sections.count(name)) throw ConfigError(name, "unknown section");
    for (const auto& [key, value] : node) {
      const std::string path = name + "." + key;
      if (!value.empty()) throw ConfigError(path, "nested keys are not supported");
      if (key == "nuclei") apply(path, value.data());
      else deferred.emplace_back(path, value.data());
    }
  }
  for (const auto& [path, value] : deferred) apply(path, value);
  c.validate();
  return c;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, "cannot read config file");
  std::ostringstream os;
  os << in.rdbuf();
  return config_from_ini(os.str());
}

std::string to_ini(const Config& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& b : bindings()) {
    const auto dot = b.path.find('.');
    const std::string sec = dot == std::string::npos ? "" : b.path.substr(0, dot);
    const std::string key = dot == std::string::npos ? b.path : b.path.substr(dot + 1);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << key << " = " << b.get(c) << '\n';
  }
  return os.str();
}

}  // namespace deepthal
