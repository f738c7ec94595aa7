#include "deepthal/report.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace deepthal {

using json = nlohmann::json;

std::string to_string(NormFlag f) {
  switch (f) {
    case NormFlag::below: return "below";
    case NormFlag::within: return "within";
    case NormFlag::above: return "above";
    default: return "none";
  }
}

namespace {

std::string key_of(const StructureVolume& s) { return s.name + "|" + to_string(s.side); }

// Linear interpolation between order statistics.
double quantile(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const double pos = pct / 100.0 * double(v.size() - 1);
  const auto lo = std::size_t(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------

const StructureVolume& VolumetryReport::row(int id, Side side) const {
  for (const auto& r : rows)
    if (r.id == id && r.side == side) return r;
  throw DataError("report has no row for structure " + std::to_string(id) + " (" + to_string(side) + ")");
}

std::map<std::string, double> VolumetryReport::measures(const std::string& measure) const {
  std::map<std::string, double> out;
  for (const auto& r : rows) {
    if (measure == "mm3") {
      out[key_of(r)] = r.mm3;
    } else if (measure == "percent_icv") {
      if (!r.percent_icv) throw DataError("report: percent_icv requested but ICV is not set");
      out[key_of(r)] = *r.percent_icv;
    } else {
      throw DataError("report: unknown measure '" + measure + "'");
    }
  }
  return out;
}

std::optional<double> asymmetry(double left_volume, double right_volume) {
  if (!(left_volume >= 0) || !(right_volume >= 0)) throw DataError("asymmetry: volumes must be non-negative");
  const double sum = left_volume + right_volume;
  if (sum == 0.0) return std::nullopt;
  return 200.0 * (left_volume - right_volume) / sum;
}

VolumetryReport compute_volumes(const LabelMap& left, const LabelMap& right, const Spacing& spacing) {
  for (double s : spacing)
    if (!(s > 0) || !std::isfinite(s)) throw DataError("compute_volumes: spacing must be positive");
  if (!(left.schema == right.schema)) throw DataError("compute_volumes: left and right schemas differ");
  left.validate();
  right.validate();
  VolumetryReport r;
  r.voxel_mm3 = spacing[0] * spacing[1] * spacing[2];
  const LabelSchema& schema = left.schema;
  std::map<Side, std::vector<std::int64_t>> hist{{Side::left, left.histogram()}, {Side::right, right.histogram()}};
  for (Side side : {Side::left, Side::right}) {
    const auto& h = hist[side];
    std::int64_t whole = 0;
    for (const auto& [id, name] : schema.entries) {
      StructureVolume s;
      s.id = id;
      s.name = name;
      s.side = side;
      s.voxels = h[std::size_t(id)];
      s.mm3 = double(s.voxels) * r.voxel_mm3;
      whole += s.voxels;
      r.rows.push_back(s);
    }
    StructureVolume w;
    w.id = kWholeThalamusId;
    w.name = kWholeThalamusName;
    w.side = side;
    w.voxels = whole;
    w.mm3 = double(whole) * r.voxel_mm3;
    r.rows.push_back(w);
  }
  const std::size_t per_side = r.rows.size() / 2;
  for (std::size_t i = 0; i < per_side; ++i) {
    const auto a = asymmetry(r.rows[i].mm3, r.rows[i + per_side].mm3);
    r.rows[i].asymmetry = a;
    r.rows[i + per_side].asymmetry = a;
  }
  return r;
}

void set_icv(VolumetryReport& r, double icv_mm3) {
  if (!(icv_mm3 > 0) || !std::isfinite(icv_mm3)) throw DataError("report: ICV must be positive");
  r.icv_mm3 = icv_mm3;
  for (auto& row : r.rows) row.percent_icv = 100.0 * row.mm3 / icv_mm3;
}

// ---------------------------------------------------------------------------

void NormativeParams::validate() const {
  if (!(window > 0) || !(step > 0)) throw DataError("normative: window and step must be positive");
  if (step > window) throw DataError("normative: step larger than window leaves gaps");
  if (!(lower_percentile >= 0 && lower_percentile <= upper_percentile && upper_percentile <= 100))
    throw DataError("normative: percentiles must satisfy 0 <= lower <= upper <= 100");
  if (min_per_sex < 1 || min_per_bin < 1) throw DataError("normative: minimum counts must be >= 1");
  if (measure != "mm3" && measure != "percent_icv") throw DataError("normative: unknown measure '" + measure + "'");
}

const NormativeBin& NormativeModel::bin(const std::string& key, const std::string& sex, double age) const {
  const auto s = bounds.find(key);
  if (s == bounds.end()) throw DataError("normative model has no structure '" + key + "'");
  const auto b = s->second.find(sex);
  if (b == s->second.end() || b->second.empty()) throw DataError("normative model has no bins for sex '" + sex + "'");
  const NormativeBin* best = &b->second.front();
  for (const auto& bin : b->second)
    if (std::abs(bin.center - age) < std::abs(best->center - age)) best = &bin;
  return *best;
}

void NormativeModel::validate() const {
  params.validate();
  for (const auto& [key, by_sex] : bounds)
    for (const auto& [sex, bins] : by_sex) {
      if (bins.empty()) throw DataError("normative: no bins for " + key + " / " + sex);
      if (bins.front().age_lo > age_min || bins.back().age_hi < age_max)
        throw DataError("normative: bins do not cover the age range for " + key + " / " + sex);
      for (std::size_t i = 0; i < bins.size(); ++i) {
        if (bins[i].lower > bins[i].upper) throw DataError("normative: lower bound above upper for " + key);
        if (i > 0 && bins[i].age_lo > bins[i - 1].age_hi) throw DataError("normative: gap between age bins for " + key);
      }
    }
}

NormativeModel fit_normative(const std::vector<NormativeSubject>& population, const NormativeParams& params) {
  params.validate();
  if (population.empty()) throw DataError("fit_normative: empty population");
  std::map<std::string, std::vector<const NormativeSubject*>> by_sex;
  for (const auto& s : population) {
    if (!std::isfinite(s.age)) throw DataError("fit_normative: subject '" + s.id + "' has no age");
    if (s.volumes.empty()) throw DataError("fit_normative: subject '" + s.id + "' has no volumes");
    by_sex[s.sex].push_back(&s);
  }
  for (const auto& [sex, list] : by_sex)
    if (int(list.size()) < params.min_per_sex)
      throw DataError("fit_normative: " + std::to_string(list.size()) + " subjects of sex '" + sex + "', need " +
                      std::to_string(params.min_per_sex));
  std::set<std::string> keys;
  for (const auto& [k, v] : population.front().volumes) keys.insert(k);
  for (const auto& s : population) {
    if (s.volumes.size() != keys.size()) throw DataError("fit_normative: subjects report different structures");
    for (const auto& [k, v] : s.volumes)
      if (!keys.count(k)) throw DataError("fit_normative: subject '" + s.id + "' has unexpected structure '" + k + "'");
  }

  NormativeModel m;
  m.params = params;
  m.age_min = population.front().age;
  m.age_max = population.front().age;
  for (const auto& s : population) {
    m.age_min = std::min(m.age_min, s.age);
    m.age_max = std::max(m.age_max, s.age);
  }
  const double half = params.window / 2.0;
  std::vector<double> centers;
  for (double c = m.age_min; ; c += params.step) {
    centers.push_back(c);
    if (c + half >= m.age_max) break;
  }
  for (const auto& [sex, list] : by_sex) {
    for (double c : centers) {
      std::vector<const NormativeSubject*> members;
      for (const auto* s : list)
        if (std::abs(s->age - c) <= half) members.push_back(s);
      if (int(members.size()) < params.min_per_bin) {
        members = list;
        std::stable_sort(members.begin(), members.end(), [c](const auto* a, const auto* b) {
          return std::abs(a->age - c) < std::abs(b->age - c);
        });
        members.resize(std::size_t(params.min_per_bin));
      }
      for (const auto& key : keys) {
        std::vector<double> v;
        for (const auto* s : members) v.push_back(s->volumes.at(key));
        NormativeBin b;
        b.center = c;
        b.age_lo = c - half;
        b.age_hi = c + half;
        b.lower = quantile(v, params.lower_percentile);
        b.upper = quantile(v, params.upper_percentile);
        b.n = int(members.size());
        m.bounds[key][sex].push_back(b);
      }
    }
  }
  m.validate();
  return m;
}

NormativeSubject to_normative_subject(const VolumetryReport& r, const std::string& measure) {
  if (!r.age) throw DataError("report for '" + r.subject_id + "' has no age");
  NormativeSubject s;
  s.id = r.subject_id;
  s.age = *r.age;
  s.sex = r.sex;
  s.volumes = r.measures(measure);
  return s;
}

void apply_normative(VolumetryReport& r, const NormativeModel& model) {
  if (!r.age) throw DataError("apply_normative: subject age is missing");
  const auto values = r.measures(model.params.measure);
  for (auto& row : r.rows) {
    const std::string key = key_of(row);
    const auto s = model.bounds.find(key);
    if (s == model.bounds.end() || !s->second.count(r.sex)) {
      row.flag = NormFlag::none;
      continue;
    }
    const NormativeBin& b = model.bin(key, r.sex, *r.age);
    const double v = values.at(key);
    row.flag = v < b.lower ? NormFlag::below : v > b.upper ? NormFlag::above : NormFlag::within;
  }
}

DispersionComparison compare_dispersion(const NormativeModel& a, const NormativeModel& b) {
  DispersionComparison out;
  std::vector<double> means_a, means_b;
  for (const auto& [key, by_sex] : a.bounds) {
    const auto other = b.bounds.find(key);
    if (other == b.bounds.end()) throw DataError("compare_dispersion: structure '" + key + "' missing in second model");
    std::vector<double> wa, wb;
    for (const auto& [sex, bins] : by_sex) {
      const auto ob = other->second.find(sex);
      if (ob == other->second.end() || ob->second.size() != bins.size())
        throw DataError("compare_dispersion: bin layouts differ for '" + key + "'");
      for (std::size_t i = 0; i < bins.size(); ++i) {
        if (std::abs(bins[i].center - ob->second[i].center) > 1e-9)
          throw DataError("compare_dispersion: bin centres differ for '" + key + "'");
        wa.push_back(bins[i].width());
        wb.push_back(ob->second[i].width());
      }
    }
    StructureDispersion d;
    d.key = key;
    for (double w : wa) d.mean_width_a += w / double(wa.size());
    for (double w : wb) d.mean_width_b += w / double(wb.size());
    try {
      d.test = wilcoxon_signed_rank(wa, wb);
      if (d.test->p_value < 0.05) ++out.significant;
    } catch (const DataError&) {
      // fewer than five bins differ
    }
    means_a.push_back(d.mean_width_a);
    means_b.push_back(d.mean_width_b);
    out.structures.push_back(d);
  }
  if (b.bounds.size() != a.bounds.size()) throw DataError("compare_dispersion: models cover different structures");
  for (double w : means_a) out.mean_width_a += w / double(means_a.size());
  for (double w : means_b) out.mean_width_b += w / double(means_b.size());
  try {
    out.overall = wilcoxon_signed_rank(means_a, means_b);
  } catch (const DataError&) {
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string report_to_json(const VolumetryReport& r, bool pretty) {
  json j;
  j["subject_id"] = r.subject_id;
  j["age"] = r.age ? json(*r.age) : json(nullptr);
  j["sex"] = r.sex;
  j["icv_mm3"] = r.icv_mm3 ? json(*r.icv_mm3) : json(nullptr);
  j["voxel_mm3"] = r.voxel_mm3;
  j["normalization"] = "percent of intracranial volume";
  j["structures"] = json::array();
  for (const auto& s : r.rows)
    j["structures"].push_back({{"id", s.id},
                               {"name", s.name},
                               {"side", to_string(s.side)},
                               {"voxels", s.voxels},
                               {"volume_mm3", s.mm3},
                               {"volume_percent_icv", s.percent_icv ? json(*s.percent_icv) : json(nullptr)},
                               {"asymmetry_index", s.asymmetry ? json(*s.asymmetry) : json(nullptr)},
                               {"normative_flag", to_string(s.flag)}});
  return pretty ? j.dump(2) : j.dump();
}

std::string report_to_csv(const VolumetryReport& r) {
  std::ostringstream os;
  os << "subject_id,side,structure_id,structure,voxels,volume_mm3,volume_percent_icv,asymmetry_index,normative_flag\n";
  for (const auto& s : r.rows)
    os << csv_field(r.subject_id) << ',' << to_string(s.side) << ',' << s.id << ',' << csv_field(s.name) << ','
       << s.voxels << ',' << num(s.mm3) << ',' << (s.percent_icv ? num(*s.percent_icv) : "") << ','
       << (s.asymmetry ? num(*s.asymmetry) : "") << ',' << to_string(s.flag) << '\n';
  return os.str();
}

void write_report(const VolumetryReport& r, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream j(fs::path(dir) / "report.json"), c(fs::path(dir) / "report.csv");
  if (!j || !c) throw DataError("cannot write report into " + dir);
  j << report_to_json(r) << "\n";
  c << report_to_csv(r);
}

std::string normative_to_json(const NormativeModel& m) {
  json j;
  j["params"] = {{"window", m.params.window},
                 {"step", m.params.step},
                 {"lower_percentile", m.params.lower_percentile},
                 {"upper_percentile", m.params.upper_percentile},
                 {"min_per_sex", m.params.min_per_sex},
                 {"min_per_bin", m.params.min_per_bin},
                 {"measure", m.params.measure}};
  j["age_min"] = m.age_min;
  j["age_max"] = m.age_max;
  json bounds = json::object();
  for (const auto& [key, by_sex] : m.bounds)
    for (const auto& [sex, bins] : by_sex)
      for (const auto& b : bins)
        bounds[key][sex].push_back({{"center", b.center},
                                    {"age_lo", b.age_lo},
                                    {"age_hi", b.age_hi},
                                    {"lower", b.lower},
                                    {"upper", b.upper},
                                    {"n", b.n}});
  j["bounds"] = bounds;
  return j.dump(2);
}

NormativeModel normative_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    NormativeModel m;
    const json& p = j.at("params");
    m.params.window = p.at("window").get<double>();
    m.params.step = p.at("step").get<double>();
    m.params.lower_percentile = p.at("lower_percentile").get<double>();
    m.params.upper_percentile = p.at("upper_percentile").get<double>();
    m.params.min_per_sex = p.at("min_per_sex").get<int>();
    m.params.min_per_bin = p.at("min_per_bin").get<int>();
    m.params.measure = p.at("measure").get<std::string>();
    m.age_min = j.at("age_min").get<double>();
    m.age_max = j.at("age_max").get<double>();
    for (const auto& [key, by_sex] : j.at("bounds").items())
      for (const auto& [sex, bins] : by_sex.items())
        for (const auto& b : bins)
          m.bounds[key][sex].push_back({b.at("center").get<double>(), b.at("age_lo").get<double>(),
                                        b.at("age_hi").get<double>(), b.at("lower").get<double>(),
                                        b.at("upper").get<double>(), b.at("n").get<int>()});
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("normative model: ") + e.what());
  }
}

}  // namespace deepthal
