#include "deepthal/volumes.hpp"

#include "deepthal/nn/ops.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace deepthal {

std::string to_string(Space s) {
  switch (s) {
    case Space::native: return "native";
    case Space::mni_std: return "mni_std";
    case Space::mni_hr: return "mni_hr";
    case Space::crop: return "crop";
  }
  return "?";
}

std::string to_string(Side s) {
  switch (s) {
    case Side::left: return "left";
    case Side::right: return "right";
    case Side::none: return "n/a";
  }
  return "?";
}

Space space_from_string(const std::string& s) {
  if (s == "native") return Space::native;
  if (s == "mni_std") return Space::mni_std;
  if (s == "mni_hr") return Space::mni_hr;
  if (s == "crop") return Space::crop;
  throw DataError("unknown space tag '" + s + "'");
}

Side side_from_string(const std::string& s) {
  if (s == "left") return Side::left;
  if (s == "right") return Side::right;
  if (s == "n/a" || s == "none") return Side::none;
  throw DataError("unknown side tag '" + s + "'");
}

const LabelSchema& LabelSchema::thalamus() {
  static const LabelSchema schema{{
      {1, "Anterior Ventral Nucleus"},
      {2, "Ventral Anterior Nucleus"},
      {3, "Ventral Lateral Anterior Nucleus"},
      {4, "Ventral Lateral Posterior Nucleus"},
      {5, "Ventral Posterior Lateral Nucleus"},
      {6, "Pulvinar Nucleus"},
      {7, "Lateral Geniculate Nucleus"},
      {8, "Medial Geniculate Nucleus"},
      {9, "Centromedian Nucleus"},
      {10, "Mediodorsal Nucleus"},
      {11, "Habenular Nucleus"},
      {12, "Mammillothalamic Tract"},
      {13, "Intermediate Space"},
  }};
  return schema;
}

LabelSchema LabelSchema::first(int n) {
  const auto& all = thalamus().entries;
  if (n < 1 || n > int(all.size())) throw DataError("label schema size must be in 1..13");
  return LabelSchema{{all.begin(), all.begin() + n}};
}

bool LabelSchema::contains(int id) const {
  for (const auto& e : entries)
    if (e.first == id) return true;
  return false;
}

const std::string& LabelSchema::name(int id) const {
  for (const auto& e : entries)
    if (e.first == id) return e.second;
  throw DataError("label id " + std::to_string(id) + " not in schema");
}

std::vector<int> LabelSchema::ids() const {
  std::vector<int> out;
  for (const auto& e : entries) out.push_back(e.first);
  return out;
}

void LabelMap::validate() const {
  const int max_id = schema.max_id();
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const int v = data(i);
    if (v != 0 && (v > max_id || !schema.contains(v)))
      throw DataError("label value " + std::to_string(v) + " is not in the schema");
  }
}

std::vector<std::int64_t> LabelMap::histogram() const {
  std::vector<std::int64_t> h(std::size_t(std::max(schema.max_id(), 0) + 1), 0);
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const std::size_t v = data(i);
    if (v < h.size()) ++h[v];
  }
  return h;
}

const Volume3D& CaseBundle::modality(const std::string& name) const {
  auto it = modalities.find(name);
  if (it == modalities.end()) throw DataError("case '" + meta.id + "' has no modality '" + name + "'");
  return it->second;
}

const Volume3D& CaseBundle::any_modality() const {
  if (modalities.empty()) throw DataError("case '" + meta.id + "' has no modalities");
  return modalities.begin()->second;
}

void CaseBundle::validate() const {
  const Volume3D& ref = any_modality();
  for (const auto& [name, v] : modalities)
    if (!v.same_geometry(ref)) throw DataError("case '" + meta.id + "': modality '" + name + "' geometry differs");
  if (labels) {
    if (!labels->same_geometry(ref)) throw DataError("case '" + meta.id + "': label geometry differs");
    labels->validate();
  }
  if (ref.space == Space::crop && meta.side == Side::none)
    throw DataError("case '" + meta.id + "': cropped case without side");
}

Volume3D zscore(const Volume3D& v) {
  const Eigen::ArrayXd d = v.data.cast<double>();
  const double mean = d.mean();
  const double var = (d - mean).square().mean();
  if (!(var > 0) || d.maxCoeff() == d.minCoeff())
    throw DataError("zscore: constant volume cannot be standardized");
  Volume3D out = v;
  out.data = ((d - mean) / std::sqrt(var)).cast<float>();
  return out;
}

namespace {

nn::Tensor<float> single(const Volume3D& v) {
  nn::Tensor<float> t(nn::Shape{1, v.dims[0], v.dims[1], v.dims[2]});
  t.data.row(0) = v.data.matrix().transpose();
  return t;
}

Volume3D unsingle(const nn::Tensor<float>& t, const Volume3D& like, Spacing sp) {
  Volume3D out = like.like(Dims{t.shape.x, t.shape.y, t.shape.z});
  out.spacing = sp;
  out.data = t.data.row(0).transpose().array();
  return out;
}

}  // namespace

Volume3D avg_pool(const Volume3D& v, int factor) {
  if (factor < 1) throw DataError("avg_pool: factor must be >= 1");
  for (int a = 0; a < 3; ++a)
    if (v.dims[a] % factor)
      throw DataError("avg_pool: dims not divisible by " + std::to_string(factor) + "; pad_to_multiple first");
  nn::NoGradGuard guard;
  auto out = nn::avg_pool(nn::constant(single(v)), factor);
  Spacing sp{v.spacing[0] * factor, v.spacing[1] * factor, v.spacing[2] * factor};
  Volume3D r = unsingle(out->value, v, sp);
  if (r.space == Space::mni_hr) r.space = Space::mni_std;
  return r;
}

Volume3D upsample(const Volume3D& v, int factor, Interp kind) {
  if (factor < 1) throw DataError("upsample: factor must be >= 1");
  Spacing sp{v.spacing[0] / factor, v.spacing[1] / factor, v.spacing[2] / factor};
  Volume3D out;
  if (kind == Interp::trilinear) {
    nn::NoGradGuard guard;
    auto t = nn::upsample(nn::constant(single(v)), factor);
    out = unsingle(t->value, v, sp);
  } else {
    out = v.like(Dims{v.dims[0] * factor, v.dims[1] * factor, v.dims[2] * factor});
    out.spacing = sp;
    for (int x = 0; x < out.dims[0]; ++x)
      for (int y = 0; y < out.dims[1]; ++y)
        for (int z = 0; z < out.dims[2]; ++z) out(x, y, z) = v(x / factor, y / factor, z / factor);
  }
  if (out.space == Space::mni_std && sp == kHighResSpacing) out.space = Space::mni_hr;
  return out;
}

LabelMap upsample(const LabelMap& v, int factor) {
  if (factor < 1) throw DataError("upsample: factor must be >= 1");
  LabelMap out(v.like(Dims{v.dims[0] * factor, v.dims[1] * factor, v.dims[2] * factor}), v.schema);
  out.spacing = {v.spacing[0] / factor, v.spacing[1] / factor, v.spacing[2] / factor};
  for (int x = 0; x < out.dims[0]; ++x)
    for (int y = 0; y < out.dims[1]; ++y)
      for (int z = 0; z < out.dims[2]; ++z) out(x, y, z) = v(x / factor, y / factor, z / factor);
  return out;
}

LabelMap downsample_labels(const LabelMap& v, int factor) {
  for (int a = 0; a < 3; ++a)
    if (v.dims[a] % factor) throw DataError("downsample_labels: dims not divisible by factor");
  LabelMap out(v.like(Dims{v.dims[0] / factor, v.dims[1] / factor, v.dims[2] / factor}), v.schema);
  out.spacing = {v.spacing[0] * factor, v.spacing[1] * factor, v.spacing[2] * factor};
  if (out.space == Space::mni_hr) out.space = Space::mni_std;
  std::vector<int> votes(std::size_t(v.schema.max_id() + 1));
  for (int x = 0; x < out.dims[0]; ++x)
    for (int y = 0; y < out.dims[1]; ++y)
      for (int z = 0; z < out.dims[2]; ++z) {
        std::fill(votes.begin(), votes.end(), 0);
        for (int i = 0; i < factor; ++i)
          for (int j = 0; j < factor; ++j)
            for (int k = 0; k < factor; ++k) ++votes[v(x * factor + i, y * factor + j, z * factor + k)];
        out(x, y, z) = std::uint8_t(std::max_element(votes.begin(), votes.end()) - votes.begin());
      }
  return out;
}

Volume3D resize(const Volume3D& v, Dims dims) {
  nn::NoGradGuard guard;
  auto t = nn::resize_trilinear(nn::constant(single(v)), dims);
  Spacing sp;
  for (int a = 0; a < 3; ++a) sp[a] = v.spacing[a] * v.dims[a] / dims[a];
  Volume3D out = unsingle(t->value, v, sp);
  if (out.space == Space::mni_hr && sp != kHighResSpacing) out.space = Space::mni_std;
  return out;
}

nn::Tensor<float> to_tensor(const std::vector<const Volume3D*>& channels) {
  if (channels.empty()) throw DataError("to_tensor: no channels");
  const Volume3D& ref = *channels.front();
  nn::Tensor<float> t(nn::Shape{int(channels.size()), ref.dims[0], ref.dims[1], ref.dims[2]});
  for (std::size_t c = 0; c < channels.size(); ++c) {
    if (channels[c]->dims != ref.dims) throw DataError("to_tensor: channel geometry mismatch");
    t.data.row(Eigen::Index(c)) = channels[c]->data.matrix().transpose();
  }
  return t;
}

Volume3D from_tensor(const nn::Tensor<float>& t, int channel, const Volume3D& like) {
  Volume3D out = like.like(Dims{t.shape.x, t.shape.y, t.shape.z});
  out.data = t.data.row(channel).transpose().array();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void write_raw(const std::string& path, const Eigen::Array<T, Eigen::Dynamic, 1>& data) {
  static_assert(std::endian::native == std::endian::little, "raw volume IO assumes a little-endian host");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(sizeof(T) * std::size_t(data.size())));
  if (!f) throw DataError("short write to " + path);
}

template <typename T>
void read_raw(const std::string& path, Eigen::Array<T, Eigen::Dynamic, 1>& data, std::int64_t n) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path);
  data.resize(n);
  f.read(reinterpret_cast<char*>(data.data()), std::streamsize(sizeof(T) * std::size_t(n)));
  if (f.gcount() != std::streamsize(sizeof(T) * std::size_t(n))) throw DataError(path + " is truncated");
  if (f.peek() != std::char_traits<char>::eof()) throw DataError(path + " has trailing bytes");
}

template <typename T>
void write_header(const std::string& path, const Grid<T>& v, const std::string& dtype, int max_label) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << std::setprecision(17);
  f << "dims: " << v.dims[0] << " " << v.dims[1] << " " << v.dims[2] << "\n";
  f << "spacing: " << v.spacing[0] << " " << v.spacing[1] << " " << v.spacing[2] << "\n";
  f << "space: " << to_string(v.space) << "\n";
  f << "side: " << to_string(v.side) << "\n";
  f << "origin: " << v.origin[0] << " " << v.origin[1] << " " << v.origin[2] << "\n";
  f << "dtype: " << dtype << "\n";
  if (max_label > 0) f << "labels: " << max_label << "\n";
}

struct Header {
  Grid<float> meta;
  std::string dtype;
  int labels = 0;
};

Header read_header(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path);
  Header h;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw DataError(path + ": malformed line '" + line + "'");
    const std::string key = line.substr(0, colon);
    std::istringstream is(line.substr(colon + 1));
    seen.insert(key);
    if (key == "dims") is >> h.meta.dims[0] >> h.meta.dims[1] >> h.meta.dims[2];
    else if (key == "spacing") is >> h.meta.spacing[0] >> h.meta.spacing[1] >> h.meta.spacing[2];
    else if (key == "origin") is >> h.meta.origin[0] >> h.meta.origin[1] >> h.meta.origin[2];
    else if (key == "space") { std::string s; is >> s; h.meta.space = space_from_string(s); }
    else if (key == "side") { std::string s; is >> s; h.meta.side = side_from_string(s); }
    else if (key == "dtype") is >> h.dtype;
    else if (key == "labels") is >> h.labels;
    else throw DataError(path + ": unknown header key '" + key + "'");
    if (is.fail()) throw DataError(path + ": bad value for '" + key + "'");
  }
  for (const char* k : {"dims", "spacing", "space", "side", "dtype"})
    if (!seen.count(k)) throw DataError(path + ": missing header key '" + std::string(k) + "'");
  h.meta.check_geometry();
  return h;
}

}  // namespace

void write_volume(const std::string& base, const Volume3D& v) {
  write_header(base + ".hdr", v, "float32", 0);
  write_raw(base + ".raw", v.data);
}

void write_labels(const std::string& base, const LabelMap& v) {
  write_header(base + ".hdr", v, "uint8", v.schema.size());
  write_raw(base + ".raw", v.data);
}

Volume3D read_volume(const std::string& base) {
  Header h = read_header(base + ".hdr");
  if (h.dtype != "float32") throw DataError(base + ".hdr: expected dtype float32, got " + h.dtype);
  Volume3D v = h.meta;
  read_raw(base + ".raw", v.data, v.voxels());
  if (!v.data.isFinite().all()) throw DataError(base + ".raw contains non-finite values");
  return v;
}

LabelMap read_labels(const std::string& base) {
  Header h = read_header(base + ".hdr");
  if (h.dtype != "uint8") throw DataError(base + ".hdr: expected dtype uint8, got " + h.dtype);
  LabelMap m(h.meta.like<std::uint8_t>(h.meta.dims), LabelSchema::first(h.labels > 0 ? h.labels : 13));
  read_raw(base + ".raw", m.data, m.voxels());
  m.validate();
  return m;
}

}  // namespace deepthal
