#include "deepthal/curriculum.hpp"

#include "json.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

namespace deepthal {

namespace fs = std::filesystem;
using json = nlohmann::json;

Eigen::MatrixX2d pca_2d(const Eigen::MatrixXd& latents, std::uint64_t) {
  if (latents.rows() < 1 || latents.cols() < 1) throw DataError("pca_2d: empty latent matrix");
  const Eigen::MatrixXd c = latents.rowwise() - latents.colwise().mean();
  Eigen::MatrixX2d out = Eigen::MatrixX2d::Zero(latents.rows(), 2);
  if (latents.rows() < 2) return out;
  const Eigen::MatrixXd cov = c.transpose() * c / double(latents.rows() - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::Index d = cov.rows();
  for (int j = 0; j < 2 && j < d; ++j) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - j);  // eigenvalues ascend
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.col(j) = c * v;
  }
  return out;
}

void EmbeddingIndex::validate() const {
  const auto n = ids.size();
  if (labeled.size() != n || source.size() != n || std::size_t(latent.rows()) != n || std::size_t(coords.rows()) != n)
    throw DataError("embedding index: inconsistent sizes");
}

EmbeddingIndex embed_all(const std::vector<CaseBundle>& cases, const TrainedModel& ae, const std::string& modality,
                         const Reducer& reducer, std::uint64_t seed) {
  if (ae.spec.arch != Architecture::autoencoder) throw DataError("embed_all: model is not an autoencoder");
  if (ae.training_log.empty()) throw DataError("embed_all: autoencoder is untrained");
  if (cases.empty()) throw DataError("embed_all: no cases");
  EmbeddingIndex idx;
  idx.latent.resize(Eigen::Index(cases.size()), ae.spec.latent_dim);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Volume3D z = zscore(cases[i].modality(modality));
    idx.latent.row(Eigen::Index(i)) = encode(ae, to_tensor({&z})).cast<double>().transpose();
    idx.ids.push_back(cases[i].meta.id);
    idx.labeled.push_back(cases[i].labels.has_value() && !cases[i].meta.pseudo_label);
    idx.source.push_back(cases[i].meta.source);
  }
  idx.coords = reducer(idx.latent, seed);
  idx.validate();
  return idx;
}

std::vector<std::vector<std::size_t>> rank_and_batch(const EmbeddingIndex& index, std::size_t batch_size,
                                                     std::size_t k, bool chaining) {
  index.validate();
  if (batch_size == 0 || k == 0) throw DataError("rank_and_batch: batch_size and k must be >= 1");
  std::vector<std::size_t> anchors, pool;
  for (std::size_t i = 0; i < index.size(); ++i) (index.labeled[i] ? anchors : pool).push_back(i);
  if (anchors.empty()) throw DataError("rank_and_batch: no labeled cases to rank against");

  // k smallest distances from every pool case to the anchor set, ascending.
  std::vector<std::vector<double>> nearest(index.size());
  std::vector<bool> done(index.size(), false);
  auto add_anchor = [&](std::size_t a) {
    for (std::size_t u : pool) {
      if (done[u]) continue;
      const double d = (index.coords.row(Eigen::Index(u)) - index.coords.row(Eigen::Index(a))).norm();
      auto& nv = nearest[u];
      if (nv.size() == k && d >= nv.back()) continue;
      nv.insert(std::upper_bound(nv.begin(), nv.end(), d), d);
      if (nv.size() > k) nv.pop_back();
    }
  };
  for (std::size_t a : anchors) add_anchor(a);
  auto score = [&](std::size_t u) {
    const auto& nv = nearest[u];
    return std::accumulate(nv.begin(), nv.end(), 0.0) / double(nv.size());
  };

  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> remaining = pool;
  while (!remaining.empty()) {
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t u : remaining) ranked.emplace_back(score(u), u);
    std::sort(ranked.begin(), ranked.end());
    if (!chaining) {
      for (std::size_t i = 0; i < ranked.size(); i += batch_size) {
        std::vector<std::size_t> b;
        for (std::size_t j = i; j < std::min(ranked.size(), i + batch_size); ++j) b.push_back(ranked[j].second);
        batches.push_back(std::move(b));
      }
      break;
    }
    std::vector<std::size_t> b;
    for (std::size_t j = 0; j < std::min(batch_size, ranked.size()); ++j) {
      b.push_back(ranked[j].second);
      done[ranked[j].second] = true;
    }
    for (std::size_t a : b) add_anchor(a);
    remaining.erase(std::remove_if(remaining.begin(), remaining.end(), [&](std::size_t u) { return done[u]; }),
                    remaining.end());
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<std::size_t> batch_sizes(std::size_t pool, std::size_t batch_size) {
  if (batch_size == 0) throw DataError("batch_sizes: batch_size must be >= 1");
  std::vector<std::size_t> out(pool / batch_size, batch_size);
  if (pool % batch_size) out.push_back(pool % batch_size);
  return out;
}

void MixingPolicy::validate() const {
  for (double p : {first_seed, first_new, seed, fresh, old})
    if (!(p >= 0 && p <= 1)) throw DataError("mixing policy: probabilities must lie in [0, 1]");
  if (std::abs(first_seed + first_new - 1.0) > 1e-9 || std::abs(seed + fresh + old - 1.0) > 1e-9)
    throw DataError("mixing policy: probabilities must sum to 1 per phase");
}

MixSource MixingPolicy::draw(int iteration, std::mt19937_64& rng) const {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (iteration <= 1) return u < first_seed ? MixSource::seed : MixSource::fresh;
  if (u < seed) return MixSource::seed;
  return u < seed + fresh ? MixSource::fresh : MixSource::old;
}

std::vector<CaseBundle> pseudo_label(const std::vector<CaseBundle>& batch,
                                     const std::vector<const TrainedModel*>& ensemble,
                                     const std::vector<std::string>& modalities) {
  if (ensemble.empty()) throw DataError("pseudo_label: empty ensemble");
  std::vector<CaseBundle> out;
  for (const auto& c : batch) {
    c.validate();
    CaseBundle p = c;
    p.labels.reset();
    const Sample s = make_sample(p, modalities);
    const std::vector<nn::Tensor<float>> inputs(ensemble.size(), s.input);
    const Volume3D& like = c.modality(modalities.front());
    p.labels = argmax_labels(ensemble_probs(ensemble, inputs), like, ensemble.front()->schema);
    p.meta.pseudo_label = true;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// State persistence

namespace {

json metrics_json(const IterationMetrics& m) {
  return json{{"iteration", m.iteration},
              {"batch_ids", m.batch_ids},
              {"seed_test_dice", m.seed_test_dice},
              {"seed_test_whole", m.seed_test_whole},
              {"shifted_dice", m.shifted_dice},
              {"shifted_whole", m.shifted_whole},
              {"pseudo_label_dice", m.pseudo_label_dice}};
}

IterationMetrics metrics_from_json(const json& j) {
  IterationMetrics m;
  m.iteration = j.at("iteration").get<int>();
  m.batch_ids = j.at("batch_ids").get<std::vector<std::string>>();
  m.seed_test_dice = j.at("seed_test_dice").get<double>();
  m.seed_test_whole = j.at("seed_test_whole").get<double>();
  m.shifted_dice = j.at("shifted_dice").get<double>();
  m.shifted_whole = j.at("shifted_whole").get<double>();
  m.pseudo_label_dice = j.at("pseudo_label_dice").get<double>();
  return m;
}

void write_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write '" + tmp + "'");
    f << text;
  }
  fs::rename(tmp, path);
}

}  // namespace

void save_state(const CurriculumState& s, const std::string& path) {
  json j;
  j["iteration"] = s.iteration;
  j["incorporated"] = s.incorporated;
  j["remaining"] = s.remaining;
  j["checkpoint"] = s.checkpoint;
  j["history"] = json::array();
  for (const auto& m : s.history) j["history"].push_back(metrics_json(m));
  write_atomic(path, j.dump(2) + "\n");
}

CurriculumState load_state(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open curriculum state '" + path + "'");
  try {
    const json j = json::parse(f);
    CurriculumState s;
    s.iteration = j.at("iteration").get<int>();
    s.incorporated = j.at("incorporated").get<std::vector<std::string>>();
    s.remaining = j.at("remaining").get<std::vector<std::string>>();
    s.checkpoint = j.at("checkpoint").get<std::string>();
    for (const auto& m : j.at("history")) s.history.push_back(metrics_from_json(m));
    return s;
  } catch (const json::exception& e) {
    throw DataError("curriculum state '" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Curriculum loop

namespace {

struct TestScore {
  double mean = 0, whole = 0;
};

TestScore evaluate(const TrainedModel& m, const std::vector<CaseBundle>& cases,
                   const std::vector<std::string>& modalities) {
  TestScore t;
  for (const auto& c : cases) {
    if (!c.labels) throw DataError("curriculum: test case '" + c.meta.id + "' has no labels");
    const Sample s = make_sample(c, modalities);
    const DiceReport r = dice_report(segment(m, s.input, c.modality(modalities.front())), *c.labels);
    t.mean += r.mean / double(cases.size());
    t.whole += r.whole_thalamus / double(cases.size());
  }
  return t;
}

}  // namespace

CurriculumResult run_curriculum(const CurriculumInputs& in, const TrainedModel& initial,
                                const CurriculumConfig& cfg) {
  cfg.policy.validate();
  cfg.finetune.validate();
  if (cfg.iterations < 0) throw DataError("curriculum: iterations must be >= 0");
  if (in.seed_set.empty()) throw DataError("curriculum: empty seed set");
  in.index.validate();
  if (in.index.size() != in.seed_set.size() + in.pool.size())
    throw DataError("curriculum: embedding index must cover the seed set followed by the pool");
  for (std::size_t i = 0; i < in.index.size(); ++i) {
    const bool is_seed = i < in.seed_set.size();
    const std::string& id = is_seed ? in.seed_set[i].meta.id : in.pool[i - in.seed_set.size()].meta.id;
    if (in.index.ids[i] != id || in.index.labeled[i] != is_seed)
      throw DataError("curriculum: embedding index order does not match seed set + pool at '" + id + "'");
  }

  const auto batches = rank_and_batch(in.index, cfg.batch_size, cfg.k, cfg.chaining);
  const int total = std::min<int>(cfg.iterations, int(batches.size()));
  std::map<std::string, std::size_t> pool_pos;
  for (std::size_t i = 0; i < in.pool.size(); ++i) pool_pos[in.pool[i].meta.id] = i;

  const bool persist = !cfg.state_dir.empty();
  const std::string state_path = persist ? (fs::path(cfg.state_dir) / "state.json").string() : "";
  if (persist) fs::create_directories(fs::path(cfg.state_dir) / "pseudo");

  CurriculumResult res;
  res.model = initial;
  std::vector<CaseBundle> incorporated;  // pseudo-labelled, incorporation order
  if (persist && fs::exists(state_path)) {
    res.state = load_state(state_path);
    if (!res.state.checkpoint.empty()) res.model = load_model(res.state.checkpoint);
    for (const auto& id : res.state.incorporated) {
      const auto it = pool_pos.find(id);
      if (it == pool_pos.end()) throw DataError("curriculum state names unknown case '" + id + "'");
      CaseBundle c = in.pool[it->second];
      c.labels = read_labels((fs::path(cfg.state_dir) / "pseudo" / id).string());
      c.meta.pseudo_label = true;
      incorporated.push_back(std::move(c));
    }
  } else {
    for (const auto& c : in.pool) res.state.remaining.push_back(c.meta.id);
  }

  std::vector<Sample> seed_samples;
  for (const auto& c : in.seed_set) seed_samples.push_back(make_sample(c, cfg.modalities));

  for (int it = res.state.iteration + 1; it <= total; ++it) {
    const auto& batch_idx = batches[std::size_t(it - 1)];
    std::vector<CaseBundle> batch;
    for (std::size_t i : batch_idx) batch.push_back(in.pool[i - in.seed_set.size()]);
    const auto labelled = pseudo_label(batch, {&res.model}, cfg.modalities);

    IterationMetrics m;
    m.iteration = it;
    double pl = 0;
    bool have_truth = true;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      m.batch_ids.push_back(batch[b].meta.id);
      if (batch[b].labels) pl += dice_report(*labelled[b].labels, *batch[b].labels).mean / double(batch.size());
      else have_truth = false;
    }
    if (have_truth) m.pseudo_label_dice = pl;

    // Training set: seed cases, this batch, then earlier batches.
    std::vector<Sample> samples = seed_samples;
    const std::size_t n_seed = samples.size();
    for (const auto& c : labelled) samples.push_back(make_sample(c, cfg.modalities));
    const std::size_t n_new = labelled.size();
    for (const auto& c : incorporated) samples.push_back(make_sample(c, cfg.modalities));
    const std::size_t n_old = incorporated.size();

    TrainOptions opts;
    opts.keep_best = false;
    const MixingPolicy policy = cfg.policy;
    opts.sampler = [=](std::mt19937_64& rng) -> std::size_t {
      MixSource src = policy.draw(it, rng);
      if (src == MixSource::old && n_old == 0) src = MixSource::fresh;
      switch (src) {
        case MixSource::seed: return std::uniform_int_distribution<std::size_t>(0, n_seed - 1)(rng);
        case MixSource::fresh: return n_seed + std::uniform_int_distribution<std::size_t>(0, n_new - 1)(rng);
        case MixSource::old: return n_seed + n_new + std::uniform_int_distribution<std::size_t>(0, n_old - 1)(rng);
      }
      return 0;
    };
    res.model = train(res.model, samples, {}, cfg.finetune, cfg.augmentation, cfg.seed + std::uint64_t(it) * 7919,
                      opts);

    const TestScore seed_score = evaluate(res.model, in.seed_test, cfg.modalities);
    m.seed_test_dice = seed_score.mean;
    m.seed_test_whole = seed_score.whole;
    if (!in.shifted_test.empty()) {
      const TestScore sh = evaluate(res.model, in.shifted_test, cfg.modalities);
      m.shifted_dice = sh.mean;
      m.shifted_whole = sh.whole;
    }

    for (const auto& c : labelled) {
      res.state.incorporated.push_back(c.meta.id);
      res.state.remaining.erase(std::find(res.state.remaining.begin(), res.state.remaining.end(), c.meta.id));
      incorporated.push_back(c);
    }
    res.state.iteration = it;
    res.state.history.push_back(m);
    if (persist) {
      for (const auto& c : labelled) write_labels((fs::path(cfg.state_dir) / "pseudo" / c.meta.id).string(), *c.labels);
      res.state.checkpoint = (fs::path(cfg.state_dir) / ("model_iter" + std::to_string(it) + ".ckpt")).string();
      save_model(res.model, res.state.checkpoint);
      std::string lines;
      for (const auto& h : res.state.history) lines += metrics_json(h).dump() + "\n";
      write_atomic((fs::path(cfg.state_dir) / "metrics.jsonl").string(), lines);
      save_state(res.state, state_path);
    }
  }
  return res;
}

}  // namespace deepthal
