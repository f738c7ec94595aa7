#include "deepthal/losses_metrics.hpp"

#include <algorithm>
#include <numeric>

namespace deepthal {

LabelWeights label_weights_from_training(const std::vector<const LabelMap*>& cases) {
  if (cases.empty()) throw DataError("label weights: empty training set");
  const LabelSchema& schema = cases.front()->schema;
  std::vector<double> sum(std::size_t(schema.max_id() + 1), 0.0);
  for (const LabelMap* m : cases) {
    if (!(m->schema == schema)) throw DataError("label weights: training cases use different schemas");
    const auto h = m->histogram();
    for (std::size_t l = 1; l < sum.size(); ++l) sum[l] += double(h[l]);
  }
  LabelWeights w;
  w.w.assign(sum.size(), 0.0);
  for (int id : schema.ids()) {
    const double mean = sum[std::size_t(id)] / double(cases.size());
    if (mean <= 0) throw DataError("label weights: label '" + schema.name(id) + "' is absent from every training case");
    w.w[std::size_t(id)] = 1.0 / mean;
  }
  return w;
}

namespace {

void check_pair(const LabelMap& a, const LabelMap& b) {
  if (!(a.schema == b.schema)) throw DataError("dice: label schemas differ");
  if (a.dims != b.dims) throw DataError("dice: label maps have different dims");
}

double dice_from_counts(std::int64_t inter, std::int64_t na, std::int64_t nb) {
  if (na + nb == 0) return 1.0;
  return 2.0 * double(inter) / double(na + nb);
}

}  // namespace

double dice(const LabelMap& a, const LabelMap& b, int label) {
  check_pair(a, b);
  std::int64_t inter = 0, na = 0, nb = 0;
  for (Eigen::Index i = 0; i < a.data.size(); ++i) {
    const bool in_a = a.data(i) == label, in_b = b.data(i) == label;
    na += in_a;
    nb += in_b;
    inter += in_a && in_b;
  }
  return dice_from_counts(inter, na, nb);
}

DiceReport dice_report(const LabelMap& a, const LabelMap& b) {
  check_pair(a, b);
  const int c = a.schema.max_id() + 1;
  std::vector<std::int64_t> inter(std::size_t(c), 0), na(std::size_t(c), 0), nb(std::size_t(c), 0);
  std::int64_t whole_inter = 0, whole_a = 0, whole_b = 0;
  for (Eigen::Index i = 0; i < a.data.size(); ++i) {
    const int la = a.data(i), lb = b.data(i);
    ++na[std::size_t(la)];
    ++nb[std::size_t(lb)];
    if (la == lb) ++inter[std::size_t(la)];
    whole_a += la != 0;
    whole_b += lb != 0;
    whole_inter += la != 0 && lb != 0;
  }
  DiceReport r;
  for (const auto& [id, name] : a.schema.entries) {
    r.ids.push_back(id);
    r.names.push_back(name);
    r.per_label.push_back(dice_from_counts(inter[std::size_t(id)], na[std::size_t(id)], nb[std::size_t(id)]));
  }
  r.mean = r.per_label.empty() ? 0.0
                               : std::accumulate(r.per_label.begin(), r.per_label.end(), 0.0) / double(r.per_label.size());
  r.whole_thalamus = dice_from_counts(whole_inter, whole_a, whole_b);
  return r;
}

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DataError("wilcoxon: samples have different lengths");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] != y[i]) d.push_back(x[i] - y[i]);
  if (d.empty()) throw DataError("wilcoxon: all paired differences are zero");
  if (d.size() < 5) throw DataError("wilcoxon: need at least 5 non-zero differences, got " + std::to_string(d.size()));
  const std::size_t n = d.size();

  // Mid-ranks of |d|, kept doubled so they stay integral.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::abs(d[a]) < std::abs(d[b]); });
  std::vector<int> rank2(n);
  double tie_term = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double t = double(j - i + 1);
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = int(i + j + 2);  // 2 * mean rank
    tie_term += t * t * t - t;
    i = j + 1;
  }
  int w_plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) w_plus2 += rank2[i];
  }
  const int w_min2 = std::min(w_plus2, total2 - w_plus2);

  WilcoxonResult r;
  r.n = int(n);
  r.statistic = w_min2 / 2.0;
  if (n <= 20) {
    // Null distribution of W+ (doubled): every sign pattern equally likely.
    std::vector<double> dist(std::size_t(total2 + 1), 0.0);
    dist[0] = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int rk = rank2[i];
      for (int s = total2; s >= rk; --s) dist[std::size_t(s)] += dist[std::size_t(s - rk)];
    }
    double tail = 0;
    for (int s = 0; s <= w_min2; ++s) tail += dist[std::size_t(s)];
    r.p_value = std::min(1.0, 2.0 * tail / std::ldexp(1.0, int(n)));
    r.exact = true;
  } else {
    const double nd = double(n);
    const double mean = nd * (nd + 1) / 4.0;
    const double var = nd * (nd + 1) * (2.0 * nd + 1) / 24.0 - tie_term / 48.0;
    const double z = (r.statistic - mean) / std::sqrt(var);
    r.p_value = std::min(1.0, 2.0 * normal_cdf(z));
  }
  return r;
}

}  // namespace deepthal
