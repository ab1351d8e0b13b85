#include "xfrn/stats.hpp"

#include "xfrn/error.hpp"

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace xfrn {

double correlation_ratio(const LabeledActivations& data) {
  const std::size_t n = data.values.size();
  if (n != data.labels.size()) throw DataError("correlation ratio: values and labels differ in length");
  std::map<int, std::pair<double, int>> groups;  // label -> (sum, count)
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& g = groups[data.labels[i]];
    g.first += data.values[i];
    g.second += 1;
    total += data.values[i];
  }
  if (groups.size() < 2) throw DataError("correlation ratio needs at least two distinct labels");
  const double mean = total / static_cast<double>(n);
  double sb = 0;
  for (const auto& [label, g] : groups) {
    const double gm = g.first / g.second;
    sb += g.second * (gm - mean) * (gm - mean);
  }
  double sw = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = groups[data.labels[i]];
    const double dv = data.values[i] - g.first / g.second;
    sw += dv * dv;
  }
  const double st = sb + sw;
  if (st == 0.0) return 0.0;
  return std::clamp(sb / st, 0.0, 1.0);
}

double jaccard(const std::set<NeuronId>& a, const std::set<NeuronId>& b) {
  if (a.empty() && b.empty()) throw DataError("Jaccard index of two empty sets is undefined");
  std::size_t inter = 0;
  for (const auto& x : a) inter += b.count(x);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

SimilarityCurve overlap_by_layer(const std::set<NeuronId>& a, const std::set<NeuronId>& b, int num_layers) {
  SimilarityCurve c;
  c.metric = CurveMetric::neuron_overlap;
  std::vector<std::set<NeuronId>> la(static_cast<std::size_t>(num_layers)), lb(static_cast<std::size_t>(num_layers));
  for (const auto& x : a)
    if (x.layer >= 1 && x.layer <= num_layers) la[static_cast<std::size_t>(x.layer - 1)].insert(x);
  for (const auto& x : b)
    if (x.layer >= 1 && x.layer <= num_layers) lb[static_cast<std::size_t>(x.layer - 1)].insert(x);
  for (int l = 0; l < num_layers; ++l) {
    const auto& sa = la[static_cast<std::size_t>(l)];
    const auto& sb = lb[static_cast<std::size_t>(l)];
    c.values.push_back(sa.empty() && sb.empty() ? kUndefined : jaccard(sa, sb));
  }
  return c;
}

HypothesisResult anova_oneway(const std::vector<std::vector<double>>& groups) {
  const std::size_t g = groups.size();
  if (g < 2) throw DataError("ANOVA needs at least two groups");
  HypothesisResult r;
  std::size_t n = 0;
  double total = 0;
  for (const auto& grp : groups) {
    if (grp.size() < 2) throw DataError("ANOVA needs at least two values per group");
    n += grp.size();
    total += std::accumulate(grp.begin(), grp.end(), 0.0);
    r.n_per_group.push_back(static_cast<int>(grp.size()));
  }
  const double mean = total / static_cast<double>(n);
  double sb = 0, sw = 0;
  for (const auto& grp : groups) {
    const double gm = std::accumulate(grp.begin(), grp.end(), 0.0) / static_cast<double>(grp.size());
    sb += static_cast<double>(grp.size()) * (gm - mean) * (gm - mean);
    for (double v : grp) sw += (v - gm) * (v - gm);
  }
  const double df_b = static_cast<double>(g - 1);
  const double df_w = static_cast<double>(n - g);
  if (sw == 0.0) {
    if (sb == 0.0) {
      r.statistic = 0.0;
      r.p_value = 1.0;
    } else {
      r.statistic = std::numeric_limits<double>::infinity();
      r.p_value = 0.0;
      r.degenerate = true;
    }
    return r;
  }
  r.statistic = (sb / df_b) / (sw / df_w);
  const boost::math::fisher_f dist(df_b, df_w);
  r.p_value = std::clamp(boost::math::cdf(boost::math::complement(dist, r.statistic)), 0.0, 1.0);
  return r;
}

HypothesisResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw DataError("Mann-Whitney U needs two non-empty samples");
  const std::size_t na = a.size(), nb = b.size(), n = na + nb;
  std::vector<std::pair<double, int>> all;
  all.reserve(n);
  for (double v : a) all.emplace_back(v, 0);
  for (double v : b) all.emplace_back(v, 1);
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first < y.first; });

  // Doubled midranks keep ties integral.
  std::vector<long long> rank2(n);
  std::vector<std::size_t> tie_sizes;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    const long long r2 = static_cast<long long>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) rank2[t] = r2;
    tie_sizes.push_back(j - i);
    i = j;
  }
  long long ra2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (all[i].second == 0) ra2 += rank2[i];
  const double u = static_cast<double>(ra2) / 2.0 - static_cast<double>(na * (na + 1)) / 2.0;

  HypothesisResult r;
  r.statistic = u;
  r.n_per_group = {static_cast<int>(na), static_cast<int>(nb)};
  const double mu = static_cast<double>(na * nb) / 2.0;

  if (na * nb <= 400) {
    // Exact null: distribution of the doubled rank sum of the smaller group
    // over all ways to draw it from the pooled doubled midranks.
    const int small_group = na <= nb ? 0 : 1;
    const std::size_t ns = std::min(na, nb);
    long long observed = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (all[i].second == small_group) observed += rank2[i];
    const long long max_sum = std::accumulate(rank2.begin(), rank2.end(), 0LL);
    std::vector<std::vector<double>> ways(ns + 1, std::vector<double>(static_cast<std::size_t>(max_sum + 1), 0.0));
    ways[0][0] = 1.0;
    long long prefix = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const long long w = rank2[i];
      prefix += w;
      for (std::size_t c = std::min(i + 1, ns); c >= 1; --c) {
        auto& dst = ways[c];
        const auto& src = ways[c - 1];
        for (long long s = prefix; s >= w; --s) dst[static_cast<std::size_t>(s)] += src[static_cast<std::size_t>(s - w)];
      }
    }
    const auto& dist = ways[ns];
    const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
    const double mean2 = static_cast<double>(ns) * static_cast<double>(n + 1);
    const double dev = std::abs(static_cast<double>(observed) - mean2);
    double tail = 0;
    for (long long s = 0; s <= max_sum; ++s) {
      if (std::abs(static_cast<double>(s) - mean2) >= dev - 1e-9) tail += dist[static_cast<std::size_t>(s)];
    }
    r.p_value = std::clamp(tail / total, 0.0, 1.0);
    r.exact = true;
    return r;
  }

  double tie_term = 0;
  for (std::size_t t : tie_sizes) tie_term += std::pow(static_cast<double>(t), 3) - static_cast<double>(t);
  const double nd = static_cast<double>(n);
  const double var = static_cast<double>(na * nb) / 12.0 * ((nd + 1.0) - tie_term / (nd * (nd - 1.0)));
  if (var <= 0.0) {
    r.p_value = 1.0;
    return r;
  }
  const double z = std::max(0.0, std::abs(u - mu) - 0.5) / std::sqrt(var);
  const boost::math::normal normal;
  r.p_value = std::clamp(2.0 * boost::math::cdf(boost::math::complement(normal, z)), 0.0, 1.0);
  return r;
}

std::map<double, double> significant_fraction(const std::vector<EtaP>& scores, const std::vector<double>& thresholds,
                                              double alpha) {
  std::map<double, double> out;
  for (double t : thresholds) {
    if (scores.empty()) {
      out[t] = kUndefined;
      continue;
    }
    std::size_t hit = 0;
    for (const auto& s : scores)
      if (s.eta2 > t && s.p < alpha) ++hit;
    out[t] = static_cast<double>(hit) / static_cast<double>(scores.size());
  }
  return out;
}

}  // namespace xfrn
