#pragma once

// Slow, direct reference implementations shared by the unit and acceptance
// tests. Each one recomputes a quantity from its definition without reusing
// library code paths.

#include "xfrn/corpus.hpp"
#include "xfrn/detector.hpp"
#include "xfrn/model.hpp"
#include "xfrn/rng.hpp"
#include "xfrn/store.hpp"
#include "xfrn/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

namespace xfrn::oracle {

inline double cos(const Vector& a, const Vector& b) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// k nearest of row i by counting, for every candidate j, how many others
// beat it on (cosine distance, index).
inline std::set<int> knn(const Matrix& x, int i, int k) {
  const int b = static_cast<int>(x.rows());
  std::set<int> out;
  for (int j = 0; j < b; ++j) {
    if (j == i) continue;
    const double dj = 1.0 - cos(x.row(i).transpose(), x.row(j).transpose());
    int better = 0;
    for (int m = 0; m < b; ++m) {
      if (m == i || m == j) continue;
      const double dm = 1.0 - cos(x.row(i).transpose(), x.row(m).transpose());
      if (dm < dj || (dm == dj && m < j)) ++better;
    }
    if (better < k) out.insert(j);
  }
  return out;
}

inline double mutual_knn(const Matrix& phi, const Matrix& psi, int k) {
  double total = 0;
  for (int i = 0; i < phi.rows(); ++i) {
    const auto a = knn(phi, i, k);
    const auto b = knn(psi, i, k);
    int common = 0;
    for (int j : a) common += static_cast<int>(b.count(j));
    total += static_cast<double>(common) / k;
  }
  return total / static_cast<double>(phi.rows());
}

// CEVR from eigenvalues of the Gram matrix X^T X.
inline int cevr(const Matrix& x, double threshold) {
  const Eigen::MatrixXd gram = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  std::vector<double> ev(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(ev.rbegin(), ev.rend());
  const double total = std::accumulate(ev.begin(), ev.end(), 0.0, [](double s, double v) { return s + std::max(v, 0.0); });
  double cum = 0;
  for (std::size_t k = 0; k < ev.size(); ++k) {
    cum += std::max(ev[k], 0.0);
    if (cum / total >= threshold) return static_cast<int>(k) + 1;
  }
  return static_cast<int>(ev.size());
}

// S_B / (S_B + S_W) from group sums.
inline double eta2(const std::vector<double>& values, const std::vector<int>& labels) {
  std::map<int, std::pair<double, int>> groups;
  double total = 0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    groups[labels[k]].first += values[k];
    groups[labels[k]].second += 1;
    total += values[k];
  }
  const double mean = total / static_cast<double>(values.size());
  double sb = 0, sw = 0;
  for (const auto& [label, g] : groups) sb += g.second * std::pow(g.first / g.second - mean, 2);
  for (std::size_t k = 0; k < values.size(); ++k) {
    const auto& g = groups[labels[k]];
    sw += std::pow(values[k] - g.first / g.second, 2);
  }
  return sb + sw == 0 ? 0.0 : sb / (sb + sw);
}

// (S_B / (g - 1)) / (S_W / (n - g)).
inline double anova_f(const std::vector<std::vector<double>>& groups) {
  double sum = 0;
  std::size_t count = 0;
  for (const auto& g : groups) {
    sum += std::accumulate(g.begin(), g.end(), 0.0);
    count += g.size();
  }
  const double mean = sum / static_cast<double>(count);
  double sb = 0, sw = 0;
  for (const auto& g : groups) {
    const double m = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
    sb += static_cast<double>(g.size()) * (m - mean) * (m - mean);
    for (double v : g) sw += (v - m) * (v - m);
  }
  return (sb / static_cast<double>(groups.size() - 1)) / (sw / static_cast<double>(count - groups.size()));
}

// U of `a` as pair counts; ties count one half.
inline double pair_count_u(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0;
  for (double x : a)
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return u;
}

// Exact two-sided permutation p over every relabelling of the pooled sample.
inline double mann_whitney_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t total = pooled.size();
  const double mu = static_cast<double>(a.size() * b.size()) / 2.0;
  const double dev = std::abs(pair_count_u(a, b) - mu);
  std::vector<bool> pick(total, false);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(a.size()), true);
  long long hits = 0, count = 0;
  do {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < total; ++i) (pick[i] ? x : y).push_back(pooled[i]);
    if (std::abs(pair_count_u(x, y) - mu) >= dev - 1e-9) ++hits;
    ++count;
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return static_cast<double>(hits) / static_cast<double>(count);
}

// Multiset overlap F1 from raw token counts.
inline double f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<std::string, int> cp, cg;
  for (const auto& t : pred) ++cp[t];
  for (const auto& t : gold) ++cg[t];
  int common = 0;
  for (const auto& [t, c] : cp)
    if (cg.count(t)) common += std::min(c, cg[t]);
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(pred.size());
  const double r = static_cast<double>(common) / static_cast<double>(gold.size());
  return 2 * p * r / (p + r);
}

// Random corpus over the random decoder's vocabulary w0..; each language
// draws from its own slice of the word list so the clouds differ.
inline ParallelCorpus toy_corpus(const std::vector<std::string>& langs, int n, std::uint64_t seed) {
  Rng rng(seed);
  ParallelCorpus c;
  c.languages.insert(langs.begin(), langs.end());
  for (int p = 0; p < n; ++p) {
    ParallelPair pair{p, {}};
    const int len = 2 + static_cast<int>(rng.uniform_index(4));
    for (std::size_t li = 0; li < langs.size(); ++li) {
      std::string s;
      for (int t = 0; t < len; ++t) {
        const int w = static_cast<int>(li * 7 + rng.uniform_index(8));
        s += (s.empty() ? "" : " ") + std::string("w") + std::to_string(w);
      }
      pair.sentences[langs[li]] = s;
    }
    c.pairs.push_back(std::move(pair));
  }
  return c;
}

// Rebuilds every transfer score from individual train records: centroid,
// then per sample cos(p + a v, C) - cos(p, C), then the global ordering.
inline std::vector<ScoredNeuron> transfer_ranking(const CaptureRun& run, const ValueVectorTable& values,
                                                  const std::string& lang, TransferType type) {
  const int L = run.manifest().num_layers;
  const int B = type_boundary(L);
  const int first = type == TransferType::type1 ? 1 : B + 1;
  const int last = type == TransferType::type1 ? B : L;
  std::map<int, std::string> lang_ids, en_ids;  // pair_index -> sample id
  for (const auto& [id, info] : run.samples()) {
    if (info.split != "train") continue;
    if (info.language == lang) lang_ids[info.pair_index] = id;
    if (info.language == "en") en_ids[info.pair_index] = id;
  }
  std::vector<ScoredNeuron> out;
  for (int l = first; l <= last; ++l) {
    Vector C = Vector::Zero(run.manifest().hidden_dim);
    int count = 0;
    for (const auto& [idx, id] : lang_ids) {
      const Vector h = run.read_record(id, l).hidden_state.cast<double>();
      if (type == TransferType::type1) {
        C += 0.5 * (run.read_record(en_ids.at(idx), l).hidden_state.cast<double>() + h);
      } else {
        C += h;
      }
      ++count;
    }
    C /= count;
    const auto& V = values.layers[static_cast<std::size_t>(l - 1)];
    for (int i = 0; i < values.mlp_dim(); ++i) {
      const Vector v = V.row(i).cast<double>().transpose();
      double sum = 0;
      int used = 0;
      for (const auto& [idx, id] : lang_ids) {
        const auto rec = run.read_record(id, l);
        const Vector p = rec.pre_mlp.cast<double>();
        const double a = rec.mlp_activation[i];
        sum += cos(p + a * v, C) - cos(p, C);
        ++used;
      }
      out.push_back({NeuronId{l, i}, sum / used});
    }
  }
  std::sort(out.begin(), out.end(), [](const ScoredNeuron& a, const ScoredNeuron& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return out;
}

}  // namespace xfrn::oracle
