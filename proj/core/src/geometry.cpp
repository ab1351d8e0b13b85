#include "xfrn/geometry.hpp"

#include "json_util.hpp"
#include "xfrn/error.hpp"
#include "xfrn/rng.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace xfrn {

namespace {

std::string format_value(double v) { return format_number(v); }

std::string format_metadata(const std::map<std::string, std::string>& md) {
  std::string out;
  for (const auto& [k, v] : md) {
    if (!out.empty()) out += ';';
    out += k + "=" + v;
  }
  return out;
}

void write_curve_rows(std::ostream& out, const SimilarityCurve& c) {
  const std::string md = format_metadata(c.metadata);
  for (std::size_t i = 0; i < c.values.size(); ++i) {
    out << (c.first_layer + static_cast<int>(i)) << ',' << format_value(c.values[i]) << ',' << to_string(c.metric)
        << ",\"" << md << "\"\n";
  }
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Distance used for neighbour ranking: smaller is nearer.
double neighbour_distance(const Matrix& x, const Vector& norms, int i, int j, Distance dist) {
  if (dist == Distance::euclidean) return (x.row(i) - x.row(j)).norm();
  if (norms[i] == 0.0 || norms[j] == 0.0) return 1.0;
  return 1.0 - x.row(i).dot(x.row(j)) / (norms[i] * norms[j]);
}

}  // namespace

std::string_view to_string(CurveMetric m) {
  switch (m) {
    case CurveMetric::hs_parallel: return "hs_parallel";
    case CurveMetric::hs_nonparallel: return "hs_nonparallel";
    case CurveMetric::act_parallel: return "act_parallel";
    case CurveMetric::act_nonparallel: return "act_nonparallel";
    case CurveMetric::centroid_cos: return "centroid_cos";
    case CurveMetric::mutual_knn: return "mutual_knn";
    case CurveMetric::cevr_dim: return "cevr_dim";
    case CurveMetric::trajectory_cos: return "trajectory_cos";
    case CurveMetric::separability_acc: return "separability_acc";
    case CurveMetric::neuron_overlap: return "neuron_overlap";
  }
  return "?";
}

CurveMetric parse_curve_metric(std::string_view name) {
  for (auto m : {CurveMetric::hs_parallel, CurveMetric::hs_nonparallel, CurveMetric::act_parallel,
                 CurveMetric::act_nonparallel, CurveMetric::centroid_cos, CurveMetric::mutual_knn,
                 CurveMetric::cevr_dim, CurveMetric::trajectory_cos, CurveMetric::separability_acc,
                 CurveMetric::neuron_overlap}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown metric '" + std::string(name) + "'");
}

std::string_view to_string(Distance d) { return d == Distance::cosine ? "cosine" : "euclidean"; }

Distance parse_distance(std::string_view name) {
  if (name == "cosine") return Distance::cosine;
  if (name == "euclidean") return Distance::euclidean;
  throw ConfigError("unknown distance '" + std::string(name) + "'");
}

double SimilarityCurve::at_layer(int layer) const {
  const int i = layer - first_layer;
  if (i < 0 || i >= static_cast<int>(values.size())) return kUndefined;
  return values[static_cast<std::size_t>(i)];
}

double SimilarityCurve::mean() const {
  double sum = 0;
  int n = 0;
  for (double v : values) {
    if (is_defined(v)) {
      sum += v;
      ++n;
    }
  }
  return n == 0 ? kUndefined : sum / n;
}

void SimilarityCurve::write_csv(const std::filesystem::path& path) const { write_curves_csv({*this}, path); }

void write_curves_csv(const std::vector<SimilarityCurve>& curves, const std::filesystem::path& path,
                      const std::map<std::string, std::string>& provenance) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  for (const auto& [k, v] : provenance) out << "# " << k << '=' << v << '\n';
  out << "layer,value,metric,metadata\n";
  for (const auto& c : curves) write_curve_rows(out, c);
}

std::string SimilarityCurve::to_json() const {
  json values_json = json::array();
  for (double v : values) values_json.push_back(number_or_null(v));
  json j = {{"metric", std::string(to_string(metric))},
            {"first_layer", first_layer},
            {"values", values_json},
            {"metadata", metadata}};
  return j.dump();
}

SimilarityCurve SimilarityCurve::from_json(std::string_view text) {
  const json j = json::parse(text);
  SimilarityCurve c;
  c.metric = parse_curve_metric(j.at("metric").get<std::string>());
  c.first_layer = j.at("first_layer").get<int>();
  for (const auto& v : j.at("values")) c.values.push_back(number_from(v));
  c.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  return c;
}

Matrix to_matrix(const RowMatrixF& m) { return m.cast<double>(); }

Vector centroid(const Matrix& hidden) {
  if (hidden.rows() == 0) throw DataError("centroid of an empty set");
  return hidden.colwise().mean().transpose();
}

Vector centroid_shared(const Matrix& en, const Matrix& l2) {
  if (en.rows() != l2.rows() || en.cols() != l2.cols()) {
    throw DataError("shared centroid needs aligned matrices of equal shape");
  }
  if (en.rows() == 0) throw DataError("shared centroid of an empty set");
  Vector sum = Vector::Zero(en.cols());
  for (Eigen::Index k = 0; k < en.rows(); ++k) sum += 0.5 * (en.row(k) + l2.row(k)).transpose();
  return sum / static_cast<double>(en.rows());
}

std::vector<double> singular_values(const Matrix& m) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  return {s.data(), s.data() + s.size()};
}

int cevr_dimensionality(const Matrix& hidden, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("CEVR threshold must lie in (0, 1]");
  if (hidden.rows() == 0) throw DataError("CEVR of an empty matrix");
  const auto s = singular_values(hidden);
  if (s.empty() || s.front() == 0.0) throw DataError("CEVR undefined: matrix has no nonzero singular value");
  const double cutoff = s.front() * 1e-12 * static_cast<double>(std::max(hidden.rows(), hidden.cols()));
  double total = 0;
  int r = 0;
  for (double v : s) {
    if (v <= cutoff) break;
    total += v * v;
    ++r;
  }
  double cum = 0;
  for (int k = 0; k < r; ++k) {
    cum += s[static_cast<std::size_t>(k)] * s[static_cast<std::size_t>(k)];
    if (cum / total >= threshold - 1e-12) return k + 1;
  }
  return r;
}

PairCosine mean_pair_cosine(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DataError("pair matrices differ in shape");
  PairCosine out;
  double sum = 0;
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    const double c = cosine(a.row(k).transpose(), b.row(k).transpose());
    if (!is_defined(c)) {
      ++out.skipped;
      continue;
    }
    sum += c;
    ++out.used;
  }
  if (out.used > 0) out.mean = sum / out.used;
  return out;
}

std::pair<SimilarityCurve, SimilarityCurve> similarity_gap_curve(const PairedLayers& parallel,
                                                                 const PairedLayers& nonparallel, GapKind kind) {
  const std::size_t L = parallel.first.size();
  if (L == 0 || parallel.second.size() != L || nonparallel.first.size() != L || nonparallel.second.size() != L) {
    throw DataError("similarity gap needs the same non-empty layer range for both conditions");
  }
  SimilarityCurve par, non;
  par.metric = kind == GapKind::hidden_state ? CurveMetric::hs_parallel : CurveMetric::act_parallel;
  non.metric = kind == GapKind::hidden_state ? CurveMetric::hs_nonparallel : CurveMetric::act_nonparallel;
  int skipped_par = 0, skipped_non = 0;
  for (std::size_t l = 0; l < L; ++l) {
    if (parallel.first[l].rows() == 0 || nonparallel.first[l].rows() == 0) {
      throw DataError("similarity gap: empty pair list at layer " + std::to_string(l + 1));
    }
    const auto p = mean_pair_cosine(parallel.first[l], parallel.second[l]);
    const auto n = mean_pair_cosine(nonparallel.first[l], nonparallel.second[l]);
    par.values.push_back(p.mean);
    non.values.push_back(n.mean);
    skipped_par += p.skipped;
    skipped_non += n.skipped;
  }
  par.metadata["skipped_pairs"] = std::to_string(skipped_par);
  non.metadata["skipped_pairs"] = std::to_string(skipped_non);
  return {par, non};
}

std::vector<int> knn_indices(const Matrix& points, int i, int k, Distance dist) {
  const int b = static_cast<int>(points.rows());
  if (k < 1 || k > b - 1) throw ConfigError("k must lie in [1, " + std::to_string(b - 1) + "], got " + std::to_string(k));
  const Vector norms = points.rowwise().norm();
  std::vector<std::pair<double, int>> cand;
  cand.reserve(static_cast<std::size_t>(b - 1));
  for (int j = 0; j < b; ++j)
    if (j != i) cand.emplace_back(neighbour_distance(points, norms, i, j, dist), j);
  std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
  std::vector<int> out;
  for (int t = 0; t < k; ++t) out.push_back(cand[static_cast<std::size_t>(t)].second);
  return out;
}

double mutual_knn_alignment(const Matrix& phi, const Matrix& psi, int k, Distance dist) {
  if (phi.rows() != psi.rows()) throw DataError("mutual k-NN needs the same number of rows in both clouds");
  const int b = static_cast<int>(phi.rows());
  if (b < 2) throw DataError("mutual k-NN needs at least 2 rows");
  if (k < 1 || k > b - 1) throw ConfigError("k must lie in [1, " + std::to_string(b - 1) + "], got " + std::to_string(k));
  const Vector n_phi = phi.rowwise().norm();
  const Vector n_psi = psi.rowwise().norm();
  // Full distance matrices once, then per-row selection.
  std::vector<std::pair<double, int>> a(static_cast<std::size_t>(b - 1)), c(static_cast<std::size_t>(b - 1));
  std::vector<char> mark(static_cast<std::size_t>(b));
  double total = 0;
  for (int i = 0; i < b; ++i) {
    std::size_t t = 0;
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      a[t] = {neighbour_distance(phi, n_phi, i, j, dist), j};
      c[t] = {neighbour_distance(psi, n_psi, i, j, dist), j};
      ++t;
    }
    std::partial_sort(a.begin(), a.begin() + k, a.end());
    std::partial_sort(c.begin(), c.begin() + k, c.end());
    std::fill(mark.begin(), mark.end(), 0);
    for (int s = 0; s < k; ++s) mark[static_cast<std::size_t>(a[static_cast<std::size_t>(s)].second)] = 1;
    int hit = 0;
    for (int s = 0; s < k; ++s) hit += mark[static_cast<std::size_t>(c[static_cast<std::size_t>(s)].second)];
    total += static_cast<double>(hit) / k;
  }
  return total / b;
}

SimilarityCurve centroid_distance_curve(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  if (a.size() != b.size() || a.empty()) throw DataError("centroid curves need the same non-empty layer range");
  SimilarityCurve c;
  c.metric = CurveMetric::centroid_cos;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a[l].norm() == 0.0 || b[l].norm() == 0.0) {
      throw DataError("zero centroid at layer " + std::to_string(l + 1));
    }
    c.values.push_back(cosine(a[l], b[l]));
  }
  return c;
}

SimilarityCurve trajectory_linearity(const std::vector<Vector>& centroids, int m) {
  const int L = static_cast<int>(centroids.size());
  if (m < 2 || m > L) throw ConfigError("trajectory m must lie in [2, " + std::to_string(L) + "], got " + std::to_string(m));
  SimilarityCurve c;
  c.metric = CurveMetric::trajectory_cos;
  c.first_layer = 2;
  c.metadata["m"] = std::to_string(m);
  const Vector P = centroids[static_cast<std::size_t>(m - 1)] - centroids[0];
  for (int l = 2; l <= m; ++l) {
    const Vector step = centroids[static_cast<std::size_t>(l - 1)] - centroids[static_cast<std::size_t>(l - 2)];
    c.values.push_back(cosine(step, P));  // NaN on a zero step or zero P
  }
  return c;
}

Matrix concat_pairs(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DataError("pair features need equal row counts");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

namespace {

// Weights include a trailing intercept (unpenalized).
Vector fit_logistic(const Matrix& X, const Vector& y, const ProbeOptions& opt) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  Matrix Xb(n, p + 1);
  Xb << X, Vector::Ones(n);
  Vector w = Vector::Zero(p + 1);
  Vector penalty = Vector::Constant(p + 1, opt.l2);
  penalty[p] = 1e-10;

  auto gradient = [&](const Vector& wt) {
    const Vector z = Xb * wt;
    Vector r(n);
    for (Eigen::Index i = 0; i < n; ++i) r[i] = sigmoid(z[i]) - y[i];
    return Vector(Xb.transpose() * r / static_cast<double>(n) + penalty.cwiseProduct(wt));
  };

  if (p <= opt.newton_max_features) {
    for (int it = 0; it < opt.max_newton_iters; ++it) {
      const Vector z = Xb * w;
      Vector s(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double q = sigmoid(z[i]);
        s[i] = q * (1.0 - q);
      }
      const Vector g = gradient(w);
      Eigen::MatrixXd H = Xb.transpose() * s.asDiagonal() * Xb / static_cast<double>(n);
      H.diagonal() += penalty;
      const Vector step = H.ldlt().solve(g);
      w -= step;
      if (step.norm() < 1e-10 * (1.0 + w.norm())) break;
    }
    return w;
  }

  // Accelerated gradient descent with step 1/Lipschitz.
  Vector v = Vector::Ones(p + 1);
  double sigma2 = 0;
  for (int it = 0; it < 30; ++it) {
    const Vector u = Xb.transpose() * (Xb * v);
    sigma2 = u.norm() / v.norm();
    v = u / u.norm();
  }
  const double lip = sigma2 / (4.0 * static_cast<double>(n)) + opt.l2;
  Vector prev = w, cur = w;
  for (int it = 1; it <= opt.gd_iters; ++it) {
    const Vector look = cur + (static_cast<double>(it - 1) / (it + 2)) * (cur - prev);
    prev = cur;
    cur = look - gradient(look) / lip;
  }
  return cur;
}

}  // namespace

double separability_accuracy(const Matrix& positive, const Matrix& negative, const ProbeOptions& opt) {
  if (opt.folds < 2) throw ConfigError("separability probe needs at least 2 folds");
  if (positive.rows() == 0 || negative.rows() == 0) throw DataError("separability probe needs both classes");
  if (positive.rows() < opt.folds || negative.rows() < opt.folds) {
    throw DataError("separability probe: a class has fewer samples than folds (" + std::to_string(opt.folds) + ")");
  }
  if (positive.cols() != negative.cols()) throw DataError("separability probe: feature width mismatch");
  const Eigen::Index n = positive.rows() + negative.rows();
  Matrix X(n, positive.cols());
  X << positive, negative;
  Vector y(n);
  y.head(positive.rows()).setOnes();
  y.tail(negative.rows()).setZero();

  Rng rng(opt.seed);
  std::vector<int> fold(static_cast<std::size_t>(n));
  auto assign = [&](Eigen::Index begin, Eigen::Index count) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), begin);
    rng.shuffle(idx);
    for (std::size_t t = 0; t < idx.size(); ++t) fold[static_cast<std::size_t>(idx[t])] = static_cast<int>(t % opt.folds);
  };
  assign(0, positive.rows());
  assign(positive.rows(), negative.rows());

  double acc_sum = 0;
  for (int f = 0; f < opt.folds; ++f) {
    std::vector<Eigen::Index> train, test;
    for (Eigen::Index i = 0; i < n; ++i) (fold[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    Matrix Xtr = X(train, Eigen::all);
    const Vector ytr = y(train);
    const Vector mu = Xtr.colwise().mean().transpose();
    Vector sd = ((Xtr.rowwise() - mu.transpose()).array().square().colwise().mean()).sqrt().transpose();
    for (Eigen::Index c = 0; c < sd.size(); ++c)
      if (!(sd[c] > 1e-12)) sd[c] = 1.0;
    auto standardize = [&](const Matrix& M) {
      return Matrix((M.rowwise() - mu.transpose()).array().rowwise() / sd.transpose().array());
    };
    const Vector w = fit_logistic(standardize(Xtr), ytr, opt);
    const Matrix Xte = standardize(X(test, Eigen::all));
    const Vector z = Xte * w.head(w.size() - 1) + Vector::Constant(Xte.rows(), w[w.size() - 1]);
    int correct = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      const double pred = z[i] > 0 ? 1.0 : 0.0;
      if (pred == y[test[static_cast<std::size_t>(i)]]) ++correct;
    }
    acc_sum += static_cast<double>(correct) / static_cast<double>(test.size());
  }
  return acc_sum / opt.folds;
}

SimilarityCurve separability_probe(const std::vector<Matrix>& positive_by_layer,
                                   const std::vector<Matrix>& negative_by_layer, const ProbeOptions& opt) {
  if (positive_by_layer.size() != negative_by_layer.size() || positive_by_layer.empty()) {
    throw DataError("separability probe needs the same non-empty layer range for both classes");
  }
  SimilarityCurve c;
  c.metric = CurveMetric::separability_acc;
  c.metadata["folds"] = std::to_string(opt.folds);
  c.metadata["seed"] = std::to_string(opt.seed);
  for (std::size_t l = 0; l < positive_by_layer.size(); ++l) {
    ProbeOptions per_layer = opt;
    per_layer.seed = opt.seed + l;
    c.values.push_back(separability_accuracy(positive_by_layer[l], negative_by_layer[l], per_layer));
  }
  return c;
}

void PcaProjection::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "layer,label,pc1,pc2\n";
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    out << layer << ',' << labels[static_cast<std::size_t>(i)] << ',' << format_value(coords(i, 0)) << ','
        << format_value(coords(i, 1)) << '\n';
  }
}

PcaProjection pca_project(const std::vector<std::pair<std::string, Matrix>>& by_language, int layer) {
  Eigen::Index n = 0, d = -1;
  for (const auto& [lang, m] : by_language) {
    if (d >= 0 && m.cols() != d) throw DataError("PCA inputs differ in width");
    d = m.cols();
    n += m.rows();
  }
  if (n < 3) throw DataError("PCA needs at least 3 pooled rows, got " + std::to_string(n));
  Matrix X(n, d);
  PcaProjection out;
  out.layer = layer;
  Eigen::Index r = 0;
  for (const auto& [lang, m] : by_language) {
    X.middleRows(r, m.rows()) = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.labels.push_back(lang);
    r += m.rows();
  }
  const Vector mu = X.colwise().mean().transpose();
  const Matrix C = X.rowwise() - mu.transpose();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(C, Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  Eigen::MatrixXd V = svd.matrixV();
  out.components = Matrix::Zero(2, d);
  out.explained_variance = Vector::Zero(2);
  const double denom = static_cast<double>(n - 1);
  out.total_variance = s.squaredNorm() / denom;
  const double tol = (s.size() > 0 ? s[0] : 0.0) * 1e-10 * static_cast<double>(std::max(n, d));
  for (int c = 0; c < 2 && c < V.cols(); ++c) {
    Vector comp = V.col(c);
    Eigen::Index arg = 0;
    comp.cwiseAbs().maxCoeff(&arg);
    if (comp[arg] < 0) comp = -comp;
    out.components.row(c) = comp.transpose();
    out.explained_variance[c] = s[c] * s[c] / denom;
  }
  if (s.size() < 2 || s[1] <= tol) out.degenerate = true;
  if (V.cols() < 2) {
    // d == 1: no second direction exists.
    out.degenerate = true;
  }
  out.coords = C * out.components.transpose();
  return out;
}

}  // namespace xfrn
