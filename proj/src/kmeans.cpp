#include "musegen/kmeans.hpp"

#include <limits>

#include "musegen/artifact_io.hpp"
#include "musegen/errors.hpp"
#include "musegen/rng.hpp"

namespace musegen {

namespace {

// Squared distances of every point to every centroid via one GEMM.
Eigen::MatrixXd sq_dists(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids) {
  Eigen::VectorXd pn = points.rowwise().squaredNorm();
  Eigen::VectorXd cn = centroids.rowwise().squaredNorm();
  Eigen::MatrixXd d = -2.0 * (points * centroids.transpose());
  d.colwise() += pn;
  d.rowwise() += cn.transpose();
  return d.cwiseMax(0.0);
}

Eigen::MatrixXd kmeanspp_init(const Eigen::MatrixXd& points, int k, Rng& rng) {
  const long n = points.rows();
  Eigen::MatrixXd centroids(k, points.cols());
  centroids.row(0) = points.row(rng.randint(n));
  Eigen::VectorXd best = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = best.sum();
    long pick;
    if (total <= 0.0) {
      pick = rng.randint(n);
    } else {
      double target = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (long i = 0; i < n; ++i) {
        acc += best(i);
        if (acc >= target) {
          pick = i;
          break;
        }
      }
    }
    centroids.row(c) = points.row(pick);
    best = best.cwiseMin((points.rowwise() - centroids.row(c)).rowwise().squaredNorm());
  }
  return centroids;
}

}  // namespace

Eigen::VectorXi nearest_rows(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids) {
  Eigen::MatrixXd d = sq_dists(points, centroids);
  Eigen::VectorXi assign(points.rows());
  for (long i = 0; i < points.rows(); ++i) {
    // Lowest index wins ties.
    int best = 0;
    double bestd = d(i, 0);
    for (int c = 1; c < centroids.rows(); ++c) {
      if (d(i, c) < bestd) {
        bestd = d(i, c);
        best = c;
      }
    }
    assign(i) = best;
  }
  return assign;
}

KmeansResult kmeans_fit(const Eigen::MatrixXd& points, int k, uint64_t seed,
                        int max_iters, double shift_tol) {
  const long n = points.rows();
  require(k >= 1, "kmeans: k must be >= 1");
  require(n >= k, "kmeans: fewer points than clusters");
  require(points.allFinite(), "kmeans: non-finite input");

  Rng rng(seed);
  KmeansResult res;
  res.centroids = kmeanspp_init(points, k, rng);

  Eigen::VectorXi assign;
  for (int it = 0; it < max_iters; ++it) {
    assign = nearest_rows(points, res.centroids);
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(k, points.cols());
    Eigen::VectorXd count = Eigen::VectorXd::Zero(k);
    for (long i = 0; i < n; ++i) {
      next.row(assign(i)) += points.row(i);
      count(assign(i)) += 1.0;
    }
    // Re-seed empty clusters to the farthest points, one per empty slot.
    Eigen::VectorXd dist_to_assigned(n);
    bool any_empty = false;
    for (int c = 0; c < k; ++c) any_empty |= count(c) == 0.0;
    if (any_empty) {
      for (long i = 0; i < n; ++i)
        dist_to_assigned(i) = (points.row(i) - res.centroids.row(assign(i))).squaredNorm();
      for (int c = 0; c < k; ++c) {
        if (count(c) > 0.0) continue;
        long far = 0;
        dist_to_assigned.maxCoeff(&far);
        next.row(c) = points.row(far);
        count(c) = 1.0;
        dist_to_assigned(far) = -1.0;  // don't pick the same point twice
      }
    }
    for (int c = 0; c < k; ++c)
      if (count(c) > 0.0) next.row(c) /= count(c);
    const double shift = (next - res.centroids).rowwise().norm().maxCoeff();
    res.centroids = next;
    res.iterations = it + 1;
    if (shift < shift_tol) break;
  }

  assign = nearest_rows(points, res.centroids);
  double distortion = 0.0;
  for (long i = 0; i < n; ++i)
    distortion += (points.row(i) - res.centroids.row(assign(i))).squaredNorm();
  res.distortion = distortion / static_cast<double>(n);
  return res;
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& points) {
  Standardizer s;
  s.mean = points.colwise().mean();
  Eigen::MatrixXd centered = points.rowwise() - s.mean.transpose();
  s.stddev = (centered.array().square().colwise().mean()).sqrt().cwiseMax(1e-12);
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& points) const {
  return (points.rowwise() - mean.transpose()).array().rowwise() /
         stddev.transpose().array();
}

KmeansTokenizer KmeansTokenizer::train(const Eigen::MatrixXd& vectors, int k, uint64_t seed,
                                       int max_iters) {
  require(k >= 2, "kmeans tokenizer: k must be >= 2");
  require(vectors.rows() >= k, "kmeans tokenizer: fewer vectors than clusters");
  KmeansTokenizer tok;
  tok.k = k;
  tok.dim = static_cast<int>(vectors.cols());
  tok.standardization = Standardizer::fit(vectors);
  KmeansResult res = kmeans_fit(tok.standardization.apply(vectors), k, seed, max_iters);
  tok.centroids = res.centroids;
  tok.train_distortion = res.distortion;
  return tok;
}

Eigen::VectorXi KmeansTokenizer::assign_rows(const Eigen::MatrixXd& rows) const {
  require(rows.cols() == dim, "kmeans tokenizer: dimension mismatch");
  return nearest_rows(standardization.apply(rows), centroids);
}

TokenSequence KmeansTokenizer::assign(const FeatureSequence& fs) const {
  Eigen::VectorXi ids = assign_rows(fs.frames);
  TokenSequence ts;
  ts.kind = TokenKind::semantic;
  ts.vocab = k;
  ts.frame_rate = fs.frame_rate;
  ts.ids = ids;
  return ts;
}

Eigen::MatrixXd KmeansTokenizer::centroid_distance_matrix() const {
  Eigen::MatrixXd d2 = Eigen::MatrixXd::Zero(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = i + 1; j < k; ++j) {
      const double d = (centroids.row(i) - centroids.row(j)).norm();
      d2(i, j) = d;
      d2(j, i) = d;
    }
  return d2;
}

void KmeansTokenizer::save(const std::filesystem::path& path) const {
  ArtifactWriter w("KMTOKZ", 1);
  w.add_f64("centroids", centroids);
  w.add_f64("mean", standardization.mean);
  w.add_f64("stddev", standardization.stddev);
  w.add_scalar("k", k);
  w.add_scalar("dim", dim);
  w.add_scalar("train_distortion", train_distortion);
  w.save(path);
}

KmeansTokenizer KmeansTokenizer::load(const std::filesystem::path& path) {
  ArtifactReader r(path, "KMTOKZ", 1);
  KmeansTokenizer tok;
  tok.centroids = r.f64("centroids");
  tok.standardization.mean = r.f64_vector("mean");
  tok.standardization.stddev = r.f64_vector("stddev");
  tok.k = static_cast<int>(r.scalar("k"));
  tok.dim = static_cast<int>(r.scalar("dim"));
  tok.train_distortion = r.scalar("train_distortion");
  return tok;
}

}  // namespace musegen
