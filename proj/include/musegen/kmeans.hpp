#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>

#include "musegen/features.hpp"
#include "musegen/tokens.hpp"

namespace musegen {

// Lloyd iterations with k-means++ seeding. Empty clusters are re-seeded to
// the point farthest from its assigned centroid. Ties break to the lowest
// index everywhere, so fits are deterministic given the seed.
struct KmeansResult {
  Eigen::MatrixXd centroids;  // K x D
  double distortion = 0.0;    // mean squared distance to assigned centroid
  int iterations = 0;
};

KmeansResult kmeans_fit(const Eigen::MatrixXd& points, int k, uint64_t seed,
                        int max_iters, double shift_tol = 1e-8);

// Nearest centroid per row; ties to the lowest index.
Eigen::VectorXi nearest_rows(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids);

struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;  // floored at 1e-12

  static Standardizer fit(const Eigen::MatrixXd& points);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& points) const;
};

// Semantic tokenizer: per-dimension standardization fit on the training set,
// then k-means in the standardized space.
struct KmeansTokenizer {
  Standardizer standardization;
  Eigen::MatrixXd centroids;  // K x D, standardized space
  int k = 0;
  int dim = 0;
  double train_distortion = 0.0;

  static KmeansTokenizer train(const Eigen::MatrixXd& vectors, int k, uint64_t seed,
                               int max_iters = 100);

  TokenSequence assign(const FeatureSequence& fs) const;
  Eigen::VectorXi assign_rows(const Eigen::MatrixXd& rows) const;
  Eigen::MatrixXd centroid_distance_matrix() const;

  void save(const std::filesystem::path& path) const;
  static KmeansTokenizer load(const std::filesystem::path& path);
};

}  // namespace musegen
