#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "musegen/audio.hpp"
#include "musegen/joint_embed.hpp"

namespace musegen {

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;  // symmetric PSD
};

// Sample mean and unbiased sample covariance. Needs >= 2 rows.
GaussianStats fit_gaussian(const Eigen::MatrixXd& embeddings);

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), square root via
// symmetric eigendecomposition of Sa^{1/2} Sb Sa^{1/2}. Eigenvalues below
// -1e-6 raise NumericError; small negatives clamp to zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// Per-tag logistic regression over pooled clip features (band-energy means
// plus mean absolute frame deltas, standardized).
struct TagClassifier {
  std::vector<std::string> tags;
  Eigen::MatrixXd weights;  // tags x feature_dim
  Eigen::VectorXd bias;
  Eigen::VectorXd feat_mean, feat_std;
  int feature_dim = 0;
  double feature_rate = 50.0;
  int band_dim = 16;

  Eigen::VectorXd predict(const Eigen::VectorXd& features) const;  // per-tag probs in (0,1)
  Eigen::VectorXd features_for(const AudioClip& clip) const;

  void save(const std::filesystem::path& path) const;
  static TagClassifier load(const std::filesystem::path& path);
};

Eigen::VectorXd classifier_features(const AudioClip& clip, double feature_rate, int band_dim);

struct ClassifierStats {
  std::vector<std::string> excluded_tags;  // single-class tags, dropped with warning
  std::vector<double> holdout_accuracy;    // per kept tag
  double min_accuracy = 0.0;
};

struct ClassifierTrainConfig {
  int iterations = 300;
  double lr = 0.5;
  double l2 = 1e-4;
  double holdout_fraction = 0.2;
  double feature_rate = 50.0;
  int band_dim = 16;
  uint64_t seed = 13;
};

TagClassifier train_classifier(const Eigen::MatrixXd& features,
                               const std::vector<std::vector<std::string>>& tag_sets,
                               const ClassifierTrainConfig& cfg,
                               ClassifierStats* stats = nullptr);

// Mean over pairs of KL(ref || gen) after per-clip renormalization of the
// tag probabilities into distributions (floor 1e-8 on the generated side).
double kld_from_probs(const Eigen::MatrixXd& reference_probs,
                      const Eigen::MatrixXd& generated_probs);
double kld_score(const TagClassifier& clf, const std::vector<AudioClip>& generated,
                 const std::vector<AudioClip>& reference);

// Average cosine similarity between caption embeddings and the audio
// embeddings of the clips generated from them.
double mcc_score(const JointEmbedModel& m, const std::vector<std::string>& captions,
                 const std::vector<AudioClip>& generated);

}  // namespace musegen
