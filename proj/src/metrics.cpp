#include "musegen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "musegen/artifact_io.hpp"
#include "musegen/errors.hpp"
#include "musegen/features.hpp"
#include "musegen/rng.hpp"

namespace musegen {

GaussianStats fit_gaussian(const Eigen::MatrixXd& embeddings) {
  require(embeddings.rows() >= 2, "fit_gaussian: need at least 2 embeddings");
  GaussianStats g;
  g.mean = embeddings.colwise().mean();
  Eigen::MatrixXd centered = embeddings.rowwise() - g.mean.transpose();
  g.covariance = centered.transpose() * centered / static_cast<double>(embeddings.rows() - 1);
  return g;
}

namespace {

// Symmetric PSD square root; eigenvalues below -tol are a numerical error.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double tol, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  for (long i = 0; i < ev.size(); ++i) {
    if (ev(i) < -tol)
      throw NumericError(std::string(what) + ": matrix not PSD (eigenvalue " +
                         std::to_string(ev(i)) + ")");
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  require(a.mean.size() == b.mean.size(), "frechet_distance: dimension mismatch");
  require(a.covariance.rows() == a.mean.size() && b.covariance.rows() == b.mean.size(),
          "frechet_distance: covariance shape mismatch");
  const double tol = 1e-6;
  require((a.covariance - a.covariance.transpose()).cwiseAbs().maxCoeff() < 1e-9 &&
              (b.covariance - b.covariance.transpose()).cwiseAbs().maxCoeff() < 1e-9,
          "frechet_distance: covariance not symmetric");

  Eigen::MatrixXd a_half = psd_sqrt(a.covariance, tol, "frechet_distance");
  Eigen::MatrixXd inner = a_half * b.covariance * a_half;
  Eigen::MatrixXd cross = psd_sqrt(inner, tol, "frechet_distance");
  double d = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() -
             2.0 * cross.trace();
  return std::max(d, 0.0);
}

Eigen::VectorXd classifier_features(const AudioClip& clip, double feature_rate, int band_dim) {
  FeatureSequence fs = frame_features(clip, feature_rate, band_dim);
  Eigen::VectorXd mean = fs.frames.colwise().mean();
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(band_dim);
  if (fs.num_frames() > 1) {
    Eigen::MatrixXd d = fs.frames.bottomRows(fs.num_frames() - 1) -
                        fs.frames.topRows(fs.num_frames() - 1);
    delta = d.cwiseAbs().colwise().mean();
  }
  Eigen::VectorXd out(2 * band_dim);
  out << mean, delta;
  return out;
}

Eigen::VectorXd TagClassifier::features_for(const AudioClip& clip) const {
  return classifier_features(clip, feature_rate, band_dim);
}

Eigen::VectorXd TagClassifier::predict(const Eigen::VectorXd& features) const {
  require(features.size() == feature_dim, "classifier: feature dimension mismatch");
  Eigen::VectorXd x = (features - feat_mean).cwiseQuotient(feat_std);
  Eigen::VectorXd z = weights * x + bias;
  Eigen::VectorXd p(z.size());
  for (long i = 0; i < z.size(); ++i) {
    double v = 1.0 / (1.0 + std::exp(-z(i)));
    p(i) = std::clamp(v, 1e-12, 1.0 - 1e-12);
  }
  return p;
}

TagClassifier train_classifier(const Eigen::MatrixXd& features,
                               const std::vector<std::vector<std::string>>& tag_sets,
                               const ClassifierTrainConfig& cfg, ClassifierStats* stats) {
  const long n = features.rows();
  require(n >= 4, "train_classifier: need at least 4 examples");
  require(static_cast<long>(tag_sets.size()) == n, "train_classifier: features/tags mismatch");

  std::set<std::string> all_tags;
  for (const auto& ts : tag_sets) all_tags.insert(ts.begin(), ts.end());

  // Seeded split indices; holdout drawn uniformly.
  std::vector<long> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(cfg.seed);
  rng.shuffle(idx);
  const long n_hold = std::max<long>(1, static_cast<long>(cfg.holdout_fraction * n));
  const long n_train = n - n_hold;
  require(n_train >= 2, "train_classifier: not enough training examples");

  TagClassifier clf;
  clf.feature_dim = static_cast<int>(features.cols());
  clf.feature_rate = cfg.feature_rate;
  clf.band_dim = cfg.band_dim;

  Eigen::MatrixXd train_x(n_train, features.cols());
  for (long i = 0; i < n_train; ++i) train_x.row(i) = features.row(idx[static_cast<size_t>(i)]);
  clf.feat_mean = train_x.colwise().mean();
  Eigen::MatrixXd centered = train_x.rowwise() - clf.feat_mean.transpose();
  clf.feat_std = centered.array().square().colwise().mean().sqrt().cwiseMax(1e-9);
  Eigen::MatrixXd xs = centered.array().rowwise() / clf.feat_std.transpose().array();

  ClassifierStats local;
  ClassifierStats& st = stats ? *stats : local;

  for (const auto& tag : all_tags) {
    Eigen::VectorXd y(n_train);
    double pos = 0.0;
    for (long i = 0; i < n_train; ++i) {
      const auto& ts = tag_sets[static_cast<size_t>(idx[static_cast<size_t>(i)])];
      y(i) = std::count(ts.begin(), ts.end(), tag) > 0 ? 1.0 : 0.0;
      pos += y(i);
    }
    if (pos == 0.0 || pos == static_cast<double>(n_train)) {
      st.excluded_tags.push_back(tag);
      continue;
    }
    Eigen::VectorXd w = Eigen::VectorXd::Zero(features.cols());
    double b = 0.0;
    for (int it = 0; it < cfg.iterations; ++it) {
      Eigen::VectorXd z = xs * w;
      z.array() += b;
      Eigen::VectorXd p = (1.0 / (1.0 + (-z.array()).exp())).matrix();
      Eigen::VectorXd err = p - y;
      Eigen::VectorXd gw = xs.transpose() * err / static_cast<double>(n_train) + cfg.l2 * w;
      double gb = err.mean();
      w -= cfg.lr * gw;
      b -= cfg.lr * gb;
      if (!w.allFinite()) throw NumericError("train_classifier: diverged on tag " + tag);
    }
    clf.tags.push_back(tag);
    clf.weights.conservativeResize(static_cast<long>(clf.tags.size()), features.cols());
    clf.weights.row(static_cast<long>(clf.tags.size()) - 1) = w.transpose();
    clf.bias.conservativeResize(static_cast<long>(clf.tags.size()));
    clf.bias(static_cast<long>(clf.tags.size()) - 1) = b;
  }
  require(!clf.tags.empty(), "train_classifier: every tag was single-class");

  // Held-out accuracy per kept tag.
  st.holdout_accuracy.assign(clf.tags.size(), 0.0);
  for (long i = n_train; i < n; ++i) {
    Eigen::VectorXd p = clf.predict(features.row(idx[static_cast<size_t>(i)]).transpose());
    const auto& ts = tag_sets[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    for (size_t t = 0; t < clf.tags.size(); ++t) {
      const bool truth = std::count(ts.begin(), ts.end(), clf.tags[t]) > 0;
      const bool pred = p(static_cast<long>(t)) > 0.5;
      if (truth == pred) st.holdout_accuracy[t] += 1.0;
    }
  }
  for (double& a : st.holdout_accuracy) a /= static_cast<double>(n_hold);
  st.min_accuracy = *std::min_element(st.holdout_accuracy.begin(), st.holdout_accuracy.end());
  return clf;
}

double kld_from_probs(const Eigen::MatrixXd& reference_probs,
                      const Eigen::MatrixXd& generated_probs) {
  require(reference_probs.rows() == generated_probs.rows() &&
              reference_probs.cols() == generated_probs.cols(),
          "kld: paired lists must have equal shapes");
  require(reference_probs.rows() >= 1, "kld: empty lists");
  double total = 0.0;
  for (long i = 0; i < reference_probs.rows(); ++i) {
    Eigen::VectorXd r = reference_probs.row(i).transpose();
    Eigen::VectorXd g = generated_probs.row(i).transpose();
    require(r.minCoeff() >= 0.0 && g.minCoeff() >= 0.0, "kld: negative probability");
    const double rs = r.sum(), gs = g.sum();
    require(rs > 0.0 && gs > 0.0, "kld: zero probability mass");
    r /= rs;
    g /= gs;
    double kl = 0.0;
    for (long k = 0; k < r.size(); ++k) {
      if (r(k) <= 0.0) continue;
      kl += r(k) * std::log(r(k) / std::max(g(k), 1e-8));
    }
    total += kl;
  }
  return total / static_cast<double>(reference_probs.rows());
}

double kld_score(const TagClassifier& clf, const std::vector<AudioClip>& generated,
                 const std::vector<AudioClip>& reference) {
  require(!generated.empty(), "kld_score: empty clip lists");
  require(generated.size() == reference.size(), "kld_score: length mismatch");
  const long t = static_cast<long>(clf.tags.size());
  Eigen::MatrixXd gp(static_cast<long>(generated.size()), t);
  Eigen::MatrixXd rp(static_cast<long>(generated.size()), t);
  for (size_t i = 0; i < generated.size(); ++i) {
    gp.row(static_cast<long>(i)) = clf.predict(clf.features_for(generated[i])).transpose();
    rp.row(static_cast<long>(i)) = clf.predict(clf.features_for(reference[i])).transpose();
  }
  return kld_from_probs(rp, gp);
}

double mcc_score(const JointEmbedModel& m, const std::vector<std::string>& captions,
                 const std::vector<AudioClip>& generated) {
  require(!captions.empty(), "mcc_score: empty list");
  require(captions.size() == generated.size(), "mcc_score: length mismatch");
  double total = 0.0;
  for (size_t i = 0; i < captions.size(); ++i)
    total += m.embed_text(captions[i]).dot(m.embed_audio(generated[i]));
  return total / static_cast<double>(captions.size());
}

void TagClassifier::save(const std::filesystem::path& path) const {
  ArtifactWriter w("TAGCLF", 1);
  std::string joined;
  for (const auto& t : tags) {
    joined += t;
    joined += '\n';
  }
  w.add_string("tags", joined);
  w.add_f64("weights", weights);
  w.add_f64("bias", bias);
  w.add_f64("feat_mean", feat_mean);
  w.add_f64("feat_std", feat_std);
  w.add_scalar("feature_dim", feature_dim);
  w.add_scalar("feature_rate", feature_rate);
  w.add_scalar("band_dim", band_dim);
  w.save(path);
}

TagClassifier TagClassifier::load(const std::filesystem::path& path) {
  ArtifactReader r(path, "TAGCLF", 1);
  TagClassifier clf;
  std::istringstream ts(r.str("tags"));
  std::string tag;
  while (std::getline(ts, tag))
    if (!tag.empty()) clf.tags.push_back(tag);
  clf.weights = r.f64("weights");
  clf.bias = r.f64_vector("bias");
  clf.feat_mean = r.f64_vector("feat_mean");
  clf.feat_std = r.f64_vector("feat_std");
  clf.feature_dim = static_cast<int>(r.scalar("feature_dim"));
  clf.feature_rate = r.scalar("feature_rate");
  clf.band_dim = static_cast<int>(r.scalar("band_dim"));
  return clf;
}

}  // namespace musegen
