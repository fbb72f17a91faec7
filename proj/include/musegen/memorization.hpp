#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <vector>

namespace musegen {

struct MemorizationConfig {
  std::vector<int> prompt_lengths = {0, 25, 50, 100, 150};
  int continuation_len = 25;
  int sample_count = 64;       // examples audited (capped by dataset size)
  double match_threshold = 0.85;  // used when calibration is degenerate
  double sinkhorn_epsilon = 0.0;  // 0 -> 0.05 * mean of the cost sub-matrix
  int sinkhorn_iters = 1000;
  double target_fpr = 0.01;
  double entropy_cost_cutoff = 0.5;
  uint64_t seed = 17;
};

// Counts normalized to sum 1 over {0..k}.
Eigen::VectorXd token_histogram(std::span<const int32_t> tokens, int k);

// Shannon entropy in bits of a sequence's token histogram.
double sequence_entropy_bits(std::span<const int32_t> tokens, int k);

// Entropic OT cost <P, C> between two histograms under the given full cost
// matrix, restricted to the joint non-zero support. Log-domain Sinkhorn with
// marginal stopping error 1e-8; raises NumericError if the iteration cap is
// hit with marginal error above 1e-4.
double sinkhorn_cost(const Eigen::VectorXd& h1, const Eigen::VectorXd& h2,
                     const Eigen::MatrixXd& cost, double epsilon = 0.0, int max_iters = 1000);

struct CalibrationResult {
  double tau = 0.0;
  double empirical_fpr = 0.0;
  bool degenerate = false;  // all negative costs equal (or too few examples)
};

// Largest threshold whose strict-less false-positive rate stays within
// target_fpr over the supplied negative-pair costs.
CalibrationResult calibrate_threshold(std::vector<double> negative_costs, double target_fpr);

struct MatchRecord {
  int example = 0;
  int prompt_len = 0;
  bool skipped = false;  // example shorter than T + continuation
  bool exact = false;
  double cost = 0.0;
  bool flag = false;  // cost < tau
  double entropy_bits = 0.0;
};

struct MatchReport {
  std::vector<MatchRecord> records;
  std::map<int, double> exact_fraction;   // per prompt length
  std::map<int, double> approx_fraction;  // per prompt length
  std::map<int, int> evaluated;           // non-skipped count per prompt length
  int skipped_total = 0;
  double tau = 0.0;
  double empirical_fpr = 0.0;
  bool tau_degenerate = false;
  double mean_entropy_all = 0.0;
  double mean_entropy_matched = 0.0;  // records with cost < entropy_cost_cutoff
  int matched_count = 0;
};

// One audited example: conditioning ids plus the target semantic ids.
struct AuditExample {
  Eigen::VectorXi conditioning;  // flat conditioning token ids (levels of M_A)
  Eigen::VectorXi semantic;      // target semantic ids
};

// Greedy continuation callback: given (example index, prompt length T),
// return continuation_len generated semantic ids.
using GreedyContinuation =
    std::function<Eigen::VectorXi(const AuditExample&, int prompt_len, int continuation_len)>;

MatchReport run_memorization_audit(const std::vector<AuditExample>& dataset,
                                   const GreedyContinuation& generate,
                                   const Eigen::MatrixXd& centroid_distances,
                                   const MemorizationConfig& cfg);

// Line-oriented report: per-record lines then summary key=value lines.
void write_match_report(const std::filesystem::path& path, const MatchReport& report);

}  // namespace musegen
