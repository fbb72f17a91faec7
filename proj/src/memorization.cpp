#include "musegen/memorization.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>

#include "musegen/errors.hpp"
#include "musegen/rng.hpp"

namespace musegen {

Eigen::VectorXd token_histogram(std::span<const int32_t> tokens, int k) {
  require(!tokens.empty(), "token_histogram: empty token list");
  require(k >= 1, "token_histogram: vocabulary must be >= 1");
  Eigen::VectorXd h = Eigen::VectorXd::Zero(k);
  for (int32_t t : tokens) {
    require(t >= 0 && t < k, "token_histogram: token id out of range");
    h(t) += 1.0;
  }
  return h / static_cast<double>(tokens.size());
}

double sequence_entropy_bits(std::span<const int32_t> tokens, int k) {
  Eigen::VectorXd h = token_histogram(tokens, k);
  double bits = 0.0;
  for (long i = 0; i < h.size(); ++i)
    if (h(i) > 0.0) bits -= h(i) * std::log2(h(i));
  return bits;
}

double sinkhorn_cost(const Eigen::VectorXd& h1, const Eigen::VectorXd& h2,
                     const Eigen::MatrixXd& cost, double epsilon, int max_iters) {
  require(h1.size() == cost.rows() && h2.size() == cost.cols(),
          "sinkhorn_cost: histogram/cost shape mismatch");
  require(h1.minCoeff() >= 0.0 && h2.minCoeff() >= 0.0, "sinkhorn_cost: negative mass");
  require(std::abs(h1.sum() - 1.0) < 1e-9 && std::abs(h2.sum() - 1.0) < 1e-9,
          "sinkhorn_cost: histograms must sum to 1");

  // Restrict to the joint support.
  std::vector<long> ri, cj;
  for (long i = 0; i < h1.size(); ++i)
    if (h1(i) > 0.0) ri.push_back(i);
  for (long j = 0; j < h2.size(); ++j)
    if (h2(j) > 0.0) cj.push_back(j);
  const long m = static_cast<long>(ri.size()), n = static_cast<long>(cj.size());
  Eigen::VectorXd a(m), b(n);
  Eigen::MatrixXd c(m, n);
  for (long i = 0; i < m; ++i) {
    a(i) = h1(ri[static_cast<size_t>(i)]);
    for (long j = 0; j < n; ++j) c(i, j) = cost(ri[static_cast<size_t>(i)], cj[static_cast<size_t>(j)]);
  }
  for (long j = 0; j < n; ++j) b(j) = h2(cj[static_cast<size_t>(j)]);

  if (m == 1 || n == 1) {
    // Transport is forced; no iteration needed.
    double total = 0.0;
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < n; ++j) total += a(i) * b(j) * c(i, j);
    return total;
  }

  double eps = epsilon > 0.0 ? epsilon : 0.05 * c.mean();
  if (eps <= 0.0) eps = 1e-9;  // all-zero costs degenerate to zero anyway

  // Log-domain Sinkhorn on dual potentials f, g.
  Eigen::VectorXd f = Eigen::VectorXd::Zero(m), g = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd log_a = a.array().log(), log_b = b.array().log();
  auto logsumexp_rows = [&](const Eigen::MatrixXd& z) {
    Eigen::VectorXd out(z.rows());
    for (long i = 0; i < z.rows(); ++i) {
      const double mx = z.row(i).maxCoeff();
      out(i) = mx + std::log((z.row(i).array() - mx).exp().sum());
    }
    return out;
  };

  double marginal_err = 1.0;
  for (int it = 0; it < max_iters; ++it) {
    // f_i = eps * (log a_i - logsumexp_j((g_j - C_ij)/eps)), then symmetric g.
    Eigen::MatrixXd zg = (-c);
    zg.rowwise() += g.transpose();
    zg /= eps;
    f = eps * (log_a - logsumexp_rows(zg));
    Eigen::MatrixXd zf = (-c).transpose();
    zf.rowwise() += f.transpose();
    zf /= eps;
    g = eps * (log_b - logsumexp_rows(zf));

    // Row marginal error of the implied plan.
    Eigen::MatrixXd logp = (-c);
    logp.colwise() += f;
    logp.rowwise() += g.transpose();
    logp /= eps;
    Eigen::VectorXd row_sum(m);
    for (long i = 0; i < m; ++i) row_sum(i) = logp.row(i).array().exp().sum();
    marginal_err = (row_sum - a).cwiseAbs().sum();
    if (marginal_err < 1e-8) break;
  }
  if (marginal_err > 1e-4)
    throw NumericError("sinkhorn_cost: no convergence (marginal error " +
                       std::to_string(marginal_err) + ")");

  Eigen::MatrixXd logp = (-c);
  logp.colwise() += f;
  logp.rowwise() += g.transpose();
  logp /= eps;
  double total = 0.0;
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < n; ++j) total += std::exp(logp(i, j)) * c(i, j);
  return std::max(total, 0.0);
}

CalibrationResult calibrate_threshold(std::vector<double> negative_costs, double target_fpr) {
  require(!negative_costs.empty(), "calibrate_threshold: no negative costs");
  require(target_fpr >= 0.0 && target_fpr <= 1.0, "calibrate_threshold: bad target_fpr");
  std::sort(negative_costs.begin(), negative_costs.end());
  const long n = static_cast<long>(negative_costs.size());
  CalibrationResult res;
  res.degenerate = negative_costs.front() == negative_costs.back();
  long allowed = static_cast<long>(std::floor(target_fpr * static_cast<double>(n)));
  if (allowed >= n) allowed = n - 1;
  res.tau = negative_costs[static_cast<size_t>(allowed)];
  long below = 0;
  for (double cst : negative_costs)
    if (cst < res.tau) ++below;
  res.empirical_fpr = static_cast<double>(below) / static_cast<double>(n);
  return res;
}

MatchReport run_memorization_audit(const std::vector<AuditExample>& dataset,
                                   const GreedyContinuation& generate,
                                   const Eigen::MatrixXd& centroid_distances,
                                   const MemorizationConfig& cfg) {
  require(!dataset.empty(), "memorization audit: empty dataset");
  require(cfg.continuation_len >= 1, "memorization audit: continuation_len must be >= 1");
  require(cfg.match_threshold > 0.0, "memorization audit: tau must be > 0");
  const int k = static_cast<int>(centroid_distances.rows());

  const int count = std::min<int>(cfg.sample_count, static_cast<int>(dataset.size()));

  MatchReport report;
  std::vector<double> negative_costs;
  // Generated sequences kept for calibration negatives, keyed per (ex, T).
  std::vector<std::pair<Eigen::VectorXi, Eigen::VectorXi>> pairs;  // (generated, target)

  for (int ex = 0; ex < count; ++ex) {
    const AuditExample& e = dataset[static_cast<size_t>(ex)];
    for (int t_len : cfg.prompt_lengths) {
      MatchRecord rec;
      rec.example = ex;
      rec.prompt_len = t_len;
      if (t_len + cfg.continuation_len > e.semantic.size()) {
        rec.skipped = true;
        ++report.skipped_total;
        report.records.push_back(rec);
        continue;
      }
      Eigen::VectorXi gen = generate(e, t_len, cfg.continuation_len);
      require(gen.size() == cfg.continuation_len, "memorization audit: bad continuation length");
      Eigen::VectorXi target = e.semantic.segment(t_len, cfg.continuation_len);
      rec.exact = (gen.array() == target.array()).all();
      Eigen::VectorXd hg = token_histogram(std::span<const int32_t>(gen.data(),
                                                                    static_cast<size_t>(gen.size())),
                                           k);
      Eigen::VectorXd ht = token_histogram(
          std::span<const int32_t>(target.data(), static_cast<size_t>(target.size())), k);
      rec.cost = sinkhorn_cost(hg, ht, centroid_distances, cfg.sinkhorn_epsilon,
                               cfg.sinkhorn_iters);
      rec.entropy_bits = sequence_entropy_bits(
          std::span<const int32_t>(gen.data(), static_cast<size_t>(gen.size())), k);
      pairs.emplace_back(gen, target);
      report.records.push_back(rec);
    }
  }

  // Threshold calibration on a seeded derangement of (generated, target).
  if (pairs.size() >= 2) {
    Rng rng(cfg.seed);
    std::vector<size_t> perm = rng.derangement(pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
      Eigen::VectorXi gen = pairs[i].first;
      Eigen::VectorXi target = pairs[perm[i]].second;
      Eigen::VectorXd hg = token_histogram(
          std::span<const int32_t>(gen.data(), static_cast<size_t>(gen.size())), k);
      Eigen::VectorXd ht = token_histogram(
          std::span<const int32_t>(target.data(), static_cast<size_t>(target.size())), k);
      negative_costs.push_back(
          sinkhorn_cost(hg, ht, centroid_distances, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters));
    }
    CalibrationResult cal = calibrate_threshold(negative_costs, cfg.target_fpr);
    report.tau = cal.degenerate ? cfg.match_threshold : cal.tau;
    report.empirical_fpr = cal.empirical_fpr;
    report.tau_degenerate = cal.degenerate;
  } else {
    report.tau = cfg.match_threshold;
    report.tau_degenerate = true;
  }

  // Flags and per-T aggregates.
  std::map<int, int> exact_n, flag_n;
  for (auto& rec : report.records) {
    if (rec.skipped) continue;
    rec.flag = rec.cost < report.tau;
    report.evaluated[rec.prompt_len] += 1;
    exact_n[rec.prompt_len] += rec.exact ? 1 : 0;
    flag_n[rec.prompt_len] += rec.flag ? 1 : 0;
  }
  for (auto& [t_len, n_eval] : report.evaluated) {
    report.exact_fraction[t_len] = static_cast<double>(exact_n[t_len]) / n_eval;
    report.approx_fraction[t_len] = static_cast<double>(flag_n[t_len]) / n_eval;
  }

  // Entropy profile of the generated continuations.
  double sum_all = 0.0, sum_matched = 0.0;
  int n_all = 0;
  for (const auto& rec : report.records) {
    if (rec.skipped) continue;
    sum_all += rec.entropy_bits;
    ++n_all;
    if (rec.cost < cfg.entropy_cost_cutoff) {
      sum_matched += rec.entropy_bits;
      ++report.matched_count;
    }
  }
  if (n_all > 0) report.mean_entropy_all = sum_all / n_all;
  if (report.matched_count > 0)
    report.mean_entropy_matched = sum_matched / report.matched_count;
  return report;
}

void write_match_report(const std::filesystem::path& path, const MatchReport& report) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write match report: " + path.string());
  f << "# example_id T exact cost flag\n";
  for (const auto& rec : report.records) {
    if (rec.skipped) {
      f << rec.example << " " << rec.prompt_len << " skipped - -\n";
      continue;
    }
    f << rec.example << " " << rec.prompt_len << " " << (rec.exact ? 1 : 0) << " " << rec.cost
      << " " << (rec.flag ? 1 : 0) << "\n";
  }
  f << "tau=" << report.tau << "\n";
  f << "tau_fpr=" << report.empirical_fpr << "\n";
  f << "tau_degenerate=" << (report.tau_degenerate ? 1 : 0) << "\n";
  for (const auto& [t_len, frac] : report.exact_fraction)
    f << "exact_fraction_T" << t_len << "=" << frac << "\n";
  for (const auto& [t_len, frac] : report.approx_fraction)
    f << "approx_fraction_T" << t_len << "=" << frac << "\n";
  f << "skipped=" << report.skipped_total << "\n";
  f << "mean_entropy_all_bits=" << report.mean_entropy_all << "\n";
  f << "mean_entropy_matched_bits=" << report.mean_entropy_matched << "\n";
  f << "matched_count=" << report.matched_count << "\n";
}

}  // namespace musegen
