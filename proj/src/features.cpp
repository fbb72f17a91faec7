#include "musegen/features.hpp"

#include <cmath>

#include "musegen/errors.hpp"

namespace musegen {

namespace {
constexpr double kPi = 3.14159265358979323846;

struct DftPlan {
  // Real DFT as one GEMM: (frames x window) * (window x 2*(bins)) -> re/im.
  Eigen::MatrixXd twiddle;  // window x 2*bins, [cos | -sin] interleaved by half
  int bins = 0;
};

DftPlan make_plan(int window) {
  DftPlan plan;
  plan.bins = window / 2 + 1;
  plan.twiddle.resize(window, 2 * plan.bins);
  for (int n = 0; n < window; ++n) {
    for (int k = 0; k < plan.bins; ++k) {
      const double w = 2.0 * kPi * n * k / window;
      plan.twiddle(n, k) = std::cos(w);
      plan.twiddle(n, plan.bins + k) = -std::sin(w);
    }
  }
  return plan;
}

}  // namespace

Filterbank Filterbank::make(int dim, int sample_rate, int window, double f_lo) {
  require(dim >= 1, "filterbank: dim must be >= 1");
  require(window >= 2, "filterbank: window must be >= 2");
  Filterbank fb;
  fb.dim = dim;
  fb.window = window;
  fb.sample_rate = sample_rate;
  const int bins = window / 2 + 1;
  const double f_hi = sample_rate / 2.0;
  require(f_lo > 0.0 && f_lo < f_hi, "filterbank: f_lo out of range");

  // dim+2 geometric edge points; band b peaks at edge b+1.
  std::vector<double> edges(static_cast<size_t>(dim) + 2);
  const double ratio = std::pow(f_hi / f_lo, 1.0 / (dim + 1));
  for (int i = 0; i < dim + 2; ++i) edges[static_cast<size_t>(i)] = f_lo * std::pow(ratio, i);

  fb.centers_hz.resize(static_cast<size_t>(dim));
  fb.weights = Eigen::MatrixXd::Zero(dim, bins);
  for (int b = 0; b < dim; ++b) {
    const double lo = edges[static_cast<size_t>(b)];
    const double c = edges[static_cast<size_t>(b) + 1];
    const double hi = edges[static_cast<size_t>(b) + 2];
    fb.centers_hz[static_cast<size_t>(b)] = c;
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / window;
      if (f <= lo || f >= hi) continue;
      // Triangle linear in log frequency.
      const double w = f <= c ? (std::log(f) - std::log(lo)) / (std::log(c) - std::log(lo))
                              : (std::log(hi) - std::log(f)) / (std::log(hi) - std::log(c));
      fb.weights(b, k) = w;
    }
    // Guarantee non-empty support even for very narrow bands.
    if (fb.weights.row(b).maxCoeff() == 0.0) {
      int nearest = static_cast<int>(std::lround(c * window / sample_rate));
      nearest = std::min(std::max(nearest, 0), bins - 1);
      fb.weights(b, nearest) = 1.0;
    }
  }
  return fb;
}

FeatureSequence frame_features(const AudioClip& clip, double frame_rate, int dim) {
  require(clip.sample_rate >= 1, "frame_features: clip has no sample rate");
  require(frame_rate > 0.0, "frame_features: frame rate must be positive");
  const double hop_f = clip.sample_rate / frame_rate;
  const int hop = static_cast<int>(std::llround(hop_f));
  require(hop >= 1 && std::abs(hop_f - hop) < 1e-9,
          "frame_features: frame rate must divide the sample rate");
  const int window = 2 * hop;
  const int bins = window / 2 + 1;
  require(dim >= 1 && dim <= bins, "frame_features: dim exceeds DFT bins");
  const long n = static_cast<long>(clip.samples.size());
  require(n >= window, "frame_features: clip shorter than one analysis window");

  const int num_frames = static_cast<int>(n / hop);
  Eigen::VectorXd hann(window);
  for (int i = 0; i < window; ++i) hann(i) = 0.5 - 0.5 * std::cos(2.0 * kPi * i / window);

  // Assemble centered, zero-padded, windowed frames.
  Eigen::MatrixXd framed(num_frames, window);
  for (int t = 0; t < num_frames; ++t) {
    const long start = static_cast<long>(t) * hop - hop / 2;
    for (int i = 0; i < window; ++i) {
      const long idx = start + i;
      framed(t, i) = (idx >= 0 && idx < n) ? clip.samples[static_cast<size_t>(idx)] * hann(i) : 0.0;
    }
  }

  static thread_local DftPlan plan;
  if (plan.twiddle.rows() != window) plan = make_plan(window);
  Eigen::MatrixXd spec = framed * plan.twiddle;  // frames x 2*bins
  Eigen::MatrixXd power = spec.leftCols(bins).array().square() +
                          spec.rightCols(bins).array().square();

  Filterbank fb = Filterbank::make(dim, clip.sample_rate, window);
  FeatureSequence fs;
  fs.frame_rate = frame_rate;
  fs.dim = dim;
  fs.frames = (power * fb.weights.transpose()).cwiseMax(kLogEnergyFloor).array().log();
  return fs;
}

Eigen::MatrixXd pool_window(const FeatureSequence& fs, double window_s, double stride_s) {
  require(stride_s > 0.0 && window_s >= stride_s,
          "pool_window: need window_s >= stride_s > 0");
  const int wf = static_cast<int>(std::llround(window_s * fs.frame_rate));
  const int sf = static_cast<int>(std::llround(stride_s * fs.frame_rate));
  require(wf >= 1 && sf >= 1, "pool_window: window/stride shorter than one frame");
  const int n = fs.num_frames();
  require(n >= wf, "pool_window: sequence spans less than one window");
  const int count = (n - wf) / sf + 1;
  Eigen::MatrixXd out(count, fs.frames.cols());
  for (int i = 0; i < count; ++i)
    out.row(i) = fs.frames.middleRows(i * sf, wf).colwise().mean();
  return out;
}

FeatureSequence smooth_neighbors(const FeatureSequence& fs) {
  FeatureSequence out = fs;
  const int n = fs.num_frames();
  for (int t = 0; t < n; ++t) {
    const int lo = std::max(0, t - 1);
    const int hi = std::min(n - 1, t + 1);
    out.frames.row(t) = fs.frames.middleRows(lo, hi - lo + 1).colwise().mean();
  }
  return out;
}

}  // namespace musegen
