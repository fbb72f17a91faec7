#pragma once

#include <Eigen/Dense>
#include <vector>

#include "musegen/audio.hpp"

namespace musegen {

constexpr double kLogEnergyFloor = 1e-10;

// Framed feature rows (num_frames x dim) at a fixed frame rate.
struct FeatureSequence {
  Eigen::MatrixXd frames;
  double frame_rate = 0.0;
  int dim = 0;

  int num_frames() const { return static_cast<int>(frames.rows()); }
};

// Triangular filterbank with geometrically spaced centers from f_lo up to
// Nyquist, triangles linear in log-frequency. Shared by the analysis
// front-end and the oscillator-bank resynthesizer.
struct Filterbank {
  int dim = 0;
  int window = 0;      // DFT length
  int sample_rate = 0;
  Eigen::MatrixXd weights;          // dim x (window/2 + 1)
  std::vector<double> centers_hz;   // dim band centers

  static Filterbank make(int dim, int sample_rate, int window, double f_lo = 100.0);
};

// Log band energies of Hann-windowed DFTs. Window length is 2x the hop,
// frames are centered on their hop span, edges zero-padded. frame_rate must
// divide the sample rate.
FeatureSequence frame_features(const AudioClip& clip, double frame_rate, int dim);

// Arithmetic mean over sliding windows; one row per window position.
// Output rows = floor((span - window) / stride) + 1.
Eigen::MatrixXd pool_window(const FeatureSequence& fs, double window_s, double stride_s);

// Mean over {t-1, t, t+1} (truncated at the edges). Applied to semantic-rate
// features before k-means so they are coarser than the acoustic features.
FeatureSequence smooth_neighbors(const FeatureSequence& fs);

}  // namespace musegen
