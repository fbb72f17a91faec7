#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "musegen/tokens.hpp"

namespace musegen {

// Residual vector quantizer: level l is a k-means codebook fit on the
// residual left by levels < l. Encode is greedy nearest-codeword per level;
// decode sums the selected codewords over however many levels are given.
struct RvqCodebook {
  int levels = 0;
  int entries = 0;
  int dim = 0;
  std::vector<Eigen::MatrixXd> codewords;  // levels entries of (K x D)
  std::vector<double> level_mse;           // training residual MSE after each level
  bool trained = false;

  // 50 Lloyd iterations per level with k-means++ seeding.
  static RvqCodebook train(const Eigen::MatrixXd& vectors, int levels, int entries,
                           uint64_t seed, int iters_per_level = 50);

  std::vector<int32_t> encode(const Eigen::VectorXd& v) const;
  Eigen::VectorXd decode(std::span<const int32_t> ids) const;

  Eigen::MatrixXi encode_rows(const Eigen::MatrixXd& rows) const;
  Eigen::MatrixXd decode_rows(const Eigen::MatrixXi& ids) const;  // uses ids.cols() levels

  TokenSequence encode_sequence(const Eigen::MatrixXd& rows, TokenKind kind,
                                double frame_rate) const;
  Eigen::MatrixXd decode_sequence(const TokenSequence& ts) const;

  void save(const std::filesystem::path& path) const;
  static RvqCodebook load(const std::filesystem::path& path);
};

}  // namespace musegen
