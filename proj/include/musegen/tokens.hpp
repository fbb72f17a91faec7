#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>

namespace musegen {

enum class TokenKind { semantic, acoustic, conditioning, melody };

std::string token_kind_name(TokenKind k);
TokenKind token_kind_from_name(const std::string& name);

// A frames x levels grid of codebook ids. Semantic sequences have exactly one
// level. frame_rate is 0 for non-temporal sequences (conditioning tokens).
struct TokenSequence {
  Eigen::MatrixXi ids;  // frames x levels
  int vocab = 0;
  double frame_rate = 0.0;
  TokenKind kind = TokenKind::semantic;

  int frames() const { return static_cast<int>(ids.rows()); }
  int levels() const { return static_cast<int>(ids.cols()); }
  void validate() const;
};

// Keeps the first n levels, everything else unchanged.
TokenSequence truncate_levels(const TokenSequence& ts, int n);

// Text dump: '#' header line with metadata, then one frame per line of
// space-separated level ids.
void write_token_dump(const std::filesystem::path& path, const TokenSequence& ts);
TokenSequence read_token_dump(const std::filesystem::path& path);

}  // namespace musegen
