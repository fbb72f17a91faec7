#include "musegen/tokens.hpp"

#include <fstream>
#include <sstream>

#include "musegen/errors.hpp"

namespace musegen {

std::string token_kind_name(TokenKind k) {
  switch (k) {
    case TokenKind::semantic: return "semantic";
    case TokenKind::acoustic: return "acoustic";
    case TokenKind::conditioning: return "conditioning";
    case TokenKind::melody: return "melody";
  }
  return "?";
}

TokenKind token_kind_from_name(const std::string& name) {
  if (name == "semantic") return TokenKind::semantic;
  if (name == "acoustic") return TokenKind::acoustic;
  if (name == "conditioning") return TokenKind::conditioning;
  if (name == "melody") return TokenKind::melody;
  throw ValidationError("unknown token kind: " + name);
}

void TokenSequence::validate() const {
  require(vocab >= 1, "token sequence: vocab must be >= 1");
  require(levels() >= 1, "token sequence: levels must be >= 1");
  if (kind == TokenKind::semantic)
    require(levels() == 1, "semantic token sequences have exactly 1 level");
  for (int f = 0; f < frames(); ++f)
    for (int l = 0; l < levels(); ++l)
      require(ids(f, l) >= 0 && ids(f, l) < vocab, "token id out of range");
}

TokenSequence truncate_levels(const TokenSequence& ts, int n) {
  require(n >= 1 && n <= ts.levels(), "truncate_levels: n out of range");
  TokenSequence out = ts;
  out.ids = ts.ids.leftCols(n).eval();
  return out;
}

void write_token_dump(const std::filesystem::path& path, const TokenSequence& ts) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open token dump for write: " + path.string());
  f << "# kind=" << token_kind_name(ts.kind) << " levels=" << ts.levels()
    << " vocab=" << ts.vocab << " frame_rate=" << ts.frame_rate << "\n";
  for (int r = 0; r < ts.frames(); ++r) {
    for (int c = 0; c < ts.levels(); ++c) f << (c ? " " : "") << ts.ids(r, c);
    f << "\n";
  }
}

TokenSequence read_token_dump(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifactError("missing token dump: " + path.string());
  std::string line;
  if (!std::getline(f, line) || line.rfind("# kind=", 0) != 0)
    throw FormatError("token dump missing header: " + path.string());
  std::string kind_s;
  int levels = 0, vocab = 0;
  double rate = 0.0;
  {
    std::istringstream hs(line.substr(1));
    std::string item;
    while (hs >> item) {
      auto eq = item.find('=');
      if (eq == std::string::npos) continue;
      std::string key = item.substr(0, eq), val = item.substr(eq + 1);
      if (key == "kind") kind_s = val;
      else if (key == "levels") levels = std::stoi(val);
      else if (key == "vocab") vocab = std::stoi(val);
      else if (key == "frame_rate") rate = std::stod(val);
    }
  }
  if (kind_s.empty() || levels <= 0 || vocab <= 0)
    throw FormatError("token dump bad header: " + path.string());
  std::vector<int> flat;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int v, got = 0;
    while (ls >> v) {
      flat.push_back(v);
      ++got;
    }
    if (got != levels) throw FormatError("token dump row width mismatch: " + path.string());
  }
  TokenSequence ts;
  ts.kind = token_kind_from_name(kind_s);
  ts.vocab = vocab;
  ts.frame_rate = rate;
  ts.ids.resize(static_cast<long>(flat.size()) / levels, levels);
  for (int r = 0; r < ts.frames(); ++r)
    for (int c = 0; c < levels; ++c) ts.ids(r, c) = flat[static_cast<size_t>(r) * levels + c];
  ts.validate();
  return ts;
}

}  // namespace musegen
