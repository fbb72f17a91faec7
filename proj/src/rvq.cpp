#include "musegen/rvq.hpp"

#include "musegen/artifact_io.hpp"
#include "musegen/errors.hpp"
#include "musegen/kmeans.hpp"
#include "musegen/rng.hpp"

namespace musegen {

RvqCodebook RvqCodebook::train(const Eigen::MatrixXd& vectors, int levels, int entries,
                               uint64_t seed, int iters_per_level) {
  require(levels >= 1, "rvq: levels must be >= 1");
  require(entries >= 2, "rvq: entries per level must be >= 2");
  require(vectors.rows() >= entries, "rvq: fewer vectors than codebook entries");
  require(vectors.allFinite(), "rvq: non-finite training vectors");

  RvqCodebook cb;
  cb.levels = levels;
  cb.entries = entries;
  cb.dim = static_cast<int>(vectors.cols());
  cb.codewords.reserve(static_cast<size_t>(levels));
  cb.level_mse.reserve(static_cast<size_t>(levels));

  Eigen::MatrixXd residual = vectors;
  for (int l = 0; l < levels; ++l) {
    KmeansResult res =
        kmeans_fit(residual, entries, Rng::mix(seed, static_cast<uint64_t>(l)), iters_per_level);
    Eigen::VectorXi assign = nearest_rows(residual, res.centroids);
    for (long i = 0; i < residual.rows(); ++i) residual.row(i) -= res.centroids.row(assign(i));
    cb.codewords.push_back(std::move(res.centroids));
    cb.level_mse.push_back(residual.rowwise().squaredNorm().mean());
  }
  cb.trained = true;
  return cb;
}

std::vector<int32_t> RvqCodebook::encode(const Eigen::VectorXd& v) const {
  if (!trained) throw StateError("rvq: encode on untrained codebook");
  require(v.size() == dim, "rvq: vector dimension mismatch");
  require(v.allFinite(), "rvq: non-finite input vector");
  std::vector<int32_t> ids(static_cast<size_t>(levels));
  Eigen::VectorXd r = v;
  for (int l = 0; l < levels; ++l) {
    const Eigen::MatrixXd& cw = codewords[static_cast<size_t>(l)];
    int best = 0;
    double bestd = (r.transpose() - cw.row(0)).squaredNorm();
    for (int k = 1; k < entries; ++k) {
      const double d = (r.transpose() - cw.row(k)).squaredNorm();
      if (d < bestd) {
        bestd = d;
        best = k;
      }
    }
    ids[static_cast<size_t>(l)] = best;
    r -= cw.row(best).transpose();
  }
  return ids;
}

Eigen::VectorXd RvqCodebook::decode(std::span<const int32_t> ids) const {
  if (!trained) throw StateError("rvq: decode on untrained codebook");
  require(static_cast<int>(ids.size()) <= levels, "rvq: more ids than levels");
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  for (size_t l = 0; l < ids.size(); ++l) {
    require(ids[l] >= 0 && ids[l] < entries, "rvq: id out of range");
    v += codewords[l].row(ids[l]).transpose();
  }
  return v;
}

Eigen::MatrixXi RvqCodebook::encode_rows(const Eigen::MatrixXd& rows) const {
  if (!trained) throw StateError("rvq: encode on untrained codebook");
  require(rows.cols() == dim, "rvq: rows dimension mismatch");
  Eigen::MatrixXi out(rows.rows(), levels);
  Eigen::MatrixXd residual = rows;
  for (int l = 0; l < levels; ++l) {
    Eigen::VectorXi assign = nearest_rows(residual, codewords[static_cast<size_t>(l)]);
    for (long i = 0; i < rows.rows(); ++i) {
      out(i, l) = assign(i);
      residual.row(i) -= codewords[static_cast<size_t>(l)].row(assign(i));
    }
  }
  return out;
}

Eigen::MatrixXd RvqCodebook::decode_rows(const Eigen::MatrixXi& ids) const {
  if (!trained) throw StateError("rvq: decode on untrained codebook");
  require(ids.cols() <= levels, "rvq: more id columns than levels");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(ids.rows(), dim);
  for (long i = 0; i < ids.rows(); ++i)
    for (int l = 0; l < ids.cols(); ++l) {
      require(ids(i, l) >= 0 && ids(i, l) < entries, "rvq: id out of range");
      out.row(i) += codewords[static_cast<size_t>(l)].row(ids(i, l));
    }
  return out;
}

TokenSequence RvqCodebook::encode_sequence(const Eigen::MatrixXd& rows, TokenKind kind,
                                           double frame_rate) const {
  TokenSequence ts;
  ts.ids = encode_rows(rows);
  ts.vocab = entries;
  ts.frame_rate = frame_rate;
  ts.kind = kind;
  return ts;
}

Eigen::MatrixXd RvqCodebook::decode_sequence(const TokenSequence& ts) const {
  require(ts.vocab == entries, "rvq: token vocab mismatch");
  return decode_rows(ts.ids);
}

void RvqCodebook::save(const std::filesystem::path& path) const {
  if (!trained) throw StateError("rvq: save on untrained codebook");
  ArtifactWriter w("RVQCBK", 1);
  w.add_scalar("levels", levels);
  w.add_scalar("entries", entries);
  w.add_scalar("dim", dim);
  Eigen::MatrixXd stacked(static_cast<long>(levels) * entries, dim);
  for (int l = 0; l < levels; ++l)
    stacked.middleRows(static_cast<long>(l) * entries, entries) = codewords[static_cast<size_t>(l)];
  w.add_f64("codewords", stacked);
  Eigen::VectorXd mse = Eigen::Map<const Eigen::VectorXd>(level_mse.data(),
                                                          static_cast<long>(level_mse.size()));
  w.add_f64("level_mse", mse);
  w.save(path);
}

RvqCodebook RvqCodebook::load(const std::filesystem::path& path) {
  ArtifactReader r(path, "RVQCBK", 1);
  RvqCodebook cb;
  cb.levels = static_cast<int>(r.scalar("levels"));
  cb.entries = static_cast<int>(r.scalar("entries"));
  cb.dim = static_cast<int>(r.scalar("dim"));
  Eigen::MatrixXd stacked = r.f64("codewords");
  if (stacked.rows() != static_cast<long>(cb.levels) * cb.entries || stacked.cols() != cb.dim)
    throw FormatError("rvq: codeword shape mismatch in " + path.string());
  for (int l = 0; l < cb.levels; ++l)
    cb.codewords.push_back(stacked.middleRows(static_cast<long>(l) * cb.entries, cb.entries));
  Eigen::VectorXd mse = r.f64_vector("level_mse");
  cb.level_mse.assign(mse.data(), mse.data() + mse.size());
  cb.trained = true;
  return cb;
}

}  // namespace musegen
