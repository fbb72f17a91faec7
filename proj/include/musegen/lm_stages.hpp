#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "musegen/errors.hpp"
#include "musegen/joint_embed.hpp"
#include "musegen/rng.hpp"
#include "musegen/tokens.hpp"

namespace musegen {

enum class StageKind {
  semantic,
  coarse_acoustic,
  fine_acoustic,
  direct_acoustic,
  encoder_conditioned
};

std::string stage_kind_name(StageKind k);
StageKind stage_kind_from_name(const std::string& name);

// Segment kinds in canonical sequence (and vocab-block) order.
enum class SegKind { cond = 0, melody = 1, semantic = 2, coarse = 3, fine = 4 };

// Token-space geometry shared by every stage of one pipeline.
struct TokenDims {
  int cond_levels = 12, cond_vocab = 32;
  int melody_levels = 4, melody_vocab = 32;
  int semantic_vocab = 32;
  int acoustic_levels = 8, acoustic_vocab = 64;
  int coarse_levels = 4;  // fine levels = acoustic_levels - coarse_levels

  int fine_levels() const { return acoustic_levels - coarse_levels; }
};

struct SegmentDef {
  SegKind kind;
  int levels = 1;
  int vocab = 0;
  bool predicted = false;
  bool optional = false;  // may be absent in a given layout (melody)
};

// Per-stage vocabulary map: disjoint id blocks per (segment, level), one
// separator id at the top of the input space, and a flattened local id space
// over the predicted segments for the output projection.
struct StageLayoutSpec {
  StageKind stage = StageKind::semantic;
  std::vector<SegmentDef> defs;
  std::vector<int> block_offset;  // input-id offset per def
  std::vector<int> pred_offset;   // local output offset per def (-1 if not predicted)
  int sep_id = 0;
  int input_vocab = 0;
  int output_vocab = 0;
  bool has_prefix = false;  // continuous encoder prefix before the first segment

  static StageLayoutSpec make(StageKind kind, const TokenDims& dims);

  int def_index(SegKind kind) const;  // -1 if absent
  int input_id(int def_idx, int level, int token) const;
  int output_local(int def_idx, int level, int token) const;
  // Inverse of output_local -> global input id (for feeding samples back).
  int global_of_local(int local) const;
  // Global input id of a predicted token -> local output id.
  int output_local_of_global(int global) const;
  // Local output slice [lo, hi) valid at flattened position `pos_in_segment`
  // of predicted def `def_idx` (level = pos % levels).
  std::pair<int, int> level_slice(int def_idx, int pos_in_segment) const;
};

// A concrete flattened sequence: segments, separators, prediction mask.
struct SequenceLayout {
  StageLayoutSpec spec;
  struct Segment {
    int def_idx;
    Eigen::MatrixXi ids;  // frames x levels, raw (unoffset) token ids
  };
  std::vector<Segment> segments;
  std::vector<int32_t> flat;      // offset input ids incl. separators
  std::vector<int8_t> predicted;  // per flat position
  std::vector<int> prefix_word_ids;  // encoder_conditioned only

  int size() const { return static_cast<int>(flat.size()); }
  // Rebuilds raw segments from flat + metadata; used by the round-trip check.
  std::vector<Segment> reconstruct_segments() const;
};

// Builds a layout from the given segments, validating presence rules for the
// stage kind. Predicted target sequences may have zero frames (inference
// prompts). Multi-level tokens are flattened frame-major.
struct LayoutInputs {
  const TokenSequence* cond = nullptr;
  const TokenSequence* melody = nullptr;
  const TokenSequence* semantic = nullptr;
  const TokenSequence* coarse = nullptr;
  const TokenSequence* target = nullptr;
  const TokenSequence* target2 = nullptr;        // encoder_conditioned: coarse target
  std::vector<int> prefix_word_ids;              // encoder_conditioned
};
SequenceLayout build_layout(const StageLayoutSpec& spec, const LayoutInputs& in);

struct StageConfig {
  StageKind kind = StageKind::semantic;
  int layers = 4;
  int heads = 4;
  int model_dim = 128;
  int ff_dim = 256;
  double dropout = 0.0;
  int max_seq_len = 512;
  int rel_buckets = 32;
  int rel_max_dist = 128;
  TokenDims dims;
  int encoder_dim = 16;  // encoder_conditioned prefix width

  void validate() const;
};

// T5-style bucket for causal relative positions (query - key >= 0).
int relative_bucket(int distance, int n_buckets, int max_dist);

namespace detail {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct Param {
  MatX<S> v, g;
  void setup(long rows, long cols) {
    v.setZero(rows, cols);
    g.setZero(rows, cols);
  }
};

template <typename S>
inline S gelu(S x) {
  const S c = static_cast<S>(0.7978845608028654);
  const S a = static_cast<S>(0.044715);
  return static_cast<S>(0.5) * x * (static_cast<S>(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename S>
inline S gelu_grad(S x) {
  const S c = static_cast<S>(0.7978845608028654);
  const S a = static_cast<S>(0.044715);
  const S u = c * (x + a * x * x * x);
  const S t = std::tanh(u);
  return static_cast<S>(0.5) * (static_cast<S>(1) + t) +
         static_cast<S>(0.5) * x * (static_cast<S>(1) - t * t) * c *
             (static_cast<S>(1) + static_cast<S>(3) * a * x * x);
}

}  // namespace detail

// Decoder-only pre-norm transformer with bucketed relative position bias.
// Templated on scalar so the production model runs float while the gradient
// check runs the identical code in double.
template <typename S>
struct StageModelT {
  using Mat = detail::MatX<S>;
  using Vec = detail::VecX<S>;
  using Param = detail::Param<S>;

  StageConfig cfg;
  StageLayoutSpec layout;

  struct Layer {
    Param wq, wk, wv, wo;      // model_dim x model_dim
    Param ln1_g, ln1_b, ln2_g, ln2_b;
    Param w1, b1, w2, b2;      // ff
  };

  Param embed;     // input_vocab x d
  std::vector<Layer> layers;
  Param rel_bias;  // heads x buckets
  Param lnf_g, lnf_b;
  Param w_out;     // d x output_vocab (zero init: uniform logits)
  Param b_out;

  // encoder_conditioned: per-word text encoder + projection into the prefix.
  Param enc_word_embed, enc_w1, enc_b1, enc_w2, enc_b2;
  Param prefix_proj;  // encoder_dim x d
  bool encoder_trainable = false;

  void init(uint64_t seed);
  int64_t parameter_count() const;
  void visit_params(const std::function<void(const std::string&, Param&)>& fn);
  void zero_grads();

  struct LayerCache {
    Mat x_in, ln1_out, q, k, v, concat, attn_out, x_mid, ln2_out, hpre, h, ff_out;
    Mat ln1_xhat, ln2_xhat;
    Vec ln1_rstd, ln2_rstd;
    std::vector<Mat> probs;  // per head, n x n
    Mat attn_drop_mask, ff_drop_mask;
  };
  struct Cache {
    Mat x0;
    std::vector<int32_t> ids;  // token ids (positions after the prefix)
    std::vector<LayerCache> layer;
    Mat xf, lnf_xhat, logits;
    Vec lnf_rstd;
    int n = 0;
    int prefix_rows = 0;
    Mat prefix_raw;   // encoder outputs before projection (w x d_e)
    Mat enc_hpre;     // per-word tower cache
    Mat enc_bag;      // per-word embeds (w x d_e)
    std::vector<Vec> enc_norm_y;   // normalized tower outputs per word
    std::vector<S> enc_norm_r;
    std::vector<int> word_ids;
  };

  // ids are layout-flat input ids. Returns logits rows for every combined
  // position (prefix rows included for encoder-conditioned models).
  Mat forward(const std::vector<int32_t>& ids, Cache* cache,
              const std::vector<int>* prefix_word_ids = nullptr,
              Rng* dropout_rng = nullptr) const;

  // Cross-entropy over predicted positions; accumulates parameter gradients.
  double loss_and_grad(const SequenceLayout& layout, Rng* dropout_rng = nullptr);
  // Loss only, no gradient (used by the finite-difference oracle).
  double loss_only(const SequenceLayout& layout) const;

  void backward(const Cache& cache, const Mat& dlogits);

  // Incremental decoding with per-layer key/value caches.
  struct Decoder {
    const StageModelT* model = nullptr;
    std::vector<Mat> k_cache, v_cache;  // per layer, pos x d
    int pos = 0;

    void reset(const StageModelT& m);
    // Processes one combined-position input row; returns the logits row.
    Vec step_row(const Vec& x0_row);
    Vec step_token(int32_t id);
    // Prefill a prompt; returns logits row of the last position.
    Vec prefill(const std::vector<int32_t>& ids,
                const std::vector<int>* prefix_word_ids = nullptr);
  };

  Mat encode_prefix(const std::vector<int>& word_ids, Cache* cache) const;
};

using StageModel = StageModelT<float>;

// ---- training ----

struct StageTrainConfig {
  int batch = 8;
  int steps = 300;
  double lr = 0.5;
  int warmup_steps = 30;
  double final_lr_frac = 0.1;
  double clip_norm = 1.0;
  uint64_t seed = 19;
};

struct StageTrainStats {
  std::vector<double> step_loss;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int64_t parameter_count = 0;
};

// Seeded minibatch order, SGD with global-norm clipping, warmup + cosine
// schedule. Throws NumericError on non-finite loss (reporting the batch) or
// when the final loss fails to improve on the initial loss.
StageTrainStats train_stage(StageModel& m, const std::vector<SequenceLayout>& dataset,
                            const StageTrainConfig& cfg);

// ---- sampling ----

struct SampleRequest {
  std::vector<int32_t> prompt;  // layout-flat ids
  std::vector<int> prefix_word_ids;
  int n_new = 0;
  double temperature = 1.0;
  bool greedy = false;
  uint64_t seed = 0;
  // Optional per-step restriction to a local output range [lo, hi).
  std::function<std::pair<int, int>(int step)> slice;
};

// Returns the sampled GLOBAL input ids (appendable to the prompt).
std::vector<int32_t> sample_tokens(const StageModel& m, const SampleRequest& req);

// ---- persistence ----

void save_stage(const StageModel& m, const std::filesystem::path& path);
StageModel load_stage(const std::filesystem::path& path);

// ---- encoder-conditioned variant construction ----

enum class EncoderMode { frozen, finetuned, scratch };
std::string encoder_mode_name(EncoderMode m);

// Builds an encoder_conditioned stage. frozen/finetuned copy the pretrained
// text tower; scratch re-initializes it from the seed. Throws
// ValidationError when a pretrained tower is required but absent.
StageModel make_encoder_stage(const StageConfig& cfg, const JointEmbedModel* pretrained,
                              EncoderMode mode, uint64_t seed);

// ---- templated implementation ----

namespace detail {

template <typename S>
MatX<S> seeded_normal(long rows, long cols, double stddev, Rng& rng) {
  MatX<S> m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = static_cast<S>(rng.normal(0.0, stddev));
  return m;
}

}  // namespace detail

template <typename S>
void StageModelT<S>::init(uint64_t seed) {
  cfg.validate();
  layout = StageLayoutSpec::make(cfg.kind, cfg.dims);
  Rng rng(seed);
  const int d = cfg.model_dim;

  embed.setup(layout.input_vocab, d);
  embed.v = detail::seeded_normal<S>(layout.input_vocab, d, 0.02, rng);

  layers.assign(static_cast<size_t>(cfg.layers), Layer{});
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& l : layers) {
    l.wq.setup(d, d);
    l.wk.setup(d, d);
    l.wv.setup(d, d);
    l.wo.setup(d, d);
    l.wq.v = detail::seeded_normal<S>(d, d, attn_std, rng);
    l.wk.v = detail::seeded_normal<S>(d, d, attn_std, rng);
    l.wv.v = detail::seeded_normal<S>(d, d, attn_std, rng);
    l.wo.v = detail::seeded_normal<S>(d, d, attn_std / std::sqrt(2.0 * cfg.layers), rng);
    l.ln1_g.setup(d, 1);
    l.ln1_g.v.setOnes();
    l.ln1_b.setup(d, 1);
    l.ln2_g.setup(d, 1);
    l.ln2_g.v.setOnes();
    l.ln2_b.setup(d, 1);
    l.w1.setup(d, cfg.ff_dim);
    l.w1.v = detail::seeded_normal<S>(d, cfg.ff_dim, std::sqrt(2.0 / d), rng);
    l.b1.setup(cfg.ff_dim, 1);
    l.w2.setup(cfg.ff_dim, d);
    l.w2.v = detail::seeded_normal<S>(cfg.ff_dim, d,
                                      1.0 / std::sqrt(static_cast<double>(cfg.ff_dim)) /
                                          std::sqrt(2.0 * cfg.layers),
                                      rng);
    l.b2.setup(d, 1);
  }
  rel_bias.setup(cfg.heads, cfg.rel_buckets);
  lnf_g.setup(d, 1);
  lnf_g.v.setOnes();
  lnf_b.setup(d, 1);
  w_out.setup(d, layout.output_vocab);  // zero: exact ln(V) loss at init
  b_out.setup(layout.output_vocab, 1);

  if (cfg.kind == StageKind::encoder_conditioned) {
    prefix_proj.setup(cfg.encoder_dim, d);
    prefix_proj.v = detail::seeded_normal<S>(cfg.encoder_dim, d,
                                             1.0 / std::sqrt(static_cast<double>(cfg.encoder_dim)),
                                             rng);
  }
}

template <typename S>
void StageModelT<S>::visit_params(const std::function<void(const std::string&, Param&)>& fn) {
  fn("embed", embed);
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    auto& l = layers[i];
    fn(p + "wq", l.wq);
    fn(p + "wk", l.wk);
    fn(p + "wv", l.wv);
    fn(p + "wo", l.wo);
    fn(p + "ln1_g", l.ln1_g);
    fn(p + "ln1_b", l.ln1_b);
    fn(p + "ln2_g", l.ln2_g);
    fn(p + "ln2_b", l.ln2_b);
    fn(p + "w1", l.w1);
    fn(p + "b1", l.b1);
    fn(p + "w2", l.w2);
    fn(p + "b2", l.b2);
  }
  fn("rel_bias", rel_bias);
  fn("lnf_g", lnf_g);
  fn("lnf_b", lnf_b);
  fn("w_out", w_out);
  fn("b_out", b_out);
  if (cfg.kind == StageKind::encoder_conditioned) {
    fn("prefix_proj", prefix_proj);
    if (enc_word_embed.v.size() > 0) {
      fn("enc_word_embed", enc_word_embed);
      fn("enc_w1", enc_w1);
      fn("enc_b1", enc_b1);
      fn("enc_w2", enc_w2);
      fn("enc_b2", enc_b2);
    }
  }
}

template <typename S>
int64_t StageModelT<S>::parameter_count() const {
  int64_t n = 0;
  const_cast<StageModelT*>(this)->visit_params(
      [&n](const std::string&, Param& p) { n += p.v.size(); });
  return n;
}

template <typename S>
void StageModelT<S>::zero_grads() {
  visit_params([](const std::string&, Param& p) { p.g.setZero(); });
}

template <typename S>
typename StageModelT<S>::Mat StageModelT<S>::encode_prefix(const std::vector<int>& word_ids,
                                                           Cache* cache) const {
  require(!word_ids.empty(), "encoder stage: empty word prefix");
  require(enc_word_embed.v.size() > 0, "encoder stage: text tower not initialized");
  const long w = static_cast<long>(word_ids.size());
  Mat bag(w, enc_word_embed.v.cols());
  for (long i = 0; i < w; ++i) {
    require(word_ids[static_cast<size_t>(i)] >= 0 &&
                word_ids[static_cast<size_t>(i)] < enc_word_embed.v.rows(),
            "encoder stage: word id out of vocab");
    bag.row(i) = enc_word_embed.v.row(word_ids[static_cast<size_t>(i)]);
  }
  Mat hpre = (bag * enc_w1.v.transpose()).rowwise() + enc_b1.v.col(0).transpose();
  Mat h = hpre.cwiseMax(S(0));
  Mat y = (h * enc_w2.v.transpose()).rowwise() + enc_b2.v.col(0).transpose();
  Mat out(w, y.cols());
  std::vector<Vec> norm_y;
  std::vector<S> norm_r;
  for (long i = 0; i < w; ++i) {
    S r = y.row(i).norm();
    if (r < S(1e-8)) r = S(1e-8);
    out.row(i) = y.row(i) / r;
    norm_y.push_back(out.row(i).transpose());
    norm_r.push_back(r);
  }
  if (cache) {
    cache->enc_bag = bag;
    cache->enc_hpre = hpre;
    cache->enc_norm_y = std::move(norm_y);
    cache->enc_norm_r = std::move(norm_r);
    cache->word_ids = word_ids;
    cache->prefix_raw = out;
  }
  return out * prefix_proj.v;  // w x d
}

namespace detail {

// Per-row layer norm; returns y, caches xhat and 1/std.
template <typename S>
MatX<S> layer_norm(const MatX<S>& x, const MatX<S>& gamma, const MatX<S>& beta, MatX<S>& xhat,
                   VecX<S>& rstd) {
  const long n = x.rows(), d = x.cols();
  MatX<S> y(n, d);
  xhat.resize(n, d);
  rstd.resize(n);
  for (long i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    VecX<S> c = (x.row(i).array() - mean).matrix().transpose();
    S var = c.squaredNorm() / static_cast<S>(d);
    S r = S(1) / std::sqrt(var + S(1e-5));
    rstd(i) = r;
    xhat.row(i) = (c * r).transpose();
    y.row(i) = (xhat.row(i).cwiseProduct(gamma.col(0).transpose())) + beta.col(0).transpose();
  }
  return y;
}

// Backward of layer_norm; accumulates dgamma/dbeta, returns dx.
template <typename S>
MatX<S> layer_norm_backward(const MatX<S>& dy, const MatX<S>& xhat, const VecX<S>& rstd,
                            const MatX<S>& gamma, MatX<S>& dgamma, MatX<S>& dbeta) {
  const long n = dy.rows(), d = dy.cols();
  MatX<S> dx(n, d);
  for (long i = 0; i < n; ++i) {
    VecX<S> dyr = dy.row(i).transpose();
    dgamma.col(0) += dyr.cwiseProduct(xhat.row(i).transpose());
    dbeta.col(0) += dyr;
    VecX<S> dxhat = dyr.cwiseProduct(gamma.col(0));
    const S m1 = dxhat.mean();
    const S m2 = dxhat.cwiseProduct(xhat.row(i).transpose()).mean();
    dx.row(i) =
        ((dxhat.array() - m1 - xhat.row(i).transpose().array() * m2) * rstd(i)).transpose();
  }
  return dx;
}

}  // namespace detail

template <typename S>
typename StageModelT<S>::Mat StageModelT<S>::forward(const std::vector<int32_t>& ids,
                                                     Cache* cache,
                                                     const std::vector<int>* prefix_word_ids,
                                                     Rng* dropout_rng) const {
  const bool want_prefix = cfg.kind == StageKind::encoder_conditioned;
  require(want_prefix == (prefix_word_ids != nullptr && !prefix_word_ids->empty()),
          want_prefix ? "encoder stage requires a word prefix"
                      : "only encoder stages accept a word prefix");

  Mat prefix;
  if (want_prefix) prefix = encode_prefix(*prefix_word_ids, cache);
  const int pn = static_cast<int>(prefix.rows());
  const int n = pn + static_cast<int>(ids.size());
  require(n >= 1, "forward: empty sequence");
  require(n <= cfg.max_seq_len, "forward: sequence exceeds max_seq_len");

  Mat x(n, cfg.model_dim);
  if (pn > 0) x.topRows(pn) = prefix;
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < layout.input_vocab, "forward: id out of vocab");
    x.row(pn + static_cast<long>(i)) = embed.v.row(ids[i]);
  }

  const int heads = cfg.heads;
  const int dh = cfg.model_dim / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const S neg_inf = S(-1e9);

  // Relative bias lookup per distance.
  std::vector<int> bucket_of(static_cast<size_t>(n));
  for (int d1 = 0; d1 < n; ++d1)
    bucket_of[static_cast<size_t>(d1)] = relative_bucket(d1, cfg.rel_buckets, cfg.rel_max_dist);

  if (cache) {
    cache->n = n;
    cache->prefix_rows = pn;
    cache->x0 = x;
    cache->ids = ids;
    cache->layer.assign(static_cast<size_t>(cfg.layers), LayerCache{});
  }

  const bool training = dropout_rng != nullptr && cfg.dropout > 0.0;
  const S keep = static_cast<S>(1.0 - cfg.dropout);

  for (int li = 0; li < cfg.layers; ++li) {
    const Layer& L = layers[static_cast<size_t>(li)];
    LayerCache* lc = cache ? &cache->layer[static_cast<size_t>(li)] : nullptr;
    if (lc) lc->x_in = x;

    Mat xhat;
    detail::VecX<S> rstd;
    Mat a_in = detail::layer_norm<S>(x, L.ln1_g.v, L.ln1_b.v, xhat, rstd);
    if (lc) {
      lc->ln1_out = a_in;
      lc->ln1_xhat = xhat;
      lc->ln1_rstd = rstd;
    }

    Mat q = a_in * L.wq.v;
    Mat k = a_in * L.wk.v;
    Mat v = a_in * L.wv.v;
    if (lc) {
      lc->q = q;
      lc->k = k;
      lc->v = v;
      lc->probs.assign(static_cast<size_t>(heads), Mat());
    }

    Mat concat(n, cfg.model_dim);
    for (int h = 0; h < heads; ++h) {
      auto qh = q.middleCols(h * dh, dh);
      auto kh = k.middleCols(h * dh, dh);
      auto vh = v.middleCols(h * dh, dh);
      Mat scores = (qh * kh.transpose()) * scale;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j)
          scores(i, j) += rel_bias.v(h, bucket_of[static_cast<size_t>(i - j)]);
        for (int j = i + 1; j < n; ++j) scores(i, j) = neg_inf;
      }
      // Row softmax.
      for (int i = 0; i < n; ++i) {
        const S mx = scores.row(i).head(i + 1).maxCoeff();
        S sum = S(0);
        for (int j = 0; j <= i; ++j) {
          scores(i, j) = std::exp(scores(i, j) - mx);
          sum += scores(i, j);
        }
        for (int j = 0; j <= i; ++j) scores(i, j) /= sum;
        for (int j = i + 1; j < n; ++j) scores(i, j) = S(0);
      }
      concat.middleCols(h * dh, dh) = scores * vh;
      if (lc) lc->probs[static_cast<size_t>(h)] = std::move(scores);
    }
    if (lc) lc->concat = concat;
    Mat attn_out = concat * L.wo.v;
    if (training) {
      Mat mask(n, cfg.model_dim);
      for (long i = 0; i < mask.size(); ++i)
        mask.data()[i] = dropout_rng->uniform() < cfg.dropout ? S(0) : S(1) / keep;
      attn_out.array() *= mask.array();
      if (lc) lc->attn_drop_mask = std::move(mask);
    }
    if (lc) lc->attn_out = attn_out;
    x = x + attn_out;
    if (lc) lc->x_mid = x;

    Mat xhat2;
    detail::VecX<S> rstd2;
    Mat f_in = detail::layer_norm<S>(x, L.ln2_g.v, L.ln2_b.v, xhat2, rstd2);
    if (lc) {
      lc->ln2_out = f_in;
      lc->ln2_xhat = xhat2;
      lc->ln2_rstd = rstd2;
    }
    Mat hpre = (f_in * L.w1.v).rowwise() + L.b1.v.col(0).transpose();
    Mat h = hpre.unaryExpr([](S t) { return detail::gelu(t); });
    Mat ff = (h * L.w2.v).rowwise() + L.b2.v.col(0).transpose();
    if (training) {
      Mat mask(n, cfg.model_dim);
      for (long i = 0; i < mask.size(); ++i)
        mask.data()[i] = dropout_rng->uniform() < cfg.dropout ? S(0) : S(1) / keep;
      ff.array() *= mask.array();
      if (lc) lc->ff_drop_mask = std::move(mask);
    }
    if (lc) {
      lc->hpre = hpre;
      lc->h = h;
      lc->ff_out = ff;
    }
    x = x + ff;
  }

  Mat xhatf;
  detail::VecX<S> rstdf;
  Mat xf = detail::layer_norm<S>(x, lnf_g.v, lnf_b.v, xhatf, rstdf);
  Mat logits = (xf * w_out.v).rowwise() + b_out.v.col(0).transpose();
  if (cache) {
    cache->xf = x;
    cache->lnf_xhat = xhatf;
    cache->lnf_rstd = rstdf;
    cache->logits = logits;
  }
  return logits;
}

template <typename S>
void StageModelT<S>::backward(const Cache& cache, const Mat& dlogits) {
  const int n = cache.n;
  const int heads = cfg.heads;
  const int dh = cfg.model_dim / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  std::vector<int> bucket_of(static_cast<size_t>(n));
  for (int d1 = 0; d1 < n; ++d1)
    bucket_of[static_cast<size_t>(d1)] = relative_bucket(d1, cfg.rel_buckets, cfg.rel_max_dist);

  // Final projection + LN.
  Mat xf_norm(n, cfg.model_dim);
  for (int i = 0; i < n; ++i)
    xf_norm.row(i) = cache.lnf_xhat.row(i).cwiseProduct(lnf_g.v.col(0).transpose()) +
                     lnf_b.v.col(0).transpose();
  w_out.g += xf_norm.transpose() * dlogits;
  b_out.g.col(0) += dlogits.colwise().sum().transpose();
  Mat dxf_norm = dlogits * w_out.v.transpose();
  Mat dx = detail::layer_norm_backward<S>(dxf_norm, cache.lnf_xhat, cache.lnf_rstd, lnf_g.v,
                                          lnf_g.g, lnf_b.g);

  for (int li = cfg.layers - 1; li >= 0; --li) {
    const Layer& L = layers[static_cast<size_t>(li)];
    Layer& Lg = layers[static_cast<size_t>(li)];
    const LayerCache& lc = cache.layer[static_cast<size_t>(li)];

    // FF block: x = x_mid + ff(ln2(x_mid)).
    Mat dff = dx;
    if (lc.ff_drop_mask.size() > 0) dff.array() *= lc.ff_drop_mask.array();
    Lg.w2.g += lc.h.transpose() * dff;
    Lg.b2.g.col(0) += dff.colwise().sum().transpose();
    Mat dhm = dff * L.w2.v.transpose();
    Mat dhpre =
        dhm.cwiseProduct(lc.hpre.unaryExpr([](S t) { return detail::gelu_grad(t); }));
    Lg.w1.g += lc.ln2_out.transpose() * dhpre;
    Lg.b1.g.col(0) += dhpre.colwise().sum().transpose();
    Mat df_in = dhpre * L.w1.v.transpose();
    Mat dx_mid = detail::layer_norm_backward<S>(df_in, lc.ln2_xhat, lc.ln2_rstd, L.ln2_g.v,
                                                Lg.ln2_g.g, Lg.ln2_b.g);
    dx_mid += dx;  // residual path

    // Attention block: x_mid = x_in + attn(ln1(x_in)).
    Mat dattn = dx_mid;
    if (lc.attn_drop_mask.size() > 0) dattn.array() *= lc.attn_drop_mask.array();
    Lg.wo.g += lc.concat.transpose() * dattn;
    Mat dconcat = dattn * L.wo.v.transpose();

    Mat dq = Mat::Zero(n, cfg.model_dim);
    Mat dk = Mat::Zero(n, cfg.model_dim);
    Mat dv = Mat::Zero(n, cfg.model_dim);
    for (int h = 0; h < heads; ++h) {
      const Mat& p = lc.probs[static_cast<size_t>(h)];
      auto dch = dconcat.middleCols(h * dh, dh);
      auto vh = lc.v.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh) += p.transpose() * dch;
      Mat dp = dch * vh.transpose();
      // softmax backward row-wise: ds = p .* (dp - rowdot(dp, p))
      Mat ds(n, n);
      for (int i = 0; i < n; ++i) {
        const S dot = p.row(i).dot(dp.row(i));
        ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
      }
      for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j)
          rel_bias.g(h, bucket_of[static_cast<size_t>(i - j)]) += ds(i, j);
      auto qh = lc.q.middleCols(h * dh, dh);
      auto kh = lc.k.middleCols(h * dh, dh);
      dq.middleCols(h * dh, dh) += (ds * kh) * scale;
      dk.middleCols(h * dh, dh) += (ds.transpose() * qh) * scale;
    }
    Lg.wq.g += lc.ln1_out.transpose() * dq;
    Lg.wk.g += lc.ln1_out.transpose() * dk;
    Lg.wv.g += lc.ln1_out.transpose() * dv;
    Mat da_in = dq * L.wq.v.transpose() + dk * L.wk.v.transpose() + dv * L.wv.v.transpose();
    Mat dx_in = detail::layer_norm_backward<S>(da_in, lc.ln1_xhat, lc.ln1_rstd, L.ln1_g.v,
                                               Lg.ln1_g.g, Lg.ln1_b.g);
    dx = dx_in + dx_mid;  // residual path
  }

  // Embedding rows / encoder prefix.
  const int pn = cache.prefix_rows;
  if (pn > 0) {
    Mat dprefix = dx.topRows(pn);  // gradient w.r.t. projected prefix rows
    prefix_proj.g += cache.prefix_raw.transpose() * dprefix;
    if (encoder_trainable) {
      Mat dout = dprefix * prefix_proj.v.transpose();  // w x d_e (post-normalize)
      const long w = dout.rows();
      Mat dy(w, dout.cols());
      for (long i = 0; i < w; ++i) {
        const Vec& yn = cache.enc_norm_y[static_cast<size_t>(i)];
        const S r = cache.enc_norm_r[static_cast<size_t>(i)];
        Vec g = dout.row(i).transpose();
        dy.row(i) = ((g - yn * yn.dot(g)) / r).transpose();
      }
      enc_w2.g += dy.transpose() * cache.enc_hpre.cwiseMax(S(0));
      enc_b2.g.col(0) += dy.colwise().sum().transpose();
      Mat dh = dy * enc_w2.v;
      dh.array() *= (cache.enc_hpre.array() > S(0)).template cast<S>();
      enc_w1.g += dh.transpose() * cache.enc_bag;
      enc_b1.g.col(0) += dh.colwise().sum().transpose();
      Mat dbag = dh * enc_w1.v;
      for (long i = 0; i < w; ++i)
        enc_word_embed.g.row(cache.word_ids[static_cast<size_t>(i)]) += dbag.row(i);
    }
  }
  for (int i = pn; i < n; ++i)
    embed.g.row(cache.ids[static_cast<size_t>(i - pn)]) += dx.row(i);
}

template <typename S>
double StageModelT<S>::loss_only(const SequenceLayout& layout_inst) const {
  Cache cache;
  const std::vector<int>* prefix =
      layout_inst.prefix_word_ids.empty() ? nullptr : &layout_inst.prefix_word_ids;
  Mat logits = forward(layout_inst.flat, &cache, prefix, nullptr);
  const int pn = cache.prefix_rows;
  double loss = 0.0;
  int count = 0;
  for (size_t p = 0; p < layout_inst.flat.size(); ++p) {
    if (!layout_inst.predicted[p]) continue;
    const int row = pn + static_cast<int>(p) - 1;
    const int local = layout.output_local_of_global(layout_inst.flat[p]);
    detail::VecX<S> lrow = logits.row(row).transpose();
    const S mx = lrow.maxCoeff();
    double denom = 0.0;
    for (long k = 0; k < lrow.size(); ++k) denom += std::exp(static_cast<double>(lrow(k) - mx));
    loss += -(static_cast<double>(lrow(local) - mx) - std::log(denom));
    ++count;
  }
  require(count > 0, "loss: layout has no predicted positions");
  return loss / count;
}

template <typename S>
double StageModelT<S>::loss_and_grad(const SequenceLayout& layout_inst, Rng* dropout_rng) {
  Cache cache;
  const std::vector<int>* prefix =
      layout_inst.prefix_word_ids.empty() ? nullptr : &layout_inst.prefix_word_ids;
  Mat logits = forward(layout_inst.flat, &cache, prefix, dropout_rng);
  const int pn = cache.prefix_rows;
  Mat dlogits = Mat::Zero(logits.rows(), logits.cols());
  double loss = 0.0;
  int count = 0;
  for (size_t p = 0; p < layout_inst.flat.size(); ++p)
    if (layout_inst.predicted[p]) ++count;
  require(count > 0, "loss: layout has no predicted positions");

  for (size_t p = 0; p < layout_inst.flat.size(); ++p) {
    if (!layout_inst.predicted[p]) continue;
    const int row = pn + static_cast<int>(p) - 1;
    const int local = layout.output_local_of_global(layout_inst.flat[p]);
    detail::VecX<S> lrow = logits.row(row).transpose();
    const S mx = lrow.maxCoeff();
    detail::VecX<S> ex = (lrow.array() - mx).exp();
    const S denom = ex.sum();
    loss += -std::log(std::max(static_cast<double>(ex(local) / denom), 1e-300));
    dlogits.row(row) = (ex / denom).transpose() / static_cast<S>(count);
    dlogits(row, local) -= S(1) / static_cast<S>(count);
  }

  backward(cache, dlogits);
  return loss / count;
}

template <typename S>
void StageModelT<S>::Decoder::reset(const StageModelT& m) {
  model = &m;
  k_cache.assign(static_cast<size_t>(m.cfg.layers), Mat(0, m.cfg.model_dim));
  v_cache.assign(static_cast<size_t>(m.cfg.layers), Mat(0, m.cfg.model_dim));
  pos = 0;
}

namespace detail {

template <typename S>
VecX<S> layer_norm_row(const VecX<S>& x, const MatX<S>& gamma, const MatX<S>& beta) {
  const long d = x.size();
  const S mean = x.mean();
  VecX<S> c = x.array() - mean;
  const S var = c.squaredNorm() / static_cast<S>(d);
  const S r = S(1) / std::sqrt(var + S(1e-5));
  return (c * r).cwiseProduct(gamma.col(0)) + beta.col(0);
}

}  // namespace detail

template <typename S>
typename StageModelT<S>::Vec StageModelT<S>::Decoder::step_row(const Vec& x0_row) {
  const StageModelT& m = *model;
  require(pos + 1 <= m.cfg.max_seq_len, "decoder: sequence exceeds max_seq_len");
  const int heads = m.cfg.heads;
  const int dh = m.cfg.model_dim / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  Vec x = x0_row;
  for (int li = 0; li < m.cfg.layers; ++li) {
    const Layer& L = m.layers[static_cast<size_t>(li)];
    Vec a = detail::layer_norm_row<S>(x, L.ln1_g.v, L.ln1_b.v);
    Vec q = L.wq.v.transpose() * a;
    Vec k = L.wk.v.transpose() * a;
    Vec v = L.wv.v.transpose() * a;
    Mat& kc = k_cache[static_cast<size_t>(li)];
    Mat& vc = v_cache[static_cast<size_t>(li)];
    kc.conservativeResize(pos + 1, Eigen::NoChange);
    vc.conservativeResize(pos + 1, Eigen::NoChange);
    kc.row(pos) = k.transpose();
    vc.row(pos) = v.transpose();

    Vec concat(m.cfg.model_dim);
    for (int h = 0; h < heads; ++h) {
      Vec qh = q.segment(h * dh, dh);
      Vec scores(pos + 1);
      for (int j = 0; j <= pos; ++j) {
        scores(j) = qh.dot(kc.row(j).segment(h * dh, dh)) * scale +
                    m.rel_bias.v(h, relative_bucket(pos - j, m.cfg.rel_buckets,
                                                    m.cfg.rel_max_dist));
      }
      const S mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp();
      scores /= scores.sum();
      Vec out = Vec::Zero(dh);
      for (int j = 0; j <= pos; ++j) out += scores(j) * vc.row(j).segment(h * dh, dh).transpose();
      concat.segment(h * dh, dh) = out;
    }
    x += L.wo.v.transpose() * concat;

    Vec f_in = detail::layer_norm_row<S>(x, L.ln2_g.v, L.ln2_b.v);
    Vec hpre = L.w1.v.transpose() * f_in + L.b1.v.col(0);
    Vec h = hpre.unaryExpr([](S t) { return detail::gelu(t); });
    x += L.w2.v.transpose() * h + L.b2.v.col(0);
  }
  Vec xf = detail::layer_norm_row<S>(x, m.lnf_g.v, m.lnf_b.v);
  ++pos;
  return m.w_out.v.transpose() * xf + m.b_out.v.col(0);
}

template <typename S>
typename StageModelT<S>::Vec StageModelT<S>::Decoder::step_token(int32_t id) {
  require(id >= 0 && id < model->layout.input_vocab, "decoder: id out of vocab");
  return step_row(model->embed.v.row(id).transpose());
}

template <typename S>
typename StageModelT<S>::Vec StageModelT<S>::Decoder::prefill(
    const std::vector<int32_t>& ids, const std::vector<int>* prefix_word_ids) {
  const StageModelT& m = *model;
  Cache cache;
  Mat logits = m.forward(ids, &cache, prefix_word_ids, nullptr);
  for (int li = 0; li < m.cfg.layers; ++li) {
    k_cache[static_cast<size_t>(li)] = cache.layer[static_cast<size_t>(li)].k;
    v_cache[static_cast<size_t>(li)] = cache.layer[static_cast<size_t>(li)].v;
  }
  pos = cache.n;
  return logits.row(cache.n - 1).transpose();
}

}  // namespace musegen
