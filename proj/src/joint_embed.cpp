#include "musegen/joint_embed.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "musegen/artifact_io.hpp"
#include "musegen/errors.hpp"
#include "musegen/features.hpp"
#include "musegen/rng.hpp"

namespace musegen {

namespace {

Eigen::MatrixXd random_matrix(long rows, long cols, double stddev, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, stddev);
  return m;
}

Eigen::VectorXd normalize_row(const Eigen::VectorXd& x, double* norm_out = nullptr) {
  double r = x.norm();
  if (r < 1e-12) r = 1e-12;
  if (norm_out) *norm_out = r;
  return x / r;
}

// d(x/r)/dx applied to upstream gradient: (g - y (y.g)) / r.
Eigen::VectorXd normalize_backward(const Eigen::VectorXd& y, double r, const Eigen::VectorXd& g) {
  return (g - y * y.dot(g)) / r;
}

struct Mlp2Grad {
  Eigen::MatrixXd w1, w2;
  Eigen::VectorXd b1, b2;

  explicit Mlp2Grad(const Mlp2& m)
      : w1(Eigen::MatrixXd::Zero(m.w1.rows(), m.w1.cols())),
        w2(Eigen::MatrixXd::Zero(m.w2.rows(), m.w2.cols())),
        b1(Eigen::VectorXd::Zero(m.b1.size())),
        b2(Eigen::VectorXd::Zero(m.b2.size())) {}

  void step(Mlp2& m, double lr) {
    m.w1 -= lr * w1;
    m.b1 -= lr * b1;
    m.w2 -= lr * w2;
    m.b2 -= lr * b2;
    w1.setZero();
    b1.setZero();
    w2.setZero();
    b2.setZero();
  }
};

struct Mlp2Cache {
  Eigen::MatrixXd x, hpre, h, y;
};

Eigen::MatrixXd mlp_forward_cached(const Mlp2& m, const Eigen::MatrixXd& x, Mlp2Cache& c) {
  c.x = x;
  c.hpre = (x * m.w1.transpose()).rowwise() + m.b1.transpose();
  c.h = c.hpre.cwiseMax(0.0);
  c.y = (c.h * m.w2.transpose()).rowwise() + m.b2.transpose();
  return c.y;
}

// Returns gradient w.r.t. the input rows.
Eigen::MatrixXd mlp_backward(const Mlp2& m, const Mlp2Cache& c, const Eigen::MatrixXd& dy,
                             Mlp2Grad& g) {
  g.w2 += dy.transpose() * c.h;
  g.b2 += dy.colwise().sum().transpose();
  Eigen::MatrixXd dh = dy * m.w2;
  dh.array() *= (c.hpre.array() > 0.0).cast<double>();
  g.w1 += dh.transpose() * c.x;
  g.b1 += dh.colwise().sum().transpose();
  return dh * m.w1;
}

}  // namespace

Mlp2 Mlp2::init(int in, int hidden, int out, uint64_t seed) {
  Rng rng(seed);
  Mlp2 m;
  m.w1 = random_matrix(hidden, in, std::sqrt(2.0 / in), rng);
  m.b1 = Eigen::VectorXd::Zero(hidden);
  m.w2 = random_matrix(out, hidden, std::sqrt(2.0 / hidden), rng);
  m.b2 = Eigen::VectorXd::Zero(out);
  return m;
}

Eigen::MatrixXd Mlp2::forward(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd h = ((x * w1.transpose()).rowwise() + b1.transpose()).cwiseMax(0.0);
  return (h * w2.transpose()).rowwise() + b2.transpose();
}

WordVocab WordVocab::build(const std::vector<std::string>& captions) {
  WordVocab v;
  for (const auto& c : captions) {
    std::string word;
    std::istringstream is(c);
    while (is >> word) {
      std::transform(word.begin(), word.end(), word.begin(),
                     [](unsigned char ch) { return std::tolower(ch); });
      if (v.index.emplace(word, static_cast<int>(v.words.size())).second) v.words.push_back(word);
    }
  }
  return v;
}

std::vector<int> WordVocab::tokenize(const std::string& text) const {
  std::vector<int> ids;
  std::string word;
  std::istringstream is(text);
  while (is >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char ch) { return std::tolower(ch); });
    auto it = index.find(word);
    if (it != index.end()) ids.push_back(it->second);
  }
  return ids;
}

Eigen::MatrixXd JointEmbedModel::pooled_windows(const AudioClip& clip) const {
  FeatureSequence fs = frame_features(clip, cfg.feature_rate, cfg.feature_dim);
  return pool_window(fs, cfg.window_s, cfg.stride_s);
}

Eigen::VectorXd JointEmbedModel::embed_windows(const Eigen::MatrixXd& pooled) const {
  require(pooled.rows() >= 1, "embed_audio: clip spans less than one window");
  Eigen::MatrixXd y = audio_tower.forward(input_std.apply(pooled));
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(y.cols());
  for (long i = 0; i < y.rows(); ++i) mean += normalize_row(y.row(i).transpose());
  mean /= static_cast<double>(y.rows());
  return normalize_row(mean);
}

Eigen::VectorXd JointEmbedModel::embed_audio(const AudioClip& clip) const {
  return embed_windows(pooled_windows(clip));
}

Eigen::VectorXd JointEmbedModel::embed_text(const std::string& caption) const {
  std::vector<int> ids = vocab.tokenize(caption);
  require(!ids.empty(), "embed_text: caption has no known words");
  Eigen::VectorXd bag = Eigen::VectorXd::Zero(word_embed.cols());
  for (int id : ids) bag += word_embed.row(id).transpose();
  bag /= static_cast<double>(ids.size());
  return normalize_row(text_tower.forward(bag.transpose()).row(0).transpose());
}

JointEmbedModel train_contrastive(const std::vector<ContrastiveItem>& items,
                                  const JointEmbedConfig& cfg, ContrastiveStats* stats) {
  require(static_cast<int>(items.size()) >= cfg.batch + cfg.holdout,
          "train_contrastive: corpus smaller than batch + holdout");
  const int n_train = static_cast<int>(items.size()) - cfg.holdout;

  JointEmbedModel model;
  model.cfg = cfg;
  {
    std::vector<std::string> caps;
    caps.reserve(items.size());
    for (const auto& it : items) caps.push_back(it.caption);
    model.vocab = WordVocab::build(caps);
  }
  Rng rng(cfg.seed);
  model.word_embed = random_matrix(static_cast<long>(model.vocab.words.size()), cfg.d_e,
                                   1.0 / std::sqrt(cfg.d_e), rng);
  model.audio_tower = Mlp2::init(cfg.feature_dim, cfg.hidden, cfg.d_e, rng.next_u64());
  model.text_tower = Mlp2::init(cfg.d_e, cfg.hidden, cfg.d_e, rng.next_u64());

  std::vector<std::vector<int>> word_ids(items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    word_ids[i] = model.vocab.tokenize(items[i].caption);
    require(!word_ids[i].empty(), "train_contrastive: caption has no words");
    require(items[i].pooled.rows() >= 1, "train_contrastive: clip has no pooled windows");
  }

  // Standardize pooled inputs with statistics from the training split.
  {
    long total = 0;
    for (int i = 0; i < n_train; ++i) total += items[static_cast<size_t>(i)].pooled.rows();
    Eigen::MatrixXd stacked(total, cfg.feature_dim);
    long at = 0;
    for (int i = 0; i < n_train; ++i) {
      stacked.middleRows(at, items[static_cast<size_t>(i)].pooled.rows()) =
          items[static_cast<size_t>(i)].pooled;
      at += items[static_cast<size_t>(i)].pooled.rows();
    }
    model.input_std = Standardizer::fit(stacked);
  }
  std::vector<Eigen::MatrixXd> pooled_std(items.size());
  for (size_t i = 0; i < items.size(); ++i)
    pooled_std[i] = model.input_std.apply(items[i].pooled);

  const int B = cfg.batch;
  std::vector<int> order(static_cast<size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);

  Mlp2Grad g_audio(model.audio_tower), g_text(model.text_tower);
  Eigen::MatrixXd g_words = Eigen::MatrixXd::Zero(model.word_embed.rows(), model.word_embed.cols());

  ContrastiveStats local;
  ContrastiveStats& st = stats ? *stats : local;
  st.epoch_loss.clear();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (int b0 = 0; b0 + B <= n_train; b0 += B) {
      // Forward: audio side.
      std::vector<Mlp2Cache> a_caches(static_cast<size_t>(B));
      std::vector<Eigen::MatrixXd> a_rows_norm(static_cast<size_t>(B));
      std::vector<Eigen::VectorXd> a_row_norms(static_cast<size_t>(B));
      Eigen::MatrixXd A(B, cfg.d_e);
      std::vector<double> a_mean_norm(static_cast<size_t>(B));
      for (int i = 0; i < B; ++i) {
        const auto& item_pooled = pooled_std[static_cast<size_t>(order[static_cast<size_t>(b0 + i)])];
        Eigen::MatrixXd y = mlp_forward_cached(model.audio_tower, item_pooled,
                                               a_caches[static_cast<size_t>(i)]);
        Eigen::MatrixXd yn(y.rows(), y.cols());
        Eigen::VectorXd rn(y.rows());
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(y.cols());
        for (long r = 0; r < y.rows(); ++r) {
          double nr;
          yn.row(r) = normalize_row(y.row(r).transpose(), &nr).transpose();
          rn(r) = nr;
          mean += yn.row(r).transpose();
        }
        mean /= static_cast<double>(y.rows());
        double mr;
        A.row(i) = normalize_row(mean, &mr).transpose();
        a_rows_norm[static_cast<size_t>(i)] = yn;
        a_row_norms[static_cast<size_t>(i)] = rn;
        a_mean_norm[static_cast<size_t>(i)] = mr;
      }
      // Forward: text side.
      std::vector<Mlp2Cache> t_caches(static_cast<size_t>(B));
      Eigen::MatrixXd T(B, cfg.d_e);
      std::vector<double> t_norm(static_cast<size_t>(B));
      std::vector<Eigen::VectorXd> bags(static_cast<size_t>(B));
      for (int i = 0; i < B; ++i) {
        const auto& ids = word_ids[static_cast<size_t>(order[static_cast<size_t>(b0 + i)])];
        Eigen::VectorXd bag = Eigen::VectorXd::Zero(cfg.d_e);
        for (int id : ids) bag += model.word_embed.row(id).transpose();
        bag /= static_cast<double>(ids.size());
        bags[static_cast<size_t>(i)] = bag;
        Eigen::MatrixXd y =
            mlp_forward_cached(model.text_tower, bag.transpose(), t_caches[static_cast<size_t>(i)]);
        double nr;
        T.row(i) = normalize_row(y.row(0).transpose(), &nr).transpose();
        t_norm[static_cast<size_t>(i)] = nr;
      }

      // Symmetric InfoNCE.
      Eigen::MatrixXd logits = A * T.transpose() / cfg.temperature;
      Eigen::MatrixXd p_row(B, B), p_col(B, B);
      for (int i = 0; i < B; ++i) {
        Eigen::VectorXd row = logits.row(i).transpose();
        row = (row.array() - row.maxCoeff()).exp();
        p_row.row(i) = (row / row.sum()).transpose();
      }
      for (int j = 0; j < B; ++j) {
        Eigen::VectorXd col = logits.col(j);
        col = (col.array() - col.maxCoeff()).exp();
        p_col.col(j) = col / col.sum();
      }
      double loss = 0.0;
      for (int i = 0; i < B; ++i)
        loss += -std::log(std::max(p_row(i, i), 1e-300)) - std::log(std::max(p_col(i, i), 1e-300));
      loss /= 2.0 * B;
      if (!std::isfinite(loss))
        throw NumericError("train_contrastive: non-finite loss at epoch " + std::to_string(epoch));
      epoch_loss += loss;
      ++batches;
      if (epoch == 0 && batches == 1) st.initial_loss = loss;

      Eigen::MatrixXd dlogits = (p_row + p_col) / (2.0 * B);
      for (int i = 0; i < B; ++i) dlogits(i, i) -= 1.0 / B;
      Eigen::MatrixXd dA = dlogits * T / cfg.temperature;
      Eigen::MatrixXd dT = dlogits.transpose() * A / cfg.temperature;

      // Backward: audio side.
      for (int i = 0; i < B; ++i) {
        Eigen::VectorXd da = normalize_backward(A.row(i).transpose(),
                                                a_mean_norm[static_cast<size_t>(i)],
                                                dA.row(i).transpose());
        const auto& yn = a_rows_norm[static_cast<size_t>(i)];
        const auto& rn = a_row_norms[static_cast<size_t>(i)];
        Eigen::MatrixXd dy(yn.rows(), yn.cols());
        for (long r = 0; r < yn.rows(); ++r)
          dy.row(r) = normalize_backward(yn.row(r).transpose(), rn(r),
                                         da / static_cast<double>(yn.rows()))
                          .transpose();
        mlp_backward(model.audio_tower, a_caches[static_cast<size_t>(i)], dy, g_audio);
      }
      // Backward: text side.
      for (int i = 0; i < B; ++i) {
        Eigen::VectorXd dt = normalize_backward(T.row(i).transpose(),
                                                t_norm[static_cast<size_t>(i)],
                                                dT.row(i).transpose());
        Eigen::MatrixXd dbag = mlp_backward(model.text_tower, t_caches[static_cast<size_t>(i)],
                                            dt.transpose(), g_text);
        const auto& ids = word_ids[static_cast<size_t>(order[static_cast<size_t>(b0 + i)])];
        for (int id : ids)
          g_words.row(id) += dbag.row(0) / static_cast<double>(ids.size());
      }

      g_audio.step(model.audio_tower, cfg.lr);
      g_text.step(model.text_tower, cfg.lr);
      model.word_embed -= cfg.lr * g_words;
      g_words.setZero();
    }
    if (batches > 0) st.epoch_loss.push_back(epoch_loss / batches);
  }
  if (!st.epoch_loss.empty()) st.final_loss = st.epoch_loss.back();

  // Held-out retrieval: text -> nearest audio, hit when captions match.
  if (cfg.holdout >= 2) {
    const int h0 = n_train;
    const int H = cfg.holdout;
    Eigen::MatrixXd A(H, cfg.d_e), T(H, cfg.d_e);
    for (int i = 0; i < H; ++i) {
      A.row(i) = model.embed_windows(items[static_cast<size_t>(h0 + i)].pooled).transpose();
      T.row(i) = model.embed_text(items[static_cast<size_t>(h0 + i)].caption).transpose();
    }
    Eigen::MatrixXd sim = T * A.transpose();
    int hits = 0;
    double chance = 0.0;
    for (int i = 0; i < H; ++i) {
      int best;
      sim.row(i).maxCoeff(&best);
      if (items[static_cast<size_t>(h0 + best)].caption ==
          items[static_cast<size_t>(h0 + i)].caption)
        ++hits;
      int same = 0;
      for (int j = 0; j < H; ++j)
        if (items[static_cast<size_t>(h0 + j)].caption ==
            items[static_cast<size_t>(h0 + i)].caption)
          ++same;
      chance += static_cast<double>(same) / H;
    }
    st.holdout_top1 = static_cast<double>(hits) / H;
    st.holdout_chance = chance / H;
  }
  return model;
}

TokenSequence conditioning_tokens_audio(const JointEmbedModel& m, const RvqCodebook& cond_rvq,
                                        const AudioClip& clip) {
  Eigen::VectorXd e = m.embed_audio(clip);
  return cond_rvq.encode_sequence(e.transpose(), TokenKind::conditioning, 0.0);
}

TokenSequence conditioning_tokens_text(const JointEmbedModel& m, const RvqCodebook& cond_rvq,
                                       const std::string& caption) {
  Eigen::VectorXd e = m.embed_text(caption);
  return cond_rvq.encode_sequence(e.transpose(), TokenKind::conditioning, 0.0);
}

namespace {
constexpr const char* kJointType = "JEMBED";
constexpr const char* kMelodyType = "MELEMB";

void save_mlp(ArtifactWriter& w, const std::string& prefix, const Mlp2& m) {
  w.add_f64(prefix + ".w1", m.w1);
  w.add_f64(prefix + ".b1", m.b1);
  w.add_f64(prefix + ".w2", m.w2);
  w.add_f64(prefix + ".b2", m.b2);
}

Mlp2 load_mlp(const ArtifactReader& r, const std::string& prefix) {
  Mlp2 m;
  m.w1 = r.f64(prefix + ".w1");
  m.b1 = r.f64_vector(prefix + ".b1");
  m.w2 = r.f64(prefix + ".w2");
  m.b2 = r.f64_vector(prefix + ".b2");
  return m;
}

}  // namespace

void JointEmbedModel::save(const std::filesystem::path& path) const {
  ArtifactWriter w(kJointType, 1);
  std::string joined;
  for (const auto& word : vocab.words) {
    joined += word;
    joined += '\n';
  }
  w.add_string("vocab", joined);
  w.add_f64("word_embed", word_embed);
  w.add_f64("input_mean", input_std.mean);
  w.add_f64("input_std", input_std.stddev);
  save_mlp(w, "audio", audio_tower);
  save_mlp(w, "text", text_tower);
  w.add_scalar("feature_dim", cfg.feature_dim);
  w.add_scalar("feature_rate", cfg.feature_rate);
  w.add_scalar("window_s", cfg.window_s);
  w.add_scalar("stride_s", cfg.stride_s);
  w.add_scalar("d_e", cfg.d_e);
  w.add_scalar("hidden", cfg.hidden);
  w.add_scalar("temperature", cfg.temperature);
  w.save(path);
}

JointEmbedModel JointEmbedModel::load(const std::filesystem::path& path) {
  ArtifactReader r(path, kJointType, 1);
  JointEmbedModel m;
  std::istringstream vs(r.str("vocab"));
  std::string word;
  while (std::getline(vs, word))
    if (!word.empty()) {
      m.vocab.index.emplace(word, static_cast<int>(m.vocab.words.size()));
      m.vocab.words.push_back(word);
    }
  m.word_embed = r.f64("word_embed");
  m.input_std.mean = r.f64_vector("input_mean");
  m.input_std.stddev = r.f64_vector("input_std");
  m.audio_tower = load_mlp(r, "audio");
  m.text_tower = load_mlp(r, "text");
  m.cfg.feature_dim = static_cast<int>(r.scalar("feature_dim"));
  m.cfg.feature_rate = r.scalar("feature_rate");
  m.cfg.window_s = r.scalar("window_s");
  m.cfg.stride_s = r.scalar("stride_s");
  m.cfg.d_e = static_cast<int>(r.scalar("d_e"));
  m.cfg.hidden = static_cast<int>(r.scalar("hidden"));
  m.cfg.temperature = r.scalar("temperature");
  return m;
}

// ---- Melody tower ----

Eigen::MatrixXd MelodyEmbedModel::pooled_windows(const AudioClip& clip) const {
  FeatureSequence fs = frame_features(clip, cfg.feature_rate, cfg.feature_dim);
  return pool_window(fs, cfg.window_s, cfg.hop_s);
}

Eigen::MatrixXd MelodyEmbedModel::embed_pooled(const Eigen::MatrixXd& pooled) const {
  Eigen::MatrixXd y = encoder.forward(input_std.apply(pooled));
  for (long r = 0; r < y.rows(); ++r) y.row(r) = normalize_row(y.row(r).transpose()).transpose();
  return y;
}

Eigen::MatrixXd MelodyEmbedModel::window_embeddings(const AudioClip& clip) const {
  return embed_pooled(pooled_windows(clip));
}

int select_triplet_negative(const Eigen::VectorXd& negative_d2, double d_ap, double margin) {
  int semi = -1, hard = -1;
  double semi_best = std::numeric_limits<double>::infinity();
  double hard_best = -std::numeric_limits<double>::infinity();
  for (long i = 0; i < negative_d2.size(); ++i) {
    const double d = negative_d2(i);
    if (d > d_ap && d < d_ap + margin && d < semi_best) {
      semi_best = d;
      semi = static_cast<int>(i);
    }
    if (d <= d_ap && d > hard_best) {
      hard_best = d;
      hard = static_cast<int>(i);
    }
  }
  if (semi >= 0) return semi;
  return hard;  // -1 when every negative is already beyond the margin
}

MelodyEmbedModel train_melody(const std::vector<MelodyWindowExample>& examples,
                              const MelodyEmbedConfig& cfg, TripletStats* stats) {
  require(!examples.empty(), "train_melody: empty example set");

  // Group by class; keep classes with at least two variants.
  std::map<int, std::vector<int>> by_class;
  for (size_t i = 0; i < examples.size(); ++i)
    by_class[examples[i].class_id].push_back(static_cast<int>(i));
  std::vector<std::vector<int>> classes;
  for (auto& [cid, members] : by_class)
    if (members.size() >= 2) classes.push_back(members);
  require(classes.size() >= 2, "train_melody: need at least two classes with pairs");

  MelodyEmbedModel model;
  model.cfg = cfg;
  Rng rng(cfg.seed);
  model.encoder = Mlp2::init(cfg.feature_dim, cfg.hidden, cfg.d_m, rng.next_u64());
  {
    Eigen::MatrixXd stacked(static_cast<long>(examples.size()), cfg.feature_dim);
    for (size_t i = 0; i < examples.size(); ++i)
      stacked.row(static_cast<long>(i)) = examples[i].pooled.transpose();
    model.input_std = Standardizer::fit(stacked);
  }

  TripletStats local;
  TripletStats& st = stats ? *stats : local;

  Mlp2Grad grad(model.encoder);
  std::vector<int> class_order(classes.size());
  std::iota(class_order.begin(), class_order.end(), 0);

  const int CB = std::min<int>(cfg.batch_classes, static_cast<int>(classes.size()));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(class_order);
    double epoch_loss = 0.0;
    int active_batches = 0;
    for (size_t c0 = 0; c0 + static_cast<size_t>(CB) <= class_order.size();
         c0 += static_cast<size_t>(CB)) {
      // Two members per class.
      std::vector<int> chosen;
      std::vector<int> cls;
      for (int c = 0; c < CB; ++c) {
        const auto& members = classes[static_cast<size_t>(class_order[c0 + static_cast<size_t>(c)])];
        int a = static_cast<int>(rng.randint(static_cast<int64_t>(members.size())));
        int b = static_cast<int>(rng.randint(static_cast<int64_t>(members.size() - 1)));
        if (b >= a) ++b;
        chosen.push_back(members[static_cast<size_t>(a)]);
        chosen.push_back(members[static_cast<size_t>(b)]);
        cls.push_back(c);
        cls.push_back(c);
      }
      const int n = static_cast<int>(chosen.size());
      Eigen::MatrixXd x(n, cfg.feature_dim);
      for (int i = 0; i < n; ++i)
        x.row(i) = examples[static_cast<size_t>(chosen[static_cast<size_t>(i)])].pooled.transpose();
      x = model.input_std.apply(x);

      Mlp2Cache cache;
      Eigen::MatrixXd y = mlp_forward_cached(model.encoder, x, cache);
      Eigen::MatrixXd e(n, cfg.d_m);
      Eigen::VectorXd rn(n);
      for (int i = 0; i < n; ++i) {
        double r;
        e.row(i) = normalize_row(y.row(i).transpose(), &r).transpose();
        rn(i) = r;
      }

      // Pairwise squared distances.
      Eigen::MatrixXd d2(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) d2(i, j) = (e.row(i) - e.row(j)).squaredNorm();

      Eigen::MatrixXd de = Eigen::MatrixXd::Zero(n, cfg.d_m);
      double batch_loss = 0.0;
      int active = 0;
      for (int a = 0; a < n; ++a) {
        const int p = (a % 2 == 0) ? a + 1 : a - 1;  // class partner
        const double d_ap = d2(a, p);
        std::vector<int> neg_idx;
        for (int j = 0; j < n; ++j)
          if (cls[static_cast<size_t>(j)] != cls[static_cast<size_t>(a)]) neg_idx.push_back(j);
        Eigen::VectorXd nd(static_cast<long>(neg_idx.size()));
        for (size_t j = 0; j < neg_idx.size(); ++j) nd(static_cast<long>(j)) = d2(a, neg_idx[j]);
        const int pick = select_triplet_negative(nd, d_ap, cfg.margin);
        if (pick < 0) continue;
        const int nidx = neg_idx[static_cast<size_t>(pick)];
        const double l = d_ap - d2(a, nidx) + cfg.margin;
        if (l <= 0.0) continue;
        batch_loss += l;
        ++active;
        Eigen::VectorXd ap = (e.row(a) - e.row(p)).transpose();
        Eigen::VectorXd an = (e.row(a) - e.row(nidx)).transpose();
        de.row(a) += 2.0 * (ap - an).transpose();
        de.row(p) += -2.0 * ap.transpose();
        de.row(nidx) += 2.0 * an.transpose();
      }
      ++st.total_batches;
      if (active == 0) {
        ++st.skipped_batches;
        continue;
      }
      de /= static_cast<double>(active);
      batch_loss /= static_cast<double>(active);
      if (!std::isfinite(batch_loss))
        throw NumericError("train_melody: non-finite loss in epoch " + std::to_string(epoch));
      epoch_loss += batch_loss;
      ++active_batches;

      Eigen::MatrixXd dy(n, cfg.d_m);
      for (int i = 0; i < n; ++i)
        dy.row(i) =
            normalize_backward(e.row(i).transpose(), rn(i), de.row(i).transpose()).transpose();
      mlp_backward(model.encoder, cache, dy, grad);
      grad.step(model.encoder, cfg.lr);
    }
    if (active_batches > 0) st.final_loss = epoch_loss / active_batches;
  }
  return model;
}

TokenSequence melody_tokens(const MelodyEmbedModel& m, const RvqCodebook& melody_rvq,
                            const AudioClip& clip) {
  Eigen::MatrixXd e = m.window_embeddings(clip);
  return melody_rvq.encode_sequence(e, TokenKind::melody, 1.0 / m.cfg.hop_s);
}

void MelodyEmbedModel::save(const std::filesystem::path& path) const {
  ArtifactWriter w(kMelodyType, 1);
  w.add_f64("input_mean", input_std.mean);
  w.add_f64("input_std", input_std.stddev);
  save_mlp(w, "enc", encoder);
  w.add_scalar("feature_dim", cfg.feature_dim);
  w.add_scalar("feature_rate", cfg.feature_rate);
  w.add_scalar("window_s", cfg.window_s);
  w.add_scalar("hop_s", cfg.hop_s);
  w.add_scalar("d_m", cfg.d_m);
  w.add_scalar("hidden", cfg.hidden);
  w.add_scalar("margin", cfg.margin);
  w.save(path);
}

MelodyEmbedModel MelodyEmbedModel::load(const std::filesystem::path& path) {
  ArtifactReader r(path, kMelodyType, 1);
  MelodyEmbedModel m;
  m.input_std.mean = r.f64_vector("input_mean");
  m.input_std.stddev = r.f64_vector("input_std");
  m.encoder = load_mlp(r, "enc");
  m.cfg.feature_dim = static_cast<int>(r.scalar("feature_dim"));
  m.cfg.feature_rate = r.scalar("feature_rate");
  m.cfg.window_s = r.scalar("window_s");
  m.cfg.hop_s = r.scalar("hop_s");
  m.cfg.d_m = static_cast<int>(r.scalar("d_m"));
  m.cfg.hidden = static_cast<int>(r.scalar("hidden"));
  m.cfg.margin = r.scalar("margin");
  return m;
}

}  // namespace musegen
