#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "musegen/audio.hpp"
#include "musegen/kmeans.hpp"
#include "musegen/rvq.hpp"
#include "musegen/tokens.hpp"

namespace musegen {

// Two-layer perceptron with max(0, .) hidden units. Batch rows in, rows out.
struct Mlp2 {
  Eigen::MatrixXd w1;  // hidden x in
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // out x hidden
  Eigen::VectorXd b2;

  static Mlp2 init(int in, int hidden, int out, uint64_t seed);
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;  // rows = examples
};

struct WordVocab {
  std::vector<std::string> words;
  std::map<std::string, int> index;

  static WordVocab build(const std::vector<std::string>& captions);
  // Lowercase whitespace tokens; unknown words dropped.
  std::vector<int> tokenize(const std::string& text) const;
};

struct JointEmbedConfig {
  int feature_dim = 16;
  double feature_rate = 50.0;
  double window_s = 4.0;
  double stride_s = 2.0;
  int d_e = 16;
  int hidden = 64;
  double temperature = 0.07;
  int batch = 32;
  int epochs = 200;
  double lr = 0.05;
  int holdout = 32;
  uint64_t seed = 7;
};

// Audio and text towers trained into a shared unit-norm embedding space.
// Pooled audio features are standardized (statistics fit on the training
// windows) before the audio tower.
struct JointEmbedModel {
  JointEmbedConfig cfg;
  WordVocab vocab;
  Standardizer input_std;
  Eigen::MatrixXd word_embed;  // V x d_e
  Mlp2 audio_tower;            // pooled features -> d_e
  Mlp2 text_tower;             // bag-of-words mean -> d_e

  // Window features -> tower -> per-window normalize -> average -> normalize.
  Eigen::VectorXd embed_audio(const AudioClip& clip) const;
  Eigen::VectorXd embed_windows(const Eigen::MatrixXd& pooled_windows) const;
  Eigen::VectorXd embed_text(const std::string& caption) const;

  // Pooled window rows for a clip under this model's analysis settings.
  Eigen::MatrixXd pooled_windows(const AudioClip& clip) const;

  void save(const std::filesystem::path& path) const;
  static JointEmbedModel load(const std::filesystem::path& path);
};

struct ContrastiveItem {
  Eigen::MatrixXd pooled;  // window rows for one clip
  std::string caption;
};

struct ContrastiveStats {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_loss;
  // Text->audio retrieval over the held-out tail; a hit is a retrieved clip
  // with the same caption (captions are templated, so exact-index matching
  // would undercount duplicates).
  double holdout_top1 = 0.0;
  double holdout_chance = 0.0;
};

// Symmetric in-batch softmax contrastive training (cosine / temperature).
// The last cfg.holdout items are excluded from training and used for the
// retrieval check. Throws NumericError on non-finite loss.
JointEmbedModel train_contrastive(const std::vector<ContrastiveItem>& items,
                                  const JointEmbedConfig& cfg,
                                  ContrastiveStats* stats = nullptr);

// Embed (audio or text path) and quantize with the shared conditioning RVQ.
TokenSequence conditioning_tokens_audio(const JointEmbedModel& m, const RvqCodebook& cond_rvq,
                                        const AudioClip& clip);
TokenSequence conditioning_tokens_text(const JointEmbedModel& m, const RvqCodebook& cond_rvq,
                                       const std::string& caption);

// ---- Melody tower ----

struct MelodyEmbedConfig {
  int feature_dim = 16;
  double feature_rate = 50.0;
  double window_s = 1.0;
  double hop_s = 0.5;
  int d_m = 16;
  int hidden = 64;
  double margin = 0.2;
  int batch_classes = 16;  // classes per batch, two variants each
  int epochs = 25;
  double lr = 0.05;
  uint64_t seed = 11;
};

struct MelodyEmbedModel {
  MelodyEmbedConfig cfg;
  Standardizer input_std;
  Mlp2 encoder;

  // One unit-norm embedding per (window_s, hop_s) window.
  Eigen::MatrixXd window_embeddings(const AudioClip& clip) const;
  Eigen::MatrixXd embed_pooled(const Eigen::MatrixXd& pooled_windows) const;
  Eigen::MatrixXd pooled_windows(const AudioClip& clip) const;

  void save(const std::filesystem::path& path) const;
  static MelodyEmbedModel load(const std::filesystem::path& path);
};

struct MelodyWindowExample {
  Eigen::VectorXd pooled;
  int class_id = 0;  // same melody segment under different timbre/noise
};

struct TripletStats {
  int total_batches = 0;
  int skipped_batches = 0;
  double final_loss = 0.0;
};

// Distances are squared Euclidean. Returns the index into `negatives` of the
// semi-hard pick (d_ap < d_an < d_ap + margin, smallest d_an), else the
// least-hard violating negative, else -1 when every negative is beyond the
// margin (anchor inactive).
int select_triplet_negative(const Eigen::VectorXd& negative_d2, double d_ap, double margin);

MelodyEmbedModel train_melody(const std::vector<MelodyWindowExample>& examples,
                              const MelodyEmbedConfig& cfg, TripletStats* stats = nullptr);

// One RVQ code row per melody window.
TokenSequence melody_tokens(const MelodyEmbedModel& m, const RvqCodebook& melody_rvq,
                            const AudioClip& clip);

}  // namespace musegen
