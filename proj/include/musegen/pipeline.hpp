#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "musegen/audio.hpp"
#include "musegen/features.hpp"
#include "musegen/joint_embed.hpp"
#include "musegen/kmeans.hpp"
#include "musegen/lm_stages.hpp"
#include "musegen/metrics.hpp"
#include "musegen/rvq.hpp"
#include "musegen/synth_corpus.hpp"

namespace musegen {

// Rates, spans and token geometry shared across the whole pipeline.
struct PipelineConfig {
  int sample_rate = 8000;
  double acoustic_rate = 50.0;
  double semantic_rate = 25.0;
  int feature_dim = 16;
  TokenDims dims;

  double semantic_crop_s = 6.0;
  double acoustic_crop_s = 2.0;
  double fine_crop_s = 1.0;

  double long_stride_s = 3.0;
  double long_context_s = 3.0;
  double coarse_context_s = 1.0;
  double fine_hop_s = 0.5;
  double melody_window_s = 1.0;
  double melody_hop_s = 0.5;

  double temp_semantic = 1.0;
  double temp_coarse = 0.95;
  double temp_fine = 0.4;
};

// Oscillator-bank resynthesis: per-frame band energies drive sinusoids at
// the filterbank centers with Hann overlap-add. Gains are calibrated against
// unit-amplitude probe tones so re-analysis roughly recovers the energies.
class Resynthesizer {
 public:
  Resynthesizer(int sample_rate, double frame_rate, int dim);
  AudioClip synthesize(const Eigen::MatrixXd& log_band_energies) const;

 private:
  int sample_rate_;
  double frame_rate_;
  int hop_;
  Filterbank fb_;
  Eigen::VectorXd gain_;
};

struct ModelBundle {
  PipelineConfig pcfg;
  KmeansTokenizer semantic_tok;
  RvqCodebook acoustic_rvq;
  RvqCodebook cond_rvq;
  RvqCodebook melody_rvq;
  JointEmbedModel embed;
  MelodyEmbedModel melody;
  TagClassifier classifier;
  StageModel semantic_stage;
  StageModel coarse_stage;
  StageModel fine_stage;

  static ModelBundle load(const std::filesystem::path& models_dir);
};

// Per-clip token extraction used for stage training and audits.
struct TokenizedClip {
  TokenSequence cond;      // M_A, 1 x cond_levels
  TokenSequence semantic;  // frames x 1
  TokenSequence acoustic;  // frames x acoustic_levels
  TokenSequence melody;    // windows x melody_levels
};

struct Tokenizers {
  PipelineConfig pcfg;
  const KmeansTokenizer* semantic_tok;
  const RvqCodebook* acoustic_rvq;
  const RvqCodebook* cond_rvq;
  const RvqCodebook* melody_rvq;
  const JointEmbedModel* embed;
  const MelodyEmbedModel* melody;
};

TokenizedClip tokenize_clip(const Tokenizers& tk, const AudioClip& clip);

// ---- generation ----

struct GenerationRequest {
  // (switch time s, caption); a single entry for ordinary generation.
  std::vector<std::pair<double, std::string>> captions;
  std::optional<AudioClip> melody_clip;
  double total_s = 2.0;
  double temp_semantic = 1.0;
  double temp_coarse = 0.95;
  double temp_fine = 0.4;
  int cond_levels_semantic = 12;
  int cond_levels_coarse = 12;
  uint64_t seed = 0;
  // Testing hook: uniform-random conditioning tokens instead of M_T.
  bool random_conditioning = false;
};

struct ScheduleEntry {
  int step = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  int caption_index = 0;
};

struct GenerationResult {
  AudioClip audio;
  std::vector<TokenSequence> cond;  // M_T per caption
  TokenSequence semantic;
  TokenSequence coarse;
  TokenSequence fine;
  std::optional<TokenSequence> melody_tokens;
  std::vector<ScheduleEntry> schedule;
};

// total_s must not exceed the semantic training-crop span; longer requests
// go through generate_long / story_mode.
GenerationResult generate(const ModelBundle& b, const GenerationRequest& req);

// Iterative semantic continuation: context_s + stride_s must equal the
// semantic crop span, total must exceed it. Earlier tokens are preserved
// verbatim across steps.
GenerationResult generate_long(const ModelBundle& b, const GenerationRequest& req,
                               double stride_s, double context_s);

// generate_long with the conditioning swapped at stride boundaries.
GenerationResult story_mode(const ModelBundle& b, const GenerationRequest& req,
                            double stride_s);

GenerationResult generate_with_melody(const ModelBundle& b, const GenerationRequest& req);

// ---- variant decoding used by the ablation harness ----

AudioClip generate_direct(const ModelBundle& b, const StageModel& direct_stage,
                          const std::string& caption, double total_s, uint64_t seed,
                          int cond_levels = 12);
AudioClip generate_encoder_conditioned(const ModelBundle& b, const StageModel& enc_stage,
                                       const std::string& caption, double total_s,
                                       uint64_t seed);

// ---- stage dataset assembly ----

struct StageDatasetOptions {
  int crops_per_clip = 2;
  double melody_fraction = 0.5;  // semantic examples that include melody tokens
  uint64_t seed = 23;
};

std::vector<SequenceLayout> build_semantic_dataset(const std::vector<TokenizedClip>& clips,
                                                   const PipelineConfig& pcfg,
                                                   const StageDatasetOptions& opt);
std::vector<SequenceLayout> build_coarse_dataset(const std::vector<TokenizedClip>& clips,
                                                 const PipelineConfig& pcfg,
                                                 const StageDatasetOptions& opt);
std::vector<SequenceLayout> build_fine_dataset(const std::vector<TokenizedClip>& clips,
                                               const PipelineConfig& pcfg,
                                               const StageDatasetOptions& opt);
std::vector<SequenceLayout> build_direct_dataset(const std::vector<TokenizedClip>& clips,
                                                 const PipelineConfig& pcfg,
                                                 const StageDatasetOptions& opt);
std::vector<SequenceLayout> build_encoder_dataset(const std::vector<TokenizedClip>& clips,
                                                  const std::vector<std::string>& captions,
                                                  const WordVocab& vocab,
                                                  const PipelineConfig& pcfg,
                                                  const StageDatasetOptions& opt);

// ---- melody training data ----

// Renders each selected corpus spec under two timbres; windows of the two
// renders that share a (melody, window) slot form a class.
std::vector<MelodyWindowExample> build_melody_examples(const CorpusManifest& manifest,
                                                       const MelodyEmbedConfig& mcfg,
                                                       int first_clip, int clip_count);

// ---- evaluation harness ----

struct EvalOptions {
  int count = 64;
  double duration_s = 2.0;
  uint64_t seed = 29;
  bool random_conditioning = false;
  int cond_levels_semantic = 12;
  int cond_levels_coarse = 12;
};

struct EvalSet {
  std::vector<int> ref_ids;
  std::vector<std::string> captions;
  std::vector<AudioClip> generated;
  std::vector<AudioClip> reference;
};

EvalSet generate_eval_set(const ModelBundle& b, const CorpusManifest& manifest,
                          const std::filesystem::path& corpus_dir, const EvalOptions& opt);

struct MetricReport {
  double fad = 0.0;
  double kld = 0.0;
  double mcc = 0.0;
  int count = 0;
};

MetricReport evaluate_sets(const ModelBundle& b, const EvalSet& set);
void write_metric_report(const std::filesystem::path& path, const MetricReport& r);
MetricReport parse_metric_report(const std::filesystem::path& path);

// Dominant-band analysis sequence: argmax band per frame.
Eigen::VectorXi dominant_band_sequence(const AudioClip& clip, double frame_rate, int dim);
double pearson_correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace musegen
