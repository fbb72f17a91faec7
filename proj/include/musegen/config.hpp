#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "musegen/joint_embed.hpp"
#include "musegen/lm_stages.hpp"
#include "musegen/memorization.hpp"
#include "musegen/metrics.hpp"
#include "musegen/pipeline.hpp"
#include "musegen/synth_corpus.hpp"

namespace musegen {

struct StageSection {
  int batch = 8;
  int steps = 300;
  double lr = 0.5;
  int warmup_steps = 30;
  double dropout = 0.0;
  int crops_per_clip = 2;
};

// Full experiment configuration. Every numeric default is materialized on
// load; unknown keys are rejected; sub-seeds derive from master_seed.
struct ExperimentConfig {
  uint64_t master_seed = 20260810;

  CorpusConfig corpus;

  struct Features {
    double acoustic_rate = 50.0;
    double semantic_rate = 25.0;
    int dim = 16;
  } features;

  struct Kmeans {
    int k = 32;
    int train_vectors = 20000;
    int iters = 100;
  } kmeans;

  struct RvqSection {
    int levels = 8;
    int entries = 64;
    int train_vectors = 10000;
    int iters = 50;
  };
  RvqSection rvq_acoustic{8, 64, 10000, 50};
  RvqSection rvq_conditioning{12, 32, 10000, 50};
  RvqSection rvq_melody{4, 32, 6000, 50};

  JointEmbedConfig joint_embed;
  MelodyEmbedConfig melody_embed;
  int melody_pair_clips = 160;

  // Shared transformer architecture.
  struct Arch {
    int layers = 4;
    int heads = 4;
    int model_dim = 128;
    int ff_dim = 256;
    int max_seq_len = 512;
    int rel_buckets = 32;
    int rel_max_dist = 128;
  } arch;

  StageSection stage_semantic{16, 600, 0.5, 60, 0.0, 2};
  StageSection stage_coarse{8, 300, 0.5, 30, 0.0, 2};
  StageSection stage_fine{8, 200, 0.5, 20, 0.0, 2};
  StageSection stage_direct{8, 200, 0.5, 20, 0.0, 2};
  StageSection stage_encoder{8, 200, 0.5, 20, 0.0, 2};
  double semantic_melody_fraction = 0.5;

  PipelineConfig generation;

  ClassifierTrainConfig classifier;
  double classifier_min_accuracy = 0.8;

  MemorizationConfig memorization;

  // Derived helpers.
  PipelineConfig pipeline_config() const;
  StageConfig stage_config(StageKind kind) const;
  StageTrainConfig stage_train_config(StageKind kind) const;
  const StageSection& stage_section(StageKind kind) const;

  static ExperimentConfig defaults();
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string to_json_string() const;
};

// Reads models_dir/config.json (written by the training chain).
ExperimentConfig load_models_config(const std::filesystem::path& models_dir);

}  // namespace musegen
