#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "musegen/audio.hpp"

namespace musegen {

// 12-TET scale rooted at 220 Hz, pitch indices 0..24 (two octaves).
constexpr double kScaleRootHz = 220.0;
constexpr int kScaleMaxIndex = 24;

struct ClipSpec {
  std::vector<int> melody;  // pitch indices into the fixed scale
  double tempo_bpm = 120.0;
  int timbre_id = 0;
  std::string genre_tag;
  double noise_level = 0.0;  // in [0, 1]
  uint64_t seed = 0;

  void validate() const;
};

struct Timbre {
  std::string name;
  std::vector<double> harmonics;  // relative weights, fundamental first
};

const std::vector<Timbre>& timbre_table();

// Tempo buckets used for captions: slow < 92 <= medium < 128 <= fast.
std::string tempo_bucket(double bpm);

double pitch_hz(int scale_index);

struct CaptionedClip {
  AudioClip clip;
  std::string caption;
  std::vector<std::string> aspects;  // sorted, unique
};

// Deterministic render: one melody note per beat (cycling), a normalized
// overtone stack per note with short edge ramps, plus seeded uniform noise
// scaled by noise_level. Samples clipped to [-1, 1].
AudioClip render_clip(const ClipSpec& spec, double duration_s, int sample_rate);

// Caption template over (genre, tempo bucket, timbre name). Depends only on
// those tags, never on the seed or melody.
void caption_for(const ClipSpec& spec, std::string& caption, std::vector<std::string>& aspects);
CaptionedClip captioned_clip(const ClipSpec& spec, double duration_s, int sample_rate);

// Genre profiles drive the correlations between captions and audio.
struct GenreProfile {
  std::string name;
  double tempo_lo, tempo_hi;
  std::vector<int> timbres;
  double noise_lo, noise_hi;
  int melody_len_lo, melody_len_hi;
};

const std::vector<GenreProfile>& genre_table();
const GenreProfile& genre_profile(const std::string& name);

struct CorpusConfig {
  int clip_count = 500;
  double duration_s = 8.0;
  int sample_rate = 8000;
  std::map<std::string, double> genre_weights = {
      {"ambient", 0.25}, {"folk", 0.25}, {"techno", 0.25}, {"chiptune", 0.25}};
  uint64_t master_seed = 1;
};

struct ClipRecord {
  int id = 0;
  ClipSpec spec;
  std::string caption;
  std::vector<std::string> aspects;
  std::string file;  // relative wav path
};

struct CorpusManifest {
  CorpusConfig config;
  std::vector<ClipRecord> clips;
};

// Deterministic spec for clip i of a corpus (stratified genre assignment,
// per-clip derived seed). Exposed so melody-pair datasets can re-render specs.
ClipSpec corpus_clip_spec(const CorpusConfig& cfg, int index);
std::vector<std::string> stratified_genres(const CorpusConfig& cfg);

// Writes wav/ clip files plus manifest.json; returns the manifest.
// Rebuilding with the same config is bit-identical.
CorpusManifest build_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir);

CorpusManifest load_corpus_manifest(const std::filesystem::path& corpus_dir);
AudioClip load_corpus_clip(const std::filesystem::path& corpus_dir, const ClipRecord& rec);

}  // namespace musegen
