#include "musegen/synth_corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "musegen/errors.hpp"
#include "musegen/rng.hpp"

namespace musegen {

using nlohmann::json;

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr const char* kManifestMagic = "MGCORPS";
constexpr int kManifestVersion = 1;
}  // namespace

void ClipSpec::validate() const {
  require(!melody.empty(), "clip spec: melody must be non-empty");
  for (int p : melody)
    require(p >= 0 && p <= kScaleMaxIndex, "clip spec: pitch index out of scale range");
  require(tempo_bpm > 0.0, "clip spec: tempo must be positive");
  require(noise_level >= 0.0 && noise_level <= 1.0, "clip spec: noise_level must be in [0,1]");
  require(timbre_id >= 0 && timbre_id < static_cast<int>(timbre_table().size()),
          "clip spec: unknown timbre id");
}

const std::vector<Timbre>& timbre_table() {
  static const std::vector<Timbre> table = {
      {"sine", {1.0}},
      {"square", {1.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 5.0, 0.0, 1.0 / 7.0}},
      {"saw", {1.0, 1.0 / 2.0, 1.0 / 3.0, 1.0 / 4.0, 1.0 / 5.0, 1.0 / 6.0}},
      {"bell", {1.0, 0.0, 0.6, 0.0, 0.0, 0.35}},
  };
  return table;
}

std::string tempo_bucket(double bpm) {
  if (bpm < 92.0) return "slow";
  if (bpm < 128.0) return "medium";
  return "fast";
}

double pitch_hz(int scale_index) {
  return kScaleRootHz * std::pow(2.0, scale_index / 12.0);
}

AudioClip render_clip(const ClipSpec& spec, double duration_s, int sample_rate) {
  spec.validate();
  require(duration_s > 0.0, "render_clip: duration must be positive");
  require(sample_rate >= 1, "render_clip: sample rate must be positive");

  const size_t n = static_cast<size_t>(std::floor(duration_s * sample_rate));
  require(n >= 1, "render_clip: duration too short for one sample");

  const Timbre& timbre = timbre_table()[static_cast<size_t>(spec.timbre_id)];
  const double wsum = std::accumulate(timbre.harmonics.begin(), timbre.harmonics.end(), 0.0);
  const double samples_per_note = sample_rate * 60.0 / spec.tempo_bpm;
  const double tone_gain = 0.9;
  const double nyquist = sample_rate / 2.0;

  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.resize(n);

  size_t note_begin = 0;
  for (size_t note = 0; note_begin < n; ++note) {
    size_t note_end = std::min(
        n, static_cast<size_t>(std::floor(static_cast<double>(note + 1) * samples_per_note)));
    if (note_end <= note_begin) note_end = note_begin + 1;
    const int pitch = spec.melody[note % spec.melody.size()];
    const double f0 = pitch_hz(pitch);
    const size_t len = note_end - note_begin;
    const size_t ramp = std::min<size_t>(static_cast<size_t>(0.01 * sample_rate), len / 4);
    for (size_t i = note_begin; i < note_end; ++i) {
      const double t = static_cast<double>(i) / sample_rate;
      double v = 0.0;
      for (size_t h = 0; h < timbre.harmonics.size(); ++h) {
        const double fh = f0 * static_cast<double>(h + 1);
        if (fh >= nyquist || timbre.harmonics[h] == 0.0) continue;
        v += timbre.harmonics[h] / wsum * std::sin(2.0 * kPi * fh * t);
      }
      double env = 1.0;
      const size_t off = i - note_begin;
      if (ramp > 0) {
        if (off < ramp) env = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(off) / ramp);
        const size_t tail = note_end - 1 - i;
        if (tail < ramp)
          env = std::min(env, 0.5 - 0.5 * std::cos(kPi * static_cast<double>(tail) / ramp));
      }
      clip.samples[i] = tone_gain * env * v;
    }
    note_begin = note_end;
  }

  if (spec.noise_level > 0.0) {
    Rng rng(spec.seed);
    for (size_t i = 0; i < n; ++i)
      clip.samples[i] += spec.noise_level * 0.5 * rng.uniform(-1.0, 1.0);
  }
  for (double& s : clip.samples) s = std::clamp(s, -1.0, 1.0);
  return clip;
}

void caption_for(const ClipSpec& spec, std::string& caption,
                 std::vector<std::string>& aspects) {
  spec.validate();
  const std::string bucket = tempo_bucket(spec.tempo_bpm);
  const std::string& timbre = timbre_table()[static_cast<size_t>(spec.timbre_id)].name;
  caption = "a " + bucket + " " + spec.genre_tag + " tune with a " + timbre + " timbre";
  aspects = {spec.genre_tag, bucket, timbre};
  std::sort(aspects.begin(), aspects.end());
  aspects.erase(std::unique(aspects.begin(), aspects.end()), aspects.end());
}

CaptionedClip captioned_clip(const ClipSpec& spec, double duration_s, int sample_rate) {
  CaptionedClip cc;
  cc.clip = render_clip(spec, duration_s, sample_rate);
  caption_for(spec, cc.caption, cc.aspects);
  return cc;
}

const std::vector<GenreProfile>& genre_table() {
  static const std::vector<GenreProfile> table = {
      {"ambient", 60.0, 90.0, {0, 3}, 0.00, 0.08, 4, 8},
      {"folk", 95.0, 125.0, {2, 3}, 0.00, 0.12, 4, 8},
      {"techno", 132.0, 168.0, {1, 2}, 0.10, 0.30, 4, 8},
      {"chiptune", 100.0, 160.0, {1, 0}, 0.00, 0.05, 4, 8},
  };
  return table;
}

const GenreProfile& genre_profile(const std::string& name) {
  for (const auto& g : genre_table())
    if (g.name == name) return g;
  throw ValidationError("unknown genre: " + name);
}

std::vector<std::string> stratified_genres(const CorpusConfig& cfg) {
  require(cfg.clip_count >= 0, "corpus: clip_count must be >= 0");
  require(!cfg.genre_weights.empty(), "corpus: genre distribution is empty");
  double wsum = 0.0;
  for (const auto& [name, w] : cfg.genre_weights) {
    genre_profile(name);  // validates the name
    require(w >= 0.0, "corpus: genre weight must be >= 0");
    wsum += w;
  }
  require(wsum > 0.0, "corpus: genre weights sum to zero");

  // Largest-remainder apportionment, then a seeded interleave so any
  // contiguous split covers all genres.
  std::vector<std::pair<std::string, double>> items(cfg.genre_weights.begin(),
                                                    cfg.genre_weights.end());
  std::vector<int> counts(items.size(), 0);
  std::vector<double> rema(items.size(), 0.0);
  int assigned = 0;
  for (size_t i = 0; i < items.size(); ++i) {
    double exact = items[i].second / wsum * cfg.clip_count;
    counts[i] = static_cast<int>(std::floor(exact));
    rema[i] = exact - counts[i];
    assigned += counts[i];
  }
  std::vector<size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return rema[a] > rema[b]; });
  for (int k = 0; assigned < cfg.clip_count; ++k, ++assigned) counts[order[k % order.size()]]++;

  std::vector<std::string> labels;
  labels.reserve(static_cast<size_t>(cfg.clip_count));
  for (size_t i = 0; i < items.size(); ++i)
    labels.insert(labels.end(), static_cast<size_t>(counts[i]), items[i].first);
  Rng rng(Rng::mix(cfg.master_seed, 0x67656e7265ULL));
  rng.shuffle(labels);
  return labels;
}

ClipSpec corpus_clip_spec(const CorpusConfig& cfg, int index) {
  require(index >= 0 && index < cfg.clip_count, "corpus: clip index out of range");
  static thread_local std::vector<std::string> cached_labels;
  static thread_local uint64_t cached_key = ~0ULL;
  const uint64_t key = Rng::mix(cfg.master_seed, static_cast<uint64_t>(cfg.clip_count));
  if (key != cached_key || cached_labels.size() != static_cast<size_t>(cfg.clip_count)) {
    cached_labels = stratified_genres(cfg);
    cached_key = key;
  }
  const GenreProfile& g = genre_profile(cached_labels[static_cast<size_t>(index)]);
  Rng rng(Rng::mix(cfg.master_seed, 1000003ULL + static_cast<uint64_t>(index)));
  ClipSpec spec;
  spec.genre_tag = g.name;
  spec.tempo_bpm = rng.uniform(g.tempo_lo, g.tempo_hi);
  spec.timbre_id = g.timbres[static_cast<size_t>(rng.randint(static_cast<int64_t>(g.timbres.size())))];
  spec.noise_level = rng.uniform(g.noise_lo, g.noise_hi);
  const int len = static_cast<int>(rng.randint(g.melody_len_lo, g.melody_len_hi + 1));
  spec.melody.resize(static_cast<size_t>(len));
  for (int i = 0; i < len; ++i)
    spec.melody[static_cast<size_t>(i)] = static_cast<int>(rng.randint(kScaleMaxIndex + 1));
  spec.seed = Rng::mix(cfg.master_seed, 2000003ULL + static_cast<uint64_t>(index));
  return spec;
}

namespace {

json spec_to_json(const ClipSpec& s) {
  return json{{"melody", s.melody},      {"tempo_bpm", s.tempo_bpm},
              {"timbre_id", s.timbre_id}, {"genre", s.genre_tag},
              {"noise_level", s.noise_level}, {"seed", s.seed}};
}

ClipSpec spec_from_json(const json& j) {
  ClipSpec s;
  s.melody = j.at("melody").get<std::vector<int>>();
  s.tempo_bpm = j.at("tempo_bpm").get<double>();
  s.timbre_id = j.at("timbre_id").get<int>();
  s.genre_tag = j.at("genre").get<std::string>();
  s.noise_level = j.at("noise_level").get<double>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

}  // namespace

CorpusManifest build_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "wav", ec);
  if (ec) throw IoError("cannot create corpus directory: " + out_dir.string());

  CorpusManifest manifest;
  manifest.config = cfg;
  manifest.clips.reserve(static_cast<size_t>(cfg.clip_count));

  for (int i = 0; i < cfg.clip_count; ++i) {
    ClipRecord rec;
    rec.id = i;
    rec.spec = corpus_clip_spec(cfg, i);
    caption_for(rec.spec, rec.caption, rec.aspects);
    char name[32];
    std::snprintf(name, sizeof(name), "wav/clip_%05d.wav", i);
    rec.file = name;
    AudioClip clip = render_clip(rec.spec, cfg.duration_s, cfg.sample_rate);
    write_wav(out_dir / rec.file, clip);
    manifest.clips.push_back(std::move(rec));
  }

  json j;
  j["magic"] = kManifestMagic;
  j["version"] = kManifestVersion;
  j["clip_count"] = cfg.clip_count;
  j["duration_s"] = cfg.duration_s;
  j["sample_rate"] = cfg.sample_rate;
  j["master_seed"] = cfg.master_seed;
  j["genres"] = cfg.genre_weights;
  json clips = json::array();
  for (const auto& rec : manifest.clips) {
    clips.push_back(json{{"id", rec.id},
                         {"spec", spec_to_json(rec.spec)},
                         {"caption", rec.caption},
                         {"aspects", rec.aspects},
                         {"file", rec.file}});
  }
  j["clips"] = std::move(clips);
  std::ofstream f(out_dir / "manifest.json");
  if (!f) throw IoError("cannot write corpus manifest in " + out_dir.string());
  f << j.dump(1) << "\n";
  return manifest;
}

CorpusManifest load_corpusmanifest_impl(const std::filesystem::path& corpus_dir) {
  std::ifstream f(corpus_dir / "manifest.json");
  if (!f) throw MissingArtifactError("missing corpus manifest: " +
                                     (corpus_dir / "manifest.json").string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError("corpus manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!j.contains("magic") || j["magic"] != kManifestMagic)
    throw FormatError("corpus manifest has wrong magic");
  if (!j.contains("version") || j["version"] != kManifestVersion)
    throw FormatError("corpus manifest has unsupported version");
  CorpusManifest m;
  m.config.clip_count = j.at("clip_count").get<int>();
  m.config.duration_s = j.at("duration_s").get<double>();
  m.config.sample_rate = j.at("sample_rate").get<int>();
  m.config.master_seed = j.at("master_seed").get<uint64_t>();
  m.config.genre_weights = j.at("genres").get<std::map<std::string, double>>();
  for (const auto& c : j.at("clips")) {
    ClipRecord rec;
    rec.id = c.at("id").get<int>();
    rec.spec = spec_from_json(c.at("spec"));
    rec.caption = c.at("caption").get<std::string>();
    rec.aspects = c.at("aspects").get<std::vector<std::string>>();
    rec.file = c.at("file").get<std::string>();
    m.clips.push_back(std::move(rec));
  }
  return m;
}

CorpusManifest load_corpus_manifest(const std::filesystem::path& corpus_dir) {
  return load_corpusmanifest_impl(corpus_dir);
}

AudioClip load_corpus_clip(const std::filesystem::path& corpus_dir, const ClipRecord& rec) {
  return read_wav(corpus_dir / rec.file);
}

}  // namespace musegen
