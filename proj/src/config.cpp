#include "musegen/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "musegen/errors.hpp"

namespace musegen {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw FormatError("config: section '" + where + "' must be an object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key))
      throw FormatError("config: unknown key '" + key + "' in section '" + where + "'");
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json stage_to_json(const StageSection& s) {
  return json{{"batch", s.batch},
              {"steps", s.steps},
              {"lr", s.lr},
              {"warmup_steps", s.warmup_steps},
              {"dropout", s.dropout},
              {"crops_per_clip", s.crops_per_clip}};
}

void stage_from_json(const json& j, StageSection& s, const std::string& where) {
  check_keys(j, {"batch", "steps", "lr", "warmup_steps", "dropout", "crops_per_clip"}, where);
  get_if(j, "batch", s.batch);
  get_if(j, "steps", s.steps);
  get_if(j, "lr", s.lr);
  get_if(j, "warmup_steps", s.warmup_steps);
  get_if(j, "dropout", s.dropout);
  get_if(j, "crops_per_clip", s.crops_per_clip);
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.corpus.master_seed = c.master_seed;
  c.joint_embed.seed = Rng::mix(c.master_seed, 1);
  c.melody_embed.seed = Rng::mix(c.master_seed, 2);
  c.classifier.seed = Rng::mix(c.master_seed, 3);
  c.memorization.seed = Rng::mix(c.master_seed, 4);
  return c;
}

PipelineConfig ExperimentConfig::pipeline_config() const {
  PipelineConfig p = generation;
  p.sample_rate = corpus.sample_rate;
  p.acoustic_rate = features.acoustic_rate;
  p.semantic_rate = features.semantic_rate;
  p.feature_dim = features.dim;
  p.dims.cond_levels = rvq_conditioning.levels;
  p.dims.cond_vocab = rvq_conditioning.entries;
  p.dims.melody_levels = rvq_melody.levels;
  p.dims.melody_vocab = rvq_melody.entries;
  p.dims.semantic_vocab = kmeans.k;
  p.dims.acoustic_levels = rvq_acoustic.levels;
  p.dims.acoustic_vocab = rvq_acoustic.entries;
  p.melody_window_s = melody_embed.window_s;
  p.melody_hop_s = melody_embed.hop_s;
  return p;
}

const StageSection& ExperimentConfig::stage_section(StageKind kind) const {
  switch (kind) {
    case StageKind::semantic: return stage_semantic;
    case StageKind::coarse_acoustic: return stage_coarse;
    case StageKind::fine_acoustic: return stage_fine;
    case StageKind::direct_acoustic: return stage_direct;
    case StageKind::encoder_conditioned: return stage_encoder;
  }
  throw ValidationError("unknown stage kind");
}

StageConfig ExperimentConfig::stage_config(StageKind kind) const {
  StageConfig c;
  c.kind = kind;
  c.layers = arch.layers;
  c.heads = arch.heads;
  c.model_dim = arch.model_dim;
  c.ff_dim = arch.ff_dim;
  c.max_seq_len = arch.max_seq_len;
  c.rel_buckets = arch.rel_buckets;
  c.rel_max_dist = arch.rel_max_dist;
  c.dropout = stage_section(kind).dropout;
  c.dims = pipeline_config().dims;
  c.encoder_dim = joint_embed.d_e;
  return c;
}

StageTrainConfig ExperimentConfig::stage_train_config(StageKind kind) const {
  const StageSection& s = stage_section(kind);
  StageTrainConfig t;
  t.batch = s.batch;
  t.steps = s.steps;
  t.lr = s.lr;
  t.warmup_steps = s.warmup_steps;
  t.seed = Rng::mix(master_seed, 0x57a6e000ULL + static_cast<uint64_t>(kind));
  return t;
}

std::string ExperimentConfig::to_json_string() const {
  json j;
  j["master_seed"] = master_seed;
  j["corpus"] = json{{"clip_count", corpus.clip_count},
                     {"duration_s", corpus.duration_s},
                     {"sample_rate", corpus.sample_rate},
                     {"genres", corpus.genre_weights}};
  j["features"] = json{{"acoustic_rate", features.acoustic_rate},
                       {"semantic_rate", features.semantic_rate},
                       {"dim", features.dim}};
  j["kmeans"] = json{
      {"k", kmeans.k}, {"train_vectors", kmeans.train_vectors}, {"iters", kmeans.iters}};
  auto rvq_json = [](const RvqSection& r) {
    return json{{"levels", r.levels},
                {"entries", r.entries},
                {"train_vectors", r.train_vectors},
                {"iters", r.iters}};
  };
  j["rvq_acoustic"] = rvq_json(rvq_acoustic);
  j["rvq_conditioning"] = rvq_json(rvq_conditioning);
  j["rvq_melody"] = rvq_json(rvq_melody);
  j["joint_embed"] = json{{"d_e", joint_embed.d_e},
                          {"hidden", joint_embed.hidden},
                          {"temperature", joint_embed.temperature},
                          {"batch", joint_embed.batch},
                          {"epochs", joint_embed.epochs},
                          {"lr", joint_embed.lr},
                          {"window_s", joint_embed.window_s},
                          {"stride_s", joint_embed.stride_s},
                          {"holdout", joint_embed.holdout},
                          {"seed", joint_embed.seed}};
  j["melody_embed"] = json{{"d_m", melody_embed.d_m},
                           {"hidden", melody_embed.hidden},
                           {"margin", melody_embed.margin},
                           {"batch_classes", melody_embed.batch_classes},
                           {"epochs", melody_embed.epochs},
                           {"lr", melody_embed.lr},
                           {"window_s", melody_embed.window_s},
                           {"hop_s", melody_embed.hop_s},
                           {"pair_clips", melody_pair_clips},
                           {"seed", melody_embed.seed}};
  j["arch"] = json{{"layers", arch.layers},
                   {"heads", arch.heads},
                   {"model_dim", arch.model_dim},
                   {"ff_dim", arch.ff_dim},
                   {"max_seq_len", arch.max_seq_len},
                   {"rel_buckets", arch.rel_buckets},
                   {"rel_max_dist", arch.rel_max_dist}};
  j["stage_semantic"] = stage_to_json(stage_semantic);
  j["stage_coarse"] = stage_to_json(stage_coarse);
  j["stage_fine"] = stage_to_json(stage_fine);
  j["stage_direct"] = stage_to_json(stage_direct);
  j["stage_encoder"] = stage_to_json(stage_encoder);
  j["semantic_melody_fraction"] = semantic_melody_fraction;
  j["generation"] = json{{"semantic_crop_s", generation.semantic_crop_s},
                         {"acoustic_crop_s", generation.acoustic_crop_s},
                         {"fine_crop_s", generation.fine_crop_s},
                         {"long_stride_s", generation.long_stride_s},
                         {"long_context_s", generation.long_context_s},
                         {"coarse_context_s", generation.coarse_context_s},
                         {"fine_hop_s", generation.fine_hop_s},
                         {"temp_semantic", generation.temp_semantic},
                         {"temp_coarse", generation.temp_coarse},
                         {"temp_fine", generation.temp_fine}};
  j["classifier"] = json{{"iterations", classifier.iterations},
                         {"lr", classifier.lr},
                         {"l2", classifier.l2},
                         {"holdout_fraction", classifier.holdout_fraction},
                         {"min_accuracy", classifier_min_accuracy}};
  j["memorization"] = json{{"prompt_lengths", memorization.prompt_lengths},
                           {"continuation_len", memorization.continuation_len},
                           {"sample_count", memorization.sample_count},
                           {"match_threshold", memorization.match_threshold},
                           {"sinkhorn_epsilon", memorization.sinkhorn_epsilon},
                           {"sinkhorn_iters", memorization.sinkhorn_iters},
                           {"target_fpr", memorization.target_fpr},
                           {"entropy_cost_cutoff", memorization.entropy_cost_cutoff}};
  return j.dump(1);
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifactError("missing config file: " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError("config is not valid JSON: " + std::string(e.what()));
  }

  check_keys(j,
             {"master_seed", "corpus", "features", "kmeans", "rvq_acoustic",
              "rvq_conditioning", "rvq_melody", "joint_embed", "melody_embed", "arch",
              "stage_semantic", "stage_coarse", "stage_fine", "stage_direct", "stage_encoder",
              "semantic_melody_fraction", "generation", "classifier", "memorization"},
             "top level");

  ExperimentConfig c;
  get_if(j, "master_seed", c.master_seed);
  if (j.contains("corpus")) {
    const json& s = j["corpus"];
    check_keys(s, {"clip_count", "duration_s", "sample_rate", "genres"}, "corpus");
    get_if(s, "clip_count", c.corpus.clip_count);
    get_if(s, "duration_s", c.corpus.duration_s);
    get_if(s, "sample_rate", c.corpus.sample_rate);
    if (s.contains("genres"))
      c.corpus.genre_weights = s["genres"].get<std::map<std::string, double>>();
  }
  if (j.contains("features")) {
    const json& s = j["features"];
    check_keys(s, {"acoustic_rate", "semantic_rate", "dim"}, "features");
    get_if(s, "acoustic_rate", c.features.acoustic_rate);
    get_if(s, "semantic_rate", c.features.semantic_rate);
    get_if(s, "dim", c.features.dim);
  }
  if (j.contains("kmeans")) {
    const json& s = j["kmeans"];
    check_keys(s, {"k", "train_vectors", "iters"}, "kmeans");
    get_if(s, "k", c.kmeans.k);
    get_if(s, "train_vectors", c.kmeans.train_vectors);
    get_if(s, "iters", c.kmeans.iters);
  }
  auto rvq_from = [&](const char* key, RvqSection& r) {
    if (!j.contains(key)) return;
    const json& s = j[key];
    check_keys(s, {"levels", "entries", "train_vectors", "iters"}, key);
    get_if(s, "levels", r.levels);
    get_if(s, "entries", r.entries);
    get_if(s, "train_vectors", r.train_vectors);
    get_if(s, "iters", r.iters);
  };
  rvq_from("rvq_acoustic", c.rvq_acoustic);
  rvq_from("rvq_conditioning", c.rvq_conditioning);
  rvq_from("rvq_melody", c.rvq_melody);
  if (j.contains("joint_embed")) {
    const json& s = j["joint_embed"];
    check_keys(s,
               {"d_e", "hidden", "temperature", "batch", "epochs", "lr", "window_s",
                "stride_s", "holdout", "seed"},
               "joint_embed");
    get_if(s, "d_e", c.joint_embed.d_e);
    get_if(s, "hidden", c.joint_embed.hidden);
    get_if(s, "temperature", c.joint_embed.temperature);
    get_if(s, "batch", c.joint_embed.batch);
    get_if(s, "epochs", c.joint_embed.epochs);
    get_if(s, "lr", c.joint_embed.lr);
    get_if(s, "window_s", c.joint_embed.window_s);
    get_if(s, "stride_s", c.joint_embed.stride_s);
    get_if(s, "holdout", c.joint_embed.holdout);
    get_if(s, "seed", c.joint_embed.seed);
  }
  if (j.contains("melody_embed")) {
    const json& s = j["melody_embed"];
    check_keys(s,
               {"d_m", "hidden", "margin", "batch_classes", "epochs", "lr", "window_s",
                "hop_s", "pair_clips", "seed"},
               "melody_embed");
    get_if(s, "d_m", c.melody_embed.d_m);
    get_if(s, "hidden", c.melody_embed.hidden);
    get_if(s, "margin", c.melody_embed.margin);
    get_if(s, "batch_classes", c.melody_embed.batch_classes);
    get_if(s, "epochs", c.melody_embed.epochs);
    get_if(s, "lr", c.melody_embed.lr);
    get_if(s, "window_s", c.melody_embed.window_s);
    get_if(s, "hop_s", c.melody_embed.hop_s);
    get_if(s, "pair_clips", c.melody_pair_clips);
    get_if(s, "seed", c.melody_embed.seed);
  }
  if (j.contains("arch")) {
    const json& s = j["arch"];
    check_keys(
        s, {"layers", "heads", "model_dim", "ff_dim", "max_seq_len", "rel_buckets",
            "rel_max_dist"},
        "arch");
    get_if(s, "layers", c.arch.layers);
    get_if(s, "heads", c.arch.heads);
    get_if(s, "model_dim", c.arch.model_dim);
    get_if(s, "ff_dim", c.arch.ff_dim);
    get_if(s, "max_seq_len", c.arch.max_seq_len);
    get_if(s, "rel_buckets", c.arch.rel_buckets);
    get_if(s, "rel_max_dist", c.arch.rel_max_dist);
  }
  if (j.contains("stage_semantic")) stage_from_json(j["stage_semantic"], c.stage_semantic, "stage_semantic");
  if (j.contains("stage_coarse")) stage_from_json(j["stage_coarse"], c.stage_coarse, "stage_coarse");
  if (j.contains("stage_fine")) stage_from_json(j["stage_fine"], c.stage_fine, "stage_fine");
  if (j.contains("stage_direct")) stage_from_json(j["stage_direct"], c.stage_direct, "stage_direct");
  if (j.contains("stage_encoder")) stage_from_json(j["stage_encoder"], c.stage_encoder, "stage_encoder");
  get_if(j, "semantic_melody_fraction", c.semantic_melody_fraction);
  if (j.contains("generation")) {
    const json& s = j["generation"];
    check_keys(s,
               {"semantic_crop_s", "acoustic_crop_s", "fine_crop_s", "long_stride_s",
                "long_context_s", "coarse_context_s", "fine_hop_s", "temp_semantic",
                "temp_coarse", "temp_fine"},
               "generation");
    get_if(s, "semantic_crop_s", c.generation.semantic_crop_s);
    get_if(s, "acoustic_crop_s", c.generation.acoustic_crop_s);
    get_if(s, "fine_crop_s", c.generation.fine_crop_s);
    get_if(s, "long_stride_s", c.generation.long_stride_s);
    get_if(s, "long_context_s", c.generation.long_context_s);
    get_if(s, "coarse_context_s", c.generation.coarse_context_s);
    get_if(s, "fine_hop_s", c.generation.fine_hop_s);
    get_if(s, "temp_semantic", c.generation.temp_semantic);
    get_if(s, "temp_coarse", c.generation.temp_coarse);
    get_if(s, "temp_fine", c.generation.temp_fine);
  }
  if (j.contains("classifier")) {
    const json& s = j["classifier"];
    check_keys(s, {"iterations", "lr", "l2", "holdout_fraction", "min_accuracy"},
               "classifier");
    get_if(s, "iterations", c.classifier.iterations);
    get_if(s, "lr", c.classifier.lr);
    get_if(s, "l2", c.classifier.l2);
    get_if(s, "holdout_fraction", c.classifier.holdout_fraction);
    get_if(s, "min_accuracy", c.classifier_min_accuracy);
  }
  if (j.contains("memorization")) {
    const json& s = j["memorization"];
    check_keys(s,
               {"prompt_lengths", "continuation_len", "sample_count", "match_threshold",
                "sinkhorn_epsilon", "sinkhorn_iters", "target_fpr", "entropy_cost_cutoff"},
               "memorization");
    if (s.contains("prompt_lengths"))
      c.memorization.prompt_lengths = s["prompt_lengths"].get<std::vector<int>>();
    get_if(s, "continuation_len", c.memorization.continuation_len);
    get_if(s, "sample_count", c.memorization.sample_count);
    get_if(s, "match_threshold", c.memorization.match_threshold);
    get_if(s, "sinkhorn_epsilon", c.memorization.sinkhorn_epsilon);
    get_if(s, "sinkhorn_iters", c.memorization.sinkhorn_iters);
    get_if(s, "target_fpr", c.memorization.target_fpr);
    get_if(s, "entropy_cost_cutoff", c.memorization.entropy_cost_cutoff);
  }

  // Materialize derived seeds.
  c.corpus.master_seed = c.master_seed;
  if (!j.contains("joint_embed") || !j["joint_embed"].contains("seed"))
    c.joint_embed.seed = Rng::mix(c.master_seed, 1);
  if (!j.contains("melody_embed") || !j["melody_embed"].contains("seed"))
    c.melody_embed.seed = Rng::mix(c.master_seed, 2);
  c.classifier.seed = Rng::mix(c.master_seed, 3);
  c.memorization.seed = Rng::mix(c.master_seed, 4);
  return c;
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write config: " + path.string());
  f << to_json_string() << "\n";
}

ExperimentConfig load_models_config(const std::filesystem::path& models_dir) {
  return ExperimentConfig::load(models_dir / "config.json");
}

ModelBundle ModelBundle::load(const std::filesystem::path& models_dir) {
  ExperimentConfig cfg = load_models_config(models_dir);
  ModelBundle b;
  b.pcfg = cfg.pipeline_config();
  b.semantic_tok = KmeansTokenizer::load(models_dir / "kmeans_semantic.mga");
  b.acoustic_rvq = RvqCodebook::load(models_dir / "rvq_acoustic.mga");
  b.cond_rvq = RvqCodebook::load(models_dir / "rvq_conditioning.mga");
  b.melody_rvq = RvqCodebook::load(models_dir / "rvq_melody.mga");
  b.embed = JointEmbedModel::load(models_dir / "joint_embed.mga");
  b.melody = MelodyEmbedModel::load(models_dir / "melody_embed.mga");
  b.classifier = TagClassifier::load(models_dir / "classifier.mga");
  b.semantic_stage = load_stage(models_dir / "stage_semantic.mga");
  b.coarse_stage = load_stage(models_dir / "stage_coarse.mga");
  b.fine_stage = load_stage(models_dir / "stage_fine.mga");
  return b;
}

}  // namespace musegen
