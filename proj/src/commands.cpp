#include "musegen/commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>

#include "musegen/config.hpp"
#include "musegen/errors.hpp"
#include "musegen/memorization.hpp"
#include "musegen/pipeline.hpp"

namespace musegen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ExperimentConfig effective_config(const std::string& config_path, const std::string& models_dir) {
  if (!config_path.empty()) return ExperimentConfig::load(config_path);
  if (!models_dir.empty() && fs::exists(fs::path(models_dir) / "config.json"))
    return load_models_config(models_dir);
  return ExperimentConfig::defaults();
}

Eigen::MatrixXd subsample_rows(const Eigen::MatrixXd& m, int count, uint64_t seed) {
  if (m.rows() <= count) return m;
  std::vector<long> idx(static_cast<size_t>(m.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  Eigen::MatrixXd out(count, m.cols());
  for (int i = 0; i < count; ++i) out.row(i) = m.row(idx[static_cast<size_t>(i)]);
  return out;
}

struct CorpusFeatures {
  Eigen::MatrixXd semantic_frames;  // smoothed, stacked over clips
  Eigen::MatrixXd acoustic_frames;
};

CorpusFeatures collect_corpus_frames(const CorpusManifest& manifest, const fs::path& corpus_dir,
                                     const ExperimentConfig& cfg) {
  CorpusFeatures out;
  std::vector<Eigen::MatrixXd> sem, ac;
  for (const auto& rec : manifest.clips) {
    AudioClip clip = load_corpus_clip(corpus_dir, rec);
    FeatureSequence s = frame_features(clip, cfg.features.semantic_rate, cfg.features.dim);
    sem.push_back(smooth_neighbors(s).frames);
    ac.push_back(frame_features(clip, cfg.features.acoustic_rate, cfg.features.dim).frames);
  }
  long n_sem = 0, n_ac = 0;
  for (const auto& m : sem) n_sem += m.rows();
  for (const auto& m : ac) n_ac += m.rows();
  out.semantic_frames.resize(n_sem, cfg.features.dim);
  out.acoustic_frames.resize(n_ac, cfg.features.dim);
  long ps = 0, pa = 0;
  for (const auto& m : sem) {
    out.semantic_frames.middleRows(ps, m.rows()) = m;
    ps += m.rows();
  }
  for (const auto& m : ac) {
    out.acoustic_frames.middleRows(pa, m.rows()) = m;
    pa += m.rows();
  }
  return out;
}

std::vector<TokenizedClip> tokenize_corpus(const ModelBundle& partial,
                                           const CorpusManifest& manifest,
                                           const fs::path& corpus_dir) {
  Tokenizers tk{partial.pcfg,      &partial.semantic_tok, &partial.acoustic_rvq,
                &partial.cond_rvq, &partial.melody_rvq,   &partial.embed,
                &partial.melody};
  std::vector<TokenizedClip> out;
  out.reserve(manifest.clips.size());
  for (const auto& rec : manifest.clips)
    out.push_back(tokenize_clip(tk, load_corpus_clip(corpus_dir, rec)));
  return out;
}

// Loads only the artifacts needed before stage training exists.
ModelBundle load_tokenizer_bundle(const fs::path& models_dir) {
  ExperimentConfig cfg = load_models_config(models_dir);
  ModelBundle b;
  b.pcfg = cfg.pipeline_config();
  b.semantic_tok = KmeansTokenizer::load(models_dir / "kmeans_semantic.mga");
  b.acoustic_rvq = RvqCodebook::load(models_dir / "rvq_acoustic.mga");
  b.cond_rvq = RvqCodebook::load(models_dir / "rvq_conditioning.mga");
  b.melody_rvq = RvqCodebook::load(models_dir / "rvq_melody.mga");
  b.embed = JointEmbedModel::load(models_dir / "joint_embed.mga");
  b.melody = MelodyEmbedModel::load(models_dir / "melody_embed.mga");
  return b;
}

int cmd_gen_corpus(const std::string& config_path, const std::string& out_dir,
                   std::optional<uint64_t> seed) {
  ExperimentConfig cfg = effective_config(config_path, "");
  if (seed) {
    cfg.master_seed = *seed;
    cfg.corpus.master_seed = *seed;
  }
  CorpusManifest manifest = build_corpus(cfg.corpus, out_dir);
  std::printf("corpus clips=%d duration_s=%.3f sample_rate=%d out=%s\n",
              static_cast<int>(manifest.clips.size()), cfg.corpus.duration_s,
              cfg.corpus.sample_rate, out_dir.c_str());
  return 0;
}

int cmd_train_tokenizers(const std::string& config_path, const std::string& corpus_dir,
                         const std::string& models_dir) {
  ExperimentConfig cfg = effective_config(config_path, models_dir);
  CorpusManifest manifest = load_corpus_manifest(corpus_dir);
  fs::create_directories(models_dir);
  cfg.save(fs::path(models_dir) / "config.json");

  CorpusFeatures frames = collect_corpus_frames(manifest, corpus_dir, cfg);
  Eigen::MatrixXd sem = subsample_rows(frames.semantic_frames, cfg.kmeans.train_vectors,
                                       Rng::mix(cfg.master_seed, 5));
  KmeansTokenizer tok = KmeansTokenizer::train(sem, cfg.kmeans.k,
                                               Rng::mix(cfg.master_seed, 51), cfg.kmeans.iters);
  tok.save(fs::path(models_dir) / "kmeans_semantic.mga");

  Eigen::MatrixXd ac = subsample_rows(frames.acoustic_frames, cfg.rvq_acoustic.train_vectors,
                                      Rng::mix(cfg.master_seed, 6));
  RvqCodebook rvq = RvqCodebook::train(ac, cfg.rvq_acoustic.levels, cfg.rvq_acoustic.entries,
                                       Rng::mix(cfg.master_seed, 61), cfg.rvq_acoustic.iters);
  rvq.save(fs::path(models_dir) / "rvq_acoustic.mga");

  std::printf("kmeans k=%d distortion=%.6f\n", tok.k, tok.train_distortion);
  for (size_t l = 0; l < rvq.level_mse.size(); ++l)
    std::printf("rvq_acoustic level=%zu residual_mse=%.6f\n", l + 1, rvq.level_mse[l]);
  return 0;
}

int cmd_train_embed(const std::string& config_path, const std::string& corpus_dir,
                    const std::string& models_dir) {
  ExperimentConfig cfg = effective_config(config_path, models_dir);
  CorpusManifest manifest = load_corpus_manifest(corpus_dir);

  std::vector<ContrastiveItem> items;
  std::vector<Eigen::VectorXd> clf_features;
  std::vector<std::vector<std::string>> clf_tags;
  JointEmbedConfig jcfg = cfg.joint_embed;
  for (const auto& rec : manifest.clips) {
    AudioClip clip = load_corpus_clip(corpus_dir, rec);
    FeatureSequence fs1 = frame_features(clip, jcfg.feature_rate, jcfg.feature_dim);
    ContrastiveItem item;
    item.pooled = pool_window(fs1, jcfg.window_s, jcfg.stride_s);
    item.caption = rec.caption;
    items.push_back(std::move(item));
    clf_features.push_back(
        classifier_features(clip, cfg.classifier.feature_rate, cfg.classifier.band_dim));
    clf_tags.push_back(rec.aspects);
  }

  ContrastiveStats stats;
  JointEmbedModel model = train_contrastive(items, jcfg, &stats);
  model.save(fs::path(models_dir) / "joint_embed.mga");
  std::printf("joint_embed initial_loss=%.4f final_loss=%.4f holdout_top1=%.4f chance=%.4f\n",
              stats.initial_loss, stats.final_loss, stats.holdout_top1, stats.holdout_chance);

  // Conditioning RVQ on pooled per-clip audio embeddings of the train split.
  const int n_train = static_cast<int>(items.size()) - jcfg.holdout;
  Eigen::MatrixXd embeds(n_train, jcfg.d_e);
  for (int i = 0; i < n_train; ++i)
    embeds.row(i) = model.embed_windows(items[static_cast<size_t>(i)].pooled).transpose();
  RvqCodebook cond_rvq =
      RvqCodebook::train(embeds, cfg.rvq_conditioning.levels, cfg.rvq_conditioning.entries,
                         Rng::mix(cfg.master_seed, 7), cfg.rvq_conditioning.iters);
  cond_rvq.save(fs::path(models_dir) / "rvq_conditioning.mga");
  std::printf("rvq_conditioning levels=%d entries=%d final_residual_mse=%.8f\n",
              cond_rvq.levels, cond_rvq.entries, cond_rvq.level_mse.back());

  Eigen::MatrixXd cf(static_cast<long>(clf_features.size()), clf_features[0].size());
  for (size_t i = 0; i < clf_features.size(); ++i) cf.row(static_cast<long>(i)) = clf_features[i];
  ClassifierStats cstats;
  TagClassifier clf = train_classifier(cf, clf_tags, cfg.classifier, &cstats);
  for (size_t t = 0; t < clf.tags.size(); ++t)
    std::printf("classifier tag=%s holdout_accuracy=%.4f\n", clf.tags[t].c_str(),
                cstats.holdout_accuracy[t]);
  for (const auto& tag : cstats.excluded_tags)
    std::printf("classifier tag=%s excluded=single_class\n", tag.c_str());
  if (cstats.min_accuracy <= cfg.classifier_min_accuracy)
    throw NumericError("classifier holdout accuracy " + std::to_string(cstats.min_accuracy) +
                       " below required " + std::to_string(cfg.classifier_min_accuracy));
  clf.save(fs::path(models_dir) / "classifier.mga");
  return 0;
}

int cmd_train_melody(const std::string& config_path, const std::string& corpus_dir,
                     const std::string& models_dir) {
  ExperimentConfig cfg = effective_config(config_path, models_dir);
  CorpusManifest manifest = load_corpus_manifest(corpus_dir);
  const int pair_clips =
      std::min<int>(cfg.melody_pair_clips, static_cast<int>(manifest.clips.size()));
  std::vector<MelodyWindowExample> examples =
      build_melody_examples(manifest, cfg.melody_embed, 0, pair_clips);

  TripletStats stats;
  MelodyEmbedModel model = train_melody(examples, cfg.melody_embed, &stats);
  model.save(fs::path(models_dir) / "melody_embed.mga");
  std::printf("melody_embed batches=%d skipped=%d final_loss=%.6f\n", stats.total_batches,
              stats.skipped_batches, stats.final_loss);

  Eigen::MatrixXd pooled(static_cast<long>(examples.size()), cfg.melody_embed.feature_dim);
  for (size_t i = 0; i < examples.size(); ++i)
    pooled.row(static_cast<long>(i)) = examples[i].pooled.transpose();
  Eigen::MatrixXd embeds = model.embed_pooled(pooled);
  Eigen::MatrixXd sub = subsample_rows(embeds, cfg.rvq_melody.train_vectors,
                                       Rng::mix(cfg.master_seed, 12));
  RvqCodebook mrvq = RvqCodebook::train(sub, cfg.rvq_melody.levels, cfg.rvq_melody.entries,
                                        Rng::mix(cfg.master_seed, 13), cfg.rvq_melody.iters);
  mrvq.save(fs::path(models_dir) / "rvq_melody.mga");
  std::printf("rvq_melody levels=%d entries=%d final_residual_mse=%.8f\n", mrvq.levels,
              mrvq.entries, mrvq.level_mse.back());
  return 0;
}

int cmd_train_stages(const std::string& config_path, const std::string& corpus_dir,
                     const std::string& models_dir, const std::string& which) {
  ExperimentConfig cfg = effective_config(config_path, models_dir);
  CorpusManifest manifest = load_corpus_manifest(corpus_dir);
  ModelBundle partial = load_tokenizer_bundle(models_dir);
  std::vector<TokenizedClip> clips = tokenize_corpus(partial, manifest, corpus_dir);

  StageDatasetOptions opt;
  opt.seed = Rng::mix(cfg.master_seed, 8);
  opt.melody_fraction = cfg.semantic_melody_fraction;

  auto train_one = [&](StageKind kind, const std::vector<SequenceLayout>& data,
                       const char* file) {
    StageModel m;
    m.cfg = cfg.stage_config(kind);
    m.init(Rng::mix(cfg.master_seed, 0x90 + static_cast<uint64_t>(kind)));
    StageTrainStats st = train_stage(m, data, cfg.stage_train_config(kind));
    save_stage(m, fs::path(models_dir) / file);
    std::printf("stage=%s params=%lld examples=%d initial_loss=%.4f final_loss=%.4f\n",
                stage_kind_name(kind).c_str(), static_cast<long long>(st.parameter_count),
                static_cast<int>(data.size()), st.initial_loss, st.final_loss);
  };

  const bool all = which == "all";
  if (all || which == "semantic") {
    StageDatasetOptions o = opt;
    o.crops_per_clip = cfg.stage_semantic.crops_per_clip;
    train_one(StageKind::semantic, build_semantic_dataset(clips, partial.pcfg, o),
              "stage_semantic.mga");
  }
  if (all || which == "coarse") {
    StageDatasetOptions o = opt;
    o.crops_per_clip = cfg.stage_coarse.crops_per_clip;
    train_one(StageKind::coarse_acoustic, build_coarse_dataset(clips, partial.pcfg, o),
              "stage_coarse.mga");
  }
  if (all || which == "fine") {
    StageDatasetOptions o = opt;
    o.crops_per_clip = cfg.stage_fine.crops_per_clip;
    train_one(StageKind::fine_acoustic, build_fine_dataset(clips, partial.pcfg, o),
              "stage_fine.mga");
  }
  return 0;
}

void dump_generation(const GenerationResult& res, const std::string& dump_dir) {
  fs::create_directories(dump_dir);
  write_token_dump(fs::path(dump_dir) / "conditioning.tokens", res.cond.front());
  write_token_dump(fs::path(dump_dir) / "semantic.tokens", res.semantic);
  write_token_dump(fs::path(dump_dir) / "coarse.tokens", res.coarse);
  write_token_dump(fs::path(dump_dir) / "fine.tokens", res.fine);
  if (res.melody_tokens)
    write_token_dump(fs::path(dump_dir) / "melody.tokens", *res.melody_tokens);
}

void print_schedule(const GenerationResult& res) {
  for (const auto& e : res.schedule)
    std::printf("schedule step=%d start_s=%.3f end_s=%.3f caption=%d\n", e.step, e.start_s,
                e.end_s, e.caption_index);
}

struct GenArgs {
  std::string models, caption, out, dump_tokens, melody_wav;
  std::vector<std::string> segments;
  double seconds = 2.0;
  double stride = 3.0, context = 3.0;
  uint64_t seed = 0;
  bool seed_set = false;
  int cond_sem = 12, cond_coarse = 12;
};

GenerationRequest base_request(const ModelBundle& b, const GenArgs& a) {
  GenerationRequest req;
  req.total_s = a.seconds;
  req.seed = a.seed_set ? a.seed : load_models_config(a.models).master_seed;
  req.cond_levels_semantic = a.cond_sem;
  req.cond_levels_coarse = a.cond_coarse;
  req.temp_semantic = b.pcfg.temp_semantic;
  req.temp_coarse = b.pcfg.temp_coarse;
  req.temp_fine = b.pcfg.temp_fine;
  return req;
}

int finish_generation(const GenerationResult& res, const GenArgs& a) {
  write_wav(a.out, res.audio);
  if (!a.dump_tokens.empty()) dump_generation(res, a.dump_tokens);
  print_schedule(res);
  std::printf("wav=%s samples=%d sample_rate=%d semantic_tokens=%d acoustic_frames=%d\n",
              a.out.c_str(), static_cast<int>(res.audio.samples.size()),
              res.audio.sample_rate, res.semantic.frames(), res.coarse.frames());
  return 0;
}

std::vector<std::pair<double, std::string>> parse_segments(
    const std::vector<std::string>& specs) {
  std::vector<std::pair<double, std::string>> out;
  for (const auto& s : specs) {
    auto colon = s.find(':');
    require(colon != std::string::npos, "story segment must be 'time:caption'");
    out.emplace_back(std::stod(s.substr(0, colon)), s.substr(colon + 1));
  }
  return out;
}

struct AblateRow {
  std::string name;
  MetricReport report;
};

void write_ablation_table(const std::string& path, const std::string& kind,
                          const std::vector<AblateRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write ablation table: " + path);
  f << "# ablation kind=" << kind << "\n";
  f << "# row fad kld mcc count\n";
  for (const auto& r : rows) {
    f << r.name << " " << r.report.fad << " " << r.report.kld << " " << r.report.mcc << " "
      << r.report.count << "\n";
    std::printf("row=%s fad=%.6f kld=%.6f mcc=%.6f count=%d\n", r.name.c_str(), r.report.fad,
                r.report.kld, r.report.mcc, r.report.count);
  }
}

int cmd_memcheck(const std::string& models_dir, const std::string& corpus_dir,
                 const std::string& out_dir, int count_override) {
  ExperimentConfig cfg = load_models_config(models_dir);
  ModelBundle b = ModelBundle::load(models_dir);
  CorpusManifest manifest = load_corpus_manifest(corpus_dir);
  MemorizationConfig mcfg = cfg.memorization;
  if (count_override > 0) mcfg.sample_count = count_override;

  Tokenizers tk{b.pcfg, &b.semantic_tok, &b.acoustic_rvq, &b.cond_rvq,
                &b.melody_rvq, &b.embed, &b.melody};
  std::vector<AuditExample> dataset;
  const int count = std::min<int>(mcfg.sample_count, static_cast<int>(manifest.clips.size()));
  (void)tk;
  for (int i = 0; i < count; ++i) {
    const auto& rec = manifest.clips[static_cast<size_t>(i)];
    AudioClip clip = load_corpus_clip(corpus_dir, rec);
    FeatureSequence fsq = frame_features(clip, b.pcfg.semantic_rate, b.pcfg.feature_dim);
    TokenSequence s = b.semantic_tok.assign(smooth_neighbors(fsq));
    TokenSequence cond = conditioning_tokens_audio(b.embed, b.cond_rvq, clip);
    AuditExample ex;
    ex.conditioning = cond.ids.row(0).transpose();
    ex.semantic = s.ids.col(0);
    dataset.push_back(std::move(ex));
  }

  const StageLayoutSpec& spec = b.semantic_stage.layout;
  GreedyContinuation continuation = [&](const AuditExample& e, int t_len,
                                        int cont) -> Eigen::VectorXi {
    TokenSequence cond;
    cond.ids = e.conditioning.transpose();
    cond.vocab = b.pcfg.dims.cond_vocab;
    cond.kind = TokenKind::conditioning;
    TokenSequence prefix;
    prefix.ids = e.semantic.head(t_len);
    prefix.vocab = b.pcfg.dims.semantic_vocab;
    prefix.kind = TokenKind::semantic;
    prefix.frame_rate = b.pcfg.semantic_rate;
    LayoutInputs in;
    in.cond = &cond;
    in.target = &prefix;
    SequenceLayout layout = build_layout(spec, in);
    SampleRequest sreq;
    sreq.prompt = layout.flat;
    sreq.n_new = cont;
    sreq.greedy = true;
    std::vector<int32_t> g = sample_tokens(b.semantic_stage, sreq);
    const int sem_def = spec.def_index(SegKind::semantic);
    Eigen::VectorXi out(cont);
    for (int i = 0; i < cont; ++i)
      out(i) = g[static_cast<size_t>(i)] - spec.block_offset[static_cast<size_t>(sem_def)];
    return out;
  };

  MatchReport report = run_memorization_audit(dataset, continuation,
                                              b.semantic_tok.centroid_distance_matrix(), mcfg);
  fs::create_directories(out_dir);
  write_match_report(fs::path(out_dir) / "match_report.txt", report);
  for (const auto& [t_len, frac] : report.exact_fraction)
    std::printf("T=%d exact=%.4f approx=%.4f evaluated=%d\n", t_len, frac,
                report.approx_fraction.at(t_len), report.evaluated.at(t_len));
  std::printf("tau=%.6f fpr=%.6f degenerate=%d\n", report.tau, report.empirical_fpr,
              report.tau_degenerate ? 1 : 0);
  std::printf("entropy_all_bits=%.4f entropy_matched_bits=%.4f matched=%d skipped=%d\n",
              report.mean_entropy_all, report.mean_entropy_matched, report.matched_count,
              report.skipped_total);
  return 0;
}

int cmd_ablate(const std::string& kind, const std::string& corpus_dir,
               const std::string& models_dir, const std::string& out_path, int count,
               double seconds, uint64_t seed) {
  ExperimentConfig cfg = load_models_config(models_dir);
  ModelBundle b = ModelBundle::load(models_dir);
  CorpusManifest manifest = load_corpus_manifest(corpus_dir);
  std::vector<AblateRow> rows;

  auto eval_with_levels = [&](int s1, int s2) {
    EvalOptions opt;
    opt.count = count;
    opt.duration_s = seconds;
    opt.seed = seed;
    opt.cond_levels_semantic = s1;
    opt.cond_levels_coarse = s2;
    EvalSet set = generate_eval_set(b, manifest, corpus_dir, opt);
    return evaluate_sets(b, set);
  };

  // Shared prompt selection for the variant rows.
  auto prompt_records = [&]() {
    Rng rng(seed);
    std::vector<size_t> order(manifest.clips.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<const ClipRecord*> recs;
    for (int i = 0; i < std::min<int>(count, static_cast<int>(order.size())); ++i)
      recs.push_back(&manifest.clips[order[static_cast<size_t>(i)]]);
    return recs;
  };

  auto eval_generator = [&](const std::function<AudioClip(const ClipRecord&, uint64_t)>& gen) {
    EvalSet set;
    auto recs = prompt_records();
    for (size_t i = 0; i < recs.size(); ++i) {
      set.ref_ids.push_back(recs[i]->id);
      set.captions.push_back(recs[i]->caption);
      set.generated.push_back(gen(*recs[i], Rng::mix(seed, 0xe7a1ULL + i)));
      set.reference.push_back(load_corpus_clip(corpus_dir, *recs[i]));
    }
    return evaluate_sets(b, set);
  };

  if (kind == "rvq-levels") {
    const std::vector<std::pair<int, int>> combos = {{12, 12}, {6, 12}, {12, 6}, {6, 6},
                                                     {1, 12},  {12, 1}, {1, 1}};
    for (auto [s1, s2] : combos) {
      char name[32];
      std::snprintf(name, sizeof(name), "%d/%d", s1, s2);
      rows.push_back({name, eval_with_levels(std::min(s1, b.pcfg.dims.cond_levels),
                                             std::min(s2, b.pcfg.dims.cond_levels))});
    }
  } else if (kind == "no-semantic") {
    rows.push_back({"base", eval_with_levels(b.pcfg.dims.cond_levels, b.pcfg.dims.cond_levels)});
    std::vector<TokenizedClip> clips = tokenize_corpus(b, manifest, corpus_dir);
    StageDatasetOptions opt;
    opt.seed = Rng::mix(cfg.master_seed, 8);
    opt.crops_per_clip = cfg.stage_direct.crops_per_clip;
    StageModel direct;
    direct.cfg = cfg.stage_config(StageKind::direct_acoustic);
    direct.init(Rng::mix(cfg.master_seed, 0x90 + 3));
    StageTrainStats st = train_stage(direct, build_direct_dataset(clips, b.pcfg, opt),
                                     cfg.stage_train_config(StageKind::direct_acoustic));
    std::printf("stage=direct_acoustic initial_loss=%.4f final_loss=%.4f\n", st.initial_loss,
                st.final_loss);
    rows.push_back({"direct_acoustic", eval_generator([&](const ClipRecord& rec, uint64_t s) {
                      return generate_direct(b, direct, rec.caption, seconds, s);
                    })});
  } else if (kind == "text-encoder") {
    rows.push_back({"base", eval_with_levels(b.pcfg.dims.cond_levels, b.pcfg.dims.cond_levels)});
    std::vector<TokenizedClip> clips = tokenize_corpus(b, manifest, corpus_dir);
    std::vector<std::string> captions;
    for (const auto& rec : manifest.clips) captions.push_back(rec.caption);
    StageDatasetOptions opt;
    opt.seed = Rng::mix(cfg.master_seed, 8);
    opt.crops_per_clip = cfg.stage_encoder.crops_per_clip;
    std::vector<SequenceLayout> data =
        build_encoder_dataset(clips, captions, b.embed.vocab, b.pcfg, opt);
    for (EncoderMode mode : {EncoderMode::frozen, EncoderMode::scratch, EncoderMode::finetuned}) {
      StageModel enc = make_encoder_stage(cfg.stage_config(StageKind::encoder_conditioned),
                                          &b.embed, mode,
                                          Rng::mix(cfg.master_seed, 0x90 + 4));
      StageTrainStats st =
          train_stage(enc, data, cfg.stage_train_config(StageKind::encoder_conditioned));
      std::printf("stage=encoder_%s initial_loss=%.4f final_loss=%.4f\n",
                  encoder_mode_name(mode).c_str(), st.initial_loss, st.final_loss);
      rows.push_back(
          {encoder_mode_name(mode), eval_generator([&](const ClipRecord& rec, uint64_t s) {
             return generate_encoder_conditioned(b, enc, rec.caption, seconds, s);
           })});
    }
  } else {
    throw ValidationError("ablate: unknown kind '" + kind +
                          "' (expected rvq-levels, no-semantic, text-encoder)");
  }
  write_ablation_table(out_path, kind, rows);
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale text-conditioned music token pipeline"};
  app.require_subcommand(1);

  // gen-corpus
  std::string config_path, out_dir, corpus_dir, models_dir;
  uint64_t seed = 0;
  bool seed_set = false;

  auto* gen_corpus = app.add_subcommand("gen-corpus", "render the synthetic captioned corpus");
  gen_corpus->add_option("--config", config_path);
  gen_corpus->add_option("--out", out_dir)->required();
  auto* seed_opt = gen_corpus->add_option("--seed", seed);

  auto* train_tok = app.add_subcommand("train-tokenizers", "fit k-means + acoustic RVQ");
  train_tok->add_option("--config", config_path);
  train_tok->add_option("--corpus", corpus_dir)->required();
  train_tok->add_option("--models", models_dir)->required();

  auto* train_embed = app.add_subcommand("train-embed",
                                         "train the joint embedding, conditioning RVQ, and tag classifier");
  train_embed->add_option("--config", config_path);
  train_embed->add_option("--corpus", corpus_dir)->required();
  train_embed->add_option("--models", models_dir)->required();

  auto* train_melody_cmd = app.add_subcommand("train-melody",
                                              "train the melody tower and melody RVQ");
  train_melody_cmd->add_option("--config", config_path);
  train_melody_cmd->add_option("--corpus", corpus_dir)->required();
  train_melody_cmd->add_option("--models", models_dir)->required();

  std::string which_stage = "all";
  auto* train_stages = app.add_subcommand("train-stages", "train the autoregressive stages");
  train_stages->add_option("--config", config_path);
  train_stages->add_option("--corpus", corpus_dir)->required();
  train_stages->add_option("--models", models_dir)->required();
  train_stages->add_option("--stage", which_stage)
      ->check(CLI::IsMember({"all", "semantic", "coarse", "fine"}));

  GenArgs ga;
  auto add_gen_common = [&](CLI::App* cmd, bool need_caption) {
    cmd->add_option("--models", ga.models)->required();
    if (need_caption) cmd->add_option("--caption", ga.caption)->required();
    cmd->add_option("--seconds", ga.seconds);
    cmd->add_option("--out", ga.out)->required();
    cmd->add_option("--dump-tokens", ga.dump_tokens);
    cmd->add_option("--seed", ga.seed);
    cmd->add_option("--cond-levels-semantic", ga.cond_sem);
    cmd->add_option("--cond-levels-coarse", ga.cond_coarse);
  };
  auto* generate_cmd = app.add_subcommand("generate", "caption -> wav");
  add_gen_common(generate_cmd, true);
  auto* generate_long_cmd = app.add_subcommand("generate-long", "windowed long generation");
  add_gen_common(generate_long_cmd, true);
  generate_long_cmd->add_option("--stride", ga.stride);
  generate_long_cmd->add_option("--context", ga.context);
  auto* story_cmd = app.add_subcommand("story", "timed captions -> wav");
  add_gen_common(story_cmd, false);
  story_cmd->add_option("--segment", ga.segments, "time:caption (repeatable)")->required();
  story_cmd->add_option("--stride", ga.stride);
  auto* gen_mel_cmd = app.add_subcommand("generate-melody", "caption + melody wav -> wav");
  add_gen_common(gen_mel_cmd, true);
  gen_mel_cmd->add_option("--melody", ga.melody_wav)->required();

  std::string generated_dir, report_path;
  int count = 64;
  double seconds = 2.0;
  bool random_cond = false;
  auto* gen_batch = app.add_subcommand("gen-batch", "generate an evaluation set");
  gen_batch->add_option("--models", models_dir)->required();
  gen_batch->add_option("--corpus", corpus_dir)->required();
  gen_batch->add_option("--out", out_dir)->required();
  gen_batch->add_option("--count", count);
  gen_batch->add_option("--seconds", seconds);
  gen_batch->add_option("--seed", seed);
  gen_batch->add_flag("--random-cond", random_cond);

  auto* eval_cmd = app.add_subcommand("eval", "FAD-analog / KLD / MCC of a generated set");
  eval_cmd->add_option("--models", models_dir)->required();
  eval_cmd->add_option("--corpus", corpus_dir)->required();
  eval_cmd->add_option("--generated", generated_dir)->required();
  eval_cmd->add_option("--out", report_path)->required();

  int mem_count = 0;
  auto* memcheck_cmd = app.add_subcommand("memcheck", "semantic-stage memorization audit");
  memcheck_cmd->add_option("--models", models_dir)->required();
  memcheck_cmd->add_option("--corpus", corpus_dir)->required();
  memcheck_cmd->add_option("--out", out_dir)->required();
  memcheck_cmd->add_option("--count", mem_count);

  std::string ablate_kind;
  auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation table");
  ablate_cmd->add_option("--kind", ablate_kind)
      ->required()
      ->check(CLI::IsMember({"rvq-levels", "no-semantic", "text-encoder"}));
  ablate_cmd->add_option("--corpus", corpus_dir)->required();
  ablate_cmd->add_option("--models", models_dir)->required();
  ablate_cmd->add_option("--out", report_path)->required();
  ablate_cmd->add_option("--count", count);
  ablate_cmd->add_option("--seconds", seconds);
  ablate_cmd->add_option("--seed", seed);

  auto* show_config = app.add_subcommand("show-config", "print the materialized configuration");
  show_config->add_option("--config", config_path);

  std::vector<const char*> argv;
  argv.push_back("musegen");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    ga.seed_set = generate_cmd->count("--seed") > 0 || generate_long_cmd->count("--seed") > 0 ||
                  story_cmd->count("--seed") > 0 || gen_mel_cmd->count("--seed") > 0;
    seed_set = gen_batch->count("--seed") > 0 || ablate_cmd->count("--seed") > 0;

    if (gen_corpus->parsed())
      return cmd_gen_corpus(config_path, out_dir,
                            seed_opt->count() > 0 ? std::optional<uint64_t>(seed)
                                                  : std::nullopt);
    if (train_tok->parsed()) return cmd_train_tokenizers(config_path, corpus_dir, models_dir);
    if (train_embed->parsed()) return cmd_train_embed(config_path, corpus_dir, models_dir);
    if (train_melody_cmd->parsed())
      return cmd_train_melody(config_path, corpus_dir, models_dir);
    if (train_stages->parsed())
      return cmd_train_stages(config_path, corpus_dir, models_dir, which_stage);

    if (generate_cmd->parsed() || generate_long_cmd->parsed() || story_cmd->parsed() ||
        gen_mel_cmd->parsed()) {
      ModelBundle b = ModelBundle::load(ga.models);
      GenerationRequest req = base_request(b, ga);
      if (generate_cmd->parsed()) {
        req.captions = {{0.0, ga.caption}};
        return finish_generation(generate(b, req), ga);
      }
      if (generate_long_cmd->parsed()) {
        req.captions = {{0.0, ga.caption}};
        return finish_generation(generate_long(b, req, ga.stride, ga.context), ga);
      }
      if (story_cmd->parsed()) {
        req.captions = parse_segments(ga.segments);
        return finish_generation(story_mode(b, req, ga.stride), ga);
      }
      req.captions = {{0.0, ga.caption}};
      req.melody_clip = read_wav(ga.melody_wav);
      return finish_generation(generate_with_melody(b, req), ga);
    }

    if (gen_batch->parsed()) {
      ModelBundle b = ModelBundle::load(models_dir);
      CorpusManifest manifest = load_corpus_manifest(corpus_dir);
      EvalOptions opt;
      opt.count = count;
      opt.duration_s = seconds;
      opt.seed = seed_set ? seed : load_models_config(models_dir).master_seed;
      opt.random_conditioning = random_cond;
      EvalSet set = generate_eval_set(b, manifest, corpus_dir, opt);
      fs::create_directories(out_dir);
      json entries = json::array();
      for (size_t i = 0; i < set.generated.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "gen_%04d.wav", static_cast<int>(i));
        write_wav(fs::path(out_dir) / name, set.generated[i]);
        entries.push_back(json{{"file", name},
                               {"caption", set.captions[i]},
                               {"ref_id", set.ref_ids[i]}});
      }
      json manifest_json{{"magic", "MGGENSET"}, {"version", 1}, {"entries", entries}};
      std::ofstream f(fs::path(out_dir) / "gen_manifest.json");
      f << manifest_json.dump(1) << "\n";
      std::printf("generated=%d out=%s\n", static_cast<int>(set.generated.size()),
                  out_dir.c_str());
      return 0;
    }

    if (eval_cmd->parsed()) {
      ModelBundle b = ModelBundle::load(models_dir);
      CorpusManifest manifest = load_corpus_manifest(corpus_dir);
      std::ifstream f(fs::path(generated_dir) / "gen_manifest.json");
      if (!f)
        throw MissingArtifactError("missing generated-set manifest in " + generated_dir);
      json j;
      f >> j;
      if (!j.contains("magic") || j["magic"] != "MGGENSET")
        throw FormatError("generated-set manifest has wrong magic");
      EvalSet set;
      for (const auto& e : j.at("entries")) {
        set.captions.push_back(e.at("caption").get<std::string>());
        set.ref_ids.push_back(e.at("ref_id").get<int>());
        set.generated.push_back(read_wav(fs::path(generated_dir) /
                                         e.at("file").get<std::string>()));
        const int rid = set.ref_ids.back();
        require(rid >= 0 && rid < static_cast<int>(manifest.clips.size()),
                "eval: ref_id out of corpus range");
        set.reference.push_back(
            load_corpus_clip(corpus_dir, manifest.clips[static_cast<size_t>(rid)]));
      }
      MetricReport r = evaluate_sets(b, set);
      write_metric_report(report_path, r);
      std::printf("count=%d fad=%.6f kld=%.6f mcc=%.6f\n", r.count, r.fad, r.kld, r.mcc);
      return 0;
    }

    if (memcheck_cmd->parsed()) return cmd_memcheck(models_dir, corpus_dir, out_dir, mem_count);
    if (ablate_cmd->parsed())
      return cmd_ablate(ablate_kind, corpus_dir, models_dir, report_path, count, seconds,
                        seed_set ? seed : load_models_config(models_dir).master_seed);
    if (show_config->parsed()) {
      ExperimentConfig cfg = effective_config(config_path, "");
      std::printf("%s\n", cfg.to_json_string().c_str());
      return 0;
    }
    return 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return 3;
  } catch (const StateError& e) {
    std::fprintf(stderr, "state error: %s\n", e.what());
    return 3;
  } catch (const MissingArtifactError& e) {
    std::fprintf(stderr, "missing artifact: %s\n", e.what());
    return 4;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io/format error: %s\n", e.what());
    return 4;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 5;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 4;
  }
}

}  // namespace musegen
