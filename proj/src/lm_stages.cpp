#include "musegen/lm_stages.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "musegen/artifact_io.hpp"

namespace musegen {

std::string stage_kind_name(StageKind k) {
  switch (k) {
    case StageKind::semantic: return "semantic";
    case StageKind::coarse_acoustic: return "coarse_acoustic";
    case StageKind::fine_acoustic: return "fine_acoustic";
    case StageKind::direct_acoustic: return "direct_acoustic";
    case StageKind::encoder_conditioned: return "encoder_conditioned";
  }
  return "?";
}

StageKind stage_kind_from_name(const std::string& name) {
  if (name == "semantic") return StageKind::semantic;
  if (name == "coarse_acoustic") return StageKind::coarse_acoustic;
  if (name == "fine_acoustic") return StageKind::fine_acoustic;
  if (name == "direct_acoustic") return StageKind::direct_acoustic;
  if (name == "encoder_conditioned") return StageKind::encoder_conditioned;
  throw ValidationError("unknown stage kind: " + name);
}

std::string encoder_mode_name(EncoderMode m) {
  switch (m) {
    case EncoderMode::frozen: return "frozen";
    case EncoderMode::finetuned: return "finetuned";
    case EncoderMode::scratch: return "scratch";
  }
  return "?";
}

void StageConfig::validate() const {
  require(layers >= 1 && heads >= 1 && model_dim >= 1 && ff_dim >= 1,
          "stage config: all dims must be >= 1");
  require(model_dim % heads == 0, "stage config: model_dim must be divisible by heads");
  require(dropout >= 0.0 && dropout < 1.0, "stage config: dropout must be in [0,1)");
  require(max_seq_len >= 2, "stage config: max_seq_len too small");
  require(rel_buckets >= 2 && rel_max_dist >= rel_buckets / 2,
          "stage config: bad relative-bias bucket setup");
  require(dims.cond_levels >= 1 && dims.cond_vocab >= 2, "stage config: bad cond dims");
  require(dims.semantic_vocab >= 2, "stage config: bad semantic vocab");
  require(dims.acoustic_levels >= 2 && dims.coarse_levels >= 1 &&
              dims.coarse_levels < dims.acoustic_levels,
          "stage config: bad coarse/fine split");
}

int relative_bucket(int distance, int n_buckets, int max_dist) {
  require(distance >= 0, "relative_bucket: causal distances only");
  const int max_exact = n_buckets / 2;
  if (distance < max_exact) return distance;
  const double v = std::log(static_cast<double>(distance) / max_exact) /
                   std::log(static_cast<double>(max_dist) / max_exact) *
                   (n_buckets - max_exact);
  const int b = max_exact + static_cast<int>(v);
  return std::min(b, n_buckets - 1);
}

StageLayoutSpec StageLayoutSpec::make(StageKind kind, const TokenDims& dims) {
  StageLayoutSpec spec;
  spec.stage = kind;
  auto seg = [&](SegKind k, int levels, int vocab, bool pred, bool opt = false) {
    spec.defs.push_back(SegmentDef{k, levels, vocab, pred, opt});
  };
  switch (kind) {
    case StageKind::semantic:
      seg(SegKind::cond, dims.cond_levels, dims.cond_vocab, false);
      seg(SegKind::melody, dims.melody_levels, dims.melody_vocab, false, true);
      seg(SegKind::semantic, 1, dims.semantic_vocab, true);
      break;
    case StageKind::coarse_acoustic:
      seg(SegKind::cond, dims.cond_levels, dims.cond_vocab, false);
      seg(SegKind::semantic, 1, dims.semantic_vocab, false);
      seg(SegKind::coarse, dims.coarse_levels, dims.acoustic_vocab, true);
      break;
    case StageKind::fine_acoustic:
      seg(SegKind::coarse, dims.coarse_levels, dims.acoustic_vocab, false);
      seg(SegKind::fine, dims.fine_levels(), dims.acoustic_vocab, true);
      break;
    case StageKind::direct_acoustic:
      seg(SegKind::cond, dims.cond_levels, dims.cond_vocab, false);
      seg(SegKind::coarse, dims.coarse_levels, dims.acoustic_vocab, true);
      break;
    case StageKind::encoder_conditioned:
      spec.has_prefix = true;
      seg(SegKind::semantic, 1, dims.semantic_vocab, true);
      seg(SegKind::coarse, dims.coarse_levels, dims.acoustic_vocab, true);
      break;
  }
  int off = 0, pred_off = 0;
  for (const auto& d : spec.defs) {
    spec.block_offset.push_back(off);
    off += d.levels * d.vocab;
    if (d.predicted) {
      spec.pred_offset.push_back(pred_off);
      pred_off += d.levels * d.vocab;
    } else {
      spec.pred_offset.push_back(-1);
    }
  }
  spec.sep_id = off;
  spec.input_vocab = off + 1;
  spec.output_vocab = pred_off;
  return spec;
}

int StageLayoutSpec::def_index(SegKind kind) const {
  for (size_t i = 0; i < defs.size(); ++i)
    if (defs[i].kind == kind) return static_cast<int>(i);
  return -1;
}

int StageLayoutSpec::input_id(int def_idx, int level, int token) const {
  const SegmentDef& d = defs[static_cast<size_t>(def_idx)];
  require(level >= 0 && level < d.levels && token >= 0 && token < d.vocab,
          "layout: token out of segment vocab");
  return block_offset[static_cast<size_t>(def_idx)] + level * d.vocab + token;
}

int StageLayoutSpec::output_local(int def_idx, int level, int token) const {
  const SegmentDef& d = defs[static_cast<size_t>(def_idx)];
  require(d.predicted, "layout: segment is not predicted");
  require(level >= 0 && level < d.levels && token >= 0 && token < d.vocab,
          "layout: token out of segment vocab");
  return pred_offset[static_cast<size_t>(def_idx)] + level * d.vocab + token;
}

int StageLayoutSpec::global_of_local(int local) const {
  require(local >= 0 && local < output_vocab, "layout: local output id out of range");
  for (size_t i = 0; i < defs.size(); ++i) {
    if (!defs[i].predicted) continue;
    const int size = defs[i].levels * defs[i].vocab;
    const int off = pred_offset[i];
    if (local >= off && local < off + size) return block_offset[i] + (local - off);
  }
  throw ValidationError("layout: unmapped local output id");
}

int StageLayoutSpec::output_local_of_global(int global) const {
  for (size_t i = 0; i < defs.size(); ++i) {
    const int size = defs[i].levels * defs[i].vocab;
    const int off = block_offset[i];
    if (global >= off && global < off + size) {
      require(defs[i].predicted, "layout: global id is not in a predicted segment");
      return pred_offset[i] + (global - off);
    }
  }
  throw ValidationError("layout: global id out of any segment block");
}

std::pair<int, int> StageLayoutSpec::level_slice(int def_idx, int pos_in_segment) const {
  const SegmentDef& d = defs[static_cast<size_t>(def_idx)];
  require(d.predicted, "layout: slice on non-predicted segment");
  const int level = pos_in_segment % d.levels;
  const int lo = pred_offset[static_cast<size_t>(def_idx)] + level * d.vocab;
  return {lo, lo + d.vocab};
}

namespace {

void check_source(const TokenSequence* ts, const SegmentDef& def, const char* what) {
  require(ts != nullptr, std::string("build_layout: missing segment: ") + what);
  if (def.kind == SegKind::cond) {
    // Conditioning may arrive level-truncated (the RVQ-level sweep).
    require(ts->levels() >= 1 && ts->levels() <= def.levels,
            std::string("build_layout: conditioning level count out of range for ") + what);
  } else {
    require(ts->levels() == def.levels,
            std::string("build_layout: level count mismatch for ") + what);
  }
  require(ts->vocab == def.vocab, std::string("build_layout: vocab mismatch for ") + what);
}

}  // namespace

SequenceLayout build_layout(const StageLayoutSpec& spec, const LayoutInputs& in) {
  SequenceLayout out;
  out.spec = spec;

  // Map each segment def to its source for this stage kind.
  std::vector<const TokenSequence*> sources(spec.defs.size(), nullptr);
  switch (spec.stage) {
    case StageKind::semantic:
      require(in.semantic == nullptr && in.coarse == nullptr && in.target2 == nullptr,
              "build_layout: extra segment for semantic stage");
      sources[0] = in.cond;
      sources[1] = in.melody;  // optional
      sources[2] = in.target;
      break;
    case StageKind::coarse_acoustic:
      require(in.melody == nullptr && in.coarse == nullptr && in.target2 == nullptr,
              "build_layout: extra segment for coarse stage");
      sources[0] = in.cond;
      sources[1] = in.semantic;
      sources[2] = in.target;
      break;
    case StageKind::fine_acoustic:
      require(in.cond == nullptr && in.melody == nullptr && in.semantic == nullptr &&
                  in.target2 == nullptr,
              "build_layout: extra segment for fine stage");
      sources[0] = in.coarse;
      sources[1] = in.target;
      break;
    case StageKind::direct_acoustic:
      require(in.melody == nullptr && in.semantic == nullptr && in.coarse == nullptr &&
                  in.target2 == nullptr,
              "build_layout: extra segment for direct acoustic stage (no semantic tokens)");
      sources[0] = in.cond;
      sources[1] = in.target;
      break;
    case StageKind::encoder_conditioned:
      require(in.cond == nullptr && in.melody == nullptr && in.coarse == nullptr,
              "build_layout: extra segment for encoder-conditioned stage");
      require(!in.prefix_word_ids.empty(), "build_layout: encoder stage needs word prefix");
      sources[0] = in.target;
      sources[1] = in.target2;
      break;
  }

  out.prefix_word_ids = in.prefix_word_ids;
  if (spec.has_prefix) {
    out.flat.push_back(static_cast<int32_t>(spec.sep_id));
    out.predicted.push_back(0);
  }

  bool first = !spec.has_prefix;
  for (size_t i = 0; i < spec.defs.size(); ++i) {
    const SegmentDef& def = spec.defs[i];
    const TokenSequence* src = sources[i];
    if (src == nullptr) {
      require(def.optional, std::string("build_layout: missing segment for ") +
                                stage_kind_name(spec.stage));
      continue;
    }
    check_source(src, def, stage_kind_name(spec.stage).c_str());
    if (!first) {
      out.flat.push_back(static_cast<int32_t>(spec.sep_id));
      out.predicted.push_back(0);
    }
    first = false;
    SequenceLayout::Segment seg;
    seg.def_idx = static_cast<int>(i);
    seg.ids = src->ids;
    out.segments.push_back(seg);
    for (int f = 0; f < src->frames(); ++f)
      for (int l = 0; l < src->levels(); ++l) {
        out.flat.push_back(
            static_cast<int32_t>(spec.input_id(static_cast<int>(i), l, src->ids(f, l))));
        out.predicted.push_back(def.predicted ? 1 : 0);
      }
  }
  require(!out.flat.empty(), "build_layout: empty layout");
  return out;
}

std::vector<SequenceLayout::Segment> SequenceLayout::reconstruct_segments() const {
  std::vector<Segment> result;
  size_t pos = spec.has_prefix ? 1 : 0;  // skip leading separator
  for (size_t s = 0; s < segments.size(); ++s) {
    if (s > 0 || !spec.has_prefix) {
      if (s > 0) {
        require(pos < flat.size() && flat[pos] == spec.sep_id,
                "layout: expected separator during reconstruction");
        ++pos;
      }
    }
    const SegmentDef& def = spec.defs[static_cast<size_t>(segments[s].def_idx)];
    const int frames = static_cast<int>(segments[s].ids.rows());
    const int levels = static_cast<int>(segments[s].ids.cols());
    Segment seg;
    seg.def_idx = segments[s].def_idx;
    seg.ids.resize(frames, levels);
    for (int f = 0; f < frames; ++f)
      for (int l = 0; l < levels; ++l) {
        const int id = flat[pos++];
        seg.ids(f, l) = id - spec.block_offset[static_cast<size_t>(seg.def_idx)] - l * def.vocab;
      }
    result.push_back(seg);
  }
  return result;
}

StageTrainStats train_stage(StageModel& m, const std::vector<SequenceLayout>& dataset,
                            const StageTrainConfig& cfg) {
  require(!dataset.empty(), "train_stage: empty dataset");
  require(cfg.batch >= 1 && cfg.steps >= 1, "train_stage: bad batch/steps");

  Rng order_rng(cfg.seed);
  Rng dropout_rng(Rng::mix(cfg.seed, 0xd50u));
  const bool use_dropout = m.cfg.dropout > 0.0;

  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();  // trigger shuffle on first use

  StageTrainStats stats;
  stats.parameter_count = m.parameter_count();

  for (int step = 0; step < cfg.steps; ++step) {
    m.zero_grads();
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      if (cursor >= order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      const SequenceLayout& ex = dataset[order[cursor++]];
      batch_loss += m.loss_and_grad(ex, use_dropout ? &dropout_rng : nullptr);
    }
    batch_loss /= cfg.batch;
    if (!std::isfinite(batch_loss))
      throw NumericError("train_stage: non-finite loss at step " + std::to_string(step));

    // Average grads over the batch, clip the global norm, apply SGD.
    double norm2 = 0.0;
    m.visit_params([&](const std::string&, StageModel::Param& p) {
      p.g /= static_cast<float>(cfg.batch);
      norm2 += static_cast<double>(p.g.squaredNorm());
    });
    const double norm = std::sqrt(norm2);
    const double clip_scale = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

    double lr = cfg.lr;
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
      lr *= static_cast<double>(step + 1) / cfg.warmup_steps;
    else if (cfg.steps > cfg.warmup_steps) {
      const double t = static_cast<double>(step - cfg.warmup_steps) /
                       std::max(1, cfg.steps - cfg.warmup_steps);
      lr *= cfg.final_lr_frac + (1.0 - cfg.final_lr_frac) * 0.5 * (1.0 + std::cos(3.14159265358979 * t));
    }
    const float scale = static_cast<float>(lr * clip_scale);
    m.visit_params([&](const std::string& name, StageModel::Param& p) {
      if (!m.encoder_trainable && name.rfind("enc_", 0) == 0) return;  // frozen tower
      p.v -= scale * p.g;
    });
    stats.step_loss.push_back(batch_loss);
  }
  stats.initial_loss = stats.step_loss.front();
  stats.final_loss = stats.step_loss.back();
  if (stats.step_loss.size() >= 2 && stats.final_loss >= stats.initial_loss)
    throw NumericError("train_stage: loss did not improve (" +
                       std::to_string(stats.initial_loss) + " -> " +
                       std::to_string(stats.final_loss) + ")");
  return stats;
}

std::vector<int32_t> sample_tokens(const StageModel& m, const SampleRequest& req) {
  require(req.n_new >= 1, "sample: length must be >= 1");
  require(req.greedy || req.temperature > 0.0, "sample: temperature must be > 0");
  require(!req.prompt.empty(), "sample: empty prompt");

  StageModel::Decoder dec;
  dec.reset(m);
  const std::vector<int>* prefix = req.prefix_word_ids.empty() ? nullptr : &req.prefix_word_ids;
  Eigen::VectorXf logits = dec.prefill(req.prompt, prefix);

  Rng rng(req.seed);
  std::vector<int32_t> out;
  out.reserve(static_cast<size_t>(req.n_new));
  for (int step = 0; step < req.n_new; ++step) {
    int lo = 0, hi = m.layout.output_vocab;
    if (req.slice) {
      auto s = req.slice(step);
      lo = s.first;
      hi = s.second;
      require(lo >= 0 && hi > lo && hi <= m.layout.output_vocab, "sample: bad slice");
    }
    int local;
    if (req.greedy) {
      local = lo;
      float best = logits(lo);
      for (int k = lo + 1; k < hi; ++k)
        if (logits(k) > best) {
          best = logits(k);
          local = k;
        }
    } else {
      Eigen::VectorXd p(hi - lo);
      double mx = -1e300;
      for (int k = lo; k < hi; ++k)
        mx = std::max(mx, static_cast<double>(logits(k)) / req.temperature);
      double sum = 0.0;
      for (int k = lo; k < hi; ++k) {
        p(k - lo) = std::exp(static_cast<double>(logits(k)) / req.temperature - mx);
        sum += p(k - lo);
      }
      const double target = rng.uniform() * sum;
      double acc = 0.0;
      local = hi - 1;
      for (int k = lo; k < hi; ++k) {
        acc += p(k - lo);
        if (acc >= target) {
          local = k;
          break;
        }
      }
    }
    const int global = m.layout.global_of_local(local);
    out.push_back(static_cast<int32_t>(global));
    if (step + 1 < req.n_new) logits = dec.step_token(static_cast<int32_t>(global));
  }
  return out;
}

namespace {
constexpr const char* kStageType = "STAGEM";
}

void save_stage(const StageModel& m, const std::filesystem::path& path) {
  ArtifactWriter w(kStageType, 1);
  w.add_string("kind", stage_kind_name(m.cfg.kind));
  w.add_scalar("layers", m.cfg.layers);
  w.add_scalar("heads", m.cfg.heads);
  w.add_scalar("model_dim", m.cfg.model_dim);
  w.add_scalar("ff_dim", m.cfg.ff_dim);
  w.add_scalar("dropout", m.cfg.dropout);
  w.add_scalar("max_seq_len", m.cfg.max_seq_len);
  w.add_scalar("rel_buckets", m.cfg.rel_buckets);
  w.add_scalar("rel_max_dist", m.cfg.rel_max_dist);
  w.add_scalar("encoder_dim", m.cfg.encoder_dim);
  w.add_scalar("encoder_trainable", m.encoder_trainable ? 1.0 : 0.0);
  w.add_scalar("dims.cond_levels", m.cfg.dims.cond_levels);
  w.add_scalar("dims.cond_vocab", m.cfg.dims.cond_vocab);
  w.add_scalar("dims.melody_levels", m.cfg.dims.melody_levels);
  w.add_scalar("dims.melody_vocab", m.cfg.dims.melody_vocab);
  w.add_scalar("dims.semantic_vocab", m.cfg.dims.semantic_vocab);
  w.add_scalar("dims.acoustic_levels", m.cfg.dims.acoustic_levels);
  w.add_scalar("dims.acoustic_vocab", m.cfg.dims.acoustic_vocab);
  w.add_scalar("dims.coarse_levels", m.cfg.dims.coarse_levels);
  const_cast<StageModel&>(m).visit_params([&](const std::string& name, StageModel::Param& p) {
    w.add_f64("param." + name, Eigen::MatrixXd(p.v.cast<double>()));
  });
  w.save(path);
}

StageModel load_stage(const std::filesystem::path& path) {
  ArtifactReader r(path, kStageType, 1);
  StageModel m;
  m.cfg.kind = stage_kind_from_name(r.str("kind"));
  m.cfg.layers = static_cast<int>(r.scalar("layers"));
  m.cfg.heads = static_cast<int>(r.scalar("heads"));
  m.cfg.model_dim = static_cast<int>(r.scalar("model_dim"));
  m.cfg.ff_dim = static_cast<int>(r.scalar("ff_dim"));
  m.cfg.dropout = r.scalar("dropout");
  m.cfg.max_seq_len = static_cast<int>(r.scalar("max_seq_len"));
  m.cfg.rel_buckets = static_cast<int>(r.scalar("rel_buckets"));
  m.cfg.rel_max_dist = static_cast<int>(r.scalar("rel_max_dist"));
  m.cfg.encoder_dim = static_cast<int>(r.scalar("encoder_dim"));
  m.cfg.dims.cond_levels = static_cast<int>(r.scalar("dims.cond_levels"));
  m.cfg.dims.cond_vocab = static_cast<int>(r.scalar("dims.cond_vocab"));
  m.cfg.dims.melody_levels = static_cast<int>(r.scalar("dims.melody_levels"));
  m.cfg.dims.melody_vocab = static_cast<int>(r.scalar("dims.melody_vocab"));
  m.cfg.dims.semantic_vocab = static_cast<int>(r.scalar("dims.semantic_vocab"));
  m.cfg.dims.acoustic_levels = static_cast<int>(r.scalar("dims.acoustic_levels"));
  m.cfg.dims.acoustic_vocab = static_cast<int>(r.scalar("dims.acoustic_vocab"));
  m.cfg.dims.coarse_levels = static_cast<int>(r.scalar("dims.coarse_levels"));
  m.init(0);
  const bool enc_trainable = r.scalar("encoder_trainable") != 0.0;
  if (m.cfg.kind == StageKind::encoder_conditioned && r.has("param.enc_word_embed")) {
    // Shape the encoder params before the visit below fills them.
    Eigen::MatrixXd we = r.f64("param.enc_word_embed");
    m.enc_word_embed.setup(we.rows(), we.cols());
    m.enc_w1.setup(r.f64("param.enc_w1").rows(), r.f64("param.enc_w1").cols());
    m.enc_b1.setup(r.f64("param.enc_b1").rows(), 1);
    m.enc_w2.setup(r.f64("param.enc_w2").rows(), r.f64("param.enc_w2").cols());
    m.enc_b2.setup(r.f64("param.enc_b2").rows(), 1);
  }
  m.visit_params([&](const std::string& name, StageModel::Param& p) {
    Eigen::MatrixXd v = r.f64("param." + name);
    if (v.rows() != p.v.rows() || v.cols() != p.v.cols())
      throw FormatError("stage model: shape mismatch for " + name + " in " + path.string());
    p.v = v.cast<float>();
  });
  m.encoder_trainable = enc_trainable;
  return m;
}

StageModel make_encoder_stage(const StageConfig& cfg, const JointEmbedModel* pretrained,
                              EncoderMode mode, uint64_t seed) {
  require(cfg.kind == StageKind::encoder_conditioned,
          "make_encoder_stage: wrong stage kind");
  if (mode != EncoderMode::scratch)
    require(pretrained != nullptr,
            "make_encoder_stage: frozen/finetuned modes require a pretrained text tower");
  require(pretrained != nullptr, "make_encoder_stage: vocabulary source required");

  StageModel m;
  m.cfg = cfg;
  m.init(seed);

  const long v = static_cast<long>(pretrained->vocab.words.size());
  const int d_e = cfg.encoder_dim;
  const int hidden = pretrained->cfg.hidden;
  m.enc_word_embed.setup(v, d_e);
  m.enc_w1.setup(hidden, d_e);
  m.enc_b1.setup(hidden, 1);
  m.enc_w2.setup(d_e, hidden);
  m.enc_b2.setup(d_e, 1);

  if (mode == EncoderMode::scratch) {
    Rng rng(Rng::mix(seed, 0xe2c0de));
    m.enc_word_embed.v = detail::seeded_normal<float>(v, d_e, 1.0 / std::sqrt(d_e), rng);
    m.enc_w1.v = detail::seeded_normal<float>(hidden, d_e, std::sqrt(2.0 / d_e), rng);
    m.enc_w2.v = detail::seeded_normal<float>(d_e, hidden, std::sqrt(2.0 / hidden), rng);
    m.encoder_trainable = true;
  } else {
    require(pretrained->cfg.d_e == d_e, "make_encoder_stage: encoder_dim mismatch");
    m.enc_word_embed.v = pretrained->word_embed.cast<float>();
    m.enc_w1.v = pretrained->text_tower.w1.cast<float>();
    m.enc_b1.v = pretrained->text_tower.b1.cast<float>();
    m.enc_w2.v = pretrained->text_tower.w2.cast<float>();
    m.enc_b2.v = pretrained->text_tower.b2.cast<float>();
    m.encoder_trainable = mode == EncoderMode::finetuned;
  }
  return m;
}

}  // namespace musegen
