#include "musegen/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "musegen/errors.hpp"
#include "musegen/rng.hpp"

namespace musegen {

namespace {
constexpr double kPi = 3.14159265358979323846;

int iround(double v) { return static_cast<int>(std::llround(v)); }

// Melody windows fully inside [t0, t1].
std::pair<int, int> melody_window_range(const MelodyEmbedConfig& mcfg, int total_windows,
                                        double t0, double t1) {
  const double hop = mcfg.hop_s;
  int first = static_cast<int>(std::ceil((t0 - 1e-9) / hop));
  first = std::max(first, 0);
  int last = first;
  while (last < total_windows && (last)*hop + mcfg.window_s <= t1 + 1e-9) ++last;
  return {first, std::max(first, last)};
}

}  // namespace

Resynthesizer::Resynthesizer(int sample_rate, double frame_rate, int dim)
    : sample_rate_(sample_rate), frame_rate_(frame_rate) {
  const double hop_f = sample_rate / frame_rate;
  hop_ = iround(hop_f);
  require(hop_ >= 1 && std::abs(hop_f - hop_) < 1e-9,
          "resynthesizer: frame rate must divide the sample rate");
  fb_ = Filterbank::make(dim, sample_rate, 2 * hop_);
  // Probe each band with a unit sine so synthesis amplitudes invert analysis.
  gain_.resize(dim);
  for (int b = 0; b < dim; ++b) {
    AudioClip probe;
    probe.sample_rate = sample_rate;
    const int n = sample_rate / 2;
    probe.samples.resize(static_cast<size_t>(n));
    const double f = fb_.centers_hz[static_cast<size_t>(b)];
    for (int i = 0; i < n; ++i)
      probe.samples[static_cast<size_t>(i)] = std::sin(2.0 * kPi * f * i / sample_rate);
    FeatureSequence fs = frame_features(probe, frame_rate, dim);
    double energy = fs.frames.col(b).array().exp().mean();
    gain_(b) = 1.0 / std::sqrt(std::max(energy, 1e-6));
  }
}

AudioClip Resynthesizer::synthesize(const Eigen::MatrixXd& log_band_energies) const {
  const int frames = static_cast<int>(log_band_energies.rows());
  require(frames >= 1, "resynthesizer: empty feature sequence");
  require(log_band_energies.cols() == fb_.dim, "resynthesizer: band count mismatch");
  const int window = 2 * hop_;
  const int n = frames * hop_;

  Eigen::VectorXd hann(window);
  for (int i = 0; i < window; ++i) hann(i) = 0.5 - 0.5 * std::cos(2.0 * kPi * i / window);

  AudioClip out;
  out.sample_rate = sample_rate_;
  out.samples.assign(static_cast<size_t>(n + window), 0.0);
  for (int t = 0; t < frames; ++t) {
    Eigen::VectorXd amp(fb_.dim);
    for (int b = 0; b < fb_.dim; ++b) {
      const double energy = std::exp(log_band_energies(t, b)) - kLogEnergyFloor;
      amp(b) = energy > 0.0 ? gain_(b) * std::sqrt(energy) : 0.0;
    }
    const int start = t * hop_;
    for (int i = 0; i < window; ++i) {
      const int idx = start + i;
      double v = 0.0;
      for (int b = 0; b < fb_.dim; ++b) {
        if (amp(b) == 0.0) continue;
        v += amp(b) * std::sin(2.0 * kPi * fb_.centers_hz[static_cast<size_t>(b)] * idx /
                               sample_rate_);
      }
      out.samples[static_cast<size_t>(idx)] += v * hann(i);
    }
  }
  out.samples.resize(static_cast<size_t>(n));
  double peak = 0.0;
  for (double s : out.samples) peak = std::max(peak, std::abs(s));
  if (peak > 0.99)
    for (double& s : out.samples) s *= 0.99 / peak;
  return out;
}

TokenizedClip tokenize_clip(const Tokenizers& tk, const AudioClip& clip) {
  TokenizedClip out;
  const PipelineConfig& p = tk.pcfg;
  FeatureSequence sem = frame_features(clip, p.semantic_rate, p.feature_dim);
  out.semantic = tk.semantic_tok->assign(smooth_neighbors(sem));
  FeatureSequence ac = frame_features(clip, p.acoustic_rate, p.feature_dim);
  out.acoustic = tk.acoustic_rvq->encode_sequence(ac.frames, TokenKind::acoustic, p.acoustic_rate);
  out.cond = conditioning_tokens_audio(*tk.embed, *tk.cond_rvq, clip);
  out.melody = melody_tokens(*tk.melody, *tk.melody_rvq, clip);
  return out;
}

namespace {

TokenSequence slice_frames(const TokenSequence& ts, int first, int count) {
  TokenSequence out = ts;
  out.ids = ts.ids.middleRows(first, count).eval();
  return out;
}

TokenSequence empty_like(int levels, int vocab, TokenKind kind, double rate) {
  TokenSequence out;
  out.ids.resize(0, levels);
  out.vocab = vocab;
  out.frame_rate = rate;
  out.kind = kind;
  return out;
}

TokenSequence tokens_from_flat(const StageLayoutSpec& spec, SegKind seg,
                               const std::vector<int32_t>& globals, int vocab, int levels,
                               TokenKind kind, double rate) {
  const int def_idx = spec.def_index(seg);
  require(def_idx >= 0, "tokens_from_flat: segment not in layout");
  require(static_cast<int>(globals.size()) % levels == 0, "tokens_from_flat: ragged ids");
  const int frames = static_cast<int>(globals.size()) / levels;
  TokenSequence out;
  out.ids.resize(frames, levels);
  for (int f = 0; f < frames; ++f)
    for (int l = 0; l < levels; ++l) {
      const int id = globals[static_cast<size_t>(f) * levels + l] -
                     spec.block_offset[static_cast<size_t>(def_idx)] - l * vocab;
      require(id >= 0 && id < vocab, "tokens_from_flat: id outside segment block");
      out.ids(f, l) = id;
    }
  out.vocab = vocab;
  out.frame_rate = rate;
  out.kind = kind;
  return out;
}

int caption_index_at(const std::vector<double>& switch_times, double t) {
  int idx = 0;
  for (size_t i = 0; i < switch_times.size(); ++i)
    if (switch_times[i] <= t + 1e-9) idx = static_cast<int>(i);
  return idx;
}

// Windowed semantic sampling; also drives the story-mode schedule.
TokenSequence run_semantic(const ModelBundle& b, const std::vector<TokenSequence>& cond,
                           const std::vector<double>& switch_times,
                           const std::optional<TokenSequence>& mel, int n_frames,
                           double stride_s, double context_s, double temp, uint64_t seed,
                           std::vector<ScheduleEntry>* schedule) {
  const PipelineConfig& p = b.pcfg;
  const double rate = p.semantic_rate;
  const int crop = iround(p.semantic_crop_s * rate);
  const int stride = iround(stride_s * rate);
  const int context = iround(context_s * rate);
  require(n_frames >= 1, "generate: zero-length semantic plan");

  TokenSequence sem = empty_like(1, p.dims.semantic_vocab, TokenKind::semantic, rate);
  int have = 0;
  int step = 0;
  while (have < n_frames) {
    const double t_new = have / rate;  // time of the first new token
    const int cap = caption_index_at(switch_times, t_new);
    int n_new, ctx;
    if (have == 0) {
      n_new = std::min(n_frames, crop);
      ctx = 0;
    } else {
      n_new = std::min(stride, n_frames - have);
      ctx = context;
    }
    // The window spans [win_t0, win_t0 + crop_s) in clip time.
    const double win_t0 = (have - ctx) / rate;
    TokenSequence ctx_tokens = ctx > 0 ? slice_frames(sem, have - ctx, ctx)
                                       : empty_like(1, p.dims.semantic_vocab,
                                                    TokenKind::semantic, rate);
    std::optional<TokenSequence> mel_slice;
    if (mel.has_value()) {
      auto [w0, w1] = melody_window_range(b.melody.cfg, mel->frames(), win_t0,
                                          win_t0 + p.semantic_crop_s);
      if (w1 > w0) mel_slice = slice_frames(*mel, w0, w1 - w0);
    }
    LayoutInputs in;
    in.cond = &cond[static_cast<size_t>(cap)];
    in.melody = mel_slice.has_value() ? &*mel_slice : nullptr;
    in.target = &ctx_tokens;
    SequenceLayout layout = build_layout(b.semantic_stage.layout, in);

    SampleRequest sreq;
    sreq.prompt = layout.flat;
    sreq.n_new = n_new;
    sreq.temperature = temp;
    sreq.seed = Rng::mix(seed, 0x5e3a0000ULL + static_cast<uint64_t>(step));
    std::vector<int32_t> newg = sample_tokens(b.semantic_stage, sreq);
    TokenSequence new_tokens = tokens_from_flat(b.semantic_stage.layout, SegKind::semantic,
                                                newg, p.dims.semantic_vocab, 1,
                                                TokenKind::semantic, rate);
    TokenSequence merged = sem;
    merged.ids.conservativeResize(have + n_new, 1);
    merged.ids.bottomRows(n_new) = new_tokens.ids;
    sem = merged;
    if (schedule)
      schedule->push_back(
          ScheduleEntry{step, t_new, (have + n_new) / rate, cap});
    have += n_new;
    ++step;
  }
  return sem;
}

TokenSequence run_coarse(const ModelBundle& b, const std::vector<TokenSequence>& cond,
                         const std::vector<double>& switch_times, const TokenSequence& sem,
                         double temp, uint64_t seed) {
  const PipelineConfig& p = b.pcfg;
  const double rate = p.acoustic_rate;
  const int ratio = iround(rate / p.semantic_rate);
  require(std::abs(rate / p.semantic_rate - ratio) < 1e-9,
          "generate: acoustic rate must be a multiple of the semantic rate");
  const int n_frames = sem.frames() * ratio;
  const int win = iround(p.acoustic_crop_s * rate);
  const int ctx = iround(p.coarse_context_s * rate);
  require(ctx < win, "generate: coarse context must be shorter than the window");
  const int L = p.dims.coarse_levels;

  TokenSequence coarse = empty_like(L, p.dims.acoustic_vocab, TokenKind::acoustic, rate);
  const int coarse_def = b.coarse_stage.layout.def_index(SegKind::coarse);
  int have = 0, step = 0;
  while (have < n_frames) {
    const int f0 = have == 0 ? 0 : have - ctx;
    const int this_win = std::min(win, n_frames - f0);
    const int n_ctx = have - f0;
    const int n_new = this_win - n_ctx;
    const int cap = caption_index_at(switch_times, have / rate);

    TokenSequence s_slice = slice_frames(sem, f0 / ratio, this_win / ratio);
    TokenSequence ctx_tokens = n_ctx > 0 ? slice_frames(coarse, f0, n_ctx)
                                         : empty_like(L, p.dims.acoustic_vocab,
                                                      TokenKind::acoustic, rate);
    LayoutInputs in;
    in.cond = &cond[static_cast<size_t>(cap)];
    in.semantic = &s_slice;
    in.target = &ctx_tokens;
    SequenceLayout layout = build_layout(b.coarse_stage.layout, in);

    SampleRequest sreq;
    sreq.prompt = layout.flat;
    sreq.n_new = n_new * L;
    sreq.temperature = temp;
    sreq.seed = Rng::mix(seed, 0xc0a50000ULL + static_cast<uint64_t>(step));
    const StageLayoutSpec& spec = b.coarse_stage.layout;
    const int base_pos = n_ctx * L;
    sreq.slice = [&spec, coarse_def, base_pos](int s) {
      return spec.level_slice(coarse_def, base_pos + s);
    };
    std::vector<int32_t> newg = sample_tokens(b.coarse_stage, sreq);
    TokenSequence new_tokens = tokens_from_flat(spec, SegKind::coarse, newg,
                                                p.dims.acoustic_vocab, L, TokenKind::acoustic,
                                                rate);
    coarse.ids.conservativeResize(have + n_new, L);
    coarse.ids.bottomRows(n_new) = new_tokens.ids;
    have += n_new;
    ++step;
  }
  return coarse;
}

TokenSequence run_fine(const ModelBundle& b, const TokenSequence& coarse, double temp,
                       uint64_t seed) {
  const PipelineConfig& p = b.pcfg;
  const double rate = p.acoustic_rate;
  const int n_frames = coarse.frames();
  const int win = iround(p.fine_crop_s * rate);
  const int hop = iround(p.fine_hop_s * rate);
  require(hop >= 1 && hop <= win, "generate: bad fine window/hop");
  const int ctx = win - hop;
  const int L = p.dims.fine_levels();
  const int fine_def = b.fine_stage.layout.def_index(SegKind::fine);

  TokenSequence fine = empty_like(L, p.dims.acoustic_vocab, TokenKind::acoustic, rate);
  int have = 0, step = 0;
  while (have < n_frames) {
    const int f0 = have == 0 ? 0 : have - ctx;
    const int this_win = std::min(win, n_frames - f0);
    const int n_ctx = have - f0;
    const int n_new = this_win - n_ctx;

    TokenSequence c_slice = slice_frames(coarse, f0, this_win);
    TokenSequence ctx_tokens = n_ctx > 0 ? slice_frames(fine, f0, n_ctx)
                                         : empty_like(L, p.dims.acoustic_vocab,
                                                      TokenKind::acoustic, rate);
    LayoutInputs in;
    in.coarse = &c_slice;
    in.target = &ctx_tokens;
    SequenceLayout layout = build_layout(b.fine_stage.layout, in);

    SampleRequest sreq;
    sreq.prompt = layout.flat;
    sreq.n_new = n_new * L;
    sreq.temperature = temp;
    sreq.seed = Rng::mix(seed, 0xf13e0000ULL + static_cast<uint64_t>(step));
    const StageLayoutSpec& spec = b.fine_stage.layout;
    const int base_pos = n_ctx * L;
    sreq.slice = [&spec, fine_def, base_pos](int s) {
      return spec.level_slice(fine_def, base_pos + s);
    };
    std::vector<int32_t> newg = sample_tokens(b.fine_stage, sreq);
    TokenSequence new_tokens = tokens_from_flat(spec, SegKind::fine, newg,
                                                p.dims.acoustic_vocab, L, TokenKind::acoustic,
                                                rate);
    fine.ids.conservativeResize(have + n_new, L);
    fine.ids.bottomRows(n_new) = new_tokens.ids;
    have += n_new;
    ++step;
  }
  return fine;
}

TokenSequence random_conditioning_tokens(const PipelineConfig& p, uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x7a2db5ULL));
  TokenSequence ts;
  ts.ids.resize(1, p.dims.cond_levels);
  for (int l = 0; l < p.dims.cond_levels; ++l)
    ts.ids(0, l) = static_cast<int>(rng.randint(p.dims.cond_vocab));
  ts.vocab = p.dims.cond_vocab;
  ts.frame_rate = 0.0;
  ts.kind = TokenKind::conditioning;
  return ts;
}

void validate_request(const GenerationRequest& req, const PipelineConfig& p) {
  require(!req.captions.empty(), "generate: no captions");
  require(req.captions.front().first == 0.0, "generate: first caption must start at 0");
  for (size_t i = 1; i < req.captions.size(); ++i)
    require(req.captions[i].first > req.captions[i - 1].first,
            "generate: caption switch times must ascend");
  require(req.total_s > 0.0, "generate: duration must be positive");
  require(req.temp_semantic > 0.0 && req.temp_coarse > 0.0 && req.temp_fine > 0.0,
          "generate: temperatures must be positive");
  require(req.cond_levels_semantic >= 1 && req.cond_levels_semantic <= p.dims.cond_levels,
          "generate: semantic conditioning levels out of range");
  require(req.cond_levels_coarse >= 1 && req.cond_levels_coarse <= p.dims.cond_levels,
          "generate: coarse conditioning levels out of range");
}

GenerationResult run_pipeline(const ModelBundle& b, const GenerationRequest& req,
                              double stride_s, double context_s) {
  const PipelineConfig& p = b.pcfg;
  validate_request(req, p);

  GenerationResult res;
  std::vector<double> switch_times;
  std::vector<TokenSequence> cond_sem, cond_coarse;
  for (size_t i = 0; i < req.captions.size(); ++i) {
    switch_times.push_back(req.captions[i].first);
    TokenSequence m_t = req.random_conditioning
                            ? random_conditioning_tokens(p, Rng::mix(req.seed, i))
                            : conditioning_tokens_text(b.embed, b.cond_rvq,
                                                       req.captions[i].second);
    res.cond.push_back(m_t);
    cond_sem.push_back(truncate_levels(m_t, req.cond_levels_semantic));
    cond_coarse.push_back(truncate_levels(m_t, req.cond_levels_coarse));
  }

  std::optional<TokenSequence> mel;
  if (req.melody_clip.has_value()) {
    require(req.melody_clip->duration_s() + 1e-9 >= std::min(req.total_s, p.semantic_crop_s),
            "generate: melody clip shorter than the generation window");
    mel = melody_tokens(b.melody, b.melody_rvq, *req.melody_clip);
    res.melody_tokens = mel;
  }

  const int n_sem = iround(req.total_s * p.semantic_rate);
  res.semantic = run_semantic(b, cond_sem, switch_times, mel, n_sem, stride_s, context_s,
                              req.temp_semantic, req.seed, &res.schedule);
  res.coarse = run_coarse(b, cond_coarse, switch_times, res.semantic, req.temp_coarse, req.seed);
  res.fine = run_fine(b, res.coarse, req.temp_fine, req.seed);

  TokenSequence acoustic;
  acoustic.ids.resize(res.coarse.frames(), p.dims.acoustic_levels);
  acoustic.ids.leftCols(p.dims.coarse_levels) = res.coarse.ids;
  acoustic.ids.rightCols(p.dims.fine_levels()) = res.fine.ids;
  acoustic.vocab = p.dims.acoustic_vocab;
  acoustic.frame_rate = p.acoustic_rate;
  acoustic.kind = TokenKind::acoustic;

  Eigen::MatrixXd feats = b.acoustic_rvq.decode_sequence(acoustic);
  Resynthesizer synth(p.sample_rate, p.acoustic_rate, p.feature_dim);
  res.audio = synth.synthesize(feats);
  return res;
}

}  // namespace

GenerationResult generate(const ModelBundle& b, const GenerationRequest& req) {
  require(req.total_s <= b.pcfg.semantic_crop_s + 1e-9,
          "generate: duration exceeds the training crop; use generate_long");
  require(req.captions.size() == 1, "generate: one caption only; use story_mode");
  return run_pipeline(b, req, b.pcfg.long_stride_s, b.pcfg.long_context_s);
}

GenerationResult generate_long(const ModelBundle& b, const GenerationRequest& req,
                               double stride_s, double context_s) {
  require(req.total_s > b.pcfg.semantic_crop_s - 1e-9,
          "generate_long: duration must exceed the training crop span");
  require(std::abs(context_s + stride_s - b.pcfg.semantic_crop_s) < 1e-9,
          "generate_long: context + stride must equal the semantic crop span");
  require(stride_s > 0.0 && context_s > 0.0, "generate_long: bad stride/context");
  return run_pipeline(b, req, stride_s, context_s);
}

GenerationResult story_mode(const ModelBundle& b, const GenerationRequest& req,
                            double stride_s) {
  require(req.captions.size() >= 2, "story_mode: need at least two captions");
  const double context_s = b.pcfg.semantic_crop_s - stride_s;
  require(context_s > 0.0, "story_mode: stride must be shorter than the crop span");
  for (const auto& [t, cap] : req.captions) {
    const double k = t / stride_s;
    require(std::abs(k - std::round(k)) < 1e-9,
            "story_mode: switch times must be multiples of the stride");
  }
  require(req.total_s > b.pcfg.semantic_crop_s - 1e-9,
          "story_mode: duration must exceed the training crop span");
  return run_pipeline(b, req, stride_s, context_s);
}

GenerationResult generate_with_melody(const ModelBundle& b, const GenerationRequest& req) {
  require(req.melody_clip.has_value(), "generate_with_melody: melody clip required");
  return generate(b, req);
}

AudioClip generate_direct(const ModelBundle& b, const StageModel& direct_stage,
                          const std::string& caption, double total_s, uint64_t seed,
                          int cond_levels) {
  const PipelineConfig& p = b.pcfg;
  require(direct_stage.cfg.kind == StageKind::direct_acoustic,
          "generate_direct: wrong stage kind");
  TokenSequence m_t = conditioning_tokens_text(b.embed, b.cond_rvq, caption);
  TokenSequence cond = truncate_levels(m_t, cond_levels);

  const double rate = p.acoustic_rate;
  const int n_frames = iround(total_s * rate);
  const int win = iround(p.acoustic_crop_s * rate);
  const int ctx = iround(p.coarse_context_s * rate);
  const int L = p.dims.coarse_levels;
  const int coarse_def = direct_stage.layout.def_index(SegKind::coarse);

  TokenSequence coarse;
  coarse.ids.resize(0, L);
  coarse.vocab = p.dims.acoustic_vocab;
  coarse.frame_rate = rate;
  coarse.kind = TokenKind::acoustic;
  int have = 0, step = 0;
  while (have < n_frames) {
    const int f0 = have == 0 ? 0 : have - ctx;
    const int this_win = std::min(win, n_frames - f0);
    const int n_ctx = have - f0;
    const int n_new = this_win - n_ctx;
    TokenSequence ctx_tokens = coarse;
    ctx_tokens.ids = n_ctx > 0 ? coarse.ids.middleRows(f0, n_ctx).eval()
                               : Eigen::MatrixXi(0, L);
    LayoutInputs in;
    in.cond = &cond;
    in.target = &ctx_tokens;
    SequenceLayout layout = build_layout(direct_stage.layout, in);
    SampleRequest sreq;
    sreq.prompt = layout.flat;
    sreq.n_new = n_new * L;
    sreq.temperature = p.temp_coarse;
    sreq.seed = Rng::mix(seed, 0xd12ec70000ULL + static_cast<uint64_t>(step));
    const StageLayoutSpec& spec = direct_stage.layout;
    const int base_pos = n_ctx * L;
    sreq.slice = [&spec, coarse_def, base_pos](int s) {
      return spec.level_slice(coarse_def, base_pos + s);
    };
    std::vector<int32_t> newg = sample_tokens(direct_stage, sreq);
    TokenSequence new_tokens = tokens_from_flat(spec, SegKind::coarse, newg,
                                                p.dims.acoustic_vocab, L, TokenKind::acoustic,
                                                rate);
    coarse.ids.conservativeResize(have + n_new, L);
    coarse.ids.bottomRows(n_new) = new_tokens.ids;
    have += n_new;
    ++step;
  }

  TokenSequence fine = run_fine(b, coarse, p.temp_fine, Rng::mix(seed, 0xd12f));
  TokenSequence acoustic;
  acoustic.ids.resize(coarse.frames(), p.dims.acoustic_levels);
  acoustic.ids.leftCols(L) = coarse.ids;
  acoustic.ids.rightCols(p.dims.fine_levels()) = fine.ids;
  acoustic.vocab = p.dims.acoustic_vocab;
  acoustic.frame_rate = rate;
  acoustic.kind = TokenKind::acoustic;
  Resynthesizer synth(p.sample_rate, p.acoustic_rate, p.feature_dim);
  return synth.synthesize(b.acoustic_rvq.decode_sequence(acoustic));
}

AudioClip generate_encoder_conditioned(const ModelBundle& b, const StageModel& enc_stage,
                                       const std::string& caption, double total_s,
                                       uint64_t seed) {
  const PipelineConfig& p = b.pcfg;
  require(enc_stage.cfg.kind == StageKind::encoder_conditioned,
          "generate_encoder_conditioned: wrong stage kind");
  require(total_s <= p.acoustic_crop_s + 1e-9,
          "generate_encoder_conditioned: duration exceeds the training crop");
  std::vector<int> words = b.embed.vocab.tokenize(caption);
  require(!words.empty(), "generate_encoder_conditioned: caption has no known words");

  const StageLayoutSpec& spec = enc_stage.layout;
  const int sem_def = spec.def_index(SegKind::semantic);
  const int coarse_def = spec.def_index(SegKind::coarse);
  const int n_sem = iround(total_s * p.semantic_rate);
  const int n_ac = iround(total_s * p.acoustic_rate);
  const int L = p.dims.coarse_levels;

  // Semantic segment first.
  SampleRequest sreq;
  sreq.prompt = {static_cast<int32_t>(spec.sep_id)};
  sreq.prefix_word_ids = words;
  sreq.n_new = n_sem;
  sreq.temperature = p.temp_semantic;
  sreq.seed = Rng::mix(seed, 0xe5c11ULL);
  sreq.slice = [&spec, sem_def](int s) { return spec.level_slice(sem_def, s); };
  std::vector<int32_t> sem_g = sample_tokens(enc_stage, sreq);

  // Separator, then the coarse segment.
  SampleRequest creq;
  creq.prompt = sreq.prompt;
  creq.prompt.insert(creq.prompt.end(), sem_g.begin(), sem_g.end());
  creq.prompt.push_back(static_cast<int32_t>(spec.sep_id));
  creq.prefix_word_ids = words;
  creq.n_new = n_ac * L;
  creq.temperature = p.temp_coarse;
  creq.seed = Rng::mix(seed, 0xe5c12ULL);
  creq.slice = [&spec, coarse_def](int s) { return spec.level_slice(coarse_def, s); };
  std::vector<int32_t> coarse_g = sample_tokens(enc_stage, creq);

  TokenSequence coarse = tokens_from_flat(spec, SegKind::coarse, coarse_g,
                                          p.dims.acoustic_vocab, L, TokenKind::acoustic,
                                          p.acoustic_rate);
  TokenSequence fine = run_fine(b, coarse, p.temp_fine, Rng::mix(seed, 0xe5c13ULL));
  TokenSequence acoustic;
  acoustic.ids.resize(coarse.frames(), p.dims.acoustic_levels);
  acoustic.ids.leftCols(L) = coarse.ids;
  acoustic.ids.rightCols(p.dims.fine_levels()) = fine.ids;
  acoustic.vocab = p.dims.acoustic_vocab;
  acoustic.frame_rate = p.acoustic_rate;
  acoustic.kind = TokenKind::acoustic;
  Resynthesizer synth(p.sample_rate, p.acoustic_rate, p.feature_dim);
  return synth.synthesize(b.acoustic_rvq.decode_sequence(acoustic));
}

// ---- dataset assembly ----

namespace {

TokenSequence cond_of(const TokenizedClip& tc) { return tc.cond; }

}  // namespace

std::vector<SequenceLayout> build_semantic_dataset(const std::vector<TokenizedClip>& clips,
                                                   const PipelineConfig& pcfg,
                                                   const StageDatasetOptions& opt) {
  std::vector<SequenceLayout> out;
  Rng rng(Rng::mix(opt.seed, 0x5e3aULL));
  const int crop = iround(pcfg.semantic_crop_s * pcfg.semantic_rate);
  const int per_second = iround(pcfg.semantic_rate);
  StageLayoutSpec spec = StageLayoutSpec::make(StageKind::semantic, pcfg.dims);
  for (const auto& tc : clips) {
    const int frames = tc.semantic.frames();
    require(frames >= crop, "semantic dataset: clip shorter than the crop span");
    const int max_start_s = (frames - crop) / per_second;
    for (int c = 0; c < opt.crops_per_clip; ++c) {
      const int t0 = static_cast<int>(rng.randint(max_start_s + 1));
      TokenSequence target = slice_frames(tc.semantic, t0 * per_second, crop);
      std::optional<TokenSequence> mel;
      if (rng.uniform() < opt.melody_fraction) {
        MelodyEmbedConfig mwin;
        mwin.window_s = pcfg.melody_window_s;
        mwin.hop_s = pcfg.melody_hop_s;
        auto [w0, w1] = melody_window_range(mwin, tc.melody.frames(), t0,
                                            t0 + pcfg.semantic_crop_s);
        if (w1 > w0) mel = slice_frames(tc.melody, w0, w1 - w0);
      }
      LayoutInputs in;
      TokenSequence cond = cond_of(tc);
      in.cond = &cond;
      in.melody = mel.has_value() ? &*mel : nullptr;
      in.target = &target;
      out.push_back(build_layout(spec, in));
    }
  }
  return out;
}

std::vector<SequenceLayout> build_coarse_dataset(const std::vector<TokenizedClip>& clips,
                                                 const PipelineConfig& pcfg,
                                                 const StageDatasetOptions& opt) {
  std::vector<SequenceLayout> out;
  Rng rng(Rng::mix(opt.seed, 0xc0a5ULL));
  const int sem_ps = iround(pcfg.semantic_rate);
  const int ac_ps = iround(pcfg.acoustic_rate);
  const int crop_s = iround(pcfg.acoustic_crop_s);
  StageLayoutSpec spec = StageLayoutSpec::make(StageKind::coarse_acoustic, pcfg.dims);
  for (const auto& tc : clips) {
    const int dur_s = tc.acoustic.frames() / ac_ps;
    require(dur_s >= crop_s, "coarse dataset: clip shorter than the crop span");
    for (int c = 0; c < opt.crops_per_clip; ++c) {
      const int t0 = static_cast<int>(rng.randint(dur_s - crop_s + 1));
      TokenSequence s_slice = slice_frames(tc.semantic, t0 * sem_ps, crop_s * sem_ps);
      TokenSequence target = slice_frames(tc.acoustic, t0 * ac_ps, crop_s * ac_ps);
      target.ids = target.ids.leftCols(pcfg.dims.coarse_levels).eval();
      LayoutInputs in;
      TokenSequence cond = cond_of(tc);
      in.cond = &cond;
      in.semantic = &s_slice;
      in.target = &target;
      out.push_back(build_layout(spec, in));
    }
  }
  return out;
}

std::vector<SequenceLayout> build_fine_dataset(const std::vector<TokenizedClip>& clips,
                                               const PipelineConfig& pcfg,
                                               const StageDatasetOptions& opt) {
  std::vector<SequenceLayout> out;
  Rng rng(Rng::mix(opt.seed, 0xf13eULL));
  const int win = iround(pcfg.fine_crop_s * pcfg.acoustic_rate);
  const int hop = iround(pcfg.fine_hop_s * pcfg.acoustic_rate);
  StageLayoutSpec spec = StageLayoutSpec::make(StageKind::fine_acoustic, pcfg.dims);
  for (const auto& tc : clips) {
    const int frames = tc.acoustic.frames();
    require(frames >= win, "fine dataset: clip shorter than the fine window");
    const int slots = (frames - win) / hop + 1;
    for (int c = 0; c < opt.crops_per_clip; ++c) {
      const int f0 = static_cast<int>(rng.randint(slots)) * hop;
      TokenSequence chunk = slice_frames(tc.acoustic, f0, win);
      TokenSequence coarse = chunk;
      coarse.ids = chunk.ids.leftCols(pcfg.dims.coarse_levels).eval();
      TokenSequence fine = chunk;
      fine.ids = chunk.ids.rightCols(pcfg.dims.fine_levels()).eval();
      LayoutInputs in;
      in.coarse = &coarse;
      in.target = &fine;
      out.push_back(build_layout(spec, in));
    }
  }
  return out;
}

std::vector<SequenceLayout> build_direct_dataset(const std::vector<TokenizedClip>& clips,
                                                 const PipelineConfig& pcfg,
                                                 const StageDatasetOptions& opt) {
  std::vector<SequenceLayout> out;
  Rng rng(Rng::mix(opt.seed, 0xd12cULL));
  const int ac_ps = iround(pcfg.acoustic_rate);
  const int crop_s = iround(pcfg.acoustic_crop_s);
  StageLayoutSpec spec = StageLayoutSpec::make(StageKind::direct_acoustic, pcfg.dims);
  for (const auto& tc : clips) {
    const int dur_s = tc.acoustic.frames() / ac_ps;
    for (int c = 0; c < opt.crops_per_clip; ++c) {
      const int t0 = static_cast<int>(rng.randint(dur_s - crop_s + 1));
      TokenSequence target = slice_frames(tc.acoustic, t0 * ac_ps, crop_s * ac_ps);
      target.ids = target.ids.leftCols(pcfg.dims.coarse_levels).eval();
      LayoutInputs in;
      TokenSequence cond = cond_of(tc);
      in.cond = &cond;
      in.target = &target;
      out.push_back(build_layout(spec, in));
    }
  }
  return out;
}

std::vector<SequenceLayout> build_encoder_dataset(const std::vector<TokenizedClip>& clips,
                                                  const std::vector<std::string>& captions,
                                                  const WordVocab& vocab,
                                                  const PipelineConfig& pcfg,
                                                  const StageDatasetOptions& opt) {
  require(clips.size() == captions.size(), "encoder dataset: clips/captions mismatch");
  std::vector<SequenceLayout> out;
  Rng rng(Rng::mix(opt.seed, 0xe2c0ULL));
  const int sem_ps = iround(pcfg.semantic_rate);
  const int ac_ps = iround(pcfg.acoustic_rate);
  const int crop_s = iround(pcfg.acoustic_crop_s);
  StageLayoutSpec spec = StageLayoutSpec::make(StageKind::encoder_conditioned, pcfg.dims);
  for (size_t i = 0; i < clips.size(); ++i) {
    const auto& tc = clips[i];
    std::vector<int> words = vocab.tokenize(captions[i]);
    require(!words.empty(), "encoder dataset: caption has no known words");
    const int dur_s = tc.acoustic.frames() / ac_ps;
    for (int c = 0; c < opt.crops_per_clip; ++c) {
      const int t0 = static_cast<int>(rng.randint(dur_s - crop_s + 1));
      TokenSequence s_slice = slice_frames(tc.semantic, t0 * sem_ps, crop_s * sem_ps);
      TokenSequence target2 = slice_frames(tc.acoustic, t0 * ac_ps, crop_s * ac_ps);
      target2.ids = target2.ids.leftCols(pcfg.dims.coarse_levels).eval();
      LayoutInputs in;
      in.target = &s_slice;
      in.target2 = &target2;
      in.prefix_word_ids = words;
      out.push_back(build_layout(spec, in));
    }
  }
  return out;
}

std::vector<MelodyWindowExample> build_melody_examples(const CorpusManifest& manifest,
                                                       const MelodyEmbedConfig& mcfg,
                                                       int first_clip, int clip_count) {
  require(first_clip >= 0 &&
              first_clip + clip_count <= static_cast<int>(manifest.clips.size()),
          "melody examples: clip range out of bounds");
  std::vector<MelodyWindowExample> out;
  const int n_timbres = static_cast<int>(timbre_table().size());
  for (int i = first_clip; i < first_clip + clip_count; ++i) {
    const ClipSpec& base = manifest.clips[static_cast<size_t>(i)].spec;
    ClipSpec alt = base;
    alt.timbre_id = (base.timbre_id + 2) % n_timbres;  // same melody, other timbre
    alt.seed = Rng::mix(base.seed, 0xa17ULL);
    const ClipSpec* variants[2] = {&base, &alt};
    for (const ClipSpec* spec : variants) {
      AudioClip clip = render_clip(*spec, manifest.config.duration_s,
                                   manifest.config.sample_rate);
      FeatureSequence fs = frame_features(clip, mcfg.feature_rate, mcfg.feature_dim);
      Eigen::MatrixXd pooled = pool_window(fs, mcfg.window_s, mcfg.hop_s);
      for (long w = 0; w < pooled.rows(); ++w) {
        MelodyWindowExample ex;
        ex.pooled = pooled.row(w).transpose();
        ex.class_id = i * 1000 + static_cast<int>(w);
        out.push_back(std::move(ex));
      }
    }
  }
  return out;
}

EvalSet generate_eval_set(const ModelBundle& b, const CorpusManifest& manifest,
                          const std::filesystem::path& corpus_dir, const EvalOptions& opt) {
  require(opt.count >= 1, "eval set: count must be >= 1");
  require(!manifest.clips.empty(), "eval set: empty corpus");
  EvalSet set;
  Rng rng(opt.seed);
  std::vector<size_t> order(manifest.clips.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const int count = std::min<int>(opt.count, static_cast<int>(order.size()));
  for (int i = 0; i < count; ++i) {
    const ClipRecord& rec = manifest.clips[order[static_cast<size_t>(i)]];
    GenerationRequest req;
    req.captions = {{0.0, rec.caption}};
    req.total_s = opt.duration_s;
    req.seed = Rng::mix(opt.seed, 0xe7a1ULL + static_cast<uint64_t>(i));
    req.random_conditioning = opt.random_conditioning;
    req.cond_levels_semantic = opt.cond_levels_semantic;
    req.cond_levels_coarse = opt.cond_levels_coarse;
    req.temp_semantic = b.pcfg.temp_semantic;
    req.temp_coarse = b.pcfg.temp_coarse;
    req.temp_fine = b.pcfg.temp_fine;
    GenerationResult gen = generate(b, req);
    set.ref_ids.push_back(rec.id);
    set.captions.push_back(rec.caption);
    set.generated.push_back(std::move(gen.audio));
    set.reference.push_back(load_corpus_clip(corpus_dir, rec));
  }
  return set;
}

MetricReport evaluate_sets(const ModelBundle& b, const EvalSet& set) {
  require(!set.generated.empty(), "evaluate: empty eval set");
  MetricReport r;
  r.count = static_cast<int>(set.generated.size());
  Eigen::MatrixXd ge(r.count, b.embed.cfg.d_e), re(r.count, b.embed.cfg.d_e);
  for (int i = 0; i < r.count; ++i) {
    ge.row(i) = b.embed.embed_audio(set.generated[static_cast<size_t>(i)]).transpose();
    re.row(i) = b.embed.embed_audio(set.reference[static_cast<size_t>(i)]).transpose();
  }
  r.fad = frechet_distance(fit_gaussian(ge), fit_gaussian(re));
  r.kld = kld_score(b.classifier, set.generated, set.reference);
  r.mcc = mcc_score(b.embed, set.captions, set.generated);
  return r;
}

void write_metric_report(const std::filesystem::path& path, const MetricReport& r) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write metric report: " + path.string());
  f << "count=" << r.count << "\n";
  f << "fad=" << r.fad << "\n";
  f << "kld=" << r.kld << "\n";
  f << "mcc=" << r.mcc << "\n";
}

MetricReport parse_metric_report(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifactError("missing metric report: " + path.string());
  MetricReport r;
  std::string line;
  while (std::getline(f, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "count") r.count = std::stoi(val);
    else if (key == "fad") r.fad = std::stod(val);
    else if (key == "kld") r.kld = std::stod(val);
    else if (key == "mcc") r.mcc = std::stod(val);
  }
  return r;
}

Eigen::VectorXi dominant_band_sequence(const AudioClip& clip, double frame_rate, int dim) {
  FeatureSequence fs = frame_features(clip, frame_rate, dim);
  Eigen::VectorXi out(fs.num_frames());
  for (int t = 0; t < fs.num_frames(); ++t) {
    int best;
    fs.frames.row(t).maxCoeff(&best);
    out(t) = best;
  }
  return out;
}

double pearson_correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  require(a.size() == b.size() && a.size() >= 2, "pearson: need two equal-length series");
  const double ma = a.mean(), mb = b.mean();
  Eigen::VectorXd ca = a.array() - ma, cb = b.array() - mb;
  const double denom = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
  if (denom < 1e-12) return 0.0;
  return ca.dot(cb) / denom;
}

}  // namespace musegen
