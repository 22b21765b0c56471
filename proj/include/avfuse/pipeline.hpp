#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "avfuse/fusion.hpp"
#include "avfuse/io.hpp"
#include "avfuse/model.hpp"
#include "avfuse/rng.hpp"
#include "avfuse/sampling.hpp"
#include "avfuse/synthetic.hpp"
#include "avfuse/training.hpp"
#include "nlohmann/json.hpp"

namespace avfuse {

using Json = nlohmann::ordered_json;

// ---- raw clip loading --------------------------------------------------------

// Frames live as numbered image files in the clip's directory; order is the
// sorted file name order.
inline RawClip load_raw_clip(const std::string& manifest_path, const ManifestRow& row) {
  namespace fs = std::filesystem;
  RawClip clip;
  clip.clip_id = row.clip_id;
  clip.fps = row.fps;
  clip.label = row.label;
  clip.subject_id = row.subject_id;

  const std::string frames_dir = resolve_relative(manifest_path, row.frames_path);
  if (!fs::is_directory(frames_dir)) {
    throw DataError("clip '" + row.clip_id + "': frame directory '" + frames_dir + "' not found");
  }
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(frames_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".png") names.push_back(entry.path().string());
  }
  if (names.empty()) {
    throw DataError("clip '" + row.clip_id + "': no frame images in '" + frames_dir + "'");
  }
  std::sort(names.begin(), names.end());
  clip.frames.reserve(names.size());
  for (const std::string& n : names) clip.frames.push_back(read_image(n));

  clip.audio = read_wav(resolve_relative(manifest_path, row.audio_path));
  return clip;
}

// ---- preprocessing cache ------------------------------------------------------

// The temporal length and frame size a strategy needs from the aligner. The
// stacking strategy wants half-height inputs so the fused frame lands back on
// the model's square input.
struct AlignmentSpec {
  Index count = 16;
  Index height = 0;
  Index width = 0;

  std::string tag() const {
    return "t" + std::to_string(count) + "_" + std::to_string(height) + "x" +
           std::to_string(width);
  }
};

inline AlignmentSpec alignment_for(Strategy s, const ModelConfig& model) {
  AlignmentSpec a;
  a.count = frames_needed(s);
  a.height = s == Strategy::CFAS ? model.image_h / 2 : model.image_h;
  a.width = model.image_w;
  return a;
}

struct PreprocessOptions {
  Index step = 6;  // temporal stride between sampled frames
  SpectrogramConfig spec;
  bool pad_last = false;
};

struct PreprocessResult {
  Index written = 0;
  Index skipped = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // clip_id, error
};

namespace detail {

inline std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Content hash of everything that feeds one cached clip: the raw input bytes
// and the alignment parameters. A changed source or config forces a rebuild.
inline std::string clip_input_hash(const std::string& manifest_path, const ManifestRow& row,
                                   const AlignmentSpec& spec, const PreprocessOptions& opt) {
  namespace fs = std::filesystem;
  std::uint64_t h = fnv1a64(row.clip_id);
  h = fnv1a64(std::to_string(row.fps) + "|" + std::to_string(row.label) + "|" + row.subject_id, h);
  h = fnv1a64(spec.tag() + "|" + std::to_string(opt.step) + "|" + std::to_string(opt.spec.n_fft) +
                  "|" + std::to_string(opt.spec.hop) + "|" + std::to_string(opt.spec.n_mels) +
                  "|" + std::to_string(opt.pad_last),
              h);

  const std::string frames_dir = resolve_relative(manifest_path, row.frames_path);
  std::vector<std::string> names;
  if (fs::is_directory(frames_dir)) {
    for (const auto& entry : fs::directory_iterator(frames_dir)) {
      if (entry.is_regular_file()) names.push_back(entry.path().string());
    }
  }
  std::sort(names.begin(), names.end());
  for (const std::string& n : names) {
    const auto bytes = read_file_bytes(n);
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  const std::string audio = resolve_relative(manifest_path, row.audio_path);
  if (fs::is_regular_file(audio)) {
    const auto bytes = read_file_bytes(audio);
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return hash_hex(h);
}

inline Json load_cache_index(const std::string& path) {
  std::ifstream f(path);
  if (!f) return Json::object();
  Json j = Json::parse(f, nullptr, false);
  return j.is_object() ? j : Json::object();  // corrupt index just forces a rebuild
}

}  // namespace detail

inline std::string cache_file_for(const std::string& cache_dir, const AlignmentSpec& spec,
                                  const std::string& clip_id) {
  return (std::filesystem::path(cache_dir) / spec.tag() / (clip_id + ".mmdc")).string();
}

// Align every manifest clip for the given strategy and cache the result, one
// binary file per clip. Reruns skip clips whose inputs are unchanged
// (content-hash check); failures are isolated per clip.
inline PreprocessResult preprocess(const std::string& manifest_path,
                                   const std::vector<ManifestRow>& rows,
                                   const std::string& cache_dir, Strategy strategy,
                                   const ModelConfig& model,
                                   const PreprocessOptions& opt = {}) {
  namespace fs = std::filesystem;
  const AlignmentSpec spec = alignment_for(strategy, model);
  const fs::path layout_dir = fs::path(cache_dir) / spec.tag();
  std::error_code ec;
  fs::create_directories(layout_dir, ec);
  if (ec) throw DataError("preprocess: cannot create '" + layout_dir.string() + "': " + ec.message());

  const std::string index_path = (layout_dir / "index.json").string();
  Json index = detail::load_cache_index(index_path);

  PreprocessResult result;
  for (const ManifestRow& row : rows) {
    try {
      const std::string hash = detail::clip_input_hash(manifest_path, row, spec, opt);
      const std::string cache_path = cache_file_for(cache_dir, spec, row.clip_id);
      if (index.contains(row.clip_id) && index[row.clip_id] == hash &&
          fs::is_regular_file(cache_path)) {
        ++result.skipped;
        continue;
      }
      const RawClip raw = load_raw_clip(manifest_path, row);
      const AlignedClip aligned =
          align(raw, spec.count, opt.step, opt.spec, spec.height, spec.width, opt.pad_last);
      ClipCache cache;
      cache.visual = aligned.visual;
      cache.specs = aligned.audio_specs;
      save_clip_cache(cache_path, cache);
      index[row.clip_id] = hash;
      ++result.written;
    } catch (const std::exception& e) {
      result.failures.emplace_back(row.clip_id, e.what());
    }
  }

  std::ofstream out(index_path, std::ios::trunc);
  if (!out) throw DataError("preprocess: cannot write '" + index_path + "'");
  out << index.dump(2) << "\n";
  return result;
}

// Read the cached alignment back; labels and subjects come from the manifest.
inline std::vector<AlignedClip> load_cached_clips(const std::vector<ManifestRow>& rows,
                                                  const std::string& cache_dir, Strategy strategy,
                                                  const ModelConfig& model) {
  const AlignmentSpec spec = alignment_for(strategy, model);
  std::vector<AlignedClip> out;
  out.reserve(rows.size());
  for (const ManifestRow& row : rows) {
    const std::string path = cache_file_for(cache_dir, spec, row.clip_id);
    if (!std::filesystem::is_regular_file(path)) {
      throw DataError("clip '" + row.clip_id + "': no cache at '" + path +
                      "' — run preprocess first");
    }
    ClipCache cache = load_clip_cache(path);
    AlignedClip clip;
    clip.clip_id = row.clip_id;
    clip.label = row.label;
    clip.subject_id = row.subject_id;
    clip.visual = std::move(cache.visual);
    clip.audio_specs = std::move(cache.specs);
    out.push_back(std::move(clip));
  }
  return out;
}

// ---- fusion + patchify --------------------------------------------------------

// The shuffling strategy draws its permutation from a per-clip stream so
// different clips are shuffled differently under one corpus-level seed.
inline std::uint64_t rfas_clip_seed(std::uint64_t rfas_seed, const std::string& clip_id) {
  return rfas_seed ^ fnv1a64(clip_id);
}

inline TokenizedClip tokenize_clip(const AlignedClip& clip, Strategy strategy,
                                   const ModelConfig& model, std::uint64_t rfas_seed = 0) {
  const FusedSample fused = fuse(clip, strategy, rfas_clip_seed(rfas_seed, clip.clip_id));
  TokenizedClip out;
  out.tokens = patchify<float>(fused.x, model);
  out.label = fused.label;
  out.subject_id = fused.subject_id;
  out.clip_id = fused.clip_id;
  return out;
}

inline std::vector<TokenizedClip> tokenize_clips(const std::vector<AlignedClip>& clips,
                                                 Strategy strategy, const ModelConfig& model,
                                                 std::uint64_t rfas_seed = 0) {
  std::vector<TokenizedClip> out;
  out.reserve(clips.size());
  for (const AlignedClip& c : clips) out.push_back(tokenize_clip(c, strategy, model, rfas_seed));
  return out;
}

// ---- model weights on disk ------------------------------------------------------

inline void save_model(const std::string& path, const ModelParams<float>& p) {
  const auto named = params_to_named(p);
  std::vector<std::pair<std::string, const Tensor<float>*>> ptrs;
  ptrs.reserve(named.size());
  for (const auto& [name, t] : named) ptrs.emplace_back(name, &t);
  save_weights(path, ptrs);
}

inline ModelParams<float> load_model(const std::string& path, const ModelConfig& cfg) {
  ModelParams<float> p = ModelParams<float>::init(cfg, 0);
  load_named_params(p, load_weights(path));
  return p;
}

// ---- reports -------------------------------------------------------------------

inline Json report_json(const EvalReport& r) {
  Json j;
  j["classes"] = r.num_classes;
  j["war"] = r.war;
  j["uar"] = r.uar;
  Json confusion = Json::array();
  for (Index t = 0; t < r.num_classes; ++t) {
    Json row = Json::array();
    for (Index p = 0; p < r.num_classes; ++p) row.push_back(r.at(t, p));
    confusion.push_back(row);
  }
  j["confusion"] = confusion;  // rows = true class, columns = predicted
  j["excluded_classes"] = r.excluded_classes;
  if (!r.fold_war.empty()) {
    j["fold_war"] = r.fold_war;
    j["fold_uar"] = r.fold_uar;
  }
  return j;
}

inline std::string report_text(const EvalReport& r) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "WAR %.4f  UAR %.4f", r.war, r.uar);
  out += line;
  if (!r.excluded_classes.empty()) {
    out += "  (zero-support classes excluded from UAR:";
    for (Index c : r.excluded_classes) out += " " + std::to_string(c);
    out += ")";
  }
  out += "\nconfusion (rows = true class):\n        ";
  for (Index p = 0; p < r.num_classes; ++p) {
    std::snprintf(line, sizeof(line), " pred%-3lld", static_cast<long long>(p));
    out += line;
  }
  out += "\n";
  for (Index t = 0; t < r.num_classes; ++t) {
    std::snprintf(line, sizeof(line), "true%-4lld", static_cast<long long>(t));
    out += line;
    for (Index p = 0; p < r.num_classes; ++p) {
      std::snprintf(line, sizeof(line), " %7lld", static_cast<long long>(r.at(t, p)));
      out += line;
    }
    out += "\n";
  }
  if (!r.fold_war.empty()) {
    out += "per-fold:\n";
    for (std::size_t f = 0; f < r.fold_war.size(); ++f) {
      std::snprintf(line, sizeof(line), "  fold %zu: WAR %.4f  UAR %.4f\n", f, r.fold_war[f],
                    r.fold_uar[f]);
      out += line;
    }
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path + "'");
  f << content;
}

inline void write_json_file(const std::string& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// ---- experiments -----------------------------------------------------------------

struct ExperimentConfig {
  TrainConfig train;
  Index folds = 2;
  std::uint64_t fold_seed = 0;
  std::string out_dir;  // empty: compute only, write nothing
};

struct ExperimentResult {
  std::vector<EvalReport> fold_reports;
  std::vector<double> fold_train_war;
  std::vector<std::vector<double>> fold_loss;
  EvalReport pooled;
};

namespace detail {

// Hash of the tokenized inputs, recorded in the run summary so two summaries
// are comparable at a glance.
inline std::uint64_t corpus_hash(const std::vector<TokenizedClip>& clips) {
  std::uint64_t h = fnv1a64("corpus");
  for (const TokenizedClip& c : clips) {
    h = fnv1a64(c.clip_id + "|" + c.subject_id + "|" + std::to_string(c.label), h);
    h = fnv1a64(c.tokens.data(), static_cast<std::size_t>(c.tokens.size()) * sizeof(float), h);
  }
  return h;
}

}  // namespace detail

// Subject-independent cross-validation: train on k-1 folds, evaluate on the
// held-out one, pool the confusion matrices. Writes per-fold weights, reports,
// and loss curves plus a pooled report, a plain-text table, and a summary.
inline ExperimentResult run_experiment(const std::vector<TokenizedClip>& clips,
                                       const ExperimentConfig& ec) {
  namespace fs = std::filesystem;
  if (ec.folds < 2) throw ContractError("run_experiment: need at least two folds");
  check_clips(clips, ec.train.model, "run_experiment");
  const bool writing = !ec.out_dir.empty();
  if (writing) {
    std::error_code err;
    fs::create_directories(ec.out_dir, err);
    if (err) throw DataError("run_experiment: cannot create '" + ec.out_dir + "'");
  }

  std::vector<std::string> subjects;
  subjects.reserve(clips.size());
  for (const TokenizedClip& c : clips) subjects.push_back(c.subject_id);
  const FoldPlan plan = make_folds(subjects, ec.folds, ec.fold_seed);

  ExperimentResult result;
  for (Index f = 0; f < ec.folds; ++f) {
    const auto [train_set, test_set] = split_by_fold(clips, plan, f);
    if (train_set.empty() || test_set.empty()) {
      throw ContractError("run_experiment: fold " + std::to_string(f) +
                          " leaves an empty train or test set");
    }
    TrainResult trained;
    try {
      trained = train(train_set, ec.train);
    } catch (const NumericError& e) {
      throw NumericError("fold " + std::to_string(f) + ": " + e.what());
    }
    const EvalReport report = evaluate(trained.params, test_set);
    result.fold_reports.push_back(report);
    result.fold_train_war.push_back(trained.train_war);
    result.fold_loss.push_back(trained.loss_curve);

    if (writing) {
      const std::string stem = (fs::path(ec.out_dir) / ("fold" + std::to_string(f))).string();
      save_model(stem + ".mmdw", trained.params);
      write_json_file(stem + "_report.json", report_json(report));
      Json loss;
      loss["epoch_mean_loss"] = trained.loss_curve;
      loss["train_war"] = trained.train_war;
      write_json_file(stem + "_loss.json", loss);
    }
  }

  result.pooled = pool_reports(result.fold_reports);
  if (writing) {
    write_json_file((fs::path(ec.out_dir) / "pooled_report.json").string(),
                    report_json(result.pooled));

    Json summary;
    summary["strategy"] = strategy_name(ec.train.strategy);
    summary["model"] = {{"frames", ec.train.model.frames},
                        {"image", {ec.train.model.image_h, ec.train.model.image_w}},
                        {"cube", {ec.train.model.cube_t, ec.train.model.cube_h, ec.train.model.cube_w}},
                        {"embed_dim", ec.train.model.embed_dim},
                        {"depth", ec.train.model.depth},
                        {"heads", ec.train.model.heads},
                        {"classes", ec.train.model.num_classes}};
    summary["train"] = {{"lr", ec.train.lr},
                        {"weight_decay", ec.train.weight_decay},
                        {"epochs", ec.train.epochs},
                        {"batch_size", ec.train.batch_size},
                        {"seed", ec.train.seed},
                        {"threads", ec.train.threads}};
    summary["folds"] = ec.folds;
    summary["fold_seed"] = ec.fold_seed;
    summary["clips"] = clips.size();
    summary["input_hash"] = detail::hash_hex(detail::corpus_hash(clips));
    summary["pooled"] = {{"war", result.pooled.war}, {"uar", result.pooled.uar}};
    Json folds_detail = Json::array();
    for (Index f = 0; f < ec.folds; ++f) {
      folds_detail.push_back({{"fold", f},
                              {"war", result.fold_reports[static_cast<std::size_t>(f)].war},
                              {"uar", result.fold_reports[static_cast<std::size_t>(f)].uar},
                              {"train_war", result.fold_train_war[static_cast<std::size_t>(f)]}});
    }
    summary["folds_detail"] = folds_detail;
    write_json_file((fs::path(ec.out_dir) / "summary.json").string(), summary);

    std::string table = "cross-validation (" + std::to_string(ec.folds) + " folds, strategy " +
                        strategy_name(ec.train.strategy) + ")\n\n" + report_text(result.pooled);
    write_text_file((fs::path(ec.out_dir) / "report.txt").string(), table);
  }
  return result;
}

// ---- strategy comparison ----------------------------------------------------------

struct CompareConfig {
  TrainConfig base;                          // seed is replaced per run
  Index folds = 2;
  std::uint64_t fold_seed = 0;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::uint64_t rfas_seed = 0;
  PreprocessOptions pre;
  std::string out_dir;  // empty: compute only
};

struct StrategyScore {
  Strategy strategy = Strategy::CFAS;
  double mean_war = 0;
  double mean_uar = 0;
  std::vector<double> wars;  // one per seed
  std::vector<double> uars;
};

// Run the full cross-validation for every fusion strategy on identical folds
// and seeds, and rank them by mean pooled WAR. Preprocesses any missing cache
// layouts on the way (idempotent).
inline std::vector<StrategyScore> compare_strategies(const std::string& manifest_path,
                                                     const std::vector<ManifestRow>& rows,
                                                     const std::string& cache_dir,
                                                     const CompareConfig& cc) {
  namespace fs = std::filesystem;
  std::vector<StrategyScore> scores;
  for (Strategy s : all_strategies()) {
    const PreprocessResult pre =
        preprocess(manifest_path, rows, cache_dir, s, cc.base.model, cc.pre);
    if (!pre.failures.empty()) {
      throw DataError("compare: preprocess failed for clip '" + pre.failures.front().first +
                      "': " + pre.failures.front().second);
    }
    const std::vector<AlignedClip> aligned = load_cached_clips(rows, cache_dir, s, cc.base.model);
    const std::vector<TokenizedClip> tokens =
        tokenize_clips(aligned, s, cc.base.model, cc.rfas_seed);

    StrategyScore score;
    score.strategy = s;
    for (std::uint64_t seed : cc.seeds) {
      ExperimentConfig ec;
      ec.train = cc.base;
      ec.train.strategy = s;
      ec.train.seed = seed;
      ec.folds = cc.folds;
      ec.fold_seed = cc.fold_seed;  // identical folds across strategies and seeds
      const ExperimentResult r = run_experiment(tokens, ec);
      score.wars.push_back(r.pooled.war);
      score.uars.push_back(r.pooled.uar);
    }
    for (double w : score.wars) score.mean_war += w;
    for (double u : score.uars) score.mean_uar += u;
    score.mean_war /= static_cast<double>(score.wars.size());
    score.mean_uar /= static_cast<double>(score.uars.size());
    scores.push_back(std::move(score));
  }

  std::stable_sort(scores.begin(), scores.end(),
                   [](const StrategyScore& a, const StrategyScore& b) {
                     return a.mean_war > b.mean_war;
                   });

  if (!cc.out_dir.empty()) {
    std::error_code err;
    fs::create_directories(cc.out_dir, err);
    if (err) throw DataError("compare: cannot create '" + cc.out_dir + "'");

    Json j = Json::array();
    for (const StrategyScore& s : scores) {
      Json runs = Json::array();
      for (std::size_t i = 0; i < s.wars.size(); ++i) {
        runs.push_back({{"seed", cc.seeds[i]}, {"war", s.wars[i]}, {"uar", s.uars[i]}});
      }
      j.push_back({{"strategy", strategy_name(s.strategy)},
                   {"mean_war", s.mean_war},
                   {"mean_uar", s.mean_uar},
                   {"runs", runs}});
    }
    write_json_file((fs::path(cc.out_dir) / "comparison.json").string(), j);

    std::string table = "strategy comparison (" + std::to_string(cc.folds) + "-fold CV, " +
                        std::to_string(cc.seeds.size()) + " seeds, pooled WAR/UAR)\n\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s %10s %10s\n", "strategy", "mean WAR", "mean UAR");
    table += line;
    for (const StrategyScore& s : scores) {
      std::snprintf(line, sizeof(line), "%-10s %10.4f %10.4f\n", strategy_name(s.strategy),
                    s.mean_war, s.mean_uar);
      table += line;
    }
    write_text_file((fs::path(cc.out_dir) / "comparison.txt").string(), table);
  }
  return scores;
}

// ---- token layout map ----------------------------------------------------------

// The bijection between token index and (slab, row, column) plus the modality
// each token carries under a strategy — the evidence used to prove modality
// placement claims.
inline Json layout_map_json(const FusedSample& sample, const ModelConfig& model) {
  Json tokens = Json::array();
  for (Index t = 0; t < model.tokens(); ++t) {
    const TokenCoord tc = token_coord(model, t);
    const Modality m = token_modality(model, sample, t);
    tokens.push_back({{"token", t},
                      {"slab", tc.slab},
                      {"row", tc.row},
                      {"col", tc.col},
                      {"modality", m == Modality::Visual  ? "visual"
                                   : m == Modality::Audio ? "audio"
                                                          : "mixed"}});
  }
  Json j;
  j["clip_id"] = sample.clip_id;
  j["tokens_per_clip"] = model.tokens();
  j["patch_dim"] = model.patch_dim();
  j["grid"] = {{"slabs", model.slabs()}, {"rows", model.grid_rows()}, {"cols", model.grid_cols()}};
  j["tokens"] = tokens;
  return j;
}

}  // namespace avfuse
