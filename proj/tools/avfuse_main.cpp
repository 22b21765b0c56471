#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "avfuse/pipeline.hpp"

namespace {

using namespace avfuse;

// Expand "--config FILE" (a flat key=value file, one flag per line, # comments)
// into synthesized --key=value arguments appended after the explicit ones, so
// the file behaves exactly like typing the flags. Keys already given on the
// command line are skipped: flags override the file. Unknown keys surface as
// unknown flags through the normal parser.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size();) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ContractError("--config needs a file path");
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                 args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
    } else {
      ++i;
    }
  }
  if (path.empty()) return args;

  std::ifstream f(path);
  if (!f) throw ContractError("cannot read config file '" + path + "'");
  const auto given = [&args](const std::string& key) {
    const std::string flag = "--" + key;
    for (const std::string& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
  };
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  std::string line;
  while (std::getline(f, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ContractError("config line '" + line + "' is not key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!given(key)) args.push_back("--" + key + "=" + value);
  }
  return args;
}

struct ModelArgs {
  std::string preset = "desk";
  Index classes = 0;  // 0: keep the preset's class count

  ModelConfig resolve() const {
    ModelConfig m;
    if (preset == "desk") {
      m = ModelConfig::desk();
    } else if (preset == "full") {
      m = ModelConfig::full();
    } else {
      throw ContractError("unknown preset '" + preset + "' (want desk|full)");
    }
    if (classes > 0) m.num_classes = classes;
    m.validate();
    return m;
  }
};

void add_model_args(CLI::App* cmd, ModelArgs& args) {
  cmd->add_option("--preset", args.preset, "Model size: desk or full")
      ->capture_default_str();
  cmd->add_option("--classes", args.classes, "Override the preset's class count");
}

struct CorpusArgs {
  std::string manifest;
  std::string cache;
  std::string strategy = "fslf";
  std::uint64_t rfas_seed = 0;
  Index step = 6;
  bool pad_last = false;
};

void add_corpus_args(CLI::App* cmd, CorpusArgs& args) {
  cmd->add_option("--manifest", args.manifest, "Dataset manifest CSV")->required();
  cmd->add_option("--cache", args.cache, "Preprocess cache directory")->required();
  cmd->add_option("--strategy", args.strategy, "Fusion strategy: cfas|sfas|ffls|fslf|ofos|rfas")
      ->capture_default_str();
  cmd->add_option("--rfas-seed", args.rfas_seed, "Base seed for the rfas shuffle");
  cmd->add_option("--step", args.step, "Temporal stride between sampled frames")
      ->capture_default_str();
  cmd->add_flag("--pad-last", args.pad_last, "Repeat the final frame when a clip is short");
}

// Preprocess (idempotent) and return the fused, patchified clips.
std::vector<TokenizedClip> load_tokenized(const CorpusArgs& args, const ModelConfig& model,
                                          bool verbose = true) {
  const Strategy strategy = strategy_from_name(args.strategy);
  const std::vector<ManifestRow> rows = read_manifest(args.manifest);
  if (rows.empty()) throw DataError("manifest '" + args.manifest + "' lists no clips");
  PreprocessOptions pre;
  pre.step = args.step;
  pre.pad_last = args.pad_last;
  const PreprocessResult r = preprocess(args.manifest, rows, args.cache, strategy, model, pre);
  if (!r.failures.empty()) {
    for (const auto& [id, msg] : r.failures) {
      std::fprintf(stderr, "clip '%s': %s\n", id.c_str(), msg.c_str());
    }
    throw DataError(std::to_string(r.failures.size()) + " clip(s) failed to preprocess");
  }
  if (verbose && r.written > 0) {
    std::fprintf(stderr, "preprocessed %lld clip(s) into %s\n",
                 static_cast<long long>(r.written), args.cache.c_str());
  }
  const std::vector<AlignedClip> aligned = load_cached_clips(rows, args.cache, strategy, model);
  return tokenize_clips(aligned, strategy, model, args.rfas_seed);
}

int cmd_gen_synthetic(const std::string& out_dir, const SynthOptions& opt) {
  const std::vector<ManifestRow> rows = gen_synthetic(out_dir, opt);
  std::printf("wrote %zu clips under %s (manifest.csv alongside)\n", rows.size(),
              out_dir.c_str());
  return 0;
}

int cmd_preprocess(const CorpusArgs& args, const ModelArgs& margs) {
  const ModelConfig model = margs.resolve();
  const Strategy strategy = strategy_from_name(args.strategy);
  const std::vector<ManifestRow> rows = read_manifest(args.manifest);
  if (rows.empty()) {
    std::fprintf(stderr, "warning: manifest '%s' lists no clips; nothing to do\n",
                 args.manifest.c_str());
    return 0;
  }
  PreprocessOptions pre;
  pre.step = args.step;
  pre.pad_last = args.pad_last;
  const PreprocessResult r = preprocess(args.manifest, rows, args.cache, strategy, model, pre);
  std::printf("cached %lld clip(s), %lld already fresh\n", static_cast<long long>(r.written),
              static_cast<long long>(r.skipped));
  if (!r.failures.empty()) {
    for (const auto& [id, msg] : r.failures) {
      std::fprintf(stderr, "clip '%s': %s\n", id.c_str(), msg.c_str());
    }
    std::fprintf(stderr, "%zu clip(s) failed\n", r.failures.size());
    return 2;
  }
  return 0;
}

struct TrainArgs {
  double lr = 1e-2;
  double weight_decay = 0.05;
  Index epochs = 100;
  Index batch_size = 8;
  std::uint64_t seed = 0;
  Index threads = 1;
};

void add_train_args(CLI::App* cmd, TrainArgs& args) {
  cmd->add_option("--lr", args.lr, "Learning rate")->capture_default_str();
  cmd->add_option("--weight-decay", args.weight_decay, "AdamW weight decay")
      ->capture_default_str();
  cmd->add_option("--epochs", args.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch-size", args.batch_size, "Mini-batch size")->capture_default_str();
  cmd->add_option("--seed", args.seed, "Initialization and shuffle seed");
  cmd->add_option("--threads", args.threads,
                  "Batch members computed in parallel (results identical to serial)")
      ->capture_default_str();
}

TrainConfig make_train_config(const TrainArgs& t, const CorpusArgs& c, const ModelConfig& model) {
  TrainConfig cfg;
  cfg.lr = t.lr;
  cfg.weight_decay = t.weight_decay;
  cfg.epochs = t.epochs;
  cfg.batch_size = t.batch_size;
  cfg.seed = t.seed;
  cfg.threads = t.threads;
  cfg.strategy = strategy_from_name(c.strategy);
  cfg.model = model;
  cfg.validate();
  return cfg;
}

int cmd_train(const CorpusArgs& cargs, const ModelArgs& margs, const TrainArgs& targs,
              const std::string& weights_out, const std::string& loss_out) {
  const ModelConfig model = margs.resolve();
  const TrainConfig cfg = make_train_config(targs, cargs, model);
  const std::vector<TokenizedClip> clips = load_tokenized(cargs, model);
  const TrainResult r = train(clips, cfg);
  save_model(weights_out, r.params);
  if (!loss_out.empty()) {
    Json j;
    j["epoch_mean_loss"] = r.loss_curve;
    j["train_war"] = r.train_war;
    write_json_file(loss_out, j);
  }
  std::printf("trained on %zu clips for %lld epochs; final loss %.6f, train WAR %.4f\n",
              clips.size(), static_cast<long long>(cfg.epochs), r.loss_curve.back(),
              r.train_war);
  std::printf("weights written to %s\n", weights_out.c_str());
  return 0;
}

int cmd_eval(const CorpusArgs& cargs, const ModelArgs& margs, const std::string& weights,
             const std::string& report_out) {
  const ModelConfig model = margs.resolve();
  const ModelParams<float> params = load_model(weights, model);
  const std::vector<TokenizedClip> clips = load_tokenized(cargs, model);
  const EvalReport report = evaluate(params, clips);
  std::printf("%s", report_text(report).c_str());
  if (!report_out.empty()) write_json_file(report_out, report_json(report));
  return 0;
}

int cmd_run(const CorpusArgs& cargs, const ModelArgs& margs, const TrainArgs& targs, Index folds,
            std::uint64_t fold_seed, const std::string& out_dir, bool compare,
            std::vector<std::uint64_t> seeds) {
  const ModelConfig model = margs.resolve();
  if (compare) {
    CompareConfig cc;
    cc.base = make_train_config(targs, cargs, model);
    cc.folds = folds;
    cc.fold_seed = fold_seed;
    if (!seeds.empty()) cc.seeds = std::move(seeds);
    cc.rfas_seed = cargs.rfas_seed;
    cc.pre.step = cargs.step;
    cc.pre.pad_last = cargs.pad_last;
    cc.out_dir = out_dir;
    const std::vector<ManifestRow> rows = read_manifest(cargs.manifest);
    if (rows.empty()) throw DataError("manifest '" + cargs.manifest + "' lists no clips");
    const auto scores = compare_strategies(cargs.manifest, rows, cargs.cache, cc);
    std::printf("%-10s %10s %10s\n", "strategy", "mean WAR", "mean UAR");
    for (const StrategyScore& s : scores) {
      std::printf("%-10s %10.4f %10.4f\n", strategy_name(s.strategy), s.mean_war, s.mean_uar);
    }
    std::printf("details in %s\n", out_dir.c_str());
    return 0;
  }

  ExperimentConfig ec;
  ec.train = make_train_config(targs, cargs, model);
  ec.folds = folds;
  ec.fold_seed = fold_seed;
  ec.out_dir = out_dir;
  const std::vector<TokenizedClip> clips = load_tokenized(cargs, model);
  const ExperimentResult r = run_experiment(clips, ec);
  std::printf("%s", report_text(r.pooled).c_str());
  std::printf("reports and weights in %s\n", out_dir.c_str());
  return 0;
}

int cmd_inspect(const std::string& strategy_name_arg, const ModelArgs& margs,
                const CorpusArgs* cargs, const std::string& clip_id,
                const std::string& out_path) {
  const ModelConfig model = margs.resolve();
  const Strategy strategy = strategy_from_name(strategy_name_arg);

  FusedSample sample;
  if (cargs && !cargs->manifest.empty()) {
    const std::vector<ManifestRow> rows = read_manifest(cargs->manifest);
    const ManifestRow* row = nullptr;
    for (const ManifestRow& r : rows) {
      if (r.clip_id == clip_id) {
        row = &r;
        break;
      }
    }
    if (!row) throw DataError("clip '" + clip_id + "' not in manifest '" + cargs->manifest + "'");
    PreprocessOptions pre;
    pre.step = cargs->step;
    pre.pad_last = cargs->pad_last;
    const PreprocessResult pr =
        preprocess(cargs->manifest, {*row}, cargs->cache, strategy, model, pre);
    if (!pr.failures.empty()) {
      throw DataError("clip '" + clip_id + "': " + pr.failures.front().second);
    }
    const auto aligned = load_cached_clips({*row}, cargs->cache, strategy, model);
    sample = fuse(aligned[0], strategy, rfas_clip_seed(cargs->rfas_seed, clip_id));
  } else {
    // No data needed: constant sentinel values expose the layout on their own.
    const AlignmentSpec spec = alignment_for(strategy, model);
    AlignedClip clip;
    clip.clip_id = "sentinel";
    clip.label = 0;
    clip.subject_id = "none";
    for (Index i = 0; i < spec.count; ++i) {
      clip.visual.push_back(Tensor<float>::constant({spec.height, spec.width}, 0.25f));
      clip.audio_specs.push_back(Tensor<float>::constant({spec.height, spec.width}, 0.75f));
    }
    sample = fuse(clip, strategy, 0);
  }

  const Json j = layout_map_json(sample, model);
  if (out_path.empty() || out_path == "-") {
    std::printf("%s\n", j.dump(2).c_str());
  } else {
    write_json_file(out_path, j);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-visual emotion recognition: fusion strategies over a video transformer",
               "avfuse"};
  app.require_subcommand(1);

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Generate a deterministic synthetic corpus");
  std::string gen_out;
  SynthOptions synth;
  std::string cue = "redundant";
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--classes", synth.classes, "Emotion classes")->capture_default_str();
  gen->add_option("--clips-per-class", synth.clips_per_class, "Clips per class")
      ->capture_default_str();
  gen->add_option("--seed", synth.seed, "Corpus seed");
  gen->add_option("--cue", cue, "Class cue placement: redundant|complementary")
      ->capture_default_str();
  gen->add_option("--subjects", synth.subjects, "Distinct subjects")->capture_default_str();
  gen->add_option("--frames", synth.frames, "Source frames per clip")->capture_default_str();
  gen->add_option("--fps", synth.fps, "Source frame rate")->capture_default_str();
  gen->add_option("--image", synth.image, "Square frame size")->capture_default_str();
  gen->add_option("--sample-rate", synth.sample_rate, "Audio sample rate")
      ->capture_default_str();
  gen->add_option("--noise", synth.noise, "Noise amplitude")->capture_default_str();

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Align and cache clips for a strategy");
  CorpusArgs pre_corpus;
  ModelArgs pre_model;
  add_corpus_args(pre, pre_corpus);
  add_model_args(pre, pre_model);

  // train
  auto* tr = app.add_subcommand("train", "Train on every clip in the manifest");
  CorpusArgs tr_corpus;
  ModelArgs tr_model;
  TrainArgs tr_train;
  std::string tr_weights, tr_loss;
  add_corpus_args(tr, tr_corpus);
  add_model_args(tr, tr_model);
  add_train_args(tr, tr_train);
  tr->add_option("--out", tr_weights, "Weight file to write")->required();
  tr->add_option("--loss-out", tr_loss, "Loss curve JSON to write");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate weights on every clip in the manifest");
  CorpusArgs ev_corpus;
  ModelArgs ev_model;
  std::string ev_weights, ev_report;
  add_corpus_args(ev, ev_corpus);
  add_model_args(ev, ev_model);
  ev->add_option("--weights", ev_weights, "Weight file to load")->required();
  ev->add_option("--report", ev_report, "Evaluation report JSON to write");

  // run
  auto* run = app.add_subcommand("run", "Subject-independent cross-validation");
  CorpusArgs run_corpus;
  ModelArgs run_model;
  TrainArgs run_train;
  Index run_folds = 2;
  std::uint64_t run_fold_seed = 0;
  std::string run_out;
  bool run_compare = false;
  std::vector<std::uint64_t> run_seeds;
  add_corpus_args(run, run_corpus);
  add_model_args(run, run_model);
  add_train_args(run, run_train);
  run->add_option("--folds", run_folds, "Fold count")->capture_default_str();
  run->add_option("--fold-seed", run_fold_seed, "Subject-shuffle seed for fold assignment");
  run->add_option("--out", run_out, "Output directory for reports and weights")->required();
  run->add_flag("--compare", run_compare, "Run every fusion strategy and rank them");
  run->add_option("--seeds", run_seeds, "Training seeds for --compare (default 1 2 3)")
      ->delimiter(',');

  // inspect
  auto* ins = app.add_subcommand("inspect", "Dump the token layout map for a strategy");
  CorpusArgs ins_corpus;
  ModelArgs ins_model;
  std::string ins_strategy = "fslf", ins_clip, ins_out;
  ins->add_option("--strategy", ins_strategy, "Fusion strategy")->capture_default_str();
  add_model_args(ins, ins_model);
  ins->add_option("--manifest", ins_corpus.manifest, "Manifest (with --clip: inspect real data)");
  ins->add_option("--cache", ins_corpus.cache, "Cache directory (with --manifest)");
  ins->add_option("--clip", ins_clip, "Clip id to inspect");
  ins->add_option("--rfas-seed", ins_corpus.rfas_seed, "Base seed for the rfas shuffle");
  ins->add_option("--step", ins_corpus.step, "Temporal stride")->capture_default_str();
  ins->add_option("--out", ins_out, "Output JSON path ('-' for stdout)");

  app.footer(
      "Every command also accepts --config FILE: a flat key=value file of the\n"
      "command's flags (e.g. 'epochs=200'); explicit flags override the file.");

  std::vector<std::string> args;
  args.reserve(static_cast<std::size_t>(argc));
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  try {
    args = expand_config(std::move(args));
  } catch (const ContractError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  }
  std::reverse(args.begin(), args.end());  // the parser consumes from the back
  try {
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      synth.cue = cue_mode_from_name(cue);
      return cmd_gen_synthetic(gen_out, synth);
    }
    if (pre->parsed()) return cmd_preprocess(pre_corpus, pre_model);
    if (tr->parsed()) return cmd_train(tr_corpus, tr_model, tr_train, tr_weights, tr_loss);
    if (ev->parsed()) return cmd_eval(ev_corpus, ev_model, ev_weights, ev_report);
    if (run->parsed()) {
      return cmd_run(run_corpus, run_model, run_train, run_folds, run_fold_seed, run_out,
                     run_compare, run_seeds);
    }
    if (ins->parsed()) {
      const bool with_data = !ins_corpus.manifest.empty() || !ins_clip.empty();
      if (with_data && (ins_corpus.manifest.empty() || ins_corpus.cache.empty() || ins_clip.empty())) {
        throw ContractError("inspect: --manifest, --cache, and --clip go together");
      }
      return cmd_inspect(ins_strategy, ins_model, with_data ? &ins_corpus : nullptr, ins_clip,
                         ins_out);
    }
  } catch (const ContractError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
