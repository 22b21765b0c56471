#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "avfuse/pipeline.hpp"
#include "doctest.h"

using namespace avfuse;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "avfuse_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthOptions small_corpus_options() {
  SynthOptions opt;
  opt.classes = 2;
  opt.clips_per_class = 4;
  opt.subjects = 4;
  opt.frames = 32;  // with step 2 an 8- or 16-frame alignment fits
  opt.seed = 5;
  return opt;
}

PreprocessOptions fast_preprocess() {
  PreprocessOptions pre;
  pre.step = 2;
  return pre;
}

std::uint64_t hash_tree(const fs::path& root) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = fnv1a64("tree");
  for (const std::string& f : files) {
    h = fnv1a64(fs::path(f).lexically_relative(root).string(), h);
    const auto bytes = avfuse::detail::read_file_bytes(f);
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return h;
}

}  // namespace

TEST_SUITE("synthetic") {
  TEST_CASE("generator writes a complete corpus") {
    const fs::path dir = fresh_dir("corpus_complete");
    SynthOptions opt = small_corpus_options();
    opt.classes = 4;
    opt.clips_per_class = 2;
    const auto rows = gen_synthetic(dir.string(), opt);
    CHECK(rows.size() == 8);
    CHECK(fs::is_regular_file(dir / "manifest.csv"));
    const auto loaded = read_manifest((dir / "manifest.csv").string());
    CHECK(loaded.size() == 8);
    std::set<std::string> ids;
    for (const auto& r : loaded) {
      ids.insert(r.clip_id);
      CHECK(r.label >= 0);
      CHECK(r.label < 4);
      CHECK(fs::is_directory(dir / r.frames_path));
      CHECK(fs::is_regular_file(dir / r.audio_path));
      char last[32];
      std::snprintf(last, sizeof last, "frame_%03lld.pgm",
                    static_cast<long long>(opt.frames - 1));
      CHECK(fs::is_regular_file(dir / r.frames_path / "frame_000.pgm"));
      CHECK(fs::is_regular_file(dir / r.frames_path / last));
    }
    CHECK(ids.size() == 8);  // unique clip ids

    // subjects rotate within each class, so every subject sees every class
    std::set<std::pair<std::string, Index>> subject_class;
    for (const auto& r : loaded) subject_class.insert({r.subject_id, r.label});
    CHECK(subject_class.size() == 4 * 2);
  }

  TEST_CASE("generator output is byte-identical for one seed") {
    SynthOptions opt = small_corpus_options();
    opt.frames = 8;
    const fs::path a = fresh_dir("corpus_rep_a");
    const fs::path b = fresh_dir("corpus_rep_b");
    gen_synthetic(a.string(), opt);
    gen_synthetic(b.string(), opt);
    CHECK(hash_tree(a) == hash_tree(b));

    const fs::path c = fresh_dir("corpus_rep_c");
    SynthOptions other = opt;
    other.seed = opt.seed + 1;
    gen_synthetic(c.string(), other);
    CHECK(hash_tree(a) != hash_tree(c));
  }

  TEST_CASE("class tone dominates the matching mel band") {
    const fs::path dir = fresh_dir("corpus_tone");
    SynthOptions opt;
    opt.classes = 4;
    opt.clips_per_class = 1;
    opt.frames = 8;
    opt.seed = 3;
    const auto rows = gen_synthetic(dir.string(), opt);

    SpectrogramConfig cfg;  // defaults: 512-point transform, 128 bands
    // Independent band-center computation from the mel formula.
    auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
    auto mel_inv = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    const double sr = static_cast<double>(opt.sample_rate);
    const double mel_hi = mel(sr / 2.0);

    std::vector<Index> winners;
    for (const auto& row : rows) {
      const Waveform<float> w = read_wav((dir / row.audio_path).string());
      const Tensor<float> grid = log_mel(w, cfg);  // time x bands
      Index best = 0;
      double best_sum = -1e30;
      for (Index b = 0; b < grid.cols(); ++b) {
        double s = 0;
        for (Index t = 0; t < grid.rows(); ++t) s += grid(t, b);
        if (s > best_sum) {
          best_sum = s;
          best = b;
        }
      }
      winners.push_back(best);
      const double center =
          mel_inv((static_cast<double>(best) + 1.0) * mel_hi / static_cast<double>(cfg.n_mels + 1));
      const double want = class_frequency(row.label, opt.classes);
      CHECK(std::abs(center - want) / want < 0.2);
    }
    for (std::size_t i = 1; i < winners.size(); ++i) CHECK(winners[i] > winners[i - 1]);
  }

  TEST_CASE("cue modes split the label as documented") {
    SynthOptions opt;
    opt.classes = 4;
    opt.cue = CueMode::Complementary;
    CHECK(opt.video_classes() == 2);
    CHECK(opt.audio_classes() == 2);
    CHECK(opt.video_class_of(0) == 0);
    CHECK(opt.audio_class_of(0) == 0);
    CHECK(opt.video_class_of(1) == 0);
    CHECK(opt.audio_class_of(1) == 1);
    CHECK(opt.video_class_of(2) == 1);
    CHECK(opt.audio_class_of(2) == 0);
    CHECK(opt.video_class_of(3) == 1);
    CHECK(opt.audio_class_of(3) == 1);

    opt.cue = CueMode::Redundant;
    for (Index k = 0; k < 4; ++k) {
      CHECK(opt.video_class_of(k) == k);
      CHECK(opt.audio_class_of(k) == k);
    }

    for (Index j = 1; j < 4; ++j) {
      CHECK(class_velocity(j, 4) > class_velocity(j - 1, 4));
      CHECK(class_frequency(j, 4) > class_frequency(j - 1, 4));
    }
    CHECK(class_frequency(3, 4) < 8000.0);  // under Nyquist at 16 kHz
    CHECK(cue_mode_from_name("redundant") == CueMode::Redundant);
    CHECK(cue_mode_from_name("complementary") == CueMode::Complementary);
    CHECK_THROWS_AS((void)cue_mode_from_name("half"), ContractError);
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("preprocess caches once and skips when fresh") {
    const fs::path dir = fresh_dir("pre_idempotent");
    const auto rows = gen_synthetic((dir / "corpus").string(), small_corpus_options());
    const std::string manifest = (dir / "corpus" / "manifest.csv").string();
    const std::string cache = (dir / "cache").string();
    const ModelConfig model = ModelConfig::desk();

    const PreprocessResult first =
        preprocess(manifest, rows, cache, Strategy::FSLF, model, fast_preprocess());
    CHECK(first.written == 8);
    CHECK(first.skipped == 0);
    CHECK(first.failures.empty());
    CHECK(fs::is_regular_file(fs::path(cache) / "t8_32x32" / "index.json"));

    const PreprocessResult second =
        preprocess(manifest, rows, cache, Strategy::FSLF, model, fast_preprocess());
    CHECK(second.written == 0);
    CHECK(second.skipped == 8);
  }

  TEST_CASE("changed inputs force a rebuild of just that clip") {
    const fs::path dir = fresh_dir("pre_rebuild");
    const auto rows = gen_synthetic((dir / "corpus").string(), small_corpus_options());
    const std::string manifest = (dir / "corpus" / "manifest.csv").string();
    const std::string cache = (dir / "cache").string();
    const ModelConfig model = ModelConfig::desk();
    preprocess(manifest, rows, cache, Strategy::FSLF, model, fast_preprocess());

    // rewrite one frame of one clip with different pixels
    Tensor<float> blank({32, 32});
    write_pgm((dir / "corpus" / rows[2].frames_path / "frame_003.pgm").string(), blank);
    const PreprocessResult again =
        preprocess(manifest, rows, cache, Strategy::FSLF, model, fast_preprocess());
    CHECK(again.written == 1);
    CHECK(again.skipped == 7);
  }

  TEST_CASE("corrupt clips fail alone and are named") {
    const fs::path dir = fresh_dir("pre_corrupt");
    const auto rows = gen_synthetic((dir / "corpus").string(), small_corpus_options());
    const std::string manifest = (dir / "corpus" / "manifest.csv").string();
    const ModelConfig model = ModelConfig::desk();

    std::ofstream wav((dir / "corpus" / rows[1].audio_path).string(),
                      std::ios::binary | std::ios::trunc);
    wav << "not a wav at all";
    wav.close();

    const PreprocessResult r = preprocess(manifest, rows, (dir / "cache").string(),
                                          Strategy::FSLF, model, fast_preprocess());
    CHECK(r.written == 7);
    REQUIRE(r.failures.size() == 1);
    CHECK(r.failures[0].first == rows[1].clip_id);
    CHECK(!r.failures[0].second.empty());
  }

  TEST_CASE("cached alignment equals a direct alignment bit for bit") {
    const fs::path dir = fresh_dir("pre_roundtrip");
    const auto rows = gen_synthetic((dir / "corpus").string(), small_corpus_options());
    const std::string manifest = (dir / "corpus" / "manifest.csv").string();
    const std::string cache = (dir / "cache").string();
    const ModelConfig model = ModelConfig::desk();
    const PreprocessOptions pre = fast_preprocess();
    preprocess(manifest, rows, cache, Strategy::CFAS, model, pre);

    const auto cached = load_cached_clips(rows, cache, Strategy::CFAS, model);
    REQUIRE(cached.size() == rows.size());
    const AlignmentSpec spec = alignment_for(Strategy::CFAS, model);
    CHECK(spec.count == 16);
    CHECK(spec.height == 16);  // half height for the stacking strategy

    const RawClip raw = load_raw_clip(manifest, rows[0]);
    const AlignedClip direct =
        align(raw, spec.count, pre.step, pre.spec, spec.height, spec.width, pre.pad_last);
    REQUIRE(cached[0].visual.size() == direct.visual.size());
    int mismatches = 0;
    for (std::size_t i = 0; i < direct.visual.size(); ++i) {
      for (Index j = 0; j < direct.visual[i].size(); ++j) {
        mismatches += cached[0].visual[i][j] != direct.visual[i][j];
        mismatches += cached[0].audio_specs[i][j] != direct.audio_specs[i][j];
      }
    }
    CHECK(mismatches == 0);
    CHECK(cached[0].label == rows[0].label);
    CHECK(cached[0].subject_id == rows[0].subject_id);
  }

  TEST_CASE("missing cache entries point at preprocess") {
    const fs::path dir = fresh_dir("pre_missing");
    const auto rows = gen_synthetic((dir / "corpus").string(), small_corpus_options());
    CHECK_THROWS_AS(
        (void)load_cached_clips(rows, (dir / "nocache").string(), Strategy::FSLF,
                                ModelConfig::desk()),
        DataError);
  }

  TEST_CASE("tokenization matches the model geometry for every strategy") {
    const fs::path dir = fresh_dir("tokenize_all");
    const auto rows = gen_synthetic((dir / "corpus").string(), small_corpus_options());
    const std::string manifest = (dir / "corpus" / "manifest.csv").string();
    const std::string cache = (dir / "cache").string();
    const ModelConfig model = ModelConfig::desk();

    for (Strategy s : all_strategies()) {
      const PreprocessResult pr =
          preprocess(manifest, rows, cache, s, model, fast_preprocess());
      CHECK(pr.failures.empty());
      const auto clips = tokenize_clips(load_cached_clips(rows, cache, s, model), s, model, 9);
      REQUIRE(clips.size() == rows.size());
      for (const auto& c : clips) {
        CHECK(c.tokens.rows() == model.tokens());
        CHECK(c.tokens.cols() == model.patch_dim());
        CHECK(c.tokens.all_finite());
      }
    }
  }

  TEST_CASE("the shuffle strategy draws a distinct permutation per clip") {
    const ModelConfig model = ModelConfig::desk();
    const AlignmentSpec spec = alignment_for(Strategy::RFAS, model);
    AlignedClip a;
    a.clip_id = "first";
    a.label = 0;
    a.subject_id = "s0";
    for (Index i = 0; i < spec.count; ++i) {
      a.visual.push_back(Tensor<float>::constant({spec.height, spec.width},
                                                 static_cast<float>(i) / 16.0f));
      a.audio_specs.push_back(Tensor<float>::constant({spec.height, spec.width},
                                                      0.5f + static_cast<float>(i) / 16.0f));
    }
    AlignedClip b = a;
    b.clip_id = "second";

    const TokenizedClip ta = tokenize_clip(a, Strategy::RFAS, model, 4);
    const TokenizedClip tb = tokenize_clip(b, Strategy::RFAS, model, 4);
    const TokenizedClip ta_again = tokenize_clip(a, Strategy::RFAS, model, 4);

    bool same_ab = true, same_aa = true;
    for (Index i = 0; i < ta.tokens.size(); ++i) {
      same_ab = same_ab && ta.tokens[i] == tb.tokens[i];
      same_aa = same_aa && ta.tokens[i] == ta_again.tokens[i];
    }
    CHECK(!same_ab);  // different clips, different frame order
    CHECK(same_aa);   // same clip, deterministic
  }

  TEST_CASE("experiment artifacts land on disk and agree with the result") {
    const fs::path dir = fresh_dir("experiment_files");
    SynthOptions opt = small_corpus_options();
    const auto rows = gen_synthetic((dir / "corpus").string(), opt);
    const std::string manifest = (dir / "corpus" / "manifest.csv").string();
    const std::string cache = (dir / "cache").string();
    const ModelConfig model = ModelConfig::desk();
    preprocess(manifest, rows, cache, Strategy::FSLF, model, fast_preprocess());
    const auto clips = tokenize_clips(load_cached_clips(rows, cache, Strategy::FSLF, model),
                                      Strategy::FSLF, model);

    ExperimentConfig ec;
    ec.train.model = model;
    ec.train.model.num_classes = 2;
    ec.train.epochs = 2;
    ec.train.seed = 1;
    ec.folds = 2;
    ec.out_dir = (dir / "run").string();
    const ExperimentResult r = run_experiment(clips, ec);

    for (const char* name : {"fold0.mmdw", "fold0_report.json", "fold0_loss.json", "fold1.mmdw",
                             "fold1_report.json", "fold1_loss.json", "pooled_report.json",
                             "summary.json", "report.txt"}) {
      CHECK(fs::is_regular_file(dir / "run" / name));
    }

    std::ifstream pf((dir / "run" / "pooled_report.json").string());
    const Json pooled = Json::parse(pf);
    CHECK(pooled["war"].get<double>() == r.pooled.war);
    CHECK(pooled["uar"].get<double>() == r.pooled.uar);
    for (Index t = 0; t < 2; ++t) {
      for (Index p = 0; p < 2; ++p) {
        CHECK(pooled["confusion"][static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]
                  .get<std::int64_t>() == r.pooled.at(t, p));
      }
    }

    std::ifstream sf((dir / "run" / "summary.json").string());
    const Json summary = Json::parse(sf);
    CHECK(summary["strategy"] == "fslf");
    CHECK(summary["clips"] == clips.size());
    CHECK(summary["input_hash"].get<std::string>().size() == 16);

    // pooling is exactly the union of the per-fold confusions
    std::vector<std::int64_t> summed(4, 0);
    for (const EvalReport& fr : r.fold_reports) {
      for (Index t = 0; t < 2; ++t) {
        for (Index p = 0; p < 2; ++p) summed[static_cast<std::size_t>(t * 2 + p)] += fr.at(t, p);
      }
    }
    for (Index t = 0; t < 2; ++t) {
      for (Index p = 0; p < 2; ++p) {
        CHECK(summed[static_cast<std::size_t>(t * 2 + p)] == r.pooled.at(t, p));
      }
    }
  }

  TEST_CASE("experiments repeat bitwise under one seed") {
    const fs::path dir = fresh_dir("experiment_repeat");
    const auto rows = gen_synthetic((dir / "corpus").string(), small_corpus_options());
    const std::string manifest = (dir / "corpus" / "manifest.csv").string();
    const std::string cache = (dir / "cache").string();
    ModelConfig model = ModelConfig::desk();
    model.num_classes = 2;
    preprocess(manifest, rows, cache, Strategy::OFOS, model, fast_preprocess());
    const auto clips = tokenize_clips(load_cached_clips(rows, cache, Strategy::OFOS, model),
                                      Strategy::OFOS, model);

    ExperimentConfig ec;
    ec.train.model = model;
    ec.train.epochs = 2;
    ec.train.seed = 42;
    ec.folds = 2;
    const ExperimentResult a = run_experiment(clips, ec);
    const ExperimentResult b = run_experiment(clips, ec);
    CHECK(a.pooled.war == b.pooled.war);
    CHECK(a.pooled.confusion == b.pooled.confusion);
    CHECK(a.fold_loss == b.fold_loss);
  }

  TEST_CASE("model weight files round trip through the pipeline helpers") {
    const fs::path dir = fresh_dir("weights_roundtrip");
    ModelConfig model = ModelConfig::desk();
    model.num_classes = 2;
    const ModelParams<float> p = ModelParams<float>::init(model, 123);
    const std::string path = (dir / "w.mmdw").string();
    save_model(path, p);
    const ModelParams<float> q = load_model(path, model);
    std::vector<const Tensor<float>*> pv, qv;
    p.for_each_param([&](const std::string&, const Tensor<float>& t) { pv.push_back(&t); });
    q.for_each_param([&](const std::string&, const Tensor<float>& t) { qv.push_back(&t); });
    int mismatches = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      for (Index j = 0; j < pv[i]->size(); ++j) mismatches += (*pv[i])[j] != (*qv[i])[j];
    }
    CHECK(mismatches == 0);

    ModelConfig other = ModelConfig::desk();  // 4 classes: head shape differs
    CHECK_THROWS_AS((void)load_model(path, other), ContractError);
    CHECK_THROWS_AS((void)load_model((dir / "absent.mmdw").string(), model), DataError);
  }

  TEST_CASE("layout map lists every token with its coordinates") {
    const ModelConfig model = ModelConfig::desk();
    const AlignmentSpec spec = alignment_for(Strategy::FSLF, model);
    AlignedClip clip;
    clip.clip_id = "sentinel";
    clip.label = 0;
    clip.subject_id = "none";
    for (Index i = 0; i < spec.count; ++i) {
      clip.visual.push_back(Tensor<float>::constant({spec.height, spec.width}, 0.25f));
      clip.audio_specs.push_back(Tensor<float>::constant({spec.height, spec.width}, 0.75f));
    }
    const FusedSample fused = fuse(clip, Strategy::FSLF, 0);
    const Json j = layout_map_json(fused, model);
    CHECK(j["tokens_per_clip"] == model.tokens());
    CHECK(j["tokens"].size() == static_cast<std::size_t>(model.tokens()));
    CHECK(j["tokens"][0]["modality"] == "audio");  // spectrograms lead in this strategy
    CHECK(j["tokens"][static_cast<std::size_t>(model.tokens() - 1)]["modality"] == "visual");
    const auto& tok = j["tokens"][17];
    const TokenCoord tc = token_coord(model, 17);
    CHECK(tok["slab"] == tc.slab);
    CHECK(tok["row"] == tc.row);
    CHECK(tok["col"] == tc.col);
  }
}
