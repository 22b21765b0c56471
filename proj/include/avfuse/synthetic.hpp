#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "avfuse/io.hpp"
#include "avfuse/rng.hpp"
#include "avfuse/signal.hpp"
#include "avfuse/tensor.hpp"

namespace avfuse {

// Where the class identity shows up: in both modalities at once, or split so
// that the audio carries one bit and the motion carries the rest. The split
// form is what makes multimodal fusion strictly necessary for full accuracy.
enum class CueMode { Redundant, Complementary };

inline const char* cue_mode_name(CueMode m) {
  return m == CueMode::Redundant ? "redundant" : "complementary";
}

inline CueMode cue_mode_from_name(const std::string& name) {
  if (name == "redundant") return CueMode::Redundant;
  if (name == "complementary") return CueMode::Complementary;
  throw ContractError("unknown cue mode '" + name + "' (want redundant|complementary)");
}

struct SynthOptions {
  Index classes = 4;
  Index clips_per_class = 16;
  std::uint64_t seed = 0;
  CueMode cue = CueMode::Redundant;
  Index subjects = 8;
  Index frames = 96;  // 3.2 s of video at the default rate
  double fps = 30.0;
  Index image = 32;  // square frames
  Index sample_rate = 16000;
  double noise = 0.05;

  void validate() const {
    if (classes < 2) throw ContractError("gen_synthetic: need at least two classes");
    if (clips_per_class < 1) throw ContractError("gen_synthetic: need at least one clip per class");
    if (subjects < 1) throw ContractError("gen_synthetic: need at least one subject");
    if (frames < 1 || fps <= 0) throw ContractError("gen_synthetic: bad frame count or rate");
    if (image < 4) throw ContractError("gen_synthetic: frames must be at least 4x4");
    if (sample_rate < 2000) throw ContractError("gen_synthetic: sample rate too low");
  }

  Index video_classes() const { return cue == CueMode::Complementary ? (classes + 1) / 2 : classes; }
  Index audio_classes() const { return cue == CueMode::Complementary ? std::min<Index>(classes, 2) : classes; }
  Index video_class_of(Index label) const { return cue == CueMode::Complementary ? label / 2 : label; }
  Index audio_class_of(Index label) const { return cue == CueMode::Complementary ? label % 2 : label; }
};

namespace detail {

// Log-spaced values over [lo, hi]; a single class sits at lo.
inline double log_spaced(double lo, double hi, Index j, Index n) {
  if (n <= 1) return lo;
  return lo * std::pow(hi / lo, static_cast<double>(j) / static_cast<double>(n - 1));
}

}  // namespace detail

// Blob drift in pixels per source frame for a video class.
inline double class_velocity(Index video_class, Index video_classes) {
  return detail::log_spaced(0.25, 13.0 / 6.0, video_class, video_classes);
}

// Tone frequency in Hz for an audio class, kept well under Nyquist at 16 kHz.
inline double class_frequency(Index audio_class, Index audio_classes) {
  return detail::log_spaced(400.0, 6200.0, audio_class, audio_classes);
}

// One frame: a soft blob centered at (cy, cx) on low noise, wrapping
// horizontally so constant drift never runs off the image.
inline Tensor<float> render_blob_frame(Index image, double cy, double cx, double sigma,
                                       double noise, SplitMix64& rng) {
  Tensor<float> f({image, image});
  const double w = static_cast<double>(image);
  for (Index r = 0; r < image; ++r) {
    for (Index c = 0; c < image; ++c) {
      const double dy = static_cast<double>(r) - cy;
      double dx = std::abs(static_cast<double>(c) - cx);
      dx = std::min(dx, w - dx);
      const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma)) +
                       noise * rng.next_double();
      f(r, c) = static_cast<float>(std::min(1.0, v));
    }
  }
  return f;
}

// Deterministic audio-visual corpus: class k moves a blob at a class-specific
// velocity and plays a class-specific tone, both over seeded noise. Subjects
// rotate round-robin within each class so subject-independent folds always
// contain every class on both sides. Returns the manifest it wrote.
inline std::vector<ManifestRow> gen_synthetic(const std::string& out_dir,
                                              const SynthOptions& opt) {
  opt.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "clips", ec);
  if (ec) throw DataError("gen_synthetic: cannot create '" + out_dir + "': " + ec.message());

  SplitMix64 master(opt.seed);
  std::vector<ManifestRow> rows;
  const Index samples = static_cast<Index>(
      std::llround(static_cast<double>(opt.frames) / opt.fps * static_cast<double>(opt.sample_rate)));

  for (Index label = 0; label < opt.classes; ++label) {
    const double velocity = class_velocity(opt.video_class_of(label), opt.video_classes());
    const double freq = class_frequency(opt.audio_class_of(label), opt.audio_classes());
    for (Index i = 0; i < opt.clips_per_class; ++i) {
      SplitMix64 rng(master.next());
      char idbuf[64];
      std::snprintf(idbuf, sizeof(idbuf), "k%lldc%02lld", static_cast<long long>(label),
                    static_cast<long long>(i));
      const std::string clip_id = idbuf;
      const fs::path clip_dir = fs::path(out_dir) / "clips" / clip_id;
      fs::create_directories(clip_dir, ec);
      if (ec) throw DataError("gen_synthetic: cannot create '" + clip_dir.string() + "'");

      // Horizontal start varies per clip so the class is only readable from the
      // drift itself; height stays fixed so it cannot become a memorizable cue.
      const double x0 = rng.next_double() * static_cast<double>(opt.image);
      const double cy = 0.5 * static_cast<double>(opt.image);
      const double sigma = static_cast<double>(opt.image) / 10.0;
      for (Index t = 0; t < opt.frames; ++t) {
        const double cx =
            std::fmod(x0 + velocity * static_cast<double>(t), static_cast<double>(opt.image));
        const Tensor<float> frame =
            render_blob_frame(opt.image, cy, cx, sigma, opt.noise, rng);
        char fname[32];
        std::snprintf(fname, sizeof(fname), "frame_%03lld.pgm", static_cast<long long>(t));
        write_pgm((clip_dir / fname).string(), frame);
      }

      Waveform<float> audio;
      audio.sample_rate = opt.sample_rate;
      audio.samples.resize(static_cast<std::size_t>(samples));
      const double phase = rng.next_double() * 6.283185307179586;
      for (Index s = 0; s < samples; ++s) {
        const double t = static_cast<double>(s) / static_cast<double>(opt.sample_rate);
        const double v = 0.6 * std::sin(6.283185307179586 * freq * t + phase) +
                         opt.noise * (2.0 * rng.next_double() - 1.0);
        audio.samples[static_cast<std::size_t>(s)] = static_cast<float>(v);
      }
      write_wav((fs::path(out_dir) / "clips" / (clip_id + ".wav")).string(), audio);

      ManifestRow row;
      row.clip_id = clip_id;
      row.frames_path = "clips/" + clip_id;
      row.audio_path = "clips/" + clip_id + ".wav";
      row.fps = opt.fps;
      row.label = label;
      row.subject_id = "s" + std::to_string(i % opt.subjects);
      rows.push_back(row);
    }
  }

  write_manifest((fs::path(out_dir) / "manifest.csv").string(), rows);
  return rows;
}

}  // namespace avfuse
