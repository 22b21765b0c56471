#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avfuse/rng.hpp"
#include "avfuse/sampling.hpp"
#include "avfuse/tensor.hpp"

namespace avfuse {

enum class Strategy { CFAS, SFAS, FFLS, FSLF, OFOS, RFAS };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::CFAS: return "cfas";
    case Strategy::SFAS: return "sfas";
    case Strategy::FFLS: return "ffls";
    case Strategy::FSLF: return "fslf";
    case Strategy::OFOS: return "ofos";
    case Strategy::RFAS: return "rfas";
  }
  return "?";
}

inline Strategy strategy_from_name(const std::string& name) {
  for (Strategy s : {Strategy::CFAS, Strategy::SFAS, Strategy::FFLS, Strategy::FSLF, Strategy::OFOS,
                     Strategy::RFAS}) {
    if (name == strategy_name(s)) return s;
  }
  throw ContractError("unknown fusion strategy '" + name +
                      "' (want cfas|sfas|ffls|fslf|ofos|rfas)");
}

inline const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> v = {Strategy::CFAS, Strategy::SFAS, Strategy::FFLS,
                                          Strategy::FSLF, Strategy::OFOS, Strategy::RFAS};
  return v;
}

enum class Modality : std::uint8_t { Visual, Audio, Mixed };

// One fused multimodal sample: a T x H x W grid plus enough provenance to
// predict which pixels (and later, which tokens) came from which modality.
struct FusedSample {
  Tensor<float> x;  // T x H x W
  Index label = -1;
  std::string subject_id;
  std::string clip_id;
  std::vector<Modality> frame_modality;
  Index split_row = -1;  // CFAS: first image row holding audio content

  Modality pixel_modality(Index t, Index row) const {
    const Modality m = frame_modality[static_cast<std::size_t>(t)];
    if (m == Modality::Mixed && split_row >= 0) {
      return row < split_row ? Modality::Visual : Modality::Audio;
    }
    return m;
  }
};

namespace detail {

inline void check_aligned(const AlignedClip& clip, Index want_count, const char* op) {
  const Index n = static_cast<Index>(clip.visual.size());
  if (n != static_cast<Index>(clip.audio_specs.size())) {
    throw ContractError(std::string(op) + ": clip '" + clip.clip_id + "' has " + std::to_string(n) +
                        " frames but " + std::to_string(clip.audio_specs.size()) + " spectrograms");
  }
  if (n != want_count) {
    throw ContractError(std::string(op) + ": needs " + std::to_string(want_count) +
                        " aligned frames, clip '" + clip.clip_id + "' has " + std::to_string(n));
  }
  const Shape ref = clip.visual[0].shape();
  for (const auto* group : {&clip.visual, &clip.audio_specs}) {
    for (const auto& f : *group) {
      if (f.rank() != 2 || f.shape() != ref) {
        throw ContractError(std::string(op) + ": inconsistent frame shapes in clip '" +
                            clip.clip_id + "': " + shape_str(ref) + " vs " + shape_str(f.shape()));
      }
    }
  }
}

inline FusedSample from_frames(const AlignedClip& clip, const std::vector<const Tensor<float>*>& frames,
                               std::vector<Modality> modality) {
  const Index t = static_cast<Index>(frames.size());
  const Index h = frames[0]->rows(), w = frames[0]->cols();
  FusedSample out;
  out.x = Tensor<float>({t, h, w});
  for (Index i = 0; i < t; ++i) {
    std::copy(frames[static_cast<std::size_t>(i)]->data(),
              frames[static_cast<std::size_t>(i)]->data() + h * w, out.x.data() + i * h * w);
  }
  out.label = clip.label;
  out.subject_id = clip.subject_id;
  out.clip_id = clip.clip_id;
  out.frame_modality = std::move(modality);
  return out;
}

}  // namespace detail

// Vertical concat per time step: visual rows on top, spectrogram rows below.
// Inputs must already be half-height; the output frame is twice as tall.
inline FusedSample fuse_cfas(const AlignedClip& clip) {
  detail::check_aligned(clip, 16, "fuse_cfas");
  const Index t = 16, h = clip.visual[0].rows(), w = clip.visual[0].cols();
  FusedSample out;
  out.x = Tensor<float>({t, 2 * h, w});
  for (Index i = 0; i < t; ++i) {
    std::copy(clip.visual[static_cast<std::size_t>(i)].data(),
              clip.visual[static_cast<std::size_t>(i)].data() + h * w,
              out.x.data() + i * 2 * h * w);
    std::copy(clip.audio_specs[static_cast<std::size_t>(i)].data(),
              clip.audio_specs[static_cast<std::size_t>(i)].data() + h * w,
              out.x.data() + i * 2 * h * w + h * w);
  }
  out.label = clip.label;
  out.subject_id = clip.subject_id;
  out.clip_id = clip.clip_id;
  out.frame_modality.assign(static_cast<std::size_t>(t), Modality::Mixed);
  out.split_row = h;
  return out;
}

// Per-frame min-max normalize both modalities, then add. Range [0, 2].
inline FusedSample fuse_sfas(const AlignedClip& clip) {
  detail::check_aligned(clip, 16, "fuse_sfas");
  const Index t = 16, h = clip.visual[0].rows(), w = clip.visual[0].cols();
  FusedSample out;
  out.x = Tensor<float>({t, h, w});
  for (Index i = 0; i < t; ++i) {
    const Tensor<float> nv = minmax_normalize(clip.visual[static_cast<std::size_t>(i)]);
    const Tensor<float> na = minmax_normalize(clip.audio_specs[static_cast<std::size_t>(i)]);
    for (Index j = 0; j < h * w; ++j) out.x[i * h * w + j] = nv[j] + na[j];
  }
  out.label = clip.label;
  out.subject_id = clip.subject_id;
  out.clip_id = clip.clip_id;
  out.frame_modality.assign(static_cast<std::size_t>(t), Modality::Mixed);
  return out;
}

inline FusedSample fuse_ffls(const AlignedClip& clip) {
  detail::check_aligned(clip, 8, "fuse_ffls");
  std::vector<const Tensor<float>*> frames;
  std::vector<Modality> modality;
  for (const auto& f : clip.visual) {
    frames.push_back(&f);
    modality.push_back(Modality::Visual);
  }
  for (const auto& f : clip.audio_specs) {
    frames.push_back(&f);
    modality.push_back(Modality::Audio);
  }
  return detail::from_frames(clip, frames, std::move(modality));
}

inline FusedSample fuse_fslf(const AlignedClip& clip) {
  detail::check_aligned(clip, 8, "fuse_fslf");
  std::vector<const Tensor<float>*> frames;
  std::vector<Modality> modality;
  for (const auto& f : clip.audio_specs) {
    frames.push_back(&f);
    modality.push_back(Modality::Audio);
  }
  for (const auto& f : clip.visual) {
    frames.push_back(&f);
    modality.push_back(Modality::Visual);
  }
  return detail::from_frames(clip, frames, std::move(modality));
}

inline FusedSample fuse_ofos(const AlignedClip& clip) {
  detail::check_aligned(clip, 8, "fuse_ofos");
  std::vector<const Tensor<float>*> frames;
  std::vector<Modality> modality;
  for (std::size_t i = 0; i < 8; ++i) {
    frames.push_back(&clip.visual[i]);
    modality.push_back(Modality::Visual);
    frames.push_back(&clip.audio_specs[i]);
    modality.push_back(Modality::Audio);
  }
  return detail::from_frames(clip, frames, std::move(modality));
}

// Seeded uniform permutation of the 16 stacked frames (visual first, then audio).
inline FusedSample fuse_rfas(const AlignedClip& clip, std::uint64_t seed) {
  detail::check_aligned(clip, 8, "fuse_rfas");
  std::vector<Index> perm(16);
  for (Index i = 0; i < 16; ++i) perm[static_cast<std::size_t>(i)] = i;
  SplitMix64 rng(seed);
  shuffle(perm, rng);

  std::vector<const Tensor<float>*> frames;
  std::vector<Modality> modality;
  for (Index p : perm) {
    if (p < 8) {
      frames.push_back(&clip.visual[static_cast<std::size_t>(p)]);
      modality.push_back(Modality::Visual);
    } else {
      frames.push_back(&clip.audio_specs[static_cast<std::size_t>(p - 8)]);
      modality.push_back(Modality::Audio);
    }
  }
  return detail::from_frames(clip, frames, std::move(modality));
}

inline FusedSample fuse(const AlignedClip& clip, Strategy s, std::uint64_t rfas_seed = 0) {
  switch (s) {
    case Strategy::CFAS: return fuse_cfas(clip);
    case Strategy::SFAS: return fuse_sfas(clip);
    case Strategy::FFLS: return fuse_ffls(clip);
    case Strategy::FSLF: return fuse_fslf(clip);
    case Strategy::OFOS: return fuse_ofos(clip);
    case Strategy::RFAS: return fuse_rfas(clip, rfas_seed);
  }
  throw ContractError("fuse: bad strategy");
}

// The number of aligned frames each strategy consumes per clip.
inline Index frames_needed(Strategy s) {
  return (s == Strategy::CFAS || s == Strategy::SFAS) ? 16 : 8;
}

}  // namespace avfuse
