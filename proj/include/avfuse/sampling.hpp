#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "avfuse/signal.hpp"
#include "avfuse/tensor.hpp"

namespace avfuse {

struct RawClip {
  std::string clip_id;
  std::vector<Tensor<float>> frames;  // H x W, values in [0,1]
  double fps = 0.0;
  Waveform<float> audio;
  Index label = -1;
  std::string subject_id;
};

// T video frames and the T spectrogram images sharing their center times.
struct AlignedClip {
  std::string clip_id;
  std::vector<Tensor<float>> visual;
  std::vector<Tensor<float>> audio_specs;
  Index label = -1;
  std::string subject_id;
};

// Uniform temporal downsampling: [0, step, 2 step, ...], count entries.
// With pad_last, indices past the end repeat the final frame instead of failing.
inline std::vector<Index> sample_indices(Index total_frames, Index count, Index step,
                                         bool pad_last = false) {
  if (count < 1 || step < 1) throw ContractError("sample_indices: count and step must be >= 1");
  const Index required = 1 + (count - 1) * step;
  if (total_frames < required && !pad_last) {
    throw ContractError("sample_indices: clip has " + std::to_string(total_frames) +
                        " frames, need " + std::to_string(required) + " for count " +
                        std::to_string(count) + " step " + std::to_string(step));
  }
  if (total_frames < 1) throw ContractError("sample_indices: empty clip");
  std::vector<Index> out(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    out[static_cast<std::size_t>(i)] = std::min(i * step, total_frames - 1);
  }
  return out;
}

inline double frame_time(Index index, double fps) {
  if (fps <= 0.0) throw ContractError("frame_time: fps must be positive");
  return static_cast<double>(index) / fps;
}

// The two seconds of audio around a frame: [center_t - 1, center_t + 1),
// zero-padded outside the recording so the length is always 2 * sample_rate.
template <typename Scalar>
Waveform<Scalar> audio_window(const Waveform<Scalar>& audio, double center_t) {
  if (audio.sample_rate <= 0) throw ContractError("audio_window: sample_rate must be positive");
  if (center_t < 0.0) throw ContractError("audio_window: negative center time");
  const Index sr = audio.sample_rate;
  const Index start = static_cast<Index>(std::llround((center_t - 1.0) * static_cast<double>(sr)));
  const Index len = static_cast<Index>(audio.samples.size());
  Waveform<Scalar> out;
  out.sample_rate = sr;
  out.samples.assign(static_cast<std::size_t>(2 * sr), Scalar(0));
  for (Index i = 0; i < 2 * sr; ++i) {
    const Index s = start + i;
    if (s >= 0 && s < len) out.samples[static_cast<std::size_t>(i)] = audio.samples[static_cast<std::size_t>(s)];
  }
  return out;
}

// Downsample the video, window the audio per frame time, and render each
// window to a spectrogram image of the same size as the (resized) frames.
inline AlignedClip align(const RawClip& clip, Index count, Index step,
                         const SpectrogramConfig& spec_cfg, Index image_h, Index image_w,
                         bool pad_last = false) {
  if (clip.frames.empty()) throw ContractError("align: clip '" + clip.clip_id + "' has no frames");
  if (count != 8 && count != 16) {
    throw ContractError("align: frame count must be 8 or 16, got " + std::to_string(count));
  }
  const auto indices =
      sample_indices(static_cast<Index>(clip.frames.size()), count, step, pad_last);

  AlignedClip out;
  out.clip_id = clip.clip_id;
  out.label = clip.label;
  out.subject_id = clip.subject_id;
  out.visual.reserve(static_cast<std::size_t>(count));
  out.audio_specs.reserve(static_cast<std::size_t>(count));
  for (Index idx : indices) {
    const Tensor<float>& frame = clip.frames[static_cast<std::size_t>(idx)];
    out.visual.push_back(frame.rows() == image_h && frame.cols() == image_w
                             ? frame
                             : bilinear_resize(frame, image_h, image_w));
    const auto window = audio_window(clip.audio, frame_time(idx, clip.fps));
    out.audio_specs.push_back(spectrogram_image(window, spec_cfg, image_h, image_w));
  }
  return out;
}

}  // namespace avfuse
