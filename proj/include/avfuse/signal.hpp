#pragma once

#include <cmath>
#include <complex>
#include <utility>
#include <vector>

#include "avfuse/tensor.hpp"

namespace avfuse {

template <typename Scalar = DefaultScalar>
struct Waveform {
  std::vector<Scalar> samples;
  Index sample_rate = 0;
};

enum class Window { Hann, Rectangular };

struct SpectrogramConfig {
  Index n_fft = 512;
  Index hop = 160;
  Window window = Window::Hann;
  Index n_mels = 128;
  double f_min = 0.0;
  double f_max = 0.0;  // 0 means sample_rate / 2
  bool use_mfcc = false;
  Index n_mfcc = 13;
};

template <typename Scalar>
struct ComplexGrid {
  Index frames = 0;
  Index bins = 0;
  std::vector<std::complex<Scalar>> data;

  std::complex<Scalar>& operator()(Index t, Index k) {
    return data[static_cast<std::size_t>(t * bins + k)];
  }
  const std::complex<Scalar>& operator()(Index t, Index k) const {
    return data[static_cast<std::size_t>(t * bins + k)];
  }
};

namespace detail {

constexpr bool is_pow2(Index n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 decimation-in-time FFT, in place. n must be a power of two.
template <typename Scalar>
void fft_inplace(std::vector<std::complex<Scalar>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  std::vector<std::complex<Scalar>> tw(n / 2);
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    for (std::size_t j = 0; j < half; ++j) {
      const Scalar ang = Scalar(-2) * Scalar(M_PI) * Scalar(j) / Scalar(len);
      tw[j] = std::complex<Scalar>(std::cos(ang), std::sin(ang));
    }
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t j = 0; j < half; ++j) {
        const std::complex<Scalar> u = a[i + j];
        const std::complex<Scalar> v = a[i + j + half] * tw[j];
        a[i + j] = u + v;
        a[i + j + half] = u - v;
      }
    }
  }
}

template <typename Scalar>
std::vector<Scalar> window_values(Index n, Window w) {
  std::vector<Scalar> out(static_cast<std::size_t>(n), Scalar(1));
  if (w == Window::Hann) {
    for (Index j = 0; j < n; ++j) {
      out[static_cast<std::size_t>(j)] =
          Scalar(0.5) * (Scalar(1) - std::cos(Scalar(2) * Scalar(M_PI) * Scalar(j) / Scalar(n)));
    }
  }
  return out;
}

}  // namespace detail

// Frame t covers samples [t*hop, t*hop + n_fft); one-sided spectrum per frame.
// Input shorter than n_fft is zero-padded to a single frame.
template <typename Scalar>
ComplexGrid<Scalar> stft(const std::vector<Scalar>& samples, Index n_fft, Index hop,
                         Window window = Window::Hann) {
  if (samples.empty()) throw ContractError("stft: empty waveform");
  if (!detail::is_pow2(n_fft)) {
    throw ContractError("stft: n_fft must be a power of two, got " + std::to_string(n_fft));
  }
  if (hop < 1) throw ContractError("stft: hop must be >= 1");

  const Index len = static_cast<Index>(samples.size());
  const Index frames = len < n_fft ? 1 : 1 + (len - n_fft) / hop;
  const Index bins = n_fft / 2 + 1;
  const auto win = detail::window_values<Scalar>(n_fft, window);

  ComplexGrid<Scalar> grid;
  grid.frames = frames;
  grid.bins = bins;
  grid.data.resize(static_cast<std::size_t>(frames * bins));

  std::vector<std::complex<Scalar>> frame(static_cast<std::size_t>(n_fft));
  for (Index t = 0; t < frames; ++t) {
    const Index start = t * hop;
    for (Index j = 0; j < n_fft; ++j) {
      const Index s = start + j;
      const Scalar x = s < len ? samples[static_cast<std::size_t>(s)] : Scalar(0);
      frame[static_cast<std::size_t>(j)] = x * win[static_cast<std::size_t>(j)];
    }
    detail::fft_inplace(frame);
    for (Index k = 0; k < bins; ++k) grid(t, k) = frame[static_cast<std::size_t>(k)];
  }
  return grid;
}

template <typename Scalar>
Tensor<Scalar> power_spectrum(const ComplexGrid<Scalar>& g) {
  Tensor<Scalar> p({g.frames, g.bins});
  for (Index i = 0; i < p.size(); ++i) p[i] = std::norm(g.data[static_cast<std::size_t>(i)]);
  return p;
}

// Triangular filters with peak 1, centers uniform on mel(f) = 2595 log10(1 + f/700),
// evaluated at the linear-frequency bin grid k * sample_rate / n_fft.
template <typename Scalar>
Tensor<Scalar> mel_filterbank(Index n_mels, Index n_fft, Index sample_rate, double f_min,
                              double f_max) {
  if (f_max <= 0.0) f_max = sample_rate / 2.0;
  if (n_mels < 1 || f_min < 0.0 || f_min >= f_max || f_max > sample_rate / 2.0 + 1e-9) {
    throw ContractError("mel_filterbank: invalid band edges [" + std::to_string(f_min) + ", " +
                        std::to_string(f_max) + ") for sample rate " + std::to_string(sample_rate));
  }
  const auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  const auto imel = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };

  const Index bins = n_fft / 2 + 1;
  const double mel_lo = mel(f_min), mel_hi = mel(f_max);
  std::vector<double> edge(static_cast<std::size_t>(n_mels) + 2);
  for (Index i = 0; i < n_mels + 2; ++i) {
    edge[static_cast<std::size_t>(i)] = imel(mel_lo + (mel_hi - mel_lo) * i / double(n_mels + 1));
  }

  Tensor<Scalar> fb({n_mels, bins});
  for (Index m = 0; m < n_mels; ++m) {
    const double left = edge[static_cast<std::size_t>(m)];
    const double center = edge[static_cast<std::size_t>(m) + 1];
    const double right = edge[static_cast<std::size_t>(m) + 2];
    for (Index k = 0; k < bins; ++k) {
      const double f = double(k) * sample_rate / double(n_fft);
      double w = 0.0;
      if (f > left && f < right) {
        w = f <= center ? (f - left) / (center - left) : (right - f) / (right - center);
      }
      fb(m, k) = static_cast<Scalar>(w);
    }
  }
  return fb;
}

template <typename Scalar>
std::vector<double> mel_centers(Index n_mels, Index sample_rate, double f_min, double f_max) {
  if (f_max <= 0.0) f_max = sample_rate / 2.0;
  const double lo = 2595.0 * std::log10(1.0 + f_min / 700.0);
  const double hi = 2595.0 * std::log10(1.0 + f_max / 700.0);
  std::vector<double> out(static_cast<std::size_t>(n_mels));
  for (Index m = 0; m < n_mels; ++m) {
    const double mm = lo + (hi - lo) * (m + 1) / double(n_mels + 1);
    out[static_cast<std::size_t>(m)] = 700.0 * (std::pow(10.0, mm / 2595.0) - 1.0);
  }
  return out;
}

// log(power @ filterbank^T + 1e-10), frames x n_mels.
template <typename Scalar>
Tensor<Scalar> log_mel(const Waveform<Scalar>& w, const SpectrogramConfig& cfg) {
  if (w.sample_rate <= 0) throw ContractError("log_mel: sample_rate must be positive");
  const auto grid = stft(w.samples, cfg.n_fft, cfg.hop, cfg.window);
  const Tensor<Scalar> power = power_spectrum(grid);
  const Tensor<Scalar> fb =
      mel_filterbank<Scalar>(cfg.n_mels, cfg.n_fft, w.sample_rate, cfg.f_min, cfg.f_max);
  Tensor<Scalar> out({grid.frames, cfg.n_mels});
  out.matrix().noalias() = power.matrix() * fb.matrix().transpose();
  out.flat() = (out.flat() + Scalar(1e-10)).log();
  return out;
}

// Orthonormal type-II DCT along the mel axis; keeps the first n_coeffs.
template <typename Scalar>
Tensor<Scalar> mfcc(const Tensor<Scalar>& log_mel_grid, Index n_coeffs) {
  if (log_mel_grid.rank() != 2) {
    throw ContractError("mfcc: rank-2 grid required, got " + shape_str(log_mel_grid.shape()));
  }
  const Index n = log_mel_grid.cols();
  if (n_coeffs < 1 || n_coeffs > n) {
    throw ContractError("mfcc: n_coeffs " + std::to_string(n_coeffs) + " out of range for " +
                        std::to_string(n) + " mel bands");
  }
  Tensor<Scalar> basis({n_coeffs, n});
  for (Index k = 0; k < n_coeffs; ++k) {
    const Scalar s = k == 0 ? std::sqrt(Scalar(1) / Scalar(n)) : std::sqrt(Scalar(2) / Scalar(n));
    for (Index j = 0; j < n; ++j) {
      basis(k, j) = s * std::cos(Scalar(M_PI) * (Scalar(2) * j + 1) * k / (Scalar(2) * n));
    }
  }
  Tensor<Scalar> out({log_mel_grid.rows(), n_coeffs});
  out.matrix().noalias() = log_mel_grid.matrix() * basis.matrix().transpose();
  return out;
}

// Align-corners bilinear resample of a rank-2 grid.
template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& g, Index out_h, Index out_w) {
  if (g.rank() != 2 || g.size() == 0) {
    throw ContractError("bilinear_resize: non-empty rank-2 grid required");
  }
  if (out_h < 1 || out_w < 1) throw ContractError("bilinear_resize: output dims must be positive");
  const Index h = g.rows(), w = g.cols();
  Tensor<Scalar> out({out_h, out_w});
  for (Index r = 0; r < out_h; ++r) {
    const Scalar fy = out_h == 1 ? Scalar(0) : Scalar(r) * Scalar(h - 1) / Scalar(out_h - 1);
    const Index y0 = static_cast<Index>(std::floor(fy));
    const Index y1 = std::min<Index>(y0 + 1, h - 1);
    const Scalar ty = fy - Scalar(y0);
    for (Index c = 0; c < out_w; ++c) {
      const Scalar fx = out_w == 1 ? Scalar(0) : Scalar(c) * Scalar(w - 1) / Scalar(out_w - 1);
      const Index x0 = static_cast<Index>(std::floor(fx));
      const Index x1 = std::min<Index>(x0 + 1, w - 1);
      const Scalar tx = fx - Scalar(x0);
      const Scalar top = g(y0, x0) * (Scalar(1) - tx) + g(y0, x1) * tx;
      const Scalar bot = g(y1, x0) * (Scalar(1) - tx) + g(y1, x1) * tx;
      out(r, c) = top * (Scalar(1) - ty) + bot * ty;
    }
  }
  return out;
}

// Resize then min-max normalize to [0,1]; a constant grid maps to all zeros.
template <typename Scalar>
Tensor<Scalar> to_image(const Tensor<Scalar>& grid, Index height, Index width) {
  return minmax_normalize(bilinear_resize(grid, height, width));
}

// The full audio front end: waveform window -> normalized height x width image.
// Rows are mel bands (or cepstral coefficients), columns are time.
template <typename Scalar>
Tensor<Scalar> spectrogram_image(const Waveform<Scalar>& w, const SpectrogramConfig& cfg,
                                 Index height, Index width) {
  Tensor<Scalar> grid = log_mel(w, cfg);
  if (cfg.use_mfcc) grid = mfcc(grid, cfg.n_mfcc);
  return to_image(transpose_value(grid), height, width);
}

}  // namespace avfuse
