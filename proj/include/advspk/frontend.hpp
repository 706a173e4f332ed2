#pragma once

#include <cstddef>

#include "advspk/gradcore.hpp"

namespace advspk {

struct FrontendConfig {
  double sample_rate = 16000.0;
  std::size_t window_length = 400;
  std::size_t hop_length = 160;
  std::size_t fft_size = 512;
  std::size_t mel_bins = 40;
  double log_floor = 1e-6;

  /// Throws Error naming the first violated constraint.
  void validate() const;
  std::size_t num_frames(std::size_t samples) const;
  std::size_t num_fft_bins() const { return fft_size / 2 + 1; }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular unit-peak filters on the HTK mel scale, [mel_bins, fft_size/2 + 1].
Tensor mel_filterbank(const FrontendConfig& config);
/// Center frequency in Hz of each mel filter.
std::vector<double> mel_center_frequencies(const FrontendConfig& config);

/// Differentiable log-mel spectrogram: Hann-windowed frames, power spectrum via
/// a DFT matrix, mel projection, log with a floor.
class LogMelFrontend {
 public:
  explicit LogMelFrontend(FrontendConfig config);

  const FrontendConfig& config() const noexcept { return config_; }

  /// [n, T] -> [n, frames, mel_bins], or [T] -> [frames, mel_bins].
  Value operator()(const Value& waveform) const;

 private:
  FrontendConfig config_;
  Value dft_basis_;  // [window, 2 * bins]: cos columns then sin columns, window folded in
  Value mel_stack_;  // [2 * bins, mel]: filterbank transposed, stacked twice
};

}  // namespace advspk
