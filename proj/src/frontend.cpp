#include "advspk/frontend.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace advspk {

void FrontendConfig::validate() const {
  if (!(sample_rate > 0.0)) throw Error("frontend.sample_rate must be positive");
  if (window_length == 0) throw Error("frontend.window_length must be positive");
  if (hop_length == 0) throw Error("frontend.hop_length must be positive");
  if (window_length > fft_size) throw Error("frontend.window_length must not exceed frontend.fft_size");
  if (hop_length > window_length) throw Error("frontend.hop_length must not exceed frontend.window_length");
  if (mel_bins < 1) throw Error("frontend.mel_bins must be at least 1");
  if (!(log_floor > 0.0)) throw Error("frontend.log_floor must be positive");
}

std::size_t FrontendConfig::num_frames(std::size_t samples) const {
  if (samples < window_length) {
    throw Error("waveform of " + std::to_string(samples) + " samples is shorter than one window (" +
                std::to_string(window_length) + ")");
  }
  return (samples - window_length) / hop_length + 1;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {
std::vector<double> mel_edges(const FrontendConfig& config) {
  const double top = hz_to_mel(config.sample_rate / 2.0);
  std::vector<double> edges(config.mel_bins + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(config.mel_bins + 1));
  }
  return edges;
}
}  // namespace

std::vector<double> mel_center_frequencies(const FrontendConfig& config) {
  const auto edges = mel_edges(config);
  return {edges.begin() + 1, edges.end() - 1};
}

Tensor mel_filterbank(const FrontendConfig& config) {
  config.validate();
  const auto edges = mel_edges(config);
  const std::size_t bins = config.num_fft_bins();
  Tensor fb({config.mel_bins, bins});
  for (std::size_t m = 0; m < config.mel_bins; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * config.sample_rate / static_cast<double>(config.fft_size);
      double w = 0.0;
      if (f > lo && f <= mid) {
        w = (f - lo) / (mid - lo);
      } else if (f > mid && f < hi) {
        w = (hi - f) / (hi - mid);
      }
      fb.at(m, k) = w;
    }
  }
  return fb;
}

LogMelFrontend::LogMelFrontend(FrontendConfig config) : config_(config) {
  config_.validate();
  const std::size_t width = config_.window_length;
  const std::size_t bins = config_.num_fft_bins();
  const double n = static_cast<double>(config_.fft_size);

  Tensor basis({width, 2 * bins});
  for (std::size_t t = 0; t < width; ++t) {
    const double hann = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(width));
    for (std::size_t k = 0; k < bins; ++k) {
      // Reduce k*t mod N before scaling so large products keep full precision.
      const double phase = 2.0 * std::numbers::pi * static_cast<double>((k * t) % config_.fft_size) / n;
      basis.at(t, k) = hann * std::cos(phase);
      basis.at(t, bins + k) = -hann * std::sin(phase);
    }
  }
  dft_basis_ = Value::constant(std::move(basis));

  const Tensor fb = mel_filterbank(config_);
  Tensor stack({2 * bins, config_.mel_bins});
  for (std::size_t k = 0; k < bins; ++k) {
    for (std::size_t m = 0; m < config_.mel_bins; ++m) {
      stack.at(k, m) = fb.at(m, k);
      stack.at(bins + k, m) = fb.at(m, k);
    }
  }
  mel_stack_ = Value::constant(std::move(stack));
}

Value LogMelFrontend::operator()(const Value& waveform) const {
  const Shape& s = waveform.shape();
  if (s.size() == 1) {
    const Value batched = (*this)(ag::reshape(waveform, {1, s[0]}));
    const Shape& b = batched.shape();
    return ag::reshape(batched, {b[1], b[2]});
  }
  if (s.size() != 2) throw ShapeError("log_mel: expected waveform [T] or [n, T], got " + shape_str(s));
  const std::size_t frames = config_.num_frames(s[1]);

  const Value framed = ag::frame(waveform, config_.window_length, config_.hop_length);
  const Value spectrum = ag::matmul(framed, dft_basis_);
  const Value mel = ag::matmul(ag::square(spectrum), mel_stack_);
  const double inf = std::numeric_limits<double>::infinity();
  const Value logmel = ag::log(ag::clamp(mel, config_.log_floor, inf));
  return ag::reshape(logmel, {s[0], frames, config_.mel_bins});
}

}  // namespace advspk
