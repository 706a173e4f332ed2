#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "advspk/frontend.hpp"
#include "op_catalog.hpp"

using namespace advspk;

namespace {

FrontendConfig small_config() {
  FrontendConfig c;
  c.sample_rate = 8000.0;
  c.window_length = 64;
  c.hop_length = 32;
  c.fft_size = 64;
  c.mel_bins = 8;
  return c;
}

// Straightforward log-mel: explicit complex DFT per frame and filters built
// from the mel formula, no shared code with the library.
std::vector<std::vector<double>> reference_log_mel(const std::vector<double>& x, const FrontendConfig& c) {
  const std::size_t w = c.window_length, bins = c.fft_size / 2 + 1;
  const double top = 2595.0 * std::log10(1.0 + c.sample_rate / 2.0 / 700.0);
  std::vector<double> edges_hz;
  for (std::size_t i = 0; i < c.mel_bins + 2; ++i) {
    const double mel = top * static_cast<double>(i) / static_cast<double>(c.mel_bins + 1);
    edges_hz.push_back(700.0 * (std::pow(10.0, mel / 2595.0) - 1.0));
  }
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start + w <= x.size(); start += c.hop_length) {
    std::vector<double> power(bins);
    for (std::size_t k = 0; k < bins; ++k) {
      std::complex<double> acc = 0.0;
      for (std::size_t t = 0; t < w; ++t) {
        const double hann = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(w)));
        acc += hann * x[start + t] *
               std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * t) / static_cast<double>(c.fft_size));
      }
      power[k] = std::norm(acc);
    }
    std::vector<double> row(c.mel_bins);
    for (std::size_t m = 0; m < c.mel_bins; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) {
        const double f = static_cast<double>(k) * c.sample_rate / static_cast<double>(c.fft_size);
        const double lo = edges_hz[m], mid = edges_hz[m + 1], hi = edges_hz[m + 2];
        const double tri = std::max(0.0, std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid)));
        e += tri * power[k];
      }
      row[m] = std::log(std::max(e, c.log_floor));
    }
    out.push_back(row);
  }
  return out;
}

std::vector<double> sine(double hz, double sr, std::size_t n, double amp = 0.5) {
  std::vector<double> v(n);
  for (std::size_t t = 0; t < n; ++t) v[t] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(t) / sr);
  return v;
}

}  // namespace

TEST(Frontend, SilenceFloorsEveryOutput) {
  const LogMelFrontend fe(FrontendConfig{});
  const Value y = fe(Value::constant(Tensor({1600}, 0.0)));
  for (double v : y.data().values()) EXPECT_EQ(v, std::log(1e-6));
}

TEST(Frontend, MatchesExplicitDftReference) {
  const FrontendConfig c = small_config();
  std::mt19937_64 rng(1);
  const Tensor x = fixtures::random_tensor({300}, rng, -0.5, 0.5);
  const Value y = LogMelFrontend(c)(Value::constant(x));
  const auto ref = reference_log_mel(x.storage(), c);
  ASSERT_EQ(y.shape(), (Shape{ref.size(), c.mel_bins}));
  for (std::size_t f = 0; f < ref.size(); ++f) {
    for (std::size_t m = 0; m < c.mel_bins; ++m) EXPECT_NEAR(y.data().at(f, m), ref[f][m], 1e-9);
  }
}

TEST(Frontend, SineAtFilterCenterDominatesThatBin) {
  const FrontendConfig c;
  const LogMelFrontend fe(c);
  const auto centers = mel_center_frequencies(c);
  // Low filters are narrower than one FFT bin; start where they are resolvable.
  for (std::size_t m = 4; m < c.mel_bins; ++m) {
    const Tensor x = Tensor::vector(sine(centers[m], c.sample_rate, 1200));
    const Value y = fe(Value::constant(x));
    const std::size_t frames = y.shape()[0];
    for (std::size_t f = 0; f < frames; ++f) {
      const double* row = y.data().data() + f * c.mel_bins;
      EXPECT_EQ(static_cast<std::size_t>(std::max_element(row, row + c.mel_bins) - row), m) << "frame " << f;
    }
  }
}

TEST(Frontend, GradientMatchesFiniteDifferences) {
  const LogMelFrontend fe(small_config());
  std::mt19937_64 rng(2);
  const double err = finite_diff_check([&](const Value& x) { return ag::sum(fe(x)); },
                                       fixtures::random_tensor({2, 160}, rng, -0.5, 0.5), {1e-6, 1e-6});
  EXPECT_LT(err, 1e-4);
}

TEST(Frontend, FrameCountFormula) {
  const FrontendConfig c;
  const LogMelFrontend fe(c);
  for (std::size_t t : {400u, 401u, 559u, 560u, 4000u}) {
    EXPECT_EQ(fe(Value::constant(Tensor({t}, 0.1))).shape()[0], (t - 400) / 160 + 1);
    EXPECT_EQ(c.num_frames(t), (t - 400) / 160 + 1);
  }
}

TEST(Frontend, ShorterThanOneWindowIsAnError) {
  const LogMelFrontend fe(FrontendConfig{});
  EXPECT_THROW(fe(Value::constant(Tensor({399}, 0.0))), Error);
}

TEST(Frontend, ScalingUpNeverDecreasesOutput) {
  const LogMelFrontend fe(small_config());
  std::mt19937_64 rng(3);
  const Tensor x = fixtures::random_tensor({256}, rng, -0.3, 0.3);
  const Tensor base = fe(Value::constant(x)).data();
  for (double c : {1.0001, 1.5, 3.0}) {
    Tensor xs = x;
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] *= c;
    const Tensor scaled = fe(Value::constant(xs)).data();
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_GE(scaled[i], base[i]);
  }
}

TEST(Frontend, BatchRowsAreIndependent) {
  const LogMelFrontend fe(small_config());
  std::mt19937_64 rng(4);
  const Tensor x = fixtures::random_tensor({2, 200}, rng);
  const Tensor both = fe(Value::constant(x)).data();
  const Tensor second = fe(Value::constant(Tensor({200}, std::vector<double>(x.data() + 200, x.data() + 400)))).data();
  for (std::size_t i = 0; i < second.size(); ++i) EXPECT_EQ(both[second.size() + i], second[i]);
}

TEST(Filterbank, TriangularNonNegativeAndCoversTheBand) {
  const FrontendConfig c;
  const Tensor fb = mel_filterbank(c);
  ASSERT_EQ(fb.shape(), (Shape{40, 257}));
  for (double w : fb.values()) {
    EXPECT_GE(w, 0.0);
    EXPECT_LE(w, 1.0);
  }
  const auto centers = mel_center_frequencies(c);
  for (std::size_t m = 1; m < centers.size(); ++m) EXPECT_GT(centers[m], centers[m - 1]);
  // Every FFT bin strictly inside (0, Nyquist) is seen by some filter.
  for (std::size_t k = 1; k + 1 < 257; ++k) {
    double s = 0.0;
    for (std::size_t m = 0; m < 40; ++m) s += fb.at(m, k);
    EXPECT_GT(s, 0.0) << "bin " << k;
  }
  // A filter sampled exactly at its center reaches the unit peak.
  FrontendConfig fine = c;
  fine.fft_size = 16000;
  fine.window_length = 400;
  const Tensor fbf = mel_filterbank(fine);
  const auto cf = mel_center_frequencies(fine);
  const auto k = static_cast<std::size_t>(std::lround(cf[20]));
  EXPECT_NEAR(fbf.at(20, k), 1.0, 0.01);
}

TEST(Filterbank, MelScaleRoundTrips) {
  for (double hz : {0.0, 100.0, 700.0, 4000.0, 8000.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(hz)), hz, 1e-9);
  EXPECT_NEAR(hz_to_mel(700.0), 2595.0 * std::log10(2.0), 1e-12);
}

TEST(FrontendConfig, ValidationNamesTheField) {
  FrontendConfig c;
  c.window_length = 600;
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("frontend.window_length"), std::string::npos);
  }
  c = FrontendConfig{};
  c.log_floor = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = FrontendConfig{};
  c.hop_length = 500;
  EXPECT_THROW(c.validate(), Error);
}
