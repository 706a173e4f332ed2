#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advspk/frontend.hpp"
#include "advspk/gradcore.hpp"

namespace advspk {

struct SpeakerCNNConfig {
  std::size_t num_stacks = 8;
  std::vector<std::size_t> channels_per_stack{16, 16, 32, 32, 64, 64, 128, 128};
  std::size_t kernel_size = 5;
  /// A max-pool follows every `pool_every`-th conv stack.
  std::size_t pool_every = 2;
  std::size_t pool_width = 2;
  std::size_t num_speakers = 251;

  static SpeakerCNNConfig tiny(std::size_t num_speakers);
  void validate() const;
};

enum class LayerKind { kConv, kBatchNorm, kRelu, kMaxPool, kGlobalAvgPool, kLinear };

const char* layer_name(LayerKind kind);

/// Trainable tensors in a fixed order plus batch-norm running statistics.
///
/// Order per conv stack i: conv weight [Cout, Cin, K], conv bias, bn gamma,
/// bn beta; then classifier weight [num_speakers, C_last] and bias.
struct ModelParams {
  std::vector<Tensor> trainable;
  std::vector<ag::BatchNormState> norm_state;

  friend bool operator==(const ModelParams& a, const ModelParams& b);
};

std::vector<std::string> parameter_names(const SpeakerCNNConfig& config);

struct ForwardOptions {
  ag::NormMode mode = ag::NormMode::kEval;
  /// Train mode only: receives the running-statistics update.
  std::vector<ag::BatchNormState>* running_update = nullptr;
  /// When set, parameters enter the graph as requires_grad leaves, stored here
  /// in ModelParams::trainable order. Leaves already present are reused.
  std::vector<Value>* param_leaves = nullptr;
};

/// Log-mel frontend followed by a 1-D CNN over time with mel bins as channels.
class SpeakerModel {
 public:
  SpeakerModel(FrontendConfig frontend, SpeakerCNNConfig cnn);

  const FrontendConfig& frontend_config() const noexcept { return frontend_.config(); }
  const SpeakerCNNConfig& cnn_config() const noexcept { return cnn_; }
  const LogMelFrontend& frontend() const noexcept { return frontend_; }

  /// He-initialized parameters; identical for identical seeds.
  ModelParams build(std::uint64_t seed) const;

  std::vector<LayerKind> plan() const;
  /// Shortest waveform that survives every pooling layer.
  std::size_t min_samples() const;

  /// [n, T] waveforms -> [n, num_speakers] logits.
  Value forward_logits(const ModelParams& params, const Value& waveforms, const ForwardOptions& options = {}) const;

  /// Round inputs to a grid before the frontend. Used as a gradient-masking
  /// control; zero disables it.
  void set_input_quantization(double step) { input_quantization_ = step; }
  double input_quantization() const noexcept { return input_quantization_; }

  void check_params(const ModelParams& params) const;

 private:
  LogMelFrontend frontend_;
  SpeakerCNNConfig cnn_;
  double input_quantization_ = 0.0;
};

void to_json(nlohmann::json& j, const FrontendConfig& c);
void from_json(const nlohmann::json& j, FrontendConfig& c);
void to_json(nlohmann::json& j, const SpeakerCNNConfig& c);
void from_json(const nlohmann::json& j, SpeakerCNNConfig& c);

/// Versioned binary model container.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  FrontendConfig frontend;
  SpeakerCNNConfig cnn;
  ModelParams params;
  /// SGD momentum buffers, same order as params.trainable; may be empty.
  std::vector<Tensor> velocity;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  /// Free-form provenance (defense kind, epochs, corpus fingerprint, ...).
  nlohmann::json metadata = nlohmann::json::object();

  friend bool operator==(const Checkpoint& a, const Checkpoint& b);
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace advspk
