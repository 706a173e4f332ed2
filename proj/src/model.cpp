#include "advspk/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

namespace advspk {

SpeakerCNNConfig SpeakerCNNConfig::tiny(std::size_t num_speakers) {
  SpeakerCNNConfig c;
  c.num_stacks = 2;
  c.channels_per_stack = {8, 8};
  c.kernel_size = 5;
  c.pool_every = 2;
  c.pool_width = 2;
  c.num_speakers = num_speakers;
  return c;
}

void SpeakerCNNConfig::validate() const {
  if (num_stacks == 0) throw Error("model.num_stacks must be positive");
  if (channels_per_stack.size() != num_stacks) {
    throw Error("model.channels_per_stack has " + std::to_string(channels_per_stack.size()) +
                " entries but model.num_stacks is " + std::to_string(num_stacks));
  }
  for (std::size_t c : channels_per_stack) {
    if (c == 0) throw Error("model.channels_per_stack entries must be positive");
  }
  if (kernel_size == 0) throw Error("model.kernel_size must be positive");
  if (pool_every == 0) throw Error("model.pool_every must be positive");
  if (pool_width < 2) throw Error("model.pool_width must be at least 2");
  if (num_speakers < 2) throw Error("model.num_speakers must be at least 2");
}

const char* layer_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kBatchNorm: return "batch_norm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "max_pool";
    case LayerKind::kGlobalAvgPool: return "global_avg_pool";
    case LayerKind::kLinear: return "linear";
  }
  return "?";
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.trainable != b.trainable || a.norm_state.size() != b.norm_state.size()) return false;
  for (std::size_t i = 0; i < a.norm_state.size(); ++i) {
    if (a.norm_state[i].running_mean != b.norm_state[i].running_mean ||
        a.norm_state[i].running_var != b.norm_state[i].running_var) {
      return false;
    }
  }
  return true;
}

std::vector<std::string> parameter_names(const SpeakerCNNConfig& config) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < config.num_stacks; ++i) {
    const std::string p = "stack" + std::to_string(i) + ".";
    names.push_back(p + "conv.weight");
    names.push_back(p + "conv.bias");
    names.push_back(p + "bn.gamma");
    names.push_back(p + "bn.beta");
  }
  names.emplace_back("classifier.weight");
  names.emplace_back("classifier.bias");
  return names;
}

SpeakerModel::SpeakerModel(FrontendConfig frontend, SpeakerCNNConfig cnn)
    : frontend_(frontend), cnn_(std::move(cnn)) {
  cnn_.validate();
}

ModelParams SpeakerModel::build(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  auto he_normal = [&rng](Shape shape, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = dist(rng);
    return t;
  };

  ModelParams p;
  std::size_t cin = frontend_.config().mel_bins;
  for (std::size_t i = 0; i < cnn_.num_stacks; ++i) {
    const std::size_t cout = cnn_.channels_per_stack[i];
    p.trainable.push_back(he_normal({cout, cin, cnn_.kernel_size}, cin * cnn_.kernel_size));
    p.trainable.emplace_back(Shape{cout}, 0.0);
    p.trainable.emplace_back(Shape{cout}, 1.0);
    p.trainable.emplace_back(Shape{cout}, 0.0);
    p.norm_state.push_back({Tensor({cout}, 0.0), Tensor({cout}, 1.0)});
    cin = cout;
  }
  p.trainable.push_back(he_normal({cnn_.num_speakers, cin}, cin));
  p.trainable.emplace_back(Shape{cnn_.num_speakers}, 0.0);
  return p;
}

std::vector<LayerKind> SpeakerModel::plan() const {
  std::vector<LayerKind> layers;
  for (std::size_t i = 0; i < cnn_.num_stacks; ++i) {
    layers.insert(layers.end(), {LayerKind::kConv, LayerKind::kBatchNorm, LayerKind::kRelu});
    if ((i + 1) % cnn_.pool_every == 0) layers.push_back(LayerKind::kMaxPool);
  }
  layers.push_back(LayerKind::kGlobalAvgPool);
  layers.push_back(LayerKind::kLinear);
  return layers;
}

namespace {
std::size_t conv_out_len(std::size_t len, std::size_t k) { return len + 2 * (k / 2) - k + 1; }
}  // namespace

std::size_t SpeakerModel::min_samples() const {
  // Smallest frame count that leaves at least one step after every layer.
  const auto& fc = frontend_.config();
  for (std::size_t frames = 1;; ++frames) {
    std::size_t len = frames;
    bool ok = true;
    for (std::size_t i = 0; i < cnn_.num_stacks && ok; ++i) {
      len = conv_out_len(len, cnn_.kernel_size);
      if ((i + 1) % cnn_.pool_every == 0) {
        len /= cnn_.pool_width;
        ok = len >= 1;
      }
    }
    if (ok) return fc.window_length + (frames - 1) * fc.hop_length;
  }
}

void SpeakerModel::check_params(const ModelParams& params) const {
  const auto reference = build(0);
  if (params.trainable.size() != reference.trainable.size() ||
      params.norm_state.size() != reference.norm_state.size()) {
    throw Error("model parameters do not match the architecture: expected " +
                std::to_string(reference.trainable.size()) + " tensors, got " + std::to_string(params.trainable.size()));
  }
  const auto names = parameter_names(cnn_);
  for (std::size_t i = 0; i < params.trainable.size(); ++i) {
    if (params.trainable[i].shape() != reference.trainable[i].shape()) {
      throw ShapeError("parameter " + names[i] + " has shape " + shape_str(params.trainable[i].shape()) +
                       ", expected " + shape_str(reference.trainable[i].shape()));
    }
  }
}

Value SpeakerModel::forward_logits(const ModelParams& params, const Value& waveforms,
                                   const ForwardOptions& options) const {
  if (waveforms.shape().size() != 2) {
    throw ShapeError("forward_logits: expected waveforms [n, T], got " + shape_str(waveforms.shape()));
  }
  if (waveforms.shape()[1] < min_samples()) {
    throw ShapeError("forward_logits: " + std::to_string(waveforms.shape()[1]) +
                     " samples is below the receptive field of " + std::to_string(min_samples()));
  }
  const bool train = options.mode == ag::NormMode::kTrain;

  // A non-empty leaf vector is reused so several forwards share one set of
  // gradient accumulators.
  std::vector<Value> leaves;
  if (options.param_leaves && !options.param_leaves->empty()) {
    leaves = *options.param_leaves;
    if (leaves.size() != params.trainable.size()) {
      throw ShapeError("forward_logits: " + std::to_string(leaves.size()) + " parameter leaves for " +
                       std::to_string(params.trainable.size()) + " tensors");
    }
  } else {
    leaves.reserve(params.trainable.size());
    for (const Tensor& t : params.trainable) leaves.push_back(Value::leaf(t, options.param_leaves != nullptr));
  }

  Value x = waveforms;
  if (input_quantization_ > 0.0) x = ag::quantize(x, input_quantization_);
  x = ag::transpose(frontend_(x));  // [n, mel, frames]

  for (std::size_t i = 0; i < cnn_.num_stacks; ++i) {
    x = ag::conv1d(x, leaves[4 * i], leaves[4 * i + 1], cnn_.kernel_size / 2);
    ag::BatchNormOptions bn;
    bn.mode = options.mode;
    if (train && options.running_update) bn.running_update = &(*options.running_update)[i];
    x = ag::relu(ag::batch_norm(x, leaves[4 * i + 2], leaves[4 * i + 3], params.norm_state[i], bn));
    if ((i + 1) % cnn_.pool_every == 0) x = ag::max_pool1d(x, cnn_.pool_width);
  }
  const std::size_t last = 4 * cnn_.num_stacks;
  Value logits = ag::linear(ag::mean_last(x), leaves[last], leaves[last + 1]);
  if (options.param_leaves && options.param_leaves->empty()) *options.param_leaves = std::move(leaves);
  return logits;
}

void to_json(nlohmann::json& j, const FrontendConfig& c) {
  j = {{"sample_rate", c.sample_rate}, {"window_length", c.window_length}, {"hop_length", c.hop_length},
       {"fft_size", c.fft_size},       {"mel_bins", c.mel_bins},           {"log_floor", c.log_floor}};
}

void from_json(const nlohmann::json& j, FrontendConfig& c) {
  c = FrontendConfig{};
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.window_length = j.value("window_length", c.window_length);
  c.hop_length = j.value("hop_length", c.hop_length);
  c.fft_size = j.value("fft_size", c.fft_size);
  c.mel_bins = j.value("mel_bins", c.mel_bins);
  c.log_floor = j.value("log_floor", c.log_floor);
}

void to_json(nlohmann::json& j, const SpeakerCNNConfig& c) {
  j = {{"num_stacks", c.num_stacks},   {"channels_per_stack", c.channels_per_stack},
       {"kernel_size", c.kernel_size}, {"pool_every", c.pool_every},
       {"pool_width", c.pool_width},   {"num_speakers", c.num_speakers}};
}

void from_json(const nlohmann::json& j, SpeakerCNNConfig& c) {
  c = SpeakerCNNConfig{};
  c.num_stacks = j.value("num_stacks", c.num_stacks);
  c.channels_per_stack = j.value("channels_per_stack", c.channels_per_stack);
  c.kernel_size = j.value("kernel_size", c.kernel_size);
  c.pool_every = j.value("pool_every", c.pool_every);
  c.pool_width = j.value("pool_width", c.pool_width);
  c.num_speakers = j.value("num_speakers", c.num_speakers);
}

bool operator==(const Checkpoint& a, const Checkpoint& b) {
  return nlohmann::json(a.frontend) == nlohmann::json(b.frontend) && nlohmann::json(a.cnn) == nlohmann::json(b.cnn) &&
         a.params == b.params && a.velocity == b.velocity && a.seed == b.seed &&
         a.config_fingerprint == b.config_fingerprint && a.metadata == b.metadata;
}

// Layout (little-endian host order):
//   "ADVSPKCK" | u32 version | u64 seed | str fingerprint | str header-json
//   | u32 count | count x (str name | u32 rank | rank x u64 dim | f64 data...)
// where str = u64 length + bytes.
namespace {

constexpr char kMagic[8] = {'A', 'D', 'V', 'S', 'P', 'K', 'C', 'K'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("checkpoint: unexpected end of file");
  return v;
}

std::string get_str(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1ULL << 32)) throw Error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw Error("checkpoint: unexpected end of file");
  return s;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_str(os, name);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

std::pair<std::string, Tensor> get_tensor(std::istream& is) {
  std::string name = get_str(is);
  const auto rank = get<std::uint32_t>(is);
  if (rank > 8) throw Error("checkpoint: corrupt tensor rank for " + name);
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>(is);
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!is) throw Error("checkpoint: truncated data for " + name);
  return {std::move(name), std::move(t)};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, Checkpoint::kVersion);
  put<std::uint64_t>(os, ck.seed);
  put_str(os, ck.config_fingerprint);
  const nlohmann::json header = {{"frontend", ck.frontend}, {"model", ck.cnn}, {"metadata", ck.metadata}};
  put_str(os, header.dump());

  const auto names = parameter_names(ck.cnn);
  if (names.size() != ck.params.trainable.size()) throw Error("checkpoint: parameters do not match model config");
  std::vector<std::pair<std::string, const Tensor*>> entries;
  for (std::size_t i = 0; i < names.size(); ++i) entries.emplace_back(names[i], &ck.params.trainable[i]);
  for (std::size_t i = 0; i < ck.params.norm_state.size(); ++i) {
    const std::string p = "stack" + std::to_string(i) + ".bn.";
    entries.emplace_back(p + "running_mean", &ck.params.norm_state[i].running_mean);
    entries.emplace_back(p + "running_var", &ck.params.norm_state[i].running_var);
  }
  for (std::size_t i = 0; i < ck.velocity.size(); ++i) entries.emplace_back("velocity." + names.at(i), &ck.velocity[i]);

  put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) put_tensor(os, name, *t);
  if (!os) throw Error("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path.string());
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + sizeof(magic), kMagic)) throw Error("checkpoint: bad magic in " + path.string());
  const auto version = get<std::uint32_t>(is);
  if (version != Checkpoint::kVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint ck;
  ck.seed = get<std::uint64_t>(is);
  ck.config_fingerprint = get_str(is);
  const auto header = nlohmann::json::parse(get_str(is));
  ck.frontend = header.at("frontend").get<FrontendConfig>();
  ck.cnn = header.at("model").get<SpeakerCNNConfig>();
  ck.metadata = header.at("metadata");

  const auto names = parameter_names(ck.cnn);
  const auto count = get<std::uint32_t>(is);
  const std::size_t stacks = ck.cnn.num_stacks;
  if (count != names.size() + 2 * stacks && count != 2 * names.size() + 2 * stacks) {
    throw Error("checkpoint: tensor count " + std::to_string(count) + " does not match the model config");
  }
  ck.params.norm_state.resize(stacks);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = get_tensor(is);
    if (i < names.size()) {
      if (name != names[i]) throw Error("checkpoint: expected tensor " + names[i] + ", found " + name);
      ck.params.trainable.push_back(std::move(t));
    } else if (i < names.size() + 2 * stacks) {
      auto& st = ck.params.norm_state[(i - names.size()) / 2];
      ((i - names.size()) % 2 == 0 ? st.running_mean : st.running_var) = std::move(t);
    } else {
      ck.velocity.push_back(std::move(t));
    }
  }
  SpeakerModel(ck.frontend, ck.cnn).check_params(ck.params);
  return ck;
}

}  // namespace advspk
