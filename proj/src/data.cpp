#include "advspk/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>

#include "advspk/util.hpp"

namespace advspk {

namespace fs = std::filesystem;

const char* split_name(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "test") return Split::kTest;
  throw Error("unknown split '" + name + "'");
}

namespace {

std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
std::uint16_t le16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | p[1] << 8); }

void put32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
void put16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

WavData read_wav(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("wav: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw Error("wav: " + path.string() + " is not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  WavData out;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = le32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw Error("wav: truncated chunk in " + path.string());
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw Error("wav: short fmt chunk in " + path.string());
      const std::uint16_t format = le16(bytes.data() + body);
      const std::uint16_t channels = le16(bytes.data() + body + 2);
      const std::uint32_t rate = le32(bytes.data() + body + 4);
      const std::uint16_t bits = le16(bytes.data() + body + 14);
      if (format != 1 || bits != 16) throw Error("wav: " + path.string() + " is not 16-bit PCM");
      if (channels != 1) throw Error("wav: " + path.string() + " is not mono");
      out.sample_rate = rate;
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) throw Error("wav: data chunk before fmt chunk in " + path.string());
      out.samples.resize(size / 2);
      for (std::size_t i = 0; i < out.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(le16(bytes.data() + body + 2 * i));
        out.samples[i] = static_cast<double>(v) / 32768.0;
      }
      return out;
    }
    pos = body + size + (size & 1U);
  }
  throw Error("wav: no data chunk in " + path.string());
}

void write_wav(const fs::path& path, std::span<const double> samples, double sample_rate) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("wav: cannot open " + path.string() + " for writing");
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  const auto rate = static_cast<std::uint32_t>(std::lround(sample_rate));
  os.write("RIFF", 4);
  put32(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  put32(os, 16);
  put16(os, 1);
  put16(os, 1);
  put32(os, rate);
  put32(os, rate * 2);
  put16(os, 2);
  put16(os, 16);
  os.write("data", 4);
  put32(os, data_bytes);
  for (double s : samples) {
    const long q = std::lround(std::clamp(s, -1.0, 1.0) * 32768.0);
    put16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L))));
  }
  if (!os) throw Error("wav: write failed for " + path.string());
}

std::size_t test_count(std::size_t utterances) { return std::max<std::size_t>(1, utterances / 10); }

namespace {

// Mark test utterances for one speaker; `ids` must be sorted.
std::vector<Split> assign_splits(const std::vector<std::string>& ids, const std::string& speaker, std::uint64_t seed) {
  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::uint64_t spk = std::stoull(fingerprint_hex(speaker), nullptr, 16);
  std::mt19937_64 rng(derive_seed(seed, {spk}));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Split> splits(ids.size(), Split::kTrain);
  for (std::size_t k = 0; k < test_count(ids.size()); ++k) splits[order[k]] = Split::kTest;
  return splits;
}

std::string manifest_digest(const CorpusManifest& m) {
  nlohmann::json j = m;
  j.erase("fingerprint");
  j.erase("root");
  return fingerprint_hex(j.dump());
}

}  // namespace

void to_json(nlohmann::json& j, const CorpusManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"path", e.path}, {"speaker", e.speaker_id}, {"split", split_name(e.split)},
                       {"duration", e.duration}});
  }
  nlohmann::json rejects = nlohmann::json::array();
  for (const auto& [p, why] : m.rejects) rejects.push_back({{"path", p}, {"reason", why}});
  j = {{"root", m.root.string()}, {"sample_rate", m.sample_rate},   {"num_speakers", m.num_speakers},
       {"entries", entries},      {"rejects", rejects},            {"fingerprint", m.fingerprint}};
}

CorpusManifest manifest_from_json(const nlohmann::json& j) {
  CorpusManifest m;
  m.root = j.at("root").get<std::string>();
  m.sample_rate = j.at("sample_rate").get<double>();
  m.num_speakers = j.at("num_speakers").get<std::size_t>();
  for (const auto& e : j.at("entries")) {
    m.entries.push_back({e.at("path").get<std::string>(), e.at("speaker").get<std::string>(),
                         parse_split(e.at("split").get<std::string>()), e.at("duration").get<double>()});
  }
  for (const auto& r : j.at("rejects")) m.rejects.emplace_back(r.at("path"), r.at("reason"));
  m.fingerprint = j.at("fingerprint").get<std::string>();
  if (manifest_digest(m) != m.fingerprint) throw Error("manifest: fingerprint does not match its contents");
  return m;
}

CorpusManifest ingest(const fs::path& root, const IngestConfig& config) {
  if (!fs::is_directory(root)) throw Error("ingest: " + root.string() + " is not a directory");
  CorpusManifest m;
  m.root = root;
  m.sample_rate = config.sample_rate;

  std::vector<fs::path> speaker_dirs;
  for (const auto& d : fs::directory_iterator(root)) {
    if (d.is_directory()) speaker_dirs.push_back(d.path());
  }
  std::sort(speaker_dirs.begin(), speaker_dirs.end());

  for (const auto& dir : speaker_dirs) {
    const std::string speaker = dir.filename().string();
    std::vector<fs::path> files;
    for (const auto& f : fs::recursive_directory_iterator(dir)) {
      if (f.is_regular_file() && f.path().extension() == ".wav") files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());

    std::vector<std::string> ok;
    std::vector<double> durations;
    for (const auto& f : files) {
      const std::string rel = fs::relative(f, root).generic_string();
      try {
        const WavData w = read_wav(f);
        if (w.sample_rate != config.sample_rate) {
          m.rejects.emplace_back(rel, "sample rate " + std::to_string(static_cast<long>(w.sample_rate)));
          continue;
        }
        if (w.samples.empty()) {
          m.rejects.emplace_back(rel, "empty");
          continue;
        }
        ok.push_back(rel);
        durations.push_back(static_cast<double>(w.samples.size()) / w.sample_rate);
      } catch (const Error& e) {
        m.rejects.emplace_back(rel, e.what());
      }
    }
    if (ok.empty() && files.empty()) continue;
    if (ok.size() < 2) {
      throw Error("ingest: speaker " + speaker + " has " + std::to_string(ok.size()) +
                  " readable utterances; at least 2 are required");
    }
    const auto splits = assign_splits(ok, speaker, config.split_seed);
    for (std::size_t i = 0; i < ok.size(); ++i) m.entries.push_back({ok[i], speaker, splits[i], durations[i]});
    ++m.num_speakers;
  }
  if (m.num_speakers < 2) throw Error("ingest: need at least 2 speakers under " + root.string());
  m.fingerprint = manifest_digest(m);
  return m;
}

int Corpus::label(const std::string& speaker_id) const {
  const auto it = std::lower_bound(speakers.begin(), speakers.end(), speaker_id);
  if (it == speakers.end() || *it != speaker_id) throw Error("unknown speaker '" + speaker_id + "'");
  return static_cast<int>(it - speakers.begin());
}

std::vector<std::size_t> Corpus::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    if (utterances[i].split == split) out.push_back(i);
  }
  return out;
}

Corpus load_corpus(const CorpusManifest& manifest) {
  Corpus c;
  c.sample_rate = manifest.sample_rate;
  c.fingerprint = manifest.fingerprint;
  for (const auto& e : manifest.entries) {
    WavData w = read_wav(manifest.root / e.path);
    c.utterances.push_back({e.path, e.speaker_id, e.split, std::move(w.samples)});
    c.speakers.push_back(e.speaker_id);
  }
  std::sort(c.speakers.begin(), c.speakers.end());
  c.speakers.erase(std::unique(c.speakers.begin(), c.speakers.end()), c.speakers.end());
  return c;
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"num_speakers", c.num_speakers}, {"utterances_per_speaker", c.utterances_per_speaker},
       {"duration", c.duration},         {"sample_rate", c.sample_rate},
       {"seed", c.seed},                 {"noise_snr_db", c.noise_snr_db},
       {"rms", c.rms},                   {"f0_min", c.f0_min},
       {"f0_max", c.f0_max}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  c = SynthConfig{};
  c.num_speakers = j.value("num_speakers", c.num_speakers);
  c.utterances_per_speaker = j.value("utterances_per_speaker", c.utterances_per_speaker);
  c.duration = j.value("duration", c.duration);
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.seed = j.value("seed", c.seed);
  c.noise_snr_db = j.value("noise_snr_db", c.noise_snr_db);
  c.rms = j.value("rms", c.rms);
  c.f0_min = j.value("f0_min", c.f0_min);
  c.f0_max = j.value("f0_max", c.f0_max);
}

Corpus synth_corpus(const SynthConfig& config) {
  if (config.num_speakers < 2) throw Error("synth_corpus: num_speakers must be at least 2");
  if (config.utterances_per_speaker < 2) throw Error("synth_corpus: utterances_per_speaker must be at least 2");
  const auto length = static_cast<std::size_t>(std::lround(config.duration * config.sample_rate));
  if (length == 0) throw Error("synth_corpus: duration too short");
  constexpr std::size_t kHarmonics = 5;

  Corpus c;
  c.sample_rate = config.sample_rate;
  c.fingerprint = fingerprint_hex("synthetic:" + nlohmann::json(config).dump());

  std::mt19937_64 profile_rng(derive_seed(config.seed, {0}));
  std::uniform_real_distribution<double> f0_dist(config.f0_min, config.f0_max);
  std::uniform_real_distribution<double> amp_dist(0.2, 1.0);
  std::uniform_real_distribution<double> tilt_dist(0.0, 1.2);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);

  for (std::size_t s = 0; s < config.num_speakers; ++s) {
    char name[16];
    std::snprintf(name, sizeof(name), "spk%03zu", s);
    c.speakers.emplace_back(name);

    const double f0 = f0_dist(profile_rng);
    const double tilt = tilt_dist(profile_rng);
    std::array<double, kHarmonics> amp{};
    amp[0] = 1.0;
    for (std::size_t h = 1; h < kHarmonics; ++h) amp[h] = amp_dist(profile_rng);
    double power = 0.0;
    for (std::size_t h = 0; h < kHarmonics; ++h) {
      amp[h] *= std::pow(static_cast<double>(h + 1), -tilt);
      power += 0.5 * amp[h] * amp[h];
    }
    const double noise_sd = std::sqrt(power / std::pow(10.0, config.noise_snr_db / 10.0));

    std::vector<std::string> ids;
    for (std::size_t u = 0; u < config.utterances_per_speaker; ++u) {
      char id[32];
      std::snprintf(id, sizeof(id), "%s/utt%03zu", name, u);
      ids.emplace_back(id);
    }
    const auto splits = assign_splits(ids, name, config.seed);

    for (std::size_t u = 0; u < config.utterances_per_speaker; ++u) {
      std::mt19937_64 rng(derive_seed(config.seed, {1, s, u}));
      std::normal_distribution<double> noise(0.0, noise_sd);
      std::array<double, kHarmonics> phase{};
      for (double& p : phase) p = phase_dist(rng);
      std::vector<double> x(length);
      double energy = 0.0;
      for (std::size_t t = 0; t < length; ++t) {
        const double time = static_cast<double>(t) / config.sample_rate;
        double v = noise(rng);
        for (std::size_t h = 0; h < kHarmonics; ++h) {
          v += amp[h] * std::sin(2.0 * std::numbers::pi * static_cast<double>(h + 1) * f0 * time + phase[h]);
        }
        x[t] = v;
        energy += v * v;
      }
      const double gain = config.rms / std::sqrt(energy / static_cast<double>(length));
      for (double& v : x) v = std::clamp(std::nearbyint(v * gain * 32768.0), -32768.0, 32767.0) / 32768.0;
      c.utterances.push_back({ids[u], name, splits[u], std::move(x)});
    }
  }
  return c;
}

std::vector<Batch> batch_iter(const Corpus& corpus, Split split, std::size_t batch_size, std::size_t segment_length,
                              std::uint64_t seed, std::size_t epoch, CropMode mode) {
  if (batch_size == 0) throw Error("batch_iter: batch_size must be positive");
  if (segment_length == 0) throw Error("batch_iter: segment_length must be positive");
  std::vector<std::size_t> order = corpus.indices(split);
  std::mt19937_64 rng(derive_seed(seed, {epoch}));
  if (mode == CropMode::kRandom) std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    Batch b;
    b.waveforms = Tensor({n, segment_length}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const Utterance& u = corpus.utterances[order[start + i]];
      const std::size_t len = u.samples.size();
      std::size_t offset = 0;
      if (len > segment_length) {
        const std::size_t slack = len - segment_length;
        if (mode == CropMode::kRandom) {
          offset = std::uniform_int_distribution<std::size_t>(0, slack)(rng);
        } else {
          offset = slack / 2;
        }
      }
      const std::size_t take = std::min(segment_length, len);
      std::copy_n(u.samples.begin() + static_cast<std::ptrdiff_t>(offset), take, b.waveforms.data() + i * segment_length);
      b.labels.push_back(corpus.label(u.speaker_id));
      b.utterances.push_back(order[start + i]);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace advspk
