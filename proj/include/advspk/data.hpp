#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advspk/tensor.hpp"

namespace advspk {

enum class Split { kTrain, kTest };

const char* split_name(Split split);
Split parse_split(const std::string& name);

struct WavData {
  double sample_rate = 0.0;
  std::vector<double> samples;  // in [-1, 1)
};

/// RIFF/WAVE, PCM 16-bit, mono only.
WavData read_wav(const std::filesystem::path& path);
/// Samples are clipped to [-1, 1] and written as PCM 16-bit mono.
void write_wav(const std::filesystem::path& path, std::span<const double> samples, double sample_rate);

/// Held-out utterances per speaker: floor(count / 10), at least one.
std::size_t test_count(std::size_t utterances);

struct ManifestEntry {
  std::string path;  // relative to the corpus root
  std::string speaker_id;
  Split split = Split::kTrain;
  double duration = 0.0;  // seconds
};

struct CorpusManifest {
  std::filesystem::path root;
  double sample_rate = 16000.0;
  std::vector<ManifestEntry> entries;
  std::vector<std::pair<std::string, std::string>> rejects;  // (path, reason)
  std::size_t num_speakers = 0;
  std::string fingerprint;
};

void to_json(nlohmann::json& j, const CorpusManifest& m);
CorpusManifest manifest_from_json(const nlohmann::json& j);

struct IngestConfig {
  double sample_rate = 16000.0;
  std::uint64_t split_seed = 0;
};

/// Scan root/<speaker>/**.wav into a deterministic per-speaker split.
/// Unreadable files are rejected, not fatal; a speaker with fewer than two
/// readable utterances is fatal.
CorpusManifest ingest(const std::filesystem::path& root, const IngestConfig& config);

struct Utterance {
  std::string id;
  std::string speaker_id;
  Split split = Split::kTrain;
  std::vector<double> samples;
};

/// Audio held in memory with speakers mapped to dense labels (sorted ids).
struct Corpus {
  double sample_rate = 16000.0;
  std::vector<std::string> speakers;
  std::vector<Utterance> utterances;
  std::string fingerprint;

  int label(const std::string& speaker_id) const;
  std::vector<std::size_t> indices(Split split) const;
};

Corpus load_corpus(const CorpusManifest& manifest);

struct SynthConfig {
  std::size_t num_speakers = 10;
  std::size_t utterances_per_speaker = 40;
  double duration = 0.3;  // seconds
  double sample_rate = 16000.0;
  std::uint64_t seed = 0;
  double noise_snr_db = 20.0;
  double rms = 0.05;
  double f0_min = 100.0;
  double f0_max = 300.0;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// Each speaker is a fixed harmonic profile (fundamental, four harmonic
/// amplitudes, spectral tilt); each utterance draws fresh phases and white
/// noise, is scaled to a fixed RMS and rounded to 16-bit resolution.
Corpus synth_corpus(const SynthConfig& config);

enum class CropMode { kRandom, kCenter };

struct Batch {
  Tensor waveforms;  // [n, segment]
  std::vector<int> labels;
  std::vector<std::size_t> utterances;  // indices into Corpus::utterances
};

/// Random mode shuffles per (seed, epoch) and takes one random crop per
/// utterance; center mode keeps corpus order and takes the center crop.
/// Utterances shorter than the segment are zero-padded at the end.
std::vector<Batch> batch_iter(const Corpus& corpus, Split split, std::size_t batch_size, std::size_t segment_length,
                              std::uint64_t seed, std::size_t epoch, CropMode mode);

}  // namespace advspk
