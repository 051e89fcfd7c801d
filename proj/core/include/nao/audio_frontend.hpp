#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace nao {

inline constexpr int kSampleRate = 16000;
inline constexpr int kClipSamples = 16000;
inline constexpr int kWindowSamples = 480;  // 30 ms
inline constexpr int kHopSamples = 160;     // 10 ms
inline constexpr int kFftSize = 512;
inline constexpr int kMelFilters = 40;
inline constexpr int kNumFrames = 1 + (kClipSamples - kWindowSamples) / kHopSamples;  // 98
inline constexpr int kNumCoeffs = 40;
inline constexpr int kFeatureSize = kNumFrames * kNumCoeffs;
inline constexpr double kPreEmphasis = 0.97;
inline constexpr double kMelLowHz = 20.0;
inline constexpr double kMelHighHz = 7600.0;
inline constexpr double kLogFloor = 1e-10;

struct Utterance {
  std::vector<float> samples;  // exactly kClipSamples after load_wav
  int label = -1;
};

/// Reads a 16 kHz mono 16-bit PCM RIFF/WAVE file and pads or truncates it to
/// one second. Throws FormatError or IoError.
Utterance load_wav(const std::string& path);
/// Same decoding without the length normalization.
std::vector<float> load_wav_samples(const std::string& path);
/// 16-bit PCM mono writer (values clipped to [-1, 1]).
void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate = kSampleRate);

/// [kNumFrames x kNumCoeffs] row-major.
using FeatureMap = std::vector<float>;

/// Hz <-> mel (2595 log10(1 + f / 700)).
double hz_to_mel(double hz);
double mel_to_hz(double mel);
/// Filter m spans edges[m]..edges[m + 2] Hz with its peak at edges[m + 1].
std::array<double, kMelFilters + 2> mel_edges_hz();
/// [kMelFilters x (kFftSize / 2 + 1)] triangular weights.
const std::vector<double>& mel_filterbank();

/// Log-mel energies per frame, [kNumFrames x kMelFilters]. Exposed for tests.
std::vector<float> log_mel_spectrogram(const std::vector<float>& samples);
/// Pre-emphasis, Hann window, 512-point power spectrum, 40 mel filters, log,
/// orthonormal DCT-II. Input must hold kClipSamples samples.
FeatureMap compute_mfcc(const Utterance& utt);
FeatureMap compute_mfcc(const std::vector<float>& samples);

struct FeatureSplit {
  std::vector<float> features;  // size() * kFeatureSize
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  const float* item(std::size_t i) const { return features.data() + i * kFeatureSize; }
  void push(const FeatureMap& f, int label);
};

struct FeatureDataset {
  std::vector<std::string> label_names;
  FeatureSplit train;
  FeatureSplit validation;
  FeatureSplit test;

  int num_classes() const noexcept { return static_cast<int>(label_names.size()); }
};

/// The ten target keywords in label order; "unknown" and "silence" follow.
const std::vector<std::string>& speech_keywords();

enum class SpeechVersion { V1, V2 };

/// Builds the 12-class task from a Speech Commands directory. Throws
/// MissingDataError naming absent keyword or noise folders.
FeatureDataset assemble_speech_dataset(const std::string& root, SpeechVersion version, std::uint64_t seed);

/// 600 Hz vs 2.4 kHz tone bursts with random phase, amplitude in [0.3, 0.8]
/// and Gaussian noise (sigma 0.01); stratified 80/10/10 split.
FeatureDataset synthetic_two_tone_dataset(int n_per_class, std::uint64_t seed);

/// One split per file: "MFCC0001", u32 count, u32 label-table bytes, the
/// '\n'-joined label names, then per item a u8 label and kFeatureSize f32.
void write_feature_split(const std::string& path, const std::vector<std::string>& label_names,
                         const FeatureSplit& split);
FeatureSplit read_feature_split(const std::string& path, std::vector<std::string>* label_names = nullptr);

/// "<stem>.train.bin", "<stem>.validation.bin", "<stem>.test.bin" where stem
/// is `path` without a trailing ".bin".
std::array<std::string, 3> cache_split_paths(const std::string& path);
void cache_features(const FeatureDataset& dataset, const std::string& path);
/// Throws FormatError on bad magic, truncation or inconsistent label tables.
FeatureDataset load_cache(const std::string& path);

}  // namespace nao
