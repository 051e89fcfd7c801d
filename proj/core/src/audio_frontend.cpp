#include "nao/audio_frontend.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <atomic>
#include <filesystem>
#include <functional>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <fftw3.h>

#include "nao/errors.hpp"
#include "nao/le_io.hpp"
#include "nao/seed.hpp"

namespace fs = std::filesystem;

namespace nao {

// ---------------------------------------------------------------------------
// WAV

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace

std::vector<float> load_wav_samples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError(path + ": not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t size = read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size() && std::memcmp(hdr, "data", 4) != 0) throw FormatError(path + ": truncated chunk");
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError(path + ": short fmt chunk");
      const unsigned char* f = bytes.data() + body;
      std::uint16_t format = read_u16(f);
      if (format == 0xFFFE && size >= 40) format = read_u16(f + 24);
      const std::uint16_t channels = read_u16(f + 2);
      const std::uint32_t rate = read_u32(f + 4);
      const std::uint16_t bits = read_u16(f + 14);
      if (format != 1) throw FormatError(path + ": only PCM is supported (format " + std::to_string(format) + ")");
      if (channels != 1) throw FormatError(path + ": expected mono, got " + std::to_string(channels) + " channels");
      if (rate != kSampleRate) throw FormatError(path + ": expected 16000 Hz, got " + std::to_string(rate));
      if (bits != 16) throw FormatError(path + ": expected 16-bit samples, got " + std::to_string(bits));
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (!have_fmt) throw FormatError(path + ": data chunk before fmt chunk");
      const std::size_t avail = std::min<std::size_t>(size, bytes.size() - body);
      std::vector<float> out(avail / 2);
      for (std::size_t i = 0; i < out.size(); ++i) {
        const auto v = static_cast<std::int16_t>(read_u16(bytes.data() + body + 2 * i));
        out[i] = static_cast<float>(v) / 32768.0F;
      }
      return out;
    }
    pos = body + size + (size & 1U);
  }
  throw FormatError(path + ": no data chunk");
}

Utterance load_wav(const std::string& path) {
  Utterance u;
  u.samples = load_wav_samples(path);
  u.samples.resize(kClipSamples, 0.0F);
  return u;
}

void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  le::put<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  le::put<std::uint32_t>(out, 16);
  le::put<std::uint16_t>(out, 1);
  le::put<std::uint16_t>(out, 1);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(sample_rate));
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(sample_rate) * 2);
  le::put<std::uint16_t>(out, 2);
  le::put<std::uint16_t>(out, 16);
  out.write("data", 4);
  le::put<std::uint32_t>(out, data_bytes);
  for (float s : samples) {
    const long q = std::clamp(std::lround(static_cast<double>(s) * 32768.0), -32768L, 32767L);
    const auto v = static_cast<std::int16_t>(q);
    le::put<std::uint16_t>(out, static_cast<std::uint16_t>(v));
  }
  if (!out) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// MFCC

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::array<double, kMelFilters + 2> mel_edges_hz() {
  std::array<double, kMelFilters + 2> edges{};
  const double lo = hz_to_mel(kMelLowHz), hi = hz_to_mel(kMelHighHz);
  for (int i = 0; i < kMelFilters + 2; ++i) edges[static_cast<std::size_t>(i)] = mel_to_hz(lo + (hi - lo) * i / (kMelFilters + 1));
  return edges;
}

const std::vector<double>& mel_filterbank() {
  static const std::vector<double> bank = [] {
    constexpr int bins = kFftSize / 2 + 1;
    std::vector<double> w(static_cast<std::size_t>(kMelFilters) * bins, 0.0);
    const auto e = mel_edges_hz();
    for (int m = 0; m < kMelFilters; ++m) {
      const double l = e[static_cast<std::size_t>(m)], c = e[static_cast<std::size_t>(m) + 1], r = e[static_cast<std::size_t>(m) + 2];
      for (int k = 0; k < bins; ++k) {
        const double f = static_cast<double>(k) * kSampleRate / kFftSize;
        const double v = std::min((f - l) / (c - l), (r - f) / (r - c));
        if (v > 0) w[static_cast<std::size_t>(m) * bins + k] = v;
      }
    }
    return w;
  }();
  return bank;
}

namespace {

class FftPlan {
 public:
  static const FftPlan& get() {
    static const FftPlan plan;
    return plan;
  }
  fftwf_plan plan() const { return plan_; }

 private:
  FftPlan() {
    static std::mutex planner;
    std::lock_guard lock(planner);
    float* in = fftwf_alloc_real(kFftSize);
    fftwf_complex* out = fftwf_alloc_complex(kFftSize / 2 + 1);
    plan_ = fftwf_plan_dft_r2c_1d(kFftSize, in, out, FFTW_ESTIMATE);
    fftwf_free(in);
    fftwf_free(out);
  }
  fftwf_plan plan_;
};

struct FftBuffers {
  float* in = fftwf_alloc_real(kFftSize);
  fftwf_complex* out = fftwf_alloc_complex(kFftSize / 2 + 1);
  ~FftBuffers() {
    fftwf_free(in);
    fftwf_free(out);
  }
};

const std::vector<double>& hann_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kWindowSamples);
    for (int i = 0; i < kWindowSamples; ++i) v[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (kWindowSamples - 1));
    return v;
  }();
  return w;
}

const std::vector<double>& dct_matrix() {
  static const std::vector<double> d = [] {
    std::vector<double> m(static_cast<std::size_t>(kNumCoeffs) * kMelFilters);
    for (int k = 0; k < kNumCoeffs; ++k) {
      const double s = k == 0 ? std::sqrt(1.0 / kMelFilters) : std::sqrt(2.0 / kMelFilters);
      for (int n = 0; n < kMelFilters; ++n) {
        m[static_cast<std::size_t>(k) * kMelFilters + n] = s * std::cos(std::numbers::pi * k * (2 * n + 1) / (2.0 * kMelFilters));
      }
    }
    return m;
  }();
  return d;
}

}  // namespace

std::vector<float> log_mel_spectrogram(const std::vector<float>& samples) {
  if (samples.size() != static_cast<std::size_t>(kClipSamples)) {
    throw ShapeError("MFCC input must hold " + std::to_string(kClipSamples) + " samples, got " + std::to_string(samples.size()));
  }
  const auto& plan = FftPlan::get();
  thread_local FftBuffers buf;
  const auto& window = hann_window();
  const auto& bank = mel_filterbank();
  constexpr int bins = kFftSize / 2 + 1;
  std::vector<float> out(static_cast<std::size_t>(kNumFrames) * kMelFilters);
  std::vector<double> power(bins);
  for (int t = 0; t < kNumFrames; ++t) {
    const int start = t * kHopSamples;
    std::fill(buf.in, buf.in + kFftSize, 0.0F);
    for (int i = 0; i < kWindowSamples; ++i) {
      const int n = start + i;
      const double prev = n > 0 ? samples[static_cast<std::size_t>(n) - 1] : 0.0;
      const double emph = samples[static_cast<std::size_t>(n)] - kPreEmphasis * prev;
      buf.in[i] = static_cast<float>(emph * window[static_cast<std::size_t>(i)]);
    }
    fftwf_execute_dft_r2c(plan.plan(), buf.in, buf.out);
    for (int k = 0; k < bins; ++k) {
      const double re = buf.out[k][0], im = buf.out[k][1];
      power[static_cast<std::size_t>(k)] = re * re + im * im;
    }
    for (int m = 0; m < kMelFilters; ++m) {
      double e = 0;
      const double* w = bank.data() + static_cast<std::size_t>(m) * bins;
      for (int k = 0; k < bins; ++k) e += w[k] * power[static_cast<std::size_t>(k)];
      out[static_cast<std::size_t>(t) * kMelFilters + m] = static_cast<float>(std::log(std::max(e, kLogFloor)));
    }
  }
  return out;
}

FeatureMap compute_mfcc(const std::vector<float>& samples) {
  const std::vector<float> logmel = log_mel_spectrogram(samples);
  const auto& dct = dct_matrix();
  FeatureMap out(static_cast<std::size_t>(kFeatureSize));
  for (int t = 0; t < kNumFrames; ++t) {
    const float* x = logmel.data() + static_cast<std::size_t>(t) * kMelFilters;
    for (int k = 0; k < kNumCoeffs; ++k) {
      double s = 0;
      const double* row = dct.data() + static_cast<std::size_t>(k) * kMelFilters;
      for (int n = 0; n < kMelFilters; ++n) s += row[n] * x[n];
      out[static_cast<std::size_t>(t) * kNumCoeffs + k] = static_cast<float>(s);
    }
  }
  return out;
}

FeatureMap compute_mfcc(const Utterance& utt) { return compute_mfcc(utt.samples); }

// ---------------------------------------------------------------------------
// Datasets

void FeatureSplit::push(const FeatureMap& f, int label) {
  if (f.size() != static_cast<std::size_t>(kFeatureSize)) throw ShapeError("feature map has wrong size");
  if (label < 0 || label > 255) throw std::invalid_argument("label id out of range");
  features.insert(features.end(), f.begin(), f.end());
  labels.push_back(static_cast<std::uint8_t>(label));
}

const std::vector<std::string>& speech_keywords() {
  static const std::vector<std::string> words = {"yes", "no", "up", "down", "left", "right", "on", "off", "go", "stop"};
  return words;
}

namespace {

/// Computes features for jobs in parallel and returns them in job order.
template <class Job>
std::vector<FeatureMap> parallel_features(const std::vector<Job>& jobs) {
  std::vector<FeatureMap> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  const std::size_t workers = std::max(1U, std::min<unsigned>(std::thread::hardware_concurrency(), 16U));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        out[i] = compute_mfcc(jobs[i]());
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1 || jobs.size() < 2) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::unordered_set<std::string> read_list(const fs::path& p) {
  std::unordered_set<std::string> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.insert(line);
  }
  return out;
}

std::vector<std::string> sorted_wavs(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") out.push_back(e.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string speaker_of(const std::string& filename) {
  const auto p = filename.find("_nohash_");
  return p == std::string::npos ? filename.substr(0, filename.rfind('.')) : filename.substr(0, p);
}

}  // namespace

FeatureDataset assemble_speech_dataset(const std::string& root, SpeechVersion version, std::uint64_t seed) {
  (void)version;
  const fs::path base(root);
  std::vector<std::string> missing;
  if (!fs::is_directory(base)) missing.push_back(root);
  for (const auto& w : speech_keywords())
    if (!fs::is_directory(base / w)) missing.push_back((base / w).string());
  if (!fs::is_directory(base / "_background_noise_")) missing.push_back((base / "_background_noise_").string());
  if (!missing.empty()) {
    std::string msg = "missing Speech Commands folders:";
    for (const auto& m : missing) msg += " " + m;
    throw MissingDataError(msg);
  }

  const bool lists = fs::exists(base / "validation_list.txt") || fs::exists(base / "testing_list.txt");
  const auto val_list = read_list(base / "validation_list.txt");
  const auto test_list = read_list(base / "testing_list.txt");
  auto split_of = [&](const std::string& rel, const std::string& file) {
    if (lists) return test_list.count(rel) ? 2 : val_list.count(rel) ? 1 : 0;
    const std::string spk = speaker_of(file);
    const auto bucket = fnv1a(spk.data(), spk.size()) % 100;
    return bucket < 80 ? 0 : bucket < 90 ? 1 : 2;
  };

  const int unknown_label = 10, silence_label = 11;
  std::array<std::vector<std::pair<std::string, int>>, 3> items;  // (path, label) per split
  std::array<std::vector<std::string>, 3> unknown;
  std::vector<std::string> folders;
  for (const auto& e : fs::directory_iterator(base)) {
    if (e.is_directory() && e.path().filename().string().front() != '_') folders.push_back(e.path().filename().string());
  }
  std::sort(folders.begin(), folders.end());
  const auto& kw = speech_keywords();
  for (const auto& word : folders) {
    const auto it = std::find(kw.begin(), kw.end(), word);
    for (const auto& file : sorted_wavs(base / word)) {
      const std::string rel = word + "/" + file;
      const int s = split_of(rel, file);
      const std::string full = (base / word / file).string();
      if (it != kw.end()) {
        items[static_cast<std::size_t>(s)].push_back({full, static_cast<int>(it - kw.begin())});
      } else {
        unknown[static_cast<std::size_t>(s)].push_back(full);
      }
    }
  }

  std::vector<std::vector<float>> noise;
  for (const auto& file : sorted_wavs(base / "_background_noise_")) {
    auto samples = load_wav_samples((base / "_background_noise_" / file).string());
    if (samples.size() >= static_cast<std::size_t>(kClipSamples)) noise.push_back(std::move(samples));
  }

  FeatureDataset ds;
  ds.label_names = kw;
  ds.label_names.push_back("unknown");
  ds.label_names.push_back("silence");
  std::array<FeatureSplit*, 3> splits{&ds.train, &ds.validation, &ds.test};
  for (std::size_t s = 0; s < 3; ++s) {
    std::mt19937_64 rng(derive_seed(seed, 10 + s));
    const auto keyword_count = static_cast<double>(items[s].size());
    const auto target = static_cast<std::size_t>(std::llround(keyword_count / static_cast<double>(kw.size())));
    auto& unk = unknown[s];
    std::shuffle(unk.begin(), unk.end(), rng);
    if (unk.size() > target) unk.resize(target);
    std::sort(unk.begin(), unk.end());

    using Job = std::function<std::vector<float>()>;
    std::vector<Job> jobs;
    std::vector<int> labels;
    for (const auto& [path, label] : items[s]) {
      jobs.push_back([path] { return load_wav(path).samples; });
      labels.push_back(label);
    }
    for (const auto& path : unk) {
      jobs.push_back([path] { return load_wav(path).samples; });
      labels.push_back(unknown_label);
    }
    if (!noise.empty()) {
      for (std::size_t i = 0; i < target; ++i) {
        const std::size_t which = std::uniform_int_distribution<std::size_t>(0, noise.size() - 1)(rng);
        const auto& clip = noise[which];
        const std::size_t off = std::uniform_int_distribution<std::size_t>(0, clip.size() - kClipSamples)(rng);
        jobs.push_back([&clip, off] {
          return std::vector<float>(clip.begin() + static_cast<std::ptrdiff_t>(off),
                                    clip.begin() + static_cast<std::ptrdiff_t>(off + kClipSamples));
        });
        labels.push_back(silence_label);
      }
    }
    const auto feats = parallel_features(jobs);
    for (std::size_t i = 0; i < feats.size(); ++i) splits[s]->push(feats[i], labels[i]);
  }
  return ds;
}

FeatureDataset synthetic_two_tone_dataset(int n_per_class, std::uint64_t seed) {
  if (n_per_class < 10) throw std::invalid_argument("synthetic_two_tone_dataset: need at least 10 items per class");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.3, 0.8);
  std::uniform_real_distribution<double> start_s(0.0, 0.3);
  std::uniform_real_distribution<double> len_s(0.5, 0.7);
  std::normal_distribution<double> noise(0.0, 0.01);
  const std::array<double, 2> freqs{600.0, 2400.0};

  std::array<std::vector<std::vector<float>>, 2> clips;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      const double ph = phase(rng), a = amp(rng);
      const int begin = static_cast<int>(start_s(rng) * kSampleRate);
      const int end = std::min(kClipSamples, begin + static_cast<int>(len_s(rng) * kSampleRate));
      std::vector<float> x(kClipSamples);
      for (int n = 0; n < kClipSamples; ++n) {
        double v = noise(rng);
        if (n >= begin && n < end) v += a * std::sin(2.0 * std::numbers::pi * freqs[static_cast<std::size_t>(c)] * n / kSampleRate + ph);
        x[static_cast<std::size_t>(n)] = static_cast<float>(v);
      }
      clips[static_cast<std::size_t>(c)].push_back(std::move(x));
    }
  }
  const int n_train = n_per_class * 8 / 10;
  const int n_val = n_per_class / 10;
  FeatureDataset ds;
  ds.label_names = {"tone_600", "tone_2400"};
  using Job = std::function<std::vector<float>()>;
  std::vector<Job> jobs;
  std::vector<std::pair<int, int>> where;  // (split, label)
  for (int i = 0; i < n_per_class; ++i) {
    const int split = i < n_train ? 0 : i < n_train + n_val ? 1 : 2;
    for (int c = 0; c < 2; ++c) {
      const auto* clip = &clips[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)];
      jobs.push_back([clip] { return *clip; });
      where.push_back({split, c});
    }
  }
  const auto feats = parallel_features(jobs);
  std::array<FeatureSplit*, 3> splits{&ds.train, &ds.validation, &ds.test};
  for (std::size_t i = 0; i < feats.size(); ++i) splits[static_cast<std::size_t>(where[i].first)]->push(feats[i], where[i].second);
  return ds;
}

// ---------------------------------------------------------------------------
// Cache

namespace {
constexpr char kCacheMagic[8] = {'M', 'F', 'C', 'C', '0', '0', '0', '1'};
}

void write_feature_split(const std::string& path, const std::vector<std::string>& label_names, const FeatureSplit& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature cache " + path);
  std::string table;
  for (std::size_t i = 0; i < label_names.size(); ++i) table += (i ? "\n" : "") + label_names[i];
  out.write(kCacheMagic, sizeof kCacheMagic);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(split.size()));
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(table.size()));
  out.write(table.data(), static_cast<std::streamsize>(table.size()));
  for (std::size_t i = 0; i < split.size(); ++i) {
    le::put<std::uint8_t>(out, split.labels[i]);
    le::put_floats(out, std::span<const float>(split.item(i), kFeatureSize));
  }
  if (!out) throw IoError("write failed for " + path);
}

FeatureSplit read_feature_split(const std::string& path, std::vector<std::string>* label_names) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature cache " + path);
  char magic[8] = {};
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCacheMagic, sizeof magic) != 0) throw FormatError(path + ": not an MFCC0001 feature cache");
  const auto count = le::get<std::uint32_t>(in, path);
  const auto table_len = le::get<std::uint32_t>(in, path);
  std::string table(table_len, '\0');
  in.read(table.data(), table_len);
  if (!in) throw FormatError(path + ": truncated file");
  std::vector<std::string> names;
  if (!table.empty()) {
    std::stringstream ss(table);
    std::string name;
    while (std::getline(ss, name, '\n')) names.push_back(name);
  }
  FeatureSplit split;
  split.labels.resize(count);
  split.features.resize(static_cast<std::size_t>(count) * kFeatureSize);
  for (std::uint32_t i = 0; i < count; ++i) {
    split.labels[i] = le::get<std::uint8_t>(in, path);
    if (split.labels[i] >= names.size()) throw FormatError(path + ": label id outside the label table");
    le::get_floats(in, std::span<float>(split.features.data() + static_cast<std::size_t>(i) * kFeatureSize, kFeatureSize), path);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes");
  if (label_names) *label_names = std::move(names);
  return split;
}

std::array<std::string, 3> cache_split_paths(const std::string& path) {
  std::string stem = path;
  if (stem.size() > 4 && stem.compare(stem.size() - 4, 4, ".bin") == 0) stem.resize(stem.size() - 4);
  return {stem + ".train.bin", stem + ".validation.bin", stem + ".test.bin"};
}

void cache_features(const FeatureDataset& dataset, const std::string& path) {
  const auto paths = cache_split_paths(path);
  write_feature_split(paths[0], dataset.label_names, dataset.train);
  write_feature_split(paths[1], dataset.label_names, dataset.validation);
  write_feature_split(paths[2], dataset.label_names, dataset.test);
}

FeatureDataset load_cache(const std::string& path) {
  const auto paths = cache_split_paths(path);
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw IoError("feature cache file not found: " + p);
  }
  FeatureDataset ds;
  std::vector<std::string> names_val, names_test;
  ds.train = read_feature_split(paths[0], &ds.label_names);
  ds.validation = read_feature_split(paths[1], &names_val);
  ds.test = read_feature_split(paths[2], &names_test);
  if (names_val != ds.label_names || names_test != ds.label_names) {
    throw FormatError(path + ": splits disagree on the label table");
  }
  return ds;
}

}  // namespace nao
