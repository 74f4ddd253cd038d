#pragma once

// Synthetic multi-subject, multi-session EMG corpus.
//
// Signal model per sample and channel, before clipping to [0, 1000]:
//   base   = mean_activation[intent(t - latency)] + tonic (+ burst)
//   signal = gain .* rotate(base, angle) + tone_drift + N(0, noise_std)
// where rotate() mixes adjacent electrodes of the circular armband.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaemg/dataio.hpp"
#include "metaemg/error.hpp"
#include "metaemg/rng.hpp"

namespace metaemg {

using ChannelArray = std::array<double, kChannels>;

struct SubjectProfile {
  std::string subject_id;
  /// Rows indexed by Intent, raw counts.
  Eigen::Matrix<double, 3, static_cast<int>(kChannels)> mean_activation =
      Eigen::Matrix<double, 3, static_cast<int>(kChannels)>::Zero();
  ChannelArray tonic_level{};
  ChannelArray noise_std{};
  double spasticity_burst_rate = 0.0;
  /// Per-channel amplitude of an involuntary burst.
  ChannelArray burst_profile{};
};

struct SessionShift {
  /// Electrode migration in channel units; fractional values blend neighbours.
  double channel_permutation_angle = 0.0;
  ChannelArray gain_drift{1, 1, 1, 1, 1, 1, 1, 1};
  ChannelArray tone_drift{};

  static SessionShift identity() { return {}; }
};

struct SynthConfig {
  int sample_rate_hz = 100;
  double cue_seconds = 5.0;
  double latency_ms = 300.0;

  // Subject priors, raw counts.
  double relax_level_min = 30.0;
  double relax_level_max = 90.0;
  double close_gain_min = 120.0;
  double close_gain_max = 260.0;
  /// Open activation relative to close; weak finger extension after stroke.
  double open_ratio_min = 0.45;
  double open_ratio_max = 0.9;
  /// Fraction of the close pattern recruited during open (co-contraction).
  double cocontraction_max = 0.35;
  /// Spread of the activation bump around its centre electrode, in channels.
  double pattern_width = 1.2;
  double tonic_min = 20.0;
  double tonic_max = 140.0;
  double noise_std_min = 60.0;
  double noise_std_max = 110.0;
  double burst_rate_min = 0.05;
  double burst_rate_max = 0.3;
  double burst_duration_ms = 400.0;
  double burst_amplitude = 200.0;

  // Condition modulation.
  /// Motor-on: flexor activation during Open is scaled by this factor.
  double motor_on_open_flexor_scale = 0.6;
  /// Arm off the table: added to every channel's tonic level.
  double arm_off_tonic_boost = 50.0;

  // Day-2 drift.
  double rotation_std = 0.8;
  double gain_drift_std = 0.15;
  double tone_drift_std = 30.0;

  std::size_t cue_samples() const {
    const double n = cue_seconds * sample_rate_hz;
    if (!(n >= 1.0) || std::abs(n - std::round(n)) > 1e-9) throw ConfigError("cue length must be whole samples");
    return static_cast<std::size_t>(std::llround(n));
  }
  std::size_t latency_samples() const { return static_cast<std::size_t>(std::llround(latency_ms * sample_rate_hz / 1000.0)); }
};

/// Electrode channels treated as finger flexors for condition modulation and
/// spasticity; the opposite half of the armband is extensor-dominant.
inline bool is_flexor_channel(const SubjectProfile& p, std::size_t c) {
  return p.mean_activation(static_cast<int>(Intent::Close), static_cast<Eigen::Index>(c)) >=
         p.mean_activation(static_cast<int>(Intent::Open), static_cast<Eigen::Index>(c));
}

/// relax, open, relax, close repeated three times, then a final relax: 13
/// cues. The first motion ends with the relax that precedes the second open.
inline std::vector<Intent> cue_script() {
  std::vector<Intent> script;
  for (int motion = 0; motion < 3; ++motion)
    script.insert(script.end(), {Intent::Relax, Intent::Open, Intent::Relax, Intent::Close});
  script.push_back(Intent::Relax);
  return script;
}

/// Per-sample cue labels for the scripted protocol.
inline std::vector<Intent> cue_track(const SynthConfig& cfg) {
  const std::size_t per_cue = cfg.cue_samples();
  std::vector<Intent> cues;
  for (Intent i : cue_script()) cues.insert(cues.end(), per_cue, i);
  return cues;
}

/// rotate(v, a)[c] = (1 - f) v[c - k] + f v[c - k - 1] with k = floor(a), f = a - k
/// (indices mod 8).
inline ChannelArray rotate_channels(const ChannelArray& v, double angle) {
  const double k = std::floor(angle);
  const double f = angle - k;
  const auto n = static_cast<long>(kChannels);
  const long shift = static_cast<long>(k);
  ChannelArray out{};
  for (long c = 0; c < n; ++c) {
    const auto a = static_cast<std::size_t>(((c - shift) % n + n) % n);
    const auto b = static_cast<std::size_t>(((c - shift - 1) % n + n) % n);
    out[static_cast<std::size_t>(c)] = f == 0.0 ? v[a] : (1.0 - f) * v[a] + f * v[b];
  }
  return out;
}

inline void validate(const SubjectProfile& p) {
  for (Eigen::Index i = 0; i < p.mean_activation.size(); ++i) {
    const double m = p.mean_activation.data()[i];
    if (m < kClipLow || m > kClipHigh) throw PreconditionError(p.subject_id + ": mean activation outside [0, 1000]");
  }
  bool separable = false;
  for (std::size_t c = 0; c < kChannels; ++c) {
    const auto col = static_cast<Eigen::Index>(c);
    if (p.noise_std[c] < 0.0) throw PreconditionError(p.subject_id + ": negative noise_std");
    separable |= std::abs(p.mean_activation(1, col) - p.mean_activation(2, col)) >= p.noise_std[c];
  }
  if (!separable) throw PreconditionError(p.subject_id + ": open and close activations are not separable");
  if (p.spasticity_burst_rate < 0.0) throw PreconditionError(p.subject_id + ": negative burst rate");
}

inline void validate(const SessionShift& s) {
  for (double g : s.gain_drift)
    if (!(g > 0.0)) throw PreconditionError("session gain factors must be positive");
}

/// Gaussian bump of width `width` centred on electrode `centre` of the ring.
inline ChannelArray ring_bump(double centre, double width) {
  ChannelArray out{};
  for (std::size_t c = 0; c < kChannels; ++c) {
    double d = std::abs(static_cast<double>(c) - centre);
    d = std::min(d, static_cast<double>(kChannels) - d);
    out[c] = std::exp(-0.5 * (d / width) * (d / width));
  }
  return out;
}

/// Draws a subject signature from the configured priors.
inline SubjectProfile sample_profile(const std::string& subject_id, Rng rng, const SynthConfig& cfg) {
  for (int attempt = 0;; ++attempt) {
    SubjectProfile p;
    p.subject_id = subject_id;
    const double flexor_centre = rng.uniform(0.0, static_cast<double>(kChannels));
    const double extensor_centre = flexor_centre + static_cast<double>(kChannels) / 2.0 + rng.uniform(-1.0, 1.0);
    const ChannelArray flex = ring_bump(flexor_centre, cfg.pattern_width);
    const ChannelArray ext = ring_bump(std::fmod(extensor_centre, static_cast<double>(kChannels)), cfg.pattern_width);
    const double close_gain = rng.uniform(cfg.close_gain_min, cfg.close_gain_max);
    const double open_gain = close_gain * rng.uniform(cfg.open_ratio_min, cfg.open_ratio_max);
    const double cocontraction = rng.uniform(0.0, cfg.cocontraction_max);
    for (std::size_t c = 0; c < kChannels; ++c) {
      const auto col = static_cast<Eigen::Index>(c);
      const double relax = rng.uniform(cfg.relax_level_min, cfg.relax_level_max);
      const double jitter_open = rng.uniform(0.7, 1.3);
      const double jitter_close = rng.uniform(0.7, 1.3);
      p.mean_activation(static_cast<int>(Intent::Relax), col) = relax;
      p.mean_activation(static_cast<int>(Intent::Open), col) =
          relax + open_gain * jitter_open * (ext[c] + cocontraction * flex[c]);
      p.mean_activation(static_cast<int>(Intent::Close), col) = relax + close_gain * jitter_close * flex[c];
      p.tonic_level[c] = rng.uniform(cfg.tonic_min, cfg.tonic_max);
      p.noise_std[c] = rng.uniform(cfg.noise_std_min, cfg.noise_std_max);
      p.burst_profile[c] = cfg.burst_amplitude * flex[c] * rng.uniform(0.5, 1.0);
    }
    p.mean_activation = p.mean_activation.cwiseMax(kClipLow).cwiseMin(kClipHigh);
    p.spasticity_burst_rate = rng.uniform(cfg.burst_rate_min, cfg.burst_rate_max);
    try {
      validate(p);
      return p;
    } catch (const PreconditionError&) {
      if (attempt >= 64) throw;
    }
  }
}

inline SessionShift sample_shift(Rng rng, const SynthConfig& cfg) {
  SessionShift s;
  s.channel_permutation_angle = rng.normal(0.0, cfg.rotation_std);
  for (std::size_t c = 0; c < kChannels; ++c) {
    s.gain_drift[c] = std::max(0.05, 1.0 + rng.normal(0.0, cfg.gain_drift_std));
    s.tone_drift[c] = rng.normal(0.0, cfg.tone_drift_std);
  }
  return s;
}

/// Noiseless per-intent channel levels for a condition, before the session
/// shift: mean activation plus tonic level with condition modulation applied.
inline Eigen::Matrix<double, 3, static_cast<int>(kChannels)> condition_levels(const SubjectProfile& p,
                                                                              Condition condition,
                                                                              const SynthConfig& cfg) {
  auto levels = p.mean_activation;
  for (std::size_t c = 0; c < kChannels; ++c) {
    const auto col = static_cast<Eigen::Index>(c);
    if (motor_on(condition) && is_flexor_channel(p, c)) {
      const double relax = p.mean_activation(0, col);
      levels(1, col) = relax + cfg.motor_on_open_flexor_scale * (p.mean_activation(1, col) - relax);
    }
    const double tonic = p.tonic_level[c] + (arm_off_table(condition) ? cfg.arm_off_tonic_boost : 0.0);
    levels.col(col).array() += tonic;
  }
  return levels;
}

/// One scripted recording at cfg.sample_rate_hz; a pure function of its inputs.
inline RawRecording generate_recording(const SubjectProfile& profile, const SessionShift& shift, Condition condition,
                                       std::uint64_t seed, const SynthConfig& cfg = {}, int day = 1) {
  validate(profile);
  validate(shift);
  RawRecording rec;
  rec.subject_id = profile.subject_id;
  rec.day = day;
  rec.condition = condition;
  rec.sample_rate_hz = cfg.sample_rate_hz;
  rec.cues = cue_track(cfg);
  const std::size_t n = rec.cues.size();
  const std::size_t lag = cfg.latency_samples();
  const auto levels = condition_levels(profile, condition, cfg);

  Rng rng(seed);
  Rng noise_rng = rng.split("noise");
  Rng burst_rng = rng.split("bursts");

  // Involuntary bursts: Poisson onsets, fixed duration.
  std::vector<double> burst(n, 0.0);
  const double onset_p = profile.spasticity_burst_rate / cfg.sample_rate_hz;
  const auto burst_len = static_cast<std::size_t>(std::llround(cfg.burst_duration_ms * cfg.sample_rate_hz / 1000.0));
  for (std::size_t t = 0; t < n; ++t) {
    if (onset_p > 0.0 && burst_rng.uniform() < onset_p) {
      const double scale = burst_rng.uniform(0.5, 1.5);
      for (std::size_t u = t; u < std::min(n, t + burst_len); ++u) burst[u] = std::max(burst[u], scale);
    }
  }

  rec.channels.resize(static_cast<Eigen::Index>(n), kChannels);
  for (std::size_t t = 0; t < n; ++t) {
    const Intent active = t >= lag ? rec.cues[t - lag] : rec.cues.front();
    ChannelArray base{};
    for (std::size_t c = 0; c < kChannels; ++c)
      base[c] = levels(static_cast<int>(active), static_cast<Eigen::Index>(c)) + burst[t] * profile.burst_profile[c];
    const ChannelArray moved = rotate_channels(base, shift.channel_permutation_angle);
    for (std::size_t c = 0; c < kChannels; ++c) {
      double v = shift.gain_drift[c] * moved[c] + shift.tone_drift[c];
      if (profile.noise_std[c] > 0.0) v += profile.noise_std[c] * noise_rng.normal();
      rec.channels(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) = std::clamp(v, kClipLow, kClipHigh);
    }
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

inline constexpr int kDay1Recordings = 8;
inline constexpr int kDay2Recordings = 6;
inline constexpr int kRecordingsPerSubject = kDay1Recordings + kDay2Recordings;

struct CorpusEntry {
  RawRecording recording;
  int repetition = 0;
  std::uint64_t seed = 0;
  std::string file_name;
};

struct Corpus {
  std::uint64_t seed = 0;
  std::vector<SubjectProfile> profiles;
  /// Per subject: day-1 and day-2 shifts.
  std::vector<std::array<SessionShift, 2>> shifts;
  std::vector<CorpusEntry> entries;
};

inline std::string subject_name(int index) { return "S" + std::to_string(index + 1); }

/// Seed of recording `index` (0..13) of subject `subject` in a corpus.
inline std::uint64_t recording_seed(std::uint64_t corpus_seed, int subject, int index) {
  return Rng(corpus_seed).split("recording").split(static_cast<std::uint64_t>(subject)).split(
      static_cast<std::uint64_t>(index)).next_u64();
}

/// Condition and repetition of recording `index`: day 1 covers the four
/// conditions twice, day 2 cycles them for six recordings.
inline std::pair<Condition, int> recording_slot(int index) {
  const int within_day = index < kDay1Recordings ? index : index - kDay1Recordings;
  return {kAllConditions[static_cast<std::size_t>(within_day % 4)], within_day / 4};
}

/// Generates one recording of a corpus; any subset can be produced
/// independently and in any order.
inline CorpusEntry generate_corpus_entry(const Corpus& corpus, int subject, int index, const SynthConfig& cfg) {
  const int day = index < kDay1Recordings ? 1 : 2;
  const auto [condition, repetition] = recording_slot(index);
  CorpusEntry e;
  e.seed = recording_seed(corpus.seed, subject, index);
  e.repetition = repetition;
  e.recording = generate_recording(corpus.profiles[static_cast<std::size_t>(subject)],
                                   corpus.shifts[static_cast<std::size_t>(subject)][static_cast<std::size_t>(day - 1)],
                                   condition, e.seed, cfg, day);
  e.file_name = subject_name(subject) + "_d" + std::to_string(day) + "_" + std::string(to_token(condition)) + "_r" +
                std::to_string(repetition) + ".csv";
  return e;
}

inline Corpus generate_corpus(int n_subjects, std::uint64_t seed, const SynthConfig& cfg = {}) {
  if (n_subjects < 1) throw PreconditionError("generate_corpus: need at least one subject");
  Corpus corpus;
  corpus.seed = seed;
  const Rng root(seed);
  for (int s = 0; s < n_subjects; ++s) {
    corpus.profiles.push_back(sample_profile(subject_name(s), root.split("profile").split(static_cast<std::uint64_t>(s)), cfg));
    corpus.shifts.push_back({SessionShift::identity(),
                             sample_shift(root.split("shift").split(static_cast<std::uint64_t>(s)), cfg)});
  }
  for (int s = 0; s < n_subjects; ++s)
    for (int r = 0; r < kRecordingsPerSubject; ++r) corpus.entries.push_back(generate_corpus_entry(corpus, s, r, cfg));
  return corpus;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"sample_rate_hz", c.sample_rate_hz},
       {"cue_seconds", c.cue_seconds},
       {"latency_ms", c.latency_ms},
       {"relax_level_min", c.relax_level_min},
       {"relax_level_max", c.relax_level_max},
       {"close_gain_min", c.close_gain_min},
       {"close_gain_max", c.close_gain_max},
       {"open_ratio_min", c.open_ratio_min},
       {"open_ratio_max", c.open_ratio_max},
       {"cocontraction_max", c.cocontraction_max},
       {"pattern_width", c.pattern_width},
       {"tonic_min", c.tonic_min},
       {"tonic_max", c.tonic_max},
       {"noise_std_min", c.noise_std_min},
       {"noise_std_max", c.noise_std_max},
       {"burst_rate_min", c.burst_rate_min},
       {"burst_rate_max", c.burst_rate_max},
       {"burst_duration_ms", c.burst_duration_ms},
       {"burst_amplitude", c.burst_amplitude},
       {"motor_on_open_flexor_scale", c.motor_on_open_flexor_scale},
       {"arm_off_tonic_boost", c.arm_off_tonic_boost},
       {"rotation_std", c.rotation_std},
       {"gain_drift_std", c.gain_drift_std},
       {"tone_drift_std", c.tone_drift_std}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  const SynthConfig d;
  c.sample_rate_hz = j.value("sample_rate_hz", d.sample_rate_hz);
  c.cue_seconds = j.value("cue_seconds", d.cue_seconds);
  c.latency_ms = j.value("latency_ms", d.latency_ms);
  c.relax_level_min = j.value("relax_level_min", d.relax_level_min);
  c.relax_level_max = j.value("relax_level_max", d.relax_level_max);
  c.close_gain_min = j.value("close_gain_min", d.close_gain_min);
  c.close_gain_max = j.value("close_gain_max", d.close_gain_max);
  c.open_ratio_min = j.value("open_ratio_min", d.open_ratio_min);
  c.open_ratio_max = j.value("open_ratio_max", d.open_ratio_max);
  c.cocontraction_max = j.value("cocontraction_max", d.cocontraction_max);
  c.pattern_width = j.value("pattern_width", d.pattern_width);
  c.tonic_min = j.value("tonic_min", d.tonic_min);
  c.tonic_max = j.value("tonic_max", d.tonic_max);
  c.noise_std_min = j.value("noise_std_min", d.noise_std_min);
  c.noise_std_max = j.value("noise_std_max", d.noise_std_max);
  c.burst_rate_min = j.value("burst_rate_min", d.burst_rate_min);
  c.burst_rate_max = j.value("burst_rate_max", d.burst_rate_max);
  c.burst_duration_ms = j.value("burst_duration_ms", d.burst_duration_ms);
  c.burst_amplitude = j.value("burst_amplitude", d.burst_amplitude);
  c.motor_on_open_flexor_scale = j.value("motor_on_open_flexor_scale", d.motor_on_open_flexor_scale);
  c.arm_off_tonic_boost = j.value("arm_off_tonic_boost", d.arm_off_tonic_boost);
  c.rotation_std = j.value("rotation_std", d.rotation_std);
  c.gain_drift_std = j.value("gain_drift_std", d.gain_drift_std);
  c.tone_drift_std = j.value("tone_drift_std", d.tone_drift_std);
}

inline nlohmann::json to_json(const ChannelArray& a) { return nlohmann::json(std::vector<double>(a.begin(), a.end())); }

inline nlohmann::json profile_json(const SubjectProfile& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) {
    std::vector<double> row(kChannels);
    for (std::size_t c = 0; c < kChannels; ++c) row[c] = p.mean_activation(i, static_cast<Eigen::Index>(c));
    rows.push_back(row);
  }
  return {{"subject_id", p.subject_id},
          {"mean_activation", rows},
          {"tonic_level", to_json(p.tonic_level)},
          {"noise_std", to_json(p.noise_std)},
          {"spasticity_burst_rate", p.spasticity_burst_rate},
          {"burst_profile", to_json(p.burst_profile)}};
}

inline nlohmann::json shift_json(const SessionShift& s) {
  return {{"channel_permutation_angle", s.channel_permutation_angle},
          {"gain_drift", to_json(s.gain_drift)},
          {"tone_drift", to_json(s.tone_drift)}};
}

inline constexpr std::string_view kManifestName = "manifest.json";

/// Writes every recording as CSV plus manifest.json into `dir`.
inline nlohmann::json write_corpus(const Corpus& corpus, const SynthConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "recordings");
  nlohmann::json recs = nlohmann::json::array();
  for (const CorpusEntry& e : corpus.entries) {
    const std::filesystem::path rel = std::filesystem::path("recordings") / e.file_name;
    write_recording(e.recording, (dir / rel).string());
    recs.push_back({{"subject", e.recording.subject_id},
                    {"day", e.recording.day},
                    {"condition", to_token(e.recording.condition)},
                    {"repetition", e.repetition},
                    {"seed", e.seed},
                    {"path", rel.generic_string()}});
  }
  nlohmann::json profiles = nlohmann::json::array(), shifts = nlohmann::json::array();
  for (std::size_t s = 0; s < corpus.profiles.size(); ++s) {
    profiles.push_back(profile_json(corpus.profiles[s]));
    shifts.push_back({shift_json(corpus.shifts[s][0]), shift_json(corpus.shifts[s][1])});
  }
  nlohmann::json manifest = {{"format", "metaemg-corpus"},
                             {"version", 1},
                             {"seed", corpus.seed},
                             {"n_subjects", corpus.profiles.size()},
                             {"synth_config", cfg},
                             {"profiles", profiles},
                             {"session_shifts", shifts},
                             {"recordings", recs}};
  std::ofstream out(dir / kManifestName);
  out << manifest.dump(2) << '\n';
  if (!out) throw Error("cannot write corpus manifest in " + dir.string());
  return manifest;
}

struct LoadedRecording {
  RawRecording recording;
  int repetition = 0;
  std::string path;
};

/// Reads a corpus directory written by write_corpus(), in manifest order.
inline std::vector<LoadedRecording> load_corpus(const std::filesystem::path& dir) {
  const std::filesystem::path mpath = dir / kManifestName;
  std::ifstream in(mpath);
  if (!in) throw Error("cannot open corpus manifest " + mpath.string());
  const auto manifest = nlohmann::json::parse(in);
  std::vector<LoadedRecording> out;
  for (const auto& r : manifest.at("recordings")) {
    LoadedRecording lr;
    lr.path = (dir / r.at("path").get<std::string>()).string();
    lr.recording = parse_recording(lr.path);
    lr.repetition = r.value("repetition", 0);
    out.push_back(std::move(lr));
  }
  return out;
}

}  // namespace metaemg
