#pragma once

// Recording model, CSV format, and the clip -> rescale -> window chain.

#include <Eigen/Dense>

#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "metaemg/error.hpp"

namespace metaemg {

inline constexpr std::size_t kChannels = 8;
inline constexpr std::size_t kIntents = 3;
inline constexpr double kClipLow = 0.0;
inline constexpr double kClipHigh = 1000.0;

enum class Intent : int { Relax = 0, Open = 1, Close = 2 };

enum class Condition : int { ArmOnMotorOff = 0, ArmOnMotorOn = 1, ArmOffMotorOff = 2, ArmOffMotorOn = 3 };

inline constexpr std::array<Condition, 4> kAllConditions = {
    Condition::ArmOnMotorOff, Condition::ArmOnMotorOn, Condition::ArmOffMotorOff, Condition::ArmOffMotorOn};

constexpr std::string_view to_token(Intent i) {
  switch (i) {
    case Intent::Relax: return "relax";
    case Intent::Open: return "open";
    case Intent::Close: return "close";
  }
  return "?";
}

constexpr std::string_view to_token(Condition c) {
  switch (c) {
    case Condition::ArmOnMotorOff: return "on_off";
    case Condition::ArmOnMotorOn: return "on_on";
    case Condition::ArmOffMotorOff: return "off_off";
    case Condition::ArmOffMotorOn: return "off_on";
  }
  return "?";
}

constexpr std::optional<Intent> intent_from_token(std::string_view s) {
  if (s == "relax") return Intent::Relax;
  if (s == "open") return Intent::Open;
  if (s == "close") return Intent::Close;
  return std::nullopt;
}

constexpr std::optional<Condition> condition_from_token(std::string_view s) {
  for (Condition c : kAllConditions)
    if (to_token(c) == s) return c;
  return std::nullopt;
}

constexpr bool motor_on(Condition c) {
  return c == Condition::ArmOnMotorOn || c == Condition::ArmOffMotorOn;
}

constexpr bool arm_off_table(Condition c) {
  return c == Condition::ArmOffMotorOff || c == Condition::ArmOffMotorOn;
}

/// Column c holds channel c, so each channel is contiguous in memory.
using ChannelMatrix = Eigen::Matrix<double, Eigen::Dynamic, static_cast<int>(kChannels)>;

struct RawRecording {
  std::string subject_id;
  int day = 1;
  Condition condition = Condition::ArmOnMotorOff;
  int sample_rate_hz = 100;
  ChannelMatrix channels;
  std::vector<Intent> cues;

  std::size_t n_samples() const { return cues.size(); }
};

/// Maximal run of identical cues, covering samples [begin, end).
struct CueRun {
  Intent intent;
  std::size_t begin;
  std::size_t end;

  std::size_t length() const { return end - begin; }
};

inline std::vector<CueRun> cue_runs(std::span<const Intent> cues) {
  std::vector<CueRun> runs;
  for (std::size_t i = 0; i < cues.size(); ++i) {
    if (runs.empty() || runs.back().intent != cues[i])
      runs.push_back({cues[i], i, i + 1});
    else
      runs.back().end = i + 1;
  }
  return runs;
}

/// Exactly three Open runs and three Close runs.
inline bool has_three_motions(std::span<const Intent> cues) {
  int opens = 0, closes = 0;
  for (const CueRun& r : cue_runs(cues)) {
    opens += r.intent == Intent::Open;
    closes += r.intent == Intent::Close;
  }
  return opens == 3 && closes == 3;
}

/// Throws StructureError / ShapeError when a RawRecording invariant fails.
inline void validate(const RawRecording& rec) {
  if (static_cast<std::size_t>(rec.channels.rows()) != rec.cues.size())
    throw ShapeError("channel rows (" + std::to_string(rec.channels.rows()) + ") != cue count (" +
                     std::to_string(rec.cues.size()) + ")");
  if (rec.day != 1 && rec.day != 2) throw StructureError("day must be 1 or 2");
  if (rec.sample_rate_hz <= 0) throw StructureError("sample rate must be positive");
  if (!has_three_motions(rec.cues))
    throw StructureError("cue script must contain exactly three open and three close runs");
}

// ---------------------------------------------------------------------------
// CSV format
//
//   subject,day,condition,rate_hz
//   S1,1,on_off,100
//   e1,e2,e3,e4,e5,e6,e7,e8,cue
//   <8 values>,<relax|open|close>
//   ...
// ---------------------------------------------------------------------------

inline constexpr std::string_view kMetaHeader = "subject,day,condition,rate_hz";
inline constexpr std::string_view kSampleHeader = "e1,e2,e3,e4,e5,e6,e7,e8,cue";

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  T value{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

/// Shortest representation that parses back to the same double.
inline void append_double(std::string& out, double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, ptr);
}

}  // namespace detail

inline RawRecording parse_recording(std::istream& in, const std::string& source = "<stream>") {
  std::string line;
  std::size_t lineno = 0;
  auto next_line = [&](const char* what) -> std::string_view {
    if (!std::getline(in, line)) throw ParseError(source, lineno + 1, std::string("missing ") + what);
    ++lineno;
    return detail::strip_cr(line);
  };

  if (next_line("metadata header") != kMetaHeader)
    throw ParseError(source, lineno, "malformed header, expected '" + std::string(kMetaHeader) + "'");

  RawRecording rec;
  {
    const auto fields = detail::split_csv(next_line("metadata row"));
    if (fields.size() != 4) throw ParseError(source, lineno, "metadata row must have 4 fields");
    if (fields[0].empty()) throw ParseError(source, lineno, "empty subject id");
    rec.subject_id = std::string(fields[0]);
    const auto day = detail::parse_number<int>(fields[1]);
    if (!day || (*day != 1 && *day != 2)) throw ParseError(source, lineno, "day must be 1 or 2");
    rec.day = *day;
    const auto cond = condition_from_token(fields[2]);
    if (!cond) throw ParseError(source, lineno, "unknown condition '" + std::string(fields[2]) + "'");
    rec.condition = *cond;
    const auto rate = detail::parse_number<int>(fields[3]);
    if (!rate || *rate <= 0) throw ParseError(source, lineno, "rate_hz must be a positive integer");
    rec.sample_rate_hz = *rate;
  }

  if (next_line("sample header") != kSampleHeader)
    throw ParseError(source, lineno, "malformed sample header, expected '" + std::string(kSampleHeader) + "'");

  std::vector<double> values;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view row = detail::strip_cr(line);
    if (row.empty()) continue;
    const auto fields = detail::split_csv(row);
    if (fields.size() != kChannels + 1)
      throw ParseError(source, lineno,
                       "expected 8 channels plus cue, got " + std::to_string(fields.size()) + " fields");
    for (std::size_t c = 0; c < kChannels; ++c) {
      const auto v = detail::parse_number<double>(fields[c]);
      if (!v || !std::isfinite(*v))
        throw ParseError(source, lineno, "bad value '" + std::string(fields[c]) + "' in channel e" +
                                             std::to_string(c + 1));
      values.push_back(*v);
    }
    const auto cue = intent_from_token(fields[kChannels]);
    if (!cue) throw ParseError(source, lineno, "unknown cue token '" + std::string(fields[kChannels]) + "'");
    rec.cues.push_back(*cue);
  }

  const std::size_t n = rec.cues.size();
  rec.channels.resize(static_cast<Eigen::Index>(n), kChannels);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < kChannels; ++c)
      rec.channels(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = values[i * kChannels + c];

  if (!has_three_motions(rec.cues))
    throw ParseError(source, lineno, "cue script must contain exactly three open and three close runs");
  return rec;
}

inline RawRecording parse_recording(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open file");
  return parse_recording(in, path);
}

inline std::string format_recording(const RawRecording& rec) {
  std::string out;
  out.reserve(rec.n_samples() * 80 + 128);
  out.append(kMetaHeader).push_back('\n');
  out.append(rec.subject_id).push_back(',');
  out.append(std::to_string(rec.day)).push_back(',');
  out.append(to_token(rec.condition)).push_back(',');
  out.append(std::to_string(rec.sample_rate_hz)).push_back('\n');
  out.append(kSampleHeader).push_back('\n');
  for (std::size_t i = 0; i < rec.n_samples(); ++i) {
    for (std::size_t c = 0; c < kChannels; ++c) {
      detail::append_double(out, rec.channels(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
      out.push_back(',');
    }
    out.append(to_token(rec.cues[i])).push_back('\n');
  }
  return out;
}

inline void write_recording(const RawRecording& rec, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << format_recording(rec);
  if (!out) throw Error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

inline RawRecording clip_channels(RawRecording rec) {
  rec.channels = rec.channels.cwiseMax(kClipLow).cwiseMin(kClipHigh);
  return rec;
}

enum class RescaleMode {
  /// c -> c / 500 - 1, identical for every session and subject.
  FixedAffine,
  /// Per-recording, per-channel min-max onto [-1, 1]. Sensitivity studies only.
  PerRecordingMinMax,
};

inline RawRecording rescale_channels(RawRecording rec, RescaleMode mode = RescaleMode::FixedAffine) {
  if (rec.channels.size() > 0 && (rec.channels.minCoeff() < kClipLow || rec.channels.maxCoeff() > kClipHigh))
    throw PreconditionError("rescale_channels requires entries clipped to [0, 1000]");
  if (mode == RescaleMode::FixedAffine) {
    rec.channels = (rec.channels.array() / 500.0 - 1.0).matrix();
    return rec;
  }
  for (Eigen::Index c = 0; c < rec.channels.cols(); ++c) {
    auto col = rec.channels.col(c);
    if (col.size() == 0) continue;
    const double lo = col.minCoeff(), hi = col.maxCoeff();
    if (hi > lo)
      col = ((col.array() - lo) / (hi - lo) * 2.0 - 1.0).matrix();
    else
      col.setZero();
  }
  return rec;
}

inline RawRecording preprocess(RawRecording rec, RescaleMode mode = RescaleMode::FixedAffine) {
  return rescale_channels(clip_channels(std::move(rec)), mode);
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

struct WindowConfig {
  double window_seconds = 2.0;
  double stride_ms = 10.0;

  /// Samples per window (W).
  std::size_t width(int sample_rate_hz) const {
    const double w = window_seconds * sample_rate_hz;
    if (!(w >= 1.0) || std::abs(w - std::round(w)) > 1e-9)
      throw ConfigError("window length must be a positive whole number of samples");
    return static_cast<std::size_t>(std::llround(w));
  }

  /// Samples between consecutive window ends (s).
  std::size_t stride(int sample_rate_hz) const {
    const double s = stride_ms * sample_rate_hz / 1000.0;
    if (!(s >= 1.0) || std::abs(s - std::round(s)) > 1e-9)
      throw ConfigError("stride must be a positive whole number of samples, got " + std::to_string(s));
    return static_cast<std::size_t>(std::llround(s));
  }

  std::size_t input_dim(int sample_rate_hz) const { return kChannels * width(sample_rate_hz); }
};

/// A window of a preprocessed recording, referenced by its final sample. The
/// 8 x W matrix is materialized on demand so thousands of overlapping windows
/// share one copy of the signal.
class WindowedSample {
 public:
  WindowedSample(std::shared_ptr<const RawRecording> source, std::size_t t_end, std::size_t width)
      : source_(std::move(source)), t_end_(t_end), width_(width), label_(source_->cues.at(t_end)) {}

  std::size_t t_end() const { return t_end_; }
  std::size_t width() const { return width_; }
  Intent label() const { return label_; }
  const RawRecording& source() const { return *source_; }

  /// Channel-major flattening: channel 0's W samples (oldest first), then channel 1, ...
  void flatten_into(std::span<double> out) const {
    if (out.size() != kChannels * width_) throw ShapeError("flatten_into: wrong output size");
    const auto first = static_cast<Eigen::Index>(t_end_ + 1 - width_);
    for (std::size_t c = 0; c < kChannels; ++c) {
      const auto col = source_->channels.col(static_cast<Eigen::Index>(c)).segment(first, width_);
      Eigen::Map<Eigen::VectorXd>(out.data() + c * width_, static_cast<Eigen::Index>(width_)) = col;
    }
  }

  Eigen::VectorXd flattened() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(kChannels * width_));
    flatten_into({v.data(), static_cast<std::size_t>(v.size())});
    return v;
  }

  /// The window as an 8 x W matrix.
  Eigen::MatrixXd x() const {
    const auto first = static_cast<Eigen::Index>(t_end_ + 1 - width_);
    return source_->channels.middleRows(first, static_cast<Eigen::Index>(width_)).transpose();
  }

 private:
  std::shared_ptr<const RawRecording> source_;
  std::size_t t_end_;
  std::size_t width_;
  Intent label_;
};

inline std::size_t window_count(std::size_t n_samples, std::size_t width, std::size_t stride) {
  return n_samples < width ? 0 : (n_samples - width) / stride + 1;
}

/// Windows ending at W-1, W-1+s, ... labeled by the cue at their final sample.
/// `rec` must already be clipped and rescaled.
inline std::vector<WindowedSample> window(std::shared_ptr<const RawRecording> rec, const WindowConfig& config = {}) {
  const std::size_t width = config.width(rec->sample_rate_hz);
  const std::size_t stride = config.stride(rec->sample_rate_hz);
  if (rec->n_samples() < width)
    throw PreconditionError("recording has " + std::to_string(rec->n_samples()) + " samples, fewer than window width " +
                            std::to_string(width));
  if (rec->channels.size() > 0 && (rec->channels.minCoeff() < -1.0 || rec->channels.maxCoeff() > 1.0))
    throw PreconditionError("window requires a preprocessed recording with entries in [-1, 1]");
  std::vector<WindowedSample> out;
  out.reserve(window_count(rec->n_samples(), width, stride));
  for (std::size_t t = width - 1; t < rec->n_samples(); t += stride) out.emplace_back(rec, t, width);
  return out;
}

inline std::vector<WindowedSample> window(const RawRecording& rec, const WindowConfig& config = {}) {
  return window(std::make_shared<const RawRecording>(rec), config);
}

// ---------------------------------------------------------------------------
// Intent distribution
// ---------------------------------------------------------------------------

struct IntentDistribution {
  double p_relax = 0.0;
  double p_open = 0.0;
  double p_close = 0.0;

  double operator[](Intent i) const {
    switch (i) {
      case Intent::Relax: return p_relax;
      case Intent::Open: return p_open;
      case Intent::Close: return p_close;
    }
    return 0.0;
  }

  Intent argmax() const {
    Intent best = Intent::Relax;
    if (p_open > (*this)[best]) best = Intent::Open;
    if (p_close > (*this)[best]) best = Intent::Close;
    return best;
  }
};

}  // namespace metaemg
