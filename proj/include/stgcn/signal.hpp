#pragma once

// Multichannel EMG recordings, the EMG1 container, annotation sidecars and
// sliding-window segmentation.
//
// EMG1 layout (little-endian):
//   "EMG1" | u32 channels | u64 samples | u32 sample_rate | f32[channels * samples]
// The payload is channel-major: all samples of channel 0, then channel 1, ...
//
// Annotation sidecar: one `start_sample,end_sample,label,repetition` line per
// interval, end exclusive. Blank lines and lines starting with '#' are skipped.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stgcn/tensor.hpp"

namespace stgcn {

static_assert(std::endian::native == std::endian::little, "EMG1 I/O assumes a little-endian host");

struct Annotation {
    std::uint64_t start = 0;
    std::uint64_t end = 0;  // exclusive
    int label = 0;
    int repetition = 0;

    std::uint64_t span() const { return end - start; }
    bool operator==(const Annotation&) const = default;
};

struct EmgRecording {
    std::uint32_t channels = 0;
    std::uint32_t sample_rate = 0;
    std::uint64_t samples = 0;
    std::vector<double> data;  // [channels x samples], channel-major
    std::vector<Annotation> annotations;

    double at(std::size_t channel, std::size_t t) const { return data[channel * samples + t]; }
    double duration_seconds() const {
        return static_cast<double>(samples) / static_cast<double>(sample_rate);
    }
};

/// One classification unit: [N x L] samples plus its label.
struct Window {
    Tensor data;  // [N, L]
    int label = 0;
    int repetition = 0;
    int subject = 0;
    std::uint64_t source_offset = 0;

    std::size_t channels() const { return data.shape[0]; }
    std::size_t length() const { return data.shape[1]; }
};

enum class RecordingErrorKind { Io, BadMagic, Truncated, HeaderMismatch, BadAnnotation };

class RecordingError : public std::runtime_error {
public:
    RecordingError(RecordingErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    RecordingErrorKind kind() const { return kind_; }

private:
    RecordingErrorKind kind_;
};

inline constexpr std::array<char, 4> kEmgMagic{'E', 'M', 'G', '1'};
inline constexpr std::size_t kEmgHeaderBytes = 4 + 4 + 8 + 4;

/// Checks the recording-level invariants (N >= 2, rate > 0, annotations in
/// range and non-overlapping).
inline void validate(const EmgRecording& rec) {
    if (rec.channels < 2) {
        throw RecordingError(RecordingErrorKind::HeaderMismatch,
                             "header: need at least 2 channels, got " +
                                 std::to_string(rec.channels));
    }
    if (rec.sample_rate == 0) {
        throw RecordingError(RecordingErrorKind::HeaderMismatch, "header: sample rate is 0");
    }
    if (rec.data.size() != static_cast<std::size_t>(rec.channels) * rec.samples) {
        throw RecordingError(RecordingErrorKind::HeaderMismatch,
                             "payload size does not match header dims");
    }
    std::vector<Annotation> sorted = rec.annotations;
    std::sort(sorted.begin(), sorted.end(),
              [](const Annotation& a, const Annotation& b) { return a.start < b.start; });
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const auto& a = sorted[i];
        if (a.start >= a.end || a.end > rec.samples) {
            throw RecordingError(RecordingErrorKind::BadAnnotation,
                                 "annotation [" + std::to_string(a.start) + ", " +
                                     std::to_string(a.end) + ") outside [0, " +
                                     std::to_string(rec.samples) + ")");
        }
        if (a.label < 0 || a.repetition < 0) {
            throw RecordingError(RecordingErrorKind::BadAnnotation,
                                 "annotation label and repetition must be non-negative");
        }
        if (i > 0 && sorted[i - 1].end > a.start) {
            throw RecordingError(RecordingErrorKind::BadAnnotation,
                                 "annotations overlap at sample " + std::to_string(a.start));
        }
    }
}

inline void save_recording(const EmgRecording& rec, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RecordingError(RecordingErrorKind::Io, "cannot open " + path + " for writing");
    out.write(kEmgMagic.data(), kEmgMagic.size());
    out.write(reinterpret_cast<const char*>(&rec.channels), sizeof rec.channels);
    out.write(reinterpret_cast<const char*>(&rec.samples), sizeof rec.samples);
    out.write(reinterpret_cast<const char*>(&rec.sample_rate), sizeof rec.sample_rate);
    std::vector<float> payload(rec.data.begin(), rec.data.end());
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw RecordingError(RecordingErrorKind::Io, "write failed: " + path);
}

/// Reads an EMG1 container. Annotations are not part of the container; see
/// load_annotations.
inline EmgRecording load_recording(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RecordingError(RecordingErrorKind::Io, "cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < kEmgMagic.size() ||
        !std::equal(kEmgMagic.begin(), kEmgMagic.end(), bytes.begin())) {
        throw RecordingError(RecordingErrorKind::BadMagic, path + ": bad magic (expected EMG1)");
    }
    if (bytes.size() < kEmgHeaderBytes) {
        throw RecordingError(RecordingErrorKind::Truncated, path + ": truncated header");
    }
    EmgRecording rec;
    std::memcpy(&rec.channels, &bytes[4], 4);
    std::memcpy(&rec.samples, &bytes[8], 8);
    std::memcpy(&rec.sample_rate, &bytes[16], 4);
    if (rec.channels < 2 || rec.sample_rate == 0) {
        throw RecordingError(RecordingErrorKind::HeaderMismatch,
                             path + ": invalid header (channels=" + std::to_string(rec.channels) +
                                 ", sample_rate=" + std::to_string(rec.sample_rate) + ")");
    }
    const std::uint64_t count = static_cast<std::uint64_t>(rec.channels) * rec.samples;
    const std::uint64_t have = bytes.size() - kEmgHeaderBytes;
    if (rec.samples != 0 && count / rec.samples != rec.channels) {
        throw RecordingError(RecordingErrorKind::HeaderMismatch, path + ": header dims overflow");
    }
    if (have < count * sizeof(float)) {
        throw RecordingError(RecordingErrorKind::Truncated, path + ": truncated payload");
    }
    if (have > count * sizeof(float)) {
        throw RecordingError(RecordingErrorKind::HeaderMismatch,
                             path + ": payload longer than header dims declare");
    }
    std::vector<float> payload(count);
    std::memcpy(payload.data(), &bytes[kEmgHeaderBytes], count * sizeof(float));
    rec.data.assign(payload.begin(), payload.end());
    return rec;
}

inline std::vector<Annotation> parse_annotations(std::istream& in, const std::string& origin) {
    std::vector<Annotation> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string field;
        std::vector<long long> v;
        while (std::getline(ls, field, ',')) {
            try {
                std::size_t used = 0;
                v.push_back(std::stoll(field, &used));
                if (used != field.size()) throw std::invalid_argument(field);
            } catch (const std::exception&) {
                throw RecordingError(RecordingErrorKind::BadAnnotation,
                                     origin + ":" + std::to_string(lineno) +
                                         ": non-integer field '" + field + "'");
            }
        }
        if (v.size() != 4 || v[0] < 0 || v[1] < 0) {
            throw RecordingError(RecordingErrorKind::BadAnnotation,
                                 origin + ":" + std::to_string(lineno) +
                                     ": expected start_sample,end_sample,label,repetition");
        }
        out.push_back({static_cast<std::uint64_t>(v[0]), static_cast<std::uint64_t>(v[1]),
                       static_cast<int>(v[2]), static_cast<int>(v[3])});
    }
    return out;
}

inline std::vector<Annotation> load_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RecordingError(RecordingErrorKind::Io, "cannot open " + path);
    return parse_annotations(in, path);
}

inline void save_annotations(const std::vector<Annotation>& anns, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw RecordingError(RecordingErrorKind::Io, "cannot open " + path + " for writing");
    for (const auto& a : anns) {
        out << a.start << ',' << a.end << ',' << a.label << ',' << a.repetition << '\n';
    }
}

struct WindowGeometry {
    std::size_t length = 0;  // samples per window
    std::size_t hop = 0;     // samples between window starts
};

/// window_ms * rate / 1000 and length * (1 - overlap) must both be positive
/// integers.
inline WindowGeometry window_geometry(std::uint32_t sample_rate, double window_ms,
                                      double overlap_fraction) {
    if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0)) {
        throw std::invalid_argument("overlap fraction must lie in [0, 1), got " +
                                    std::to_string(overlap_fraction));
    }
    const double len = window_ms * static_cast<double>(sample_rate) / 1000.0;
    const double len_r = std::round(len);
    if (!(len_r >= 1.0) || std::abs(len - len_r) > 1e-9) {
        throw std::invalid_argument("window of " + std::to_string(window_ms) + " ms at " +
                                    std::to_string(sample_rate) +
                                    " Hz is not a positive integer number of samples");
    }
    const double hop = len_r * (1.0 - overlap_fraction);
    const double hop_r = std::round(hop);
    if (!(hop_r >= 1.0) || std::abs(hop - hop_r) > 1e-9) {
        throw std::invalid_argument("hop of " + std::to_string(hop) +
                                    " samples is not a positive integer");
    }
    return {static_cast<std::size_t>(len_r), static_cast<std::size_t>(hop_r)};
}

/// floor((span - length) / hop) + 1 when span >= length, else 0.
inline std::size_t window_count(std::uint64_t span, std::size_t length, std::size_t hop) {
    if (span < length) return 0;
    return static_cast<std::size_t>((span - length) / hop) + 1;
}

/// Windows lying entirely inside one annotation interval, in annotation order.
/// Unannotated samples (rest) produce nothing; tails shorter than a window are
/// dropped.
inline std::vector<Window> segment_windows(const EmgRecording& rec, WindowGeometry geom,
                                           int subject = 0) {
    validate(rec);
    std::vector<Window> out;
    for (const auto& a : rec.annotations) {
        const std::size_t n = window_count(a.span(), geom.length, geom.hop);
        for (std::size_t w = 0; w < n; ++w) {
            const std::uint64_t off = a.start + w * geom.hop;
            Window win;
            win.data = Tensor(Shape{rec.channels, geom.length});
            for (std::size_t c = 0; c < rec.channels; ++c) {
                std::copy_n(&rec.data[c * rec.samples + off], geom.length,
                            &win.data.data[c * geom.length]);
            }
            win.label = a.label;
            win.repetition = a.repetition;
            win.subject = subject;
            win.source_offset = off;
            out.push_back(std::move(win));
        }
    }
    return out;
}

inline std::vector<Window> segment_windows(const EmgRecording& rec, double window_ms,
                                           double overlap_fraction, int subject = 0) {
    return segment_windows(rec, window_geometry(rec.sample_rate, window_ms, overlap_fraction),
                           subject);
}

namespace detail {

// Mean and population std of one row; std is reported as 0 when the spread is
// at rounding level relative to the values, so constant rows stay degenerate.
inline std::pair<double, double> row_moments(const double* x, std::size_t n) {
    double mean = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean += x[i];
        scale = std::max(scale, std::abs(x[i]));
    }
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (x[i] - mean) * (x[i] - mean);
    double sd = std::sqrt(ss / static_cast<double>(n));
    if (sd <= 1e-12 * std::max(1.0, scale)) sd = 0.0;
    return {mean, sd};
}

}  // namespace detail

/// Per-channel z-score (population std). Constant channels become zeros.
inline Window zscore_normalize(Window w) {
    const std::size_t n = w.channels(), len = w.length();
    for (std::size_t c = 0; c < n; ++c) {
        double* row = &w.data.data[c * len];
        const auto [mean, sd] = detail::row_moments(row, len);
        for (std::size_t t = 0; t < len; ++t) row[t] = sd == 0.0 ? 0.0 : (row[t] - mean) / sd;
    }
    return w;
}

}  // namespace stgcn
