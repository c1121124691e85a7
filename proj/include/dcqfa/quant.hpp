#pragma once

// Simulated (fake) quantization with straight-through gradients.
//
// Quantization is symmetric and signed: x_q = clamp(round_half_even(x / s), -qmax-1, qmax) * s
// with qmax = 2^(bits-1) - 1. A 16-bit quantizer is an exact identity.

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "dcqfa/numerics.hpp"

namespace dcqfa {

inline constexpr int kPassThroughBits = 16;
inline constexpr double kMinScale = 1e-8;

inline bool valid_bits(int bits) { return bits == 4 || bits == 8 || bits == 16; }

inline std::int64_t qmax_for(int bits) { return (std::int64_t{1} << (bits - 1)) - 1; }

enum class Granularity { kPerTensor, kPerOutputChannel };

struct QuantizerSpec {
  int bits = 8;
  Granularity granularity = Granularity::kPerTensor;
  /// One entry per tensor, or one per output channel (column) for weights.
  std::vector<float> scales;
  double decay = 0.99;
  double ema_maxabs = 0.0;
  std::int64_t updates = 0;
  /// Frozen specs ignore further calibration.
  bool frozen = false;
  /// Set when calibration saw an all-zero tensor and floored the scale.
  bool degenerate = false;

  bool calibrated() const { return bits == kPassThroughBits || !scales.empty(); }
  bool pass_through() const { return bits == kPassThroughBits; }

  static QuantizerSpec activation(int bits, double decay = 0.99) {
    check_bits(bits);
    if (!(decay > 0.0 && decay < 1.0)) throw UserError("quantizer decay must lie in (0, 1)");
    QuantizerSpec s;
    s.bits = bits;
    s.decay = decay;
    return s;
  }

  static QuantizerSpec weight(int bits) {
    check_bits(bits);
    QuantizerSpec s;
    s.bits = bits;
    s.granularity = Granularity::kPerOutputChannel;
    return s;
  }

  static void check_bits(int bits) {
    if (!valid_bits(bits)) throw UserError("unsupported bit-width " + std::to_string(bits));
  }
};

namespace detail {

inline double max_abs(std::span<const float> x) {
  double m = 0.0;
  for (float v : x) m = std::max(m, static_cast<double>(std::fabs(v)));
  return m;
}

/// Rounded grid index before clamping. nearbyint honours the default
/// round-to-nearest-even mode.
inline double grid_index(float x, float scale) {
  return std::nearbyint(static_cast<double>(x) / static_cast<double>(scale));
}

}  // namespace detail

/// Updates the scale(s) from `x`. Activations: EMA of max|x|, the first call
/// initialising the average. Weights: per-column max|x| recomputed from scratch.
inline QuantizerSpec calibrate(QuantizerSpec spec, const Tensor& x) {
  if (!x.all_finite()) throw NumericError("calibrate: non-finite input");
  if (spec.pass_through() || spec.frozen) return spec;
  const double qmax = static_cast<double>(qmax_for(spec.bits));
  if (spec.granularity == Granularity::kPerTensor) {
    const double m = detail::max_abs(x.data());
    spec.ema_maxabs = spec.updates == 0 ? m : spec.decay * spec.ema_maxabs + (1.0 - spec.decay) * m;
    ++spec.updates;
    double s = spec.ema_maxabs / qmax;
    spec.degenerate = s < kMinScale;
    spec.scales.assign(1, static_cast<float>(std::max(s, kMinScale)));
    return spec;
  }
  if (x.rank() != 2) throw std::invalid_argument("per-channel calibration needs a [in, out] weight matrix");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  spec.scales.assign(cols, 0.0f);
  spec.degenerate = false;
  for (std::size_t c = 0; c < cols; ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < rows; ++r) m = std::max(m, static_cast<double>(std::fabs(x[r * cols + c])));
    const double s = m / qmax;
    spec.degenerate = spec.degenerate || s < kMinScale;
    spec.scales[c] = static_cast<float>(std::max(s, kMinScale));
  }
  ++spec.updates;
  return spec;
}

/// Quantize-dequantize one value.
inline float fake_quant_value(float x, float scale, int bits) {
  if (bits == kPassThroughBits) return x;
  const double q = static_cast<double>(qmax_for(bits));
  const double idx = std::clamp(detail::grid_index(x, scale), -q - 1.0, q);
  return static_cast<float>(idx * static_cast<double>(scale));
}

/// Straight-through mask: 1 where the rounded index is inside the grid.
inline bool ste_pass(float x, float scale, int bits) {
  if (bits == kPassThroughBits) return true;
  const double q = static_cast<double>(qmax_for(bits));
  const double idx = detail::grid_index(x, scale);
  return idx >= -q - 1.0 && idx <= q;
}

/// Applies a calibrated spec to a tensor (no tape).
inline Tensor fake_quant(const QuantizerSpec& spec, const Tensor& x) {
  if (spec.pass_through()) return x;
  if (!spec.calibrated()) throw UserError("fake_quant: quantizer is not calibrated");
  Tensor out = x;
  if (spec.granularity == Granularity::kPerTensor) {
    for (auto& v : out.storage()) v = fake_quant_value(v, spec.scales[0], spec.bits);
    return out;
  }
  const std::size_t cols = x.cols();
  if (spec.scales.size() != cols) throw std::invalid_argument("fake_quant: channel count mismatch");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fake_quant_value(out[i], spec.scales[i % cols], spec.bits);
  return out;
}

/// Storage bits for `param_count` values at `bits`, plus one 32-bit scale per group.
inline std::uint64_t quantized_size_bits(std::uint64_t param_count, int bits, std::uint64_t groups = 1) {
  return param_count * static_cast<std::uint64_t>(bits) + 32ULL * groups;
}

/// Replaces fake quantization by its straight-through linearisation.
///
/// In record mode each quantizer call logs its output and STE mask in call
/// order. In replay mode the k-th call returns mask ? x + (recorded_out - recorded_in) : recorded_out,
/// a function whose exact derivative is the STE mask. Finite differences of a
/// replayed forward therefore check STE-masked analytic gradients.
class SteLinearization {
 public:
  enum class Mode { kRecord, kReplay };

  void start(Mode mode) {
    mode_ = mode;
    cursor_ = 0;
    if (mode == Mode::kRecord) calls_.clear();
  }
  Mode mode() const { return mode_; }
  std::size_t calls() const { return calls_.size(); }

  /// One recorded quantizer invocation.
  struct Call {
    std::vector<float> input;
    std::vector<float> output;
    std::vector<std::uint8_t> mask;
  };

  Call& next_record() {
    calls_.emplace_back();
    return calls_.back();
  }

  const Call& next_replay() {
    if (cursor_ >= calls_.size()) throw std::logic_error("ste replay: more quantizer calls than recorded");
    return calls_[cursor_++];
  }

 private:
  Mode mode_ = Mode::kRecord;
  std::size_t cursor_ = 0;
  std::vector<Call> calls_;
};

/// Tape op: per-tensor (one scale) or per-column (scales.size() == cols) fake quantization.
/// Backward passes gradient through where the STE mask is 1.
inline Var fake_quant(Tape& tape, Var x, const std::vector<float>& scales, int bits,
                      SteLinearization* linearization = nullptr) {
  if (bits == kPassThroughBits) return x;
  const Tensor& X = tape.value(x);
  const std::size_t cols = X.cols();
  if (scales.empty() || (scales.size() != 1 && scales.size() != cols)) {
    throw std::invalid_argument("fake_quant: scale count does not match tensor " + shape_string(X.shape()));
  }
  const bool per_column = scales.size() != 1;
  Tensor Y(X.shape());
  std::vector<std::uint8_t> mask(X.size());
  auto scale_at = [&](std::size_t i) { return per_column ? scales[i % cols] : scales[0]; };

  if (linearization && linearization->mode() == SteLinearization::Mode::kReplay) {
    const auto& call = linearization->next_replay();
    if (call.input.size() != X.size()) throw std::logic_error("ste replay: call shape changed");
    for (std::size_t i = 0; i < X.size(); ++i) {
      mask[i] = call.mask[i];
      Y[i] = mask[i] ? X[i] + (call.output[i] - call.input[i]) : call.output[i];
    }
  } else {
    for (std::size_t i = 0; i < X.size(); ++i) {
      Y[i] = fake_quant_value(X[i], scale_at(i), bits);
      mask[i] = ste_pass(X[i], scale_at(i), bits) ? 1 : 0;
    }
    if (linearization) {
      auto& call = linearization->next_record();
      call.input = X.storage();
      call.output = Y.storage();
      call.mask = mask;
    }
  }
  return tape.record(
      std::move(Y), {x},
      [x, mask = std::move(mask)](Tape& t, std::size_t self) {
        const auto& G = t.grad_at(self);
        auto* d = t.grad_sink(x);
        for (std::size_t i = 0; i < G.size(); ++i) {
          if (mask[i]) (*d)[i] += G[i];
        }
      },
      "fake_quant");
}

inline Var fake_quant(Tape& tape, Var x, const QuantizerSpec& spec, SteLinearization* linearization = nullptr) {
  if (spec.pass_through()) return x;
  if (!spec.calibrated()) throw UserError("fake_quant: quantizer is not calibrated");
  return fake_quant(tape, x, spec.scales, spec.bits, linearization);
}

}  // namespace dcqfa
