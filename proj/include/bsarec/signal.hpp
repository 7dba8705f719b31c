#pragma once

// Spectral decompositions along the temporal axis: unitary DFT on real
// sequences, multi-level Haar DWT, low/high-frequency band splits, the
// learnable rescaler primitive, history padding, and the scaled-DC
// user-frequency metric. All functions are pure and thread-safe.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bsarec {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Left-padding strategy for histories shorter than the encoded length.
enum class PaddingMode { Zero, Cyclic, Reflect, Symmetric };

// Decomposition used by the frequency rescaler. Residual is the identity
// decomposition (the whole signal is its own low band).
enum class SpectralBackend { Fourier, Wavelet, Residual };

inline const char* to_string(PaddingMode mode) {
  switch (mode) {
    case PaddingMode::Zero: return "zero";
    case PaddingMode::Cyclic: return "cyclic";
    case PaddingMode::Reflect: return "reflect";
    case PaddingMode::Symmetric: return "symmetric";
  }
  return "zero";
}

inline PaddingMode padding_mode_from_string(std::string_view name) {
  if (name == "zero") return PaddingMode::Zero;
  if (name == "cyclic") return PaddingMode::Cyclic;
  if (name == "reflect") return PaddingMode::Reflect;
  if (name == "symmetric") return PaddingMode::Symmetric;
  throw std::invalid_argument("unknown padding mode: " + std::string(name));
}

inline const char* to_string(SpectralBackend backend) {
  switch (backend) {
    case SpectralBackend::Fourier: return "fourier";
    case SpectralBackend::Wavelet: return "wavelet";
    case SpectralBackend::Residual: return "residual";
  }
  return "fourier";
}

inline SpectralBackend spectral_backend_from_string(std::string_view name) {
  if (name == "fourier") return SpectralBackend::Fourier;
  if (name == "wavelet") return SpectralBackend::Wavelet;
  if (name == "residual") return SpectralBackend::Residual;
  throw std::invalid_argument("unknown spectral backend: " + std::string(name));
}

// Hermitian half of the DFT of a real length-d sequence: bins 0..floor(d/2).
// Bin 0 (and the Nyquist bin for even d) are real by construction.
template <typename Scalar>
struct HalfSpectrum {
  VectorX<std::complex<Scalar>> bins;
  Index original_length = 0;
};

// Multi-level Haar coefficients. `details` is ordered coarse -> fine, each
// level left -> right, so [approximation, details...] flattens low -> high
// frequency. Total coefficient count always equals original_length.
template <typename Scalar>
struct WaveletDecomposition {
  VectorX<Scalar> approximation;
  std::vector<VectorX<Scalar>> details;
  Index original_length = 0;

  Index levels() const { return static_cast<Index>(details.size()); }

  Index coefficient_count() const {
    Index n = approximation.size();
    for (const auto& d : details) n += d.size();
    return n;
  }
};

namespace detail {

template <typename Scalar>
void require_finite(const VectorX<Scalar>& x, const char* what) {
  if (!x.allFinite())
    throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace detail

// Number of half-spectrum bins for a length-d sequence.
inline Index half_spectrum_size(Index d) { return d / 2 + 1; }

// Deepest Haar analysis possible for a length-d sequence.
inline Index max_haar_levels(Index d) {
  Index levels = 0;
  while (d >= 2) {
    d = (d + 1) / 2;
    ++levels;
  }
  return levels;
}

// Depth used by the rescaler when none is requested: floor(log2(d)), capped
// at 3 so the coarse band stays wide enough to be selectable by small c.
inline Index default_wavelet_levels(Index d) {
  if (d < 2) return 0;
  Index log2_floor = 0;
  while ((Index{1} << (log2_floor + 1)) <= d) ++log2_floor;
  return std::min<Index>(3, log2_floor);
}

// Unitary DFT, direct evaluation: bin k = (1/sqrt(d)) sum_n x_n e^{-2pi i kn/d}.
// Only the Hermitian half is returned; bin 0 is the DC component sum(x)/sqrt(d).
template <typename Scalar>
HalfSpectrum<Scalar> forward_dft(const VectorX<Scalar>& x) {
  detail::require_finite(x, "forward_dft");
  const Index d = x.size();
  if (d < 1) throw std::invalid_argument("forward_dft: empty sequence");

  const Index bins = half_spectrum_size(d);
  HalfSpectrum<Scalar> spectrum;
  spectrum.original_length = d;
  spectrum.bins.resize(bins);

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (Index k = 0; k < bins; ++k) {
    double re = 0.0, im = 0.0;
    for (Index n = 0; n < d; ++n) {
      const double angle = -2.0 * M_PI * static_cast<double>(k) *
                           static_cast<double>(n) / static_cast<double>(d);
      const double v = static_cast<double>(x(n));
      re += v * std::cos(angle);
      im += v * std::sin(angle);
    }
    spectrum.bins(k) = std::complex<Scalar>(static_cast<Scalar>(re * scale),
                                            static_cast<Scalar>(im * scale));
  }
  // DC and (for even d) Nyquist bins are exactly real.
  spectrum.bins(0).imag(Scalar{0});
  if (d % 2 == 0) spectrum.bins(bins - 1).imag(Scalar{0});
  return spectrum;
}

// Inverse of forward_dft. Rejects spectra whose DC/Nyquist bins carry an
// imaginary part (no real sequence can produce them).
template <typename Scalar>
VectorX<Scalar> inverse_dft(const HalfSpectrum<Scalar>& spectrum) {
  const Index d = spectrum.original_length;
  if (d < 1) throw std::invalid_argument("inverse_dft: empty spectrum");
  if (spectrum.bins.size() != half_spectrum_size(d))
    throw std::invalid_argument("inverse_dft: bin count does not match length");
  for (Index k = 0; k < spectrum.bins.size(); ++k) {
    const auto& b = spectrum.bins(k);
    if (!std::isfinite(b.real()) || !std::isfinite(b.imag()))
      throw std::invalid_argument("inverse_dft: non-finite bin");
  }

  double max_abs = 0.0;
  for (Index k = 0; k < spectrum.bins.size(); ++k)
    max_abs = std::max(max_abs, std::abs(std::complex<double>(
                                    spectrum.bins(k).real(), spectrum.bins(k).imag())));
  const double imag_tol = 1e-9 * std::max(1.0, max_abs);
  if (std::abs(static_cast<double>(spectrum.bins(0).imag())) > imag_tol)
    throw std::invalid_argument("inverse_dft: DC bin must be real");
  const bool even = (d % 2 == 0);
  if (even && std::abs(static_cast<double>(
                  spectrum.bins(spectrum.bins.size() - 1).imag())) > imag_tol)
    throw std::invalid_argument("inverse_dft: Nyquist bin must be real");

  const Index bins = spectrum.bins.size();
  const Index mirrored_end = even ? bins - 1 : bins;  // bins counted twice
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  VectorX<Scalar> x(d);
  for (Index n = 0; n < d; ++n) {
    double acc = static_cast<double>(spectrum.bins(0).real());
    for (Index k = 1; k < mirrored_end; ++k) {
      const double angle = 2.0 * M_PI * static_cast<double>(k) *
                           static_cast<double>(n) / static_cast<double>(d);
      acc += 2.0 * (static_cast<double>(spectrum.bins(k).real()) * std::cos(angle) -
                    static_cast<double>(spectrum.bins(k).imag()) * std::sin(angle));
    }
    if (even) {
      const double nyquist = static_cast<double>(spectrum.bins(bins - 1).real());
      acc += (n % 2 == 0) ? nyquist : -nyquist;
    }
    x(n) = static_cast<Scalar>(acc * scale);
  }
  return x;
}

// Multi-level Haar analysis. Per level a_k = (x_{2k}+x_{2k+1})/sqrt(2),
// d_k = (x_{2k}-x_{2k+1})/sqrt(2), recursing on approximations. Odd lengths
// symmetric-extend the trailing element; the extended pair's detail is
// identically zero and is dropped, keeping the coefficient count at d.
template <typename Scalar>
WaveletDecomposition<Scalar> haar_analysis(const VectorX<Scalar>& x, Index levels) {
  detail::require_finite(x, "haar_analysis");
  const Index d = x.size();
  if (levels < 1) throw std::invalid_argument("haar_analysis: levels must be >= 1");
  if (levels > max_haar_levels(d))
    throw std::invalid_argument("haar_analysis: too many levels for length " +
                                std::to_string(d));

  const Scalar inv_sqrt2 = Scalar(1) / static_cast<Scalar>(std::sqrt(2.0));
  const Scalar sqrt2 = static_cast<Scalar>(std::sqrt(2.0));

  WaveletDecomposition<Scalar> out;
  out.original_length = d;
  out.details.resize(levels);

  VectorX<Scalar> current = x;
  for (Index level = 0; level < levels; ++level) {
    const Index n = current.size();
    const Index pairs = n / 2;
    const bool odd = (n % 2 != 0);

    VectorX<Scalar> approx(pairs + (odd ? 1 : 0));
    VectorX<Scalar> det(pairs);
    for (Index k = 0; k < pairs; ++k) {
      approx(k) = (current(2 * k) + current(2 * k + 1)) * inv_sqrt2;
      det(k) = (current(2 * k) - current(2 * k + 1)) * inv_sqrt2;
    }
    if (odd) approx(pairs) = current(n - 1) * sqrt2;

    out.details[levels - 1 - level] = std::move(det);  // store coarse -> fine
    current = std::move(approx);
  }
  out.approximation = std::move(current);
  return out;
}

// Perfect-reconstruction synthesis for haar_analysis.
template <typename Scalar>
VectorX<Scalar> haar_synthesis(const WaveletDecomposition<Scalar>& w) {
  if (w.levels() < 1)
    throw std::invalid_argument("haar_synthesis: decomposition has no levels");

  const Scalar inv_sqrt2 = Scalar(1) / static_cast<Scalar>(std::sqrt(2.0));

  VectorX<Scalar> current = w.approximation;
  for (Index level = 0; level < w.levels(); ++level) {
    const VectorX<Scalar>& det = w.details[level];
    const Index pairs = det.size();
    const bool odd = (current.size() == pairs + 1);
    if (!odd && current.size() != pairs)
      throw std::invalid_argument("haar_synthesis: inconsistent level lengths");

    VectorX<Scalar> next(2 * pairs + (odd ? 1 : 0));
    for (Index k = 0; k < pairs; ++k) {
      next(2 * k) = (current(k) + det(k)) * inv_sqrt2;
      next(2 * k + 1) = (current(k) - det(k)) * inv_sqrt2;
    }
    if (odd) next(2 * pairs) = current(pairs) * inv_sqrt2;
    current = std::move(next);
  }
  if (current.size() != w.original_length)
    throw std::invalid_argument("haar_synthesis: lengths do not match original");
  return current;
}

// Largest valid cutoff for a length-d sequence under the given backend.
inline Index max_cutoff(Index d, SpectralBackend backend) {
  switch (backend) {
    case SpectralBackend::Fourier: return half_spectrum_size(d);
    case SpectralBackend::Wavelet: return d;
    case SpectralBackend::Residual: return std::numeric_limits<Index>::max();
  }
  return d;
}

// Low-frequency component: keep the c lowest-frequency coefficients of the
// chosen decomposition, zero the rest, and transform back. For Fourier the
// kept coefficients are half-spectrum bins 0..c-1 (DC included); for Wavelet
// they are the c coarsest entries in [approximation, details coarse->fine];
// Residual returns the input unchanged.
template <typename Scalar>
VectorX<Scalar> low_freq_component(const VectorX<Scalar>& x, Index cutoff,
                                   SpectralBackend backend,
                                   Index wavelet_levels = 0) {
  detail::require_finite(x, "low_freq_component");
  const Index d = x.size();
  if (d < 1) throw std::invalid_argument("low_freq_component: empty sequence");

  switch (backend) {
    case SpectralBackend::Residual:
      return x;
    case SpectralBackend::Fourier: {
      if (cutoff < 1 || cutoff > half_spectrum_size(d))
        throw std::invalid_argument("low_freq_component: cutoff out of range");
      HalfSpectrum<Scalar> spectrum = forward_dft(x);
      for (Index k = cutoff; k < spectrum.bins.size(); ++k)
        spectrum.bins(k) = std::complex<Scalar>(0, 0);
      return inverse_dft(spectrum);
    }
    case SpectralBackend::Wavelet: {
      if (cutoff < 1 || cutoff > d)
        throw std::invalid_argument("low_freq_component: cutoff out of range");
      if (d == 1) return x;  // single coefficient, always kept
      const Index levels =
          wavelet_levels > 0 ? wavelet_levels : default_wavelet_levels(d);
      WaveletDecomposition<Scalar> w = haar_analysis(x, levels);
      Index kept = std::min(cutoff, w.approximation.size());
      for (Index k = kept; k < w.approximation.size(); ++k) w.approximation(k) = 0;
      Index remaining = cutoff - kept;
      for (auto& det : w.details) {
        const Index keep_here = std::min<Index>(remaining, det.size());
        for (Index k = keep_here; k < det.size(); ++k) det(k) = 0;
        remaining -= keep_here;
      }
      return haar_synthesis(w);
    }
  }
  throw std::invalid_argument("low_freq_component: unknown backend");
}

// High-frequency component, defined as the exact residue x - LFC_c(x).
template <typename Scalar>
VectorX<Scalar> high_freq_component(const VectorX<Scalar>& x, Index cutoff,
                                    SpectralBackend backend,
                                    Index wavelet_levels = 0) {
  return x - low_freq_component(x, cutoff, backend, wavelet_levels);
}

// LFC_c(x) + beta * HFC_c(x) for a single channel. beta = 1 is the identity,
// beta = 0 a pure low-pass. Linear in x for fixed beta.
template <typename Scalar>
VectorX<Scalar> rescale(const VectorX<Scalar>& x, Index cutoff, Scalar beta,
                        SpectralBackend backend, Index wavelet_levels = 0) {
  if (!(beta >= Scalar{0}))
    throw std::invalid_argument("rescale: beta must be nonnegative");
  const VectorX<Scalar> low = low_freq_component(x, cutoff, backend, wavelet_levels);
  return low + beta * (x - low);
}

// Dense matrix of the (linear) LFC operator, column j = LFC(e_j). Computed in
// double and cast, so float models share one ground truth with the double
// reference path. The rescaler applies this along the temporal axis.
template <typename Scalar>
MatrixX<Scalar> lfc_operator_matrix(Index d, Index cutoff, SpectralBackend backend,
                                    Index wavelet_levels = 0) {
  if (backend == SpectralBackend::Residual)
    return MatrixX<Scalar>::Identity(d, d);
  MatrixX<double> op(d, d);
  VectorX<double> basis = VectorX<double>::Zero(d);
  for (Index j = 0; j < d; ++j) {
    basis(j) = 1.0;
    op.col(j) = low_freq_component<double>(basis, cutoff, backend, wavelet_levels);
    basis(j) = 0.0;
  }
  return op.template cast<Scalar>();
}

// Left-pads `seq` to `target_len`. The rightmost seq.size() positions are the
// original sequence. Pads, nearest-to-history first at i steps left of the
// history start:
//   Zero       pad value T{} (the reserved pad id)
//   Cyclic     seq wrapped, so the pad adjacent to seq holds its last element
//   Reflect    mirror omitting the first element: seq[i], bouncing at both ends
//   Symmetric  mirror including the first element: seq[i-1], bouncing likewise
// An empty sequence degenerates to Zero padding; `zero_fallback` reports it.
template <typename T>
std::vector<T> pad_history(const std::vector<T>& seq, std::size_t target_len,
                           PaddingMode mode, bool* zero_fallback = nullptr) {
  if (zero_fallback) *zero_fallback = false;
  if (seq.size() > target_len)
    throw std::invalid_argument("pad_history: sequence longer than target length");
  if (seq.empty() && mode != PaddingMode::Zero) {
    mode = PaddingMode::Zero;
    if (zero_fallback) *zero_fallback = true;
  }

  const std::size_t n = seq.size();
  const std::size_t pad = target_len - n;
  std::vector<T> out(target_len);
  std::copy(seq.begin(), seq.end(), out.begin() + pad);

  for (std::size_t slot = 0; slot < pad; ++slot) {
    const std::size_t i = pad - slot;  // steps left of the history start
    switch (mode) {
      case PaddingMode::Zero:
        out[slot] = T{};
        break;
      case PaddingMode::Cyclic:
        out[slot] = seq[(n - (i % n)) % n];
        break;
      case PaddingMode::Reflect: {
        if (n == 1) {
          out[slot] = seq[0];
        } else {
          const std::size_t period = 2 * (n - 1);
          const std::size_t m = i % period;
          out[slot] = seq[m <= n - 1 ? m : period - m];
        }
        break;
      }
      case PaddingMode::Symmetric: {
        const std::size_t period = 2 * n;
        const std::size_t m = (i - 1) % period;
        out[slot] = seq[m < n ? m : period - 1 - m];
        break;
      }
    }
  }
  return out;
}

// Category sequence re-encoded by order of first appearance into 1..m.
struct DenseCategoryVector {
  std::vector<std::int32_t> values;
  std::int32_t unique_count = 0;
};

template <typename Label>
DenseCategoryVector dense_category_encoding(const std::vector<Label>& labels) {
  if (labels.empty())
    throw std::invalid_argument("dense_category_encoding: empty category sequence");
  DenseCategoryVector out;
  out.values.reserve(labels.size());
  std::map<Label, std::int32_t> first_seen;
  for (const Label& label : labels) {
    auto [it, inserted] = first_seen.try_emplace(label, out.unique_count + 1);
    if (inserted) ++out.unique_count;
    out.values.push_back(it->second);
  }
  return out;
}

// 1 - cosine similarity between the dense category vector and the all-ones
// vector; 0 for constant histories, approaching 1 with more interest shifts.
inline double scaled_dc_component(const DenseCategoryVector& d_u) {
  const std::size_t n = d_u.values.size();
  if (n == 0)
    throw std::invalid_argument("scaled_dc_component: empty category vector");
  bool constant = true;
  for (std::size_t i = 1; i < n && constant; ++i)
    constant = (d_u.values[i] == d_u.values[0]);
  if (constant) return 0.0;

  double sum = 0.0, sum_sq = 0.0;
  for (std::int32_t v : d_u.values) {
    sum += v;
    sum_sq += static_cast<double>(v) * v;
  }
  const double dc = sum / std::sqrt(static_cast<double>(n));
  return 1.0 - dc / std::sqrt(sum_sq);
}

}  // namespace bsarec
