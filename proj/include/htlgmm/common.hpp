#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace htlgmm {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using IndexList = std::vector<Index>;

enum class Errc {
  InvalidArgument,
  DimensionMismatch,
  NonFiniteInput,
  InvalidOutcome,
  SingularDesign,
  NonConvergence,
  SingularGamma,
  NotSymmetric,
  NotPositiveDefinite,
  NonPositiveGamma,
  FoldTooSmall,
  SingleClass,
  InvalidPValue,
  EmptySupport,
  SingularBread,
  CalibrationFailure,
  IncompatibleExternal,
  SingularCombinedCovariance,
  ConfigError,
  ParseError,
  SchemaMismatch,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::NonFiniteInput: return "NonFiniteInput";
    case Errc::InvalidOutcome: return "InvalidOutcome";
    case Errc::SingularDesign: return "SingularDesign";
    case Errc::NonConvergence: return "NonConvergence";
    case Errc::SingularGamma: return "SingularGamma";
    case Errc::NotSymmetric: return "NotSymmetric";
    case Errc::NotPositiveDefinite: return "NotPositiveDefinite";
    case Errc::NonPositiveGamma: return "NonPositiveGamma";
    case Errc::FoldTooSmall: return "FoldTooSmall";
    case Errc::SingleClass: return "SingleClass";
    case Errc::InvalidPValue: return "InvalidPValue";
    case Errc::EmptySupport: return "EmptySupport";
    case Errc::SingularBread: return "SingularBread";
    case Errc::CalibrationFailure: return "CalibrationFailure";
    case Errc::IncompatibleExternal: return "IncompatibleExternal";
    case Errc::SingularCombinedCovariance: return "SingularCombinedCovariance";
    case Errc::ConfigError: return "ConfigError";
    case Errc::ParseError: return "ParseError";
    case Errc::SchemaMismatch: return "SchemaMismatch";
  }
  return "Unknown";
}

/// Library exception. `step` names the pipeline stage when the error is
/// propagated through the driver ("initialization", "weighting", ...).
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg, std::string step = {})
      : std::runtime_error(msg), code_(code), step_(std::move(step)) {}

  Errc code() const noexcept { return code_; }
  const std::string& step() const noexcept { return step_; }

  Error with_step(const std::string& step) const {
    return Error(code_, what(), step_.empty() ? step : step_);
  }

 private:
  Errc code_;
  std::string step_;
};

namespace detail {

inline void require(bool cond, Errc code, const char* msg) {
  if (!cond) throw Error(code, msg);
}

inline void require(bool cond, Errc code, const std::string& msg) {
  if (!cond) throw Error(code, msg);
}

inline void require_dim(Index got, Index want, const char* what) {
  if (got != want) {
    throw Error(Errc::DimensionMismatch, std::string(what) + ": expected length " +
                                             std::to_string(want) + ", got " +
                                             std::to_string(got));
  }
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

inline Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

/// Gather rows of a matrix/vector by index.
inline Mat take_rows(const Mat& m, const IndexList& rows) {
  Mat out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

inline Vec take(const Vec& v, const IndexList& idx) {
  Vec out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Index>(i)) = v(idx[i]);
  return out;
}

inline Mat take_block(const Mat& m, const IndexList& idx) {
  const auto k = static_cast<Index>(idx.size());
  Mat out(k, k);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) out(i, j) = m(idx[i], idx[j]);
  return out;
}

}  // namespace detail

/// Deterministic RNG stream keyed by (seed, stream, substream); independent of
/// scheduling so replicate results never depend on thread interleaving.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0,
                                std::uint64_t substream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(substream), 0x48544cu};
  return std::mt19937_64(seq);
}

inline Mat standard_normal(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat m(rows, cols);
  // row-major fill so a prefix of rows is stable when `rows` changes
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = nd(rng);
  return m;
}

/// Number of worker threads: HTLGMM_THREADS env var, else hardware concurrency.
inline unsigned default_threads() {
  if (const char* env = std::getenv("HTLGMM_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (...) {
    }
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1u : hc;
}

/// Runs fn(i) for i in [0, count). Each index owns its own output slot, so
/// results are identical for any thread count.
inline void parallel_for(std::size_t count, unsigned threads,
                         const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const unsigned n = std::min<unsigned>(threads, static_cast<unsigned>(count));
  pool.reserve(n);
  for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace htlgmm
