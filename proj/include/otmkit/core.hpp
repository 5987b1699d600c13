#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace otmkit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors. Every failure carries a stable machine-readable code so the CLI can
// emit {"error": {"code": ...}} without string matching.
// ---------------------------------------------------------------------------

class OtmError : public std::runtime_error {
 public:
  OtmError(std::string code, const std::string& msg)
      : std::runtime_error(code + ": " + msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

#define OTMKIT_DEFINE_ERROR(Name)                        \
  class Name : public OtmError {                         \
   public:                                               \
    explicit Name(const std::string& msg)                \
        : OtmError(#Name, msg) {}                        \
  }

OTMKIT_DEFINE_ERROR(DimensionMismatch);
OTMKIT_DEFINE_ERROR(NegativeEntry);
OTMKIT_DEFINE_ERROR(RowSumViolation);
OTMKIT_DEFINE_ERROR(MissingLabels);
OTMKIT_DEFINE_ERROR(LabelDimensionMismatch);
OTMKIT_DEFINE_ERROR(NonUniqueStationary);
OTMKIT_DEFINE_ERROR(StationaryUnavailable);
OTMKIT_DEFINE_ERROR(MarginalNotNormalized);
OTMKIT_DEFINE_ERROR(NonFiniteCost);
OTMKIT_DEFINE_ERROR(SupportViolation);
OTMKIT_DEFINE_ERROR(NotConverged);
OTMKIT_DEFINE_ERROR(PreconditionViolated);
OTMKIT_DEFINE_ERROR(NotStationary);
OTMKIT_DEFINE_ERROR(EpsilonZero);
OTMKIT_DEFINE_ERROR(ExactPathUnsupported);
OTMKIT_DEFINE_ERROR(InvalidPolicy);
OTMKIT_DEFINE_ERROR(InputError);

#undef OTMKIT_DEFINE_ERROR

// ---------------------------------------------------------------------------
// CounterRng: counter-based generator. A draw is a pure function of
// (seed, stream, counter), so parallel consumers can key independent streams
// and any run replays exactly from the recorded seed.
// ---------------------------------------------------------------------------

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  static std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream,
                           std::uint64_t counter) {
    return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ counter);
  }

  std::uint64_t next_u64() { return mix(seed_, stream_, counter_++); }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform in {0, ..., n-1}
  int next_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // standard normal via Box-Muller (deterministic, no cached spare)
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// parallel_for: chunked index-range pool for the embarrassingly parallel cell
// sweeps. Workers write disjoint outputs, so results never depend on the
// thread count or execution order.
// ---------------------------------------------------------------------------

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

inline void parallel_for(int total, int threads,
                         const std::function<void(int, int)>& body) {
  threads = resolve_threads(threads);
  if (threads <= 1 || total <= 1) {
    if (total > 0) body(0, total);
    return;
  }
  threads = std::min(threads, total);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  int chunk = (total + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    int lo = t * chunk;
    int hi = std::min(total, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

// Log level from OTMKIT_LOG: off (default) | info | debug.
inline int log_level() {
  static int level = [] {
    const char* env = std::getenv("OTMKIT_LOG");
    if (env == nullptr) return 0;
    std::string v(env);
    if (v == "debug") return 2;
    if (v == "info") return 1;
    return 0;
  }();
  return level;
}

inline constexpr const char* kVersion = "0.1.0";

}  // namespace otmkit
