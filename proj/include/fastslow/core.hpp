#pragma once

// Shared vocabulary: small vector types, the error hierarchy, a counter-based
// random number generator and a deterministic parallel map.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fastslow {

inline constexpr int kMaxSmallDim = 16;

/// Stack-allocated vector used for phase-space points and observable values.
using SmallVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxSmallDim, 1>;
using SmallMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxSmallDim, kMaxSmallDim>;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite state during time stepping.
class IntegrationDiverged : public Error {
 public:
  explicit IntegrationDiverged(double time)
      : Error("integration diverged at t=" + std::to_string(time)), time_(time) {}
  double time() const { return time_; }

 private:
  double time_;
};

class NoCrossingFound : public Error {
 public:
  using Error::Error;
};

class NotPositiveSemidefinite : public Error {
 public:
  NotPositiveSemidefinite(double eigenvalue, double tol)
      : Error("matrix not positive semidefinite: eigenvalue " + std::to_string(eigenvalue) +
              " below -" + std::to_string(tol)),
        eigenvalue_(eigenvalue) {}
  double eigenvalue() const { return eigenvalue_; }

 private:
  double eigenvalue_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class GridMismatch : public Error {
 public:
  using Error::Error;
};

class ExponentCondition : public Error {
 public:
  using Error::Error;
};

class OutOfGrid : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

inline bool all_finite(const auto& v) { return v.allFinite(); }

// ---------------------------------------------------------------------------
// Counter-based RNG (Philox4x32-10). Every draw is a pure function of
// (key, counter), so ensemble members can be generated in any order.

namespace rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Named purposes so different consumers of one seed never share streams.
enum class Stream : std::uint64_t {
  initial_perturbation = 1,
  sde_increments = 2,
  test_data = 3,
};

inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

class CounterRng {
 public:
  CounterRng(std::uint64_t seed, Stream stream) {
    const std::uint64_t k = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(stream)));
    key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
  }

  /// Two uniforms in (0,1) for counter (step, member, block).
  std::array<double, 2> uniform2(std::uint64_t step, std::uint32_t member,
                                 std::uint32_t block) const {
    const auto out = philox4x32({static_cast<std::uint32_t>(step),
                                 static_cast<std::uint32_t>(step >> 32), member, block},
                                key_);
    const std::uint64_t a = (std::uint64_t{out[0]} << 32) | out[1];
    const std::uint64_t b = (std::uint64_t{out[2]} << 32) | out[3];
    constexpr double kScale = 1.0 / 9007199254740992.0;  // 2^-53
    return {((a >> 11) + 0.5) * kScale, ((b >> 11) + 0.5) * kScale};
  }

  /// Fills `out` with independent standard normals keyed by (step, member).
  template <class V>
  void normals(std::uint64_t step, std::uint32_t member, V& out) const {
    const auto n = static_cast<std::uint32_t>(out.size());
    for (std::uint32_t block = 0; 2 * block < n; ++block) {
      const auto [u1, u2] = uniform2(step, member, block);
      const double r = std::sqrt(-2.0 * std::log(u1));
      const double phi = 2.0 * std::numbers::pi * u2;
      out[2 * block] = r * std::cos(phi);
      if (2 * block + 1 < n) out[2 * block + 1] = r * std::sin(phi);
    }
  }

  double normal(std::uint64_t step, std::uint32_t member) const {
    Eigen::Matrix<double, 1, 1> z;
    normals(step, member, z);
    return z[0];
  }

 private:
  std::array<std::uint32_t, 2> key_{};
};

}  // namespace rng

// ---------------------------------------------------------------------------
// Deterministic parallel map: results land in index order regardless of the
// worker count, and the first exception (lowest index) is rethrown.

template <class Fn>
auto parallel_map(std::size_t count, int workers, Fn&& fn)
    -> std::vector<decltype(fn(std::size_t{}))> {
  using R = decltype(fn(std::size_t{}));
  std::vector<R> results(count);
  std::vector<std::exception_ptr> errors(count);
  const auto run = [&](std::size_t i) {
    try {
      results[i] = fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const auto nworkers =
      static_cast<std::size_t>(std::clamp<std::size_t>(workers <= 0 ? 1 : workers, 1, count == 0 ? 1 : count));
  if (nworkers <= 1) {
    for (std::size_t i = 0; i < count; ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(nworkers);
    for (std::size_t w = 0; w < nworkers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < count; i += nworkers) run(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

// ---------------------------------------------------------------------------
// Small numeric helpers

/// Number of whole steps of size dt in `span`, tolerant to rounding.
inline long long whole_steps(double span, double dt) {
  return static_cast<long long>(std::floor(span / dt + 1e-9));
}

/// Mean and standard error of per-member estimates (batch means).
struct BatchMeans {
  double mean = 0.0;
  double std_error = 0.0;
};

inline BatchMeans batch_means(const std::vector<double>& xs) {
  BatchMeans out;
  if (xs.empty()) return out;
  double s = 0.0;
  for (double x : xs) s += x;
  out.mean = s / static_cast<double>(xs.size());
  if (xs.size() < 2) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.std_error = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
  return out;
}

}  // namespace fastslow
