#pragma once

// Log-gamma, digamma and trigamma for positive real arguments.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "ptrick/error.hpp"

namespace ptrick::special {

namespace detail {

inline void require_positive(double x, const char* fn) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw DomainError(std::string(fn) + ": argument must be finite and > 0");
  }
}

// Godfrey's coefficients for g = 607/128.
inline constexpr double kLanczosG = 607.0 / 128.0;
inline constexpr std::array<double, 15> kLanczos = {
    0.99999999999999709182,     57.156235665862923517,     -59.597960355475491248,
    14.136097974741747174,      -0.49191381609762019978,   .33994649984811888699e-4,
    .46523628927048575665e-4,   -.98374475304879564677e-4, .15808870322491248884e-3,
    -.21026444172410488319e-3,  .21743961811521264320e-3,  -.16431810653676389022e-3,
    .84418223983852743293e-4,   -.26190838401581408670e-4, .36899182659531622704e-5};

inline double lanczos_log_gamma(double x) {
  const double z = x - 1.0;
  double a = kLanczos[0];
  for (std::size_t i = 1; i < kLanczos.size(); ++i) a += kLanczos[i] / (z + static_cast<double>(i));
  const double t = z + kLanczosG + 0.5;
  return 0.5 * std::log(2.0 * std::numbers::pi) + (z + 0.5) * std::log(t) - t + std::log(a);
}

}  // namespace detail

// Remainder of Stirling's series: log_gamma(x) - [(x - 1/2) log x - x + log(2 pi)/2].
// Valid for x >= 10; used directly where the leading terms cancel.
inline double stirling_remainder(double x) {
  const double r = 1.0 / x;
  const double r2 = r * r;
  return r * (1.0 / 12 +
              r2 * (-1.0 / 360 +
                    r2 * (1.0 / 1260 +
                          r2 * (-1.0 / 1680 +
                                r2 * (1.0 / 1188 + r2 * (-691.0 / 360360 + r2 * (1.0 / 156)))))));
}

inline double log_gamma(double x) {
  detail::require_positive(x, "log_gamma");
  if (x == 1.0 || x == 2.0) return 0.0;
  if (x >= 10.0) {
    return (x - 0.5) * std::log(x) - x + 0.5 * std::log(2.0 * std::numbers::pi) +
           stirling_remainder(x);
  }
  if (x < 0.5) return detail::lanczos_log_gamma(x + 1.0) - std::log(x);
  // Gamma has zeros of log at 1 and 2; the recurrence keeps the absolute error tiny there.
  if (x > 1.5 && x < 2.5) return detail::lanczos_log_gamma(x - 1.0) + std::log(x - 1.0);
  return detail::lanczos_log_gamma(x);
}

inline double log_factorial(std::int64_t n) {
  if (n < 0) throw DomainError("log_factorial: negative argument");
  if (n < 2) return 0.0;
  return log_gamma(static_cast<double>(n) + 1.0);
}

inline double digamma(double x) {
  detail::require_positive(x, "digamma");
  double shift = 0.0;
  while (x < 10.0) {
    shift -= 1.0 / x;
    x += 1.0;
  }
  const double r = 1.0 / x;
  const double r2 = r * r;
  const double series =
      r2 * (1.0 / 12 -
            r2 * (1.0 / 120 -
                  r2 * (1.0 / 252 -
                        r2 * (1.0 / 240 - r2 * (1.0 / 132 - r2 * (691.0 / 32760 - r2 / 12))))));
  return shift + std::log(x) - 0.5 * r - series;
}

// log(x) - digamma(x) without cancellation for large x.
inline double log_minus_digamma(double x) {
  detail::require_positive(x, "log_minus_digamma");
  if (x < 10.0) return std::log(x) - digamma(x);
  const double r = 1.0 / x;
  const double r2 = r * r;
  return 0.5 * r +
         r2 * (1.0 / 12 -
               r2 * (1.0 / 120 -
                     r2 * (1.0 / 252 -
                           r2 * (1.0 / 240 - r2 * (1.0 / 132 - r2 * (691.0 / 32760 - r2 / 12))))));
}

inline double trigamma(double x) {
  detail::require_positive(x, "trigamma");
  double shift = 0.0;
  while (x < 10.0) {
    shift += 1.0 / (x * x);
    x += 1.0;
  }
  const double r = 1.0 / x;
  const double r2 = r * r;
  // 1/x + 1/(2x^2) + sum B_2k / x^(2k+1)
  const double series =
      r * (1.0 + r * (0.5 + r * (1.0 / 6 -
                                 r2 * (1.0 / 30 -
                                       r2 * (1.0 / 42 -
                                             r2 * (1.0 / 30 - r2 * (5.0 / 66 - r2 * 691.0 / 2730)))))));
  return shift + series;
}

// log Gamma(a + n) - log Gamma(a) for integer n >= 0, accurate when a is huge.
inline double log_rising_factorial(double a, std::int64_t n) {
  detail::require_positive(a, "log_rising_factorial");
  if (n < 0) throw DomainError("log_rising_factorial: negative count");
  if (n == 0) return 0.0;
  if (a < 1e4 || n > 4096) return log_gamma(a + static_cast<double>(n)) - log_gamma(a);
  double s = 0.0;
  for (std::int64_t k = 0; k < n; ++k) s += std::log(a + static_cast<double>(k));
  return s;
}

}  // namespace ptrick::special
