#ifndef RAINSCALE_GRADCHECK_HPP_
#define RAINSCALE_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "rainscale/error.hpp"
#include "rainscale/rng.hpp"

namespace rainscale {

struct GradCheckConfig {
  double eps = 1e-5;
  int max_coords = 64;
  std::uint64_t seed = 0;
  // Networks with relu/leaky-relu/max contain kinks where central
  // differences are meaningless. With exclude_kinks set, a coordinate whose
  // left and right difference quotients disagree is skipped and another
  // coordinate is sampled instead. Coordinates whose analytic and numeric
  // derivatives both sit below grad_floor are likewise skipped: they are
  // smaller than the cancellation noise of the difference quotient itself.
  bool exclude_kinks = false;
  double kink_tol = 0.02;
  double slope_floor = 1e-5;
  double grad_floor = 1e-7;
  // With eps2 > 0, the central quotient is recomputed at the second step
  // size and the coordinate is excluded unless both agree: a kink inside the
  // wider stencil or quotient noise shows up as disagreement.
  double eps2 = 0.0;
  double consistency_tol = 3e-5;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
  int excluded = 0;
};

/// Central-difference check of an analytic gradient. `f` evaluates the
/// scalar objective for perturbed values of the checked array; `analytic` is
/// the gradient claimed by backward(). At most max_coords coordinates are
/// compared, with relative error denominator max(|analytic|, |numeric|, 1e-12).
inline GradCheckResult grad_check_full(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x0, const std::vector<double>& analytic,
    const GradCheckConfig& cfg = {}) {
  require(x0.size() == analytic.size(), errc::shape_mismatch,
          "gradient size does not match input size");
  std::vector<std::size_t> coords(x0.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  Rng rng(cfg.seed);
  rng.shuffle(coords);

  GradCheckResult result;
  std::vector<double> x = x0;
  const double f0 = cfg.exclude_kinks ? f(x) : 0.0;

  for (std::size_t i : coords) {
    if (result.checked >= cfg.max_coords) break;
    const double keep = x[i];
    x[i] = keep + cfg.eps;
    const double fp = f(x);
    x[i] = keep - cfg.eps;
    const double fm = f(x);
    x[i] = keep;
    const double central = (fp - fm) / (2.0 * cfg.eps);
    if (cfg.exclude_kinks) {
      if (std::max(std::abs(analytic[i]), std::abs(central)) < cfg.grad_floor) {
        ++result.excluded;
        continue;
      }
      // A kink inside [x-eps, x+eps] splits the one-sided slopes.
      const double right = (fp - f0) / cfg.eps;
      const double left = (f0 - fm) / cfg.eps;
      const double scale = std::max({std::abs(right), std::abs(left), cfg.slope_floor});
      if (std::abs(right - left) / scale > cfg.kink_tol) {
        ++result.excluded;
        continue;
      }
      if (cfg.eps2 > 0.0) {
        x[i] = keep + cfg.eps2;
        const double fp2 = f(x);
        x[i] = keep - cfg.eps2;
        const double fm2 = f(x);
        x[i] = keep;
        const double central2 = (fp2 - fm2) / (2.0 * cfg.eps2);
        const double cscale = std::max({std::abs(central), std::abs(central2), 1e-12});
        if (std::abs(central - central2) / cscale > cfg.consistency_tol) {
          ++result.excluded;
          continue;
        }
      }
    }
    const double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-12});
    result.max_rel_err =
        std::max(result.max_rel_err, std::abs(analytic[i] - central) / denom);
    ++result.checked;
  }
  return result;
}

inline double grad_check(const std::function<double(const std::vector<double>&)>& f,
                         const std::vector<double>& x0,
                         const std::vector<double>& analytic,
                         const GradCheckConfig& cfg = {}) {
  return grad_check_full(f, x0, analytic, cfg).max_rel_err;
}

}  // namespace rainscale

#endif  // RAINSCALE_GRADCHECK_HPP_
