#ifndef RAINSCALE_SYNTH_HPP_
#define RAINSCALE_SYNTH_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "rainscale/error.hpp"
#include "rainscale/grid.hpp"
#include "rainscale/rng.hpp"

namespace rainscale {

/// Desk-scale dataset generator: moving/growing Gaussian rainstorms on the
/// fine grid with correlated pressure, moisture and temperature fields, plus
/// a static synthetic topography. The coarse stack is rendered from storm
/// centers jittered by up to `jitter_coarse_cells`, then block-mean
/// upscaled, so coarse and fine disagree in storm location.
struct SynthConfig {
  int coarse_ny = 64, coarse_nx = 128;
  int fine_ny = 0, fine_nx = 0;  // 0 = 4x coarse
  int steps = 400;
  std::uint64_t seed = 0;

  double storm_density = 0.6;        // expected storm births per timestep
  double jitter_coarse_cells = 2.0;  // max center offset, in coarse cells
  double amp_min = 5.0, amp_max = 14.0;     // peak rain rate, mm/3hr
  double sigma_min = 5.0, sigma_max = 16.0; // storm radius, fine cells
  int life_min = 3, life_max = 16;          // storm lifetime, timesteps
  double oro_gain = 0.6;  // orographic enhancement per unit normalized height

  void validate() const {
    require(coarse_ny > 0 && coarse_nx > 0 && steps > 0, errc::invalid_config,
            "grid shape and step count must be positive");
    const int fny = fine_ny > 0 ? fine_ny : kRefinementFactor * coarse_ny;
    const int fnx = fine_nx > 0 ? fine_nx : kRefinementFactor * coarse_nx;
    require(fny == kRefinementFactor * coarse_ny &&
                fnx == kRefinementFactor * coarse_nx,
            errc::invalid_config, "fine shape ", fny, "x", fnx,
            " must be exactly 4x the coarse shape ", coarse_ny, "x", coarse_nx);
    require(storm_density >= 0.0, errc::invalid_config, "storm_density < 0");
    require(amp_min <= amp_max && sigma_min <= sigma_max && sigma_min > 0,
            errc::invalid_config, "bad storm parameter ranges");
    require(life_min >= 1 && life_min <= life_max, errc::invalid_config,
            "bad lifetime range");
    require(jitter_coarse_cells >= 0.0, errc::invalid_config, "negative jitter");
  }

  static SynthConfig small() {
    SynthConfig c;
    c.coarse_ny = 32;
    c.coarse_nx = 64;
    c.steps = 400;
    return c;
  }

  static SynthConfig medium() {
    SynthConfig c;
    c.coarse_ny = 16;
    c.coarse_nx = 32;
    c.steps = 600;
    c.storm_density = 0.8;
    return c;
  }
};

namespace detail {

struct SynthStorm {
  int birth, life;
  double y0, x0;       // true center at birth, fine cells
  double vy, vx;       // drift per timestep, fine cells
  double jy, jx;       // center jitter used for the coarse rendering
  double amp;          // peak rain rate
  double sigma;        // base radius
};

/// Sinusoidal grow/decay envelope over the storm lifetime.
inline double life_envelope(double age, double life) {
  const double tau = (age + 0.5) / life;
  return std::sin(M_PI * std::clamp(tau, 0.0, 1.0));
}

inline GridField make_topography(int ny, int nx, Rng& rng) {
  GridField topo(Variable::topo, -1, ny, nx);
  struct Hill { double y, x, sy, sx, h; };
  std::vector<Hill> hills;
  for (int k = 0; k < 4; ++k) {
    Hill hill;
    hill.y = rng.uniform(0.15, 0.85) * ny;
    hill.x = rng.uniform(0.1, 0.9) * nx;
    hill.sy = rng.uniform(0.08, 0.2) * ny;
    hill.sx = rng.uniform(0.04, 0.12) * nx;
    hill.h = rng.uniform(0.4, 1.0);
    hills.push_back(hill);
  }
  double peak = 0.0;
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      double h = 0.0;
      for (const Hill& hill : hills) {
        const double dy = (y - hill.y) / hill.sy;
        const double dx = (x - hill.x) / hill.sx;
        h += hill.h * std::exp(-0.5 * (dy * dy + dx * dx));
      }
      topo.at(y, x) = h;
      peak = std::max(peak, h);
    }
  }
  const double scale = peak > 0 ? 3000.0 / peak : 0.0;
  for (double& v : topo.values) v *= scale;
  return topo;
}

}  // namespace detail

/// Generates a paired (coarse, fine) stack. Deterministic in the seed.
inline std::pair<GridStack, GridStack> synth_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const int fny = kRefinementFactor * cfg.coarse_ny;
  const int fnx = kRefinementFactor * cfg.coarse_nx;

  Rng rng(cfg.seed);
  GridField topo = detail::make_topography(fny, fnx, rng);

  // Pre-draw the storm population.
  const int n_storms =
      static_cast<int>(std::llround(cfg.storm_density * cfg.steps));
  std::vector<detail::SynthStorm> storms;
  storms.reserve(static_cast<std::size_t>(n_storms));
  const double jitter_fine = cfg.jitter_coarse_cells * kRefinementFactor;
  for (int k = 0; k < n_storms; ++k) {
    detail::SynthStorm s;
    s.birth = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.steps)));
    s.life = cfg.life_min +
             static_cast<int>(rng.below(
                 static_cast<std::uint64_t>(cfg.life_max - cfg.life_min + 1)));
    s.y0 = rng.uniform(0.0, fny);
    s.x0 = rng.uniform(0.0, fnx);
    s.vy = rng.uniform(-1.5, 1.5);
    s.vx = rng.uniform(-2.5, 2.5);
    s.jy = rng.uniform(-jitter_fine, jitter_fine);
    s.jx = rng.uniform(-jitter_fine, jitter_fine);
    s.amp = rng.uniform(cfg.amp_min, cfg.amp_max);
    s.sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
    storms.push_back(s);
  }

  const double topo_peak = 3000.0;
  auto oro = [&](int y, int x) {
    return 1.0 + cfg.oro_gain * topo.at(y, x) / topo_peak;
  };

  // Rain rate at fine cell, from either true or jittered centers.
  auto render_precip = [&](int t, bool jittered, GridField& out) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    for (const detail::SynthStorm& s : storms) {
      const int age = t - s.birth;
      if (age < 0 || age >= s.life) continue;
      const double env = detail::life_envelope(age, s.life);
      const double cy = s.y0 + s.vy * age + (jittered ? s.jy : 0.0);
      const double cx = s.x0 + s.vx * age + (jittered ? s.jx : 0.0);
      const double sigma = s.sigma * (0.7 + 0.6 * env);
      const double reach = 3.5 * sigma;
      const int ylo = std::max(0, static_cast<int>(std::floor(cy - reach)));
      const int yhi = std::min(fny - 1, static_cast<int>(std::ceil(cy + reach)));
      const int xlo = std::max(0, static_cast<int>(std::floor(cx - reach)));
      const int xhi = std::min(fnx - 1, static_cast<int>(std::ceil(cx + reach)));
      const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
      for (int y = ylo; y <= yhi; ++y) {
        for (int x = xlo; x <= xhi; ++x) {
          const double dy = y - cy;
          const double dx = x - cx;
          out.at(y, x) += s.amp * env * std::exp(-(dy * dy + dx * dx) * inv2s2);
        }
      }
    }
    for (int y = 0; y < fny; ++y)
      for (int x = 0; x < fnx; ++x) out.at(y, x) *= oro(y, x);
  };

  // Environmental fields are rendered at fine resolution from the jittered
  // centers, then block-mean upscaled into the coarse stack.
  auto render_environment = [&](int t, GridField& slp, GridField& iwv,
                                GridField& t2) {
    const double phase = 2.0 * M_PI * t / 64.0;
    const double diurnal = std::sin(2.0 * M_PI * t / 8.0);
    for (int y = 0; y < fny; ++y) {
      const double south = static_cast<double>(y) / fny;
      for (int x = 0; x < fnx; ++x) {
        const double lon = static_cast<double>(x) / fnx;
        slp.at(y, x) = 1015.0 + 6.0 * std::sin(2.0 * M_PI * lon + phase) +
                       3.0 * std::cos(2.0 * M_PI * south);
        iwv.at(y, x) = 18.0 + 30.0 * south + 8.0 * std::sin(phase);
        t2.at(y, x) = 265.0 + 30.0 * south + 5.0 * diurnal;
      }
    }
    for (const detail::SynthStorm& s : storms) {
      const int age = t - s.birth;
      if (age < 0 || age >= s.life) continue;
      const double env = detail::life_envelope(age, s.life);
      const double cy = s.y0 + s.vy * age + s.jy;
      const double cx = s.x0 + s.vx * age + s.jx;
      const double sigma = 2.0 * s.sigma;
      const double reach = 3.0 * sigma;
      const int ylo = std::max(0, static_cast<int>(std::floor(cy - reach)));
      const int yhi = std::min(fny - 1, static_cast<int>(std::ceil(cy + reach)));
      const int xlo = std::max(0, static_cast<int>(std::floor(cx - reach)));
      const int xhi = std::min(fnx - 1, static_cast<int>(std::ceil(cx + reach)));
      const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
      for (int y = ylo; y <= yhi; ++y) {
        for (int x = xlo; x <= xhi; ++x) {
          const double dy = y - cy;
          const double dx = x - cx;
          const double g = env * std::exp(-(dy * dy + dx * dx) * inv2s2);
          slp.at(y, x) -= 0.9 * s.amp * g;
          iwv.at(y, x) += 1.8 * s.amp * g;
          t2.at(y, x) -= 2.0 * g;
        }
      }
    }
  };

  GridStack fine;
  fine.tag = ResolutionTag::fine;
  fine.ny = fny;
  fine.nx = fnx;
  GridStack coarse;
  coarse.tag = ResolutionTag::coarse;
  coarse.ny = cfg.coarse_ny;
  coarse.nx = cfg.coarse_nx;
  for (int t = 0; t < cfg.steps; ++t) {
    fine.timesteps.push_back(t);
    coarse.timesteps.push_back(t);
  }
  fine.vars[Variable::topo].push_back(topo);

  GridField scratch(Variable::precip, 0, fny, fnx);
  GridField slp(Variable::slp, 0, fny, fnx);
  GridField iwv(Variable::iwv, 0, fny, fnx);
  GridField t2(Variable::t2, 0, fny, fnx);
  for (int t = 0; t < cfg.steps; ++t) {
    GridField fine_precip(Variable::precip, t, fny, fnx);
    render_precip(t, false, fine_precip);
    fine.vars[Variable::precip].push_back(std::move(fine_precip));

    render_precip(t, true, scratch);
    scratch.time_index = t;
    coarse.vars[Variable::precip].push_back(
        block_mean_upscale(scratch, kRefinementFactor));

    slp.time_index = iwv.time_index = t2.time_index = t;
    render_environment(t, slp, iwv, t2);
    coarse.vars[Variable::slp].push_back(block_mean_upscale(slp, kRefinementFactor));
    coarse.vars[Variable::iwv].push_back(block_mean_upscale(iwv, kRefinementFactor));
    coarse.vars[Variable::t2].push_back(block_mean_upscale(t2, kRefinementFactor));
  }
  return {std::move(coarse), std::move(fine)};
}

}  // namespace rainscale

#endif  // RAINSCALE_SYNTH_HPP_
