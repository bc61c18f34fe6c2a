#ifndef RAINSCALE_GRID_HPP_
#define RAINSCALE_GRID_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rainscale/error.hpp"
#include "rainscale/npy.hpp"
#include "rainscale/rng.hpp"

namespace rainscale {

// ---------------------------------------------------------------------------
// Variables and fields
// ---------------------------------------------------------------------------

enum class Variable { precip, slp, iwv, t2, topo };

inline const char* variable_name(Variable v) {
  switch (v) {
    case Variable::precip: return "precip";
    case Variable::slp: return "slp";
    case Variable::iwv: return "iwv";
    case Variable::t2: return "t2";
    case Variable::topo: return "topo";
  }
  return "?";
}

inline const char* variable_units(Variable v) {
  switch (v) {
    case Variable::precip: return "mm/3hr";
    case Variable::slp: return "hPa";
    case Variable::iwv: return "cm";
    case Variable::t2: return "K";
    case Variable::topo: return "m";
  }
  return "?";
}

inline Variable parse_variable(const std::string& name) {
  if (name == "precip") return Variable::precip;
  if (name == "slp") return Variable::slp;
  if (name == "iwv") return Variable::iwv;
  if (name == "t2") return Variable::t2;
  if (name == "topo") return Variable::topo;
  fail(errc::unknown_variable, "no such variable: ", name);
}

/// One 2-D gridded physical variable at one timestep. TOPO is static and
/// carries time_index -1.
struct GridField {
  Variable variable = Variable::precip;
  int time_index = 0;
  int ny = 0, nx = 0;
  std::vector<double> values;  // row-major, ny*nx

  GridField() = default;
  GridField(Variable var, int t, int ny_, int nx_, double fill = 0.0)
      : variable(var), time_index(t), ny(ny_), nx(nx_),
        values(static_cast<std::size_t>(ny_) * nx_, fill) {}

  double& at(int y, int x) { return values[static_cast<std::size_t>(y) * nx + x]; }
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * nx + x]; }
  std::size_t size() const { return values.size(); }
};

enum class ResolutionTag { coarse, fine };

inline const char* resolution_name(ResolutionTag t) {
  return t == ResolutionTag::coarse ? "COARSE" : "FINE";
}

/// Paired low/high-resolution grids use a fixed 4x refinement.
inline constexpr int kRefinementFactor = 4;

/// A time-indexed multi-variable collection of grid fields at one resolution.
struct GridStack {
  ResolutionTag tag = ResolutionTag::coarse;
  int ny = 0, nx = 0;
  std::vector<int> timesteps;
  std::map<Variable, std::vector<GridField>> vars;  // topo series has size 1

  bool has(Variable v) const { return vars.count(v) != 0; }

  const GridField& field(Variable v, std::size_t pos) const {
    auto it = vars.find(v);
    require(it != vars.end(), errc::missing_variable, variable_name(v),
            " not present in ", resolution_name(tag), " stack");
    if (v == Variable::topo) return it->second.front();
    return it->second.at(pos);
  }

  GridField& field(Variable v, std::size_t pos) {
    return const_cast<GridField&>(
        static_cast<const GridStack*>(this)->field(v, pos));
  }

  std::size_t steps() const { return timesteps.size(); }

  bool has_dynamic() const {
    for (const auto& [v, s] : vars)
      if (v != Variable::topo && !s.empty()) return true;
    return false;
  }

  /// Checks the stack invariants: consistent shapes, lockstep timestep lists,
  /// finite values, static topo.
  void validate() const {
    for (const auto& [v, series] : vars) {
      if (v == Variable::topo) {
        require(series.size() == 1, errc::shape_mismatch,
                "topo must be a single static field");
        require(series.front().time_index == -1, errc::shape_mismatch,
                "topo must carry time_index -1");
      } else {
        require(series.size() == timesteps.size(), errc::shape_mismatch,
                variable_name(v), " series has ", series.size(),
                " fields for ", timesteps.size(), " timesteps");
      }
      for (std::size_t i = 0; i < series.size(); ++i) {
        const GridField& f = series[i];
        require(f.ny == ny && f.nx == nx, errc::shape_mismatch,
                variable_name(v), "[", i, "] is ", f.ny, "x", f.nx,
                ", stack is ", ny, "x", nx);
        if (v != Variable::topo)
          require(f.time_index == timesteps[i], errc::shape_mismatch,
                  variable_name(v), "[", i, "] time_index out of lockstep");
        for (std::size_t k = 0; k < f.values.size(); ++k) {
          if (!std::isfinite(f.values[k]))
            fail(errc::non_finite_value, variable_name(v), " at (t=",
                 f.time_index, ", y=", k / f.nx, ", x=", k % f.nx, ")");
        }
      }
    }
  }
};

/// Checks the 4x pairing invariant between a coarse and a fine stack.
inline void validate_pair(const GridStack& coarse, const GridStack& fine) {
  require(fine.ny == kRefinementFactor * coarse.ny &&
              fine.nx == kRefinementFactor * coarse.nx,
          errc::shape_mismatch, "fine grid ", fine.ny, "x", fine.nx,
          " is not 4x coarse grid ", coarse.ny, "x", coarse.nx);
  if (coarse.has_dynamic() && fine.has_dynamic())
    require(fine.timesteps == coarse.timesteps, errc::time_misalignment,
            "coarse and fine stacks disagree on timesteps");
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Min-max bounds per variable plus the precipitation floor/cap rules.
/// Default bounds follow the physical ranges of the study variables; the
/// precipitation bound covers both the coarse input and fine output range.
struct NormalizationSpec {
  struct Bounds {
    double min = 0.0, max = 1.0;
  };

  std::map<Variable, Bounds> bounds;
  double precip_floor = 0.05;         // mm/3hr
  double precip_cap_quantile = 0.995;
  int cap_ny = 0, cap_nx = 0;
  std::vector<double> precip_caps;    // per-cell, fitted on the training period

  static NormalizationSpec defaults() {
    NormalizationSpec s;
    s.bounds[Variable::precip] = {0.05, 15.66};
    s.bounds[Variable::slp] = {990.97, 1039.34};
    s.bounds[Variable::iwv] = {1.56, 116.46};
    s.bounds[Variable::t2] = {241.75, 310.35};
    s.bounds[Variable::topo] = {0.0, 3204.51};
    return s;
  }

  const Bounds& bounds_for(Variable v) const {
    auto it = bounds.find(v);
    require(it != bounds.end(), errc::unknown_variable,
            "no normalization bounds for ", variable_name(v));
    require(it->second.min < it->second.max, errc::invalid_config,
            "bounds must satisfy min < max for ", variable_name(v));
    return it->second;
  }

  bool has_caps() const { return !precip_caps.empty(); }
};

/// Linear-interpolation quantile of an unsorted sample (the numpy default).
inline double interpolated_quantile(std::vector<double> sample, double q) {
  require(!sample.empty(), errc::empty_series, "quantile of empty sample");
  std::sort(sample.begin(), sample.end());
  if (sample.size() == 1) return sample[0];
  const double h = q * static_cast<double>(sample.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= sample.size()) return sample.back();
  const double frac = h - static_cast<double>(lo);
  return sample[lo] + frac * (sample[lo + 1] - sample[lo]);
}

/// Fits the per-cell precipitation caps from the given (training-period)
/// fields and stores them in the spec.
inline void fit_precip_caps(const std::vector<const GridField*>& train_fields,
                            NormalizationSpec& spec) {
  require(!train_fields.empty(), errc::empty_series,
          "no training fields for cap fitting");
  const int ny = train_fields.front()->ny;
  const int nx = train_fields.front()->nx;
  spec.cap_ny = ny;
  spec.cap_nx = nx;
  spec.precip_caps.assign(static_cast<std::size_t>(ny) * nx, 0.0);
  std::vector<double> cell(train_fields.size());
  for (std::size_t c = 0; c < spec.precip_caps.size(); ++c) {
    for (std::size_t t = 0; t < train_fields.size(); ++t) {
      require(train_fields[t]->ny == ny && train_fields[t]->nx == nx,
              errc::shape_mismatch, "cap fitting fields disagree in shape");
      cell[t] = train_fields[t]->values[c];
    }
    spec.precip_caps[c] = interpolated_quantile(cell, spec.precip_cap_quantile);
  }
}

inline void fit_precip_caps(const std::vector<GridField>& series,
                            const std::vector<int>& fit_positions,
                            NormalizationSpec& spec) {
  std::vector<const GridField*> ptrs;
  ptrs.reserve(fit_positions.size());
  for (int p : fit_positions) ptrs.push_back(&series.at(static_cast<std::size_t>(p)));
  fit_precip_caps(ptrs, spec);
}

/// Floor-and-cap preprocessing of a raw precipitation series. Values below
/// the floor become 0; values above the per-cell cap are clamped. Caps are
/// fitted from this series if the spec does not carry them yet.
inline std::vector<GridField> preprocess_precip(const std::vector<GridField>& series,
                                                NormalizationSpec& spec) {
  if (!spec.has_caps() && !series.empty()) {
    std::vector<const GridField*> all;
    all.reserve(series.size());
    for (const GridField& f : series) all.push_back(&f);
    fit_precip_caps(all, spec);
  }
  std::vector<GridField> out;
  out.reserve(series.size());
  for (const GridField& f : series) {
    require(spec.cap_ny == f.ny && spec.cap_nx == f.nx, errc::shape_mismatch,
            "cap array shape does not match field");
    GridField g = f;
    for (std::size_t i = 0; i < g.values.size(); ++i) {
      const double v = g.values[i];
      require(v >= 0.0, errc::negative_input, "negative precipitation ", v,
              " at (t=", g.time_index, ", y=", i / g.nx, ", x=", i % g.nx, ")");
      if (v < spec.precip_floor)
        g.values[i] = 0.0;
      else
        g.values[i] = std::min(v, spec.precip_caps[i]);
    }
    out.push_back(std::move(g));
  }
  return out;
}

enum class NormalizeDirection { forward, inverse };

/// Linear map between physical units and [0,1]. The inverse clamps its input
/// to [0,1] first; the forward map is a pure affine function.
inline GridField normalize(const GridField& field, const NormalizationSpec& spec,
                           NormalizeDirection direction) {
  const auto& b = spec.bounds_for(field.variable);
  const double span = b.max - b.min;
  GridField out = field;
  if (direction == NormalizeDirection::forward) {
    for (double& v : out.values) v = (v - b.min) / span;
  } else {
    for (double& v : out.values) {
      const double u = std::clamp(v, 0.0, 1.0);
      v = b.min + u * span;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Coarsens a field by averaging factor x factor blocks. Conserves the domain
/// mean exactly up to rounding.
inline GridField block_mean_upscale(const GridField& field, int factor) {
  require(factor >= 1, errc::invalid_config, "factor must be >= 1");
  require(field.ny % factor == 0 && field.nx % factor == 0,
          errc::non_divisible_shape, field.ny, "x", field.nx,
          " not divisible by ", factor);
  GridField out(field.variable, field.time_index, field.ny / factor,
                field.nx / factor);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int y = 0; y < out.ny; ++y) {
    for (int x = 0; x < out.nx; ++x) {
      double sum = 0.0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          sum += field.at(y * factor + dy, x * factor + dx);
      out.at(y, x) = sum * inv;
    }
  }
  return out;
}

/// Bilinear resampling with the cell-center convention. Sample coordinates
/// beyond the first/last cell center are clamped, so output values never
/// leave [min(field), max(field)].
inline GridField bilinear_resample(const GridField& field, int target_ny,
                                   int target_nx) {
  require(target_ny >= field.ny && target_nx >= field.nx, errc::invalid_target,
          "target ", target_ny, "x", target_nx, " smaller than source ",
          field.ny, "x", field.nx);
  GridField out(field.variable, field.time_index, target_ny, target_nx);
  const double sy = static_cast<double>(field.ny) / target_ny;
  const double sx = static_cast<double>(field.nx) / target_nx;
  for (int y = 0; y < target_ny; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(field.ny - 1));
    const int y0 = std::min(static_cast<int>(fy), field.ny - 2 >= 0 ? field.ny - 2 : 0);
    const double wy = fy - y0;
    for (int x = 0; x < target_nx; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(field.nx - 1));
      const int x0 = std::min(static_cast<int>(fx), field.nx - 2 >= 0 ? field.nx - 2 : 0);
      const double wx = fx - x0;
      const double v00 = field.at(y0, x0);
      const double v01 = field.at(y0, std::min(x0 + 1, field.nx - 1));
      const double v10 = field.at(std::min(y0 + 1, field.ny - 1), x0);
      const double v11 =
          field.at(std::min(y0 + 1, field.ny - 1), std::min(x0 + 1, field.nx - 1));
      out.at(y, x) = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                     wy * ((1 - wx) * v10 + wx * v11);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporal split
// ---------------------------------------------------------------------------

/// How to partition a stack into train/validation/test timesteps.
struct SplitScheme {
  enum class Mode { calendar, fraction };
  Mode mode = Mode::calendar;
  // Calendar mode: time indices are 3-hour steps from Jan 1 of a 365-day
  // year; the test period is Oct-Dec.
  int calendar_test_start = 2184;  // 273 days * 8 steps
  // Fraction mode: the final test_fraction of timesteps form the test set.
  double test_fraction = 0.25;
  double val_fraction = 0.10;
  std::uint64_t seed = 0;
};

struct TemporalSplit {
  std::vector<int> train, val, test;  // positions into stack.timesteps
};

inline TemporalSplit temporal_split(const GridStack& stack, const SplitScheme& scheme) {
  const std::size_t n = stack.timesteps.size();
  require(n > 0, errc::empty_partition, "stack has no timesteps");
  std::vector<int> span, test;
  if (scheme.mode == SplitScheme::Mode::calendar) {
    for (std::size_t i = 0; i < n; ++i) {
      if (stack.timesteps[i] >= scheme.calendar_test_start)
        test.push_back(static_cast<int>(i));
      else
        span.push_back(static_cast<int>(i));
    }
  } else {
    require(scheme.test_fraction > 0.0 && scheme.test_fraction < 1.0,
            errc::invalid_config, "test_fraction must be in (0,1)");
    const std::size_t n_test = std::max<std::size_t>(
        1, static_cast<std::size_t>(scheme.test_fraction * static_cast<double>(n)));
    for (std::size_t i = 0; i < n; ++i) {
      if (i + n_test >= n)
        test.push_back(static_cast<int>(i));
      else
        span.push_back(static_cast<int>(i));
    }
  }
  require(!span.empty(), errc::empty_partition, "train partition is empty");
  require(!test.empty(), errc::empty_partition, "test partition is empty");

  std::vector<int> shuffled = span;
  Rng rng(scheme.seed);
  rng.shuffle(shuffled);
  const std::size_t n_val =
      static_cast<std::size_t>(scheme.val_fraction * static_cast<double>(span.size()));
  TemporalSplit split;
  split.val.assign(shuffled.begin(), shuffled.begin() + static_cast<long>(n_val));
  split.train.assign(shuffled.begin() + static_cast<long>(n_val), shuffled.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.train.begin(), split.train.end());
  split.test = std::move(test);
  require(!split.train.empty(), errc::empty_partition, "train partition is empty");
  return split;
}

// ---------------------------------------------------------------------------
// Regions
// ---------------------------------------------------------------------------

enum class Region { conus, ne, se, mw, sw, nw, ngp, sgp };

inline const char* region_name(Region r) {
  switch (r) {
    case Region::conus: return "CONUS";
    case Region::ne: return "NE";
    case Region::se: return "SE";
    case Region::mw: return "MW";
    case Region::sw: return "SW";
    case Region::nw: return "NW";
    case Region::ngp: return "NGP";
    case Region::sgp: return "SGP";
  }
  return "?";
}

struct RegionMask {
  Region region = Region::conus;
  int ny = 0, nx = 0;
  std::vector<std::uint8_t> mask;
  std::size_t cell_count = 0;

  RegionMask() = default;
  RegionMask(Region r, int ny_, int nx_)
      : region(r), ny(ny_), nx(nx_),
        mask(static_cast<std::size_t>(ny_) * nx_, 0) {}

  void finish() { cell_count = static_cast<std::size_t>(
      std::count(mask.begin(), mask.end(), std::uint8_t{1})); }

  bool at(int y, int x) const { return mask[static_cast<std::size_t>(y) * nx + x] != 0; }
};

inline RegionMask full_mask(int ny, int nx) {
  RegionMask m(Region::conus, ny, nx);
  std::fill(m.mask.begin(), m.mask.end(), std::uint8_t{1});
  m.finish();
  return m;
}

/// Deterministic rectangular stand-ins for the seven assessment subregions on
/// a row-column grid (row 0 is the northern edge). The subregions tile the
/// grid; CONUS is their union.
inline std::vector<RegionMask> nca_region_masks(int ny, int nx) {
  auto column = [](int x, int nx_, int parts) {
    return std::min(parts - 1, x * parts / nx_);
  };
  std::vector<RegionMask> masks;
  for (Region r : {Region::conus, Region::ne, Region::se, Region::mw, Region::sw,
                   Region::nw, Region::ngp, Region::sgp})
    masks.emplace_back(r, ny, nx);
  for (int y = 0; y < ny; ++y) {
    const bool north = y < ny / 2;
    for (int x = 0; x < nx; ++x) {
      Region r;
      if (north) {
        switch (column(x, nx, 4)) {
          case 0: r = Region::nw; break;
          case 1: r = Region::ngp; break;
          case 2: r = Region::mw; break;
          default: r = Region::ne; break;
        }
      } else {
        switch (column(x, nx, 3)) {
          case 0: r = Region::sw; break;
          case 1: r = Region::sgp; break;
          default: r = Region::se; break;
        }
      }
      for (RegionMask& m : masks)
        if (m.region == r || m.region == Region::conus)
          m.mask[static_cast<std::size_t>(y) * nx + x] = 1;
    }
  }
  for (RegionMask& m : masks) m.finish();
  return masks;
}

/// Masked values in row-major order. A zero-cell mask yields an empty list.
inline std::vector<double> region_extract(const GridField& field,
                                          const RegionMask& mask) {
  require(field.ny == mask.ny && field.nx == mask.nx, errc::shape_mismatch,
          "mask ", mask.ny, "x", mask.nx, " vs field ", field.ny, "x", field.nx);
  std::vector<double> out;
  out.reserve(mask.cell_count);
  for (std::size_t i = 0; i < field.values.size(); ++i)
    if (mask.mask[i]) out.push_back(field.values[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Stack I/O: NPY arrays plus a plain-text manifest
// ---------------------------------------------------------------------------

struct LoadedStacks {
  std::optional<GridStack> coarse;
  std::optional<GridStack> fine;

  GridStack& get(ResolutionTag tag) {
    auto& slot = tag == ResolutionTag::coarse ? coarse : fine;
    require(slot.has_value(), errc::missing_variable, "dataset has no ",
            resolution_name(tag), " stack");
    return *slot;
  }
};

namespace detail {

inline std::string timesteps_to_ranges(const std::vector<int>& ts) {
  std::ostringstream os;
  std::size_t i = 0;
  while (i < ts.size()) {
    std::size_t j = i;
    while (j + 1 < ts.size() && ts[j + 1] == ts[j] + 1) ++j;
    if (i) os << ",";
    if (j > i)
      os << ts[i] << "-" << ts[j];
    else
      os << ts[i];
    i = j + 1;
  }
  return os.str();
}

inline std::vector<int> ranges_to_timesteps(const std::string& text) {
  std::vector<int> out;
  std::istringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    const std::size_t dash = tok.find('-', 1);  // allow leading minus
    if (dash == std::string::npos) {
      out.push_back(std::stoi(tok));
    } else {
      const int a = std::stoi(tok.substr(0, dash));
      const int b = std::stoi(tok.substr(dash + 1));
      require(b >= a, errc::io_failure, "bad timestep range: ", tok);
      for (int t = a; t <= b; ++t) out.push_back(t);
    }
  }
  return out;
}

struct ManifestEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::string dtype;
  std::string units;
  std::string path;
};

struct ManifestSection {
  std::string tag;
  std::vector<int> timesteps;
  std::vector<ManifestEntry> entries;
};

inline std::vector<ManifestSection> read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  require(in.good(), errc::io_failure, "cannot open manifest: ", file.string());
  std::vector<ManifestSection> sections;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string first;
    ls >> first;
    if (first == "stack") {
      ManifestSection s;
      ls >> s.tag;
      require(s.tag == "COARSE" || s.tag == "FINE", errc::io_failure,
              "unknown stack tag in manifest: ", s.tag);
      sections.push_back(std::move(s));
    } else if (first == "timesteps") {
      require(!sections.empty(), errc::io_failure,
              "timesteps line before any stack section");
      std::string rest;
      ls >> rest;
      sections.back().timesteps = ranges_to_timesteps(rest);
    } else {
      require(!sections.empty(), errc::io_failure,
              "variable line before any stack section");
      ManifestEntry e;
      e.name = first;
      std::string shape_text;
      ls >> shape_text >> e.dtype >> e.units >> e.path;
      require(!e.path.empty(), errc::io_failure, "malformed manifest line: ", line);
      std::istringstream ds(shape_text);
      std::string d;
      while (std::getline(ds, d, ',')) e.shape.push_back(std::stoull(d));
      sections.back().entries.push_back(std::move(e));
    }
  }
  return sections;
}

inline void write_manifest(const std::filesystem::path& file,
                           const std::vector<ManifestSection>& sections) {
  std::ofstream out(file, std::ios::trunc);
  require(out.good(), errc::io_failure, "cannot write manifest: ", file.string());
  out << "# rainscale grid stack manifest\n";
  out << "# <variable> <shape> <dtype> <units> <path>\n";
  for (const auto& s : sections) {
    out << "stack " << s.tag << "\n";
    out << "timesteps " << timesteps_to_ranges(s.timesteps) << "\n";
    for (const auto& e : s.entries) {
      out << e.name << " ";
      for (std::size_t i = 0; i < e.shape.size(); ++i)
        out << e.shape[i] << (i + 1 < e.shape.size() ? "," : "");
      out << " " << e.dtype << " " << e.units << " " << e.path << "\n";
    }
  }
  out.flush();
  require(out.good(), errc::io_failure, "manifest write failed: ", file.string());
}

}  // namespace detail

/// Writes a stack into `dir` as one NPY file per variable plus manifest.txt.
/// A manifest section for the other resolution, if already present, is kept,
/// so a coarse/fine pair can share one directory.
inline void save_grid_stack(const GridStack& stack, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.txt";

  std::vector<detail::ManifestSection> sections;
  if (fs::exists(manifest_path)) {
    for (auto& s : detail::read_manifest(manifest_path))
      if (s.tag != resolution_name(stack.tag)) sections.push_back(std::move(s));
  }

  detail::ManifestSection sec;
  sec.tag = resolution_name(stack.tag);
  sec.timesteps = stack.timesteps;
  const std::string suffix = stack.tag == ResolutionTag::coarse ? "_coarse" : "_fine";
  for (const auto& [v, series] : stack.vars) {
    detail::ManifestEntry e;
    e.name = variable_name(v);
    e.dtype = "<f8";
    e.units = variable_units(v);
    e.path = e.name + suffix + ".npy";
    std::vector<double> flat;
    if (v == Variable::topo) {
      e.shape = {static_cast<std::size_t>(stack.ny), static_cast<std::size_t>(stack.nx)};
      flat = series.front().values;
    } else {
      e.shape = {series.size(), static_cast<std::size_t>(stack.ny),
                 static_cast<std::size_t>(stack.nx)};
      flat.reserve(series.size() * stack.ny * stack.nx);
      for (const GridField& f : series)
        flat.insert(flat.end(), f.values.begin(), f.values.end());
    }
    npy::save((root / e.path).string(), e.shape, flat.data());
    sec.entries.push_back(std::move(e));
  }
  sections.push_back(std::move(sec));
  detail::write_manifest(manifest_path, sections);
}

/// Loads the stack(s) described by `dir`/manifest.txt. All variables are
/// validated: shapes must agree within a stack, values must be finite, and a
/// coarse/fine pair must satisfy the 4x relation.
inline LoadedStacks load_grid_stack(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const auto sections = detail::read_manifest(root / "manifest.txt");
  require(!sections.empty(), errc::io_failure, "manifest has no stack sections");

  LoadedStacks out;
  for (const auto& sec : sections) {
    GridStack stack;
    stack.tag = sec.tag == "COARSE" ? ResolutionTag::coarse : ResolutionTag::fine;
    stack.timesteps = sec.timesteps;
    for (const auto& e : sec.entries) {
      const Variable v = parse_variable(e.name);
      const fs::path file = root / e.path;
      require(fs::exists(file), errc::missing_variable, "variable ", e.name,
              " listed in manifest but file is missing: ", file.string());
      npy::Array arr = npy::load(file.string());
      require(arr.shape == e.shape, errc::shape_mismatch, "manifest shape for ",
              e.name, " does not match stored array in ", file.string());
      int ny, nx;
      std::size_t nt;
      if (v == Variable::topo) {
        require(arr.shape.size() == 2, errc::shape_mismatch,
                "topo must be a 2-D array: ", file.string());
        nt = 1;
        ny = static_cast<int>(arr.shape[0]);
        nx = static_cast<int>(arr.shape[1]);
      } else {
        require(arr.shape.size() == 3, errc::shape_mismatch, e.name,
                " must be a [T,ny,nx] array: ", file.string());
        nt = arr.shape[0];
        ny = static_cast<int>(arr.shape[1]);
        nx = static_cast<int>(arr.shape[2]);
        require(nt == sec.timesteps.size(), errc::shape_mismatch, e.name, " has ",
                nt, " steps for ", sec.timesteps.size(), " manifest timesteps");
      }
      if (stack.ny == 0) {
        stack.ny = ny;
        stack.nx = nx;
      } else if (v != Variable::topo) {
        require(ny == stack.ny && nx == stack.nx, errc::shape_mismatch, e.name,
                " is ", ny, "x", nx, " but stack is ", stack.ny, "x", stack.nx);
      }

      const std::size_t per = static_cast<std::size_t>(ny) * nx;
      std::vector<GridField>& series = stack.vars[v];
      for (std::size_t t = 0; t < nt; ++t) {
        GridField f(v, v == Variable::topo ? -1 : sec.timesteps[t], ny, nx);
        std::copy(arr.data.begin() + static_cast<long>(t * per),
                  arr.data.begin() + static_cast<long>((t + 1) * per),
                  f.values.begin());
        for (std::size_t k = 0; k < per; ++k) {
          if (!std::isfinite(f.values[k]))
            fail(errc::non_finite_value, e.name, " in ", file.string(), " at (t=",
                 t, ", y=", k / f.nx, ", x=", k % f.nx, ")");
        }
        series.push_back(std::move(f));
      }
    }
    // Topo may legitimately sit at fine resolution in a coarse section's
    // directory; the manifest keeps it under the FINE stack instead, so here
    // shapes within the section must agree.
    stack.validate();
    if (stack.tag == ResolutionTag::coarse)
      out.coarse = std::move(stack);
    else
      out.fine = std::move(stack);
  }
  if (out.coarse && out.fine) validate_pair(*out.coarse, *out.fine);
  return out;
}

}  // namespace rainscale

#endif  // RAINSCALE_GRID_HPP_
