#ifndef RAINSCALE_MODEL_HPP_
#define RAINSCALE_MODEL_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rainscale/blocks.hpp"
#include "rainscale/grid.hpp"
#include "rainscale/npy.hpp"
#include "rainscale/tensor.hpp"

namespace rainscale {

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

enum class GeneratorKind { direct, encoded, sr };

inline const char* generator_kind_name(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::direct: return "direct";
    case GeneratorKind::encoded: return "encoded";
    case GeneratorKind::sr: return "sr";
  }
  return "?";
}

inline GeneratorKind parse_generator_kind(const std::string& s) {
  if (s == "direct") return GeneratorKind::direct;
  if (s == "encoded") return GeneratorKind::encoded;
  if (s == "sr") return GeneratorKind::sr;
  fail(errc::invalid_spec, "unknown generator kind: ", s);
}

/// Architecture description for the generator variants. Direct and Encoded
/// consume the four coarse variables plus fine topography; SR consumes
/// coarse precipitation only. All kinds emit one fine precipitation channel
/// at 4x resolution via two x2 upsampling stages.
struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::direct;
  int trunk_stages = 3;
  std::array<int, 3> inception_branches{8, 8, 8};
  int encoder_channels = 16;
  int attn_reduction = 4;
  int spatial_kernel = 7;
  int upsample_channels = 16;
  int topo_channels = 8;

  int trunk_channels() const {
    return inception_branches[0] + inception_branches[1] + inception_branches[2];
  }

  bool uses_topo() const { return kind != GeneratorKind::sr; }

  void validate() const {
    require(trunk_stages >= 1, errc::invalid_spec, "trunk_stages must be >= 1");
    require(trunk_channels() > 0, errc::invalid_spec, "empty inception branches");
    require(trunk_channels() % attn_reduction == 0, errc::invalid_spec,
            "attn_reduction must divide the trunk width");
    require(upsample_channels > 0 && topo_channels > 0 && encoder_channels > 0,
            errc::invalid_spec, "channel widths must be positive");
    require(spatial_kernel % 2 == 1, errc::invalid_spec,
            "spatial kernel must be odd");
    if (kind == GeneratorKind::encoded)
      require((4 * encoder_channels) % attn_reduction == 0, errc::invalid_spec,
              "attn_reduction must divide the stacked encoder width");
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "kind=" << generator_kind_name(kind)
       << ";trunk_stages=" << trunk_stages << ";branches="
       << inception_branches[0] << "," << inception_branches[1] << ","
       << inception_branches[2] << ";encoder_channels=" << encoder_channels
       << ";attn_reduction=" << attn_reduction
       << ";spatial_kernel=" << spatial_kernel
       << ";upsample_channels=" << upsample_channels
       << ";topo_channels=" << topo_channels;
    return os.str();
  }

  static GeneratorSpec parse(const std::string& text) {
    GeneratorSpec spec;
    std::istringstream ss(text);
    std::string kv;
    while (std::getline(ss, kv, ';')) {
      const std::size_t eq = kv.find('=');
      require(eq != std::string::npos, errc::invalid_spec, "bad spec token: ", kv);
      const std::string key = kv.substr(0, eq);
      const std::string val = kv.substr(eq + 1);
      if (key == "kind") {
        spec.kind = parse_generator_kind(val);
      } else if (key == "trunk_stages") {
        spec.trunk_stages = std::stoi(val);
      } else if (key == "branches") {
        std::istringstream bs(val);
        std::string b;
        for (int i = 0; i < 3 && std::getline(bs, b, ','); ++i)
          spec.inception_branches[static_cast<std::size_t>(i)] = std::stoi(b);
      } else if (key == "encoder_channels") {
        spec.encoder_channels = std::stoi(val);
      } else if (key == "attn_reduction") {
        spec.attn_reduction = std::stoi(val);
      } else if (key == "spatial_kernel") {
        spec.spatial_kernel = std::stoi(val);
      } else if (key == "upsample_channels") {
        spec.upsample_channels = std::stoi(val);
      } else if (key == "topo_channels") {
        spec.topo_channels = std::stoi(val);
      } else {
        fail(errc::invalid_spec, "unknown spec key: ", key);
      }
    }
    spec.validate();
    return spec;
  }
};

/// Coarse variables consumed by a generator kind, in channel order.
inline std::vector<Variable> generator_input_variables(GeneratorKind kind) {
  if (kind == GeneratorKind::sr) return {Variable::precip};
  return {Variable::precip, Variable::slp, Variable::iwv, Variable::t2};
}

/// Critic architecture: strided conv stack ending in a scalar score.
struct DiscriminatorSpec {
  std::vector<int> widths{16, 32, 64, 64};
  int kernel = 3;

  void validate() const {
    require(!widths.empty(), errc::invalid_spec, "empty conv stack");
    for (int w : widths)
      require(w > 0, errc::invalid_spec, "conv widths must be positive");
    require(kernel % 2 == 1, errc::invalid_spec, "kernel must be odd");
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "widths=";
    for (std::size_t i = 0; i < widths.size(); ++i)
      os << widths[i] << (i + 1 < widths.size() ? "," : "");
    os << ";kernel=" << kernel;
    return os.str();
  }

  static DiscriminatorSpec parse(const std::string& text) {
    DiscriminatorSpec spec;
    spec.widths.clear();
    std::istringstream ss(text);
    std::string kv;
    while (std::getline(ss, kv, ';')) {
      const std::size_t eq = kv.find('=');
      require(eq != std::string::npos, errc::invalid_spec, "bad spec token: ", kv);
      const std::string key = kv.substr(0, eq);
      const std::string val = kv.substr(eq + 1);
      if (key == "widths") {
        std::istringstream ws(val);
        std::string w;
        while (std::getline(ws, w, ',')) spec.widths.push_back(std::stoi(w));
      } else if (key == "kernel") {
        spec.kernel = std::stoi(val);
      } else {
        fail(errc::invalid_spec, "unknown spec key: ", key);
      }
    }
    spec.validate();
    return spec;
  }
};

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

class Generator {
 public:
  Generator(const GeneratorSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    Rng rng(seed);
    const int trunk_c = spec_.trunk_channels();

    if (spec_.kind == GeneratorKind::encoded) {
      const auto inputs = generator_input_variables(spec_.kind);
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        BlockSpec enc;
        enc.kind = BlockSpec::Kind::encoder;
        enc.in_channels = 1;
        enc.out_channels = spec_.encoder_channels;
        encoders_.emplace_back("g.enc" + std::to_string(i), enc, rng);
        BlockSpec sa;
        sa.kind = BlockSpec::Kind::spatial_attn;
        sa.in_channels = spec_.encoder_channels;
        sa.spatial_kernel = spec_.spatial_kernel;
        encoder_sa_.emplace_back("g.enc" + std::to_string(i) + ".sa", sa, rng);
      }
      BlockSpec ca;
      ca.kind = BlockSpec::Kind::channel_attn;
      ca.in_channels = 4 * spec_.encoder_channels;
      ca.reduction = spec_.attn_reduction;
      stack_ca_ = ChannelAttention("g.stack.ca", ca, rng);
    }

    int in_c = trunk_input_channels();
    for (int s = 0; s < spec_.trunk_stages; ++s) {
      const std::string base = "g.stage" + std::to_string(s);
      BlockSpec inc;
      inc.kind = BlockSpec::Kind::inception;
      inc.in_channels = in_c;
      inc.out_channels = trunk_c;
      inc.branches = spec_.inception_branches;
      trunk_.emplace_back(base + ".inc", inc, rng);
      BlockSpec ca;
      ca.kind = BlockSpec::Kind::channel_attn;
      ca.in_channels = trunk_c;
      ca.reduction = spec_.attn_reduction;
      trunk_ca_.emplace_back(base + ".ca", ca, rng);
      BlockSpec sa;
      sa.kind = BlockSpec::Kind::spatial_attn;
      sa.in_channels = trunk_c;
      sa.spatial_kernel = spec_.spatial_kernel;
      trunk_sa_.emplace_back(base + ".sa", sa, rng);
      in_c = trunk_c;
    }

    BlockSpec up1;
    up1.kind = BlockSpec::Kind::upsample;
    up1.in_channels = trunk_c;
    up1.out_channels = spec_.upsample_channels;
    up1_ = UpsampleStage("g.up1", up1, rng);
    BlockSpec up2;
    up2.kind = BlockSpec::Kind::upsample;
    up2.in_channels = spec_.upsample_channels;
    up2.out_channels = spec_.upsample_channels;
    up2_ = UpsampleStage("g.up2", up2, rng);

    int head_c = spec_.upsample_channels;
    if (spec_.uses_topo()) {
      BlockSpec tenc;
      tenc.kind = BlockSpec::Kind::encoder;
      tenc.in_channels = 1;
      tenc.out_channels = spec_.topo_channels;
      topo_encoder_ = VariableEncoder("g.topo", tenc, rng);
      head_c += spec_.topo_channels;
    }
    out_conv_ = Conv2dLayer("g.out", head_c, 1, 3, 1, 1, rng);
  }

  const GeneratorSpec& spec() const { return spec_; }

  /// Forward pass. `vars` holds one normalized (n,1,hc,wc) tensor per input
  /// variable in generator_input_variables() order; `topo` is the normalized
  /// (1,1,hf,wf) fine topography (ignored by SR). Output is (n,1,4hc,4wc)
  /// normalized precipitation passed through a final relu.
  Tensor forward(Tape& t, const std::vector<Tensor>& vars, const Tensor* topo) {
    const auto expect = generator_input_variables(spec_.kind);
    require(vars.size() == expect.size(), errc::shape_mismatch, "generator expects ",
            expect.size(), " input variables, got ", vars.size());
    for (const Tensor& v : vars)
      require(v.shape().c == 1, errc::shape_mismatch,
              "per-variable inputs must have one channel");

    Tensor x;
    if (spec_.kind == GeneratorKind::encoded) {
      std::vector<Tensor> feats;
      for (std::size_t i = 0; i < vars.size(); ++i)
        feats.push_back(encoder_sa_[i].forward(t, encoders_[i].forward(t, vars[i])));
      x = stack_ca_.forward(t, concat_channels(feats));
    } else if (spec_.kind == GeneratorKind::direct) {
      x = concat_channels(vars);
    } else {
      x = vars[0];
    }

    for (int s = 0; s < spec_.trunk_stages; ++s) {
      x = trunk_[static_cast<std::size_t>(s)].forward(t, x);
      x = trunk_ca_[static_cast<std::size_t>(s)].forward(t, x);
      x = trunk_sa_[static_cast<std::size_t>(s)].forward(t, x);
    }
    x = up1_.forward(t, x);
    x = up2_.forward(t, x);

    if (spec_.uses_topo()) {
      require(topo != nullptr, errc::shape_mismatch,
              "generator kind requires a topography tensor");
      require(topo->shape().h == x.shape().h && topo->shape().w == x.shape().w,
              errc::shape_mismatch, "topography must match the fine grid: ",
              topo->shape().str(), " vs ", x.shape().str());
      Tensor tf = topo_encoder_.forward(t, *topo);
      if (tf.shape().n == 1 && x.shape().n > 1)
        tf = broadcast_batch(tf, x.shape().n);
      x = concat_channels({x, tf});
    }
    return activation(out_conv_.forward(t, x), Activation::relu);
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& e : encoders_) e.collect(out);
    for (auto& s : encoder_sa_) s.collect(out);
    if (spec_.kind == GeneratorKind::encoded) stack_ca_.collect(out);
    for (auto& b : trunk_) b.collect(out);
    for (auto& b : trunk_ca_) b.collect(out);
    for (auto& b : trunk_sa_) b.collect(out);
    up1_.collect(out);
    up2_.collect(out);
    if (spec_.uses_topo()) topo_encoder_.collect(out);
    out_conv_.collect(out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto* v : params()) n += v->value.size();
    return n;
  }

 private:
  int trunk_input_channels() const {
    switch (spec_.kind) {
      case GeneratorKind::direct: return 4;
      case GeneratorKind::encoded: return 4 * spec_.encoder_channels;
      case GeneratorKind::sr: return 1;
    }
    return 0;
  }

  GeneratorSpec spec_;
  std::vector<VariableEncoder> encoders_;
  std::vector<SpatialAttention> encoder_sa_;
  ChannelAttention stack_ca_;
  std::vector<InceptionBlock> trunk_;
  std::vector<ChannelAttention> trunk_ca_;
  std::vector<SpatialAttention> trunk_sa_;
  UpsampleStage up1_, up2_;
  VariableEncoder topo_encoder_;
  Conv2dLayer out_conv_;
};

inline Generator build_generator(const GeneratorSpec& spec, std::uint64_t seed) {
  return Generator(spec, seed);
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Wasserstein-style critic: strided convs, global average, linear head, no
/// output squashing.
class Discriminator {
 public:
  Discriminator(const DiscriminatorSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    Rng rng(seed);
    int in_c = 1;
    for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
      convs_.emplace_back("d.conv" + std::to_string(i), in_c, spec_.widths[i],
                          spec_.kernel, 2, spec_.kernel / 2, rng);
      in_c = spec_.widths[i];
    }
    head_ = Conv2dLayer("d.head", in_c, 1, 1, 1, 0, rng);
  }

  const DiscriminatorSpec& spec() const { return spec_; }

  /// (n,1,h,w) precipitation field -> (n,1,1,1) critic scores.
  Tensor forward(Tape& t, const Tensor& x) {
    Tensor h = x;
    for (auto& conv : convs_)
      h = activation(conv.forward(t, h), Activation::leaky_relu, kLeakySlope);
    return head_.forward(t, pool_stats(h, PoolKind::global_avg));
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& c : convs_) c.collect(out);
    head_.collect(out);
    return out;
  }

 private:
  DiscriminatorSpec spec_;
  std::vector<Conv2dLayer> convs_;
  Conv2dLayer head_;
};

inline Discriminator build_discriminator(const DiscriminatorSpec& spec,
                                         std::uint64_t seed) {
  return Discriminator(spec, seed);
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// One timestep of normalized generator input.
struct GeneratorInput {
  std::vector<const GridField*> coarse;  // generator_input_variables() order
  const GridField* topo = nullptr;       // normalized fine topography
};

/// Runs a batch of timesteps through the generator and maps the outputs back
/// to physical units: denormalize, then apply the precipitation floor rule.
inline std::vector<GridField> generate_batch(Generator& gen,
                                             const std::vector<GeneratorInput>& batch,
                                             const NormalizationSpec& norm) {
  require(!batch.empty(), errc::shape_mismatch, "empty generation batch");
  const auto inputs = generator_input_variables(gen.spec().kind);
  const int b = static_cast<int>(batch.size());
  const int hc = batch.front().coarse.at(0)->ny;
  const int wc = batch.front().coarse.at(0)->nx;

  Tape tape;
  std::vector<Tensor> vars;
  for (std::size_t v = 0; v < inputs.size(); ++v) {
    Tensor tv = tape.zeros(Shape4{b, 1, hc, wc});
    std::span<double> dst = tape.mutable_values(tv);
    for (int s = 0; s < b; ++s) {
      require(batch[static_cast<std::size_t>(s)].coarse.size() == inputs.size(),
              errc::shape_mismatch, "wrong number of input variables");
      const GridField* f = batch[static_cast<std::size_t>(s)].coarse[v];
      require(f->ny == hc && f->nx == wc, errc::shape_mismatch,
              "inconsistent coarse shapes within batch");
      std::copy(f->values.begin(), f->values.end(),
                dst.begin() + static_cast<long>(s) * hc * wc);
    }
    vars.push_back(tv);
  }

  Tensor topo_tensor;
  const Tensor* topo_ptr = nullptr;
  if (gen.spec().uses_topo()) {
    const GridField* topo = batch.front().topo;
    require(topo != nullptr, errc::shape_mismatch, "missing topography input");
    topo_tensor = tape.input(Shape4{1, 1, topo->ny, topo->nx},
                             {topo->values.data(), topo->values.size()});
    topo_ptr = &topo_tensor;
  }

  Tensor out = gen.forward(tape, vars, topo_ptr);
  const Shape4 os = out.shape();
  const auto& bounds = norm.bounds_for(Variable::precip);

  std::vector<GridField> fields;
  const std::size_t plane = static_cast<std::size_t>(os.h) * os.w;
  for (int s = 0; s < b; ++s) {
    GridField f(Variable::precip,
                batch[static_cast<std::size_t>(s)].coarse[0]->time_index, os.h,
                os.w);
    const double* src = out.values().data() + s * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const double u = std::clamp(src[i], 0.0, 1.0);
      double v = bounds.min + u * (bounds.max - bounds.min);
      if (v < norm.precip_floor) v = 0.0;
      f.values[i] = v;
    }
    fields.push_back(std::move(f));
  }
  return fields;
}

inline GridField generate(Generator& gen, const GeneratorInput& input,
                          const NormalizationSpec& norm) {
  return generate_batch(gen, {input}, norm).front();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

namespace detail {

inline void save_params(const std::filesystem::path& root,
                        std::vector<Param*> params,
                        std::ofstream& manifest) {
  for (const auto* v : params) {
    const std::string file = v->name + ".npy";
    const Shape4 s = v->shape;
    npy::save((root / file).string(),
              {static_cast<std::size_t>(s.n), static_cast<std::size_t>(s.c),
               static_cast<std::size_t>(s.h), static_cast<std::size_t>(s.w)},
              v->value.data());
    manifest << "param " << v->name << " " << file << "\n";
  }
}

inline std::map<std::string, std::string> read_checkpoint_manifest(
    const std::filesystem::path& file, std::vector<std::pair<std::string, std::string>>& params) {
  std::ifstream in(file);
  require(in.good(), errc::io_failure, "cannot open checkpoint: ", file.string());
  std::map<std::string, std::string> meta;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "param") {
      std::string name, path;
      ls >> name >> path;
      params.emplace_back(name, path);
    } else {
      std::string rest;
      std::getline(ls, rest);
      const std::size_t pos = rest.find_first_not_of(' ');
      meta[key] = pos == std::string::npos ? "" : rest.substr(pos);
    }
  }
  return meta;
}

inline void load_params_into(const std::filesystem::path& root,
                             const std::vector<std::pair<std::string, std::string>>& entries,
                             std::vector<Param*> params,
                             const std::string& prefix) {
  std::map<std::string, const std::string*> files;
  for (const auto& [name, path] : entries) files[name] = &path;
  for (auto* v : params) {
    if (v->name.rfind(prefix, 0) != 0) continue;
    auto it = files.find(v->name);
    require(it != files.end(), errc::spec_mismatch,
            "checkpoint is missing parameter ", v->name);
    npy::Array arr = npy::load((root / *it->second).string());
    require(arr.data.size() == v->value.size(), errc::spec_mismatch,
            "parameter ", v->name, " has wrong size in checkpoint");
    v->value = std::move(arr.data);
  }
}

}  // namespace detail

/// Writes generator (and optionally discriminator) weights plus spec and
/// training metadata into `dir`. Bit-exact round trip via NPY doubles.
inline void save_checkpoint(const std::string& dir, Generator& gen,
                            Discriminator* disc, const CheckpointMeta& meta) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path root(dir);
  std::ofstream manifest(root / "checkpoint.txt", std::ios::trunc);
  require(manifest.good(), errc::io_failure, "cannot write checkpoint manifest in ", dir);
  const std::string gspec = gen.spec().serialize();
  manifest << "# rainscale weight checkpoint\n";
  manifest << "seed " << meta.seed << "\n";
  manifest << "config_hash " << hex64(meta.config_hash) << "\n";
  manifest << "gspec " << gspec << "\n";
  manifest << "gspec_hash " << hex64(fnv1a(gspec)) << "\n";
  if (disc != nullptr) {
    const std::string dspec = disc->spec().serialize();
    manifest << "dspec " << dspec << "\n";
    manifest << "dspec_hash " << hex64(fnv1a(dspec)) << "\n";
  }
  detail::save_params(root, gen.params(), manifest);
  if (disc != nullptr) detail::save_params(root, disc->params(), manifest);
  manifest.flush();
  require(manifest.good(), errc::io_failure, "checkpoint manifest write failed");
}

/// Loads a generator from a checkpoint directory. The stored spec must hash
/// to the stored spec hash, and every model parameter must be present with
/// the right shape.
inline Generator load_generator_checkpoint(const std::string& dir,
                                           CheckpointMeta* meta_out = nullptr) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::vector<std::pair<std::string, std::string>> params;
  auto meta = detail::read_checkpoint_manifest(root / "checkpoint.txt", params);
  require(meta.count("gspec") && meta.count("gspec_hash"), errc::spec_mismatch,
          "checkpoint manifest lacks a generator spec");
  require(hex64(fnv1a(meta["gspec"])) == meta["gspec_hash"], errc::spec_mismatch,
          "generator spec does not match its stored hash");
  GeneratorSpec spec = GeneratorSpec::parse(meta["gspec"]);
  Generator gen(spec, 0);
  detail::load_params_into(root, params, gen.params(), "g.");
  if (meta_out != nullptr) {
    if (meta.count("seed")) meta_out->seed = std::stoull(meta["seed"]);
    if (meta.count("config_hash"))
      meta_out->config_hash = std::stoull(meta["config_hash"], nullptr, 16);
  }
  return gen;
}

inline Discriminator load_discriminator_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::vector<std::pair<std::string, std::string>> params;
  auto meta = detail::read_checkpoint_manifest(root / "checkpoint.txt", params);
  require(meta.count("dspec") && meta.count("dspec_hash"), errc::spec_mismatch,
          "checkpoint manifest lacks a discriminator spec");
  require(hex64(fnv1a(meta["dspec"])) == meta["dspec_hash"], errc::spec_mismatch,
          "discriminator spec does not match its stored hash");
  Discriminator disc(DiscriminatorSpec::parse(meta["dspec"]), 0);
  detail::load_params_into(root, params, disc.params(), "d.");
  return disc;
}

}  // namespace rainscale

#endif  // RAINSCALE_MODEL_HPP_
