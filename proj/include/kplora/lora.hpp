#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "kplora/binary_io.hpp"
#include "kplora/error.hpp"
#include "kplora/matrix.hpp"
#include "kplora/rng.hpp"

namespace kplora {

enum class LoraTarget : unsigned {
  query = 1u << 0,
  key = 1u << 1,
  value = 1u << 2,
  output = 1u << 3,
  feed_forward = 1u << 4,
};

inline constexpr unsigned kAttentionTargets = 0b01111;
inline constexpr unsigned kAllTargets = 0b11111;

inline constexpr bool targets_contain(unsigned set, LoraTarget t) {
  return (set & static_cast<unsigned>(t)) != 0;
}

inline std::string_view target_name(LoraTarget t) {
  switch (t) {
    case LoraTarget::query: return "query";
    case LoraTarget::key: return "key";
    case LoraTarget::value: return "value";
    case LoraTarget::output: return "output";
    case LoraTarget::feed_forward: return "feed_forward";
  }
  return "?";
}

inline LoraTarget parse_target(std::string_view name) {
  for (auto t : {LoraTarget::query, LoraTarget::key, LoraTarget::value, LoraTarget::output,
                 LoraTarget::feed_forward})
    if (target_name(t) == name) return t;
  throw ConfigError("unknown LoRA target '" + std::string(name) + "'");
}

inline std::vector<std::string> target_names(unsigned set) {
  std::vector<std::string> out;
  for (auto t : {LoraTarget::query, LoraTarget::key, LoraTarget::value, LoraTarget::output,
                 LoraTarget::feed_forward})
    if (targets_contain(set, t)) out.emplace_back(target_name(t));
  return out;
}

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  double dropout = 0.05;
  unsigned targets = kAttentionTargets;

  friend bool operator==(const LoraConfig&, const LoraConfig&) = default;

  double scale() const { return alpha / rank; }

  void validate() const {
    if (rank < 1) throw ConfigError("LoRA rank must be at least 1");
    if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("LoRA dropout must lie in [0, 1)");
    if ((targets & ~kAllTargets) != 0) throw ConfigError("unknown LoRA target bits");
  }

  void validate_for(std::size_t d, std::size_t h) const {
    validate();
    if (static_cast<std::size_t>(rank) > std::min(d, h))
      throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds min(d, h) = " +
                        std::to_string(std::min(d, h)));
  }
};

// Trainable low-rank factors: update = (alpha / r) * A * B, A is d x r, B is r x h.
struct LoraFactors {
  Matrix a;
  Matrix b;
  double alpha = 1.0;

  std::size_t rank() const noexcept { return a.cols(); }
  double scale() const { return alpha / static_cast<double>(rank()); }
};

// A frozen d x h map W0 plus its adapter; y = x W0 + s (x A) B.
struct LoraLinear {
  Matrix w0;
  LoraFactors adapter;

  std::size_t in_features() const noexcept { return w0.rows(); }
  std::size_t out_features() const noexcept { return w0.cols(); }
};

// A ~ N(0, 1/r) entrywise, B = 0, so the initial update is exactly zero.
inline LoraFactors init_adapter(std::size_t d, std::size_t h, const LoraConfig& cfg,
                                std::uint64_t seed) {
  cfg.validate_for(d, h);
  LoraFactors f;
  f.a = Matrix(d, static_cast<std::size_t>(cfg.rank));
  f.b = Matrix(static_cast<std::size_t>(cfg.rank), h);
  f.alpha = cfg.alpha;
  Rng rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg.rank));
  for (auto& v : f.a.flat()) v = rng.normal(0.0, stddev);
  return f;
}

// What the adapter branch saw during a forward pass; needed for gradients.
struct AdapterTrace {
  Matrix input;   // dropout(x), or x itself when dropout was inactive
  Matrix hidden;  // input * A
  Matrix mask;    // per-entry dropout multiplier; empty when dropout was inactive
};

// Inverted dropout mask: each entry is 0 with probability p, else 1 / (1 - p).
inline Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, Rng& rng) {
  Matrix mask(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (auto& v : mask.flat()) v = rng.bernoulli(p) ? 0.0 : keep;
  return mask;
}

// y += s * (dropout(x) A) B. Dropout is active only when `rng` is non-null
// and `dropout` is positive.
inline void add_adapter_forward(Matrix& y, const Matrix& x, const LoraFactors& f, double dropout,
                                Rng* rng, AdapterTrace* trace = nullptr) {
  require(x.cols() == f.a.rows(), [&] { return "adapter input has " + std::to_string(x.cols()) +
                                      " columns, expected " + std::to_string(f.a.rows()); });
  const bool active = rng != nullptr && dropout > 0.0;
  Matrix mask, dropped;
  if (active) {
    mask = dropout_mask(x.rows(), x.cols(), dropout, *rng);
    dropped = x;
    for (std::size_t i = 0; i < dropped.size(); ++i) dropped.data()[i] *= mask.data()[i];
  }
  const Matrix& in = active ? dropped : x;
  Matrix hidden(x.rows(), f.rank());
  add_matmul(hidden, in, f.a);
  add_matmul(y, hidden, f.b, f.scale());
  if (trace) {
    trace->input = active ? std::move(dropped) : x;
    trace->hidden = std::move(hidden);
    trace->mask = std::move(mask);
  }
}

inline Matrix lora_forward(const LoraLinear& layer, const Matrix& x, bool training, Rng* rng,
                           double dropout) {
  require(x.cols() == layer.in_features(), [&] { return
          "lora_forward: input has " + std::to_string(x.cols()) + " columns, expected " +
              std::to_string(layer.in_features()); });
  require(!training || rng != nullptr, "lora_forward: training mode needs an rng");
  Matrix y(x.rows(), layer.out_features());
  add_matmul(y, x, layer.w0);
  add_adapter_forward(y, x, layer.adapter, dropout, training ? rng : nullptr);
  return y;
}

inline Matrix lora_update(const LoraFactors& f) {
  Matrix u(f.a.rows(), f.b.cols());
  add_matmul(u, f.a, f.b, f.scale());
  return u;
}

inline Matrix merge(const LoraLinear& layer) {
  Matrix w = layer.w0;
  add_matmul(w, layer.adapter.a, layer.adapter.b, layer.adapter.scale());
  return w;
}

inline Matrix unmerge(const Matrix& merged, const LoraLinear& layer) {
  require(merged.same_shape(layer.w0), "unmerge: shape mismatch");
  Matrix w = merged;
  add_matmul(w, layer.adapter.a, layer.adapter.b, -layer.adapter.scale());
  return w;
}

struct AdapterGrads {
  Matrix da;
  Matrix db;
};

// Gradients of <upstream, y> w.r.t. A and B given the adapter's input and
// hidden activations: dB = s (xA)^T g, dA = s x^T (g B^T).
inline void accumulate_adapter_grads(AdapterGrads& out, const AdapterTrace& trace,
                                     const Matrix& upstream, const LoraFactors& f) {
  const double s = f.scale();
  add_matmul_tn(out.db, trace.hidden, upstream, s);
  Matrix gb(upstream.rows(), f.rank());
  add_matmul_nt(gb, upstream, f.b);
  add_matmul_tn(out.da, trace.input, gb, s);
}

// Input gradient contributed by the adapter branch: dx += s (g B^T A^T),
// multiplied by the dropout mask when one was recorded.
inline void accumulate_adapter_input_grad(Matrix& dx, const Matrix& upstream, const LoraFactors& f,
                                          const Matrix& mask) {
  Matrix gb(upstream.rows(), f.rank());
  add_matmul_nt(gb, upstream, f.b);
  if (mask.empty()) {
    add_matmul_nt(dx, gb, f.a, f.scale());
    return;
  }
  Matrix tmp(dx.rows(), dx.cols());
  add_matmul_nt(tmp, gb, f.a, f.scale());
  for (std::size_t i = 0; i < tmp.size(); ++i) dx.data()[i] += tmp.data()[i] * mask.data()[i];
}

// Gradients without dropout. W0 receives none.
inline AdapterGrads adapter_grads(const LoraLinear& layer, const Matrix& x, const Matrix& upstream) {
  require(x.cols() == layer.in_features() && upstream.cols() == layer.out_features() &&
              x.rows() == upstream.rows(),
          "adapter_grads: shape mismatch");
  AdapterGrads g{Matrix(layer.adapter.a.rows(), layer.adapter.rank()),
                 Matrix(layer.adapter.rank(), layer.adapter.b.cols())};
  AdapterTrace trace;
  trace.input = x;
  trace.hidden = Matrix(x.rows(), layer.adapter.rank());
  add_matmul(trace.hidden, x, layer.adapter.a);
  accumulate_adapter_grads(g, trace, upstream, layer.adapter);
  return g;
}

// Re-expresses a rank-r adapter at a larger rank with identical update:
// A gains zero columns, B gains zero rows, and B is rescaled so that
// (alpha / r') A' B' == (alpha / r) A B.
inline LoraFactors widen_rank(const LoraFactors& f, std::size_t new_rank) {
  require(new_rank >= f.rank(), "widen_rank: new rank must not be smaller");
  LoraFactors out;
  out.alpha = f.alpha;
  out.a = Matrix(f.a.rows(), new_rank);
  out.b = Matrix(new_rank, f.b.cols());
  const double rescale = static_cast<double>(new_rank) / static_cast<double>(f.rank());
  for (std::size_t i = 0; i < f.a.rows(); ++i)
    for (std::size_t j = 0; j < f.rank(); ++j) out.a(i, j) = f.a(i, j);
  for (std::size_t i = 0; i < f.rank(); ++i)
    for (std::size_t j = 0; j < f.b.cols(); ++j) out.b(i, j) = f.b(i, j) * rescale;
  return out;
}

// Adapter checkpoint, little-endian:
//   "KPLA" | version:u32 = 1 | count:u32 |
//   count x { name:str | d:u32 | h:u32 | r:u32 | alpha:f64 | A:matrix | B:matrix }
// where str = len:u32 + bytes and matrix = rows:u32 + cols:u32 + f64 data.
struct NamedAdapter {
  std::string name;
  LoraFactors factors;
};

inline constexpr std::string_view kAdapterMagic = "KPLA";
inline constexpr std::uint32_t kAdapterVersion = 1;

inline void write_adapters(BinaryWriter& w, const std::vector<NamedAdapter>& adapters) {
  w.bytes(kAdapterMagic);
  w.u32(kAdapterVersion);
  w.u32(static_cast<std::uint32_t>(adapters.size()));
  for (const auto& a : adapters) {
    w.str(a.name);
    w.u32(static_cast<std::uint32_t>(a.factors.a.rows()));
    w.u32(static_cast<std::uint32_t>(a.factors.b.cols()));
    w.u32(static_cast<std::uint32_t>(a.factors.rank()));
    w.f64(a.factors.alpha);
    w.matrix(a.factors.a);
    w.matrix(a.factors.b);
  }
}

inline std::vector<NamedAdapter> read_adapters(BinaryReader& r) {
  if (r.bytes(4) != kAdapterMagic) throw FormatError(r.origin() + ": not an adapter checkpoint", 0);
  const auto version = r.u32();
  if (version != kAdapterVersion)
    throw FormatError(r.origin() + ": unsupported adapter version " + std::to_string(version), 4);
  const auto count = r.u32();
  std::vector<NamedAdapter> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedAdapter a;
    a.name = r.str();
    const std::size_t at = r.position();
    const std::size_t d = r.u32(), h = r.u32(), rank = r.u32();
    a.factors.alpha = r.f64();
    a.factors.a = r.matrix();
    a.factors.b = r.matrix();
    if (a.factors.a.rows() != d || a.factors.a.cols() != rank || a.factors.b.rows() != rank ||
        a.factors.b.cols() != h)
      throw FormatError(r.origin() + ": adapter '" + a.name + "' has inconsistent shapes", at);
    out.push_back(std::move(a));
  }
  return out;
}

inline void save_adapters(const std::vector<NamedAdapter>& adapters, const std::string& path) {
  BinaryWriter w;
  write_adapters(w, adapters);
  w.save(path);
}

inline std::vector<NamedAdapter> load_adapters(const std::string& path) {
  auto r = BinaryReader::open(path);
  return read_adapters(r);
}

}  // namespace kplora
