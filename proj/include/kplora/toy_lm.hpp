#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "kplora/binary_io.hpp"
#include "kplora/error.hpp"
#include "kplora/lora.hpp"
#include "kplora/matrix.hpp"
#include "kplora/rng.hpp"
#include "kplora/toy_task.hpp"

namespace kplora {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq_len = 256;
  int ffn_mult = 4;
  double rope_base = 100.0;

  int head_dim() const { return d_model / n_heads; }
  int ffn_dim() const { return d_model * ffn_mult; }

  void validate() const {
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len <= 0 || ffn_mult <= 0)
      throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ConfigError("head dimension must be even for rotary embeddings");
    if (!(rope_base > 1.0)) throw ConfigError("rope_base must exceed 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Tensor {
  Matrix value;
  Matrix grad;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : value(r, c), grad(r, c) {}
};

// x W (+ b) (+ adapter). Bias is absent when `has_bias` is false.
struct Projection {
  Tensor w;
  Tensor b;
  bool has_bias = false;
  std::optional<LoraFactors> adapter;
  AdapterGrads adapter_grad;

  Projection() = default;
  Projection(std::size_t in, std::size_t out, bool bias)
      : w(in, out), b(bias ? 1 : 0, bias ? out : 0), has_bias(bias) {}
};

struct Block {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Projection q, k, v, o, ff1, ff2;
};

template <class B>
auto named_projections(B& b) {
  using P = decltype(&b.q);
  return std::vector<std::pair<P, std::string>>{{&b.q, "q"}, {&b.k, "k"},     {&b.v, "v"},
                                                {&b.o, "o"}, {&b.ff1, "ff1"}, {&b.ff2, "ff2"}};
}

struct ParamRef {
  std::string name;
  Matrix* value;
  Matrix* grad;
  bool is_adapter;
};

namespace lm_detail {

constexpr double kLnEps = 1e-5;

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> rstd;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, LayerNormCache* cache) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix y(n, d);
  if (cache) {
    cache->xhat.resize(n, d);
    cache->rstd.assign(n, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.row(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    double* yi = y.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xi[j] - mean) * rstd;
      if (cache) cache->xhat(i, j) = xh;
      yi[j] = xh * g(0, j) + b(0, j);
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return y;
}

// Returns dx; accumulates into dg/db when they are non-null.
inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& g, const LayerNormCache& c,
                                  Matrix* dg, Matrix* db) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* dyi = dy.row(i);
    const double* xh = c.xhat.row(i);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = dyi[j] * g(0, j);
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xh[j];
      if (dg) (*dg)(0, j) += dyi[j] * xh[j];
      if (db) (*db)(0, j) += dyi[j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    double* dxi = dx.row(i);
    for (std::size_t j = 0; j < d; ++j)
      dxi[j] = c.rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

struct ProjectionCache {
  Matrix input;
  AdapterTrace trace;
};

inline Matrix project(const Projection& p, const Matrix& x, double dropout, Rng* rng,
                      ProjectionCache* cache) {
  Matrix y(x.rows(), p.w.value.cols());
  add_matmul(y, x, p.w.value);
  if (p.has_bias)
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += p.b.value(0, j);
  if (p.adapter) add_adapter_forward(y, x, *p.adapter, dropout, rng, cache ? &cache->trace : nullptr);
  if (cache) cache->input = x;
  return y;
}

// Accumulates parameter gradients and returns the input gradient.
inline Matrix project_backward(Projection& p, const ProjectionCache& c, const Matrix& dy,
                               bool base_grads, bool adapter_grads) {
  if (base_grads) {
    add_matmul_tn(p.w.grad, c.input, dy);
    if (p.has_bias)
      for (std::size_t i = 0; i < dy.rows(); ++i)
        for (std::size_t j = 0; j < dy.cols(); ++j) p.b.grad(0, j) += dy(i, j);
  }
  Matrix dx(dy.rows(), p.w.value.rows());
  add_matmul_nt(dx, dy, p.w.value);
  if (p.adapter) {
    if (adapter_grads) accumulate_adapter_grads(p.adapter_grad, c.trace, dy, *p.adapter);
    accumulate_adapter_input_grad(dx, dy, *p.adapter, c.trace.mask);
  }
  return dx;
}

struct BlockCache {
  LayerNormCache ln1, ln2;
  ProjectionCache q, k, v, o, ff1, ff2;
  Matrix qr, kr, vv;                // rotated queries/keys, values
  std::vector<Matrix> probs;        // per head, T x T (lower triangle used)
  Matrix ff1_pre;                   // pre-activation of the first feed-forward layer
};

}  // namespace lm_detail

struct ForwardCache {
  std::vector<int> ids;
  std::vector<lm_detail::BlockCache> blocks;
  lm_detail::LayerNormCache lnf;
  Matrix hf;
};

// Decoder-only transformer: token embedding, pre-norm blocks with rotary
// multi-head causal self-attention and a GELU feed-forward, final norm and an
// untied output projection. Optional LoRA adapters sit on the projections
// selected by LoraConfig::targets.
class ToyLM {
public:
  ToyLM() = default;

  ToyLM(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.d_model, f = cfg_.ffn_dim(), v = cfg_.vocab_size;
    tok_emb_ = Tensor(v, d);
    blocks_.resize(cfg_.n_layers);
    for (auto& b : blocks_) {
      b.ln1_g = Tensor(1, d);
      b.ln1_b = Tensor(1, d);
      b.ln2_g = Tensor(1, d);
      b.ln2_b = Tensor(1, d);
      b.q = Projection(d, d, false);
      b.k = Projection(d, d, false);
      b.v = Projection(d, d, false);
      b.o = Projection(d, d, false);
      b.ff1 = Projection(d, f, true);
      b.ff2 = Projection(f, d, true);
    }
    lnf_g_ = Tensor(1, d);
    lnf_b_ = Tensor(1, d);
    unembed_ = Tensor(d, v);

    Rng rng(seed);
    for (auto& x : tok_emb_.value.flat()) x = rng.normal();
    auto uniform_init = [&](Matrix& m, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& x : m.flat()) x = rng.uniform(-bound, bound);
    };
    for (auto& b : blocks_) {
      b.ln1_g.value.fill(1.0);
      b.ln2_g.value.fill(1.0);
      for (Projection* p : {&b.q, &b.k, &b.v, &b.o, &b.ff1, &b.ff2})
        uniform_init(p->w.value, p->w.value.rows());
    }
    lnf_g_.value.fill(1.0);
    uniform_init(unembed_.value, d);
    build_rope_table();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  bool has_adapters() const noexcept { return lora_.has_value(); }
  const std::optional<LoraConfig>& lora_config() const noexcept { return lora_; }

  void attach_adapters(const LoraConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    lora_ = cfg;
    Rng seeds(seed);
    for (auto& b : blocks_) {
      for (auto [p, t] : targets_of(b)) {
        if (!targets_contain(cfg.targets, t)) {
          p->adapter.reset();
          continue;
        }
        p->adapter = init_adapter(p->w.value.rows(), p->w.value.cols(), cfg, seeds.next_u64());
        p->adapter_grad = {Matrix(p->adapter->a.rows(), p->adapter->rank()),
                           Matrix(p->adapter->rank(), p->adapter->b.cols())};
      }
    }
  }

  void detach_adapters() {
    lora_.reset();
    for (auto& b : blocks_)
      for (auto [p, t] : targets_of(b)) p->adapter.reset();
  }

  // Named parameters: base tensors first (fixed order), then adapter factors.
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    auto add = [&](const std::string& name, Tensor& t) { out.push_back({name, &t.value, &t.grad, false}); };
    add("tok_emb", tok_emb_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      auto& b = blocks_[l];
      const std::string pre = "blocks." + std::to_string(l) + ".";
      add(pre + "ln1.g", b.ln1_g);
      add(pre + "ln1.b", b.ln1_b);
      for (auto [p, name] : named_projections(b)) {
        add(pre + name + ".w", p->w);
        if (p->has_bias) add(pre + name + ".b", p->b);
      }
      add(pre + "ln2.g", b.ln2_g);
      add(pre + "ln2.b", b.ln2_b);
    }
    add("lnf.g", lnf_g_);
    add("lnf.b", lnf_b_);
    add("unembed", unembed_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const std::string pre = "blocks." + std::to_string(l) + ".";
      for (auto [p, name] : named_projections(blocks_[l])) {
        if (!p->adapter) continue;
        out.push_back({pre + name + ".lora_a", &p->adapter->a, &p->adapter_grad.da, true});
        out.push_back({pre + name + ".lora_b", &p->adapter->b, &p->adapter_grad.db, true});
      }
    }
    return out;
  }

  std::vector<NamedAdapter> adapters() const {
    std::vector<NamedAdapter> out;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      for (auto [p, name] : named_projections(blocks_[l]))
        if (p->adapter) out.push_back({"blocks." + std::to_string(l) + "." + name, *p->adapter});
    }
    return out;
  }

  std::size_t trainable_adapter_parameters() const {
    std::size_t n = 0;
    for (const auto& a : adapters()) n += a.factors.a.size() + a.factors.b.size();
    return n;
  }

  std::size_t base_parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters())
      if (!p.is_adapter) n += p.value->size();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.grad->fill(0.0);
  }

  // Logits for every position (T x V). Dropout on adapter inputs is active
  // only when `dropout_rng` is non-null. Fills `cache` for backward().
  Matrix forward(const std::vector<int>& ids, Rng* dropout_rng = nullptr,
                 ForwardCache* cache = nullptr) const {
    using namespace lm_detail;
    require(!ids.empty(), "forward: empty input");
    require(ids.size() <= static_cast<std::size_t>(cfg_.max_seq_len), [&] { return
            "forward: input length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                std::to_string(cfg_.max_seq_len); });
    const std::size_t n = ids.size(), d = cfg_.d_model;
    const double p_drop = lora_ ? lora_->dropout : 0.0;

    Matrix x(n, d);
    for (std::size_t t = 0; t < n; ++t) {
      require(ids[t] >= 0 && ids[t] < cfg_.vocab_size, "forward: token id out of range");
      std::copy_n(tok_emb_.value.row(ids[t]), d, x.row(t));
    }
    if (cache) {
      cache->ids = ids;
      cache->blocks.assign(blocks_.size(), {});
    }

    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const Block& b = blocks_[l];
      BlockCache* bc = cache ? &cache->blocks[l] : nullptr;

      const Matrix h1 = layer_norm(x, b.ln1_g.value, b.ln1_b.value, bc ? &bc->ln1 : nullptr);
      Matrix q = project(b.q, h1, p_drop, dropout_rng, bc ? &bc->q : nullptr);
      Matrix k = project(b.k, h1, p_drop, dropout_rng, bc ? &bc->k : nullptr);
      Matrix v = project(b.v, h1, p_drop, dropout_rng, bc ? &bc->v : nullptr);
      for (std::size_t t = 0; t < n; ++t) {
        rotate(q.row(t), t, false);
        rotate(k.row(t), t, false);
      }
      std::vector<Matrix> probs;
      const Matrix ctx = attend(q, k, v, probs);
      const Matrix att = project(b.o, ctx, p_drop, dropout_rng, bc ? &bc->o : nullptr);
      axpy(x, att);

      const Matrix h2 = layer_norm(x, b.ln2_g.value, b.ln2_b.value, bc ? &bc->ln2 : nullptr);
      Matrix pre = project(b.ff1, h2, p_drop, dropout_rng, bc ? &bc->ff1 : nullptr);
      Matrix act = pre;
      for (auto& z : act.flat()) z = gelu(z);
      const Matrix ff = project(b.ff2, act, p_drop, dropout_rng, bc ? &bc->ff2 : nullptr);
      axpy(x, ff);

      if (bc) {
        bc->qr = std::move(q);
        bc->kr = std::move(k);
        bc->vv = std::move(v);
        bc->probs = std::move(probs);
        bc->ff1_pre = std::move(pre);
      }
    }

    Matrix hf = layer_norm(x, lnf_g_.value, lnf_b_.value, cache ? &cache->lnf : nullptr);
    Matrix logits(n, cfg_.vocab_size);
    add_matmul(logits, hf, unembed_.value);
    if (cache) cache->hf = std::move(hf);
    return logits;
  }

  // Backpropagates d(loss)/d(logits). Base tensors receive gradients only when
  // `base_grads` is set; adapters only when `adapter_grads` is set.
  void backward(const ForwardCache& cache, const Matrix& dlogits, bool base_grads,
                bool adapter_grads) {
    using namespace lm_detail;
    const std::size_t n = cache.ids.size();
    require(dlogits.rows() == n && dlogits.cols() == static_cast<std::size_t>(cfg_.vocab_size),
            "backward: dlogits shape mismatch");
    if (base_grads) add_matmul_tn(unembed_.grad, cache.hf, dlogits);
    Matrix dhf(n, cfg_.d_model);
    add_matmul_nt(dhf, dlogits, unembed_.value);
    Matrix dx = layer_norm_backward(dhf, lnf_g_.value, cache.lnf, base_grads ? &lnf_g_.grad : nullptr,
                                    base_grads ? &lnf_b_.grad : nullptr);

    for (std::size_t li = blocks_.size(); li-- > 0;) {
      Block& b = blocks_[li];
      const BlockCache& bc = cache.blocks[li];

      // feed-forward residual branch
      Matrix dact = project_backward(b.ff2, bc.ff2, dx, base_grads, adapter_grads);
      for (std::size_t i = 0; i < dact.size(); ++i) dact.data()[i] *= gelu_grad(bc.ff1_pre.data()[i]);
      const Matrix dh2 = project_backward(b.ff1, bc.ff1, dact, base_grads, adapter_grads);
      axpy(dx, layer_norm_backward(dh2, b.ln2_g.value, bc.ln2, base_grads ? &b.ln2_g.grad : nullptr,
                                   base_grads ? &b.ln2_b.grad : nullptr));

      // attention residual branch
      const Matrix dctx = project_backward(b.o, bc.o, dx, base_grads, adapter_grads);
      Matrix dq(n, cfg_.d_model), dk(n, cfg_.d_model), dv(n, cfg_.d_model);
      attend_backward(bc, dctx, dq, dk, dv);
      for (std::size_t t = 0; t < n; ++t) {
        rotate(dq.row(t), t, true);
        rotate(dk.row(t), t, true);
      }
      Matrix dh1 = project_backward(b.q, bc.q, dq, base_grads, adapter_grads);
      axpy(dh1, project_backward(b.k, bc.k, dk, base_grads, adapter_grads));
      axpy(dh1, project_backward(b.v, bc.v, dv, base_grads, adapter_grads));
      axpy(dx, layer_norm_backward(dh1, b.ln1_g.value, bc.ln1, base_grads ? &b.ln1_g.grad : nullptr,
                                   base_grads ? &b.ln1_b.grad : nullptr));
    }

    if (base_grads)
      for (std::size_t t = 0; t < n; ++t) {
        double* g = tok_emb_.grad.row(cache.ids[t]);
        const double* src = dx.row(t);
        for (int j = 0; j < cfg_.d_model; ++j) g[j] += src[j];
      }
  }

  // Incremental decoding state: rotated keys and values per layer.
  struct DecodeState {
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
    std::size_t length = 0;
  };

  DecodeState start_decoding() const {
    DecodeState s;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      s.keys.emplace_back(cfg_.max_seq_len, cfg_.d_model);
      s.values.emplace_back(cfg_.max_seq_len, cfg_.d_model);
    }
    return s;
  }

  // Feeds one token at position state.length and returns its logits (1 x V).
  Matrix step(DecodeState& state, int token) const {
    using namespace lm_detail;
    require(state.length < static_cast<std::size_t>(cfg_.max_seq_len), "step: context is full");
    require(token >= 0 && token < cfg_.vocab_size, "step: token id out of range");
    const std::size_t d = cfg_.d_model, hd = cfg_.head_dim(), t = state.length;
    Matrix x(1, d);
    std::copy_n(tok_emb_.value.row(token), d, x.row(0));
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const Block& b = blocks_[l];
      const Matrix h1 = layer_norm(x, b.ln1_g.value, b.ln1_b.value, nullptr);
      Matrix q = project(b.q, h1, 0.0, nullptr, nullptr);
      Matrix k = project(b.k, h1, 0.0, nullptr, nullptr);
      const Matrix v = project(b.v, h1, 0.0, nullptr, nullptr);
      rotate(q.row(0), t, false);
      rotate(k.row(0), t, false);
      std::copy_n(k.row(0), d, state.keys[l].row(t));
      std::copy_n(v.row(0), d, state.values[l].row(t));

      Matrix ctx(1, d);
      std::vector<double> w(t + 1);
      const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
      for (int h = 0; h < cfg_.n_heads; ++h) {
        const std::size_t off = h * hd;
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= t; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += q(0, off + e) * state.keys[l](j, off + e);
          w[j] = s * inv;
          mx = std::max(mx, w[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          w[j] = std::exp(w[j] - mx);
          z += w[j];
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const double p = w[j] / z;
          for (std::size_t e = 0; e < hd; ++e) ctx(0, off + e) += p * state.values[l](j, off + e);
        }
      }
      axpy(x, project(b.o, ctx, 0.0, nullptr, nullptr));
      const Matrix h2 = layer_norm(x, b.ln2_g.value, b.ln2_b.value, nullptr);
      Matrix act = project(b.ff1, h2, 0.0, nullptr, nullptr);
      for (auto& z : act.flat()) z = gelu(z);
      axpy(x, project(b.ff2, act, 0.0, nullptr, nullptr));
    }
    ++state.length;
    const Matrix hf = layer_norm(x, lnf_g_.value, lnf_b_.value, nullptr);
    Matrix logits(1, cfg_.vocab_size);
    add_matmul(logits, hf, unembed_.value);
    return logits;
  }

  // Checkpoint, little-endian:
  //   "KPLM" | version:u32 = 1 |
  //   vocab_size, d_model, n_layers, n_heads, max_seq_len, ffn_mult : u32 | rope_base:f64 |
  //   class_count:u32 | class names:str... |
  //   tensor_count:u32 | { name:str | matrix }... |
  //   has_adapters:u32 | [rank:u32 | alpha:f64 | dropout:f64 | targets:u32 | adapter block]
  // The adapter block uses the "KPLA" layout from lora.hpp.
  void save(const std::string& path, const ClassVocab& classes) {
    BinaryWriter w;
    w.bytes(kMagic);
    w.u32(kVersion);
    for (int v : {cfg_.vocab_size, cfg_.d_model, cfg_.n_layers, cfg_.n_heads, cfg_.max_seq_len, cfg_.ffn_mult})
      w.u32(static_cast<std::uint32_t>(v));
    w.f64(cfg_.rope_base);
    w.u32(static_cast<std::uint32_t>(classes.size()));
    for (const auto& c : classes.names()) w.str(c);
    std::vector<ParamRef> base;
    for (auto& p : parameters())
      if (!p.is_adapter) base.push_back(p);
    w.u32(static_cast<std::uint32_t>(base.size()));
    for (const auto& p : base) {
      w.str(p.name);
      w.matrix(*p.value);
    }
    w.u32(lora_ ? 1 : 0);
    if (lora_) {
      w.u32(static_cast<std::uint32_t>(lora_->rank));
      w.f64(lora_->alpha);
      w.f64(lora_->dropout);
      w.u32(lora_->targets);
      write_adapters(w, adapters());
    }
    w.save(path);
  }

  struct Loaded;
  static Loaded load(const std::string& path);

private:
  static constexpr std::string_view kMagic = "KPLM";
  static constexpr std::uint32_t kVersion = 1;

  static std::vector<std::pair<Projection*, LoraTarget>> targets_of(Block& b) {
    return {{&b.q, LoraTarget::query},        {&b.k, LoraTarget::key},
            {&b.v, LoraTarget::value},        {&b.o, LoraTarget::output},
            {&b.ff1, LoraTarget::feed_forward}, {&b.ff2, LoraTarget::feed_forward}};
  }


  void build_rope_table() {
    const std::size_t half = cfg_.head_dim() / 2;
    rope_cos_ = Matrix(cfg_.max_seq_len, half);
    rope_sin_ = Matrix(cfg_.max_seq_len, half);
    for (int t = 0; t < cfg_.max_seq_len; ++t)
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(cfg_.rope_base, -2.0 * static_cast<double>(i) / cfg_.head_dim());
        rope_cos_(t, i) = std::cos(t * freq);
        rope_sin_(t, i) = std::sin(t * freq);
      }
  }

  // Rotates each (2i, 2i+1) pair of every head by position t; `inverse`
  // applies the transpose, which is also the backward map.
  void rotate(double* row, std::size_t t, bool inverse) const {
    const std::size_t hd = cfg_.head_dim(), half = hd / 2;
    for (int h = 0; h < cfg_.n_heads; ++h) {
      double* r = row + h * hd;
      for (std::size_t i = 0; i < half; ++i) {
        const double c = rope_cos_(t, i);
        const double s = inverse ? -rope_sin_(t, i) : rope_sin_(t, i);
        const double a = r[2 * i], b = r[2 * i + 1];
        r[2 * i] = a * c - b * s;
        r[2 * i + 1] = a * s + b * c;
      }
    }
  }

  Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, std::vector<Matrix>& probs) const {
    using matrix_detail::view;
    const std::size_t n = q.rows(), hd = cfg_.head_dim();
    const auto ehd = static_cast<Eigen::Index>(hd);
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix ctx(n, cfg_.d_model);
    probs.assign(cfg_.n_heads, Matrix());
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h * hd);
      Matrix& p = probs[h];
      p = Matrix(n, n);
      auto pm = view(p);
      pm.noalias() = inv * (view(q).middleCols(off, ehd) * view(k).middleCols(off, ehd).transpose());
      for (std::size_t t = 0; t < n; ++t) {
        double* pt = p.row(t);
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= t; ++j) mx = std::max(mx, pt[j]);
        double z = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          pt[j] = std::exp(pt[j] - mx);
          z += pt[j];
        }
        const double rz = 1.0 / z;
        for (std::size_t j = 0; j <= t; ++j) pt[j] *= rz;
        std::fill(pt + t + 1, pt + n, 0.0);
      }
      view(ctx).middleCols(off, ehd).noalias() = pm * view(v).middleCols(off, ehd);
    }
    return ctx;
  }

  void attend_backward(const lm_detail::BlockCache& bc, const Matrix& dctx, Matrix& dq, Matrix& dk,
                       Matrix& dv) const {
    using matrix_detail::view;
    const std::size_t n = dctx.rows(), hd = cfg_.head_dim();
    const auto ehd = static_cast<Eigen::Index>(hd);
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix ds(n, n);
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h * hd);
      const Matrix& p = bc.probs[h];
      const auto g = view(dctx).middleCols(off, ehd);
      view(dv).middleCols(off, ehd).noalias() += view(p).transpose() * g;
      view(ds).noalias() = g * view(bc.vv).middleCols(off, ehd).transpose();
      for (std::size_t t = 0; t < n; ++t) {
        const double* pt = p.row(t);
        double* st = ds.row(t);
        double dot = 0.0;
        for (std::size_t j = 0; j <= t; ++j) dot += st[j] * pt[j];
        for (std::size_t j = 0; j <= t; ++j) st[j] = pt[j] * (st[j] - dot) * inv;
        std::fill(st + t + 1, st + n, 0.0);
      }
      view(dq).middleCols(off, ehd).noalias() += view(ds) * view(bc.kr).middleCols(off, ehd);
      view(dk).middleCols(off, ehd).noalias() += view(ds).transpose() * view(bc.qr).middleCols(off, ehd);
    }
  }

  ModelConfig cfg_;
  Tensor tok_emb_;
  std::vector<Block> blocks_;
  Tensor lnf_g_, lnf_b_, unembed_;
  std::optional<LoraConfig> lora_;
  Matrix rope_cos_, rope_sin_;
};

struct ToyLM::Loaded {
  ToyLM model;
  ClassVocab classes;
};

inline ToyLM::Loaded ToyLM::load(const std::string& path) {
  auto r = BinaryReader::open(path);
  if (r.bytes(4) != kMagic) throw FormatError(path + ": not a model checkpoint", 0);
  const auto version = r.u32();
  if (version != kVersion) throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version), 4);
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(r.u32());
  cfg.d_model = static_cast<int>(r.u32());
  cfg.n_layers = static_cast<int>(r.u32());
  cfg.n_heads = static_cast<int>(r.u32());
  cfg.max_seq_len = static_cast<int>(r.u32());
  cfg.ffn_mult = static_cast<int>(r.u32());
  cfg.rope_base = r.f64();
  std::vector<std::string> names(r.u32());
  for (auto& n : names) n = r.str();
  Loaded out{ToyLM(cfg, 0), ClassVocab(names)};
  if (Vocab(out.classes).size() != cfg.vocab_size)
    throw FormatError(path + ": class list does not match vocab_size", r.position());

  auto params = out.model.parameters();
  const auto count = r.u32();
  if (count != params.size()) throw FormatError(path + ": unexpected tensor count", r.position());
  for (auto& p : params) {
    const std::size_t at = r.position();
    const std::string name = r.str();
    Matrix m = r.matrix();
    if (name != p.name || !m.same_shape(*p.value))
      throw FormatError(path + ": unexpected tensor '" + name + "'", at);
    *p.value = std::move(m);
  }
  if (r.u32() != 0) {
    LoraConfig lc;
    lc.rank = static_cast<int>(r.u32());
    lc.alpha = r.f64();
    lc.dropout = r.f64();
    lc.targets = r.u32();
    out.model.attach_adapters(lc, 0);
    const auto stored = read_adapters(r);
    const auto expected = out.model.adapters();
    if (stored.size() != expected.size()) throw FormatError(path + ": adapter count mismatch", r.position());
    std::size_t idx = 0;
    for (auto& p : out.model.parameters()) {
      if (!p.is_adapter) continue;
      const auto& src = stored[idx / 2];
      const Matrix& m = (idx % 2 == 0) ? src.factors.a : src.factors.b;
      if (src.name != expected[idx / 2].name || !m.same_shape(*p.value))
        throw FormatError(path + ": unexpected adapter '" + src.name + "'", r.position());
      *p.value = m;
      ++idx;
    }
  }
  if (!r.at_end()) throw FormatError(path + ": trailing bytes", r.position());
  return out;
}

}  // namespace kplora
