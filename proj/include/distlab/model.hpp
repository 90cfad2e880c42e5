#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "distlab/rng.hpp"
#include "distlab/tensor.hpp"

namespace distlab {

/// Architecture of a causal decoder-only transformer.
struct ModelConfig {
  std::int64_t num_layers = 2;      // D
  std::int64_t d_emb = 64;          // residual stream width
  std::int64_t num_heads = 2;       // must divide d_emb
  std::int64_t d_ff = 256;          // MLP hidden width
  std::int64_t vocab_size = 257;    // V
  std::int64_t context_length = 128;  // n
  double rms_eps = 1e-6;
  bool tie_embeddings = true;

  void validate() const {
    if (num_layers < 1) throw std::invalid_argument("model: num_layers must be >= 1");
    if (d_emb < 1 || d_ff < 1) throw std::invalid_argument("model: widths must be positive");
    if (num_heads < 1 || d_emb % num_heads != 0)
      throw std::invalid_argument("model: num_heads must divide d_emb (" + std::to_string(num_heads) + " vs " +
                                  std::to_string(d_emb) + ")");
    if (vocab_size < 2) throw std::invalid_argument("model: vocab_size must be >= 2");
    if (context_length < 2) throw std::invalid_argument("model: context_length must be >= 2");
    if (!(rms_eps > 0)) throw std::invalid_argument("model: rms_eps must be positive");
  }

  std::int64_t head_dim() const { return d_emb / num_heads; }
};

/// The layer whose output feeds hidden-state matching: H^{floor(D/2)}.
inline std::int64_t median_layer_index(const ModelConfig& cfg) {
  if (cfg.num_layers < 2) throw std::invalid_argument("median_layer_index: need at least 2 layers");
  return cfg.num_layers / 2;
}

/// Closed-form parameter count excluding the token-embedding,
/// position-embedding, and de-embedding tables — the cost-model N. Matches
/// Transformer::backbone_param_count without allocating anything.
inline std::int64_t backbone_param_count(const ModelConfig& cfg) {
  const std::int64_t d = cfg.d_emb, ff = cfg.d_ff;
  const std::int64_t attn = 4 * d * d + 4 * d;          // wq/wk/wv/wo + biases
  const std::int64_t mlp = d * ff + ff + ff * d + d;    // w1/b1/w2/b2
  const std::int64_t per_layer = d + attn + d + mlp;    // + two norm gains
  return cfg.num_layers * per_layer + d;                // + final norm gain
}

inline std::int64_t total_param_count(const ModelConfig& cfg) {
  std::int64_t n = backbone_param_count(cfg) + (cfg.vocab_size + cfg.context_length) * cfg.d_emb;
  if (!cfg.tie_embeddings) n += cfg.d_emb * cfg.vocab_size;
  return n;
}

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

/// Mean over rows of the squared Euclidean row norm — the residual-stream
/// magnitude instrument. Plain number, not differentiated.
template <typename S>
double mean_squared_magnitude(const Tensor<S>& h) {
  const std::int64_t rows = h.rank() == 2 ? h.rows() : 1;
  return h.values().template cast<double>().square().sum() / static_cast<double>(rows);
}

template <typename S>
struct ForwardResult {
  Tensor<S> logits;                    // L x V (undefined for prefix runs)
  std::vector<Tensor<S>> hidden;       // H^0 .. H^D (or H^prefix), each L x d_emb
  std::vector<Tensor<S>> block_outputs;  // f_layer(H^k) per executed layer
};

/// Causal decoder with pre-norm residual blocks:
///   H^0 = tok_embed[t] + pos_embed
///   H^{k+1} = H^k + attn(rms_norm(H^k)) ; then + mlp(rms_norm(.))
/// followed by a final RMS norm and de-embedding to logits. Every linear map
/// carries a bias except the de-embedding, which stays a pure projection so
/// that weight tying is an exact transpose.
template <typename S>
class Transformer {
 public:
  Transformer(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = Rng::stream(seed, "model");
    const double std = 1.0 / std::sqrt(static_cast<double>(cfg_.d_emb));

    tok_embed_ = add_param("tok_embed", {cfg_.vocab_size, cfg_.d_emb}, rng, std);
    pos_embed_ = add_param("pos_embed", {cfg_.context_length, cfg_.d_emb}, rng, std);

    const std::int64_t d = cfg_.d_emb;
    layers_.resize(cfg_.num_layers);
    for (std::int64_t k = 0; k < cfg_.num_layers; ++k) {
      const std::string p = "layers." + std::to_string(k) + ".";
      auto& L = layers_[k];
      L.attn_gain = add_param(p + "attn_norm.gain", {d}, rng, /*std=*/0.0, /*fill=*/S(1));
      L.wq = add_param(p + "attn.wq", {d, d}, rng, std);
      L.bq = add_param(p + "attn.bq", {d}, rng, 0.0);
      L.wk = add_param(p + "attn.wk", {d, d}, rng, std);
      L.bk = add_param(p + "attn.bk", {d}, rng, 0.0);
      L.wv = add_param(p + "attn.wv", {d, d}, rng, std);
      L.bv = add_param(p + "attn.bv", {d}, rng, 0.0);
      L.wo = add_param(p + "attn.wo", {d, d}, rng, std);
      L.bo = add_param(p + "attn.bo", {d}, rng, 0.0);
      L.mlp_gain = add_param(p + "mlp_norm.gain", {d}, rng, 0.0, S(1));
      L.w1 = add_param(p + "mlp.w1", {d, cfg_.d_ff}, rng, std);
      L.b1 = add_param(p + "mlp.b1", {cfg_.d_ff}, rng, 0.0);
      L.w2 = add_param(p + "mlp.w2", {cfg_.d_ff, d}, rng, std);
      L.b2 = add_param(p + "mlp.b2", {d}, rng, 0.0);
    }
    final_gain_ = add_param("final_norm.gain", {d}, rng, 0.0, S(1));
    if (!cfg_.tie_embeddings) deembed_ = add_param("deembed", {d, cfg_.vocab_size}, rng, std);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam<S>>& params() { return params_; }
  const std::vector<NamedParam<S>>& params() const { return params_; }

  Tensor<S> param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    throw std::out_of_range("model: no parameter named " + name);
  }

  /// Overwrites a parameter's storage in place (checkpoint restore).
  void load_param(const std::string& name, const std::vector<S>& vals) {
    for (auto& p : params_) {
      if (p.name != name) continue;
      if (static_cast<std::int64_t>(vals.size()) != p.tensor.numel())
        throw std::invalid_argument("model: size mismatch loading " + name);
      p.tensor.values() = Eigen::Map<const ArrayX<S>>(vals.data(), vals.size());
      return;
    }
    throw std::out_of_range("model: no parameter named " + name);
  }

  /// Parameter count excluding the token-embedding, position-embedding, and
  /// de-embedding tables — the cost-model N.
  std::int64_t backbone_param_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_)
      if (p.name != "tok_embed" && p.name != "pos_embed" && p.name != "deembed") n += p.tensor.numel();
    return n;
  }

  std::int64_t total_param_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  /// Full forward pass: logits plus all D+1 residual-stream states.
  ForwardResult<S> forward(std::span<const std::int32_t> tokens) const {
    return run(tokens, cfg_.num_layers, /*want_logits=*/true);
  }

  /// Prefix forward through the first `up_to_layer` blocks only; logits and
  /// final norm are skipped. Used by hint training, which needs H^{D/2} alone.
  ForwardResult<S> forward_prefix(std::span<const std::int32_t> tokens, std::int64_t up_to_layer) const {
    if (up_to_layer < 0 || up_to_layer > cfg_.num_layers)
      throw std::invalid_argument("forward_prefix: layer " + std::to_string(up_to_layer) + " outside [0," +
                                  std::to_string(cfg_.num_layers) + "]");
    return run(tokens, up_to_layer, /*want_logits=*/false);
  }

  /// Names of every parameter a prefix forward through `up_to_layer` blocks
  /// can reach — the trainable set of hint-training phase 1.
  std::vector<std::string> prefix_param_names(std::int64_t up_to_layer) const {
    std::vector<std::string> out = {"tok_embed", "pos_embed"};
    for (std::int64_t k = 0; k < up_to_layer; ++k) {
      const std::string p = "layers." + std::to_string(k) + ".";
      for (const char* suffix : {"attn_norm.gain", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
                                 "attn.bv", "attn.wo", "attn.bo", "mlp_norm.gain", "mlp.w1", "mlp.b1",
                                 "mlp.w2", "mlp.b2"})
        out.push_back(p + suffix);
    }
    return out;
  }

 private:
  struct Layer {
    Tensor<S> attn_gain, wq, bq, wk, bk, wv, bv, wo, bo, mlp_gain, w1, b1, w2, b2;
  };

  Tensor<S> add_param(const std::string& name, Shape shape, Rng& rng, double std, S fill = S(0)) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape), /*requires_grad=*/true);
    if (std > 0.0) {
      for (std::int64_t i = 0; i < t.numel(); ++i) t.values()[i] = static_cast<S>(rng.truncated_normal(std));
    } else if (fill != S(0)) {
      t.values().setConstant(fill);
    }
    params_.push_back({name, t});
    return t;
  }

  ForwardResult<S> run(std::span<const std::int32_t> tokens, std::int64_t num_blocks, bool want_logits) const {
    const std::int64_t L = static_cast<std::int64_t>(tokens.size());
    if (L < 1) throw std::invalid_argument("forward: empty token sequence");
    if (L > cfg_.context_length)
      throw std::invalid_argument("forward: sequence length " + std::to_string(L) + " exceeds context " +
                                  std::to_string(cfg_.context_length));

    ForwardResult<S> res;
    std::vector<std::int64_t> pos(L);
    std::iota(pos.begin(), pos.end(), 0);
    Tensor<S> h = add(embedding_lookup(tok_embed_, tokens), gather_rows(pos_embed_, pos));
    res.hidden.push_back(h);

    const std::int64_t dh = cfg_.head_dim();
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (std::int64_t k = 0; k < num_blocks; ++k) {
      const auto& Ly = layers_[k];

      Tensor<S> a = rms_norm(h, Ly.attn_gain, static_cast<S>(cfg_.rms_eps));
      Tensor<S> q = add_bias(matmul(a, Ly.wq), Ly.bq);
      Tensor<S> kk = add_bias(matmul(a, Ly.wk), Ly.bk);
      Tensor<S> v = add_bias(matmul(a, Ly.wv), Ly.bv);
      std::vector<Tensor<S>> head_ctx;
      head_ctx.reserve(cfg_.num_heads);
      for (std::int64_t hd = 0; hd < cfg_.num_heads; ++hd) {
        Tensor<S> qh = col_block(q, hd * dh, dh);
        Tensor<S> kh = col_block(kk, hd * dh, dh);
        Tensor<S> vh = col_block(v, hd * dh, dh);
        Tensor<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        Tensor<S> probs = causal_masked_softmax(scores);
        head_ctx.push_back(matmul(probs, vh));
      }
      Tensor<S> ctx = cfg_.num_heads == 1 ? head_ctx[0] : concat_cols(head_ctx);
      Tensor<S> attn_out = add_bias(matmul(ctx, Ly.wo), Ly.bo);
      h = add(h, attn_out);

      Tensor<S> m = rms_norm(h, Ly.mlp_gain, static_cast<S>(cfg_.rms_eps));
      Tensor<S> mlp_out = add_bias(matmul(gelu(add_bias(matmul(m, Ly.w1), Ly.b1)), Ly.w2), Ly.b2);
      h = add(h, mlp_out);

      res.hidden.push_back(h);
      res.block_outputs.push_back(attn_out);
      res.block_outputs.push_back(mlp_out);
    }

    if (want_logits) {
      Tensor<S> f = rms_norm(h, final_gain_, static_cast<S>(cfg_.rms_eps));
      Tensor<S> de = cfg_.tie_embeddings ? transpose(tok_embed_) : deembed_;
      res.logits = matmul(f, de);
    }
    return res;
  }

  ModelConfig cfg_;
  std::vector<NamedParam<S>> params_;
  Tensor<S> tok_embed_, pos_embed_, final_gain_, deembed_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Regressors: the learned student-width -> teacher-width maps
// ---------------------------------------------------------------------------

enum class RegressorKind { Linear, Mlp };

struct RegressorConfig {
  RegressorKind kind = RegressorKind::Mlp;
  std::int64_t input_dim = 0;   // d_S
  std::int64_t output_dim = 0;  // d_T
  std::int64_t expansion = 4;   // MLP hidden = expansion * input_dim
};

template <typename S>
class Regressor {
 public:
  Regressor(RegressorConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.input_dim < 1 || cfg_.output_dim < 1)
      throw std::invalid_argument("regressor: dimensions must be positive");
    Rng rng = Rng::stream(seed, "regressor");
    const double std = 1.0 / std::sqrt(static_cast<double>(cfg_.input_dim));
    if (cfg_.kind == RegressorKind::Linear) {
      add_param("reg.w", {cfg_.input_dim, cfg_.output_dim}, rng, std);
      add_param("reg.b", {cfg_.output_dim}, rng, 0.0);
    } else {
      if (cfg_.expansion < 1) throw std::invalid_argument("regressor: expansion must be positive");
      const std::int64_t hidden = cfg_.expansion * cfg_.input_dim;
      add_param("reg.w1", {cfg_.input_dim, hidden}, rng, std);
      add_param("reg.b1", {hidden}, rng, 0.0);
      add_param("reg.w2", {hidden, cfg_.output_dim}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
      add_param("reg.b2", {cfg_.output_dim}, rng, 0.0);
    }
  }

  const RegressorConfig& config() const { return cfg_; }
  std::vector<NamedParam<S>>& params() { return params_; }
  const std::vector<NamedParam<S>>& params() const { return params_; }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  Tensor<S> forward(const Tensor<S>& h) const {
    if (h.rank() != 2 || h.cols() != cfg_.input_dim)
      throw std::invalid_argument("regressor: input " + shape_str(h.shape()) + " does not end in d_S=" +
                                  std::to_string(cfg_.input_dim));
    if (cfg_.kind == RegressorKind::Linear) return add_bias(matmul(h, params_[0].tensor), params_[1].tensor);
    Tensor<S> mid = gelu(add_bias(matmul(h, params_[0].tensor), params_[1].tensor));
    return add_bias(matmul(mid, params_[2].tensor), params_[3].tensor);
  }

 private:
  void add_param(const std::string& name, Shape shape, Rng& rng, double std) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape), /*requires_grad=*/true);
    if (std > 0.0)
      for (std::int64_t i = 0; i < t.numel(); ++i) t.values()[i] = static_cast<S>(rng.truncated_normal(std));
    params_.push_back({name, t});
  }

  RegressorConfig cfg_;
  std::vector<NamedParam<S>> params_;
};

/// Stable identity of a model: config plus every parameter's name and raw
/// little-endian bytes. Ties caches and eval reports to exact weights.
template <typename S>
Sha256 model_digest(const Transformer<S>& m) {
  const ModelConfig& c = m.config();
  std::ostringstream os;
  os << "layers=" << c.num_layers << ";d_emb=" << c.d_emb << ";heads=" << c.num_heads << ";d_ff=" << c.d_ff
     << ";vocab=" << c.vocab_size << ";ctx=" << c.context_length << ";eps=" << c.rms_eps
     << ";tied=" << (c.tie_embeddings ? 1 : 0) << ";scalar_bytes=" << sizeof(S) << ";";
  Sha256Stream h;
  h.update(os.str());
  for (const auto& p : m.params()) {
    h.update(p.name);
    h.update(p.tensor.values().data(), static_cast<std::size_t>(p.tensor.numel()) * sizeof(S));
  }
  return h.finish();
}

/// Regressor-count arithmetic without constructing tensors — feeds the cost
/// model before any weights exist.
inline std::int64_t regressor_param_count(const RegressorConfig& cfg) {
  if (cfg.kind == RegressorKind::Linear) return cfg.input_dim * cfg.output_dim + cfg.output_dim;
  const std::int64_t hidden = cfg.expansion * cfg.input_dim;
  return (cfg.input_dim * hidden + hidden) + (hidden * cfg.output_dim + cfg.output_dim);
}

template <typename S>
Tensor<S> regressor_forward(const Regressor<S>& reg, const Tensor<S>& h) {
  return reg.forward(h);
}

}  // namespace distlab
