#pragma once

// The four training objectives and their constituents: next-token NLL,
// temperature KL against cached top-k teacher logits, the composite
// distillation loss, the normalized hint loss, and the joint aggregate.
// Everything returns a scalar Tensor wired into the active tape, so a single
// backward() call differentiates any composite.

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "distlab/model.hpp"
#include "distlab/teacher_cache.hpp"
#include "distlab/tensor.hpp"

namespace distlab {

/// Hyperparameters shared by all distillation objectives. beta keeps a -1
/// sentinel meaning "1 - alpha", which makes the joint objective collapse to
/// the plain composite exactly when gamma is zero.
struct DistillConfig {
  double alpha = 0.5;        // weight on the logit-matching term
  double beta = -1.0;        // weight on the data term; -1 means 1 - alpha
  double gamma = 0.0;        // weight on the embedding (hint) term
  double temperature = 1.0;  // softmax temperature for logit matching
  std::int64_t top_k = 128;  // retained teacher logits per position
  std::int64_t teacher_layer = -1;  // cached teacher residual layer
  std::int64_t student_layer = -1;  // student residual layer fed to the regressor
  double phase1_fraction = 0.0;     // budget share of sequential hint training
  /// When true, student probabilities are renormalized over the k retained
  /// indices before the KL; when false they are gathered from the
  /// full-vocabulary softmax, so mass leaked off-support stays penalized.
  bool renormalize_student = false;

  double effective_beta() const { return beta < 0 ? 1.0 - alpha : beta; }

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("distill: alpha outside [0,1]");
    if (beta != -1.0 && !(beta >= 0.0)) throw std::invalid_argument("distill: beta must be >= 0 (or -1 for 1-alpha)");
    if (!(gamma >= 0.0)) throw std::invalid_argument("distill: gamma must be >= 0");
    if (!(temperature > 0.0)) throw std::invalid_argument("distill: temperature must be positive");
    if (top_k < 1) throw std::invalid_argument("distill: top_k must be >= 1");
    if (!(phase1_fraction >= 0.0 && phase1_fraction < 1.0))
      throw std::invalid_argument("distill: phase1_fraction outside [0,1)");
  }
};

/// One training example: a cache sequence index plus its valid (non-pad)
/// token prefix. Padding never enters a loss because batches carry only the
/// valid prefix of each sequence.
struct BatchItem {
  std::int64_t sequence = -1;
  std::span<const std::int32_t> tokens;
};
using Batch = std::vector<BatchItem>;

/// A composite loss with its unweighted constituents, for step metrics.
/// Components whose weight is exactly zero are skipped, not computed; their
/// slot holds a detached scalar zero.
template <typename S>
struct LossParts {
  Tensor<S> total;
  Tensor<S> data;    // NLL term
  Tensor<S> logits;  // temperature KL term
  Tensor<S> emb;     // normalized embedding/hint term
};

// ---------------------------------------------------------------------------
// Constituent losses
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of each next token under a temperature-1
/// softmax: -(1/(n-1)) * sum_i log p_i[t_{i+1}] for one sequence of n tokens.
template <typename S>
Tensor<S> nll_loss(const Tensor<S>& logits, std::span<const std::int32_t> tokens) {
  const std::int64_t n = static_cast<std::int64_t>(tokens.size());
  if (n < 2) throw std::invalid_argument("nll_loss: need at least 2 tokens, got " + std::to_string(n));
  if (logits.rank() != 2 || logits.rows() != n)
    throw std::invalid_argument("nll_loss: logits rows " + std::to_string(logits.rows()) +
                                " != sequence length " + std::to_string(n));
  std::vector<std::pair<std::int64_t, std::int64_t>> targets;
  targets.reserve(static_cast<std::size_t>(n - 1));
  for (std::int64_t i = 0; i + 1 < n; ++i) {
    const std::int64_t t = tokens[static_cast<std::size_t>(i + 1)];
    if (t < 0 || t >= logits.cols())
      throw std::out_of_range("nll_loss: token " + std::to_string(t) + " outside vocab of " +
                              std::to_string(logits.cols()));
    targets.emplace_back(i, t);
  }
  Tensor<S> lp = gather_coeffs(log_softmax(logits), std::move(targets), {n - 1, 1});
  return scale(sum(lp), S(-1) / static_cast<S>(n - 1));
}

/// Temperature KL between cached top-k teacher logits and student logits:
/// per position, teacher probabilities are the softmax of the k retained
/// values at temperature tau (equivalently, the full-vocabulary teacher
/// softmax renormalized over its own top-k support); student log-probabilities
/// come from the full-vocabulary log-softmax of logits/tau, gathered at the
/// teacher indices — or renormalized over them when renormalize_student is
/// set. Returns (tau^2 / n) * sum_i KL(p_T_i || p_S_i).
template <typename S>
Tensor<S> kl_topk(const std::vector<TopKLogits>& teacher, const Tensor<S>& student_logits,
                  double temperature, bool renormalize_student = false) {
  if (!(temperature > 0.0)) throw std::invalid_argument("kl_topk: temperature must be positive");
  if (student_logits.rank() != 2) throw std::invalid_argument("kl_topk: rank-2 logits required");
  const std::int64_t n = student_logits.rows();
  const std::int64_t v = student_logits.cols();
  if (static_cast<std::int64_t>(teacher.size()) != n)
    throw std::invalid_argument("kl_topk: " + std::to_string(teacher.size()) +
                                " teacher records for " + std::to_string(n) + " positions");
  if (n == 0) throw std::invalid_argument("kl_topk: empty input");
  const std::int64_t k = static_cast<std::int64_t>(teacher.front().indices.size());
  if (k < 1) throw std::invalid_argument("kl_topk: empty teacher record");

  // Teacher side is constant: probabilities and their entropy term in double.
  std::vector<S> probs(static_cast<std::size_t>(n * k));
  std::vector<std::pair<std::int64_t, std::int64_t>> sites(static_cast<std::size_t>(n * k));
  double plogp = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const TopKLogits& rec = teacher[static_cast<std::size_t>(i)];
    if (static_cast<std::int64_t>(rec.indices.size()) != k ||
        static_cast<std::int64_t>(rec.values.size()) != k)
      throw std::invalid_argument("kl_topk: ragged teacher records (position " + std::to_string(i) + ")");
    for (std::int64_t a = 0; a < k; ++a) {
      const std::uint32_t idx = rec.indices[static_cast<std::size_t>(a)];
      if (idx >= static_cast<std::uint32_t>(v))
        throw std::out_of_range("kl_topk: teacher index " + std::to_string(idx) + " outside vocab of " +
                                std::to_string(v));
      for (std::int64_t b = a + 1; b < k; ++b)
        if (rec.indices[static_cast<std::size_t>(b)] == idx)
          throw std::invalid_argument("kl_topk: duplicate teacher index " + std::to_string(idx) +
                                      " at position " + std::to_string(i));
      sites[static_cast<std::size_t>(i * k + a)] = {i, static_cast<std::int64_t>(idx)};
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t a = 0; a < k; ++a)
      mx = std::max(mx, static_cast<double>(rec.values[static_cast<std::size_t>(a)]) / temperature);
    double z = 0.0;
    for (std::int64_t a = 0; a < k; ++a)
      z += std::exp(static_cast<double>(rec.values[static_cast<std::size_t>(a)]) / temperature - mx);
    for (std::int64_t a = 0; a < k; ++a) {
      const double p =
          std::exp(static_cast<double>(rec.values[static_cast<std::size_t>(a)]) / temperature - mx) / z;
      probs[static_cast<std::size_t>(i * k + a)] = static_cast<S>(p);
      if (p > 0.0) plogp += p * std::log(p);
    }
  }

  // Student side carries the gradient.
  Tensor<S> scaled = scale(student_logits, S(1) / static_cast<S>(temperature));
  Tensor<S> student_lp;
  if (renormalize_student) {
    student_lp = log_softmax(gather_coeffs(scaled, std::move(sites), {n, k}));
  } else {
    student_lp = gather_coeffs(log_softmax(scaled), std::move(sites), {n, k});
  }
  Tensor<S> p_const = Tensor<S>::from_values({n, k}, std::move(probs));
  Tensor<S> cross = sum(mul(p_const, student_lp));  // sum_i sum_a p * log q

  const double factor = temperature * temperature / static_cast<double>(n);
  return add(Tensor<S>::scalar(static_cast<S>(factor * plogp)),
             scale(cross, static_cast<S>(-factor)));
}

/// Rows of both inputs scaled to unit Euclidean norm, then the elementwise
/// mean squared difference over all entries. Rejects near-zero rows.
template <typename S>
Tensor<S> normalized_mse(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("normalized_mse: shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor<S> d = sub(row_unit_normalize(a), row_unit_normalize(b));
  return mean(mul(d, d));
}

/// Hint loss: normalized MSE between a cached teacher activation block and
/// the regressor's image of the live student activation. Gradients reach the
/// regressor and every student parameter the activation depends on.
template <typename S>
Tensor<S> hint_loss(const Tensor<S>& teacher_hidden, const Tensor<S>& student_hidden,
                    const Regressor<S>& reg) {
  return normalized_mse(teacher_hidden, regressor_forward(reg, student_hidden));
}

// ---------------------------------------------------------------------------
// Batch plumbing against a teacher cache
// ---------------------------------------------------------------------------

namespace detail {

inline void check_batch_item(const BatchItem& item, const CacheReader& cache) {
  if (item.sequence < 0 || item.sequence >= cache.num_sequences())
    throw std::out_of_range("batch: sequence " + std::to_string(item.sequence) + " outside cache of " +
                            std::to_string(cache.num_sequences()));
  if (static_cast<std::int64_t>(item.tokens.size()) > cache.sequence_length(item.sequence))
    throw std::invalid_argument("batch: " + std::to_string(item.tokens.size()) +
                                " tokens but cache sequence " + std::to_string(item.sequence) +
                                " holds " + std::to_string(cache.sequence_length(item.sequence)) +
                                " records");
}

template <typename S>
Tensor<S> batch_mean(std::vector<Tensor<S>> losses) {
  Tensor<S> acc = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) acc = add(acc, losses[i]);
  return scale(acc, S(1) / static_cast<S>(losses.size()));
}

/// Cached teacher activations for one batch item as an L x d_T constant.
template <typename S>
Tensor<S> cached_activations(const CacheReader& cache, const BatchItem& item) {
  const std::int64_t len = static_cast<std::int64_t>(item.tokens.size());
  const std::int64_t d_t = static_cast<std::int64_t>(cache.header().d_t);
  std::vector<S> vals(static_cast<std::size_t>(len * d_t));
  for (std::int64_t p = 0; p < len; ++p) {
    std::vector<float> row = cache.read_activation(item.sequence, p);
    for (std::int64_t j = 0; j < d_t; ++j)
      vals[static_cast<std::size_t>(p * d_t + j)] = static_cast<S>(row[static_cast<std::size_t>(j)]);
  }
  return Tensor<S>::from_values({len, d_t}, std::move(vals));
}

inline std::vector<TopKLogits> cached_topk(const CacheReader& cache, const BatchItem& item) {
  std::vector<TopKLogits> recs;
  recs.reserve(item.tokens.size());
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(item.tokens.size()); ++p)
    recs.push_back(cache.read_topk(item.sequence, p));
  return recs;
}

}  // namespace detail

/// Composite distillation loss over a batch: (1-alpha) * NLL + alpha * KL.
/// A weight of exactly zero skips its term entirely, so alpha=0 reproduces
/// plain NLL training bit-for-bit and alpha=1 pure logit matching.
template <typename S>
LossParts<S> kd_loss_parts(const Batch& batch, const Transformer<S>& student,
                           const CacheReader& cache, const DistillConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("kd_loss: empty batch");
  if (cfg.top_k != static_cast<std::int64_t>(cache.header().top_k))
    throw std::invalid_argument("kd_loss: config top_k " + std::to_string(cfg.top_k) +
                                " != cache top_k " + std::to_string(cache.header().top_k));
  const bool want_data = cfg.alpha < 1.0;
  const bool want_logits = cfg.alpha > 0.0;
  std::vector<Tensor<S>> data_terms, logit_terms;
  for (const BatchItem& item : batch) {
    detail::check_batch_item(item, cache);
    ForwardResult<S> fwd = student.forward(item.tokens);
    if (want_data) data_terms.push_back(nll_loss(fwd.logits, item.tokens));
    if (want_logits)
      logit_terms.push_back(kl_topk(detail::cached_topk(cache, item), fwd.logits, cfg.temperature,
                                    cfg.renormalize_student));
  }
  LossParts<S> parts;
  parts.data = want_data ? detail::batch_mean(std::move(data_terms)) : Tensor<S>::scalar(S(0));
  parts.logits = want_logits ? detail::batch_mean(std::move(logit_terms)) : Tensor<S>::scalar(S(0));
  parts.emb = Tensor<S>::scalar(S(0));
  if (!want_logits) {
    parts.total = parts.data;
  } else if (!want_data) {
    parts.total = parts.logits;
  } else {
    parts.total = add(scale(parts.data, static_cast<S>(1.0 - cfg.alpha)),
                      scale(parts.logits, static_cast<S>(cfg.alpha)));
  }
  return parts;
}

template <typename S>
Tensor<S> kd_loss(const Batch& batch, const Transformer<S>& student, const CacheReader& cache,
                  const DistillConfig& cfg) {
  return kd_loss_parts(batch, student, cache, cfg).total;
}

/// Joint aggregate: beta * NLL + alpha * KL + gamma * hint, with the hint term
/// matching the cached teacher activation against the regressor's image of
/// the student's configured residual layer. With gamma=0 and beta=1-alpha it
/// reduces to the composite distillation loss.
template <typename S>
LossParts<S> hldc_loss_parts(const Batch& batch, const Transformer<S>& student,
                             const CacheReader& cache, const Regressor<S>& reg,
                             const DistillConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("hldc_loss: empty batch");
  if (cfg.top_k != static_cast<std::int64_t>(cache.header().top_k))
    throw std::invalid_argument("hldc_loss: config top_k " + std::to_string(cfg.top_k) +
                                " != cache top_k " + std::to_string(cache.header().top_k));
  if (cfg.teacher_layer >= 0 && cfg.teacher_layer != static_cast<std::int64_t>(cache.header().teacher_layer))
    throw std::invalid_argument("hldc_loss: cache holds teacher layer " +
                                std::to_string(cache.header().teacher_layer) + ", config expects " +
                                std::to_string(cfg.teacher_layer));
  const std::int64_t d_s = student.config().num_layers;
  if (cfg.student_layer < 1 || cfg.student_layer > d_s)
    throw std::invalid_argument("hldc_loss: student layer " + std::to_string(cfg.student_layer) +
                                " outside [1," + std::to_string(d_s) + "]");
  const double beta = cfg.effective_beta();
  const bool want_data = beta > 0.0;
  const bool want_logits = cfg.alpha > 0.0;
  const bool want_emb = cfg.gamma > 0.0;
  std::vector<Tensor<S>> data_terms, logit_terms, emb_terms;
  for (const BatchItem& item : batch) {
    detail::check_batch_item(item, cache);
    ForwardResult<S> fwd = student.forward(item.tokens);
    if (want_data) data_terms.push_back(nll_loss(fwd.logits, item.tokens));
    if (want_logits)
      logit_terms.push_back(kl_topk(detail::cached_topk(cache, item), fwd.logits, cfg.temperature,
                                    cfg.renormalize_student));
    if (want_emb)
      emb_terms.push_back(hint_loss(detail::cached_activations<S>(cache, item),
                                    fwd.hidden[static_cast<std::size_t>(cfg.student_layer)], reg));
  }
  LossParts<S> parts;
  parts.data = want_data ? detail::batch_mean(std::move(data_terms)) : Tensor<S>::scalar(S(0));
  parts.logits = want_logits ? detail::batch_mean(std::move(logit_terms)) : Tensor<S>::scalar(S(0));
  parts.emb = want_emb ? detail::batch_mean(std::move(emb_terms)) : Tensor<S>::scalar(S(0));
  std::vector<Tensor<S>> weighted;
  if (want_data) weighted.push_back(scale(parts.data, static_cast<S>(beta)));
  if (want_logits) weighted.push_back(scale(parts.logits, static_cast<S>(cfg.alpha)));
  if (want_emb) weighted.push_back(scale(parts.emb, static_cast<S>(cfg.gamma)));
  if (weighted.empty()) throw std::invalid_argument("hldc_loss: all three weights are zero");
  parts.total = weighted.front();
  for (std::size_t i = 1; i < weighted.size(); ++i) parts.total = add(parts.total, weighted[i]);
  return parts;
}

template <typename S>
Tensor<S> hldc_loss(const Batch& batch, const Transformer<S>& student, const CacheReader& cache,
                    const Regressor<S>& reg, const DistillConfig& cfg) {
  return hldc_loss_parts(batch, student, cache, reg, cfg).total;
}

/// Phase-1 objective of sequential hint training: mean hint loss over the
/// batch, with the student run only through its configured prefix so upper
/// layers and the de-embedding never enter the tape.
template <typename S>
Tensor<S> hint_batch_loss(const Batch& batch, const Transformer<S>& student,
                          const CacheReader& cache, const Regressor<S>& reg,
                          const DistillConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("hint_batch_loss: empty batch");
  if (cfg.teacher_layer >= 0 && cfg.teacher_layer != static_cast<std::int64_t>(cache.header().teacher_layer))
    throw std::invalid_argument("hint_batch_loss: cache holds teacher layer " +
                                std::to_string(cache.header().teacher_layer) + ", config expects " +
                                std::to_string(cfg.teacher_layer));
  const std::int64_t d_s = student.config().num_layers;
  if (cfg.student_layer < 1 || cfg.student_layer > d_s)
    throw std::invalid_argument("hint_batch_loss: student layer " + std::to_string(cfg.student_layer) +
                                " outside [1," + std::to_string(d_s) + "]");
  std::vector<Tensor<S>> terms;
  for (const BatchItem& item : batch) {
    detail::check_batch_item(item, cache);
    ForwardResult<S> fwd = student.forward_prefix(item.tokens, cfg.student_layer);
    terms.push_back(hint_loss(detail::cached_activations<S>(cache, item), fwd.hidden.back(), reg));
  }
  return detail::batch_mean(std::move(terms));
}

}  // namespace distlab
