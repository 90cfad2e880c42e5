#pragma once

// Held-out evaluation: log-perplexity over a token dataset and a generic
// multiple-choice error-rate scorer. Both walk the model read-only, accumulate
// in double in a fixed order, and report through a small serializable record.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "distlab/data.hpp"
#include "distlab/digest.hpp"
#include "distlab/model.hpp"

namespace distlab {

enum class MetricKind { LogPpl, ErrorRate };
enum class ChoiceNorm { TotalNll, PerTokenNll };

std::string metric_name(MetricKind m);
std::string choice_norm_name(ChoiceNorm n);
ChoiceNorm choice_norm_from_name(const std::string& name);

struct EvalReport {
  std::string dataset_id;
  MetricKind metric = MetricKind::LogPpl;
  double value = 0.0;
  std::int64_t token_count = 0;    // scored next-token predictions
  std::int64_t example_count = 0;  // sequences or items
  std::string model_digest;
};

std::string eval_report_to_json(const EvalReport& r);

struct MultipleChoiceItem {
  std::vector<std::int32_t> context;
  std::vector<std::vector<std::int32_t>> choices;
  std::int64_t gold = -1;
};

/// Line-delimited JSON: one {"context": [...], "choices": [[...], ...],
/// "gold": i} object per line. Blank lines are skipped; errors carry the
/// 1-based line number.
std::vector<MultipleChoiceItem> load_mc_items(const std::string& path);

namespace detail {

/// Log-softmax denominator and max of one logits row, in double.
template <typename M>
std::pair<double, double> row_log_norm(const M& row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::int64_t v = 0; v < row.size(); ++v) mx = std::max(mx, static_cast<double>(row(v)));
  double z = 0.0;
  for (std::int64_t v = 0; v < row.size(); ++v) z += std::exp(static_cast<double>(row(v)) - mx);
  return {mx, std::log(z)};
}

/// Sum of next-token NLLs for positions [first_target, last_target] of one
/// forward pass, in order.
template <typename S>
double span_nll(const Transformer<S>& model, std::span<const std::int32_t> tokens,
                std::int64_t first_target, std::int64_t last_target) {
  ForwardResult<S> fwd = model.forward(tokens);
  auto lm = fwd.logits.mat();
  double acc = 0.0;
  for (std::int64_t t = first_target; t <= last_target; ++t) {
    auto [mx, lz] = row_log_norm(lm.row(t - 1));
    acc -= static_cast<double>(lm(t - 1, tokens[static_cast<std::size_t>(t)])) - mx - lz;
  }
  return acc;
}

}  // namespace detail

/// Token-weighted mean NLL (nats) over every valid next-token prediction in
/// one split. Sequences shorter than two valid tokens contribute nothing.
template <typename S>
EvalReport log_perplexity(const Transformer<S>& model, const TokenDataset& ds,
                          TokenDataset::Split split) {
  if (ds.vocab_size() != model.config().vocab_size)
    throw std::invalid_argument("eval: dataset vocab " + std::to_string(ds.vocab_size()) +
                                " != model vocab " + std::to_string(model.config().vocab_size));
  double acc = 0.0;
  std::int64_t tokens = 0, examples = 0;
  for (std::int64_t i = 0; i < ds.num_sequences(split); ++i) {
    const std::int64_t len = ds.valid_len(split, i);
    if (len < 2) continue;
    auto seq = ds.sequence(split, i).subspan(0, static_cast<std::size_t>(len));
    acc += detail::span_nll(model, seq, 1, len - 1);
    tokens += len - 1;
    ++examples;
  }
  if (tokens == 0) throw std::invalid_argument("eval: no scorable tokens in split");
  EvalReport r;
  r.dataset_id = ds.payload_digest().substr(0, 12) +
                 (split == TokenDataset::Split::Train ? ":train" : ":val");
  r.metric = MetricKind::LogPpl;
  r.value = acc / static_cast<double>(tokens);
  r.token_count = tokens;
  r.example_count = examples;
  r.model_digest = hex(model_digest(model));
  return r;
}

/// Argmin-NLL multiple-choice scoring: each choice is appended to the context,
/// scored as NLL(choice | context) under the selected normalization, and the
/// lowest-scoring choice (ties to the lowest index) is the prediction.
template <typename S>
EvalReport mc_error_rate(const Transformer<S>& model, const std::vector<MultipleChoiceItem>& items,
                         ChoiceNorm norm = ChoiceNorm::PerTokenNll,
                         const std::string& dataset_id = "mc") {
  if (items.empty()) throw std::invalid_argument("eval: no multiple-choice items");
  std::int64_t mistakes = 0, tokens = 0;
  for (std::size_t n = 0; n < items.size(); ++n) {
    const MultipleChoiceItem& item = items[n];
    if (item.choices.size() < 2)
      throw std::invalid_argument("eval: item " + std::to_string(n) + " has fewer than 2 choices");
    if (item.gold < 0 || item.gold >= static_cast<std::int64_t>(item.choices.size()))
      throw std::invalid_argument("eval: item " + std::to_string(n) + " gold index out of range");
    if (item.context.empty())
      throw std::invalid_argument("eval: item " + std::to_string(n) + " has an empty context");
    std::int64_t best = -1;
    double best_score = 0.0;
    for (std::size_t c = 0; c < item.choices.size(); ++c) {
      const auto& choice = item.choices[c];
      if (choice.empty())
        throw std::invalid_argument("eval: item " + std::to_string(n) + " choice " +
                                    std::to_string(c) + " is empty");
      std::vector<std::int32_t> full = item.context;
      full.insert(full.end(), choice.begin(), choice.end());
      const std::int64_t ctx = static_cast<std::int64_t>(item.context.size());
      const std::int64_t total = static_cast<std::int64_t>(full.size());
      double score = detail::span_nll(model, full, ctx, total - 1);
      if (norm == ChoiceNorm::PerTokenNll) score /= static_cast<double>(choice.size());
      tokens += static_cast<std::int64_t>(choice.size());
      if (best < 0 || score < best_score) {  // strict: ties keep the lower index
        best = static_cast<std::int64_t>(c);
        best_score = score;
      }
    }
    if (best != item.gold) ++mistakes;
  }
  EvalReport r;
  r.dataset_id = dataset_id;
  r.metric = MetricKind::ErrorRate;
  r.value = static_cast<double>(mistakes) / static_cast<double>(items.size());
  r.token_count = tokens;
  r.example_count = static_cast<std::int64_t>(items.size());
  r.model_digest = hex(model_digest(model));
  return r;
}

}  // namespace distlab
