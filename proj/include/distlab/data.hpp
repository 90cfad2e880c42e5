#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace distlab {

/// Byte-level or vocab-file tokenizer. The id vocab_size-1 is always the
/// reserved pad id and is never produced by encode().
class Tokenizer {
 public:
  enum class Kind { Byte, VocabFile };

  static Tokenizer byte_level();
  /// One token per line; ids assigned in file order. Encoding splits text on
  /// whitespace; an out-of-vocabulary word is an error.
  static Tokenizer from_vocab_file(const std::string& path);

  Kind kind() const { return kind_; }
  std::int64_t vocab_size() const { return vocab_size_; }
  std::int32_t pad_id() const { return static_cast<std::int32_t>(vocab_size_ - 1); }

  std::vector<std::int32_t> encode(const std::string& text) const;
  std::string decode(std::span<const std::int32_t> ids) const;

 private:
  Kind kind_ = Kind::Byte;
  std::int64_t vocab_size_ = 257;
  std::vector<std::string> table_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// Fixed-context packed token sequences with a train/val split that is
/// disjoint by source document. Documents are chunked to the context length;
/// a document's final short chunk is padded with the pad id (loss-masked
/// downstream); chunks never mix tokens from two documents.
class TokenDataset {
 public:
  enum class Split { Train, Val };

  /// Packs documents, splitting off round(val_fraction * num_docs) documents
  /// for validation via a seed-keyed shuffle.
  static TokenDataset pack(const std::vector<std::vector<std::int32_t>>& docs, std::int64_t vocab_size,
                           std::int64_t context_length, double val_fraction, std::uint64_t seed);

  void save(const std::string& path) const;
  static TokenDataset load(const std::string& path);

  std::int64_t vocab_size() const { return vocab_size_; }
  std::int64_t context_length() const { return context_length_; }
  std::int32_t pad_id() const { return static_cast<std::int32_t>(vocab_size_ - 1); }
  const std::string& payload_digest() const { return digest_; }

  std::int64_t num_sequences(Split s) const;
  /// Full padded row of length context_length.
  std::span<const std::int32_t> sequence(Split s, std::int64_t i) const;
  /// Tokens before the first pad — the loss-bearing prefix.
  std::int64_t valid_len(Split s, std::int64_t i) const;
  std::int64_t total_valid_tokens(Split s) const;

 private:
  const std::vector<std::int32_t>& store(Split s) const;

  std::int64_t vocab_size_ = 0;
  std::int64_t context_length_ = 0;
  std::vector<std::int32_t> train_, val_;          // row-major, context_length stride
  std::vector<std::int32_t> train_len_, val_len_;  // valid prefix lengths
  std::string digest_;                             // hex sha256 of the token payload
};

/// Order-1 Markov chain over {0..S-1} with its stationary distribution and
/// analytic entropy rate computed at construction — the oracle corpus.
class MarkovSource {
 public:
  explicit MarkovSource(Eigen::MatrixXd transition);

  /// Circulant one-parameter family hitting an exact entropy target in
  /// [0, ln S): every row is a rotation of ((1-t) + t/S, t/S, ..., t/S),
  /// which keeps the stationary distribution uniform, so the entropy rate is
  /// just the row entropy; t is found by bisection.
  static MarkovSource with_entropy(std::int64_t num_states, double target_nats);

  std::int64_t num_states() const { return transition_.rows(); }
  const Eigen::MatrixXd& transition() const { return transition_; }
  const Eigen::VectorXd& stationary() const { return stationary_; }
  double entropy_rate() const { return entropy_rate_; }

  std::vector<std::int32_t> sample(std::int64_t num_tokens, std::uint64_t seed) const;

 private:
  Eigen::MatrixXd transition_;
  Eigen::VectorXd stationary_;
  double entropy_rate_ = 0.0;
};

/// Splits one token stream into consecutive full-length documents of
/// `context_length` tokens each (remainder dropped), ready for packing.
std::vector<std::vector<std::int32_t>> chunk_stream(std::span<const std::int32_t> stream,
                                                    std::int64_t context_length);

/// Tokenizes texts (one document each) and packs them.
TokenDataset tokenize_corpus(const std::vector<std::string>& texts, const Tokenizer& tok,
                             std::int64_t context_length, double val_fraction, std::uint64_t seed);

/// Deterministic epoch-shuffled iterator over the train split. Batches are a
/// continuous stream: when an epoch's permutation is exhausted the next epoch
/// is reshuffled and the batch continues from its head, so every sequence is
/// visited exactly once per epoch.
class DataCursor {
 public:
  DataCursor(const TokenDataset& ds, std::int64_t batch_size, std::uint64_t seed);

  std::vector<std::int64_t> next_batch();
  std::int64_t epochs_started() const { return epoch_; }
  /// Fractional passes over the train split served so far.
  double passes_served() const;

 private:
  void reshuffle();

  const TokenDataset* ds_;
  std::int64_t batch_size_;
  std::uint64_t seed_;
  std::vector<std::int64_t> perm_;
  std::int64_t pos_ = 0;
  std::int64_t epoch_ = 0;  // 1-based once the first permutation exists
  std::int64_t served_ = 0;
};

}  // namespace distlab
