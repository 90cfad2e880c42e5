#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "distlab/data.hpp"
#include "distlab/digest.hpp"
#include "distlab/model.hpp"

namespace distlab {

enum class CacheDtype : std::uint8_t { F32 = 0, F16 = 1 };

inline std::int64_t dtype_bytes(CacheDtype d) { return d == CacheDtype::F32 ? 4 : 2; }

/// Fixed 64-byte header of the teacher-cache file format (magic "TDC1").
/// Layout, little-endian throughout:
///   magic[4] version:u16 vocab_size:u32 top_k:u16 d_t:u32 teacher_layer:u16
///   logit_dtype:u8 activation_dtype:u8 context_length:u32 num_sequences:u64
///   teacher_digest[32]
/// followed by num_sequences u32 per-sequence token counts, then fixed-stride
/// records in sequence order.
struct CacheHeader {
  std::uint16_t version = 1;
  std::uint32_t vocab_size = 0;
  std::uint16_t top_k = 0;
  std::uint32_t d_t = 0;
  std::uint16_t teacher_layer = 0;
  CacheDtype logit_dtype = CacheDtype::F32;
  CacheDtype activation_dtype = CacheDtype::F32;
  std::uint32_t context_length = 0;
  std::uint64_t num_sequences = 0;
  Sha256 teacher_digest{};

  static constexpr std::int64_t kBytes = 64;

  std::int64_t record_bytes() const {
    return static_cast<std::int64_t>(top_k) * (4 + dtype_bytes(logit_dtype)) +
           static_cast<std::int64_t>(d_t) * dtype_bytes(activation_dtype);
  }
};

/// Per-position teacher signal: the k largest logits (indices descending by
/// logit, ties to the lower index) and one mid-layer activation row.
struct TopKLogits {
  std::vector<std::uint32_t> indices;
  std::vector<float> values;
};

struct CacheRecord {
  TopKLogits topk;
  std::vector<float> activation;
};

/// Streaming writer. Sequence lengths are declared up front so the length
/// table can precede the records and the whole file is written in one pass.
class CacheWriter {
 public:
  CacheWriter(CacheHeader header, std::vector<std::uint32_t> sequence_lengths, const std::string& path);
  /// Records must arrive in (sequence, position) order, exactly matching the
  /// declared lengths.
  void append(const CacheRecord& rec);
  /// Validates the record count and flushes. Returns the final header.
  CacheHeader finish();

 private:
  CacheHeader header_;
  std::ofstream out_;
  std::string path_;
  std::int64_t expected_records_ = 0;
  std::int64_t written_ = 0;
  bool finished_ = false;
};

/// Random-access reader; (sequence, position) resolves in O(1) via the
/// fixed record stride and a prefix-sum of sequence lengths.
class CacheReader {
 public:
  explicit CacheReader(const std::string& path);

  const CacheHeader& header() const { return header_; }
  std::int64_t num_sequences() const { return static_cast<std::int64_t>(header_.num_sequences); }
  std::int64_t sequence_length(std::int64_t seq) const;

  CacheRecord read(std::int64_t seq, std::int64_t pos) const;
  TopKLogits read_topk(std::int64_t seq, std::int64_t pos) const;
  std::vector<float> read_activation(std::int64_t seq, std::int64_t pos) const;

 private:
  std::int64_t record_offset(std::int64_t seq, std::int64_t pos) const;

  CacheHeader header_;
  std::vector<std::uint32_t> lengths_;
  std::vector<std::int64_t> record_start_;  // prefix sums over lengths
  mutable std::ifstream in_;
  std::int64_t records_base_ = 0;
};

/// Offline teacher pass over one split of a dataset: one record per valid
/// (non-pad) token position per sequence, in order. Deterministic given the
/// teacher weights and corpus.
CacheHeader cache_teacher(const Transformer<float>& teacher, const TokenDataset& corpus,
                          TokenDataset::Split split, std::int64_t layer, std::int64_t k,
                          const std::string& out_path, CacheDtype logit_dtype = CacheDtype::F32,
                          CacheDtype activation_dtype = CacheDtype::F32);

/// The k largest entries of one logit row, descending by value, ties broken
/// toward the lower index.
TopKLogits top_k_of_row(const float* logits, std::int64_t vocab, std::int64_t k);

/// Exact storage accounting for a cache file of the given shape.
struct StorageEstimate {
  std::int64_t logit_bytes_per_token = 0;       // k * (4 + logit dtype)
  std::int64_t activation_bytes_per_token = 0;  // d_T * activation dtype
  std::int64_t bytes_per_token = 0;
  std::int64_t framing_bytes = 0;  // header + length table
  std::int64_t total_bytes = 0;
  /// Full-vocab logit storage divided by top-k logit storage (index bytes
  /// included); < 1 when k == V because indices are pure overhead.
  double logit_compression_ratio = 0.0;
};

StorageEstimate storage_estimate(std::int64_t vocab_size, std::int64_t k, std::int64_t d_t,
                                 CacheDtype logit_dtype, CacheDtype activation_dtype,
                                 std::int64_t num_sequences, std::int64_t num_tokens);

}  // namespace distlab
