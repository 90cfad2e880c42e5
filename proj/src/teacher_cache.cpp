#include "distlab/teacher_cache.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <stdexcept>

namespace distlab {

namespace {

constexpr char kMagic[4] = {'T', 'D', 'C', '1'};

void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>(v >> 8));
}
void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::string encode_header(const CacheHeader& h) {
  std::string b;
  b.reserve(CacheHeader::kBytes);
  b.append(kMagic, 4);
  put_u16(b, h.version);
  put_u32(b, h.vocab_size);
  put_u16(b, h.top_k);
  put_u32(b, h.d_t);
  put_u16(b, h.teacher_layer);
  b.push_back(static_cast<char>(h.logit_dtype));
  b.push_back(static_cast<char>(h.activation_dtype));
  put_u32(b, h.context_length);
  put_u64(b, h.num_sequences);
  b.append(reinterpret_cast<const char*>(h.teacher_digest.data()), h.teacher_digest.size());
  if (static_cast<std::int64_t>(b.size()) != CacheHeader::kBytes)
    throw std::logic_error("cache: header encoding drifted from its documented 64 bytes");
  return b;
}

std::uint16_t get_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void encode_values(std::string& buf, const std::vector<float>& vals, CacheDtype dtype) {
  if (dtype == CacheDtype::F32) {
    const auto old = buf.size();
    buf.resize(old + vals.size() * 4);
    std::memcpy(buf.data() + old, vals.data(), vals.size() * 4);
  } else {
    for (float v : vals) {
      const Eigen::half h(v);
      std::uint16_t bits;
      std::memcpy(&bits, &h, 2);
      put_u16(buf, bits);
    }
  }
}

std::vector<float> decode_values(const unsigned char* p, std::int64_t count, CacheDtype dtype) {
  std::vector<float> out(static_cast<std::size_t>(count));
  if (dtype == CacheDtype::F32) {
    std::memcpy(out.data(), p, static_cast<std::size_t>(count) * 4);
  } else {
    for (std::int64_t i = 0; i < count; ++i) {
      Eigen::half h;
      std::memcpy(&h, p + i * 2, 2);
      out[static_cast<std::size_t>(i)] = static_cast<float>(h);
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// CacheWriter
// ---------------------------------------------------------------------------

CacheWriter::CacheWriter(CacheHeader header, std::vector<std::uint32_t> sequence_lengths,
                         const std::string& path)
    : header_(header), path_(path) {
  if (header_.top_k < 1 || header_.top_k > header_.vocab_size)
    throw std::invalid_argument("cache: top_k must lie in [1, vocab_size]");
  header_.num_sequences = sequence_lengths.size();
  for (auto len : sequence_lengths) {
    if (len > header_.context_length)
      throw std::invalid_argument("cache: sequence length " + std::to_string(len) + " exceeds context " +
                                  std::to_string(header_.context_length));
    expected_records_ += len;
  }

  out_.open(path, std::ios::binary | std::ios::trunc);
  if (!out_) throw std::runtime_error("cache: cannot write " + path);
  const std::string hdr = encode_header(header_);
  out_.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  std::string table;
  table.reserve(sequence_lengths.size() * 4);
  for (auto len : sequence_lengths) put_u32(table, len);
  out_.write(table.data(), static_cast<std::streamsize>(table.size()));
}

void CacheWriter::append(const CacheRecord& rec) {
  if (finished_) throw std::logic_error("cache: append after finish");
  if (written_ >= expected_records_) throw std::logic_error("cache: more records than declared lengths");
  const auto k = static_cast<std::size_t>(header_.top_k);
  if (rec.topk.indices.size() != k || rec.topk.values.size() != k)
    throw std::invalid_argument("cache: record has " + std::to_string(rec.topk.indices.size()) +
                                " top-k entries, header says " + std::to_string(k));
  if (rec.activation.size() != header_.d_t)
    throw std::invalid_argument("cache: activation size " + std::to_string(rec.activation.size()) +
                                " != d_t " + std::to_string(header_.d_t));
  for (std::size_t i = 0; i < k; ++i) {
    if (rec.topk.indices[i] >= header_.vocab_size)
      throw std::invalid_argument("cache: index " + std::to_string(rec.topk.indices[i]) + " >= vocab");
    for (std::size_t j = i + 1; j < k; ++j)
      if (rec.topk.indices[i] == rec.topk.indices[j])
        throw std::invalid_argument("cache: duplicate top-k index " + std::to_string(rec.topk.indices[i]));
  }

  std::string buf;
  buf.reserve(static_cast<std::size_t>(header_.record_bytes()));
  for (auto idx : rec.topk.indices) put_u32(buf, idx);
  encode_values(buf, rec.topk.values, header_.logit_dtype);
  encode_values(buf, rec.activation, header_.activation_dtype);
  out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  ++written_;
}

CacheHeader CacheWriter::finish() {
  if (finished_) throw std::logic_error("cache: finish called twice");
  if (written_ != expected_records_)
    throw std::runtime_error("cache: wrote " + std::to_string(written_) + " records, lengths promised " +
                             std::to_string(expected_records_));
  out_.flush();
  if (!out_) throw std::runtime_error("cache: write failed for " + path_);
  out_.close();
  finished_ = true;
  return header_;
}

// ---------------------------------------------------------------------------
// CacheReader
// ---------------------------------------------------------------------------

CacheReader::CacheReader(const std::string& path) : in_(path, std::ios::binary) {
  if (!in_) throw std::runtime_error("cache: cannot open " + path);

  unsigned char raw[CacheHeader::kBytes];
  in_.read(reinterpret_cast<char*>(raw), CacheHeader::kBytes);
  if (in_.gcount() != CacheHeader::kBytes) throw std::runtime_error("cache: " + path + " too short for a header");
  if (std::memcmp(raw, kMagic, 4) != 0)
    throw std::runtime_error("cache: " + path + " has wrong format (bad magic, expected TDC1)");
  header_.version = get_u16(raw + 4);
  if (header_.version != 1)
    throw std::runtime_error("cache: " + path + " has unsupported format version " +
                             std::to_string(header_.version));
  header_.vocab_size = get_u32(raw + 6);
  header_.top_k = get_u16(raw + 10);
  header_.d_t = get_u32(raw + 12);
  header_.teacher_layer = get_u16(raw + 16);
  header_.logit_dtype = static_cast<CacheDtype>(raw[18]);
  header_.activation_dtype = static_cast<CacheDtype>(raw[19]);
  header_.context_length = get_u32(raw + 20);
  header_.num_sequences = get_u64(raw + 24);
  std::memcpy(header_.teacher_digest.data(), raw + 32, 32);
  if (raw[18] > 1 || raw[19] > 1)
    throw std::runtime_error("cache: " + path + " has unknown dtype codes");
  if (header_.top_k < 1 || header_.top_k > header_.vocab_size)
    throw std::runtime_error("cache: " + path + " header has top_k outside [1, vocab]");

  lengths_.resize(header_.num_sequences);
  record_start_.resize(header_.num_sequences + 1, 0);
  std::vector<unsigned char> table(header_.num_sequences * 4);
  in_.read(reinterpret_cast<char*>(table.data()), static_cast<std::streamsize>(table.size()));
  if (static_cast<std::size_t>(in_.gcount()) != table.size())
    throw std::runtime_error("cache: " + path + " truncated inside the length table");
  for (std::uint64_t i = 0; i < header_.num_sequences; ++i) {
    lengths_[i] = get_u32(table.data() + i * 4);
    record_start_[i + 1] = record_start_[i] + lengths_[i];
  }
  records_base_ = CacheHeader::kBytes + static_cast<std::int64_t>(table.size());

  const std::int64_t expected = records_base_ + record_start_.back() * header_.record_bytes();
  in_.seekg(0, std::ios::end);
  const std::int64_t actual = static_cast<std::int64_t>(in_.tellg());
  if (actual != expected)
    throw std::runtime_error("cache: " + path + " length " + std::to_string(actual) +
                             " does not match header-implied " + std::to_string(expected));
}

std::int64_t CacheReader::sequence_length(std::int64_t seq) const {
  if (seq < 0 || seq >= num_sequences())
    throw std::out_of_range("cache: sequence " + std::to_string(seq) + " out of range [0," +
                            std::to_string(num_sequences()) + ")");
  return lengths_[static_cast<std::size_t>(seq)];
}

std::int64_t CacheReader::record_offset(std::int64_t seq, std::int64_t pos) const {
  const std::int64_t len = sequence_length(seq);
  if (pos < 0 || pos >= len)
    throw std::out_of_range("cache: position " + std::to_string(pos) + " beyond sequence length " +
                            std::to_string(len));
  return records_base_ + (record_start_[static_cast<std::size_t>(seq)] + pos) * header_.record_bytes();
}

CacheRecord CacheReader::read(std::int64_t seq, std::int64_t pos) const {
  std::vector<unsigned char> buf(static_cast<std::size_t>(header_.record_bytes()));
  in_.seekg(record_offset(seq, pos));
  in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in_.gcount()) != buf.size())
    throw std::runtime_error("cache: short read at seq " + std::to_string(seq) + " pos " + std::to_string(pos));

  CacheRecord rec;
  const auto k = static_cast<std::int64_t>(header_.top_k);
  rec.topk.indices.resize(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) rec.topk.indices[static_cast<std::size_t>(i)] = get_u32(buf.data() + i * 4);
  const unsigned char* vals = buf.data() + k * 4;
  rec.topk.values = decode_values(vals, k, header_.logit_dtype);
  const unsigned char* act = vals + k * dtype_bytes(header_.logit_dtype);
  rec.activation = decode_values(act, header_.d_t, header_.activation_dtype);
  return rec;
}

TopKLogits CacheReader::read_topk(std::int64_t seq, std::int64_t pos) const {
  const auto k = static_cast<std::int64_t>(header_.top_k);
  std::vector<unsigned char> buf(static_cast<std::size_t>(k * (4 + dtype_bytes(header_.logit_dtype))));
  in_.seekg(record_offset(seq, pos));
  in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in_.gcount()) != buf.size())
    throw std::runtime_error("cache: short read at seq " + std::to_string(seq) + " pos " + std::to_string(pos));
  TopKLogits tk;
  tk.indices.resize(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) tk.indices[static_cast<std::size_t>(i)] = get_u32(buf.data() + i * 4);
  tk.values = decode_values(buf.data() + k * 4, k, header_.logit_dtype);
  return tk;
}

std::vector<float> CacheReader::read_activation(std::int64_t seq, std::int64_t pos) const {
  const auto k = static_cast<std::int64_t>(header_.top_k);
  const std::int64_t skip = k * (4 + dtype_bytes(header_.logit_dtype));
  std::vector<unsigned char> buf(static_cast<std::size_t>(header_.d_t) *
                                 static_cast<std::size_t>(dtype_bytes(header_.activation_dtype)));
  in_.seekg(record_offset(seq, pos) + skip);
  in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in_.gcount()) != buf.size())
    throw std::runtime_error("cache: short read at seq " + std::to_string(seq) + " pos " + std::to_string(pos));
  return decode_values(buf.data(), header_.d_t, header_.activation_dtype);
}

// ---------------------------------------------------------------------------
// Teacher pass
// ---------------------------------------------------------------------------

TopKLogits top_k_of_row(const float* logits, std::int64_t vocab, std::int64_t k) {
  if (k < 1 || k > vocab) throw std::invalid_argument("top_k_of_row: k outside [1, vocab]");
  std::vector<std::uint32_t> idx(static_cast<std::size_t>(vocab));
  std::iota(idx.begin(), idx.end(), 0u);
  auto better = [logits](std::uint32_t a, std::uint32_t b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;  // tie: lower token index wins
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  TopKLogits out;
  out.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  out.values.reserve(static_cast<std::size_t>(k));
  for (auto i : out.indices) out.values.push_back(logits[i]);
  return out;
}

CacheHeader cache_teacher(const Transformer<float>& teacher, const TokenDataset& corpus,
                          TokenDataset::Split split, std::int64_t layer, std::int64_t k,
                          const std::string& out_path, CacheDtype logit_dtype, CacheDtype activation_dtype) {
  const ModelConfig& cfg = teacher.config();
  if (layer < 1 || layer >= cfg.num_layers)
    throw std::invalid_argument("cache: layer " + std::to_string(layer) + " outside [1," +
                                std::to_string(cfg.num_layers - 1) + "]");
  if (k < 1 || k > cfg.vocab_size) throw std::invalid_argument("cache: k outside [1, vocab]");
  if (corpus.vocab_size() != cfg.vocab_size)
    throw std::invalid_argument("cache: corpus vocab " + std::to_string(corpus.vocab_size()) +
                                " != teacher vocab " + std::to_string(cfg.vocab_size));

  const std::int64_t num_seq = corpus.num_sequences(split);
  std::vector<std::uint32_t> lengths(static_cast<std::size_t>(num_seq));
  for (std::int64_t i = 0; i < num_seq; ++i)
    lengths[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(corpus.valid_len(split, i));

  CacheHeader header;
  header.vocab_size = static_cast<std::uint32_t>(cfg.vocab_size);
  header.top_k = static_cast<std::uint16_t>(k);
  header.d_t = static_cast<std::uint32_t>(cfg.d_emb);
  header.teacher_layer = static_cast<std::uint16_t>(layer);
  header.logit_dtype = logit_dtype;
  header.activation_dtype = activation_dtype;
  header.context_length = static_cast<std::uint32_t>(cfg.context_length);
  header.teacher_digest = model_digest(teacher);

  CacheWriter writer(header, lengths, out_path);
  for (std::int64_t s = 0; s < num_seq; ++s) {
    const std::int64_t len = corpus.valid_len(split, s);
    if (len == 0) continue;
    auto toks = corpus.sequence(split, s).subspan(0, static_cast<std::size_t>(len));
    auto fwd = teacher.forward(toks);
    auto logits = fwd.logits.mat();
    auto hidden = fwd.hidden[static_cast<std::size_t>(layer)].mat();
    std::vector<float> row(static_cast<std::size_t>(cfg.vocab_size));
    CacheRecord rec;
    rec.activation.resize(static_cast<std::size_t>(cfg.d_emb));
    for (std::int64_t p = 0; p < len; ++p) {
      for (std::int64_t v = 0; v < cfg.vocab_size; ++v) row[static_cast<std::size_t>(v)] = logits(p, v);
      rec.topk = top_k_of_row(row.data(), cfg.vocab_size, k);
      for (std::int64_t dd = 0; dd < cfg.d_emb; ++dd) rec.activation[static_cast<std::size_t>(dd)] = hidden(p, dd);
      writer.append(rec);
    }
  }
  return writer.finish();
}

// ---------------------------------------------------------------------------
// Storage accounting
// ---------------------------------------------------------------------------

StorageEstimate storage_estimate(std::int64_t vocab_size, std::int64_t k, std::int64_t d_t,
                                 CacheDtype logit_dtype, CacheDtype activation_dtype,
                                 std::int64_t num_sequences, std::int64_t num_tokens) {
  if (k < 1 || k > vocab_size) throw std::invalid_argument("storage_estimate: k outside [1, vocab]");
  StorageEstimate e;
  e.logit_bytes_per_token = k * (4 + dtype_bytes(logit_dtype));
  e.activation_bytes_per_token = d_t * dtype_bytes(activation_dtype);
  e.bytes_per_token = e.logit_bytes_per_token + e.activation_bytes_per_token;
  e.framing_bytes = CacheHeader::kBytes + 4 * num_sequences;
  e.total_bytes = e.framing_bytes + num_tokens * e.bytes_per_token;
  e.logit_compression_ratio = static_cast<double>(vocab_size * dtype_bytes(logit_dtype)) /
                              static_cast<double>(e.logit_bytes_per_token);
  return e;
}

}  // namespace distlab
