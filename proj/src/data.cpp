#include "distlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "distlab/digest.hpp"
#include "distlab/rng.hpp"

namespace distlab {

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

Tokenizer Tokenizer::byte_level() {
  Tokenizer t;
  t.kind_ = Kind::Byte;
  t.vocab_size_ = 257;  // 256 byte values + pad
  return t;
}

Tokenizer Tokenizer::from_vocab_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("tokenizer: cannot open vocab file " + path);
  Tokenizer t;
  t.kind_ = Kind::VocabFile;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (t.index_.count(line)) throw std::runtime_error("tokenizer: duplicate vocab entry `" + line + "`");
    t.index_[line] = static_cast<std::int32_t>(t.table_.size());
    t.table_.push_back(line);
  }
  if (t.table_.empty()) throw std::runtime_error("tokenizer: empty vocab file " + path);
  t.vocab_size_ = static_cast<std::int64_t>(t.table_.size()) + 1;  // + pad
  return t;
}

std::vector<std::int32_t> Tokenizer::encode(const std::string& text) const {
  std::vector<std::int32_t> ids;
  if (kind_ == Kind::Byte) {
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
    return ids;
  }
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    auto it = index_.find(word);
    if (it == index_.end()) throw std::runtime_error("tokenizer: unknown symbol `" + word + "`");
    ids.push_back(it->second);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int32_t id = ids[i];
    if (id < 0 || id >= vocab_size_ - 1)
      throw std::out_of_range("tokenizer: id " + std::to_string(id) + " not decodable");
    if (kind_ == Kind::Byte) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else {
      if (i) out.push_back(' ');
      out += table_[static_cast<std::size_t>(id)];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// TokenDataset
// ---------------------------------------------------------------------------

TokenDataset TokenDataset::pack(const std::vector<std::vector<std::int32_t>>& docs, std::int64_t vocab_size,
                                std::int64_t context_length, double val_fraction, std::uint64_t seed) {
  if (context_length < 2) throw std::invalid_argument("dataset: context_length must be >= 2");
  if (vocab_size < 2) throw std::invalid_argument("dataset: vocab_size must be >= 2");
  if (val_fraction < 0.0 || val_fraction >= 1.0)
    throw std::invalid_argument("dataset: val_fraction must lie in [0,1)");

  TokenDataset ds;
  ds.vocab_size_ = vocab_size;
  ds.context_length_ = context_length;
  const std::int32_t pad = ds.pad_id();

  // Seed-keyed document shuffle, then the tail becomes validation: the split
  // is by document, so no chunk ever mixes the two.
  std::vector<std::int64_t> order(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  Rng rng = Rng::stream(seed, "split");
  for (std::int64_t i = static_cast<std::int64_t>(order.size()) - 1; i > 0; --i)
    std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  const auto num_val_docs = static_cast<std::int64_t>(std::llround(val_fraction * static_cast<double>(docs.size())));

  for (std::int64_t oi = 0; oi < static_cast<std::int64_t>(order.size()); ++oi) {
    const auto& doc = docs[static_cast<std::size_t>(order[oi])];
    const bool is_val = oi >= static_cast<std::int64_t>(order.size()) - num_val_docs;
    auto& seqs = is_val ? ds.val_ : ds.train_;
    auto& lens = is_val ? ds.val_len_ : ds.train_len_;
    for (std::size_t start = 0; start < doc.size(); start += static_cast<std::size_t>(context_length)) {
      const std::size_t len = std::min(static_cast<std::size_t>(context_length), doc.size() - start);
      for (std::size_t j = 0; j < len; ++j) {
        const std::int32_t tok = doc[start + j];
        if (tok < 0 || tok >= pad)
          throw std::invalid_argument("dataset: token " + std::to_string(tok) +
                                      " collides with pad id or exceeds vocab " + std::to_string(vocab_size));
        seqs.push_back(tok);
      }
      for (std::size_t j = len; j < static_cast<std::size_t>(context_length); ++j) seqs.push_back(pad);
      lens.push_back(static_cast<std::int32_t>(len));
    }
  }

  std::string payload;
  payload.reserve((ds.train_.size() + ds.val_.size()) * 4);
  auto append = [&payload](const std::vector<std::int32_t>& v) {
    for (std::int32_t t : v) {
      const auto u = static_cast<std::uint32_t>(t);
      payload.push_back(static_cast<char>(u & 0xff));
      payload.push_back(static_cast<char>((u >> 8) & 0xff));
      payload.push_back(static_cast<char>((u >> 16) & 0xff));
      payload.push_back(static_cast<char>((u >> 24) & 0xff));
    }
  };
  append(ds.train_);
  append(ds.val_);
  ds.digest_ = hex(sha256(payload));
  return ds;
}

void TokenDataset::save(const std::string& path) const {
  nlohmann::json header = {
      {"format", "distlab-tokens-v1"},
      {"vocab_size", vocab_size_},
      {"context_length", context_length_},
      {"pad_id", pad_id()},
      {"num_train", num_sequences(Split::Train)},
      {"num_val", num_sequences(Split::Val)},
      {"payload_digest", digest_},
  };
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("dataset: cannot write " + path);
  f << header.dump() << '\n';
  auto write_tokens = [&f](const std::vector<std::int32_t>& v) {
    for (std::int32_t t : v) {
      const auto u = static_cast<std::uint32_t>(t);
      const char bytes[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                             static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
      f.write(bytes, 4);
    }
  };
  write_tokens(train_);
  write_tokens(val_);
  if (!f) throw std::runtime_error("dataset: write failed for " + path);
}

TokenDataset TokenDataset::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("dataset: cannot open " + path);
  std::string header_line;
  if (!std::getline(f, header_line)) throw std::runtime_error("dataset: missing header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("dataset: bad header in " + path + ": " + e.what());
  }
  if (header.value("format", "") != "distlab-tokens-v1")
    throw std::runtime_error("dataset: " + path + " is not a distlab-tokens-v1 file");

  TokenDataset ds;
  ds.vocab_size_ = header.at("vocab_size").get<std::int64_t>();
  ds.context_length_ = header.at("context_length").get<std::int64_t>();
  const auto num_train = header.at("num_train").get<std::int64_t>();
  const auto num_val = header.at("num_val").get<std::int64_t>();
  const auto expected_digest = header.at("payload_digest").get<std::string>();

  const std::int64_t total = (num_train + num_val) * ds.context_length_;
  std::string payload(static_cast<std::size_t>(total) * 4, '\0');
  f.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (f.gcount() != static_cast<std::streamsize>(payload.size()))
    throw std::runtime_error("dataset: " + path + " truncated");
  char extra;
  if (f.read(&extra, 1) && f.gcount() > 0)
    throw std::runtime_error("dataset: " + path + " has trailing bytes beyond the declared payload");

  ds.digest_ = hex(sha256(payload));
  if (ds.digest_ != expected_digest)
    throw std::runtime_error("dataset: payload digest mismatch in " + path);

  auto read_u32 = [&payload](std::int64_t i) {
    const auto* p = reinterpret_cast<const unsigned char*>(payload.data()) + i * 4;
    return static_cast<std::int32_t>(static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                                     (static_cast<std::uint32_t>(p[2]) << 16) |
                                     (static_cast<std::uint32_t>(p[3]) << 24));
  };
  ds.train_.resize(static_cast<std::size_t>(num_train * ds.context_length_));
  ds.val_.resize(static_cast<std::size_t>(num_val * ds.context_length_));
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(ds.train_.size()); ++i) ds.train_[i] = read_u32(i);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(ds.val_.size()); ++i)
    ds.val_[i] = read_u32(num_train * ds.context_length_ + i);

  const std::int32_t pad = ds.pad_id();
  auto fill_lens = [&](const std::vector<std::int32_t>& seqs, std::vector<std::int32_t>& lens) {
    const std::int64_t n = ds.context_length_;
    for (std::size_t s = 0; s < seqs.size() / static_cast<std::size_t>(n); ++s) {
      std::int32_t len = static_cast<std::int32_t>(n);
      for (std::int64_t j = 0; j < n; ++j) {
        if (seqs[s * n + static_cast<std::size_t>(j)] == pad) {
          len = static_cast<std::int32_t>(j);
          break;
        }
      }
      lens.push_back(len);
    }
  };
  fill_lens(ds.train_, ds.train_len_);
  fill_lens(ds.val_, ds.val_len_);
  return ds;
}

const std::vector<std::int32_t>& TokenDataset::store(Split s) const {
  return s == Split::Train ? train_ : val_;
}

std::int64_t TokenDataset::num_sequences(Split s) const {
  return static_cast<std::int64_t>(store(s).size()) / context_length_;
}

std::span<const std::int32_t> TokenDataset::sequence(Split s, std::int64_t i) const {
  if (i < 0 || i >= num_sequences(s))
    throw std::out_of_range("dataset: sequence " + std::to_string(i) + " out of range");
  return {store(s).data() + i * context_length_, static_cast<std::size_t>(context_length_)};
}

std::int64_t TokenDataset::valid_len(Split s, std::int64_t i) const {
  if (i < 0 || i >= num_sequences(s))
    throw std::out_of_range("dataset: sequence " + std::to_string(i) + " out of range");
  return (s == Split::Train ? train_len_ : val_len_)[static_cast<std::size_t>(i)];
}

std::int64_t TokenDataset::total_valid_tokens(Split s) const {
  const auto& lens = s == Split::Train ? train_len_ : val_len_;
  std::int64_t total = 0;
  for (auto l : lens) total += l;
  return total;
}

// ---------------------------------------------------------------------------
// MarkovSource
// ---------------------------------------------------------------------------

MarkovSource::MarkovSource(Eigen::MatrixXd transition) : transition_(std::move(transition)) {
  const std::int64_t S = transition_.rows();
  if (S < 2 || transition_.cols() != S)
    throw std::invalid_argument("markov: transition matrix must be square with >= 2 states");
  for (std::int64_t r = 0; r < S; ++r) {
    if (transition_.row(r).minCoeff() < 0.0) throw std::invalid_argument("markov: negative probability");
    if (std::abs(transition_.row(r).sum() - 1.0) > 1e-12)
      throw std::invalid_argument("markov: row " + std::to_string(r) + " sums to " +
                                  std::to_string(transition_.row(r).sum()) + ", not 1");
  }

  // Power iteration from uniform; for periodic chains uniform is already the
  // doubly-stochastic fixed point, so this still terminates.
  stationary_ = Eigen::VectorXd::Constant(S, 1.0 / static_cast<double>(S));
  for (int it = 0; it < 100000; ++it) {
    Eigen::VectorXd next = transition_.transpose() * stationary_;
    next /= next.sum();
    const double delta = (next - stationary_).cwiseAbs().maxCoeff();
    stationary_ = next;
    if (delta < 1e-15) break;
  }

  double h = 0.0;
  for (std::int64_t s = 0; s < S; ++s)
    for (std::int64_t t = 0; t < S; ++t) {
      const double p = transition_(s, t);
      if (p > 0.0) h -= stationary_[s] * p * std::log(p);
    }
  entropy_rate_ = h;
}

MarkovSource MarkovSource::with_entropy(std::int64_t num_states, double target_nats) {
  if (num_states < 2) throw std::invalid_argument("markov: need >= 2 states");
  const double S = static_cast<double>(num_states);
  const double h_max = std::log(S);
  if (target_nats < 0.0 || target_nats >= h_max)
    throw std::invalid_argument("markov: target entropy " + std::to_string(target_nats) +
                                " outside [0, ln " + std::to_string(num_states) + ")");

  // Row entropy of ((1-t)+t/S, t/S, ...): strictly increasing from 0 (t=0,
  // deterministic cycle) to ln S (t=1, uniform).
  auto row_entropy = [&](double t) {
    const double p0 = (1.0 - t) + t / S;
    const double pr = t / S;
    double h = 0.0;
    if (p0 > 0.0) h -= p0 * std::log(p0);
    if (pr > 0.0) h -= (S - 1.0) * pr * std::log(pr);
    return h;
  };
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (row_entropy(mid) < target_nats ? lo : hi) = mid;
  }
  const double t = 0.5 * (lo + hi);

  Eigen::MatrixXd P(num_states, num_states);
  for (std::int64_t r = 0; r < num_states; ++r)
    for (std::int64_t c = 0; c < num_states; ++c) {
      // rotation: the "stay-heavy" slot of row r is column (r+1) mod S
      const bool head = c == (r + 1) % num_states;
      P(r, c) = head ? (1.0 - t) + t / S : t / S;
    }
  return MarkovSource(P);
}

std::vector<std::int32_t> MarkovSource::sample(std::int64_t num_tokens, std::uint64_t seed) const {
  if (num_tokens < 0) throw std::invalid_argument("markov: negative sample length");
  std::vector<std::int32_t> out;
  out.reserve(static_cast<std::size_t>(num_tokens));
  if (num_tokens == 0) return out;

  Rng rng = Rng::stream(seed, "markov");
  auto draw = [&rng](const auto& probs, std::int64_t n) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      acc += probs(i);
      if (u < acc) return static_cast<std::int32_t>(i);
    }
    return static_cast<std::int32_t>(n - 1);
  };

  std::int32_t state = draw(stationary_, num_states());
  out.push_back(state);
  for (std::int64_t i = 1; i < num_tokens; ++i) {
    state = draw(transition_.row(state), num_states());
    out.push_back(state);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus helpers
// ---------------------------------------------------------------------------

std::vector<std::vector<std::int32_t>> chunk_stream(std::span<const std::int32_t> stream,
                                                    std::int64_t context_length) {
  if (context_length < 2) throw std::invalid_argument("chunk_stream: context_length must be >= 2");
  std::vector<std::vector<std::int32_t>> docs;
  const std::size_t n = static_cast<std::size_t>(context_length);
  for (std::size_t start = 0; start + n <= stream.size(); start += n)
    docs.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(start),
                      stream.begin() + static_cast<std::ptrdiff_t>(start + n));
  return docs;
}

TokenDataset tokenize_corpus(const std::vector<std::string>& texts, const Tokenizer& tok,
                             std::int64_t context_length, double val_fraction, std::uint64_t seed) {
  std::vector<std::vector<std::int32_t>> docs;
  docs.reserve(texts.size());
  for (const auto& t : texts) docs.push_back(tok.encode(t));
  return TokenDataset::pack(docs, tok.vocab_size(), context_length, val_fraction, seed);
}

// ---------------------------------------------------------------------------
// DataCursor
// ---------------------------------------------------------------------------

DataCursor::DataCursor(const TokenDataset& ds, std::int64_t batch_size, std::uint64_t seed)
    : ds_(&ds), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw std::invalid_argument("cursor: batch_size must be positive");
  if (ds.num_sequences(TokenDataset::Split::Train) == 0)
    throw std::invalid_argument("cursor: dataset has no training sequences");
}

void DataCursor::reshuffle() {
  ++epoch_;
  const std::int64_t n = ds_->num_sequences(TokenDataset::Split::Train);
  perm_.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) perm_[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng::stream(seed_, "data.epoch." + std::to_string(epoch_));
  for (std::int64_t i = n - 1; i > 0; --i)
    std::swap(perm_[static_cast<std::size_t>(i)], perm_[rng.below(static_cast<std::uint64_t>(i + 1))]);
  pos_ = 0;
}

std::vector<std::int64_t> DataCursor::next_batch() {
  std::vector<std::int64_t> batch;
  batch.reserve(static_cast<std::size_t>(batch_size_));
  while (static_cast<std::int64_t>(batch.size()) < batch_size_) {
    if (pos_ >= static_cast<std::int64_t>(perm_.size())) reshuffle();
    batch.push_back(perm_[static_cast<std::size_t>(pos_++)]);
  }
  served_ += batch_size_;
  return batch;
}

double DataCursor::passes_served() const {
  return static_cast<double>(served_) / static_cast<double>(ds_->num_sequences(TokenDataset::Split::Train));
}

}  // namespace distlab
