#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "distlab/teacher_cache.hpp"

using namespace distlab;
using Split = TokenDataset::Split;

namespace {

std::string temp_path(const std::string& name) { return "/tmp/distlab_cache_" + name; }

CacheHeader small_header(std::uint16_t k = 4, std::uint32_t d_t = 6) {
  CacheHeader h;
  h.vocab_size = 32;
  h.top_k = k;
  h.d_t = d_t;
  h.teacher_layer = 1;
  h.context_length = 16;
  return h;
}

CacheRecord random_record(Rng& rng, const CacheHeader& h) {
  CacheRecord rec;
  std::set<std::uint32_t> used;
  while (used.size() < h.top_k) used.insert(static_cast<std::uint32_t>(rng.below(h.vocab_size)));
  rec.topk.indices.assign(used.begin(), used.end());
  for (std::size_t i = 0; i < h.top_k; ++i) rec.topk.values.push_back(static_cast<float>(rng.normal()));
  for (std::size_t i = 0; i < h.d_t; ++i) rec.activation.push_back(static_cast<float>(rng.normal()));
  return rec;
}

Transformer<float> tiny_teacher() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.d_emb = 8;
  cfg.num_heads = 2;
  cfg.d_ff = 16;
  cfg.vocab_size = 8;
  cfg.context_length = 8;
  return Transformer<float>(cfg, 1234);
}

TokenDataset one_seq_dataset() {
  std::vector<std::vector<std::int32_t>> docs = {{1, 5, 3, 2}};
  return TokenDataset::pack(docs, 8, 4, 0.0, 1);
}

}  // namespace

TEST_CASE("write-read round trip is bit-identical") {
  const std::string path = temp_path("roundtrip.tdc");
  CacheHeader h = small_header();
  std::vector<std::uint32_t> lengths = {3, 0, 5};

  Rng rng(77);
  std::vector<CacheRecord> recs;
  for (int i = 0; i < 8; ++i) recs.push_back(random_record(rng, h));

  CacheWriter w(h, lengths, path);
  for (const auto& r : recs) w.append(r);
  CacheHeader written = w.finish();
  CHECK(written.num_sequences == 3);

  CacheReader r(path);
  CHECK(r.header().vocab_size == h.vocab_size);
  CHECK(r.header().top_k == h.top_k);
  CHECK(r.header().d_t == h.d_t);
  CHECK(r.header().teacher_layer == h.teacher_layer);
  CHECK(r.header().context_length == h.context_length);
  CHECK(r.sequence_length(0) == 3);
  CHECK(r.sequence_length(1) == 0);
  CHECK(r.sequence_length(2) == 5);

  std::size_t flat = 0;
  for (std::int64_t s = 0; s < 3; ++s) {
    for (std::int64_t p = 0; p < r.sequence_length(s); ++p, ++flat) {
      CacheRecord got = r.read(s, p);
      CHECK(got.topk.indices == recs[flat].topk.indices);
      for (std::size_t i = 0; i < h.top_k; ++i) CHECK(got.topk.values[i] == recs[flat].topk.values[i]);
      for (std::size_t i = 0; i < h.d_t; ++i) CHECK(got.activation[i] == recs[flat].activation[i]);
      // partial readers agree with the full record
      auto tk = r.read_topk(s, p);
      auto act = r.read_activation(s, p);
      CHECK(tk.indices == got.topk.indices);
      CHECK(act == got.activation);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("cached top-k matches a live forward pass exactly in f32") {
  Transformer<float> teacher = tiny_teacher();
  TokenDataset ds = one_seq_dataset();
  const std::string path = temp_path("fidelity.tdc");

  CacheHeader h = cache_teacher(teacher, ds, Split::Train, /*layer=*/1, /*k=*/3, path);
  CHECK(h.num_sequences == 1);
  CHECK(h.d_t == 8);

  CacheReader r(path);
  REQUIRE(r.sequence_length(0) == 4);

  auto fwd = teacher.forward(ds.sequence(Split::Train, 0));
  auto logits = fwd.logits.mat();
  auto hidden = fwd.hidden[1].mat();
  for (std::int64_t p = 0; p < 4; ++p) {
    std::vector<float> row(8);
    for (int v = 0; v < 8; ++v) row[static_cast<std::size_t>(v)] = logits(p, v);
    TopKLogits expect = top_k_of_row(row.data(), 8, 3);
    CacheRecord rec = r.read(0, p);
    CHECK(rec.topk.indices == expect.indices);
    for (int i = 0; i < 3; ++i) CHECK(rec.topk.values[static_cast<std::size_t>(i)] == expect.values[static_cast<std::size_t>(i)]);
    for (int dd = 0; dd < 8; ++dd) CHECK(rec.activation[static_cast<std::size_t>(dd)] == hidden(p, dd));
  }
  std::remove(path.c_str());
}

TEST_CASE("k equal to vocab stores a permutation of the full logit row") {
  Transformer<float> teacher = tiny_teacher();
  TokenDataset ds = one_seq_dataset();
  const std::string path = temp_path("fullk.tdc");
  cache_teacher(teacher, ds, Split::Train, 1, /*k=*/8, path);

  CacheReader r(path);
  auto fwd = teacher.forward(ds.sequence(Split::Train, 0));
  auto logits = fwd.logits.mat();
  CacheRecord rec = r.read(0, 2);
  std::multiset<float> cached(rec.topk.values.begin(), rec.topk.values.end());
  std::multiset<float> live;
  for (int v = 0; v < 8; ++v) live.insert(logits(2, v));
  CHECK(cached == live);
  for (std::size_t i = 1; i < rec.topk.values.size(); ++i)
    CHECK(rec.topk.values[i - 1] >= rec.topk.values[i]);  // descending by logit
  std::remove(path.c_str());
}

TEST_CASE("caching is deterministic: two passes give byte-identical files") {
  Transformer<float> teacher = tiny_teacher();
  TokenDataset ds = one_seq_dataset();
  const std::string p1 = temp_path("det1.tdc"), p2 = temp_path("det2.tdc");
  cache_teacher(teacher, ds, Split::Train, 1, 3, p1);
  cache_teacher(teacher, ds, Split::Train, 1, 3, p2);
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK_FALSE(sa.empty());
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("empty corpus produces a header-and-table-only cache") {
  Transformer<float> teacher = tiny_teacher();
  std::vector<std::vector<std::int32_t>> docs;
  TokenDataset empty = TokenDataset::pack(docs, 8, 4, 0.0, 1);
  const std::string path = temp_path("empty.tdc");
  CacheHeader h = cache_teacher(teacher, empty, Split::Train, 1, 3, path);
  CHECK(h.num_sequences == 0);
  CacheReader r(path);
  CHECK(r.num_sequences() == 0);
  CHECK(std::filesystem::file_size(path) == CacheHeader::kBytes);
  std::remove(path.c_str());
}

TEST_CASE("corrupted magic yields a format error") {
  const std::string path = temp_path("badmagic.tdc");
  CacheHeader h = small_header();
  CacheWriter w(h, {1}, path);
  Rng rng(5);
  w.append(random_record(rng, h));
  w.finish();
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
  }
  try {
    CacheReader r(path);
    FAIL("expected a format error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("format") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("truncated file is rejected with the implied length") {
  const std::string path = temp_path("trunc.tdc");
  CacheHeader h = small_header();
  CacheWriter w(h, {2}, path);
  Rng rng(6);
  w.append(random_record(rng, h));
  w.append(random_record(rng, h));
  w.finish();
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(CacheReader{path}, std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("out-of-range reads are range errors") {
  const std::string path = temp_path("range.tdc");
  CacheHeader h = small_header();
  CacheWriter w(h, {2, 4}, path);
  Rng rng(7);
  for (int i = 0; i < 6; ++i) w.append(random_record(rng, h));
  w.finish();
  CacheReader r(path);
  CHECK_THROWS_AS(r.read(0, 2), std::out_of_range);   // beyond sequence length
  CHECK_THROWS_AS(r.read(2, 0), std::out_of_range);   // beyond sequence count
  CHECK_THROWS_AS(r.read(1, -1), std::out_of_range);
  std::remove(path.c_str());
}

TEST_CASE("writer validates record shape and duplicate indices") {
  const std::string path = temp_path("validate.tdc");
  CacheHeader h = small_header(3, 2);
  CacheWriter w(h, {1}, path);
  CacheRecord bad;
  bad.topk.indices = {1, 1, 2};
  bad.topk.values = {3.f, 2.f, 1.f};
  bad.activation = {0.f, 0.f};
  CHECK_THROWS_AS(w.append(bad), std::invalid_argument);
  bad.topk.indices = {1, 40, 2};  // >= vocab
  CHECK_THROWS_AS(w.append(bad), std::invalid_argument);
  std::remove(path.c_str());
}

TEST_CASE("top-k selection breaks ties toward the lower index") {
  std::vector<float> row = {1.0f, 5.0f, 5.0f, 0.0f, 5.0f};
  TopKLogits tk = top_k_of_row(row.data(), 5, 3);
  CHECK(tk.indices == std::vector<std::uint32_t>{1, 2, 4});
  CHECK(tk.values == std::vector<float>{5.0f, 5.0f, 5.0f});
}

TEST_CASE("storage estimate: paper-scale arithmetic and exact file size") {
  StorageEstimate big = storage_estimate(32000, 128, 2560, CacheDtype::F32, CacheDtype::F32, 0, 0);
  CHECK(big.logit_bytes_per_token == 1024);  // 128 * (4 + 4)
  CHECK(big.activation_bytes_per_token == 10240);
  CHECK(big.logit_compression_ratio == doctest::Approx(125.0));

  StorageEstimate degenerate = storage_estimate(32000, 32000, 2560, CacheDtype::F32, CacheDtype::F32, 0, 0);
  CHECK(degenerate.logit_compression_ratio < 1.0);

  Transformer<float> teacher = tiny_teacher();
  TokenDataset ds = one_seq_dataset();
  const std::string path = temp_path("size.tdc");
  CacheHeader h = cache_teacher(teacher, ds, Split::Train, 1, 3, path);
  StorageEstimate est = storage_estimate(8, 3, 8, h.logit_dtype, h.activation_dtype,
                                         static_cast<std::int64_t>(h.num_sequences), 4);
  CHECK(est.total_bytes == static_cast<std::int64_t>(std::filesystem::file_size(path)));
  std::remove(path.c_str());
}

TEST_CASE("half-precision payloads reproduce values to half rounding") {
  Transformer<float> teacher = tiny_teacher();
  TokenDataset ds = one_seq_dataset();
  const std::string p32 = temp_path("f32.tdc"), p16 = temp_path("f16.tdc");
  cache_teacher(teacher, ds, Split::Train, 1, 3, p32, CacheDtype::F32, CacheDtype::F32);
  cache_teacher(teacher, ds, Split::Train, 1, 3, p16, CacheDtype::F16, CacheDtype::F16);
  CacheReader r32(p32), r16(p16);
  for (std::int64_t p = 0; p < 4; ++p) {
    CacheRecord a = r32.read(0, p), b = r16.read(0, p);
    CHECK(a.topk.indices == b.topk.indices);
    for (std::size_t i = 0; i < a.topk.values.size(); ++i) {
      const float exact = a.topk.values[i];
      CHECK(b.topk.values[i] == static_cast<float>(Eigen::half(exact)));
    }
  }
  CHECK(std::filesystem::file_size(p16) < std::filesystem::file_size(p32));
  std::remove(p32.c_str());
  std::remove(p16.c_str());
}
