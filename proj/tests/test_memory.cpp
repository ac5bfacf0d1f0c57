#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "chunklm/memory.hpp"
#include "chunklm/rng.hpp"

using namespace chunklm;

namespace {

MemoryEntry make_entry(const std::vector<double>& raw, std::int64_t seq, std::int64_t chunk) {
  MemoryEntry e;
  e.value = raw;
  e.key = normalized(raw);
  e.seq_id = seq;
  e.chunk_index = chunk;
  return e;
}

std::vector<double> random_vec(int d, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(d));
  for (auto& x : v) x = rng.gaussian();
  return v;
}

// Independent full-sort oracle over explicit entries.
std::vector<std::size_t> topk_oracle(const std::vector<MemoryEntry>& entries,
                                     const std::vector<double>& q, int k) {
  const std::vector<double> qn = normalized(q);
  std::vector<std::size_t> order(entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto sim = [&](std::size_t i) {
    double s = 0.0;
    for (std::size_t j = 0; j < qn.size(); ++j) s += qn[j] * entries[i].key[j];
    return s;
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = sim(a), sb = sim(b);
    if (sa != sb) return sa > sb;
    if (entries[a].seq_id != entries[b].seq_id) return entries[a].seq_id < entries[b].seq_id;
    return entries[a].chunk_index < entries[b].chunk_index;
  });
  order.resize(static_cast<std::size_t>(std::min<int>(k, static_cast<int>(order.size()))));
  return order;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("store and ring eviction") {
  MemoryStore store(3, 2);
  CHECK(store.count() == 0);
  store.store(make_entry({1, 0, 0}, 0, 0));
  CHECK(store.count() == 1);
  store.store(make_entry({0, 1, 0}, 0, 1));
  store.store(make_entry({0, 0, 1}, 0, 2));
  CHECK(store.count() == 2);
  // first entry evicted: querying its key now ranks the survivors
  auto got = store.query_exact({1, 0, 0}, 2, ProvenanceFilter::none());
  REQUIRE(got.size() == 2);
  for (const auto& e : got) CHECK(e.chunk_index != 0);

  CHECK_THROWS_AS(store.store(make_entry({1, 0}, 0, 0)), ShapeError);
}

TEST_CASE("self-retrieval: a stored key queried verbatim is rank 1 with sim 1") {
  Rng rng(61);
  MemoryStore store(8, 32);
  std::vector<MemoryEntry> entries;
  for (int i = 0; i < 10; ++i) {
    entries.push_back(make_entry(random_vec(8, rng), 7, i));
    store.store(entries.back());
  }
  for (const auto& e : entries) {
    auto got = store.query_exact(e.value, 1, ProvenanceFilter::none());
    REQUIRE(got.size() == 1);
    CHECK(got[0].chunk_index == e.chunk_index);
    double sim = 0.0;
    for (std::size_t j = 0; j < e.key.size(); ++j) sim += e.key[j] * got[0].key[j];
    CHECK(sim == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("query on an empty store returns an empty list") {
  MemoryStore store(4, 8);
  CHECK(store.query_exact({1, 0, 0, 0}, 3, ProvenanceFilter::none()).empty());
}

TEST_CASE("exact top-k matches the full-sort oracle") {
  Rng rng(62);
  MemoryStore store(6, 200);
  std::vector<MemoryEntry> entries;
  for (int i = 0; i < 100; ++i) {
    entries.push_back(make_entry(random_vec(6, rng), i % 4, i));
    store.store(entries.back());
  }
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = random_vec(6, rng);
    const auto got = store.query_exact(q, 5, ProvenanceFilter::none());
    const auto expect = topk_oracle(entries, q, 5);
    REQUIRE(got.size() == expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].seq_id == entries[expect[i]].seq_id);
      CHECK(got[i].chunk_index == entries[expect[i]].chunk_index);
    }
  }
}

TEST_CASE("anti-leak filter excludes same-sequence entries at or after the chunk") {
  Rng rng(63);
  MemoryStore store(4, 64);
  for (int chunk = 0; chunk < 8; ++chunk) {
    store.store(make_entry(random_vec(4, rng), 1, chunk));
    store.store(make_entry(random_vec(4, rng), 2, chunk));
  }
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_vec(4, rng);
    const auto got = store.query_exact(q, 16, ProvenanceFilter::same_seq_before(1, 3));
    for (const auto& e : got) {
      const bool leak = (e.seq_id == 1 && e.chunk_index >= 3);
      CHECK(!leak);
    }
    // entries from sequence 2 are admissible at any chunk index
    CHECK(got.size() == 3 + 8);
  }
}

TEST_CASE("approximate index") {
  Rng rng(64);

  SUBCASE("exhaustive probing equals exact, element for element") {
    ApproxIndexConfig acfg;
    acfg.n_list = 8;
    acfg.n_probe = 8;  // probe everything
    MemoryStore store(8, 256, MemoryStore::Mode::kApprox, acfg);
    for (int i = 0; i < 150; ++i) store.store(make_entry(random_vec(8, rng), i % 3, i));
    store.rebuild_index();
    for (int trial = 0; trial < 20; ++trial) {
      const auto q = random_vec(8, rng);
      const auto exact = store.query_exact(q, 4, ProvenanceFilter::none());
      const auto approx = store.query_approx(q, 4, ProvenanceFilter::none());
      REQUIRE(exact.size() == approx.size());
      for (std::size_t i = 0; i < exact.size(); ++i) {
        CHECK(exact[i].seq_id == approx[i].seq_id);
        CHECK(exact[i].chunk_index == approx[i].chunk_index);
      }
    }
  }

  SUBCASE("single cluster equals exact") {
    ApproxIndexConfig acfg;
    acfg.n_list = 1;
    acfg.n_probe = 1;
    MemoryStore store(4, 64, MemoryStore::Mode::kApprox, acfg);
    for (int i = 0; i < 30; ++i) store.store(make_entry(random_vec(4, rng), 0, i));
    const auto q = random_vec(4, rng);
    const auto exact = store.query_exact(q, 3, ProvenanceFilter::none());
    const auto approx = store.query_approx(q, 3, ProvenanceFilter::none());
    REQUIRE(exact.size() == approx.size());
    for (std::size_t i = 0; i < exact.size(); ++i) {
      CHECK(exact[i].chunk_index == approx[i].chunk_index);
    }
  }

  SUBCASE("unindexed tail is still searchable and auto-rebuild fires") {
    ApproxIndexConfig acfg;
    acfg.n_list = 4;
    acfg.n_probe = 1;
    acfg.rebuild_every = 16;
    MemoryStore store(4, 128, MemoryStore::Mode::kApprox, acfg);
    for (int i = 0; i < 10; ++i) store.store(make_entry(random_vec(4, rng), 0, i));
    store.rebuild_index();
    // fresh insert not yet indexed must be findable immediately
    const auto probe = random_vec(4, rng);
    store.store(make_entry(probe, 0, 99));
    auto got = store.query_approx(probe, 1, ProvenanceFilter::none());
    REQUIRE(got.size() == 1);
    CHECK(got[0].chunk_index == 99);
    // push enough inserts to trip the rebuild threshold
    for (int i = 0; i < 20; ++i) store.store(make_entry(random_vec(4, rng), 0, 200 + i));
    got = store.query_approx(probe, 1, ProvenanceFilter::none());
    REQUIRE(got.size() == 1);
    CHECK(got[0].chunk_index == 99);
  }

  SUBCASE("recall@2 against exact on a gaussian workload") {
    ApproxIndexConfig acfg;
    acfg.n_list = 16;
    acfg.n_probe = 4;
    MemoryStore store(16, 1024, MemoryStore::Mode::kApprox, acfg);
    for (int i = 0; i < 512; ++i) store.store(make_entry(random_vec(16, rng), 0, i));
    store.rebuild_index();
    int hit = 0, total = 0;
    for (int trial = 0; trial < 64; ++trial) {
      const auto q = random_vec(16, rng);
      const auto exact = store.query_exact(q, 2, ProvenanceFilter::none());
      const auto approx = store.query_approx(q, 2, ProvenanceFilter::none());
      for (const auto& e : exact) {
        ++total;
        for (const auto& a : approx) {
          if (a.chunk_index == e.chunk_index) {
            ++hit;
            break;
          }
        }
      }
    }
    CHECK(static_cast<double>(hit) / total >= 0.9);
  }
}

TEST_CASE("fuse gate") {
  SUBCASE("zero weights give zero output") {
    Tape tape;
    Value c_m = tape.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    Value rbar = tape.constant(Tensor({2, 3}, {-1, 0, 1, 2, -2, 0}));
    Value w = tape.leaf(Tensor({6, 3}));
    CHECK(l2_norm(tape.val(fuse(tape, c_m, rbar, w))) == 0.0);
  }

  SUBCASE("mean of one retrieved value is that value") {
    std::vector<std::vector<MemoryEntry>> retrieved(1);
    retrieved[0].push_back(make_entry({0.5, -1.5}, 0, 0));
    const Tensor mean = mean_retrieved(retrieved, 2);
    CHECK(mean[0] == 0.5);
    CHECK(mean[1] == -1.5);
  }

  SUBCASE("empty retrieval falls back to the zero vector") {
    std::vector<std::vector<MemoryEntry>> retrieved(2);
    retrieved[1].push_back(make_entry({2.0, 4.0}, 0, 0));
    retrieved[1].push_back(make_entry({4.0, 0.0}, 0, 1));
    const Tensor mean = mean_retrieved(retrieved, 2);
    CHECK(mean[0] == 0.0);
    CHECK(mean[1] == 0.0);
    CHECK(mean[2] == 3.0);
    CHECK(mean[3] == 2.0);
  }

  SUBCASE("block-identity fuse weight reduces to tanh(c_m)") {
    const int d = 3;
    Tensor w({2 * d, d});
    double* p = w.mutable_data();
    for (int i = 0; i < d; ++i) p[i * d + i] = 1.0;  // top block I, bottom block 0
    Rng rng(65);
    Tensor c = rng.gaussian_tensor({2, d}, 1.0);
    Tape tape;
    const Tensor out =
        tape.val(fuse(tape, tape.leaf(c), tape.constant(rng.gaussian_tensor({2, d}, 1.0)),
                      tape.leaf(w)));
    for (std::int64_t i = 0; i < c.size(); ++i) {
      CHECK(out[i] == doctest::Approx(std::tanh(c[i])).epsilon(1e-12));
    }
  }

  SUBCASE("fuse outputs stay inside (-1, 1)") {
    Rng rng(66);
    Tape tape;
    const Tensor out = tape.val(fuse(tape, tape.leaf(rng.gaussian_tensor({4, 5}, 10.0)),
                                     tape.constant(rng.gaussian_tensor({4, 5}, 10.0)),
                                     tape.leaf(rng.gaussian_tensor({10, 5}, 10.0))));
    for (std::int64_t i = 0; i < out.size(); ++i) {
      CHECK(out[i] > -1.0);
      CHECK(out[i] < 1.0);
    }
  }

  SUBCASE("no gradient flows into the retrieved values") {
    Rng rng(67);
    Tape tape;
    Value c_m = tape.leaf(rng.gaussian_tensor({1, 2}, 1.0));
    Value rbar = tape.constant(rng.gaussian_tensor({1, 2}, 1.0));
    Value w = tape.leaf(rng.gaussian_tensor({4, 2}, 1.0));
    Value out = fuse(tape, c_m, rbar, w);
    tape.backward(tape.weighted_sum(tape.reshape(out, {2}), {1.0, 1.0}));
    CHECK(l2_norm(tape.grad(rbar)) == 0.0);
    CHECK(l2_norm(tape.grad(c_m)) > 0.0);
    CHECK(l2_norm(tape.grad(w)) > 0.0);
  }
}

TEST_CASE("snapshot round-trips bit-exactly") {
  namespace fs = std::filesystem;
  Rng rng(68);
  ApproxIndexConfig acfg;
  acfg.n_list = 4;
  acfg.n_probe = 2;
  MemoryStore store(5, 16, MemoryStore::Mode::kApprox, acfg);
  for (int i = 0; i < 20; ++i) store.store(make_entry(random_vec(5, rng), i % 2, i));

  const std::string p1 = (fs::temp_directory_path() / "chunklm_mem_a").string();
  const std::string p2 = (fs::temp_directory_path() / "chunklm_mem_b").string();
  store.save_snapshot(p1);
  MemoryStore loaded = MemoryStore::load_snapshot(p1);
  CHECK(loaded.dim() == 5);
  CHECK(loaded.capacity() == 16);
  CHECK(loaded.count() == 16);
  CHECK(loaded.mode() == MemoryStore::Mode::kApprox);
  loaded.save_snapshot(p2);
  CHECK(slurp(p1 + ".bin") == slurp(p2 + ".bin"));
  CHECK(slurp(p1 + ".manifest") == slurp(p2 + ".manifest"));
  for (const char* suffix : {".bin", ".manifest"}) {
    fs::remove(p1 + suffix);
    fs::remove(p2 + suffix);
  }
}
