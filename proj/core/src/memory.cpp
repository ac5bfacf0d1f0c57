#include "chunklm/memory.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace chunklm {

namespace {

double dot(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::vector<double> normalized(const std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (sq == 0.0) return v;
  const double inv = 1.0 / std::sqrt(sq);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
  return out;
}

MemoryStore::MemoryStore(int d_mem, int capacity, Mode mode, ApproxIndexConfig approx)
    : d_(d_mem),
      capacity_(capacity),
      mode_(mode),
      approx_(approx),
      keys_(static_cast<std::size_t>(d_mem) * capacity),
      values_(static_cast<std::size_t>(d_mem) * capacity),
      seq_ids_(static_cast<std::size_t>(capacity), 0),
      chunk_indices_(static_cast<std::size_t>(capacity), 0),
      slot_list_(static_cast<std::size_t>(capacity), -1) {
  if (d_mem < 1) throw ConfigError("memory store: d_mem must be >= 1");
  if (capacity < 1) throw ConfigError("memory store: capacity must be >= 1");
  if (approx_.n_list < 1 || approx_.n_probe < 1) {
    throw ConfigError("memory store: n_list and n_probe must be >= 1");
  }
}

MemoryEntry MemoryStore::entry(int logical) const {
  if (logical < 0 || logical >= count_) throw IndexError("memory store: entry index out of range");
  return entry_at_slot(slot_of(logical));
}

MemoryEntry MemoryStore::entry_at_slot(int slot) const {
  MemoryEntry e;
  e.key.assign(keys_.data() + static_cast<std::size_t>(slot) * d_,
               keys_.data() + static_cast<std::size_t>(slot + 1) * d_);
  e.value.assign(values_.data() + static_cast<std::size_t>(slot) * d_,
                 values_.data() + static_cast<std::size_t>(slot + 1) * d_);
  e.seq_id = seq_ids_[static_cast<std::size_t>(slot)];
  e.chunk_index = chunk_indices_[static_cast<std::size_t>(slot)];
  return e;
}

void MemoryStore::store(const MemoryEntry& entry) {
  if (static_cast<int>(entry.key.size()) != d_ || static_cast<int>(entry.value.size()) != d_) {
    throw ShapeError("memory store: entry dimension != d_mem");
  }
  int slot;
  if (count_ < capacity_) {
    slot = slot_of(count_);
    ++count_;
  } else {
    slot = head_;  // evict the oldest
    head_ = (head_ + 1) % capacity_;
  }
  // Remove the overwritten slot from its inverted list so candidate sets
  // stay an exact partition of live slots.
  const int old_list = slot_list_[static_cast<std::size_t>(slot)];
  if (old_list >= 0) {
    auto& lst = lists_[static_cast<std::size_t>(old_list)];
    lst.erase(std::remove(lst.begin(), lst.end(), slot), lst.end());
  } else {
    tail_.erase(std::remove(tail_.begin(), tail_.end(), slot), tail_.end());
  }
  std::memcpy(keys_.data() + static_cast<std::size_t>(slot) * d_, entry.key.data(),
              sizeof(double) * static_cast<std::size_t>(d_));
  std::memcpy(values_.data() + static_cast<std::size_t>(slot) * d_, entry.value.data(),
              sizeof(double) * static_cast<std::size_t>(d_));
  seq_ids_[static_cast<std::size_t>(slot)] = entry.seq_id;
  chunk_indices_[static_cast<std::size_t>(slot)] = entry.chunk_index;
  slot_list_[static_cast<std::size_t>(slot)] = -1;
  tail_.push_back(slot);

  if (mode_ == Mode::kApprox) {
    ++inserts_since_rebuild_;
    if (inserts_since_rebuild_ > approx_.rebuild_every) rebuild_index();
  }
}

std::vector<MemoryEntry> MemoryStore::rank_slots(std::vector<int>& slots,
                                                 const std::vector<double>& qn, int k,
                                                 const ProvenanceFilter& filter) const {
  struct Scored {
    double sim;
    std::int64_t seq;
    std::int64_t chunk;
    int slot;
  };
  std::vector<Scored> scored;
  scored.reserve(slots.size());
  for (int slot : slots) {
    const std::int64_t seq = seq_ids_[static_cast<std::size_t>(slot)];
    const std::int64_t chunk = chunk_indices_[static_cast<std::size_t>(slot)];
    if (!filter.admits(seq, chunk)) continue;
    const double sim = dot(qn.data(), keys_.data() + static_cast<std::size_t>(slot) * d_, d_);
    scored.push_back({sim, seq, chunk, slot});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    if (a.seq != b.seq) return a.seq < b.seq;
    return a.chunk < b.chunk;
  });
  const int take = std::min<int>(k, static_cast<int>(scored.size()));
  std::vector<MemoryEntry> out;
  out.reserve(static_cast<std::size_t>(take));
  for (int i = 0; i < take; ++i) out.push_back(entry_at_slot(scored[static_cast<std::size_t>(i)].slot));
  return out;
}

std::vector<MemoryEntry> MemoryStore::query_exact(const std::vector<double>& q, int k,
                                                  const ProvenanceFilter& filter) const {
  if (k < 1) throw ConfigError("memory store: k must be >= 1");
  if (static_cast<int>(q.size()) != d_) throw ShapeError("memory store: query dimension != d_mem");
  const std::vector<double> qn = normalized(q);
  std::vector<int> slots;
  slots.reserve(static_cast<std::size_t>(count_));
  for (int i = 0; i < count_; ++i) slots.push_back(slot_of(i));
  return rank_slots(slots, qn, k, filter);
}

void MemoryStore::rebuild_index() {
  inserts_since_rebuild_ = 0;
  const int n_list = std::min(approx_.n_list, std::max(count_, 1));
  built_lists_ = n_list;
  lists_.assign(static_cast<std::size_t>(n_list), {});
  std::fill(slot_list_.begin(), slot_list_.end(), -1);
  tail_.clear();
  if (count_ == 0) return;

  // Spherical k-means over stored keys: evenly strided seeding, fixed
  // iteration count, deterministic argmax assignment.
  centroids_ = CountedDoubles(static_cast<std::size_t>(n_list) * d_);
  std::vector<int> live;
  live.reserve(static_cast<std::size_t>(count_));
  for (int i = 0; i < count_; ++i) live.push_back(slot_of(i));
  for (int c = 0; c < n_list; ++c) {
    const int src = live[static_cast<std::size_t>((static_cast<std::int64_t>(c) * count_) / n_list)];
    std::memcpy(centroids_.data() + static_cast<std::size_t>(c) * d_,
                keys_.data() + static_cast<std::size_t>(src) * d_,
                sizeof(double) * static_cast<std::size_t>(d_));
  }
  std::vector<int> assign(static_cast<std::size_t>(count_), 0);
  std::vector<double> sums(static_cast<std::size_t>(n_list) * d_);
  std::vector<int> sizes(static_cast<std::size_t>(n_list));
  for (int iter = 0; iter < approx_.kmeans_iters; ++iter) {
    for (std::size_t i = 0; i < live.size(); ++i) {
      const double* key = keys_.data() + static_cast<std::size_t>(live[i]) * d_;
      int best = 0;
      double best_sim = -2.0;
      for (int c = 0; c < n_list; ++c) {
        const double sim = dot(key, centroids_.data() + static_cast<std::size_t>(c) * d_, d_);
        if (sim > best_sim) {
          best_sim = sim;
          best = c;
        }
      }
      assign[i] = best;
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t i = 0; i < live.size(); ++i) {
      const double* key = keys_.data() + static_cast<std::size_t>(live[i]) * d_;
      double* s = sums.data() + static_cast<std::size_t>(assign[i]) * d_;
      for (int j = 0; j < d_; ++j) s[j] += key[j];
      ++sizes[static_cast<std::size_t>(assign[i])];
    }
    for (int c = 0; c < n_list; ++c) {
      if (sizes[static_cast<std::size_t>(c)] == 0) continue;  // keep stale centroid
      double sq = 0.0;
      const double* s = sums.data() + static_cast<std::size_t>(c) * d_;
      for (int j = 0; j < d_; ++j) sq += s[j] * s[j];
      double* cp = centroids_.data() + static_cast<std::size_t>(c) * d_;
      if (sq == 0.0) {
        for (int j = 0; j < d_; ++j) cp[j] = s[j] / sizes[static_cast<std::size_t>(c)];
      } else {
        const double inv = 1.0 / std::sqrt(sq);
        for (int j = 0; j < d_; ++j) cp[j] = s[j] * inv;
      }
    }
  }
  for (std::size_t i = 0; i < live.size(); ++i) {
    lists_[static_cast<std::size_t>(assign[i])].push_back(live[i]);
    slot_list_[static_cast<std::size_t>(live[i])] = assign[i];
  }
}

std::vector<MemoryEntry> MemoryStore::query_approx(const std::vector<double>& q, int k,
                                                   const ProvenanceFilter& filter) {
  if (k < 1) throw ConfigError("memory store: k must be >= 1");
  if (static_cast<int>(q.size()) != d_) throw ShapeError("memory store: query dimension != d_mem");
  if (built_lists_ == 0 && count_ > 0) rebuild_index();
  const std::vector<double> qn = normalized(q);

  struct CentroidSim {
    double sim;
    int c;
  };
  std::vector<CentroidSim> order;
  order.reserve(static_cast<std::size_t>(built_lists_));
  for (int c = 0; c < built_lists_; ++c) {
    order.push_back({dot(qn.data(), centroids_.data() + static_cast<std::size_t>(c) * d_, d_), c});
  }
  std::sort(order.begin(), order.end(), [](const CentroidSim& a, const CentroidSim& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return a.c < b.c;
  });
  const int probes = std::min(approx_.n_probe, built_lists_);
  std::vector<int> slots = tail_;
  for (int i = 0; i < probes; ++i) {
    const auto& lst = lists_[static_cast<std::size_t>(order[static_cast<std::size_t>(i)].c)];
    slots.insert(slots.end(), lst.begin(), lst.end());
  }
  return rank_slots(slots, qn, k, filter);
}

std::vector<MemoryEntry> MemoryStore::query(const std::vector<double>& q, int k,
                                            const ProvenanceFilter& filter) {
  if (mode_ == Mode::kApprox) return query_approx(q, k, filter);
  return query_exact(q, k, filter);
}

// ---------------------------------------------------------------------------
// snapshot
// ---------------------------------------------------------------------------

namespace {

void write_f32(std::ofstream& out, const double* p, std::size_t n) {
  std::vector<float> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(p[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
}

void write_i32(std::ofstream& out, const std::int64_t* p, std::size_t n) {
  std::vector<std::int32_t> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = static_cast<std::int32_t>(p[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(std::int32_t)));
}

}  // namespace

void MemoryStore::save_snapshot(const std::string& path) const {
  std::ofstream man(path + ".manifest");
  if (!man) throw IoError("cannot write memory manifest: " + path + ".manifest");
  man << "format chunklm-memory v1\n";
  man << "d_mem " << d_ << "\n";
  man << "capacity " << capacity_ << "\n";
  man << "count " << count_ << "\n";
  man << "index_mode " << (mode_ == Mode::kApprox ? "approx" : "exact") << "\n";
  man << "n_list " << approx_.n_list << "\n";
  man << "n_probe " << approx_.n_probe << "\n";
  man << "rebuild_every " << approx_.rebuild_every << "\n";

  std::ofstream bin(path + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write memory snapshot: " + path + ".bin");
  // Entries oldest-first; keys then values then (seq, chunk) pairs.
  for (int i = 0; i < count_; ++i) {
    write_f32(bin, keys_.data() + static_cast<std::size_t>(slot_of(i)) * d_, static_cast<std::size_t>(d_));
  }
  for (int i = 0; i < count_; ++i) {
    write_f32(bin, values_.data() + static_cast<std::size_t>(slot_of(i)) * d_, static_cast<std::size_t>(d_));
  }
  for (int i = 0; i < count_; ++i) {
    const std::int64_t prov[2] = {seq_ids_[static_cast<std::size_t>(slot_of(i))],
                                  chunk_indices_[static_cast<std::size_t>(slot_of(i))]};
    write_i32(bin, prov, 2);
  }
}

MemoryStore MemoryStore::load_snapshot(const std::string& path) {
  std::ifstream man(path + ".manifest");
  if (!man) throw IoError("cannot open memory manifest: " + path + ".manifest");
  int d = -1, capacity = -1, count = -1;
  Mode mode = Mode::kExact;
  ApproxIndexConfig approx;
  std::string key;
  while (man >> key) {
    if (key == "d_mem") man >> d;
    else if (key == "capacity") man >> capacity;
    else if (key == "count") man >> count;
    else if (key == "n_list") man >> approx.n_list;
    else if (key == "n_probe") man >> approx.n_probe;
    else if (key == "rebuild_every") man >> approx.rebuild_every;
    else if (key == "index_mode") {
      std::string m;
      man >> m;
      mode = (m == "approx") ? Mode::kApprox : Mode::kExact;
    } else {
      std::string skip;
      std::getline(man, skip);
    }
  }
  if (d < 1 || capacity < 1 || count < 0 || count > capacity) {
    throw IoError("bad memory manifest: " + path);
  }
  std::ifstream bin(path + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot open memory snapshot: " + path + ".bin");
  MemoryStore store(d, capacity, mode, approx);
  const std::size_t n = static_cast<std::size_t>(count) * static_cast<std::size_t>(d);
  std::vector<float> kbuf(n), vbuf(n);
  bin.read(reinterpret_cast<char*>(kbuf.data()), static_cast<std::streamsize>(n * sizeof(float)));
  bin.read(reinterpret_cast<char*>(vbuf.data()), static_cast<std::streamsize>(n * sizeof(float)));
  std::vector<std::int32_t> prov(static_cast<std::size_t>(count) * 2);
  bin.read(reinterpret_cast<char*>(prov.data()),
           static_cast<std::streamsize>(prov.size() * sizeof(std::int32_t)));
  if (!bin) throw IoError("truncated memory snapshot: " + path + ".bin");
  for (int i = 0; i < count; ++i) {
    MemoryEntry e;
    e.key.assign(kbuf.begin() + static_cast<std::ptrdiff_t>(i) * d,
                 kbuf.begin() + static_cast<std::ptrdiff_t>(i + 1) * d);
    e.value.assign(vbuf.begin() + static_cast<std::ptrdiff_t>(i) * d,
                   vbuf.begin() + static_cast<std::ptrdiff_t>(i + 1) * d);
    e.seq_id = prov[static_cast<std::size_t>(i) * 2];
    e.chunk_index = prov[static_cast<std::size_t>(i) * 2 + 1];
    store.store(e);
  }
  return store;
}

Tensor mean_retrieved(const std::vector<std::vector<MemoryEntry>>& retrieved, int d_mem) {
  const int B = static_cast<int>(retrieved.size());
  Tensor out({B, d_mem});
  double* p = out.mutable_data();
  for (int b = 0; b < B; ++b) {
    const auto& rows = retrieved[static_cast<std::size_t>(b)];
    if (rows.empty()) continue;  // empty-retrieval fallback: zero vector
    for (const MemoryEntry& e : rows) {
      for (int j = 0; j < d_mem; ++j) p[b * d_mem + j] += e.value[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < d_mem; ++j) p[b * d_mem + j] /= static_cast<double>(rows.size());
  }
  return out;
}

Value fuse(Tape& tape, Value c_m, Value rbar_const, Value w_fuse) {
  return tape.tanh_op(tape.matmul(tape.concat_cols(c_m, rbar_const), w_fuse));
}

}  // namespace chunklm
