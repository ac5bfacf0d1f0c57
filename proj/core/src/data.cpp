#include "chunklm/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "chunklm/rng.hpp"

namespace chunklm {

TokenSeq tokenize_bytes(const std::string& text, std::string origin) {
  TokenSeq seq;
  seq.origin = std::move(origin);
  seq.tokens.reserve(text.size());
  for (unsigned char ch : text) seq.tokens.push_back(static_cast<int>(ch));
  return seq;
}

std::string detokenize(const TokenSeq& seq) {
  std::string out;
  out.reserve(seq.tokens.size());
  for (int t : seq.tokens) {
    if (t < 0 || t >= kVocab) throw IndexError("detokenize: token out of byte range");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

ChunkPlan split_chunks(std::int64_t n, int c) {
  if (n < 1) throw ConfigError("split_chunks: empty corpus");
  if (c < 2) throw ConfigError("split_chunks: chunk length must be >= 2");
  ChunkPlan plan;
  plan.n = n;
  plan.c = c;
  plan.chunk_count = (n + c - 1) / c;
  plan.pieces.reserve(static_cast<std::size_t>(plan.chunk_count));
  for (std::int64_t m = 0; m < plan.chunk_count; ++m) {
    const std::int64_t off = m * c;
    const int len = static_cast<int>(std::min<std::int64_t>(c, n - off));
    plan.pieces.push_back({off, len});
  }
  return plan;
}

std::vector<RecallSample> make_recall_corpus(std::uint64_t seed, int key_len, int gap,
                                             int n_samples) {
  if (key_len < 1) throw ConfigError("make_recall_corpus: key_len must be >= 1");
  if (gap < 0) throw ConfigError("make_recall_corpus: gap must be >= 0");
  Rng rng(seed);
  std::vector<RecallSample> corpus;
  corpus.reserve(static_cast<std::size_t>(n_samples));
  const int lo = 0x30, hi = 0x7A;  // printable range; never collides with markers
  for (int s = 0; s < n_samples; ++s) {
    std::vector<int> key(static_cast<std::size_t>(key_len));
    for (;;) {
      bool clean = true;
      for (int& k : key) {
        k = static_cast<int>(rng.uniform_int(lo, hi));
        if (k == kKeyMarker || k == kQueryMarker) clean = false;
      }
      if (clean) break;
    }
    RecallSample sample;
    auto& toks = sample.seq.tokens;
    toks.reserve(static_cast<std::size_t>(2 * key_len + gap + 2));
    toks.push_back(kKeyMarker);
    toks.insert(toks.end(), key.begin(), key.end());
    for (int g = 0; g < gap; ++g) toks.push_back(static_cast<int>(rng.uniform_int(lo, hi)));
    toks.push_back(kQueryMarker);
    sample.answer_offset = static_cast<std::int64_t>(toks.size());
    sample.answer_len = key_len;
    toks.insert(toks.end(), key.begin(), key.end());
    sample.seq.origin = "recall:" + std::to_string(s);
    corpus.push_back(std::move(sample));
  }
  return corpus;
}

Batcher::Batcher(const std::vector<TokenSeq>& corpus, int batch, int chunk)
    : corpus_(&corpus), batch_(batch), chunk_(chunk) {
  if (batch < 1) throw ConfigError("batcher: batch must be >= 1");
  if (batch > static_cast<int>(corpus.size())) {
    throw ConfigError("batcher: batch size " + std::to_string(batch) +
                      " exceeds corpus size " + std::to_string(corpus.size()));
  }
  for (const TokenSeq& s : corpus) {
    if (s.tokens.size() < 2) throw ConfigError("batcher: every sequence needs >= 2 tokens");
  }
  reset();
}

void Batcher::reset() {
  group_ = 0;
  chunk_index_ = 0;
  group_chunks_ = 0;
}

bool Batcher::next(ChunkBatch& out) {
  const std::int64_t groups = static_cast<std::int64_t>(corpus_->size()) / batch_;
  while (group_ < groups) {
    if (group_chunks_ == 0) {
      std::int64_t longest = 0;
      for (int b = 0; b < batch_; ++b) {
        const auto& s = (*corpus_)[static_cast<std::size_t>(group_ * batch_ + b)];
        longest = std::max<std::int64_t>(longest, static_cast<std::int64_t>(s.tokens.size()));
      }
      group_chunks_ = split_chunks(longest, chunk_).chunk_count;
      chunk_index_ = 0;
    }
    if (chunk_index_ < group_chunks_) {
      out.batch = batch_;
      out.chunk = chunk_;
      out.first_chunk = (chunk_index_ == 0);
      out.inputs.assign(static_cast<std::size_t>(batch_) * chunk_, 0);
      out.targets.assign(static_cast<std::size_t>(batch_) * chunk_, kIgnoreTarget);
      const std::int64_t off = chunk_index_ * chunk_;
      for (int b = 0; b < batch_; ++b) {
        const auto& toks = (*corpus_)[static_cast<std::size_t>(group_ * batch_ + b)].tokens;
        const std::int64_t n = static_cast<std::int64_t>(toks.size());
        for (int t = 0; t < chunk_; ++t) {
          const std::int64_t pos = off + t;
          if (pos < n) out.inputs[static_cast<std::size_t>(b) * chunk_ + t] = toks[static_cast<std::size_t>(pos)];
          if (pos + 1 < n) {
            out.targets[static_cast<std::size_t>(b) * chunk_ + t] = toks[static_cast<std::size_t>(pos + 1)];
          }
        }
      }
      ++chunk_index_;
      return true;
    }
    ++group_;
    group_chunks_ = 0;
  }
  return false;
}

TokenSeq load_raw_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return tokenize_bytes(ss.str(), path);
}

namespace {
const char* kHexDigits = "0123456789abcdef";

int hex_val(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  throw IoError("bad hex digit in corpus file");
}
}  // namespace

void save_recall_corpus(const std::vector<RecallSample>& corpus, const std::string& path,
                        std::uint64_t seed, int key_len, int gap) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file: " + path);
  for (const RecallSample& s : corpus) {
    std::string line;
    line.reserve(s.seq.tokens.size() * 2);
    for (int t : s.seq.tokens) {
      line.push_back(kHexDigits[(t >> 4) & 0xF]);
      line.push_back(kHexDigits[t & 0xF]);
    }
    out << line << "\n";
  }
  std::ofstream man(path + ".manifest");
  if (!man) throw IoError("cannot write corpus manifest: " + path + ".manifest");
  man << "format recall-corpus v1\n";
  man << "seed " << seed << "\n";
  man << "key_len " << key_len << "\n";
  man << "gap " << gap << "\n";
  man << "samples " << corpus.size() << "\n";
}

std::vector<RecallSample> load_recall_corpus(const std::string& path) {
  std::ifstream man(path + ".manifest");
  if (!man) throw IoError("missing corpus manifest: " + path + ".manifest");
  int key_len = -1, gap = -1;
  std::string key;
  while (man >> key) {
    if (key == "key_len") {
      man >> key_len;
    } else if (key == "gap") {
      man >> gap;
    } else {
      std::string skip;
      std::getline(man, skip);
    }
  }
  if (key_len < 1 || gap < 0) throw IoError("corpus manifest missing key_len/gap: " + path);

  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path);
  std::vector<RecallSample> corpus;
  std::string line;
  int idx = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.size() % 2 != 0) throw IoError("odd hex line length in " + path);
    RecallSample s;
    s.seq.tokens.reserve(line.size() / 2);
    for (std::size_t i = 0; i < line.size(); i += 2) {
      s.seq.tokens.push_back(hex_val(line[i]) * 16 + hex_val(line[i + 1]));
    }
    s.seq.origin = path + ":" + std::to_string(idx++);
    s.answer_len = key_len;
    s.answer_offset = static_cast<std::int64_t>(s.seq.tokens.size()) - key_len;
    corpus.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace chunklm
