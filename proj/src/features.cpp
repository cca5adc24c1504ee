#include "advg/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>

#include "advg/errors.hpp"
#include "advg/io_util.hpp"
#include "advg/rng.hpp"

namespace advg {

const char* family_name(Family f) {
  switch (f) {
    case Family::STRING: return "STRING";
    case Family::API_PARAM: return "API_PARAM";
    case Family::API_TRIGRAM: return "API_TRIGRAM";
  }
  return "?";
}

Family family_from_name(const std::string& name) {
  if (name == "STRING") return Family::STRING;
  if (name == "API_PARAM") return Family::API_PARAM;
  if (name == "API_TRIGRAM") return Family::API_TRIGRAM;
  throw ParseError("unknown feature family: '" + name + "'");
}

std::vector<FeatureToken> extract_features(const BehaviorLog& log) {
  std::vector<FeatureToken> out;
  out.reserve(log.strings.size() + 3 * log.api_events.size());
  for (const auto& s : log.strings) out.push_back({Family::STRING, s});
  for (const auto& ev : log.api_events)
    for (const auto& p : ev.params)
      out.push_back({Family::API_PARAM,
                     ev.name + "@" + std::to_string(p.position) + "=" + p.value});
  for (std::size_t i = 0; i + 2 < log.api_events.size(); ++i)
    out.push_back({Family::API_TRIGRAM, log.api_events[i].name + ">" +
                                            log.api_events[i + 1].name + ">" +
                                            log.api_events[i + 2].name});
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

double mi_from_counts(std::uint64_t n, std::uint64_t n_y1, std::uint64_t on_y0,
                      std::uint64_t on_y1) {
  // 2x2 plug-in estimate in canonical cell order (x,y) = (0,0),(0,1),(1,0),(1,1).
  const double dn = static_cast<double>(n);
  const std::uint64_t n_y0 = n - n_y1;
  const std::uint64_t on = on_y0 + on_y1;
  const std::uint64_t cells[2][2] = {{n_y0 - on_y0, n_y1 - on_y1}, {on_y0, on_y1}};
  const double px[2] = {static_cast<double>(n - on) / dn, static_cast<double>(on) / dn};
  const double py[2] = {static_cast<double>(n_y0) / dn, static_cast<double>(n_y1) / dn};
  double mi = 0.0;
  for (int x = 0; x < 2; ++x)
    for (int y = 0; y < 2; ++y) {
      const std::uint64_t c = cells[x][y];
      if (c == 0) continue;  // 0 * log 0 = 0
      const double pxy = static_cast<double>(c) / dn;
      mi += pxy * std::log2(pxy / (px[x] * py[y]));
    }
  return mi < 0.0 ? 0.0 : mi;
}

double mutual_information(std::span<const std::uint8_t> x,
                          std::span<const std::uint8_t> y) {
  if (x.size() != y.size())
    throw ContractError("mutual_information: column lengths differ");
  if (x.empty()) throw ContractError("mutual_information: empty columns");
  std::uint64_t n_y1 = 0, on_y0 = 0, on_y1 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i]) ++n_y1;
    if (x[i]) (y[i] ? on_y1 : on_y0)++;
  }
  return mi_from_counts(x.size(), n_y1, on_y0, on_y1);
}

namespace {

// Shared by select_top_k and run_extract: per-log extracted tokens mapped to
// ids in a canonically sorted candidate list.
struct CandidateSpace {
  std::vector<FeatureToken> candidates;             // sorted by (family, text)
  std::vector<std::vector<std::uint32_t>> on_lists; // per log, ascending ids
};

CandidateSpace build_candidate_space(std::span<const BehaviorLog> logs,
                                     kernels::Exec ex) {
  std::vector<std::vector<FeatureToken>> per_log(logs.size());
  const auto n = static_cast<std::int64_t>(logs.size());
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i)
      per_log[static_cast<std::size_t>(i)] = extract_features(logs[static_cast<std::size_t>(i)]);
  } else {
    for (std::int64_t i = 0; i < n; ++i)
      per_log[static_cast<std::size_t>(i)] = extract_features(logs[static_cast<std::size_t>(i)]);
  }

  CandidateSpace space;
  std::size_t total = 0;
  for (const auto& v : per_log) total += v.size();
  space.candidates.reserve(total);
  for (const auto& v : per_log)
    space.candidates.insert(space.candidates.end(), v.begin(), v.end());
  std::sort(space.candidates.begin(), space.candidates.end());
  space.candidates.erase(std::unique(space.candidates.begin(), space.candidates.end()),
                         space.candidates.end());

  space.on_lists.resize(logs.size());
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      auto& ids = space.on_lists[static_cast<std::size_t>(i)];
      for (const auto& t : per_log[static_cast<std::size_t>(i)]) {
        const auto it = std::lower_bound(space.candidates.begin(),
                                         space.candidates.end(), t);
        ids.push_back(static_cast<std::uint32_t>(it - space.candidates.begin()));
      }
    }
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      auto& ids = space.on_lists[static_cast<std::size_t>(i)];
      for (const auto& t : per_log[static_cast<std::size_t>(i)]) {
        const auto it = std::lower_bound(space.candidates.begin(),
                                         space.candidates.end(), t);
        ids.push_back(static_cast<std::uint32_t>(it - space.candidates.begin()));
      }
    }
  }
  return space;
}

FeatureVocabulary rank_candidates(const CandidateSpace& space,
                                  const std::vector<std::uint8_t>& labels,
                                  std::size_t k, kernels::Exec ex) {
  const std::size_t n_features = space.candidates.size();
  std::vector<std::uint64_t> on0(n_features), on1(n_features);
  kernels::presence_counts(ex, space.on_lists, labels, n_features, on0.data(),
                           on1.data());
  const std::uint64_t n = space.on_lists.size();
  std::uint64_t n_y1 = 0;
  for (auto l : labels) n_y1 += l;

  std::vector<double> mi(n_features);
  const auto fi = static_cast<std::int64_t>(n_features);
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < fi; ++j)
      mi[static_cast<std::size_t>(j)] =
          mi_from_counts(n, n_y1, on0[static_cast<std::size_t>(j)],
                         on1[static_cast<std::size_t>(j)]);
  } else {
    for (std::int64_t j = 0; j < fi; ++j)
      mi[static_cast<std::size_t>(j)] =
          mi_from_counts(n, n_y1, on0[static_cast<std::size_t>(j)],
                         on1[static_cast<std::size_t>(j)]);
  }

  std::vector<std::uint32_t> order(n_features);
  for (std::size_t j = 0; j < n_features; ++j) order[j] = static_cast<std::uint32_t>(j);
  // Descending MI; MI ties resolved by (family, text), which is exactly the
  // candidate id order.
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (mi[a] != mi[b]) return mi[a] > mi[b];
    return a < b;
  });

  const std::size_t d = std::min(k, n_features);
  std::vector<VocabEntry> entries;
  entries.reserve(d);
  for (std::size_t r = 0; r < d; ++r)
    entries.push_back({space.candidates[order[r]], static_cast<std::uint32_t>(r),
                       mi[order[r]]});
  return FeatureVocabulary(std::move(entries));
}

}  // namespace

FeatureVocabulary select_top_k(std::span<const BehaviorLog> train_logs,
                               std::size_t k, kernels::Exec ex) {
  if (train_logs.empty()) throw ContractError("select_top_k: empty corpus");
  if (k == 0) throw ContractError("select_top_k: k must be >= 1");
  const CandidateSpace space = build_candidate_space(train_logs, ex);
  std::vector<std::uint8_t> labels(train_logs.size());
  for (std::size_t i = 0; i < train_logs.size(); ++i)
    labels[i] = static_cast<std::uint8_t>(train_logs[i].label);
  return rank_candidates(space, labels, k, ex);
}

FeatureVocabulary::FeatureVocabulary(std::vector<VocabEntry> entries)
    : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].column != i)
      throw ContractError("FeatureVocabulary: column indices must be 0..D-1 in order");
  order_.resize(entries_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<std::uint32_t>(i);
  std::sort(order_.begin(), order_.end(), [&](std::uint32_t a, std::uint32_t b) {
    return entries_[a].token < entries_[b].token;
  });
}

std::int64_t FeatureVocabulary::column_of(const FeatureToken& t) const {
  const auto it = std::lower_bound(
      order_.begin(), order_.end(), t,
      [&](std::uint32_t id, const FeatureToken& tok) { return entries_[id].token < tok; });
  if (it == order_.end() || !(entries_[*it].token == t)) return -1;
  return entries_[*it].column;
}

void FeatureVocabulary::save(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& e : entries_) {
    out += std::to_string(e.column);
    out += '\t';
    out += family_name(e.token.family);
    out += '\t';
    out += e.token.text;
    out += '\t';
    out += fmt_double(e.mi_bits);
    out += '\n';
  }
  write_text_file(path, out);
}

FeatureVocabulary FeatureVocabulary::load(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  std::vector<VocabEntry> entries;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 4)
      throw ParseError(path.string(), line_no, "expected 4 tab-separated fields");
    try {
      VocabEntry e;
      e.column = static_cast<std::uint32_t>(parse_int(fields[0]));
      e.token.family = family_from_name(fields[1]);
      e.token.text = fields[2];
      e.mi_bits = parse_double(fields[3]);
      if (e.column != entries.size())
        throw ParseError("column index out of order");
      entries.push_back(std::move(e));
    } catch (const ParseError& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
  return FeatureVocabulary(std::move(entries));
}

SparseBinaryVector vectorize(const BehaviorLog& log, const FeatureVocabulary& vocab) {
  if (vocab.dim() == 0) throw ContractError("vectorize: empty vocabulary");
  SparseBinaryVector v;
  v.dim = vocab.dim();
  for (const auto& t : extract_features(log)) {
    const std::int64_t col = vocab.column_of(t);
    if (col >= 0) v.on.push_back(static_cast<std::uint32_t>(col));
  }
  std::sort(v.on.begin(), v.on.end());
  return v;
}

namespace {

std::uint64_t hash_vector(const SparseBinaryVector& v) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint64_t x) {
    h ^= x;
    h *= 0x100000001b3ull;
  };
  mix(v.dim);
  for (auto i : v.on) mix(i + 1);
  return h;
}

struct DedupSplitIndices {
  std::vector<std::uint32_t> split[3];  // indices into the input arrays
  std::size_t duplicates_dropped = 0;
  std::size_t label_conflicts = 0;
};

DedupSplitIndices dedup_and_split_indices(std::span<const SparseBinaryVector> vectors,
                                          std::span<const std::uint8_t> labels,
                                          std::array<double, 3> ratios,
                                          std::uint64_t seed) {
  if (vectors.size() != labels.size())
    throw ContractError("dedup_and_split: vectors/labels length mismatch");
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw ContractError("dedup_and_split: ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ContractError("dedup_and_split: ratios must sum to 1");

  DedupSplitIndices out;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> seen;
  std::vector<std::uint32_t> survivors;
  survivors.reserve(vectors.size());
  for (std::uint32_t i = 0; i < vectors.size(); ++i) {
    auto& bucket = seen[hash_vector(vectors[i])];
    bool dup = false;
    for (std::uint32_t j : bucket)
      if (vectors[j] == vectors[i]) {
        dup = true;
        ++out.duplicates_dropped;
        if (labels[j] != labels[i]) ++out.label_conflicts;
        break;
      }
    if (!dup) {
      bucket.push_back(i);
      survivors.push_back(i);
    }
  }
  if (survivors.size() < 3)
    throw ContractError("dedup_and_split: fewer than 3 items after deduplication");

  // Largest-remainder split sizes: exact total, each within 1 of n*ratio.
  const std::size_t m = survivors.size();
  std::size_t sizes[3];
  double frac[3];
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = static_cast<double>(m) * ratios[s];
    sizes[s] = static_cast<std::size_t>(exact);
    frac[s] = exact - static_cast<double>(sizes[s]);
    assigned += sizes[s];
  }
  while (assigned < m) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (frac[s] > frac[best]) best = s;
    ++sizes[best];
    frac[best] = -1.0;
    ++assigned;
  }

  Rng rng(seed);
  rng.shuffle(survivors);
  std::size_t at = 0;
  for (int s = 0; s < 3; ++s) {
    out.split[s].assign(survivors.begin() + static_cast<std::ptrdiff_t>(at),
                        survivors.begin() + static_cast<std::ptrdiff_t>(at + sizes[s]));
    at += sizes[s];
  }
  return out;
}

LabeledDataset gather(std::span<const SparseBinaryVector> vectors,
                      std::span<const std::uint8_t> labels,
                      const std::vector<std::uint32_t>& idx) {
  LabeledDataset d;
  d.dim = vectors.empty() ? 0 : vectors[0].dim;
  d.vectors.reserve(idx.size());
  d.labels.reserve(idx.size());
  for (auto i : idx) {
    if (vectors[i].dim != d.dim)
      throw ContractError("dedup_and_split: inconsistent vector dimensions");
    d.vectors.push_back(vectors[i]);
    d.labels.push_back(labels[i]);
  }
  return d;
}

}  // namespace

SplitResult dedup_and_split(std::span<const SparseBinaryVector> vectors,
                            std::span<const std::uint8_t> labels,
                            std::array<double, 3> ratios, std::uint64_t seed) {
  const auto idx = dedup_and_split_indices(vectors, labels, ratios, seed);
  SplitResult r;
  r.train = gather(vectors, labels, idx.split[0]);
  r.valid = gather(vectors, labels, idx.split[1]);
  r.test = gather(vectors, labels, idx.split[2]);
  r.duplicates_dropped = idx.duplicates_dropped;
  r.label_conflicts = idx.label_conflicts;
  return r;
}

ExtractResult run_extract(std::span<const BehaviorLog> corpus, std::size_t k,
                          std::array<double, 3> ratios, std::uint64_t seed,
                          kernels::Exec ex) {
  if (corpus.empty()) throw ContractError("run_extract: empty corpus");
  if (k == 0) throw ContractError("run_extract: k must be >= 1");

  const CandidateSpace space = build_candidate_space(corpus, ex);
  std::vector<std::uint8_t> labels(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    labels[i] = static_cast<std::uint8_t>(corpus[i].label);

  // Dedup and split in the full candidate space, before feature selection,
  // so selection sees only training data.
  std::vector<SparseBinaryVector> full(corpus.size());
  const auto dim = static_cast<std::uint32_t>(space.candidates.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    full[i] = {dim, space.on_lists[i]};
  const auto idx = dedup_and_split_indices(full, labels, ratios, seed);

  ExtractResult result;
  result.candidate_count = space.candidates.size();
  result.duplicates_dropped = idx.duplicates_dropped;
  result.label_conflicts = idx.label_conflicts;

  CandidateSpace train_space;
  train_space.candidates = space.candidates;
  std::vector<std::uint8_t> train_labels;
  for (auto i : idx.split[0]) {
    train_space.on_lists.push_back(space.on_lists[i]);
    train_labels.push_back(labels[i]);
  }
  result.vocab = rank_candidates(train_space, train_labels, k, ex);

  // Map candidate ids to selected columns.
  std::vector<std::int64_t> column(space.candidates.size(), -1);
  for (const auto& e : result.vocab.entries()) {
    const auto it = std::lower_bound(space.candidates.begin(), space.candidates.end(),
                                     e.token);
    column[static_cast<std::size_t>(it - space.candidates.begin())] = e.column;
  }
  const std::uint32_t d = result.vocab.dim();
  std::vector<SparseBinaryVector> selected(corpus.size());
  const auto n = static_cast<std::int64_t>(corpus.size());
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      auto& v = selected[static_cast<std::size_t>(i)];
      v.dim = d;
      for (auto id : space.on_lists[static_cast<std::size_t>(i)])
        if (column[id] >= 0) v.on.push_back(static_cast<std::uint32_t>(column[id]));
      std::sort(v.on.begin(), v.on.end());
    }
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      auto& v = selected[static_cast<std::size_t>(i)];
      v.dim = d;
      for (auto id : space.on_lists[static_cast<std::size_t>(i)])
        if (column[id] >= 0) v.on.push_back(static_cast<std::uint32_t>(column[id]));
      std::sort(v.on.begin(), v.on.end());
    }
  }

  // Distinct full-space vectors can collide once reduced to the selected
  // columns; keep the first occurrence in corpus order so the union of the
  // splits stays duplicate-free.
  std::vector<std::uint8_t> keep(corpus.size(), 0);
  {
    std::vector<std::uint32_t> all;
    for (int s = 0; s < 3; ++s)
      all.insert(all.end(), idx.split[s].begin(), idx.split[s].end());
    std::sort(all.begin(), all.end());
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> seen;
    for (auto i : all) {
      auto& bucket = seen[hash_vector(selected[i])];
      bool dup = false;
      for (auto j : bucket)
        if (selected[j] == selected[i]) {
          dup = true;
          ++result.collisions_dropped;
          break;
        }
      if (!dup) {
        bucket.push_back(i);
        keep[i] = 1;
      }
    }
  }

  LabeledDataset* outs[3] = {&result.train, &result.valid, &result.test};
  for (int s = 0; s < 3; ++s) {
    outs[s]->dim = d;
    for (auto i : idx.split[s])
      if (keep[i]) {
        outs[s]->vectors.push_back(selected[i]);
        outs[s]->labels.push_back(labels[i]);
      }
  }
  return result;
}

void save_dataset(const LabeledDataset& data, const std::filesystem::path& path) {
  std::string out = "dim=" + std::to_string(data.dim) + "\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    out += data.labels[i] ? '1' : '0';
    out += '\t';
    const auto& on = data.vectors[i].on;
    for (std::size_t j = 0; j < on.size(); ++j) {
      if (j) out += ',';
      out += std::to_string(on[j]);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  LabeledDataset data;
  std::size_t line_no = 0, pos = 0;
  bool saw_header = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (line.empty()) continue;
    if (!saw_header) {
      if (line.rfind("dim=", 0) != 0)
        throw ParseError(path.string(), line_no, "expected 'dim=<D>' header");
      data.dim = static_cast<std::uint32_t>(parse_int(line.substr(4)));
      saw_header = true;
      continue;
    }
    const auto fields = split(line, '\t');
    if (fields.size() != 2)
      throw ParseError(path.string(), line_no, "expected 'label<TAB>indices'");
    try {
      const long long label = parse_int(fields[0]);
      if (label != 0 && label != 1) throw ParseError("label must be 0 or 1");
      SparseBinaryVector v;
      v.dim = data.dim;
      if (!fields[1].empty())
        for (const auto& tok : split(fields[1], ',')) {
          const long long i = parse_int(tok);
          if (i < 0 || i >= static_cast<long long>(data.dim))
            throw ParseError("feature index out of range");
          if (!v.on.empty() && static_cast<std::uint32_t>(i) <= v.on.back())
            throw ParseError("feature indices must be strictly ascending");
          v.on.push_back(static_cast<std::uint32_t>(i));
        }
      data.vectors.push_back(std::move(v));
      data.labels.push_back(static_cast<std::uint8_t>(label));
    } catch (const ParseError& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
  if (!saw_header) throw ParseError(path.string(), 1, "empty dataset file");
  return data;
}

}  // namespace advg
