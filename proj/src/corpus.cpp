#include "advg/corpus.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include <nlohmann/json.hpp>

#include "advg/errors.hpp"
#include "advg/io_util.hpp"
#include "advg/rng.hpp"

namespace advg {

using ordered_json = nlohmann::ordered_json;

namespace {
constexpr const char* kCorpusHeader = R"({"format":"advgauntlet-corpus","version":1})";

std::string token(const char* prefix, std::size_t i) {
  return std::string(prefix) + std::to_string(i);
}
}  // namespace

void CorpusSpec::validate() const {
  if (n_malware <= 0) throw ConfigError("corpus spec: n_malware must be > 0");
  if (n_benign <= 0) throw ConfigError("corpus spec: n_benign must be > 0");
  if (string_vocab <= 0) throw ConfigError("corpus spec: string_vocab must be > 0");
  if (api_vocab <= 0) throw ConfigError("corpus spec: api_vocab must be > 0");
  if (param_vocab <= 0) throw ConfigError("corpus spec: param_vocab must be > 0");
  if (informative_per_class <= 0)
    throw ConfigError("corpus spec: informative_per_class must be > 0");
  if (string_vocab < 2 * informative_per_class)
    throw ConfigError("corpus spec: string_vocab must be >= 2*informative_per_class");
  if (param_vocab < 2 * informative_per_class)
    throw ConfigError("corpus spec: param_vocab must be >= 2*informative_per_class");
  if (!(informative_rate > 0.0 && informative_rate < 1.0))
    throw ConfigError("corpus spec: informative_rate must be in (0,1)");
  if (!(background_rate > 0.0 && background_rate < 1.0))
    throw ConfigError("corpus spec: background_rate must be in (0,1)");
  if (!(informative_rate > background_rate))
    throw ConfigError("corpus spec: informative_rate must exceed background_rate");
  if (!(duplicate_rate >= 0.0 && duplicate_rate < 1.0))
    throw ConfigError("corpus spec: duplicate_rate must be in [0,1)");
}

CorpusSpec CorpusSpec::from_json_text(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("corpus spec: ") + e.what());
  }
  CorpusSpec s;
  try {
    s.n_malware = j.at("n_malware").get<std::int64_t>();
    s.n_benign = j.at("n_benign").get<std::int64_t>();
    s.string_vocab = j.value("string_vocab", s.string_vocab);
    s.api_vocab = j.value("api_vocab", s.api_vocab);
    s.param_vocab = j.value("param_vocab", s.param_vocab);
    s.informative_per_class = j.value("informative_per_class", s.informative_per_class);
    s.informative_rate = j.value("informative_rate", s.informative_rate);
    s.background_rate = j.value("background_rate", s.background_rate);
    s.duplicate_rate = j.value("duplicate_rate", s.duplicate_rate);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("corpus spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::string CorpusSpec::to_json_text() const {
  ordered_json j;
  j["n_malware"] = n_malware;
  j["n_benign"] = n_benign;
  j["string_vocab"] = string_vocab;
  j["api_vocab"] = api_vocab;
  j["param_vocab"] = param_vocab;
  j["informative_per_class"] = informative_per_class;
  j["informative_rate"] = informative_rate;
  j["background_rate"] = background_rate;
  j["duplicate_rate"] = duplicate_rate;
  j["seed"] = seed;
  return j.dump();
}

namespace {

struct GenTables {
  // Successor permutation over the informative API subset, one per class.
  std::vector<int> api_next[2];
  // Designated parameter value id per informative API, one per class.
  std::vector<int> param_value[2];
  int k_api = 0;
};

GenTables build_tables(const CorpusSpec& spec) {
  GenTables t;
  t.k_api = std::min(spec.informative_per_class, spec.api_vocab);
  for (int cls = 0; cls < 2; ++cls) {
    Rng rng(derive_seed(spec.seed, "api_chain", static_cast<std::uint64_t>(cls)));
    std::vector<int> perm(static_cast<std::size_t>(t.k_api));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    t.api_next[cls] = std::move(perm);
  }
  // Disjoint designated values: class 1 takes even slots of one master
  // shuffle, class 0 the odd slots.
  Rng vrng(derive_seed(spec.seed, "param_values"));
  std::vector<int> vals(static_cast<std::size_t>(spec.param_vocab));
  std::iota(vals.begin(), vals.end(), 0);
  vrng.shuffle(vals);
  const int k = std::min(spec.informative_per_class, spec.api_vocab);
  for (int a = 0; a < k; ++a) {
    t.param_value[1].push_back(vals[static_cast<std::size_t>(2 * a)]);
    t.param_value[0].push_back(vals[static_cast<std::size_t>(2 * a + 1)]);
  }
  return t;
}

BehaviorLog generate_log(const CorpusSpec& spec, const GenTables& t,
                         std::int64_t idx, int label) {
  Rng rng(derive_seed(spec.seed, "log", static_cast<std::uint64_t>(idx)));
  BehaviorLog log;
  log.file_id = idx;
  log.label = label;

  // Strings: own informative tokens at informative_rate, everything else at
  // background_rate. Informative string ids: malware [0,k), benign [k,2k).
  const int k = spec.informative_per_class;
  const int own_lo = label == 1 ? 0 : k;
  const int own_hi = own_lo + k;
  for (int i = 0; i < spec.string_vocab; ++i) {
    const bool own = i >= own_lo && i < own_hi;
    const double rate = own ? spec.informative_rate : spec.background_rate;
    if (rng.bernoulli(rate)) log.strings.push_back(token("s", i));
  }

  // API sequence: Markov chain with class-specific preferred successors
  // inside the informative subset.
  const int len = 50 + static_cast<int>(rng.uniform_int(151));
  const auto& next = t.api_next[label];
  int a = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.api_vocab)));
  for (int step = 0; step < len; ++step) {
    ApiEvent ev;
    ev.name = token("api", a);
    if (rng.bernoulli(0.5)) {
      int value;
      if (a < t.k_api && rng.bernoulli(spec.informative_rate))
        value = t.param_value[label][static_cast<std::size_t>(a)];
      else
        value = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.param_vocab)));
      ev.params.push_back({0, token("v", value)});
    }
    if (rng.bernoulli(0.25)) {
      const int value =
          static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.param_vocab)));
      ev.params.push_back({1, token("v", value)});
    }
    log.api_events.push_back(std::move(ev));
    if (a < t.k_api && rng.bernoulli(spec.informative_rate))
      a = next[static_cast<std::size_t>(a)];
    else
      a = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.api_vocab)));
  }
  return log;
}

}  // namespace

std::vector<BehaviorLog> generate_corpus(const CorpusSpec& spec, kernels::Exec ex) {
  spec.validate();
  const GenTables tables = build_tables(spec);
  const std::int64_t n = spec.n_malware + spec.n_benign;

  // Duplicate injection plan, decided up front so per-log generation stays
  // independent. A duplicated log copies the content of an earlier log of the
  // same class but keeps its own file_id.
  std::vector<std::int64_t> dup_source(static_cast<std::size_t>(n), -1);
  {
    Rng dup_rng(derive_seed(spec.seed, "dup"));
    for (std::int64_t i = 0; i < n; ++i) {
      const bool malware = i < spec.n_malware;
      const std::int64_t class_lo = malware ? 0 : spec.n_malware;
      if (i > class_lo && dup_rng.bernoulli(spec.duplicate_rate))
        dup_source[static_cast<std::size_t>(i)] =
            class_lo + static_cast<std::int64_t>(dup_rng.uniform_int(
                           static_cast<std::uint64_t>(i - class_lo)));
    }
  }

  std::vector<BehaviorLog> corpus(static_cast<std::size_t>(n));
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i)
      corpus[static_cast<std::size_t>(i)] =
          generate_log(spec, tables, i, i < spec.n_malware ? 1 : 0);
  } else {
    for (std::int64_t i = 0; i < n; ++i)
      corpus[static_cast<std::size_t>(i)] =
          generate_log(spec, tables, i, i < spec.n_malware ? 1 : 0);
  }

  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t src = dup_source[static_cast<std::size_t>(i)];
    if (src >= 0) {
      auto& dst = corpus[static_cast<std::size_t>(i)];
      const auto& from = corpus[static_cast<std::size_t>(src)];
      dst.strings = from.strings;
      dst.api_events = from.api_events;
    }
  }
  return corpus;
}

namespace {

ordered_json log_to_json(const BehaviorLog& log) {
  ordered_json j;
  j["id"] = log.file_id;
  j["label"] = log.label;
  j["strings"] = log.strings;
  ordered_json api = ordered_json::array();
  for (const auto& ev : log.api_events) {
    ordered_json e;
    e["name"] = ev.name;
    ordered_json params = ordered_json::array();
    for (const auto& p : ev.params)
      params.push_back(ordered_json::array({p.position, p.value}));
    e["params"] = std::move(params);
    api.push_back(std::move(e));
  }
  j["api"] = std::move(api);
  return j;
}

BehaviorLog log_from_json(const ordered_json& j) {
  BehaviorLog log;
  log.file_id = j.at("id").get<std::int64_t>();
  log.label = j.at("label").get<int>();
  if (log.label != 0 && log.label != 1)
    throw nlohmann::json::other_error::create(501, "label must be 0 or 1", nullptr);
  log.strings = j.at("strings").get<std::vector<std::string>>();
  for (const auto& e : j.at("api")) {
    ApiEvent ev;
    ev.name = e.at("name").get<std::string>();
    for (const auto& p : e.at("params")) {
      ApiParam param;
      param.position = p.at(0).get<int>();
      param.value = p.at(1).get<std::string>();
      ev.params.push_back(std::move(param));
    }
    log.api_events.push_back(std::move(ev));
  }
  return log;
}

}  // namespace

std::string logs_to_jsonl(const std::vector<BehaviorLog>& corpus) {
  std::string out = kCorpusHeader;
  out += '\n';
  for (const auto& log : corpus) {
    out += log_to_json(log).dump();
    out += '\n';
  }
  return out;
}

std::vector<BehaviorLog> logs_from_jsonl(const std::string& text,
                                         const std::string& origin) {
  std::vector<BehaviorLog> corpus;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool saw_header = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string_view line(text.data() + pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (line.empty()) continue;
    if (!saw_header) {
      if (line != kCorpusHeader)
        throw ParseError(origin, line_no, "missing or unrecognized corpus header");
      saw_header = true;
      continue;
    }
    try {
      corpus.push_back(log_from_json(ordered_json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(origin, line_no, e.what());
    }
  }
  if (!saw_header) throw ParseError(origin, 1, "empty file, expected corpus header");
  return corpus;
}

void write_logs(const std::vector<BehaviorLog>& corpus,
                const std::filesystem::path& path) {
  write_text_file(path, logs_to_jsonl(corpus));
}

std::vector<BehaviorLog> read_logs(const std::filesystem::path& path) {
  return logs_from_jsonl(read_text_file(path), path.string());
}

}  // namespace advg
