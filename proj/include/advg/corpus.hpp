#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advg/kernels.hpp"

namespace advg {

struct ApiParam {
  int position = 0;
  std::string value;
  bool operator==(const ApiParam&) const = default;
};

struct ApiEvent {
  std::string name;
  std::vector<ApiParam> params;
  bool operator==(const ApiEvent&) const = default;
};

// One emulated-behavior record: the text strings observed for a file plus its
// ordered API call sequence. label is 1 for malware, 0 for benign.
struct BehaviorLog {
  std::int64_t file_id = 0;
  int label = 0;
  std::vector<std::string> strings;
  std::vector<ApiEvent> api_events;
  bool operator==(const BehaviorLog&) const = default;
};

// Generator parameters for the synthetic corpus. Each class owns
// `informative_per_class` designated tokens per feature family; a log of that
// class carries each of them with probability `informative_rate`, and any
// other token with probability `background_rate`. API sequences are Markov
// chains whose preferred transitions are class-specific, which makes call
// trigrams class-informative as well.
struct CorpusSpec {
  std::int64_t n_malware = 0;
  std::int64_t n_benign = 0;
  int string_vocab = 400;
  int api_vocab = 60;
  int param_vocab = 200;
  int informative_per_class = 40;
  double informative_rate = 0.9;
  double background_rate = 0.05;
  double duplicate_rate = 0.01;
  std::uint64_t seed = 42;

  // Throws ConfigError naming the violated field.
  void validate() const;

  static CorpusSpec from_json_text(const std::string& text);
  std::string to_json_text() const;
};

std::vector<BehaviorLog> generate_corpus(const CorpusSpec& spec,
                                         kernels::Exec ex = kernels::default_exec());

// JSON-lines serialization; read_logs(write_logs(c)) == c.
std::string logs_to_jsonl(const std::vector<BehaviorLog>& corpus);
std::vector<BehaviorLog> logs_from_jsonl(const std::string& text,
                                         const std::string& origin = "<memory>");
void write_logs(const std::vector<BehaviorLog>& corpus,
                const std::filesystem::path& path);
std::vector<BehaviorLog> read_logs(const std::filesystem::path& path);

}  // namespace advg
