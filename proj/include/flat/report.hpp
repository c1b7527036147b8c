#pragma once

// CSV writers for experiment outputs. Numbers use 6 significant digits.

#include "flat/config.hpp"
#include "flat/flsim.hpp"

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace flat::report {

inline constexpr const char* kRoundsHeader = "round,acc,asr,stealth_l2,diversity,l_atk,l_stealth,l_div";
inline constexpr const char* kPerClassHeader = "attack,defense,seed,round,class,asr,trials";

std::string fmt(double v);

// Writes rounds.csv for a single experiment.
void write_rounds_csv(const std::string& path, const std::vector<flsim::RoundReport>& reports);

struct RunKey {
  std::string attack;
  std::string defense;
  std::uint64_t seed = 0;
};

// Config entries echoed into summary rows (everything except output and worker settings).
std::vector<std::pair<std::string, std::string>> recorded_entries(const config::ExperimentConfig& cfg);
std::string summary_header(const config::ExperimentConfig& cfg);
std::string summary_row(const RunKey& key, const flsim::RoundReport& last,
                        const config::ExperimentConfig& cfg);
std::vector<std::string> per_class_rows(const RunKey& key, const flsim::RoundReport& report);

// Append-only writer; every row is flushed so partial sweeps stay usable.
class CsvAppender {
 public:
  CsvAppender(const std::string& path, const std::string& header);
  void row(const std::string& line);

 private:
  std::string path_;
  std::ofstream out_;
};

}  // namespace flat::report
