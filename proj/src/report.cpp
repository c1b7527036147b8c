#include "flat/report.hpp"

#include <cstdio>
#include <stdexcept>

namespace flat::report {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

namespace {

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::ofstream open_or_throw(const std::string& path, std::ios::openmode mode) {
  std::ofstream out(path, mode);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

}  // namespace

void write_rounds_csv(const std::string& path, const std::vector<flsim::RoundReport>& reports) {
  auto out = open_or_throw(path, std::ios::out | std::ios::trunc);
  out << kRoundsHeader << "\n";
  for (const auto& r : reports)
    out << r.round << "," << fmt(r.acc) << "," << fmt(r.asr) << "," << fmt(r.stealth_l2) << ","
        << fmt(r.diversity) << "," << fmt(r.l_atk) << "," << fmt(r.l_stealth) << "," << fmt(r.l_div) << "\n";
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<std::pair<std::string, std::string>> recorded_entries(const config::ExperimentConfig& cfg) {
  auto entries = config::config_entries(cfg);
  std::erase_if(entries, [](const auto& e) {
    return e.first == "output.dir" || e.first == "output.checkpoints" || e.first == "fl.workers";
  });
  return entries;
}

std::string summary_header(const config::ExperimentConfig& cfg) {
  std::string h = "attack,defense,seed,round,acc,asr,stealth_l2,diversity,l_atk,l_stealth,l_div";
  for (const auto& [k, v] : recorded_entries(cfg)) h += ",cfg." + k;
  return h;
}

std::string summary_row(const RunKey& key, const flsim::RoundReport& last,
                        const config::ExperimentConfig& cfg) {
  std::string row = quote(key.attack) + "," + quote(key.defense) + "," + std::to_string(key.seed) + "," +
                    std::to_string(last.round) + "," + fmt(last.acc) + "," + fmt(last.asr) + "," +
                    fmt(last.stealth_l2) + "," + fmt(last.diversity) + "," + fmt(last.l_atk) + "," +
                    fmt(last.l_stealth) + "," + fmt(last.l_div);
  for (const auto& [k, v] : recorded_entries(cfg)) row += "," + quote(v);
  return row;
}

std::vector<std::string> per_class_rows(const RunKey& key, const flsim::RoundReport& report) {
  std::vector<std::string> rows;
  for (std::size_t c = 0; c < report.per_class_asr.size(); ++c)
    rows.push_back(quote(key.attack) + "," + quote(key.defense) + "," + std::to_string(key.seed) + "," +
                   std::to_string(report.round) + "," + std::to_string(c) + "," + fmt(report.per_class_asr[c]) +
                   "," + std::to_string(report.per_class_trials[c]));
  return rows;
}

CsvAppender::CsvAppender(const std::string& path, const std::string& header)
    : path_(path), out_(open_or_throw(path, std::ios::out | std::ios::trunc)) {
  row(header);
}

void CsvAppender::row(const std::string& line) {
  out_ << line << "\n";
  out_.flush();
  if (!out_) throw std::runtime_error("write failed for '" + path_ + "'");
}

}  // namespace flat::report
