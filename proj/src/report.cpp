#include "crossmark/report.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace crossmark {

namespace {

constexpr const char* kSchema = "crossmark-report-v1";

// +inf is not representable in JSON numbers; the schema spells it "inf".
nlohmann::json psnr_to_json(double v) {
  if (std::isinf(v)) return "inf";
  return v;
}

double psnr_from_json(const nlohmann::json& j, const std::string& where) {
  if (j.is_string()) {
    if (j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
    throw ConfigError(where + ": psnr string must be \"inf\"");
  }
  if (!j.is_number()) throw ConfigError(where + ": psnr must be a number or \"inf\"");
  return j.get<double>();
}

std::string format_value(double v) {
  if (std::isinf(v)) return "inf";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

void check_brr(double v, const std::string& where) {
  if (!(v >= 0.0 && v <= 100.0)) throw ConfigError(where + ": brr_percent outside [0,100]");
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["schema"] = kSchema;
  j["psnr_db"] = psnr_to_json(psnr_db);
  j["brr_percent"] = brr_percent;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries)
    arr.push_back({{"noise", e.noise},
                   {"level", e.level},
                   {"brr_percent", e.brr_percent},
                   {"psnr_db", psnr_to_json(e.psnr_db)}});
  j["entries"] = std::move(arr);
  return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  validate_report_json(j);
  MetricReport r;
  r.psnr_db = psnr_from_json(j.at("psnr_db"), "report");
  r.brr_percent = j.at("brr_percent").get<double>();
  for (const auto& e : j.at("entries")) {
    MetricEntry m;
    m.noise = e.at("noise").get<std::string>();
    m.level = e.at("level").get<double>();
    m.brr_percent = e.at("brr_percent").get<double>();
    m.psnr_db = psnr_from_json(e.at("psnr_db"), "report entry");
    r.entries.push_back(std::move(m));
  }
  return r;
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "noise,level,brr_percent,psnr_db\n";
  os << "none,0," << format_value(brr_percent) << "," << format_value(psnr_db) << "\n";
  for (const auto& e : entries)
    os << e.noise << "," << format_value(e.level) << "," << format_value(e.brr_percent) << ","
       << format_value(e.psnr_db) << "\n";
  return os.str();
}

void validate_report_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("report: not a JSON object");
  if (!j.contains("schema") || j.at("schema") != kSchema)
    throw ConfigError("report: missing or wrong schema tag");
  for (const char* key : {"psnr_db", "brr_percent", "entries"})
    if (!j.contains(key)) throw ConfigError(std::string("report: missing key '") + key + "'");
  psnr_from_json(j.at("psnr_db"), "report");
  if (!j.at("brr_percent").is_number()) throw ConfigError("report: brr_percent must be a number");
  check_brr(j.at("brr_percent").get<double>(), "report");
  if (!j.at("entries").is_array()) throw ConfigError("report: entries must be an array");
  for (const auto& e : j.at("entries")) {
    if (!e.is_object()) throw ConfigError("report entry: not an object");
    for (const char* key : {"noise", "level", "brr_percent", "psnr_db"})
      if (!e.contains(key)) throw ConfigError(std::string("report entry: missing '") + key + "'");
    if (!e.at("noise").is_string()) throw ConfigError("report entry: noise must be a string");
    if (!e.at("level").is_number()) throw ConfigError("report entry: level must be a number");
    if (!e.at("brr_percent").is_number())
      throw ConfigError("report entry: brr_percent must be a number");
    check_brr(e.at("brr_percent").get<double>(), "report entry");
    psnr_from_json(e.at("psnr_db"), "report entry");
  }
}

void validate_report_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line) || line != "noise,level,brr_percent,psnr_db")
    throw ConfigError("report csv: bad header");
  i64 rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string noise, level, brr_s, psnr_s;
    if (!std::getline(ls, noise, ',') || !std::getline(ls, level, ',') ||
        !std::getline(ls, brr_s, ',') || !std::getline(ls, psnr_s))
      throw ConfigError("report csv: malformed row '" + line + "'");
    auto parse_field = [&](const std::string& s, bool inf_ok) {
      if (inf_ok && s == "inf") return std::numeric_limits<double>::infinity();
      size_t pos = 0;
      double v;
      try {
        v = std::stod(s, &pos);
      } catch (const std::exception&) {
        throw ConfigError("report csv: non-numeric field '" + s + "'");
      }
      if (pos != s.size()) throw ConfigError("report csv: non-numeric field '" + s + "'");
      return v;
    };
    parse_field(level, false);
    check_brr(parse_field(brr_s, false), "report csv");
    parse_field(psnr_s, true);
    ++rows;
  }
  if (rows == 0) throw ConfigError("report csv: no data rows");
}

void write_report(const MetricReport& report, const std::string& json_path,
                  const std::string& csv_path) {
  if (!json_path.empty()) {
    std::ofstream f(json_path);
    if (!f) throw IoError("cannot open " + json_path + " for writing");
    f << report.to_json().dump(2) << "\n";
    if (!f) throw IoError("short write to " + json_path);
  }
  if (!csv_path.empty()) {
    std::ofstream f(csv_path);
    if (!f) throw IoError("cannot open " + csv_path + " for writing");
    f << report.to_csv();
    if (!f) throw IoError("short write to " + csv_path);
  }
}

}  // namespace crossmark
