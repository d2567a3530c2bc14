// SPDX-License-Identifier: Apache-2.0
//
// Plain key/value config files: `key = value` lines, # comments, [section]
// headers that prefix the keys that follow, strings, numbers, booleans and
// flat arrays. Power and noise fields carry _db / _dbm suffixes in files and
// are converted to linear watts here, so the in-memory config is unit-clean.
#pragma once

#include <nafd/scenario.hpp>

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace nafd {

struct ConfigError : std::runtime_error {
  ConfigError(int line_no, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line_no) + ": " + msg), line(line_no) {}
  int line;
};

struct KvValue {
  enum Kind { kNum, kStr, kBool, kNumList, kStrList } kind = kNum;
  double num = 0.0;
  std::string str;
  bool boolean = false;
  std::vector<double> nums;
  std::vector<std::string> strs;
  int line = 0;
};

using KvMap = std::map<std::string, KvValue>;

KvMap parse_kv_text(const std::string& text);
KvMap load_kv_file(const std::string& path);  // throws ConfigError / runtime_error

// Builds a ScenarioConfig from the non-"experiment." keys of the map, starting
// from desk_profile() defaults. Rejects unknown keys. Validates the result.
ScenarioConfig scenario_from_kv(const KvMap& kv);

ScenarioConfig load_scenario(const std::string& path);

double dbm_to_watt(double dbm);
double db_to_linear(double db);

}  // namespace nafd
