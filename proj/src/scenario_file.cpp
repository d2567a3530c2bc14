// SPDX-License-Identifier: Apache-2.0
#include <nafd/scenario_file.hpp>

#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace nafd {

double dbm_to_watt(double dbm) { return std::pow(10.0, (dbm - 30.0) / 10.0); }
double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

bool parse_number(const std::string& tok, double& out) {
  if (tok == "inf") {
    out = std::numeric_limits<double>::infinity();
    return true;
  }
  try {
    size_t pos = 0;
    out = std::stod(tok, &pos);
    return pos == tok.size();
  } catch (...) {
    return false;
  }
}

KvValue parse_value(const std::string& raw, int line) {
  KvValue v;
  v.line = line;
  std::string s = trim(raw);
  if (s.empty()) throw ConfigError(line, "missing value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') throw ConfigError(line, "unterminated string");
    v.kind = KvValue::kStr;
    v.str = s.substr(1, s.size() - 2);
    return v;
  }
  if (s == "true" || s == "false") {
    v.kind = KvValue::kBool;
    v.boolean = (s == "true");
    return v;
  }
  if (s.front() == '[') {
    if (s.back() != ']') throw ConfigError(line, "unterminated array");
    std::string body = s.substr(1, s.size() - 2);
    std::vector<std::string> toks;
    std::string cur;
    bool in_str = false;
    for (char c : body) {
      if (c == '"') in_str = !in_str;
      if (c == ',' && !in_str) {
        toks.push_back(trim(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!trim(cur).empty()) toks.push_back(trim(cur));
    bool all_str = !toks.empty() && toks.front().size() > 0 && toks.front().front() == '"';
    if (all_str) {
      v.kind = KvValue::kStrList;
      for (auto& t : toks) {
        if (t.size() < 2 || t.front() != '"' || t.back() != '"')
          throw ConfigError(line, "bad string array element '" + t + "'");
        v.strs.push_back(t.substr(1, t.size() - 2));
      }
    } else {
      v.kind = KvValue::kNumList;
      for (auto& t : toks) {
        double d;
        if (!parse_number(t, d)) throw ConfigError(line, "bad numeric array element '" + t + "'");
        v.nums.push_back(d);
      }
    }
    return v;
  }
  double d;
  if (!parse_number(s, d)) throw ConfigError(line, "cannot parse value '" + s + "'");
  v.kind = KvValue::kNum;
  v.num = d;
  return v;
}

}  // namespace

KvMap parse_kv_text(const std::string& text) {
  KvMap kv;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(line_no, "unterminated section header");
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty()) throw ConfigError(line_no, "empty section name");
      continue;
    }
    size_t eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(line_no, "expected 'key = value'");
    std::string key = trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError(line_no, "empty key");
    for (char c : key)
      if (!std::isalnum((unsigned char)c) && c != '_' && c != '.')
        throw ConfigError(line_no, "bad character in key '" + key + "'");
    if (!section.empty()) key = section + "." + key;
    if (kv.count(key)) throw ConfigError(line_no, "duplicate key '" + key + "'");
    kv[key] = parse_value(s.substr(eq + 1), line_no);
  }
  return kv;
}

KvMap load_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_kv_text(ss.str());
}

namespace {

double want_num(const KvValue& v) {
  if (v.kind != KvValue::kNum) throw ConfigError(v.line, "expected a number");
  return v.num;
}

int want_int(const KvValue& v) {
  double d = want_num(v);
  int i = (int)std::lround(d);
  if (std::abs(d - i) > 1e-9) throw ConfigError(v.line, "expected an integer");
  return i;
}

// scalar broadcast or full per-index array
VecD want_vec(const KvValue& v, int n) {
  if (v.kind == KvValue::kNum) return VecD::Constant(n, v.num);
  if (v.kind == KvValue::kNumList) {
    if ((int)v.nums.size() != n)
      throw ConfigError(v.line, "expected " + std::to_string(n) + " entries");
    return Eigen::Map<const VecD>(v.nums.data(), n);
  }
  throw ConfigError(v.line, "expected a number or numeric array");
}

}  // namespace

ScenarioConfig scenario_from_kv(const KvMap& kv) {
  ScenarioConfig c = desk_profile();
  auto get = [&](const char* key) -> const KvValue* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };

  if (auto* v = get("tx_raus")) c.num_tx_rau = want_int(*v);
  if (auto* v = get("rx_raus")) c.num_rx_rau = want_int(*v);
  if (auto* v = get("dl_users")) c.num_dl_users = want_int(*v);
  if (auto* v = get("ul_users")) c.num_ul_users = want_int(*v);
  if (auto* v = get("antennas_per_rau")) c.ant_per_rau = want_int(*v);
  if (auto* v = get("radius_m")) c.radius_m = want_num(*v);
  if (auto* v = get("min_rau_user_dist_m")) c.min_rau_user_dist_m = want_num(*v);
  if (auto* v = get("pathloss_offset_db")) c.pathloss_offset_db = want_num(*v);
  if (auto* v = get("pathloss_slope_db")) c.pathloss_slope_db = want_num(*v);
  if (auto* v = get("shadowing_std_db")) c.shadowing_std_db = want_num(*v);
  if (auto* v = get("theta")) c.theta = want_num(*v);
  if (auto* v = get("xi")) c.xi = want_num(*v);

  // counts first, then sized fields resized to the new counts
  c.dl_power_cap_w = VecD::Constant(c.num_tx_rau, 1.0);
  c.ul_power_cap_w = VecD::Constant(c.num_ul_users, 0.5);
  c.backhaul_cap_bps_hz = VecD::Constant(c.num_tx_rau, 20.0);
  c.dl_rate_floor = VecD::Constant(c.num_dl_users, 0.1);
  c.ul_rate_floor = VecD::Constant(c.num_ul_users, 0.1);
  c.dl_noise_w = VecD::Constant(c.num_dl_users, 1e-10);
  c.ul_noise_w = VecD::Constant(c.num_rx_rau, 1e-10);

  if (auto* v = get("dl_power_cap_w")) c.dl_power_cap_w = want_vec(*v, c.num_tx_rau);
  if (auto* v = get("dl_power_cap_dbm"))
    c.dl_power_cap_w = want_vec(*v, c.num_tx_rau).unaryExpr(&dbm_to_watt);
  if (auto* v = get("ul_power_cap_w")) c.ul_power_cap_w = want_vec(*v, c.num_ul_users);
  if (auto* v = get("ul_power_cap_dbm"))
    c.ul_power_cap_w = want_vec(*v, c.num_ul_users).unaryExpr(&dbm_to_watt);
  if (auto* v = get("backhaul_cap")) c.backhaul_cap_bps_hz = want_vec(*v, c.num_tx_rau);
  if (auto* v = get("dl_rate_floor")) c.dl_rate_floor = want_vec(*v, c.num_dl_users);
  if (auto* v = get("ul_rate_floor")) c.ul_rate_floor = want_vec(*v, c.num_ul_users);
  if (auto* v = get("noise_dbm")) {
    c.dl_noise_w = want_vec(*v, c.num_dl_users).unaryExpr(&dbm_to_watt);
    c.ul_noise_w = want_vec(*v, c.num_rx_rau).unaryExpr(&dbm_to_watt);
  }
  if (auto* v = get("dl_noise_dbm")) c.dl_noise_w = want_vec(*v, c.num_dl_users).unaryExpr(&dbm_to_watt);
  if (auto* v = get("ul_noise_dbm")) c.ul_noise_w = want_vec(*v, c.num_rx_rau).unaryExpr(&dbm_to_watt);
  if (auto* v = get("iri_error")) c.iri_error = want_num(*v);
  if (auto* v = get("iri_error_db")) c.iri_error = db_to_linear(want_num(*v));
  if (auto* v = get("uu_pairing")) {
    if (v->kind != KvValue::kNumList) throw ConfigError(v->line, "uu_pairing must be an array");
    c.uu_pairing.clear();
    for (double d : v->nums) c.uu_pairing.push_back((int)std::lround(d));
  }

  static const std::set<std::string> known = {
      "tx_raus",          "rx_raus",          "dl_users",         "ul_users",
      "antennas_per_rau", "radius_m",         "min_rau_user_dist_m", "pathloss_offset_db",
      "pathloss_slope_db", "shadowing_std_db", "theta",            "xi",
      "dl_power_cap_w",   "dl_power_cap_dbm", "ul_power_cap_w",   "ul_power_cap_dbm",
      "backhaul_cap",     "dl_rate_floor",    "ul_rate_floor",    "noise_dbm",
      "dl_noise_dbm",     "ul_noise_dbm",     "iri_error",        "iri_error_db",
      "uu_pairing"};
  for (const auto& [key, val] : kv) {
    if (key.rfind("experiment.", 0) == 0) continue;  // handled by the harness
    if (!known.count(key)) throw ConfigError(val.line, "unknown key '" + key + "'");
  }

  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(0, e.what());
  }
  return c;
}

ScenarioConfig load_scenario(const std::string& path) { return scenario_from_kv(load_kv_file(path)); }

}  // namespace nafd
