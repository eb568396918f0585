#pragma once

#include "sparsefa/core.hpp"

#include <array>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace sparsefa {

constexpr int kGenreFlags = 19;

struct UserRecord {
  int user_id = 0;  // 1-based external id
  int age = 0;
  char gender = 'F';  // 'M' or 'F'
  std::string occupation;
  std::string zip;
};

struct ItemRecord {
  int item_id = 0;  // 1-based external id
  std::string title;
  std::array<int, kGenreFlags> genre_flags{};
};

struct RawRating {
  int user_id = 0;
  int item_id = 0;
  double rating = 0.0;
};

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.push_back("");
  return out;
}

inline int parse_int(const std::string& s, const char* what, int lineno) {
  try {
    size_t pos = 0;
    int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw MalformedLine(std::string("bad ") + what + " field '" + s + "'", lineno);
  }
}

inline std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return in;
}

inline std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace detail

// ML-100K u.user: user_id|age|gender|occupation|zip
inline std::vector<UserRecord> parse_users(const std::string& path) {
  auto in = detail::open_or_throw(path);
  std::vector<UserRecord> out;
  std::unordered_set<int> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    auto f = detail::split(line, '|');
    if (f.size() != 5) throw MalformedLine("expected 5 pipe-separated fields", lineno);
    UserRecord u;
    u.user_id = detail::parse_int(f[0], "user id", lineno);
    u.age = detail::parse_int(f[1], "age", lineno);
    if (u.age <= 0) throw MalformedLine("age must be positive", lineno);
    if (f[2] != "M" && f[2] != "F")
      throw MalformedLine("gender must be M or F", lineno);
    u.gender = f[2][0];
    u.occupation = f[3];
    u.zip = f[4];
    if (!seen.insert(u.user_id).second)
      throw DuplicateUserId("duplicate user id " + std::to_string(u.user_id));
    out.push_back(std::move(u));
  }
  return out;
}

// ML-100K u.item: movie_id|title|release|video_release|url|flag_1|...|flag_19.
// Titles are kept as raw bytes (the file is not valid UTF-8).
inline std::vector<ItemRecord> parse_items(const std::string& path) {
  auto in = detail::open_or_throw(path);
  std::vector<ItemRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    auto f = detail::split(line, '|');
    if (f.size() < 6) throw MalformedLine("too few pipe-separated fields", lineno);
    if (f.size() != 5 + kGenreFlags)
      throw WrongFlagCount("expected " + std::to_string(kGenreFlags) +
                           " genre flags, line " + std::to_string(lineno));
    ItemRecord it;
    it.item_id = detail::parse_int(f[0], "item id", lineno);
    it.title = f[1];
    for (int t = 0; t < kGenreFlags; ++t) {
      const int flag = detail::parse_int(f[5 + t], "genre flag", lineno);
      if (flag != 0 && flag != 1)
        throw MalformedLine("genre flag must be 0 or 1", lineno);
      it.genre_flags[t] = flag;
    }
    out.push_back(std::move(it));
  }
  return out;
}

// ML-100K u.data / uN.base / uN.test: user \t item \t rating \t timestamp
inline std::vector<RawRating> parse_ratings(const std::string& path) {
  auto in = detail::open_or_throw(path);
  std::vector<RawRating> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    auto f = detail::split(line, '\t');
    if (f.size() != 4) throw MalformedLine("expected 4 tab-separated fields", lineno);
    RawRating r;
    r.user_id = detail::parse_int(f[0], "user id", lineno);
    r.item_id = detail::parse_int(f[1], "item id", lineno);
    try {
      r.rating = std::stod(f[2]);
    } catch (const std::exception&) {
      throw MalformedLine("bad rating field '" + f[2] + "'", lineno);
    }
    if (r.rating < 1.0 || r.rating > 5.0)
      throw RatingOutOfRange("rating " + f[2] + " outside [1, 5] at line " +
                             std::to_string(lineno));
    out.push_back(r);
  }
  return out;
}

struct AgeStats {
  double mean = 0.0;
  double sd = 1.0;
};

// Mean and standard deviation of age over the distinct users that appear in
// the given ratings (compute on the training split, reuse for the test split).
inline AgeStats age_stats(const std::vector<UserRecord>& users,
                          const std::vector<RawRating>& ratings) {
  std::unordered_map<int, int> age_by_id;
  for (const UserRecord& u : users) age_by_id[u.user_id] = u.age;
  std::unordered_set<int> distinct;
  for (const RawRating& r : ratings) {
    if (!age_by_id.count(r.user_id))
      throw UnknownUser("rating references unknown user " + std::to_string(r.user_id));
    distinct.insert(r.user_id);
  }
  AgeStats st;
  double sum = 0.0;
  for (int id : distinct) sum += age_by_id[id];
  const double n = static_cast<double>(distinct.size());
  st.mean = sum / n;
  double ss = 0.0;
  for (int id : distinct) {
    const double d = age_by_id[id] - st.mean;
    ss += d * d;
  }
  st.sd = std::sqrt(ss / n);
  if (st.sd == 0.0) st.sd = 1.0;
  return st;
}

// Covariate construction: x = (1, standardized age, gender M -> 1, 19 genre
// flags), p = 22. External ids are remapped to dense 0-based indices by
// position in the user/item dictionaries, so train and test share one index
// space.
inline RatingsTriples build_covariates(const std::vector<UserRecord>& users,
                                       const std::vector<ItemRecord>& items,
                                       const std::vector<RawRating>& ratings,
                                       std::optional<AgeStats> stats = {}) {
  const AgeStats st = stats ? *stats : age_stats(users, ratings);
  std::unordered_map<int, int> user_idx, item_idx;
  for (size_t i = 0; i < users.size(); ++i) user_idx[users[i].user_id] = static_cast<int>(i);
  for (size_t j = 0; j < items.size(); ++j) item_idx[items[j].item_id] = static_cast<int>(j);

  RatingsTriples data;
  data.n_users = static_cast<int>(users.size());
  data.n_items = static_cast<int>(items.size());
  data.p = 3 + kGenreFlags;
  data.entries.reserve(ratings.size());
  for (const RawRating& r : ratings) {
    auto ui = user_idx.find(r.user_id);
    if (ui == user_idx.end())
      throw UnknownUser("unknown user id " + std::to_string(r.user_id));
    auto ij = item_idx.find(r.item_id);
    if (ij == item_idx.end())
      throw UnknownItem("unknown item id " + std::to_string(r.item_id));
    const UserRecord& u = users[ui->second];
    const ItemRecord& it = items[ij->second];
    Entry en;
    en.user = ui->second;
    en.item = ij->second;
    en.rating = r.rating;
    en.x = Vec::Zero(data.p);
    en.x[0] = 1.0;
    en.x[1] = (u.age - st.mean) / st.sd;
    en.x[2] = u.gender == 'M' ? 1.0 : 0.0;
    for (int t = 0; t < kGenreFlags; ++t) en.x[3 + t] = it.genre_flags[t];
    data.entries.push_back(std::move(en));
  }
  return data;
}

}  // namespace sparsefa
