// Copyright 2026 The spkdis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Embedding archives, label tables, trial lists, and dataset splits.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "spkdis/common.hpp"
#include "spkdis/rng.hpp"

namespace spkdis {

/// Ordered collection of fixed-dimension vectors keyed by utterance id.
/// Vectors are stored as the rows of a row-major matrix so that an archive
/// can be fed to a network as one batch.
class EmbeddingArchive {
 public:
  explicit EmbeddingArchive(std::size_t dim = 0) : dim_(dim), data_(0, dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }

  const std::vector<std::string>& ids() const { return ids_; }
  const std::string& id(std::size_t i) const { return ids_[i]; }

  auto row(std::size_t i) const { return data_.row(static_cast<Eigen::Index>(i)); }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    require<DataError>(it != index_.end(), "utterance '", id, "' not in archive");
    return it->second;
  }

  void reserve(std::size_t n) {
    ids_.reserve(n);
    if (static_cast<std::size_t>(data_.rows()) < n) {
      Batch grown(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim_));
      grown.topRows(static_cast<Eigen::Index>(ids_.size())) =
          data_.topRows(static_cast<Eigen::Index>(ids_.size()));
      data_.swap(grown);
    }
  }

  /// Appends one entry; enforces unique ids, matching length, finite values.
  void add(std::string id, std::span<const double> vec) {
    require<DataError>(vec.size() == dim_, "vector for '", id, "' has length ", vec.size(),
                       ", archive dim is ", dim_);
    for (double v : vec) require<DataError>(std::isfinite(v), "non-finite value for '", id, "'");
    require<DataError>(index_.emplace(id, ids_.size()).second, "duplicate utterance id '", id, "'");
    const auto n = static_cast<Eigen::Index>(ids_.size());
    if (data_.rows() <= n) {
      Batch grown(std::max<Eigen::Index>(2 * n, 16), static_cast<Eigen::Index>(dim_));
      grown.topRows(n) = data_.topRows(n);
      data_.swap(grown);
    }
    for (std::size_t k = 0; k < dim_; ++k) data_(n, static_cast<Eigen::Index>(k)) = vec[k];
    ids_.push_back(std::move(id));
  }

  void add(std::string id, const Eigen::Ref<const Eigen::RowVectorXd>& vec) {
    add(std::move(id), std::span<const double>(vec.data(), static_cast<std::size_t>(vec.size())));
  }

  /// Builds an archive from ids and a matrix whose rows are the vectors.
  static EmbeddingArchive from_rows(std::vector<std::string> ids, const Batch& rows) {
    require<ShapeError>(ids.size() == static_cast<std::size_t>(rows.rows()), "id count ",
                        ids.size(), " does not match row count ", rows.rows());
    EmbeddingArchive out(static_cast<std::size_t>(rows.cols()));
    require<DataError>(rows.allFinite(), "non-finite value in archive rows");
    out.data_ = rows;
    for (std::size_t i = 0; i < ids.size(); ++i)
      require<DataError>(out.index_.emplace(ids[i], i).second, "duplicate utterance id '", ids[i], "'");
    out.ids_ = std::move(ids);
    return out;
  }

  /// Entries for `ids`, in the order given.
  EmbeddingArchive subset(std::span<const std::string> ids) const {
    Batch rows(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(dim_));
    for (std::size_t i = 0; i < ids.size(); ++i)
      rows.row(static_cast<Eigen::Index>(i)) = row(index_of(ids[i]));
    return from_rows(std::vector<std::string>(ids.begin(), ids.end()), rows);
  }

  /// Dense copy of the used rows (the backing store may be over-allocated).
  Batch matrix() const { return data_.topRows(static_cast<Eigen::Index>(ids_.size())); }

  /// Rows for the given ids stacked into a batch.
  Batch gather(std::span<const std::string> ids) const {
    Batch rows(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(dim_));
    for (std::size_t i = 0; i < ids.size(); ++i)
      rows.row(static_cast<Eigen::Index>(i)) = row(index_of(ids[i]));
    return rows;
  }

  friend bool operator==(const EmbeddingArchive& a, const EmbeddingArchive& b) {
    if (a.dim_ != b.dim_ || a.ids_ != b.ids_) return false;
    const auto n = static_cast<Eigen::Index>(a.size());
    return a.data_.topRows(n) == b.data_.topRows(n);
  }

 private:
  std::size_t dim_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  Batch data_;
};

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 4);
}

inline void put_f64_le(std::ostream& os, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

inline std::uint64_t get_le(const unsigned char* p, int nbytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < nbytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<DataError>(static_cast<bool>(in), "cannot open '", path.string(), "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

/// Writes `EMBA v1 dim=<D> count=<N>\n` followed by N binary records
/// `<u32 id length><id bytes><D x float64>`, all little-endian.
inline void save_archive(const EmbeddingArchive& archive, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require<DataError>(static_cast<bool>(out), "cannot open '", path.string(), "' for writing");
  out << "EMBA v1 dim=" << archive.dim() << " count=" << archive.size() << '\n';
  for (std::size_t i = 0; i < archive.size(); ++i) {
    const auto& id = archive.id(i);
    detail::put_u32_le(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    const auto r = archive.row(i);
    for (Eigen::Index k = 0; k < r.size(); ++k) detail::put_f64_le(out, r(k));
  }
  out.flush();
  require<DataError>(static_cast<bool>(out), "write to '", path.string(), "' failed");
}

inline EmbeddingArchive load_archive(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  const auto nl = bytes.find('\n');
  require<DataError>(nl != std::string::npos, path.string(), ": missing archive header line");
  const std::string header = bytes.substr(0, nl);
  unsigned long long dim = 0, count = 0;
  char tail = 0;
  const int got = std::sscanf(header.c_str(), "EMBA v1 dim=%llu count=%llu%c", &dim, &count, &tail);
  require<DataError>(got == 2 && header.rfind("EMBA v1 dim=", 0) == 0 && dim > 0,
                     path.string(), ": malformed header '", header, "'");

  EmbeddingArchive archive(static_cast<std::size_t>(dim));
  archive.reserve(static_cast<std::size_t>(std::min<unsigned long long>(count, 1u << 20)));
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = nl + 1;
  const std::size_t end = bytes.size();
  std::vector<double> vec(static_cast<std::size_t>(dim));
  for (unsigned long long row = 1; row <= count; ++row) {
    require<DataError>(end - pos >= 4, path.string(), ": row ", row, ": truncated record");
    const auto id_len = static_cast<std::size_t>(detail::get_le(p + pos, 4));
    pos += 4;
    require<DataError>(id_len > 0 && id_len <= end - pos, path.string(), ": row ", row,
                       ": bad id length ", id_len);
    std::string id(bytes.data() + pos, id_len);
    pos += id_len;
    const std::size_t available = (end - pos) / 8;
    require<DataError>(available >= dim, path.string(), ": row ", row, ": dimension mismatch, expected ",
                       dim, " values, found ", available);
    for (std::size_t k = 0; k < dim; ++k, pos += 8) {
      vec[k] = std::bit_cast<double>(detail::get_le(p + pos, 8));
      require<DataError>(std::isfinite(vec[k]), path.string(), ": row ", row, ": non-finite value");
    }
    require<DataError>(!archive.contains(id), path.string(), ": row ", row, ": duplicate id '", id, "'");
    archive.add(std::move(id), vec);
  }
  require<DataError>(pos == end, path.string(), ": ", end - pos, " trailing bytes after ", count, " rows");
  return archive;
}

/// Per-utterance categorical labels. Columns are factors; "speaker" is
/// mandatory.
class LabelTable {
 public:
  LabelTable() : LabelTable(std::vector<std::string>{"speaker"}) {}

  explicit LabelTable(std::vector<std::string> factors) : factors_(std::move(factors)) {
    require<DataError>(std::find(factors_.begin(), factors_.end(), "speaker") != factors_.end(),
                       "label table must define the 'speaker' factor");
    for (std::size_t i = 0; i < factors_.size(); ++i)
      require<DataError>(factor_index_.emplace(factors_[i], i).second, "duplicate factor '",
                         factors_[i], "'");
  }

  const std::vector<std::string>& factors() const { return factors_; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }

  bool has_factor(const std::string& f) const { return factor_index_.count(f) != 0; }
  bool contains(const std::string& id) const { return row_index_.count(id) != 0; }

  void add_row(std::string id, std::vector<std::string> values) {
    require<DataError>(values.size() == factors_.size(), "row '", id, "' has ", values.size(),
                       " labels, expected ", factors_.size());
    for (const auto& v : values) require<DataError>(!v.empty(), "row '", id, "' has an empty label");
    require<DataError>(row_index_.emplace(id, ids_.size()).second, "duplicate utterance id '", id, "'");
    ids_.push_back(std::move(id));
    cells_.push_back(std::move(values));
  }

  const std::string& label(const std::string& id, const std::string& factor) const {
    auto f = factor_index_.find(factor);
    require<DataError>(f != factor_index_.end(), "factor '", factor, "' absent from label table");
    auto r = row_index_.find(id);
    require<DataError>(r != row_index_.end(), "utterance '", id, "' has no labels");
    return cells_[r->second][f->second];
  }

  const std::vector<std::string>& row(const std::string& id) const {
    auto r = row_index_.find(id);
    require<DataError>(r != row_index_.end(), "utterance '", id, "' has no labels");
    return cells_[r->second];
  }

  /// Sorted distinct labels of `factor` over `ids`.
  std::vector<std::string> classes(const std::string& factor, std::span<const std::string> ids) const {
    std::vector<std::string> out;
    for (const auto& id : ids) out.push_back(label(id, factor));
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

 private:
  std::vector<std::string> factors_;
  std::unordered_map<std::string, std::size_t> factor_index_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> row_index_;
  std::vector<std::vector<std::string>> cells_;
};

inline void save_labels(const LabelTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require<DataError>(static_cast<bool>(out), "cannot open '", path.string(), "' for writing");
  out << "utt";
  for (const auto& f : table.factors()) out << '\t' << f;
  out << '\n';
  for (const auto& id : table.ids()) {
    out << id;
    for (const auto& v : table.row(id)) out << '\t' << v;
    out << '\n';
  }
  require<DataError>(static_cast<bool>(out), "write to '", path.string(), "' failed");
}

inline LabelTable load_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<DataError>(static_cast<bool>(in), "cannot open '", path.string(), "' for reading");
  std::string line;
  require<DataError>(static_cast<bool>(std::getline(in, line)), path.string(), ": empty label table");
  detail::strip_cr(line);
  auto header = detail::split_tabs(line);
  require<DataError>(header.size() >= 2 && header[0] == "utt", path.string(),
                     ": header must start with 'utt' and name at least one factor");
  LabelTable table(std::vector<std::string>(header.begin() + 1, header.end()));
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    auto cells = detail::split_tabs(line);
    require<DataError>(cells.size() == header.size(), path.string(), ": line ", lineno, ": expected ",
                       header.size(), " columns, found ", cells.size());
    std::string id = cells[0];
    cells.erase(cells.begin());
    try {
      table.add_row(std::move(id), std::move(cells));
    } catch (const DataError& e) {
      fail<DataError>(path.string(), ": line ", lineno, ": ", e.what());
    }
  }
  return table;
}

/// Disjoint train/validation/test partition of a set of utterance ids.
struct SplitSpec {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  std::uint64_t seed = 0;
  /// Groups that were too small to split and went wholly to train.
  std::vector<std::string> warnings;

  friend bool operator==(const SplitSpec& a, const SplitSpec& b) {
    return a.train_ids == b.train_ids && a.val_ids == b.val_ids && a.test_ids == b.test_ids &&
           a.seed == b.seed;
  }
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct GroupBy {
  std::string factor;
  const LabelTable* labels = nullptr;
};

/// Partitions `ids`. With `group_by`, the fractions are applied within each
/// group: floor(val * n) and floor(test * n) utterances go to validation and
/// test, the remainder to train. Groups of fewer than 3 utterances go wholly
/// to train and are listed in `warnings`. Output order within each split
/// follows the input order.
inline SplitSpec make_splits(std::span<const std::string> ids, SplitFractions fractions,
                             std::optional<GroupBy> group_by, std::uint64_t seed) {
  require<ConfigError>(fractions.train > 0 && fractions.val > 0 && fractions.test > 0,
                       "split fractions must be positive");
  require<ConfigError>(std::abs(fractions.train + fractions.val + fractions.test - 1.0) <= 1e-9,
                       "split fractions must sum to 1");

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::string key;
    if (group_by) {
      require<ConfigError>(group_by->labels != nullptr, "group_by requires a label table");
      key = group_by->labels->label(ids[i], group_by->factor);
    }
    groups[key].push_back(i);
  }

  enum class Part : unsigned char { kTrain, kVal, kTest };
  std::vector<Part> part(ids.size(), Part::kTrain);
  SplitSpec split;
  split.seed = seed;
  for (auto& [key, members] : groups) {
    const std::size_t n = members.size();
    if (n < 3) {
      split.warnings.push_back(detail::concat("group '", key, "' has ", n,
                                              " utterance(s); placed entirely in train"));
      continue;
    }
    Rng rng(substream(seed, "split", hash_tag(key)));
    rng.shuffle(std::span<std::size_t>(members));
    const auto n_val = static_cast<std::size_t>(std::floor(fractions.val * static_cast<double>(n) + 1e-9));
    const auto n_test = static_cast<std::size_t>(std::floor(fractions.test * static_cast<double>(n) + 1e-9));
    for (std::size_t k = 0; k < n_val; ++k) part[members[k]] = Part::kVal;
    for (std::size_t k = n_val; k < n_val + n_test; ++k) part[members[k]] = Part::kTest;
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    switch (part[i]) {
      case Part::kTrain: split.train_ids.push_back(ids[i]); break;
      case Part::kVal: split.val_ids.push_back(ids[i]); break;
      case Part::kTest: split.test_ids.push_back(ids[i]); break;
    }
  }
  return split;
}

inline void save_split(const SplitSpec& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require<DataError>(static_cast<bool>(out), "cannot open '", path.string(), "' for writing");
  for (const auto& id : split.train_ids) out << id << "\ttrain\n";
  for (const auto& id : split.val_ids) out << id << "\tval\n";
  for (const auto& id : split.test_ids) out << id << "\ttest\n";
  require<DataError>(static_cast<bool>(out), "write to '", path.string(), "' failed");
}

inline SplitSpec load_split(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<DataError>(static_cast<bool>(in), "cannot open '", path.string(), "' for reading");
  SplitSpec split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    auto cells = detail::split_tabs(line);
    require<DataError>(cells.size() == 2, path.string(), ": line ", lineno, ": expected 2 columns");
    if (cells[1] == "train") split.train_ids.push_back(cells[0]);
    else if (cells[1] == "val") split.val_ids.push_back(cells[0]);
    else if (cells[1] == "test") split.test_ids.push_back(cells[0]);
    else fail<DataError>(path.string(), ": line ", lineno, ": unknown part '", cells[1], "'");
  }
  return split;
}

/// Keeps min-class-count utterances of every class of `factor`, drawn
/// uniformly without replacement. Output follows the input order.
inline std::vector<std::string> subsample_balanced(std::span<const std::string> ids,
                                                   const std::string& factor,
                                                   const LabelTable& labels, std::uint64_t seed) {
  require<DataError>(labels.has_factor(factor), "factor '", factor, "' absent from label table");
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ids.size(); ++i) by_class[labels.label(ids[i], factor)].push_back(i);
  if (by_class.empty()) return {};
  std::size_t min_count = ids.size();
  for (const auto& [cls, members] : by_class) min_count = std::min(min_count, members.size());

  std::vector<bool> keep(ids.size(), false);
  for (auto& [cls, members] : by_class) {
    Rng rng(substream(seed, "balance", hash_tag(cls)));
    rng.shuffle(std::span<std::size_t>(members));
    for (std::size_t k = 0; k < min_count; ++k) keep[members[k]] = true;
  }
  std::vector<std::string> out;
  out.reserve(min_count * by_class.size());
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (keep[i]) out.push_back(ids[i]);
  return out;
}

struct Trial {
  std::string enroll;
  std::string test;
  bool is_target = false;

  friend bool operator==(const Trial&, const Trial&) = default;
};

using TrialList = std::vector<Trial>;

/// One trial per nonempty line: `<enroll> <test> target|nontarget`.
inline TrialList load_trials(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<DataError>(static_cast<bool>(in), "cannot open '", path.string(), "' for reading");
  TrialList trials;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto fields = detail::split_ws(line);
    if (fields.empty()) continue;
    require<DataError>(fields.size() == 3, path.string(), ": line ", lineno, ": expected 3 fields, found ",
                       fields.size());
    bool target;
    if (fields[2] == "target") target = true;
    else if (fields[2] == "nontarget") target = false;
    else fail<DataError>(path.string(), ": line ", lineno, ": third field must be target or nontarget, got '",
                         fields[2], "'");
    trials.push_back({std::move(fields[0]), std::move(fields[1]), target});
  }
  return trials;
}

inline void save_trials(const TrialList& trials, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require<DataError>(static_cast<bool>(out), "cannot open '", path.string(), "' for writing");
  for (const auto& t : trials) out << t.enroll << ' ' << t.test << ' ' << (t.is_target ? "target" : "nontarget") << '\n';
  require<DataError>(static_cast<bool>(out), "write to '", path.string(), "' failed");
}

}  // namespace spkdis
