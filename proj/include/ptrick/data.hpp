#pragma once

// Multinomial count data in long (one row per observation-category) and short
// (one row per observation, one count column per category) layouts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "ptrick/csv.hpp"
#include "ptrick/error.hpp"

namespace ptrick {

using Count = std::int64_t;

// A covariate value: a real number or a categorical level.
using Value = std::variant<double, std::string>;

inline std::string to_string(const Value& v) {
  if (const double* d = std::get_if<double>(&v)) return csv::number_to_string(*d);
  return std::get<std::string>(v);
}

enum class CovariateKind { continuous, categorical };

struct Covariate {
  std::string name;
  CovariateKind kind = CovariateKind::continuous;
  // Categorical levels in first-observed order; the first is the reference.
  std::vector<std::string> levels;

  std::optional<std::size_t> level_index(const std::string& level) const {
    auto it = std::find(levels.begin(), levels.end(), level);
    if (it == levels.end()) return std::nullopt;
    return static_cast<std::size_t>(it - levels.begin());
  }
};

struct LongRecord {
  std::string group_id;  // empty for independent data
  std::string obs_id;
  std::string category;
  Count count = 0;
  std::vector<Value> covariates;  // aligned with Dataset::covariates()
};

// Validated long-format data. Records are stored observation-major with the
// categories of each observation in label order.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<std::string> category_labels, std::string baseline,
          std::vector<Covariate> covariates, std::vector<LongRecord> records, bool grouped)
      : labels_(std::move(category_labels)),
        covariates_(std::move(covariates)),
        grouped_(grouped) {
    if (labels_.size() < 2) throw ValidationError("at least two categories are required");
    {
      std::set<std::string> uniq(labels_.begin(), labels_.end());
      if (uniq.size() != labels_.size()) throw ValidationError("duplicate category labels");
    }
    auto b = category_index(baseline);
    if (!b) throw ValidationError("baseline '" + baseline + "' is not a category label");
    baseline_ = *b;
    if (records.empty()) throw ValidationError("dataset has no observations");

    // Categorical levels in first-observed order (file order).
    for (std::size_t c = 0; c < covariates_.size(); ++c) {
      auto& cov = covariates_[c];
      for (const auto& r : records) {
        if (r.covariates.size() != covariates_.size()) {
          throw ValidationError("record for observation '" + r.obs_id +
                                "' has the wrong number of covariates");
        }
        const Value& v = r.covariates[c];
        if (cov.kind == CovariateKind::continuous) {
          const double* d = std::get_if<double>(&v);
          if (!d) throw ValidationError("covariate '" + cov.name + "' must be numeric");
          if (!std::isfinite(*d)) {
            throw ValidationError("covariate '" + cov.name + "' has a non-finite value");
          }
        } else {
          const std::string* s = std::get_if<std::string>(&v);
          if (!s) throw ValidationError("covariate '" + cov.name + "' must be categorical");
          if (!cov.level_index(*s)) cov.levels.push_back(*s);
        }
      }
    }

    const std::size_t Q = labels_.size();
    std::unordered_map<std::string, std::size_t> obs_pos;
    std::vector<std::vector<std::optional<LongRecord>>> slots;
    for (auto& r : records) {
      if (r.count < 0) {
        throw ValidationError("negative count for observation '" + r.obs_id + "'");
      }
      auto q = category_index(r.category);
      if (!q) {
        throw ValidationError("unknown category '" + r.category + "' in observation '" +
                              r.obs_id + "'");
      }
      auto [it, inserted] = obs_pos.try_emplace(r.obs_id, slots.size());
      if (inserted) slots.emplace_back(Q);
      auto& slot = slots[it->second][*q];
      if (slot) {
        throw ValidationError("observation '" + r.obs_id + "' has category '" + r.category +
                              "' more than once");
      }
      slot = std::move(r);
    }

    records_.reserve(slots.size() * Q);
    std::unordered_map<std::string, std::size_t> group_pos;
    for (auto& obs : slots) {
      std::size_t present = 0;
      for (auto& s : obs) present += s.has_value();
      if (present != Q) {
        std::string id;
        for (auto& s : obs) {
          if (s) id = s->obs_id;
        }
        throw ValidationError("observation '" + id + "' has " + std::to_string(present) +
                              " categories, expected " + std::to_string(Q));
      }
      const std::string gid = obs.front()->group_id;
      Count total = 0;
      for (auto& s : obs) {
        if (s->group_id != gid) {
          throw ValidationError("observation '" + s->obs_id + "' spans several groups");
        }
        total += s->count;
        records_.push_back(std::move(*s));
      }
      totals_.push_back(total);
      auto [git, ginserted] = group_pos.try_emplace(grouped_ ? gid : std::string(), groups_.size());
      if (ginserted) groups_.push_back(grouped_ ? gid : std::string());
      group_of_obs_.push_back(grouped_ ? git->second : 0);
    }
    if (!grouped_) {
      // Independent data: each observation is its own group.
      groups_.clear();
      group_of_obs_.clear();
      for (std::size_t j = 0; j < num_observations(); ++j) {
        groups_.push_back(obs_id(j));
        group_of_obs_.push_back(j);
      }
    }
  }

  const std::vector<std::string>& category_labels() const noexcept { return labels_; }
  std::size_t num_categories() const noexcept { return labels_.size(); }
  std::size_t baseline_index() const noexcept { return baseline_; }
  const std::string& baseline() const { return labels_[baseline_]; }
  std::optional<std::size_t> category_index(const std::string& label) const {
    auto it = std::find(labels_.begin(), labels_.end(), label);
    if (it == labels_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - labels_.begin());
  }

  const std::vector<Covariate>& covariates() const noexcept { return covariates_; }
  std::optional<std::size_t> covariate_index(const std::string& name) const {
    for (std::size_t c = 0; c < covariates_.size(); ++c) {
      if (covariates_[c].name == name) return c;
    }
    return std::nullopt;
  }

  const std::vector<LongRecord>& records() const noexcept { return records_; }
  std::size_t num_observations() const noexcept { return totals_.size(); }
  const LongRecord& record(std::size_t obs, std::size_t q) const {
    return records_[obs * labels_.size() + q];
  }
  Count count(std::size_t obs, std::size_t q) const { return record(obs, q).count; }
  Count total(std::size_t obs) const { return totals_[obs]; }
  const std::string& obs_id(std::size_t obs) const { return record(obs, 0).obs_id; }

  // Grouping. Independent data is treated as one group per observation.
  bool grouped() const noexcept { return grouped_; }
  std::size_t num_groups() const noexcept { return groups_.size(); }
  const std::vector<std::string>& group_labels() const noexcept { return groups_; }
  std::size_t group_of(std::size_t obs) const { return group_of_obs_[obs]; }

  Dataset with_baseline(const std::string& label) const {
    Dataset d = *this;
    auto b = category_index(label);
    if (!b) throw ValidationError("baseline '" + label + "' is not a category label");
    d.baseline_ = *b;
    return d;
  }

 private:
  std::vector<std::string> labels_;
  std::size_t baseline_ = 0;
  std::vector<Covariate> covariates_;
  std::vector<LongRecord> records_;
  std::vector<Count> totals_;
  bool grouped_ = false;
  std::vector<std::string> groups_;
  std::vector<std::size_t> group_of_obs_;
};

// ---------------------------------------------------------------------------
// Short format

struct ShortRecord {
  std::optional<std::string> group_id;
  std::string obs_id;
  std::vector<Value> shared;                 // one value per shared covariate
  std::vector<std::vector<Value>> specific;  // [covariate][category]
  std::vector<Count> counts;                 // indexed by category label
};

struct ShortTable {
  std::vector<std::string> category_labels;
  std::vector<std::string> shared_names;
  std::vector<std::string> specific_names;
  std::vector<ShortRecord> rows;
};

inline ShortTable to_short(const Dataset& ds) {
  const std::size_t Q = ds.num_categories();
  ShortTable t;
  t.category_labels = ds.category_labels();
  std::vector<bool> varies(ds.covariates().size(), false);
  for (std::size_t j = 0; j < ds.num_observations(); ++j) {
    for (std::size_t c = 0; c < varies.size(); ++c) {
      for (std::size_t q = 1; q < Q && !varies[c]; ++q) {
        varies[c] = ds.record(j, q).covariates[c] != ds.record(j, 0).covariates[c];
      }
    }
  }
  for (std::size_t c = 0; c < varies.size(); ++c) {
    (varies[c] ? t.specific_names : t.shared_names).push_back(ds.covariates()[c].name);
  }
  for (std::size_t j = 0; j < ds.num_observations(); ++j) {
    ShortRecord r;
    if (ds.grouped()) r.group_id = ds.record(j, 0).group_id;
    r.obs_id = ds.obs_id(j);
    for (std::size_t c = 0; c < varies.size(); ++c) {
      if (varies[c]) {
        std::vector<Value> per;
        for (std::size_t q = 0; q < Q; ++q) per.push_back(ds.record(j, q).covariates[c]);
        r.specific.push_back(std::move(per));
      } else {
        r.shared.push_back(ds.record(j, 0).covariates[c]);
      }
    }
    for (std::size_t q = 0; q < Q; ++q) r.counts.push_back(ds.count(j, q));
    t.rows.push_back(std::move(r));
  }
  return t;
}

// ---------------------------------------------------------------------------
// CSV ingestion

enum class Format { short_format, long_format };

// Maps CSV columns onto roles.
struct CsvSchema {
  std::optional<std::string> group;  // absent => independent data
  std::string obs = "obs";           // empty => row number (short format only)
  std::string category = "category";
  std::string count = "count";
  // Short format: count columns, named by their category label.
  std::vector<std::string> count_columns;
  // Short format: category-specific covariates, one column per category in
  // count_columns order. Columns named "<name>.<label>" are detected automatically.
  std::vector<std::pair<std::string, std::vector<std::string>>> specific;
  // Covariates to keep; nullopt keeps every unassigned column.
  std::optional<std::vector<std::string>> covariates;
  // Columns read as categorical even when numeric.
  std::vector<std::string> categorical;
  std::optional<std::string> baseline;
};

namespace detail {

inline Count parse_count(const std::string& s, const std::string& where) {
  auto v = csv::to_number(s);
  if (!v || !std::isfinite(*v) || std::floor(*v) != *v) {
    throw ValidationError("non-integer count '" + s + "' (" + where + ")");
  }
  if (*v < 0) throw ValidationError("negative count " + s + " (" + where + ")");
  return static_cast<Count>(*v);
}

// Decides the kind of each covariate and converts raw strings into values.
struct CovariateColumns {
  std::vector<Covariate> covariates;

  void add(const std::string& name, const std::vector<const std::string*>& cells,
           const CsvSchema& schema) {
    bool categorical = std::find(schema.categorical.begin(), schema.categorical.end(), name) !=
                       schema.categorical.end();
    if (!categorical) {
      for (const std::string* s : cells) {
        if (!csv::to_number(*s)) {
          categorical = true;
          break;
        }
      }
    }
    covariates.push_back(
        {name, categorical ? CovariateKind::categorical : CovariateKind::continuous, {}});
  }

  Value convert(std::size_t c, const std::string& s) const {
    if (covariates[c].kind == CovariateKind::categorical) return s;
    return *csv::to_number(s);
  }
};

inline bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace detail

inline Dataset ingest_long(const csv::Table& t, const CsvSchema& schema) {
  std::optional<std::size_t> gcol;
  if (schema.group) gcol = t.require_column(*schema.group);
  const std::size_t ocol = t.require_column(schema.obs);
  const std::size_t ccol = t.require_column(schema.category);
  const std::size_t ncol = t.require_column(schema.count);

  std::vector<std::string> names;
  if (schema.covariates) {
    for (const auto& n : *schema.covariates) {
      t.require_column(n);
      names.push_back(n);
    }
  } else {
    for (std::size_t k = 0; k < t.header.size(); ++k) {
      if (k == ocol || k == ccol || k == ncol || (gcol && k == *gcol)) continue;
      names.push_back(t.header[k]);
    }
  }
  if (t.rows.empty()) throw ValidationError("dataset has no observations");

  detail::CovariateColumns cols;
  std::vector<std::size_t> idx;
  for (const auto& n : names) {
    std::size_t k = *t.column(n);
    idx.push_back(k);
    std::vector<const std::string*> cells;
    for (const auto& r : t.rows) cells.push_back(&r[k]);
    cols.add(n, cells, schema);
  }

  std::vector<std::string> labels;
  std::vector<LongRecord> records;
  records.reserve(t.rows.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    LongRecord r;
    if (gcol) r.group_id = row[*gcol];
    r.obs_id = row[ocol];
    r.category = row[ccol];
    if (!detail::contains(labels, r.category)) labels.push_back(r.category);
    r.count = detail::parse_count(row[ncol], "row " + std::to_string(i + 2));
    for (std::size_t c = 0; c < idx.size(); ++c) r.covariates.push_back(cols.convert(c, row[idx[c]]));
    records.push_back(std::move(r));
  }
  std::string baseline = schema.baseline.value_or(labels.front());
  return Dataset(labels, baseline, cols.covariates, std::move(records), gcol.has_value());
}

inline Dataset ingest_short(const csv::Table& t, const CsvSchema& schema) {
  if (schema.count_columns.size() < 2) {
    throw SchemaError("short format needs at least two count columns");
  }
  std::optional<std::size_t> gcol;
  if (schema.group) gcol = t.require_column(*schema.group);
  std::optional<std::size_t> ocol;
  if (!schema.obs.empty()) ocol = t.require_column(schema.obs);
  const auto& labels = schema.count_columns;
  std::vector<std::size_t> count_idx;
  for (const auto& l : labels) count_idx.push_back(t.require_column(l));

  std::vector<std::pair<std::string, std::vector<std::size_t>>> specific;
  std::set<std::size_t> used(count_idx.begin(), count_idx.end());
  if (gcol) used.insert(*gcol);
  if (ocol) used.insert(*ocol);
  for (const auto& [name, columns] : schema.specific) {
    if (columns.size() != labels.size()) {
      throw SchemaError("category-specific covariate '" + name + "' needs " +
                        std::to_string(labels.size()) + " columns");
    }
    std::vector<std::size_t> k;
    for (const auto& c : columns) k.push_back(t.require_column(c));
    used.insert(k.begin(), k.end());
    specific.emplace_back(name, std::move(k));
  }
  // "<name>.<label>" columns for every label form a category-specific covariate.
  for (std::size_t k = 0; k < t.header.size(); ++k) {
    if (used.count(k)) continue;
    const std::string& h = t.header[k];
    const std::string suffix = "." + labels.front();
    if (h.size() <= suffix.size() || h.compare(h.size() - suffix.size(), suffix.size(), suffix)) {
      continue;
    }
    std::string name = h.substr(0, h.size() - suffix.size());
    std::vector<std::size_t> cols;
    for (const auto& l : labels) {
      auto c = t.column(name + "." + l);
      if (!c || used.count(*c)) break;
      cols.push_back(*c);
    }
    if (cols.size() != labels.size()) continue;
    used.insert(cols.begin(), cols.end());
    specific.emplace_back(name, std::move(cols));
  }

  std::vector<std::pair<std::string, std::size_t>> shared;
  if (schema.covariates) {
    for (const auto& n : *schema.covariates) {
      bool is_specific = false;
      for (const auto& s : specific) is_specific |= s.first == n;
      if (!is_specific) shared.emplace_back(n, t.require_column(n));
    }
    // Keep only the requested category-specific covariates.
    std::erase_if(specific, [&](const auto& s) { return !detail::contains(*schema.covariates, s.first); });
  } else {
    for (std::size_t k = 0; k < t.header.size(); ++k) {
      if (!used.count(k)) shared.emplace_back(t.header[k], k);
    }
  }
  if (t.rows.empty()) throw ValidationError("dataset has no observations");

  detail::CovariateColumns cols;
  for (const auto& [name, k] : shared) {
    std::vector<const std::string*> cells;
    for (const auto& r : t.rows) cells.push_back(&r[k]);
    cols.add(name, cells, schema);
  }
  for (const auto& [name, ks] : specific) {
    std::vector<const std::string*> cells;
    for (const auto& r : t.rows) {
      for (std::size_t k : ks) cells.push_back(&r[k]);
    }
    cols.add(name, cells, schema);
  }

  std::vector<LongRecord> records;
  records.reserve(t.rows.size() * labels.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    for (std::size_t q = 0; q < labels.size(); ++q) {
      LongRecord r;
      if (gcol) r.group_id = row[*gcol];
      r.obs_id = ocol ? row[*ocol] : std::to_string(i + 1);
      r.category = labels[q];
      r.count = detail::parse_count(row[count_idx[q]], "row " + std::to_string(i + 2));
      std::size_t c = 0;
      for (const auto& s : shared) r.covariates.push_back(cols.convert(c++, row[s.second]));
      for (const auto& s : specific) r.covariates.push_back(cols.convert(c++, row[s.second[q]]));
      records.push_back(std::move(r));
    }
  }
  std::string baseline = schema.baseline.value_or(labels.front());
  return Dataset(labels, baseline, cols.covariates, std::move(records), gcol.has_value());
}

inline Dataset ingest(const csv::Table& t, Format format, const CsvSchema& schema) {
  return format == Format::long_format ? ingest_long(t, schema) : ingest_short(t, schema);
}

inline Dataset ingest_csv(const std::string& path, Format format, const CsvSchema& schema) {
  return ingest(csv::read_file(path), format, schema);
}

// ---------------------------------------------------------------------------
// CSV emission

inline csv::Table long_table(const Dataset& ds, const std::string& group = "group",
                             const std::string& obs = "obs", const std::string& category = "category",
                             const std::string& count = "count") {
  csv::Table t;
  if (ds.grouped()) t.header.push_back(group);
  t.header.push_back(obs);
  for (const auto& c : ds.covariates()) t.header.push_back(c.name);
  t.header.push_back(count);
  t.header.push_back(category);
  for (const auto& r : ds.records()) {
    std::vector<std::string> row;
    if (ds.grouped()) row.push_back(r.group_id);
    row.push_back(r.obs_id);
    for (const auto& v : r.covariates) row.push_back(to_string(v));
    row.push_back(std::to_string(r.count));
    row.push_back(r.category);
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline csv::Table short_table(const ShortTable& s, const std::string& group = "group",
                              const std::string& obs = "obs") {
  csv::Table t;
  const bool grouped = !s.rows.empty() && s.rows.front().group_id.has_value();
  if (grouped) t.header.push_back(group);
  t.header.push_back(obs);
  for (const auto& l : s.category_labels) t.header.push_back(l);
  for (const auto& n : s.shared_names) t.header.push_back(n);
  for (const auto& n : s.specific_names) {
    for (const auto& l : s.category_labels) t.header.push_back(n + "." + l);
  }
  for (const auto& r : s.rows) {
    std::vector<std::string> row;
    if (grouped) row.push_back(*r.group_id);
    row.push_back(r.obs_id);
    for (Count c : r.counts) row.push_back(std::to_string(c));
    for (const auto& v : r.shared) row.push_back(to_string(v));
    for (const auto& per : r.specific) {
      for (const auto& v : per) row.push_back(to_string(v));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace ptrick
