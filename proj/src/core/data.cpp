#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace mlmgof {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    if (!field.empty() && field.back() == '\r') field.pop_back();
    out.push_back(field);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_cell(const std::string& s, long row, const std::string& col) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw DataError(DataError::Code::BadFormat,
                    "non-numeric value '" + s + "' in column " + col +
                        ", data row " + std::to_string(row + 1));
  return v;
}

} // namespace

RawTable parse_csv_text(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line))
    throw DataError(DataError::Code::BadFormat, "empty input");
  auto header = split_line(line);

  long y_col = -1, id2_col = -1, id3_col = -1;
  RawTable table;
  std::vector<long> cov_cols;
  for (long c = 0; c < static_cast<long>(header.size()); ++c) {
    if (header[c] == "y") y_col = c;
    else if (header[c] == "id2") id2_col = c;
    else if (header[c] == "id3") id3_col = c;
    else {
      cov_cols.push_back(c);
      table.covariate_names.push_back(header[c]);
    }
  }
  if (y_col < 0 || id2_col < 0)
    throw DataError(DataError::Code::BadFormat,
                    "header must contain columns 'y' and 'id2'");
  table.has_level3 = id3_col >= 0;

  long row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto fields = split_line(line);
    if (fields.size() != header.size())
      throw DataError(DataError::Code::MissingValue,
                      "data row " + std::to_string(row + 1) + " has " +
                          std::to_string(fields.size()) + " fields, expected " +
                          std::to_string(header.size()));
    RawRecord rec;
    rec.outcome = parse_cell(fields[y_col], row, "y");
    rec.level2 = fields[id2_col];
    if (id3_col >= 0) rec.level3 = fields[id3_col];
    rec.covariates.reserve(cov_cols.size());
    for (std::size_t k = 0; k < cov_cols.size(); ++k)
      rec.covariates.push_back(
          parse_cell(fields[cov_cols[k]], row, table.covariate_names[k]));
    table.rows.push_back(std::move(rec));
    ++row;
  }
  return table;
}

RawTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Code::Io, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv_text(ss.str());
}

Dataset validate_dataset(const RawTable& table) {
  Dataset ds;
  ds.covariate_names = table.covariate_names;
  ds.synthetic_level3 = !table.has_level3;

  const long n = static_cast<long>(table.rows.size());
  const long c = static_cast<long>(table.covariate_names.size());
  ds.y.resize(n);
  ds.level2.resize(n);
  ds.level3.resize(n);
  ds.covariates.resize(n, c);

  std::unordered_map<std::string, int> map2, map3;
  for (long i = 0; i < n; ++i) {
    const RawRecord& r = table.rows[i];
    if (r.outcome != 0.0 && r.outcome != 1.0)
      throw DataError(DataError::Code::NonBinaryOutcome,
                      "outcome must be 0 or 1, got " + std::to_string(r.outcome) +
                          " at data row " + std::to_string(i + 1));
    ds.y[i] = static_cast<int>(r.outcome);

    std::string l3 = table.has_level3 ? r.level3 : std::string("_all_");
    auto it3 = map3.find(l3);
    int j;
    if (it3 == map3.end()) {
      j = static_cast<int>(ds.level3_labels.size());
      map3.emplace(l3, j);
      ds.level3_labels.push_back(l3);
    } else {
      j = it3->second;
    }
    ds.level3[i] = j;

    auto it2 = map2.find(r.level2);
    int k;
    if (it2 == map2.end()) {
      k = static_cast<int>(ds.level2_labels.size());
      map2.emplace(r.level2, k);
      ds.level2_labels.push_back(r.level2);
      ds.level3_of_level2.push_back(j);
    } else {
      k = it2->second;
      if (ds.level3_of_level2[k] != j)
        throw DataError(DataError::Code::BrokenNesting,
                        "level-2 cluster '" + r.level2 +
                            "' appears under two level-3 clusters");
    }
    ds.level2[i] = k;

    if (static_cast<long>(r.covariates.size()) != c)
      throw DataError(DataError::Code::MissingValue,
                      "data row " + std::to_string(i + 1) + " covariate count mismatch");
    for (long q = 0; q < c; ++q) {
      if (std::isnan(r.covariates[q]))
        throw DataError(DataError::Code::MissingValue,
                        "missing value for column " + ds.covariate_names[q] +
                            " at data row " + std::to_string(i + 1));
      ds.covariates(i, q) = r.covariates[q];
    }
  }

  if (ds.n_level2() < 2)
    throw DataError(DataError::Code::TooFewClusters,
                    "need at least 2 level-2 clusters, got " +
                        std::to_string(ds.n_level2()));
  return ds;
}

int Dataset::covariate_index(const std::string& name) const {
  for (std::size_t q = 0; q < covariate_names.size(); ++q)
    if (covariate_names[q] == name) return static_cast<int>(q);
  throw DataError(DataError::Code::UnknownColumn, "unknown column '" + name + "'");
}

std::map<std::string, long> Dataset::cluster_sizes(int level) const {
  std::map<std::string, long> out;
  const auto& idx = level == 3 ? level3 : level2;
  const auto& labels = level == 3 ? level3_labels : level2_labels;
  for (int i : idx) out[labels[i]] += 1;
  return out;
}

std::vector<long> Dataset::level2_sizes() const {
  std::vector<long> out(level2_labels.size(), 0);
  for (int k : level2) out[k] += 1;
  return out;
}

long Dataset::min_level2_size() const {
  auto s = level2_sizes();
  return *std::min_element(s.begin(), s.end());
}

Dataset Dataset::with_extra_columns(const std::vector<std::string>& names,
                                    const Eigen::MatrixXd& values) const {
  if (values.rows() != n_rows() ||
      values.cols() != static_cast<long>(names.size()))
    throw DataError(DataError::Code::BadFormat, "extra column shape mismatch");
  Dataset out = *this;
  const long c = covariates.cols();
  out.covariates.conservativeResize(Eigen::NoChange, c + values.cols());
  out.covariates.rightCols(values.cols()) = values;
  for (const auto& nm : names) {
    for (const auto& existing : covariate_names)
      if (existing == nm)
        throw DataError(DataError::Code::BadFormat,
                        "duplicate column '" + nm + "'");
    out.covariate_names.push_back(nm);
  }
  return out;
}

DesignMatrices build_design(const Dataset& ds, const ModelSpec& spec) {
  {
    std::vector<std::string> seen;
    for (const auto& nm : spec.fixed) seen.push_back(nm);
    for (const auto& nm : spec.extras) seen.push_back(nm);
    std::sort(seen.begin(), seen.end());
    if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
      throw DataError(DataError::Code::BadFormat,
                      "duplicate names across fixed and extra columns");
  }

  DesignMatrices d;
  d.n_rows = ds.n_rows();
  d.n_beta = 1 + static_cast<int>(spec.fixed.size() + spec.extras.size());
  d.r2 = spec.random.level2.dim();
  d.r3 = spec.random.level3.dim();

  std::vector<int> fixed_idx;
  for (const auto& nm : spec.fixed) fixed_idx.push_back(ds.covariate_index(nm));
  for (const auto& nm : spec.extras) fixed_idx.push_back(ds.covariate_index(nm));
  std::vector<int> z2_idx, z3_idx; // -1 marks the intercept column
  if (spec.random.level2.intercept) z2_idx.push_back(-1);
  for (const auto& nm : spec.random.level2.slopes)
    z2_idx.push_back(ds.covariate_index(nm));
  if (spec.random.level3.intercept) z3_idx.push_back(-1);
  for (const auto& nm : spec.random.level3.slopes)
    z3_idx.push_back(ds.covariate_index(nm));

  d.coef_names.push_back("intercept");
  for (const auto& nm : spec.fixed) d.coef_names.push_back(nm);
  for (const auto& nm : spec.extras) d.coef_names.push_back(nm);

  d.X_full.resize(d.n_rows, d.n_beta);
  d.X_full.col(0).setOnes();
  for (std::size_t q = 0; q < fixed_idx.size(); ++q)
    d.X_full.col(1 + static_cast<long>(q)) = ds.covariates.col(fixed_idx[q]);

  // Rows per level-2 cluster in original order, clusters nested per family.
  std::vector<std::vector<long>> rows_of(ds.n_level2());
  for (long i = 0; i < d.n_rows; ++i) rows_of[ds.level2[i]].push_back(i);

  d.families.resize(ds.n_level3());
  for (int j = 0; j < ds.n_level3(); ++j) d.families[j].level3_index = j;
  for (int k = 0; k < ds.n_level2(); ++k) {
    SubjectBlock sb;
    sb.level2_index = k;
    sb.rows = rows_of[k];
    const long m = static_cast<long>(sb.rows.size());
    sb.X.resize(m, d.n_beta);
    sb.Z2.resize(m, d.r2);
    sb.Z3.resize(m, d.r3);
    sb.y.resize(m);
    for (long r = 0; r < m; ++r) {
      const long i = sb.rows[r];
      sb.X.row(r) = d.X_full.row(i);
      sb.y[r] = ds.y[i];
      for (int q = 0; q < d.r2; ++q)
        sb.Z2(r, q) = z2_idx[q] < 0 ? 1.0 : ds.covariates(i, z2_idx[q]);
      for (int q = 0; q < d.r3; ++q)
        sb.Z3(r, q) = z3_idx[q] < 0 ? 1.0 : ds.covariates(i, z3_idx[q]);
    }
    d.families[ds.level3_of_level2[k]].subjects.push_back(std::move(sb));
  }
  return d;
}

} // namespace mlmgof
