#pragma once

#include <Eigen/Core>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlmgof {

class DataError : public std::runtime_error {
public:
  enum class Code {
    NonBinaryOutcome,
    BrokenNesting,
    MissingValue,
    TooFewClusters,
    UnknownColumn,
    BadFormat,
    Io
  };

  DataError(Code code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}

  Code code() const { return code_; }

private:
  Code code_;
};

/// One parsed input record. An empty level3 label means the input had no
/// level-3 identifier; a NaN covariate marks a missing cell.
struct RawRecord {
  double outcome = 0.0;
  std::string level3;
  std::string level2;
  std::vector<double> covariates;
};

struct RawTable {
  std::vector<std::string> covariate_names;
  bool has_level3 = false;
  std::vector<RawRecord> rows;
};

/// Binary-outcome dataset with dense cluster indices. Two-level data is
/// stored as three-level with a single synthetic level-3 cluster.
/// Immutable after construction.
class Dataset {
public:
  std::vector<int> y;       // 0/1 per row
  std::vector<int> level2;  // dense index 0..M-1 per row
  std::vector<int> level3;  // dense index 0..J-1 per row
  std::vector<int> level3_of_level2;      // size M
  std::vector<std::string> level2_labels; // size M, original labels
  std::vector<std::string> level3_labels; // size J
  std::vector<std::string> covariate_names;
  Eigen::MatrixXd covariates; // N x C, file row order
  bool synthetic_level3 = false;

  long n_rows() const { return static_cast<long>(y.size()); }
  int n_level2() const { return static_cast<int>(level2_labels.size()); }
  int n_level3() const { return static_cast<int>(level3_labels.size()); }

  int covariate_index(const std::string& name) const;

  /// Row counts per cluster, keyed by original label. level is 2 or 3.
  std::map<std::string, long> cluster_sizes(int level) const;

  /// Row counts per dense level-2 index.
  std::vector<long> level2_sizes() const;
  long min_level2_size() const;

  /// Copy of the dataset with extra covariate columns appended.
  Dataset with_extra_columns(const std::vector<std::string>& names,
                             const Eigen::MatrixXd& values) const;
};

enum class CovStructure { Independent, Unstructured };

struct RandomPart {
  bool intercept = false;
  std::vector<std::string> slopes;
  CovStructure structure = CovStructure::Independent;

  int dim() const { return (intercept ? 1 : 0) + static_cast<int>(slopes.size()); }
};

struct RandomEffectsSpec {
  RandomPart level2;
  RandomPart level3;
};

struct ModelSpec {
  std::vector<std::string> fixed;  // covariate names after the implicit intercept
  std::vector<std::string> extras; // appended fixed columns (GOF indicators)
  RandomEffectsSpec random;
};

/// Rows of one level-2 cluster, stored contiguously for the estimator.
struct SubjectBlock {
  int level2_index = 0;
  Eigen::MatrixXd X;  // rows x n_beta
  Eigen::MatrixXd Z2; // rows x r2
  Eigen::MatrixXd Z3; // rows x r3
  Eigen::VectorXd y;
  std::vector<long> rows; // original row indices
};

struct FamilyBlock {
  int level3_index = 0;
  std::vector<SubjectBlock> subjects;
};

struct DesignMatrices {
  long n_rows = 0;
  int n_beta = 0;
  int r2 = 0;
  int r3 = 0;
  std::vector<FamilyBlock> families;
  std::vector<std::string> coef_names;
  Eigen::MatrixXd X_full; // N x n_beta, original row order
};

RawTable read_csv(const std::string& path);
RawTable parse_csv_text(const std::string& text);

Dataset validate_dataset(const RawTable& table);

DesignMatrices build_design(const Dataset& ds, const ModelSpec& spec);

} // namespace mlmgof
