#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "core/data.hpp"

using namespace mlmgof;

namespace {

Dataset from_csv(const std::string& text) {
  return validate_dataset(parse_csv_text(text));
}

const char* kSmall =
    "y,id3,id2,x1,x2\n"
    "1,f1,s1,0.5,1\n"
    "0,f1,s1,-0.2,0\n"
    "1,f1,s2,1.1,1\n"
    "0,f1,s2,0.3,0\n";

} // namespace

TEST_CASE("minimal well-formed input") {
  Dataset ds = from_csv(kSmall);
  CHECK(ds.n_rows() == 4);
  CHECK(ds.n_level3() == 1);
  CHECK(ds.n_level2() == 2);
  CHECK(ds.covariate_names == std::vector<std::string>{"x1", "x2"});
}

TEST_CASE("non-binary outcome rejected") {
  CHECK_THROWS_WITH_AS(from_csv("y,id2,x1\n2,s1,0.1\n0,s2,0.2\n"),
                       doctest::Contains("outcome must be 0 or 1"), DataError);
  try {
    from_csv("y,id2,x1\n2,s1,0.1\n0,s2,0.2\n");
  } catch (const DataError& e) {
    CHECK(e.code() == DataError::Code::NonBinaryOutcome);
  }
}

TEST_CASE("broken nesting rejected") {
  const char* text =
      "y,id3,id2,x1\n"
      "1,f1,s1,0.1\n"
      "0,f2,s1,0.2\n";
  try {
    from_csv(text);
    FAIL("expected BrokenNesting");
  } catch (const DataError& e) {
    CHECK(e.code() == DataError::Code::BrokenNesting);
  }
}

TEST_CASE("missing covariate cell rejected") {
  try {
    from_csv("y,id2,x1\n1,s1,\n0,s2,0.2\n");
    FAIL("expected MissingValue");
  } catch (const DataError& e) {
    CHECK(e.code() == DataError::Code::MissingValue);
  }
}

TEST_CASE("too few level-2 clusters rejected") {
  try {
    from_csv("y,id2,x1\n1,s1,0.1\n0,s1,0.2\n");
    FAIL("expected TooFewClusters");
  } catch (const DataError& e) {
    CHECK(e.code() == DataError::Code::TooFewClusters);
  }
}

TEST_CASE("two-level input gets a synthetic level-3 cluster") {
  Dataset ds = from_csv("y,id2,x1\n1,s1,0.1\n0,s2,0.2\n");
  CHECK(ds.synthetic_level3);
  CHECK(ds.n_level3() == 1);
}

TEST_CASE("cluster_sizes counts and sums") {
  const char* text =
      "y,id3,id2,x1\n"
      "1,f1,s1,0\n1,f1,s1,0\n1,f1,s1,0\n"
      "0,f1,s2,0\n0,f1,s2,0\n0,f1,s2,0\n0,f1,s2,0\n0,f1,s2,0\n";
  Dataset ds = from_csv(text);
  auto sizes2 = ds.cluster_sizes(2);
  CHECK(sizes2.at("s1") == 3);
  CHECK(sizes2.at("s2") == 5);
  CHECK(ds.min_level2_size() == 3);
  long total = 0;
  for (auto& [label, c] : sizes2) total += c;
  CHECK(total == ds.n_rows());
  auto sizes3 = ds.cluster_sizes(3);
  total = 0;
  for (auto& [label, c] : sizes3) total += c;
  CHECK(total == ds.n_rows());
}

TEST_CASE("balanced and unbalanced size maps") {
  std::string text = "y,id2,x1\n";
  for (int k = 0; k < 50; ++k)
    for (int i = 0; i < 5; ++i)
      text += "0,c" + std::to_string(k) + ",0\n";
  Dataset balanced = from_csv(text);
  auto sizes = balanced.level2_sizes();
  CHECK(*std::min_element(sizes.begin(), sizes.end()) == 5);
  CHECK(*std::max_element(sizes.begin(), sizes.end()) == 5);

  text = "y,id2,x1\n";
  for (int k = 0; k < 10; ++k)
    for (int i = 0; i < 3; ++i) text += "0,a" + std::to_string(k) + ",0\n";
  for (int k = 0; k < 40; ++k)
    for (int i = 0; i < 20; ++i) text += "0,b" + std::to_string(k) + ",0\n";
  Dataset unbalanced = from_csv(text);
  sizes = unbalanced.level2_sizes();
  CHECK(*std::min_element(sizes.begin(), sizes.end()) == 3);
  CHECK(*std::max_element(sizes.begin(), sizes.end()) == 20);
  CHECK(unbalanced.min_level2_size() == 3);
}

TEST_CASE("build_design column layout") {
  Dataset ds = from_csv(kSmall);
  ModelSpec spec;
  spec.fixed = {"x1", "x2"};
  spec.random.level2.intercept = true;
  spec.random.level2.slopes = {"x2"};

  DesignMatrices d = build_design(ds, spec);
  CHECK(d.n_beta == 3);
  CHECK(d.r2 == 2);
  CHECK(d.r3 == 0);
  CHECK(d.X_full.col(0).isOnes());
  CHECK(d.coef_names == std::vector<std::string>{"intercept", "x1", "x2"});

  // Z2 columns: [intercept, x2] in spec order.
  const SubjectBlock& sb = d.families[0].subjects[0];
  CHECK(sb.Z2.col(0).isOnes());
  for (long r = 0; r < sb.Z2.rows(); ++r)
    CHECK(sb.Z2(r, 1) == ds.covariates(sb.rows[r], 1));
}

TEST_CASE("build_design with extras widens X") {
  Dataset ds = from_csv(kSmall);
  Eigen::MatrixXd extras = Eigen::MatrixXd::Zero(ds.n_rows(), 4);
  extras(1, 0) = 1.0;
  Dataset aug = ds.with_extra_columns({"I2", "I3", "I4", "I5"}, extras);
  ModelSpec spec;
  spec.fixed = {"x1", "x2"};
  spec.extras = {"I2", "I3", "I4", "I5"};
  DesignMatrices d = build_design(aug, spec);
  CHECK(d.n_beta == 7);
  CHECK(d.X_full(1, 3) == 1.0);
}

TEST_CASE("empty random spec degenerates to plain logistic") {
  Dataset ds = from_csv(kSmall);
  ModelSpec spec;
  spec.fixed = {"x1"};
  DesignMatrices d = build_design(ds, spec);
  CHECK(d.r2 == 0);
  CHECK(d.r3 == 0);
  CHECK(d.families[0].subjects[0].Z2.cols() == 0);
}

TEST_CASE("unknown column errors") {
  Dataset ds = from_csv(kSmall);
  ModelSpec spec;
  spec.fixed = {"nope"};
  try {
    build_design(ds, spec);
    FAIL("expected UnknownColumn");
  } catch (const DataError& e) {
    CHECK(e.code() == DataError::Code::UnknownColumn);
  }
}

TEST_CASE("duplicate fixed/extra names rejected") {
  Dataset ds = from_csv(kSmall);
  ModelSpec spec;
  spec.fixed = {"x1"};
  spec.extras = {"x1"};
  CHECK_THROWS_AS(build_design(ds, spec), DataError);
}

TEST_CASE("relabeling clusters leaves the design unchanged") {
  std::mt19937_64 eng(7);
  std::string base = "y,id3,id2,x1\n";
  std::string relabeled = base;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 4; ++k)
      for (int i = 0; i < 5; ++i) {
        const int y = unif(eng) < 0.5;
        const double x = unif(eng);
        const std::string tail = "," + std::to_string(x) + "\n";
        base += std::to_string(y) + ",f" + std::to_string(j) + ",s" +
                std::to_string(j * 4 + k) + tail;
        relabeled += std::to_string(y) + ",FAM_" + std::to_string(9 - j) +
                     ",SUB_" + std::to_string(100 - j * 4 - k) + tail;
      }
  ModelSpec spec;
  spec.fixed = {"x1"};
  spec.random.level2.intercept = true;
  spec.random.level3.intercept = true;
  DesignMatrices a = build_design(from_csv(base), spec);
  DesignMatrices b = build_design(from_csv(relabeled), spec);
  CHECK(a.X_full == b.X_full);
  REQUIRE(a.families.size() == b.families.size());
  for (std::size_t j = 0; j < a.families.size(); ++j) {
    REQUIRE(a.families[j].subjects.size() == b.families[j].subjects.size());
    for (std::size_t k = 0; k < a.families[j].subjects.size(); ++k) {
      CHECK(a.families[j].subjects[k].X == b.families[j].subjects[k].X);
      CHECK(a.families[j].subjects[k].rows == b.families[j].subjects[k].rows);
    }
  }
}

TEST_CASE("subject block rows align with X rows in original order") {
  Dataset ds = from_csv(kSmall);
  ModelSpec spec;
  spec.fixed = {"x1", "x2"};
  spec.random.level2.intercept = true;
  DesignMatrices d = build_design(ds, spec);
  for (const auto& fam : d.families)
    for (const auto& sb : fam.subjects) {
      CHECK(std::is_sorted(sb.rows.begin(), sb.rows.end()));
      for (long r = 0; r < static_cast<long>(sb.rows.size()); ++r)
        CHECK(sb.X.row(r) == d.X_full.row(sb.rows[r]));
    }
}
