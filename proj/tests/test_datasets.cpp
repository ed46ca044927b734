#include <cmath>
#include <numeric>
#include <sstream>

#include <gtest/gtest.h>

#include "fedkd/datasets.hpp"
#include "fedkd/distill.hpp"
#include "fedkd/protocol.hpp"

namespace fedkd {
namespace {

Dataset balanced_labels(std::size_t classes, std::size_t per_class) {
  Dataset ds;
  ds.num_classes = classes;
  ds.features = Matrix(classes * per_class, 1);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) ds.labels.push_back(static_cast<int>(c));
  return ds;
}

double mean_max_share(double alpha, std::size_t seeds) {
  const Dataset ds = balanced_labels(10, 1000);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto plan = dirichlet_partition(ds, 10, alpha, RandomStream(1000 + s, 7));
    for (const auto& p : profile(ds, plan)) {
      total += max_class_share(p);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

TEST(GaussianTask, SameStreamSameData) {
  GaussianTaskSpec spec{3, 4, 50, random_class_means(3, 4, 1.0, RandomStream(1, 1)), 1.0, {}};
  EXPECT_EQ(gen_gaussian_task(spec, RandomStream(5, 5)), gen_gaussian_task(spec, RandomStream(5, 5)));
  EXPECT_NE(gen_gaussian_task(spec, RandomStream(5, 5)), gen_gaussian_task(spec, RandomStream(5, 6)));
}

TEST(GaussianTask, ZeroVarianceSitsOnTheMeans) {
  const Matrix means = Matrix::from_rows({{0, 0}, {10, 10}});
  GaussianTaskSpec spec{2, 2, 20, means, 0.0, {1.0, -1.0}};
  const Dataset ds = gen_gaussian_task(spec, RandomStream(2, 2));
  ASSERT_EQ(ds.size(), 40u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int y = ds.label(i);
    EXPECT_EQ(ds.features(i, 0), means(y, 0) + 1.0);
    EXPECT_EQ(ds.features(i, 1), means(y, 1) - 1.0);
  }
}

TEST(GaussianTask, ShapeErrors) {
  GaussianTaskSpec spec{3, 4, 5, Matrix(2, 4), 1.0, {}};
  EXPECT_THROW(gen_gaussian_task(spec, RandomStream(1, 1)), DimensionError);
}

// Two classes at +-3 e1 with identity covariance: Bayes accuracy is
// Phi(3) = 0.99865. An MLP trained on 500 samples per class must come within
// three points of it.
TEST(GaussianTask, MlpApproachesBayesAccuracy) {
  const Matrix means = Matrix::from_rows({{3, 0}, {-3, 0}});
  const Dataset train = gen_gaussian_task({2, 2, 500, means, 1.0, {}}, RandomStream(3, 1));
  const Dataset test = gen_gaussian_task({2, 2, 5000, means, 1.0, {}}, RandomStream(3, 2));
  const double bayes = 0.99865;
  const auto model = train_node_model(train, TrainSpec{}, 3, 0);
  EXPECT_GE(evaluate_single(model, test), bayes - 0.03);
}

TEST(MultiLabelTask, SplitsShareOneLabelingRule) {
  const auto a = gen_multilabel_task(4, 6, 200, 0.0, RandomStream(1, 1), RandomStream(1, 2));
  const auto b = gen_multilabel_task(4, 6, 200, 0.0, RandomStream(1, 1), RandomStream(1, 2));
  EXPECT_EQ(a, b);
  const auto masked = gen_multilabel_task(4, 6, 2000, 0.25, RandomStream(1, 1), RandomStream(1, 3));
  const auto n_masked = std::count(masked.labels.begin(), masked.labels.end(), -1);
  EXPECT_NEAR(static_cast<double>(n_masked) / masked.labels.size(), 0.25, 0.02);
  EXPECT_NO_THROW(masked.validate());
}

TEST(Csv, HeaderOnlyGivesEmptyDataset) {
  std::istringstream in("x1,x2,y\n");
  const auto ds = load_csv(in, {{"y"}, {"x1", "x2"}, Task::single_label, 3});
  EXPECT_EQ(ds.size(), 0u);
  EXPECT_EQ(ds.dim(), 2u);
}

TEST(Csv, EmptyFileIsAFormatError) {
  std::istringstream in("");
  EXPECT_THROW(load_csv(in, {{"y"}, {"x"}, Task::single_label, 3}), FormatError);
}

TEST(Csv, ThreeRowRoundTrip) {
  std::istringstream in("y,a,b\n0,1.5,2\n2,-3,4e-1\n\n1,0,0\n");
  const auto ds = load_csv(in, {{"y"}, {"a", "b"}, Task::single_label, 3});
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.features, Matrix::from_rows({{1.5, 2}, {-3, 0.4}, {0, 0}}));
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 2, 1}));
}

TEST(Csv, OutOfRangeLabelNamesTheRow) {
  std::istringstream in("x,y\n0.1,1\n0.2,7\n");
  try {
    load_csv(in, {{"y"}, {"x"}, Task::single_label, 5});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
  }
}

TEST(Csv, UnparseableCellIsAFormatError) {
  std::istringstream in("x,y\nabc,1\n");
  EXPECT_THROW(load_csv(in, {{"y"}, {"x"}, Task::single_label, 2}), FormatError);
  std::istringstream ragged("x,y\n1\n");
  EXPECT_THROW(load_csv(ragged, {{"y"}, {"x"}, Task::single_label, 2}), FormatError);
}

TEST(Csv, MultiLabelWithMaskedEntries) {
  std::istringstream in("f,l0,l1\n1,1,-1\n2,0,1\n");
  const auto ds = load_csv(in, {{"l0", "l1"}, {"f"}, Task::multi_label, 2});
  EXPECT_EQ(ds.labels, (std::vector<int>{1, -1, 0, 1}));
}

TEST(Csv, NoLabelColumnsGivesUnlabeledSet) {
  std::istringstream in("f,g\n1,2\n");
  const auto ds = load_csv(in, {{}, {"f", "g"}, Task::single_label, 2});
  EXPECT_FALSE(ds.labeled);
  EXPECT_EQ(ds.label_width(), 0u);
}

TEST(Partition, SingleNodeGetsEverything) {
  const Dataset ds = balanced_labels(4, 25);
  const auto plan = dirichlet_partition(ds, 1, 0.5, RandomStream(1, 1));
  ASSERT_EQ(plan.num_nodes(), 1u);
  EXPECT_EQ(plan.assignments[0].size(), 100u);
}

TEST(Partition, CoversEveryIndexOnce) {
  for (double alpha : {0.01, 0.1, 1.0, 100.0}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Dataset ds = balanced_labels(5, 40);
      const auto plan = dirichlet_partition(ds, 7, alpha, RandomStream(seed, 1));
      EXPECT_NO_THROW(validate_plan(plan, ds.size()));
    }
  }
}

TEST(Partition, HugeAlphaIsNearlyUniform) {
  const Dataset ds = balanced_labels(10, 1000);
  const auto plan = dirichlet_partition(ds, 10, 1e6, RandomStream(4, 4));
  for (const auto& p : profile(ds, plan))
    for (auto c : p.counts) EXPECT_NEAR(static_cast<double>(c), 100.0, 5.0);
}

// Mean per-node max class share, 10 classes x 1000 samples split over 10
// nodes, estimated independently over 100 partitions: alpha=0.1 -> 0.597,
// alpha=1 -> 0.273, alpha=100 -> 0.115.
TEST(Partition, MaxClassShareMatchesReference) {
  const double s01 = mean_max_share(0.1, 100);
  const double s1 = mean_max_share(1.0, 100);
  const double s100 = mean_max_share(100.0, 100);
  EXPECT_GT(s01, 0.5);
  EXPECT_NEAR(s01, 0.597, 0.03);
  EXPECT_NEAR(s1, 0.273, 0.02);
  EXPECT_NEAR(s100, 0.115, 0.01);
}

TEST(Partition, SkewDecreasesWithAlpha) {
  const std::vector<double> alphas{0.05, 0.3, 1.0, 10.0, 1000.0};
  double prev = 2.0;
  for (double a : alphas) {
    const double s = mean_max_share(a, 50);
    EXPECT_LT(s, prev) << "alpha " << a;
    prev = s;
  }
}

TEST(Partition, TooManyNodesOrBadAlpha) {
  const Dataset ds = balanced_labels(2, 2);
  EXPECT_THROW(dirichlet_partition(ds, 5, 1.0, RandomStream(1, 1)), ConfigError);
  EXPECT_THROW(dirichlet_partition(ds, 2, 0.0, RandomStream(1, 1)), ConfigError);
  EXPECT_THROW(dirichlet_partition(ds, 0, 1.0, RandomStream(1, 1)), ConfigError);
}

TEST(Partition, DeterministicInTheStream) {
  const Dataset ds = balanced_labels(4, 50);
  EXPECT_EQ(dirichlet_partition(ds, 3, 0.5, RandomStream(9, 1)),
            dirichlet_partition(ds, 3, 0.5, RandomStream(9, 1)));
}

TEST(Partition, PlanJsonRoundTrip) {
  const Dataset ds = balanced_labels(3, 10);
  const auto plan = dirichlet_partition(ds, 4, 0.3, RandomStream(2, 2));
  const nlohmann::json j = plan;
  EXPECT_EQ(j.get<PartitionPlan>(), plan);
}

TEST(Partition, ValidatePlanRejectsOverlapAndGaps) {
  EXPECT_THROW(validate_plan({{{0, 1}, {1}}, 1.0, 0}, 2), ValidationError);
  EXPECT_THROW(validate_plan({{{0}, {}}, 1.0, 0}, 2), ValidationError);
  EXPECT_THROW(validate_plan({{{0, 5}}, 1.0, 0}, 2), ValidationError);
}

TEST(Partition, MultiLabelBucketsByRarestPositive) {
  const std::vector<std::size_t> counts{50, 5, 20};
  const std::vector<int> row{1, 1, 1};
  EXPECT_EQ(rarest_positive_label(row, counts), 1u);
  const std::vector<int> row2{1, 0, 1};
  EXPECT_EQ(rarest_positive_label(row2, counts), 2u);
  const std::vector<int> none{0, -1, 0};
  EXPECT_FALSE(rarest_positive_label(none, counts).has_value());

  const auto ds = gen_multilabel_task(4, 5, 300, 0.1, RandomStream(1, 1), RandomStream(1, 2));
  const auto plan = dirichlet_partition(ds, 4, 0.5, RandomStream(1, 3));
  EXPECT_NO_THROW(validate_plan(plan, ds.size()));
}

TEST(Profile, CountsPerClass) {
  Dataset ds;
  ds.num_classes = 3;
  ds.features = Matrix(5, 1);
  ds.labels = {0, 2, 2, 1, 2};
  const std::vector<std::size_t> rows{1, 2, 3};
  EXPECT_EQ(profile_rows(ds, rows).counts, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(profile_dataset(ds).counts, (std::vector<std::size_t>{1, 1, 3}));
  EXPECT_DOUBLE_EQ(max_class_share(profile_dataset(ds)), 0.6);
  EXPECT_EQ(max_class_share(NodeProfile{{0, 0, 0}}), 0.0);

  Dataset ml;
  ml.task = Task::multi_label;
  ml.num_classes = 2;
  ml.features = Matrix(2, 1);
  ml.labels = {1, -1, 1, 1};
  EXPECT_EQ(profile_dataset(ml).counts, (std::vector<std::size_t>{2, 1}));
}

TEST(Dataset, SubsetAndConcat) {
  const Dataset ds = balanced_labels(2, 3);
  const std::vector<std::size_t> idx{5, 0};
  const auto s = ds.subset(idx);
  EXPECT_EQ(s.labels, (std::vector<int>{1, 0}));
  EXPECT_EQ(concat(s, s).size(), 4u);
}

}  // namespace
}  // namespace fedkd
