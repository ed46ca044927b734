#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "fedkd/distill.hpp"

namespace fedkd {
namespace {

Matrix random_matrix(std::size_t r, std::size_t c, RandomStream rs, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rs.gauss();
  return m;
}

TEST(Softmax, Examples) {
  const std::vector<double> z{std::log(2.0), 0.0};
  const auto p = softmax_tau(z, 1.0);
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
  const std::vector<double> spread{5.0, -3.0, 0.5, 1.0};
  for (double v : softmax_tau(spread, 1000.0)) EXPECT_NEAR(v, 0.25, 0.005);
  const std::vector<double> huge{1000.0, 0.0};
  EXPECT_NEAR(softmax_tau(huge, 1.0)[0], 1.0, 1e-15);
  EXPECT_THROW(softmax_tau(z, 0.0), RangeError);
}

TEST(Sigmoid, Examples) {
  EXPECT_NEAR(sigmoid(std::log(3.0)), 0.75, 1e-15);
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_GT(sigmoid(-800.0), -1e-300);
  EXPECT_EQ(sigmoid(800.0), 1.0);
}

TEST(KlLoss, ExamplesAndNonNegativity) {
  const std::vector<double> p{1.0, 0.0};
  const std::vector<double> q{0.5, 0.5};
  EXPECT_NEAR(kl_loss(p, q), std::log(2.0), 1e-15);
  EXPECT_EQ(kl_loss(q, q), 0.0);
  RandomStream rs(1, 1);
  for (int i = 0; i < 200; ++i) {
    const auto a = softmax_tau(std::vector<double>{rs.gauss(), rs.gauss(), rs.gauss()}, 1.0);
    const auto b = softmax_tau(std::vector<double>{rs.gauss(), rs.gauss(), rs.gauss()}, 1.0);
    EXPECT_GE(kl_loss(a, b), 0.0);
  }
}

TEST(LogitL2, SingleRowExample) {
  const auto lg = logit_l2_loss(Matrix::from_rows({{1.0, 2.0}}), Matrix::from_rows({{0.0, 0.0}}));
  EXPECT_DOUBLE_EQ(lg.loss, 5.0);
  EXPECT_EQ(lg.grad, Matrix::from_rows({{2.0, 4.0}}));
}

TEST(LogitL2, GradientMatchesFiniteDifferences) {
  const Matrix s = random_matrix(4, 3, RandomStream(2, 1));
  const Matrix t = random_matrix(4, 3, RandomStream(2, 2));
  const auto lg = logit_l2_loss(s, t);
  const double h = 1e-6;
  for (std::size_t i = 0; i < s.size(); ++i) {
    Matrix plus = s;
    Matrix minus = s;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    const double fd = (logit_l2_loss(plus, t).loss - logit_l2_loss(minus, t).loss) / (2 * h);
    EXPECT_NEAR(fd, lg.grad.data()[i], 1e-6);
  }
}

TEST(KlDistill, GradientMatchesFiniteDifferences) {
  for (Task task : {Task::single_label, Task::multi_label}) {
    const Matrix s = random_matrix(3, 4, RandomStream(3, 1));
    const Matrix t = random_matrix(3, 4, RandomStream(3, 2));
    const double tau = 2.0;
    const auto lg = kl_distill_loss(s, t, tau, task);
    const double h = 1e-6;
    for (std::size_t i = 0; i < s.size(); ++i) {
      Matrix plus = s;
      Matrix minus = s;
      plus.data()[i] += h;
      minus.data()[i] -= h;
      const double fd =
          (kl_distill_loss(plus, t, tau, task).loss - kl_distill_loss(minus, t, tau, task).loss) / (2 * h);
      EXPECT_NEAR(fd, lg.grad.data()[i], 1e-6);
    }
  }
}

// As tau grows the KL logit gradient lines up with the centered logit
// difference, i.e. with the L2 matching gradient restricted to the
// zero-mean subspace.
TEST(KlDistill, HighTemperatureAlignsWithLogitMatching) {
  RandomStream rs(4, 4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(5);
    std::vector<double> t(5);
    for (auto& v : s) v = 2.0 * rs.gauss();
    for (auto& v : t) v = 2.0 * rs.gauss();
    const auto g = kl_logit_grad(s, t, 1000.0);
    std::vector<double> d(5);
    double mean = 0;
    for (std::size_t c = 0; c < 5; ++c) mean += (s[c] - t[c]) / 5.0;
    for (std::size_t c = 0; c < 5; ++c) d[c] = s[c] - t[c] - mean;
    const double dot = std::inner_product(g.begin(), g.end(), d.begin(), 0.0);
    const double ng = std::sqrt(std::inner_product(g.begin(), g.end(), g.begin(), 0.0));
    const double nd = std::sqrt(std::inner_product(d.begin(), d.end(), d.begin(), 0.0));
    EXPECT_GE(dot / (ng * nd), 0.999);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  const auto lg = softmax_cross_entropy(Matrix(2, 4), std::vector<int>{0, 3});
  EXPECT_NEAR(lg.loss, std::log(4.0), 1e-15);
}

TEST(MaskedBce, SkipsUnknownEntries) {
  const Matrix z = Matrix::from_rows({{0.0, 5.0}, {0.0, -5.0}});
  const auto lg = masked_bce(z, std::vector<int>{1, -1, 0, -1});
  EXPECT_NEAR(lg.loss, std::log(2.0), 1e-15);
  EXPECT_EQ(lg.grad(0, 1), 0.0);
  EXPECT_EQ(lg.grad(1, 1), 0.0);
}

TEST(Argmax, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax(std::vector<double>{1.0, 3.0, 3.0}), 1u);
  EXPECT_EQ(accuracy_from_logits(Matrix::from_rows({{0, 1}, {1, 0}}), std::vector<int>{1, 1}), 0.5);
}

TEST(Auc, HandFixture) {
  EXPECT_DOUBLE_EQ(*auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
  EXPECT_DOUBLE_EQ(*auc(std::vector<double>{0.1, 0.2, 0.9, 1.0}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(*auc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
  EXPECT_FALSE(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}).has_value());
}

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

TEST(Auc, MatchesPairCounting) {
  RandomStream rs(5, 5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rs.below(60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rs.below(8));  // plenty of ties
      y[i] = static_cast<int>(rs.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(*auc(s, y), brute_auc(s, y), 1e-12);
  }
}

TEST(Auc, InvariantUnderMonotoneTransform) {
  RandomStream rs(6, 6);
  std::vector<double> s(500);
  std::vector<int> y(500);
  for (std::size_t i = 0; i < s.size(); ++i) {
    y[i] = static_cast<int>(rs.below(2));
    s[i] = rs.gauss() + y[i];
  }
  std::vector<double> t(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(3.0 * s[i]) - 7.0;
  EXPECT_NEAR(*auc(s, y), *auc(t, y), 1e-12);
}

TEST(Auc, RandomScoresNearOneHalf) {
  RandomStream rs(7, 7);
  std::vector<double> s(20000);
  std::vector<int> y(20000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rs.uniform();
    y[i] = static_cast<int>(rs.below(2));
  }
  EXPECT_NEAR(*auc(s, y), 0.5, 0.02);
}

TEST(MultiLabel, MaskedEntriesAndDegenerateClassesAreExcluded) {
  Dataset ds;
  ds.task = Task::multi_label;
  ds.num_classes = 3;
  ds.features = Matrix(4, 1);
  // class 0: perfect; class 1: all positive once -1 is dropped; class 2: 0.5
  ds.labels = {1, 1, 1,   //
               0, -1, 0,  //
               1, 1, 1,   //
               0, 1, 0};
  const Matrix scores = Matrix::from_rows({{0.9, 0.1, 0.5}, {0.1, 0.9, 0.5}, {0.8, 0.2, 0.5}, {0.2, 0.3, 0.5}});
  const auto r = evaluate_multi_scores(scores, ds);
  EXPECT_DOUBLE_EQ(*r.per_class_auc[0], 1.0);
  EXPECT_FALSE(r.per_class_auc[1].has_value());
  EXPECT_DOUBLE_EQ(*r.per_class_auc[2], 0.5);
  EXPECT_DOUBLE_EQ(r.mauc, 0.75);
}

TEST(MultiLabel, NoValidClassIsAnError) {
  Dataset ds;
  ds.task = Task::multi_label;
  ds.num_classes = 1;
  ds.features = Matrix(2, 1);
  ds.labels = {1, -1};
  EXPECT_THROW(evaluate_multi_scores(Matrix(2, 1), ds), EvaluationError);
}

struct DistillFixture {
  Matrix public_x = random_matrix(2000, 6, RandomStream(10, 1));
  MlpModel teacher = MlpModel::init({6, 16, 4}, RandomStream(10, 2));
  Matrix teacher_logits = mlp_forward(teacher, public_x);
  MlpModel student0 = MlpModel::init({6, 16, 4}, RandomStream(10, 3));
};

TEST(Distill, TeacherIsAFixedPoint) {
  DistillFixture f;
  DistillConfig cfg;
  cfg.steps = 50;
  const auto r = distill(f.teacher, f.public_x, f.teacher_logits, cfg, RandomStream(1, 1));
  EXPECT_EQ(r.model, f.teacher);
  for (const auto& rec : r.trace) EXPECT_EQ(rec.loss, 0.0);
}

TEST(Distill, ZeroLearningRateIsBitIdentical) {
  DistillFixture f;
  DistillConfig cfg;
  cfg.steps = 20;
  cfg.lr = 0.0;
  EXPECT_EQ(distill(f.student0, f.public_x, f.teacher_logits, cfg, RandomStream(1, 1)).model, f.student0);
}

// Linearly separable public set: four classes at the corners of a square,
// well apart relative to unit noise. The teacher is a reference model trained
// on labeled draws from the same domain.
TEST(Distill, StudentRecoversTeacherDecisions) {
  const Matrix means = Matrix::from_rows({{6, 6}, {-6, 6}, {-6, -6}, {6, -6}});
  const Dataset labeled = gen_gaussian_task({4, 2, 500, means, 1.0, {}}, RandomStream(20, 1));
  const Dataset pub = gen_gaussian_task({4, 2, 1250, means, 1.0, {}}, RandomStream(20, 2));

  MlpModel teacher = MlpModel::init({2, 16, 4}, RandomStream(20, 3));
  EpochBatcher batches(labeled.size(), 16, RandomStream(20, 4));
  for (int step = 0; step < 3000; ++step) {
    const Dataset b = labeled.subset(batches.next());
    const auto lg = softmax_cross_entropy(mlp_forward(teacher, b.features), b.labels);
    teacher = sgd_step(std::move(teacher), mlp_backward(teacher, b.features, lg.grad), 0.02, 0.0);
  }
  ASSERT_GE(evaluate_single(teacher, pub), 0.99);

  const Matrix teacher_logits = mlp_forward(teacher, pub.features);
  DistillConfig cfg;  // T = 2000, B = 64
  const auto r = distill(MlpModel::init({2, 16, 4}, RandomStream(20, 5)), pub, teacher_logits, cfg,
                         RandomStream(20, 6));
  EXPECT_GE(argmax_agreement(mlp_forward(r.model, pub.features), teacher_logits), 0.95);

  // 200-step window means of the loss trace never rise by more than 5%.
  double prev = INFINITY;
  for (std::size_t w = 0; w + 200 <= r.trace.size(); w += 200) {
    double m = 0;
    for (std::size_t t = w; t < w + 200; ++t) m += r.trace[t].loss / 200.0;
    EXPECT_LE(m, prev * 1.05) << "window " << w;
    prev = m;
  }
  EXPECT_LT(prev, r.trace.front().loss);
}

TEST(Distill, BatchLargerThanPublicSetIsAnError) {
  DistillFixture f;
  DistillConfig cfg;
  cfg.batch_size = 2001;
  EXPECT_THROW(distill(f.student0, f.public_x, f.teacher_logits, cfg, RandomStream(1, 1)), ConfigError);
}

TEST(Distill, KlModeNeedsTemperature) {
  DistillConfig cfg;
  cfg.loss_mode = LossMode::kl;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.tau = 4.0;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(EpochBatcher, EachEpochVisitsDistinctRows) {
  EpochBatcher b(10, 3, RandomStream(2, 2));
  std::vector<std::size_t> seen;
  for (int i = 0; i < 3; ++i) {
    const auto idx = b.next();
    seen.insert(seen.end(), idx.begin(), idx.end());
  }
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(std::adjacent_find(seen.begin(), seen.end()), seen.end());
}

}  // namespace
}  // namespace fedkd
