#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "fedlab/data.hpp"

using namespace fedlab;

namespace {

LabeledDataset blob(std::size_t classes, std::size_t per_class, std::uint64_t seed = 1) {
  Rng rng(seed);
  return synth_gaussian_mixture(classes, per_class, 4, 3.0, 1.0, rng);
}

void expect_conservation(const PartitionPlan& plan, const LabeledDataset& ds) {
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (std::size_t k = 0; k < plan.clients(); ++k) {
    std::size_t row = 0;
    for (std::size_t c = 0; c < plan.classes; ++c) row += plan.counts[k][c];
    EXPECT_EQ(row, plan.client_indices[k].size());
    total += row;
    for (auto i : plan.client_indices[k]) {
      EXPECT_LT(i, ds.size());
      EXPECT_TRUE(seen.insert(i).second) << "sample " << i << " assigned twice";
    }
  }
  EXPECT_EQ(total, plan.total_assigned());
}

}  // namespace

TEST(Synthetic, ZeroSigmaCollapsesToCenters) {
  Rng rng(2);
  const auto mix = make_mixture(4, 3, 2.0, rng);
  Rng r2(3);
  const auto ds = sample_mixture(mix, 5, 1e-300, r2);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.features[i], mix.centers[ds.labels[i]]);
  EXPECT_THROW(sample_mixture(mix, 5, 0.0, r2), ValidationError);
}

TEST(Synthetic, CentersSeparated) {
  Rng rng(4);
  const auto mix = make_mixture(10, 32, 4.0, rng);
  for (std::size_t a = 0; a < 10; ++a)
    for (std::size_t b = a + 1; b < 10; ++b) EXPECT_GE(distance(mix.centers[a], mix.centers[b]), 4.0);
}

TEST(Synthetic, InfeasibleGeometryReported) {
  Rng rng(5);
  EXPECT_THROW(make_mixture(50, 1, 10.0, rng, 100), InfeasibleGeometry);
}

TEST(Synthetic, DeterministicForFixedSeed) {
  EXPECT_EQ(blob(5, 20, 9), blob(5, 20, 9));
  EXPECT_NE(blob(5, 20, 9), blob(5, 20, 10));
}

TEST(Csv, TwoRowFile) {
  std::istringstream is("0.0,1.0,0\n1.0,0.0,1\n");
  const auto ds = read_csv(is);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.classes, 2u);
  EXPECT_EQ(ds.dim, 2u);
  EXPECT_EQ(ds.features[0], (Vec{0.0, 1.0}));
  EXPECT_EQ(ds.labels[1], 1u);
}

TEST(Csv, HeaderIsSkipped) {
  std::istringstream is("f0,f1,label\n0.5,1.5,2\n");
  const auto ds = read_csv(is);
  EXPECT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.classes, 3u);
}

TEST(Csv, EmptyFileIsParseError) {
  std::istringstream is("");
  EXPECT_THROW(read_csv(is), ParseError);
}

TEST(Csv, LabelBeyondDeclaredClasses) {
  std::istringstream is("0.0,1.0,7\n");
  EXPECT_THROW(read_csv(is, 3), LabelOutOfRange);
  std::istringstream neg("0.0,1.0,-1\n");
  EXPECT_THROW(read_csv(neg), LabelOutOfRange);
}

TEST(Csv, MalformedRowReportsLine) {
  std::istringstream is("0.0,1.0,0\n0.0,abc,1\n");
  try {
    read_csv(is);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  std::istringstream ragged("0.0,1.0,0\n0.0,1\n");
  EXPECT_THROW(read_csv(ragged), ParseError);
}

TEST(Csv, WriteReadRoundTrip) {
  const auto ds = blob(3, 4);
  std::stringstream ss;
  write_csv(ss, ds);
  const auto back = read_csv(ss);
  EXPECT_EQ(back, ds);
}

TEST(Csv, LoadFromFile) {
  const std::string path = testing::TempDir() + "fedlab_csv_test.csv";
  {
    std::ofstream f(path);
    f << "0.0,1.0,0\n1.0,0.0,1\n";
  }
  EXPECT_EQ(load_csv(path).size(), 2u);
  EXPECT_THROW(load_csv(path + ".missing"), Error);
}

TEST(Dirichlet, SingleClientGetsEverything) {
  const auto ds = blob(4, 25);
  Rng rng(1);
  const auto plan = partition_dirichlet(ds, 1, 0.5, rng);
  EXPECT_EQ(plan.client_indices[0].size(), ds.size());
  expect_conservation(plan, ds);
}

TEST(Dirichlet, LargeAlphaNearUniform) {
  const auto ds = blob(5, 1000);
  Rng rng(2);
  const auto plan = partition_dirichlet(ds, 4, 1e6, rng);
  for (std::size_t k = 0; k < 4; ++k) {
    const double total = static_cast<double>(plan.client_indices[k].size());
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(plan.counts[k][c] / total, 0.2, 0.05 * 0.2);
  }
}

TEST(Dirichlet, MatchesIndependentReimplementation) {
  const auto ds = blob(6, 40);
  Rng a(77);
  const auto plan = partition_dirichlet(ds, 20, 0.1, a);

  Rng b(77);
  std::vector<std::vector<std::size_t>> expect(20);
  for (std::size_t c = 0; c < 6; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == c) idx.push_back(i);
    b.shuffle(idx);
    const Vec q = b.dirichlet(0.1, 20);
    double cum = 0.0;
    std::size_t start = 0;
    for (std::size_t k = 0; k < 20; ++k) {
      cum += q[k];
      std::size_t stop = k == 19 ? idx.size() : static_cast<std::size_t>(std::floor(cum * idx.size()));
      stop = std::min(std::max(stop, start), idx.size());
      for (std::size_t t = start; t < stop; ++t) expect[k].push_back(idx[t]);
      start = stop;
    }
  }
  EXPECT_EQ(plan.client_indices, expect);
  expect_conservation(plan, ds);
}

TEST(Dirichlet, DeterministicAndConserving) {
  const auto ds = blob(5, 60);
  Rng a(3);
  Rng b(3);
  const auto p1 = partition_dirichlet(ds, 7, 0.3, a);
  const auto p2 = partition_dirichlet(ds, 7, 0.3, b);
  EXPECT_EQ(p1, p2);
  expect_conservation(p1, ds);
  EXPECT_EQ(p1.total_assigned(), ds.size());
}

TEST(Dirichlet, LargeAlphaHistogramsMatchGlobalChiSquare) {
  // With alpha huge every client's label histogram matches the (balanced)
  // global one; count how often a chi-square test at 5% rejects.
  const auto ds = blob(4, 200);
  std::size_t rejections = 0;
  std::size_t tests = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto plan = partition_dirichlet(ds, 5, 1e6, rng);
    for (std::size_t k = 0; k < 5; ++k) {
      const double n = static_cast<double>(plan.client_indices[k].size());
      double chi2 = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        const double e = n / 4.0;
        chi2 += (plan.counts[k][c] - e) * (plan.counts[k][c] - e) / e;
      }
      rejections += chi2 > 7.815 ? 1 : 0;  // 3 dof, 5%
      ++tests;
    }
  }
  EXPECT_LE(rejections, tests / 10);
}

TEST(Pathological, EqualCountsWhenRatioIsOne) {
  const auto ds = blob(6, 50);
  Rng rng(4);
  const auto plan = partition_pathological(ds, 6, 2, 1.0, rng);
  expect_conservation(plan, ds);
  for (std::size_t k = 0; k < 6; ++k) {
    std::vector<std::size_t> nz;
    for (auto n : plan.counts[k])
      if (n) nz.push_back(n);
    ASSERT_EQ(nz.size(), 2u);
    EXPECT_LE(std::max(nz[0], nz[1]) - std::min(nz[0], nz[1]), 1u);
  }
}

TEST(Pathological, SingleClientAllClassesRatio) {
  const auto ds = blob(4, 100);
  Rng rng(5);
  const auto plan = partition_pathological(ds, 1, 4, 10.0, rng);
  const auto& n = plan.counts[0];
  const double mx = static_cast<double>(*std::max_element(n.begin(), n.end()));
  const double mn = static_cast<double>(*std::min_element(n.begin(), n.end()));
  EXPECT_NEAR(mx / mn, 10.0, 10.0 * (1.0 / mn + 1.0 / mx));
}

TEST(Pathological, ClassesPerClientAndRatio) {
  const auto ds = blob(10, 500);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto plan = partition_pathological(ds, 10, 3, 50.0, rng);
    expect_conservation(plan, ds);
    for (std::size_t k = 0; k < 10; ++k) {
      std::vector<double> nz;
      for (auto n : plan.counts[k])
        if (n) nz.push_back(static_cast<double>(n));
      ASSERT_EQ(nz.size(), 3u);
      const double mx = *std::max_element(nz.begin(), nz.end());
      const double mn = *std::min_element(nz.begin(), nz.end());
      // Rounding of the smallest count moves the ratio by at most 0.5/mn relative.
      EXPECT_NEAR(mx / mn, 50.0, 50.0 * (0.5 / mn + 0.5 / mx) + 1e-9);
    }
  }
}

TEST(Pathological, InfeasibleWhenTooFewSamples) {
  const auto ds = blob(2, 1);
  Rng rng(6);
  EXPECT_THROW(partition_pathological(ds, 4, 1, 1.0, rng), Infeasible);
}

TEST(PlanJson, ListsIndicesByClass) {
  const auto ds = blob(3, 5);
  Rng rng(7);
  const auto plan = partition_dirichlet(ds, 2, 1.0, rng);
  const auto j = plan_to_json(plan, ds);
  EXPECT_EQ(j["classes"], 3);
  std::size_t n = 0;
  for (const auto& c : j["clients"])
    for (const auto& [label, idx] : c["classes"].items()) n += idx.size();
  EXPECT_EQ(n, ds.size());
}

TEST(Augment, AtTargetIsUnchanged) {
  const auto ds = blob(3, 10);
  Rng rng(1);
  const std::vector<std::size_t> targets{10, 5, 0};
  const auto aug = augment_tail(ds, AugmentStrategy::kResample, targets, 0.6, rng);
  EXPECT_EQ(aug.data, ds);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(aug.synthetic_counts[c], 0u);
}

TEST(Augment, EffectiveSampleSize) {
  LabeledDataset ds{2, 1, {}, {}};
  Rng g(2);
  for (int i = 0; i < 10; ++i) ds.push({g.normal(), g.normal()}, 0);
  Rng rng(3);
  const std::vector<std::size_t> targets{15};
  const auto aug = augment_tail(ds, AugmentStrategy::kResample, targets, 0.6, rng);
  EXPECT_EQ(aug.synthetic_counts[0], 5u);
  EXPECT_DOUBLE_EQ(aug.n_eff(0), 13.0);
  EXPECT_EQ(aug.data.size(), 15u);
}

TEST(Augment, OriginalsAndLabelsPreserved) {
  const auto ds = blob(4, 3);
  LabeledDataset uneven = ds.subset(std::vector<std::size_t>{0, 1, 2, 3, 6, 9});
  for (auto strategy : {AugmentStrategy::kResample, AugmentStrategy::kMixup}) {
    Rng rng(4);
    const auto targets = median_targets(uneven);
    const auto aug = augment_tail(uneven, strategy, targets, 0.5, rng);
    for (std::size_t i = 0; i < uneven.size(); ++i) {
      EXPECT_EQ(aug.data.features[i], uneven.features[i]);
      EXPECT_EQ(aug.data.labels[i], uneven.labels[i]);
      EXPECT_FALSE(aug.synthetic[i]);
    }
    const auto counts = aug.data.class_counts();
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(counts[c], aug.real_counts[c] + aug.synthetic_counts[c]);
      EXPECT_EQ(aug.n_eff(c), aug.real_counts[c] + 0.5 * aug.synthetic_counts[c]);
      if (aug.real_counts[c] > 0) EXPECT_GE(counts[c], targets[c]);
    }
  }
}

TEST(Augment, MixupOfIdenticalSamplesIsThatSample) {
  LabeledDataset ds{3, 1, {}, {}};
  ds.push({1.0, -2.0, 0.5}, 0);
  ds.push({1.0, -2.0, 0.5}, 0);
  Rng rng(5);
  const std::vector<std::size_t> targets{6};
  const auto aug = augment_tail(ds, AugmentStrategy::kMixup, targets, 0.6, rng);
  for (std::size_t i = 2; i < aug.data.size(); ++i) EXPECT_EQ(aug.data.features[i], ds.features[0]);
}

TEST(Augment, MissingClassWithPositiveTargetThrows) {
  LabeledDataset ds{1, 2, {}, {}};
  ds.push({1.0}, 0);
  Rng rng(6);
  const std::vector<std::size_t> targets{1, 3};
  EXPECT_THROW(augment_tail(ds, AugmentStrategy::kResample, targets, 0.6, rng), EmptyClass);
}

TEST(Augment, MedianTargets) {
  LabeledDataset ds{1, 4, {}, {}};
  for (int i = 0; i < 9; ++i) ds.push({0.0}, 0);
  for (int i = 0; i < 3; ++i) ds.push({0.0}, 1);
  ds.push({0.0}, 3);
  EXPECT_EQ(median_targets(ds), (std::vector<std::size_t>{3, 3, 0, 3}));
}
