#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "skiplight/vmm.hpp"

using namespace skiplight;
using namespace skiplight::vmm;

namespace {

constexpr double kTwoPi = 2 * std::numbers::pi;

// 40 terms of sum (x/2)^(2k) / (k!)^2 in long double.
long double i0_series(long double x) {
  long double term = 1, sum = 1;
  for (int k = 1; k < 40; ++k) {
    term *= (x / 2) * (x / 2) / (static_cast<long double>(k) * k);
    sum += term;
  }
  return sum;
}

double trapezoid(const std::function<double(double)>& f, int n = 20000) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += f(kTwoPi * i / n);
  return s * kTwoPi / n;  // periodic integrand: trapezoid equals the plain sum
}

// Rejection sampling against a uniform envelope; the envelope height is the mode density.
double sample_vm(double mu, double kappa, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (true) {
    const double x = kTwoPi * u(rng);
    if (u(rng) < std::exp(kappa * (std::cos(x - mu) - 1.0))) return x;
  }
}

}  // namespace

TEST(Bessel, ValuesAndMonotone) {
  EXPECT_EQ(bessel_i0(0.0), 1.0);
  EXPECT_NEAR(bessel_i0(1.0), static_cast<double>(i0_series(1.0L)), 1e-14);
  EXPECT_NEAR(bessel_i0(1.0), 1.2660658, 1e-7);
  for (double x : {0.5, 3.0, 10.0, 14.9})
    EXPECT_NEAR(bessel_i0(x) / static_cast<double>(i0_series(x)), 1.0, 1e-12);
  EXPECT_NEAR(bessel_i0(20.0) / 4.355828255955353e7, 1.0, 1e-9);
  EXPECT_NEAR(log_bessel_i0(500.0), 500.0 - 0.5 * std::log(kTwoPi * 500.0) + std::log1p(1.0 / 4000.0), 1e-6);
  double prev = 0.0;
  for (double x = 0.0; x < 60.0; x += 0.25) {
    const double v = log_bessel_i0(x);
    EXPECT_GT(v, prev - (x == 0.0));
    prev = v;
  }
  EXPECT_THROW(bessel_i0(-1.0), UsageError);
}

// Two Newton steps from the closed form leave a small residual.
TEST(Kappa, EstimateInvertsRatio) {
  for (double k : {0.1, 1.0, 4.0, 8.0, 50.0, 300.0}) EXPECT_NEAR(estimate_kappa(bessel_ratio(k)) / k, 1.0, 1e-4);
  EXPECT_EQ(estimate_kappa(1.0), kKappaCap);
}

TEST(VmLogpdf, UniformPeakAndNormalised) {
  for (double x : {0.0, 1.0, 5.0}) EXPECT_DOUBLE_EQ(vm_logpdf(x, {2.0, 0.0}), -std::log(kTwoPi));
  const Component c{1.3, 5.0};
  EXPECT_GT(vm_logpdf(1.3, c), vm_logpdf(1.4, c));
  EXPECT_GT(vm_logpdf(1.3, c), vm_logpdf(1.2, c));
  for (const Component& comp : {Component{0.3, 0.5}, Component{4.0, 20.0}, Component{2.0, 200.0}})
    EXPECT_NEAR(trapezoid([&](double x) { return std::exp(vm_logpdf(x, comp)); }), 1.0, 1e-6);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int r = 0; r < 5; ++r) {
    Mixture m;
    double total = 0.0;
    for (int k = 0; k < 3; ++k) {
      m.weights.push_back(u(rng) + 0.1);
      total += m.weights.back();
      m.components.push_back({kTwoPi * u(rng), 30 * u(rng)});
    }
    for (double& w : m.weights) w /= total;
    EXPECT_NEAR(trapezoid([&](double x) { return std::exp(m.logpdf(x)); }), 1.0, 1e-6);
  }
}

TEST(EmFit, UniformGivesLowKappa) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, kTwoPi);
  std::vector<double> x(5000);
  for (double& v : x) v = u(rng);
  const FitResult fit = em_fit(x, 1, {});
  EXPECT_LT(fit.mixture.components[0].kappa, 0.1);
}

TEST(EmFit, DegenerateSamples) {
  const std::vector<double> x(50, 2.0);
  const FitResult fit = em_fit(x, 1, {});
  EXPECT_TRUE(fit.degenerate);
  EXPECT_NEAR(fit.mixture.components[0].mu, 2.0, 1e-12);
  EXPECT_EQ(fit.mixture.components[0].kappa, kKappaCap);
}

TEST(EmFit, RejectsTooFewSamples) { EXPECT_THROW(em_fit({0.1, 0.2, 0.3, 0.4, 0.5}, 2, {}), DataError); }

TEST(EmFit, PlantedMixtureRecoveredMonotone) {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution first(0.6);
  std::vector<double> x;
  for (int i = 0; i < 5000; ++i) x.push_back(first(rng) ? sample_vm(1.0, 8.0, rng) : sample_vm(4.0, 4.0, rng));
  FitConfig config;
  config.seed = 11;
  const FitResult fit = em_fit(x, 2, config);
  const auto& m = fit.mixture;
  const int a = std::abs(m.components[0].mu - 1.0) < std::abs(m.components[1].mu - 1.0) ? 0 : 1;
  EXPECT_NEAR(m.components[a].mu, 1.0, 0.1);
  EXPECT_NEAR(m.components[1 - a].mu, 4.0, 0.1);
  EXPECT_NEAR(m.weights[a], 0.6, 0.05);
  EXPECT_NEAR(m.weights[0] + m.weights[1], 1.0, 1e-12);
  for (std::size_t i = 1; i < fit.loglik_trace.size(); ++i)
    EXPECT_GE(fit.loglik_trace[i], fit.loglik_trace[i - 1] - 1e-9);

  config.k_candidates = {1, 2, 3};
  const Selection s = select_k(x, config);
  EXPECT_EQ(s.fit.mixture.k(), 2u);
  EXPECT_EQ(s.bic_by_k.size(), 3u);
  const Selection again = select_k(x, config);
  EXPECT_EQ(again.bic, s.bic);

  config.k_candidates = {2};
  EXPECT_EQ(select_k(x, config).fit.mixture.k(), 2u);
}

TEST(SelectK, SingleCluster) {
  std::mt19937_64 rng(4);
  std::vector<double> x;
  for (int i = 0; i < 3000; ++i) x.push_back(sample_vm(2.5, 6.0, rng));
  FitConfig config;
  config.k_candidates = {1, 2, 3};
  EXPECT_EQ(select_k(x, config).fit.mixture.k(), 1u);
}

TEST(Bic, Arithmetic) {
  EXPECT_NEAR(bic(0.0, 1, static_cast<std::size_t>(std::round(std::exp(2.0)))), 2 * std::log(7.0), 1e-12);
  EXPECT_DOUBLE_EQ(bic(-10.0, 2, 100), 5 * std::log(100.0) + 20.0);
  EXPECT_LT(bic(-5.0, 1, 100), bic(-10.0, 1, 100));
}

TEST(HueAngle, Mapping) {
  EXPECT_EQ(hue_to_angle(0), 0.0);
  EXPECT_DOUBLE_EQ(hue_to_angle(90), std::numbers::pi);
  EXPECT_DOUBLE_EQ(hue_to_angle(179), 179 * std::numbers::pi / 90);
  HueHistogram h{};
  h[3] = 2;
  h[90] = 1;
  const auto s = hue_samples(h);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_DOUBLE_EQ(s[2], std::numbers::pi);
}
