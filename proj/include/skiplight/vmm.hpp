#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "skiplight/lightcodec.hpp"

namespace skiplight::vmm {

inline constexpr double kKappaCap = 1e4;

/// Modified Bessel functions of the first kind, orders 0 and 1.
double bessel_i0(double kappa);
double bessel_i1(double kappa);
/// log I0, stable for large arguments.
double log_bessel_i0(double kappa);
/// Mean resultant length of a von Mises distribution, I1(k)/I0(k).
double bessel_ratio(double kappa);
/// Inverse of bessel_ratio: closed-form start plus two Newton steps, capped.
double estimate_kappa(double mean_resultant_length);

struct Component {
  double mu = 0.0;     // radians, [0, 2pi)
  double kappa = 0.0;  // >= 0
};

struct Mixture {
  std::vector<double> weights;
  std::vector<Component> components;

  std::size_t k() const { return components.size(); }
  double logpdf(double x) const;
};

double wrap_angle(double x);
double vm_logpdf(double x, const Component& comp);

struct FitConfig {
  std::vector<int> k_candidates{1, 2, 3, 4};
  int max_iters = 200;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  int restarts = 5;
};

struct FitResult {
  Mixture mixture;
  double loglik = 0.0;
  int iterations = 0;
  /// Some component's concentration hit kKappaCap.
  bool degenerate = false;
  /// Log-likelihood after every EM iteration of the returned restart.
  std::vector<double> loglik_trace;
};

FitResult em_fit(const std::vector<double>& samples, int k, const FitConfig& config);

/// (3K-1) ln n - 2 loglik.
double bic(double loglik, int k, std::size_t n);

struct Selection {
  FitResult fit;
  double bic = 0.0;
  std::vector<std::pair<int, double>> bic_by_k;
};

/// Fits every candidate K and keeps the lowest BIC; ties go to the smaller K.
Selection select_k(const std::vector<double>& samples, const FitConfig& config);

double hue_to_angle(int hue);

/// One angle per counted pixel of a thresholded hue histogram.
std::vector<double> hue_samples(const HueHistogram& hist);

/// {"K", "weights", "mu_deg_hue", "kappa", "bic"}; means are in hue-bin units.
nlohmann::json to_json(const Selection& selection);

}  // namespace skiplight::vmm
