#include "skiplight/vmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace skiplight::vmm {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// sum_m (-1)^m a_m(nu) / z^m of the large-argument expansion
// I_nu(z) ~ e^z / sqrt(2 pi z) * series.
double asymptotic_series(double nu, double z) {
  const double mu4 = 4.0 * nu * nu;
  double term = 1.0, sum = 1.0;
  for (int m = 1; m < 60; ++m) {
    const double next = -term * (mu4 - (2.0 * m - 1) * (2.0 * m - 1)) / (m * 8.0 * z);
    if (std::abs(next) >= std::abs(term)) break;  // divergent tail
    term = next;
    sum += term;
    if (std::abs(term) < 1e-17 * std::abs(sum)) break;
  }
  return sum;
}

// Power series sum_m (z/2)^(2m+nu) / (m! (m+nu)!) for nu in {0, 1}.
double power_series(int nu, double z) {
  const double q = 0.25 * z * z;
  double term = nu == 0 ? 1.0 : 0.5 * z;
  double sum = term;
  for (int m = 1; m < 500; ++m) {
    term *= q / (static_cast<double>(m) * (m + nu));
    sum += term;
    if (term < 1e-16 * sum) break;
  }
  return sum;
}

constexpr double kSeriesLimit = 15.0;
constexpr double kLogSpaceLimit = 50.0;

}  // namespace

double bessel_i0(double kappa) {
  if (!(kappa >= 0.0)) throw UsageError("bessel_i0 requires kappa >= 0");
  if (kappa < kSeriesLimit) return power_series(0, kappa);
  return std::exp(kappa) / std::sqrt(kTwoPi * kappa) * asymptotic_series(0.0, kappa);
}

double bessel_i1(double kappa) {
  if (!(kappa >= 0.0)) throw UsageError("bessel_i1 requires kappa >= 0");
  if (kappa < kSeriesLimit) return power_series(1, kappa);
  return std::exp(kappa) / std::sqrt(kTwoPi * kappa) * asymptotic_series(1.0, kappa);
}

double log_bessel_i0(double kappa) {
  if (!(kappa >= 0.0)) throw UsageError("log_bessel_i0 requires kappa >= 0");
  if (kappa <= kLogSpaceLimit) return std::log(bessel_i0(kappa));
  return kappa - 0.5 * std::log(kTwoPi * kappa) + std::log(asymptotic_series(0.0, kappa));
}

double bessel_ratio(double kappa) {
  if (kappa == 0.0) return 0.0;
  if (kappa < kSeriesLimit) return power_series(1, kappa) / power_series(0, kappa);
  return asymptotic_series(1.0, kappa) / asymptotic_series(0.0, kappa);
}

double estimate_kappa(double r) {
  if (!(r > 0.0)) return 0.0;
  if (r >= 1.0) return kKappaCap;
  double kappa = r * (2.0 - r * r) / (1.0 - r * r);
  for (int i = 0; i < 2 && kappa < kKappaCap; ++i) {
    const double a = bessel_ratio(kappa);
    const double slope = 1.0 - a / kappa - a * a;
    if (!(slope > 0.0)) break;
    const double next = kappa - (a - r) / slope;
    if (!(next > 0.0) || !std::isfinite(next)) break;
    kappa = next;
  }
  return std::min(kappa, kKappaCap);
}

double wrap_angle(double x) {
  double w = std::fmod(x, kTwoPi);
  if (w < 0.0) w += kTwoPi;
  if (w >= kTwoPi) w = 0.0;
  return w;
}

double vm_logpdf(double x, const Component& comp) {
  return comp.kappa * std::cos(x - comp.mu) - std::log(kTwoPi) - log_bessel_i0(comp.kappa);
}

double Mixture::logpdf(double x) const {
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(components.size());
  for (std::size_t k = 0; k < components.size(); ++k) {
    terms[k] = std::log(weights[k]) + vm_logpdf(x, components[k]);
    best = std::max(best, terms[k]);
  }
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - best);
  return best + std::log(sum);
}

namespace {

// Seeds K centres with circular k-means++ (squared chord distance).
std::vector<double> seed_centres(const std::vector<double>& x, int k, std::mt19937_64& rng) {
  std::vector<double> centres;
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  centres.push_back(x[pick(rng)]);
  std::vector<double> d2(x.size());
  while (static_cast<int>(centres.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (double c : centres) best = std::min(best, 2.0 - 2.0 * std::cos(x[i] - c));
      d2[i] = best;
      total += best;
    }
    if (total <= 0.0) {
      centres.push_back(x[pick(rng)]);
      continue;
    }
    std::uniform_real_distribution<double> u(0.0, total);
    double target = u(rng), cum = 0.0;
    std::size_t chosen = x.size() - 1;
    for (std::size_t i = 0; i < x.size(); ++i) {
      cum += d2[i];
      if (cum >= target) {
        chosen = i;
        break;
      }
    }
    centres.push_back(x[chosen]);
  }
  return centres;
}

// M-step from responsibilities stored row-major n x K.
bool m_step(const std::vector<double>& x, const std::vector<double>& resp, int k, Mixture& mix) {
  const std::size_t n = x.size();
  bool capped = false;
  for (int c = 0; c < k; ++c) {
    double w = 0.0, s = 0.0, co = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = resp[i * k + c];
      w += r;
      s += r * std::sin(x[i]);
      co += r * std::cos(x[i]);
    }
    mix.weights[c] = w / static_cast<double>(n);
    if (w < 1e-12) continue;  // empty component keeps its shape
    mix.components[c].mu = wrap_angle(std::atan2(s, co));
    const double rbar = std::min(1.0, std::hypot(s, co) / w);
    mix.components[c].kappa = estimate_kappa(rbar);
    capped = capped || mix.components[c].kappa >= kKappaCap;
  }
  double total = 0.0;
  for (double w : mix.weights) total += w;
  for (double& w : mix.weights) w /= total;
  return capped;
}

// E-step; returns log-likelihood of the current mixture.
double e_step(const std::vector<double>& x, const Mixture& mix, std::vector<double>& resp) {
  const int k = static_cast<int>(mix.k());
  std::vector<double> log_w(k), log_norm(k);
  for (int c = 0; c < k; ++c) {
    log_w[c] = std::log(mix.weights[c]);
    log_norm[c] = std::log(kTwoPi) + log_bessel_i0(mix.components[c].kappa);
  }
  double loglik = 0.0;
  std::vector<double> t(k);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      t[c] = log_w[c] + mix.components[c].kappa * std::cos(x[i] - mix.components[c].mu) - log_norm[c];
      best = std::max(best, t[c]);
    }
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += std::exp(t[c] - best);
    const double lse = best + std::log(sum);
    for (int c = 0; c < k; ++c) resp[i * k + c] = std::exp(t[c] - lse);
    loglik += lse;
  }
  return loglik;
}

FitResult fit_once(const std::vector<double>& x, int k, const FitConfig& config, std::mt19937_64& rng) {
  const std::size_t n = x.size();
  std::vector<double> resp(n * k, 0.0);
  const auto centres = seed_centres(x, k, rng);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      const double d = 1.0 - std::cos(x[i] - centres[c]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    resp[i * k + best] = 1.0;
  }
  FitResult result;
  result.mixture.weights.assign(k, 1.0 / k);
  result.mixture.components.resize(k);
  for (int c = 0; c < k; ++c) result.mixture.components[c].mu = wrap_angle(centres[c]);
  result.degenerate = m_step(x, resp, k, result.mixture);

  double prev = e_step(x, result.mixture, resp);
  result.loglik_trace.push_back(prev);
  for (int it = 0; it < config.max_iters; ++it) {
    result.degenerate = m_step(x, resp, k, result.mixture);
    const double ll = e_step(x, result.mixture, resp);
    result.loglik_trace.push_back(ll);
    result.iterations = it + 1;
    const bool done = ll - prev < config.tol;
    prev = ll;
    if (done) break;
  }
  result.loglik = prev;
  return result;
}

}  // namespace

FitResult em_fit(const std::vector<double>& samples, int k, const FitConfig& config) {
  if (k < 1) throw UsageError("mixture size must be at least 1");
  if (samples.size() < 3ULL * k)
    throw DataError("em_fit needs at least 3K samples (" + std::to_string(3 * k) + "), got " +
                    std::to_string(samples.size()));
  if (!(config.tol > 0.0)) throw UsageError("tol must be positive");
  std::vector<double> x(samples.size());
  std::transform(samples.begin(), samples.end(), x.begin(), wrap_angle);

  FitResult best;
  bool have = false;
  const int restarts = std::max(1, config.restarts);
  for (int r = 0; r < restarts; ++r) {
    std::mt19937_64 rng(config.seed * 1000003ULL + static_cast<std::uint64_t>(k) * 7919ULL + r);
    FitResult fit = fit_once(x, k, config, rng);
    if (!have || fit.loglik > best.loglik) {
      best = std::move(fit);
      have = true;
    }
  }
  return best;
}

double bic(double loglik, int k, std::size_t n) {
  return (3.0 * k - 1.0) * std::log(static_cast<double>(n)) - 2.0 * loglik;
}

Selection select_k(const std::vector<double>& samples, const FitConfig& config) {
  if (config.k_candidates.empty()) throw UsageError("k_candidates must not be empty");
  std::vector<int> ks = config.k_candidates;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  Selection out;
  bool have = false;
  for (int k : ks) {
    FitResult fit = em_fit(samples, k, config);
    const double score = bic(fit.loglik, k, samples.size());
    out.bic_by_k.emplace_back(k, score);
    if (!have || score < out.bic) {
      out.fit = std::move(fit);
      out.bic = score;
      have = true;
    }
  }
  return out;
}

double hue_to_angle(int hue) { return hue * kTwoPi / kHueBins; }

std::vector<double> hue_samples(const HueHistogram& hist) {
  std::vector<double> out;
  for (int h = 0; h < kHueBins; ++h) out.insert(out.end(), hist[h], hue_to_angle(h));
  return out;
}

nlohmann::json to_json(const Selection& selection) {
  const Mixture& mix = selection.fit.mixture;
  nlohmann::json mu = nlohmann::json::array(), kappa = nlohmann::json::array();
  for (const auto& c : mix.components) {
    mu.push_back(c.mu * kHueBins / kTwoPi);
    kappa.push_back(c.kappa);
  }
  return {{"K", mix.k()},      {"weights", mix.weights}, {"mu_deg_hue", mu},
          {"kappa", kappa},    {"bic", selection.bic},   {"degenerate", selection.fit.degenerate}};
}

}  // namespace skiplight::vmm
