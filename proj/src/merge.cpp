#include "skiplight/merge.hpp"

#include <cmath>
#include <random>

namespace skiplight {

namespace {

void check_compatible(const ModelParameters& base, const ModelParameters& other) {
  if (base.tensors.size() != other.tensors.size()) throw UsageError("parameter maps differ in size");
  for (const auto& [name, m] : base.tensors) {
    auto it = other.tensors.find(name);
    if (it == other.tensors.end()) throw UsageError("parameter " + name + " missing from task parameters");
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw UsageError("parameter " + name + " differs in shape");
  }
}

}  // namespace

ModelParameters dare_merge(const ModelParameters& base, const std::vector<ModelParameters>& tasks,
                           double drop_rate, double lambda, std::uint64_t seed) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw UsageError("drop rate must be in [0,1)");
  for (const auto& t : tasks) check_compatible(base, t);
  const double rescale = 1.0 / (1.0 - drop_rate);
  ModelParameters merged = base;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (i + 1)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& [name, out] : merged.tensors) {
      const Matrix& pre = base.at(name);
      const Matrix& task = tasks[i].at(name);
      for (Eigen::Index k = 0; k < out.size(); ++k) {
        const bool keep = drop_rate == 0.0 || u(rng) >= drop_rate;
        if (keep) out.data()[k] += lambda * rescale * (task.data()[k] - pre.data()[k]);
      }
    }
  }
  return merged;
}

ModelParameters task_arithmetic(const ModelParameters& base, const std::vector<ModelParameters>& tasks,
                                double lambda) {
  for (const auto& t : tasks) check_compatible(base, t);
  ModelParameters merged = base;
  for (const auto& task : tasks)
    for (auto& [name, out] : merged.tensors) out += lambda * (task.at(name) - base.at(name));
  return merged;
}

LoraSet make_lora_adapters(const ModelParameters& params, int rank, double alpha, std::uint64_t seed) {
  if (rank < 1) throw UsageError("LoRA rank must be at least 1");
  LoraSet set;
  std::mt19937_64 rng(seed);
  for (const auto& [name, w] : params.tensors) {
    if (!is_attention_projection(name)) continue;
    LoraAdapter lora;
    lora.target = name;
    lora.rank = rank;
    lora.alpha = alpha;
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    lora.a.resize(rank, w.cols());
    for (Eigen::Index i = 0; i < lora.a.size(); ++i) lora.a.data()[i] = u(rng);
    lora.b = Matrix::Zero(w.rows(), rank);
    set.emplace(name, std::move(lora));
  }
  return set;
}

ModelParameters lora_merge(const ModelParameters& params, const LoraSet& adapters) {
  ModelParameters merged = params;
  for (const auto& [target, lora] : adapters) {
    Matrix& w = merged.at(target);
    if (lora.a.rows() != lora.rank || lora.b.cols() != lora.rank || lora.a.cols() != w.cols() ||
        lora.b.rows() != w.rows())
      throw UsageError("adapter for " + target + " does not match its weight");
    w.noalias() += lora.scaling() * (lora.b * lora.a);
  }
  return merged;
}

}  // namespace skiplight
