#pragma once

#include "upcap/tensor.hpp"

#include <cmath>
#include <vector>

namespace upcap {

/// Flat views over every tensor a parameter struct exposes through for_each.
template <class Params>
std::vector<Eigen::Map<Eigen::ArrayXd>> parameter_views(Params& p) {
  std::vector<Eigen::Map<Eigen::ArrayXd>> out;
  p.for_each([&](const char*, auto& m) { out.emplace_back(m.data(), m.size()); });
  return out;
}

template <class Params>
void set_zero(Params& p) {
  p.for_each([](const char*, auto& m) { m.setZero(); });
}

template <class Params>
bool params_finite(const Params& p) {
  bool ok = true;
  p.for_each([&](const char*, const auto& m) { ok = ok && m.allFinite(); });
  return ok;
}

template <class Params>
bool params_bitwise_equal(const Params& a, const Params& b) {
  std::vector<const double*> pa, pb;
  std::vector<Eigen::Index> na, nb;
  a.for_each([&](const char*, const auto& m) { pa.push_back(m.data()); na.push_back(m.size()); });
  b.for_each([&](const char*, const auto& m) { pb.push_back(m.data()); nb.push_back(m.size()); });
  if (na != nb) return false;
  for (std::size_t k = 0; k < pa.size(); ++k)
    if (std::memcmp(pa[k], pb[k], sizeof(double) * static_cast<std::size_t>(na[k])) != 0) return false;
  return true;
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping. A non-positive max_norm disables clipping.
template <class Params>
double clip_global_norm(Params& grads, double max_norm) {
  double sq = 0.0;
  for (auto& v : parameter_views(grads)) sq += v.square().sum();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& v : parameter_views(grads)) v *= s;
  }
  return norm;
}

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  template <class Params>
  void step(Params& params, Params& grads) {
    auto pv = parameter_views(params);
    auto gv = parameter_views(grads);
    if (m_.empty()) {
      for (auto& g : gv) {
        m_.push_back(Eigen::ArrayXd::Zero(g.size()));
        v_.push_back(Eigen::ArrayXd::Zero(g.size()));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < pv.size(); ++k) {
      m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * gv[k];
      v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * gv[k].square();
      pv[k] -= lr_ * (m_[k] / c1) / ((v_[k] / c2).sqrt() + eps_);
    }
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Eigen::ArrayXd> m_, v_;
};

}  // namespace upcap
