#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <string>
#include <random>
#include <string_view>
#include <vector>

namespace upcap {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// 64-bit FNV-1a; stable across platforms, unlike std::hash.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t basis);

std::string hex64(std::uint64_t value);

Mat gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

bool all_finite(const Vec& v);
bool all_finite(const Mat& m);

Vec to_vec(const std::vector<double>& values);
std::vector<double> to_std(const Vec& v);

/// Softmax with the usual max shift.
Vec softmax(const Vec& logits);

/// First index holding the maximum value.
int argmax_lowest(const Vec& values);

/// Flat view over the storage of any dense Eigen object.
template <class Dense>
Eigen::Map<Eigen::ArrayXd> flat(Dense& m) {
  return Eigen::Map<Eigen::ArrayXd>(m.data(), m.size());
}
template <class Dense>
Eigen::Map<const Eigen::ArrayXd> flat(const Dense& m) {
  return Eigen::Map<const Eigen::ArrayXd>(m.data(), m.size());
}

/// Bitwise equality of two dense objects (shape and every byte).
template <class A, class B>
bool bitwise_equal(const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double x = a.data()[i];
    const double y = b.data()[i];
    if (std::memcmp(&x, &y, sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace upcap
