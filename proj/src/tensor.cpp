#include "upcap/tensor.hpp"

#include <cmath>
#include <cstdio>

namespace upcap {

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t basis) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = basis;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis) {
  return fnv1a(bytes.data(), bytes.size(), basis);
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

Mat gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Mat m(rows, cols);
  // Fill in row-major order so the draw sequence does not depend on storage.
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  return m;
}

bool all_finite(const Vec& v) { return v.allFinite(); }
bool all_finite(const Mat& m) { return m.allFinite(); }

Vec to_vec(const std::vector<double>& values) {
  return Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size()));
}

std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

Vec softmax(const Vec& logits) {
  const double top = logits.maxCoeff();
  // std::exp maps -inf to exactly 0; Eigen's vectorized exp leaves a denormal.
  Vec e = logits.unaryExpr([top](double v) { return std::exp(v - top); });
  return e / e.sum();
}

int argmax_lowest(const Vec& values) {
  int best = 0;
  for (Eigen::Index i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace upcap
