#pragma once

// Slow reference implementations used only by tests. They share no code with
// the library: n-grams are space-joined strings, LCS is found by enumerating
// subsequences, and the gate is a plain comparison loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace oracle {

using Words = std::vector<std::string>;

inline Words split(const std::string& s) {
  Words out;
  std::string cur;
  for (char ch : s + " ") {
    if (ch == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  return out;
}

inline std::unordered_map<std::string, double> grams(const Words& w, std::size_t n) {
  std::unordered_map<std::string, double> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) {
    std::string key;
    for (std::size_t k = 0; k < n; ++k) key += w[i + k] + "\x1f";
    out[key] += 1.0;
  }
  return out;
}

inline bool is_subsequence(const Words& small, const Words& big) {
  std::size_t j = 0;
  for (const auto& w : big)
    if (j < small.size() && small[j] == w) ++j;
  return j == small.size();
}

// Longest common subsequence by trying every subset of `a`; fine up to ~16 words.
inline std::size_t brute_lcs(const Words& a, const Words& b) {
  std::size_t best = 0;
  const std::uint32_t n = static_cast<std::uint32_t>(a.size());
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    Words sub;
    for (std::uint32_t i = 0; i < n; ++i)
      if (mask & (1u << i)) sub.push_back(a[i]);
    if (sub.size() > best && is_subsequence(sub, b)) best = sub.size();
  }
  return best;
}

inline double rouge_l(const Words& cand, const std::vector<Words>& refs, double beta = 1.2) {
  double best = 0.0;
  for (const auto& r : refs) {
    const double l = static_cast<double>(brute_lcs(cand, r));
    if (l == 0.0 || cand.empty() || r.empty()) continue;
    const double p = l / cand.size(), rc = l / r.size();
    best = std::max(best, (1 + beta * beta) * p * rc / (rc + beta * beta * p));
  }
  return best;
}

struct Item {
  Words candidate;
  std::vector<Words> refs;
};

// Per-item CIDEr: 10 x mean_n mean_ref cos(tfidf(cand), tfidf(ref)),
// idf(g) = log(N / max(1, #items whose references contain g)).
inline std::vector<double> cider(const std::vector<Item>& items) {
  const double N = static_cast<double>(items.size());
  std::vector<double> out(items.size(), 0.0);
  for (std::size_t n = 1; n <= 4; ++n) {
    std::unordered_map<std::string, double> df;
    for (const auto& it : items) {
      std::unordered_set<std::string> seen;
      for (const auto& r : it.refs)
        for (const auto& [g, c] : grams(r, n)) seen.insert(g);
      for (const auto& g : seen) df[g] += 1.0;
    }
    auto vec = [&](const Words& w) {
      auto v = grams(w, n);
      for (auto& [g, x] : v) x *= std::log(N / std::max(1.0, df.count(g) ? df[g] : 0.0));
      return v;
    };
    for (std::size_t k = 0; k < items.size(); ++k) {
      auto c = vec(items[k].candidate);
      double sum = 0.0;
      for (const auto& r : items[k].refs) {
        auto v = vec(r);
        double dot = 0.0, nc = 0.0, nr = 0.0;
        for (auto& [g, x] : c) {
          nc += x * x;
          if (v.count(g)) dot += x * v[g];
        }
        for (auto& [g, y] : v) nr += y * y;
        if (nc > 0 && nr > 0) sum += dot / std::sqrt(nc * nr);
      }
      out[k] += 10.0 * sum / static_cast<double>(items[k].refs.size()) / 4.0;
    }
  }
  return out;
}

// Indices of scores that pass a ">= T" gate, by a plain loop.
inline std::vector<std::size_t> gate(const std::vector<double>& scores, double t) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!(scores[i] < t)) out.push_back(i);
  return out;
}

}  // namespace oracle
