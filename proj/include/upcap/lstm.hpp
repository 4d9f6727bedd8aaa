#pragma once

#include "upcap/tensor.hpp"

#include <cmath>
#include <vector>

namespace upcap {

/// Gate rows are stacked [input; forget; cell; output], each `hidden` tall.
struct LstmParams {
  Mat w_x;  // 4H x input
  Mat w_h;  // 4H x H
  Vec b;    // 4H

  static LstmParams zeros(int input_dim, int hidden_dim);
  /// Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1.
  static LstmParams random(int input_dim, int hidden_dim, Rng& rng);

  int hidden_dim() const { return static_cast<int>(w_h.cols()); }
  int input_dim() const { return static_cast<int>(w_x.cols()); }

  template <class F>
  void for_each(F&& f) {
    f("w_x", w_x);
    f("w_h", w_h);
    f("b", b);
  }
  template <class F>
  void for_each(F&& f) const {
    f("w_x", w_x);
    f("w_h", w_h);
    f("b", b);
  }
};

/// Everything one forward step needs to be reversed.
struct LstmCache {
  Vec x, h_prev, c_prev;
  Vec i, f, g, o;
  Vec c, tanh_c, h;
};

LstmCache lstm_step(const LstmParams& p, const Vec& x, const Vec& h_prev, const Vec& c_prev);

/// Accumulates parameter gradients into `grad` and writes the gradients
/// flowing to the step inputs. `dx` may be null when the input is constant.
void lstm_step_backward(const LstmParams& p, const LstmCache& cache, const Vec& dh, const Vec& dc,
                        LstmParams& grad, Vec* dx, Vec& dh_prev, Vec& dc_prev);

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace upcap
