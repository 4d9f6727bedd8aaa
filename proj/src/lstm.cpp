#include "upcap/lstm.hpp"

namespace upcap {
namespace {

Vec sigmoid(const Vec& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }

}  // namespace

LstmParams LstmParams::zeros(int input_dim, int hidden_dim) {
  return {Mat::Zero(4 * hidden_dim, input_dim), Mat::Zero(4 * hidden_dim, hidden_dim),
          Vec::Zero(4 * hidden_dim)};
}

LstmParams LstmParams::random(int input_dim, int hidden_dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  std::uniform_real_distribution<double> u(-bound, bound);
  LstmParams p = zeros(input_dim, hidden_dim);
  for (Eigen::Index r = 0; r < p.w_x.rows(); ++r)
    for (Eigen::Index c = 0; c < p.w_x.cols(); ++c) p.w_x(r, c) = u(rng);
  for (Eigen::Index r = 0; r < p.w_h.rows(); ++r)
    for (Eigen::Index c = 0; c < p.w_h.cols(); ++c) p.w_h(r, c) = u(rng);
  p.b.segment(hidden_dim, hidden_dim).setOnes();
  return p;
}

LstmCache lstm_step(const LstmParams& p, const Vec& x, const Vec& h_prev, const Vec& c_prev) {
  const Eigen::Index H = p.w_h.cols();
  LstmCache s;
  s.x = x;
  s.h_prev = h_prev;
  s.c_prev = c_prev;
  Vec z = p.b;
  z.noalias() += p.w_x * x;
  z.noalias() += p.w_h * h_prev;
  s.i = sigmoid(z.segment(0, H));
  s.f = sigmoid(z.segment(H, H));
  s.g = z.segment(2 * H, H).array().tanh().matrix();
  s.o = sigmoid(z.segment(3 * H, H));
  s.c = s.f.cwiseProduct(c_prev) + s.i.cwiseProduct(s.g);
  s.tanh_c = s.c.array().tanh().matrix();
  s.h = s.o.cwiseProduct(s.tanh_c);
  return s;
}

void lstm_step_backward(const LstmParams& p, const LstmCache& s, const Vec& dh, const Vec& dc,
                        LstmParams& grad, Vec* dx, Vec& dh_prev, Vec& dc_prev) {
  const Eigen::Index H = p.w_h.cols();
  const Vec d_o = dh.cwiseProduct(s.tanh_c);
  const Vec dc_total =
      dc + dh.cwiseProduct(s.o).cwiseProduct((1.0 - s.tanh_c.array().square()).matrix());
  const Vec d_f = dc_total.cwiseProduct(s.c_prev);
  const Vec d_i = dc_total.cwiseProduct(s.g);
  const Vec d_g = dc_total.cwiseProduct(s.i);
  dc_prev = dc_total.cwiseProduct(s.f);

  Vec dz(4 * H);
  dz.segment(0, H) = d_i.array() * s.i.array() * (1.0 - s.i.array());
  dz.segment(H, H) = d_f.array() * s.f.array() * (1.0 - s.f.array());
  dz.segment(2 * H, H) = d_g.array() * (1.0 - s.g.array().square());
  dz.segment(3 * H, H) = d_o.array() * s.o.array() * (1.0 - s.o.array());

  grad.w_x.noalias() += dz * s.x.transpose();
  grad.w_h.noalias() += dz * s.h_prev.transpose();
  grad.b += dz;
  dh_prev.noalias() = p.w_h.transpose() * dz;
  if (dx) dx->noalias() = p.w_x.transpose() * dz;
}

}  // namespace upcap
