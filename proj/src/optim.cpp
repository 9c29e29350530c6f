#include "rarsq/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace rarsq::opt {

AdamW::AdamW(std::vector<Tensor*> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i]->v.size(), 0.0);
    v_[i].assign(params_[i]->v.size(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = *params_[p];
    if (t.g.empty()) continue;
    if (t.g.size() != t.v.size())
      throw std::logic_error("AdamW: gradient size mismatch");
    auto& m = m_[p];
    auto& v = v_[p];
    for (double g : t.g)
      if (!std::isfinite(g))
        throw std::runtime_error("AdamW: non-finite gradient");
    for (size_t i = 0; i < t.v.size(); ++i) {
      double g = t.g[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      double mh = m[i] / bc1;
      double vh = v[i] / bc2;
      t.v[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) +
                      cfg_.weight_decay * t.v[i]);
    }
    t.zero_grad();
  }
}

void AdamW::zero_grad() {
  for (Tensor* t : params_) t->zero_grad();
}

double lr_at_epoch(double base, int epoch, int total_epochs,
                   int warmup_epochs) {
  if (total_epochs <= 0) throw std::invalid_argument("lr_at_epoch: no epochs");
  if (warmup_epochs > 0 && epoch < warmup_epochs)
    return base * static_cast<double>(epoch + 1) /
           static_cast<double>(warmup_epochs);
  int span = total_epochs - warmup_epochs;
  if (span <= 1) return base;
  double progress =
      static_cast<double>(epoch - warmup_epochs) / static_cast<double>(span);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double clip_grad_norm(const std::vector<Tensor*>& params, double max_norm) {
  double sq = 0.0;
  for (const Tensor* t : params)
    for (double g : t->g) sq += g * g;
  double norm = std::sqrt(sq);
  if (max_norm <= 0.0 || norm <= max_norm || norm == 0.0) return norm;
  double s = max_norm / norm;
  for (Tensor* t : params)
    for (double& g : t->g) g *= s;
  return norm;
}

}  // namespace rarsq::opt
