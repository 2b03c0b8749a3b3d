#include "lqa/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "lqa/errors.hpp"
#include "lqa/manifold.hpp"

namespace lqa::optim {

double lr_at(const Schedule& schedule, std::size_t step_index) {
  if (schedule.total_steps == 0) throw ArgumentError("schedule needs total_steps > 0");
  if (step_index > schedule.total_steps) {
    throw ArgumentError("step " + std::to_string(step_index) + " beyond schedule of " +
                        std::to_string(schedule.total_steps));
  }
  const double total = static_cast<double>(schedule.total_steps);
  const double warmup = schedule.warmup_frac * total;
  const double s = static_cast<double>(step_index);
  if (s < warmup) return schedule.base_lr * s / warmup;
  const double span = total - warmup;
  const double progress = span > 0.0 ? (s - warmup) / span : 1.0;
  return schedule.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Vec riemannian_grad(const Parameter& p) {
  Vec out(p.grad.size());
  for (std::size_t r = 0; r < p.rows; ++r) {
    const auto x = p.row(r);
    const double* g = p.grad.data() + r * p.cols;
    double* o = out.data() + r * p.cols;
    for (std::size_t i = 0; i < p.cols; ++i) o[i] = g[i];
    o[0] = -o[0];
    const double ip = manifold::minkowski_inner(x, std::span<const double>(o, p.cols));
    for (std::size_t i = 0; i < p.cols; ++i) o[i] += ip * x[i];
  }
  return out;
}

namespace {

// Tangent vector at x with the given spatial part; the time coordinate is
// solved from <x,u>_L = 0. Unlike the orthogonal projection this does not
// grow with x0, so an element-wise normalized step stays bounded.
Vec lift_to_tangent(std::span<const double> x, std::span<const double> u) {
  Vec out(u.begin(), u.end());
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += x[i] * u[i];
  out[0] = s / x[0];
  return out;
}

}  // namespace

RiemannianAdam::RiemannianAdam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  states_.resize(params_.size());
  for (std::size_t k = 0; k < params_.size(); ++k) {
    states_[k].m.assign(params_[k]->value.size(), 0.0);
    states_[k].v.assign(params_[k]->value.size(), 0.0);
  }
}

void RiemannianAdam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

double RiemannianAdam::step(const Schedule& schedule, std::size_t step_index, double clip_norm) {
  return step_with_lr(lr_at(schedule, step_index), clip_norm);
}

double RiemannianAdam::step_with_lr(double lr, double clip_norm) {
  std::vector<Vec> grads(params_.size());
  double norm2 = 0.0;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const Parameter& p = *params_[k];
    for (double g : p.grad) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.id + "'");
    }
    grads[k] = p.kind == ad::ParamKind::manifold_point ? riemannian_grad(p) : p.grad;
    for (double g : grads[k]) norm2 += g * g;
  }
  const double norm = std::sqrt(norm2);
  const double clip = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

  const double b1 = config_.beta1, b2 = config_.beta2;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    AdamState& st = states_[k];
    st.step += 1;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    Vec& g = grads[k];
    for (double& gi : g) gi *= clip;
    for (std::size_t i = 0; i < g.size(); ++i) {
      st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
      st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
    }
    if (p.kind == ad::ParamKind::euclidean) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double upd = (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + config_.eps);
        p.value[i] -= lr * (upd + config_.weight_decay * p.value[i]);
        if (!std::isfinite(p.value[i])) throw TrainingError("non-finite update in '" + p.id + "'");
      }
      continue;
    }
    for (std::size_t r = 0; r < p.rows; ++r) {
      const std::size_t off = r * p.cols;
      const auto point = manifold::LorentzPoint::from_spatial(p.row(r).subspan(1));
      Vec dir(p.cols);
      bool zero = true;
      for (std::size_t i = 0; i < p.cols; ++i) {
        dir[i] = -lr * (st.m[off + i] / bc1) / (std::sqrt(st.v[off + i] / bc2) + config_.eps);
        zero = zero && dir[i] == 0.0;
      }
      if (zero) continue;
      const auto moved = manifold::exp_map(point, {point, lift_to_tangent(point.coords(), dir)});
      auto row = p.row(r);
      for (std::size_t i = 0; i < p.cols; ++i) {
        if (!std::isfinite(moved.coords()[i])) {
          throw TrainingError("non-finite update in '" + p.id + "'");
        }
        row[i] = moved.coords()[i];
      }
      // Moment transport: re-project the first moment onto the new tangent space.
      const Vec m_old(st.m.begin() + off, st.m.begin() + off + p.cols);
      const Vec m_new = lift_to_tangent(moved.coords(), m_old);
      std::copy(m_new.begin(), m_new.end(), st.m.begin() + off);
    }
  }
  return norm;
}

}  // namespace lqa::optim
