#include "lqa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace lqa::ad {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckResult check_gradients(ParamStore& params, const std::function<Var(Tape&)>& loss,
                                std::uint64_t seed, std::size_t n_coords, double h) {
  params.zero_grad();
  {
    Tape t;
    t.backward(loss(t));
  }
  std::vector<std::pair<Parameter*, std::size_t>> coords;
  for (Parameter* p : params.all()) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) coords.emplace_back(p, i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (coords.size() > n_coords) coords.resize(n_coords);

  auto eval = [&]() {
    Tape t;
    return t.item(loss(t));
  };
  GradCheckResult res;
  for (auto [p, i] : coords) {
    const double orig = p->value[i];
    p->value[i] = orig + h;
    const double fp = eval();
    p->value[i] = orig - h;
    const double fm = eval();
    p->value[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = relative_error(p->grad[i], numeric);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_param = p->id + "[" + std::to_string(i) + "]";
    }
    ++res.coords_checked;
  }
  return res;
}

}  // namespace lqa::ad
