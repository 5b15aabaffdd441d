#pragma once

// Helpers shared by unit tests and the acceptance binary.

#include "camrw/autodiff.hpp"
#include "camrw/cam.hpp"
#include "camrw/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace camrw::testing {

inline ad::Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  ad::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline cam::CamConfig small_cam_config(int d = 8, int s = 6) {
  cam::CamConfig c;
  c.embed_dim = d;
  c.num_sentences = s;
  c.window_size = 4;
  c.vocab_size = 12;
  c.cls_token_id = 4;
  c.remap_heads = 2;
  return c;
}

// Module with every weight drawn from N(0, scale^2), including the
// zero-initialized ones, so no path is trivially dead.
inline cam::CamModule random_cam(ad::ParameterStore& store, const cam::CamConfig& cfg, Rng& rng,
                                 double scale = 0.5, const std::string& prefix = "cam") {
  for (const auto& spec : cam::CamModule::layout(prefix, cfg)) {
    store.add(spec.name, random_matrix(rng, spec.rows, spec.cols, scale));
  }
  return cam::CamModule::bind(store, prefix, cfg);
}

inline cam::SentenceStartMask random_mask(Rng& rng, std::size_t n, double p = 0.4) {
  cam::SentenceStartMask m = cam::SentenceStartMask::zeros(n);
  for (auto& f : m.flags) f = rng.bernoulli(p) ? 1 : 0;
  return m;
}

struct GradCheckResult {
  double worst = 0.0;
  std::string where;
};

// Central finite differences against tape gradients of a scalar function.
inline GradCheckResult gradient_check(const std::function<ad::Var(ad::Tape&)>& f,
                                      const std::vector<ad::Parameter*>& params, double h = 1e-6) {
  ad::GradientBuffer grads;
  {
    ad::Tape tape(true);
    tape.backward(f(tape), grads);
  }
  auto eval = [&] {
    ad::Tape tape(false);
    return f(tape).value()(0, 0);
  };
  GradCheckResult res;
  for (ad::Parameter* p : params) {
    const ad::Matrix& g = grads.get(p);
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double keep = p->value.data()[i];
      p->value.data()[i] = keep + h;
      const double up = eval();
      p->value.data()[i] = keep - h;
      const double down = eval();
      p->value.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g.size() == 0 ? 0.0 : g.data()[i];
      const double denom = std::max(1e-4, std::abs(analytic) + std::abs(numeric));
      const double err = std::abs(analytic - numeric) / denom;
      if (err > res.worst) {
        res.worst = err;
        res.where = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace camrw::testing
