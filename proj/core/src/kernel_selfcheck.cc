// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/kernel_selfcheck.h"

#include <chrono>
#include <cmath>
#include <cstring>

namespace sketchpipe::kernel {

namespace {

Mat random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// Sign pattern of the residuals, or nullopt when one sits on the kink.
std::optional<std::vector<signed char>> residual_signs(const Mat& pred, const Mat& target,
                                                       double kink) {
  std::vector<signed char> s(static_cast<std::size_t>(pred.size()));
  const Mat r = pred - target;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    if (std::abs(r.data()[i]) < kink) return std::nullopt;
    s[static_cast<std::size_t>(i)] = r.data()[i] > 0 ? 1 : -1;
  }
  return s;
}

}  // namespace

nlohmann::json GradCheckReport::to_json() const {
  return {{"max_rel_error", max_rel_error}, {"worst_entry", worst_entry}, {"checked", checked},
          {"skipped_kinks", skipped_kinks}, {"pass", pass}};
}

GradCheckReport gradient_check(const EditorParams& params, const Mat& e_v, const Mat& e_act,
                               const Mat& target, const GradCheckOptions& opts) {
  Gradients g = backward(e_v, e_act, params, target);
  if (opts.corrupt_gradient) {
    auto tensors = g.params.tensors();
    Mat& m = *tensors.front().second;
    m.data()[0] = m.data()[0] * 1.01 + 1e-3;
  }

  EditorParams p = params;
  Mat v = e_v;
  Mat a = e_act;
  GradCheckReport report;

  auto check = [&](const std::string& name, Mat& tensor, const Mat& grad) {
    for (Eigen::Index i = 0; i < tensor.size(); ++i) {
      const double saved = tensor.data()[i];
      tensor.data()[i] = saved + opts.eps;
      const Mat plus = editor_forward(v, a, p);
      tensor.data()[i] = saved - opts.eps;
      const Mat minus = editor_forward(v, a, p);
      tensor.data()[i] = saved;

      const auto sp = residual_signs(plus, target, opts.kink);
      const auto sm = residual_signs(minus, target, opts.kink);
      if (!sp || !sm || *sp != *sm) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (l1_loss(plus, target) - l1_loss(minus, target)) / (2 * opts.eps);
      const double analytic = grad.data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_entry = name + "[" + std::to_string(i) + "]";
      }
    }
  };

  auto grads = g.params.tensors();
  auto tensors = p.tensors();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    check(tensors[t].first, *tensors[t].second, *grads[t].second);
  }
  check("e_act", a, g.e_act);
  check("e_v", v, g.e_v);
  report.pass = report.checked > 0 && report.max_rel_error <= opts.tolerance;
  return report;
}

RandomProblem random_problem(std::mt19937_64& rng) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  EditorConfig cfg;
  cfg.heads = pick(1, 4);
  cfg.head_dim = pick(1, 4);
  cfg.d_model = pick(2, 16);
  cfg.d_ff = pick(1, 2 * cfg.d_model);
  cfg.layers = pick(1, 2);
  cfg.layer_norm = pick(0, 3) != 0;
  cfg.bias = pick(0, 3) != 0;
  cfg.positional = pick(0, 3) == 0;
  const int k = pick(1, 8);
  cfg.max_positions = k + pick(0, 2);

  RandomProblem prob;
  prob.params = init_params(cfg, rng());
  for (auto& [name, m] : prob.params.tensors()) {
    const bool gain = name.find("_g") != std::string::npos;
    *m = random_matrix(rng, m->rows(), m->cols(), 0.5);
    if (gain) m->array() += 1.0;
  }
  const int n_raw = pick(1, 64);
  prob.e_v = random_matrix(rng, k, cfg.d_model, 1.0);
  prob.e_act = adaptive_pool(random_matrix(rng, n_raw, cfg.d_model, 1.0), kDefaultPoolLength);
  prob.target = random_matrix(rng, k, cfg.d_model, 1.0);
  return prob;
}

nlohmann::json run_selfcheck(const SelfcheckOptions& opts) {
  std::mt19937_64 rng(opts.seed);
  nlohmann::json out;
  bool all = true;

  // Zero-init identity, bit for bit.
  {
    bool ok = true;
    nlohmann::json cases = nlohmann::json::array();
    for (const int k : {1, 4, 49, 256}) {
      EditorConfig cfg;
      cfg.d_model = 16;
      cfg.heads = 4;
      const EditorParams p = init_params(cfg, rng());
      const Mat e_v = random_matrix(rng, k, cfg.d_model, 1.0);
      const Mat e_act = adaptive_pool(random_matrix(rng, 40, cfg.d_model, 1.0));
      const Mat out_v = editor_forward(e_v, e_act, p);
      const bool same = out_v.rows() == e_v.rows() && out_v.cols() == e_v.cols() &&
                        std::memcmp(out_v.data(), e_v.data(), sizeof(double) * e_v.size()) == 0;
      cases.push_back({{"k", k}, {"identical", same}});
      ok = ok && same;
    }
    out["identity"] = {{"cases", cases}, {"pass", ok}};
    all = all && ok;
  }

  // Pooling against bin enumeration.
  {
    double worst = 0.0;
    for (int n = 1; n <= 100; ++n) {
      const Mat raw = random_matrix(rng, n, 3, 1.0);
      const Mat pooled = adaptive_pool(raw, 32);
      for (int i = 0; i < 32; ++i) {
        int lo = 0;
        while ((lo + 1) * 32 <= i * n) ++lo;  // floor(i*n/32)
        int hi = lo;
        while (hi * 32 < (i + 1) * n) ++hi;   // ceil((i+1)*n/32)
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(3);
        for (int r = lo; r < hi; ++r) acc += raw.row(r);
        acc /= static_cast<double>(hi - lo);
        worst = std::max(worst, (pooled.row(i) - acc).cwiseAbs().maxCoeff());
      }
    }
    const bool ok = worst <= 1e-12;
    out["pooling"] = {{"max_abs_error", worst}, {"pass", ok}};
    all = all && ok;
  }

  // Finite differences.
  {
    const auto start = std::chrono::steady_clock::now();
    nlohmann::json configs = nlohmann::json::array();
    double worst = 0.0;
    bool ok = true;
    for (int c = 0; c < opts.gradient_configs; ++c) {
      RandomProblem prob = random_problem(rng);
      GradCheckReport r = gradient_check(prob.params, prob.e_v, prob.e_act, prob.target, opts.grad);
      nlohmann::json row = r.to_json();
      row["config"] = prob.params.config.to_json();
      row["k"] = prob.e_v.rows();
      configs.push_back(std::move(row));
      worst = std::max(worst, r.max_rel_error);
      ok = ok && r.pass;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out["gradient"] = {{"configs", configs}, {"max_rel_error", worst}, {"seconds", secs},
                       {"pass", ok}};
    all = all && ok;
  }
  out["pass"] = all;
  return out;
}

}  // namespace sketchpipe::kernel
