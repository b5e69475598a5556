// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/editor_kernel.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "sketchpipe/error.h"

namespace sketchpipe::kernel {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_finite(const Mat& m, int block, const char* stage) {
  if (!m.allFinite()) {
    throw Error(ErrorCode::kNonFinite,
                "non-finite value in block " + std::to_string(block) + " at " + stage);
  }
}

void require_shape(const Mat& m, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(ErrorCode::kShapeMismatch,
                what + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                    std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

struct LayerNormCache {
  Mat xhat;
  Eigen::VectorXd rstd;
};

Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, double eps, LayerNormCache* cache) {
  const Eigen::Index n = x.rows();
  const double d = static_cast<double>(x.cols());
  Mat xhat(n, x.cols());
  Eigen::VectorXd rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).sum() / d;
    const auto centered = (x.row(i).array() - mu).matrix();
    const double var = centered.squaredNorm() / d;
    rstd(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = centered * rstd(i);
  }
  Mat y = (xhat.array().rowwise() * g.row(0).array()).matrix();
  y.rowwise() += b.row(0);
  if (cache) *cache = {std::move(xhat), std::move(rstd)};
  return y;
}

// dx for y = g * xhat + b, given dy; accumulates dg and db.
Mat layer_norm_backward(const Mat& dy, const Mat& g, const LayerNormCache& c, Mat& dg, Mat& db) {
  const double d = static_cast<double>(dy.cols());
  dg.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  Mat dxhat = (dy.array().rowwise() * g.row(0).array()).matrix();
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_dxhat = dxhat.row(i).sum() / d;
    const double mean_dxhat_xhat = dxhat.row(i).dot(c.xhat.row(i)) / d;
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - mean_dxhat -
                             c.xhat.row(i).array() * mean_dxhat_xhat)
                                .matrix();
  }
  return dx;
}

void softmax_rows(Mat& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
}

struct BlockCache {
  Mat x, xn, y, yn, h1, g, o;
  LayerNormCache ln1, ln2;
  std::vector<Mat> q, k, v, p;  // per head
};

Mat block_forward(const Mat& x, const Mat& a, const BlockParams& bp, const EditorConfig& cfg,
                  int index, BlockCache* cache) {
  const int heads = cfg.heads;
  const int dh = cfg.dh();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index k_rows = x.rows();

  LayerNormCache ln1;
  Mat xn = cfg.layer_norm ? layer_norm(x, bp.ln1_g, bp.ln1_b, cfg.ln_eps, &ln1) : x;
  Mat q = xn * bp.wq;
  Mat kk = a * bp.wk;
  Mat v = a * bp.wv;
  if (cfg.bias) {
    q.rowwise() += bp.bq.row(0);
    kk.rowwise() += bp.bk.row(0);
    v.rowwise() += bp.bv.row(0);
  }
  Mat o(k_rows, heads * dh);
  std::vector<Mat> qs, ks, vs, ps;
  for (int h = 0; h < heads; ++h) {
    Mat qh = q.middleCols(h * dh, dh);
    Mat kh = kk.middleCols(h * dh, dh);
    Mat vh = v.middleCols(h * dh, dh);
    Mat p = (qh * kh.transpose()) * scale;
    softmax_rows(p);
    o.middleCols(h * dh, dh) = p * vh;
    if (cache) {
      qs.push_back(std::move(qh));
      ks.push_back(std::move(kh));
      vs.push_back(std::move(vh));
      ps.push_back(std::move(p));
    }
  }
  check_finite(o, index, "attention");
  Mat y = x + o * bp.wo;
  if (cfg.bias) y.rowwise() += bp.bo.row(0);
  check_finite(y, index, "attention residual");

  LayerNormCache ln2;
  Mat yn = cfg.layer_norm ? layer_norm(y, bp.ln2_g, bp.ln2_b, cfg.ln_eps, &ln2) : y;
  Mat h1 = yn * bp.w1;
  if (cfg.bias) h1.rowwise() += bp.b1.row(0);
  Mat g = h1.unaryExpr(&gelu);
  Mat z = y + g * bp.w2;
  if (cfg.bias) z.rowwise() += bp.b2.row(0);
  check_finite(z, index, "feed-forward residual");

  if (cache) {
    *cache = BlockCache{x, std::move(xn), std::move(y), std::move(yn), std::move(h1), std::move(g),
                        std::move(o), std::move(ln1), std::move(ln2), std::move(qs), std::move(ks),
                        std::move(vs), std::move(ps)};
  }
  return z;
}

// Returns dX; accumulates parameter gradients into `gb` and dA into `da`.
Mat block_backward(const Mat& dz, const Mat& a, const BlockParams& bp, const EditorConfig& cfg,
                   const BlockCache& c, BlockParams& gb, Mat& da) {
  const int heads = cfg.heads;
  const int dh = cfg.dh();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Z = Y + GELU(LN2(Y) W1 + b1) W2 + b2
  Mat dy = dz;
  gb.w2 += c.g.transpose() * dz;
  if (cfg.bias) gb.b2.row(0) += dz.colwise().sum();
  Mat dh1 = ((dz * bp.w2.transpose()).array() * c.h1.unaryExpr(&gelu_grad).array()).matrix();
  gb.w1 += c.yn.transpose() * dh1;
  if (cfg.bias) gb.b1.row(0) += dh1.colwise().sum();
  Mat dyn = dh1 * bp.w1.transpose();
  dy += cfg.layer_norm ? layer_norm_backward(dyn, bp.ln2_g, c.ln2, gb.ln2_g, gb.ln2_b) : dyn;

  // Y = X + O W_O + b_o
  Mat dx = dy;
  gb.wo += c.o.transpose() * dy;
  if (cfg.bias) gb.bo.row(0) += dy.colwise().sum();
  Mat d_o = dy * bp.wo.transpose();

  Mat dq(c.x.rows(), heads * dh);
  Mat dk(a.rows(), heads * dh);
  Mat dv(a.rows(), heads * dh);
  for (int h = 0; h < heads; ++h) {
    const Mat& p = c.p[h];
    const Mat doh = d_o.middleCols(h * dh, dh);
    const Mat dp = doh * c.v[h].transpose();
    dv.middleCols(h * dh, dh) = p.transpose() * doh;
    Mat ds = p;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double dot = dp.row(i).dot(p.row(i));
      ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
    }
    ds *= scale;
    dq.middleCols(h * dh, dh) = ds * c.k[h];
    dk.middleCols(h * dh, dh) = ds.transpose() * c.q[h];
  }
  gb.wq += c.xn.transpose() * dq;
  gb.wk += a.transpose() * dk;
  gb.wv += a.transpose() * dv;
  if (cfg.bias) {
    gb.bq.row(0) += dq.colwise().sum();
    gb.bk.row(0) += dk.colwise().sum();
    gb.bv.row(0) += dv.colwise().sum();
  }
  da += dk * bp.wk.transpose() + dv * bp.wv.transpose();
  Mat dxn = dq * bp.wq.transpose();
  dx += cfg.layer_norm ? layer_norm_backward(dxn, bp.ln1_g, c.ln1, gb.ln1_g, gb.ln1_b) : dxn;
  return dx;
}

Mat input_rows(const Mat& e_v, const EditorParams& params) {
  const EditorConfig& cfg = params.config;
  if (e_v.rows() < 1) throw Error(ErrorCode::kShapeMismatch, "E_V needs at least one row");
  require_shape(e_v, e_v.rows(), cfg.d_model, "E_V");
  if (!cfg.positional) return e_v;
  if (e_v.rows() > params.pos.rows()) {
    throw Error(ErrorCode::kShapeMismatch, "E_V has more rows than max_positions");
  }
  return e_v + params.pos.topRows(e_v.rows());
}

void check_inputs(const Mat& e_v, const Mat& e_act, const EditorParams& params) {
  if (e_act.rows() < 1) throw Error(ErrorCode::kShapeMismatch, "E_act needs at least one row");
  require_shape(e_act, e_act.rows(), params.config.d_model, "E_act");
  if (!e_v.allFinite() || !e_act.allFinite()) {
    throw Error(ErrorCode::kNonFinite, "non-finite editor input");
  }
  if (params.blocks.empty()) throw Error(ErrorCode::kShapeMismatch, "editor needs L >= 1 blocks");
}

Mat zeros(Eigen::Index r, Eigen::Index c) { return Mat::Zero(r, c); }

}  // namespace

// ------------------------------------------------------------------- config

void EditorConfig::validate() const {
  if (d_model < 1 || heads < 1 || layers < 1) {
    throw Error(ErrorCode::kConfig, "editor needs d_model, heads and layers >= 1");
  }
  if (head_dim == 0 && d_model % heads != 0) {
    throw Error(ErrorCode::kConfig, "d_model must be divisible by heads when head_dim is unset");
  }
  if (dh() < 1 || ff() < 1) throw Error(ErrorCode::kConfig, "head_dim and d_ff must be >= 1");
  if (positional && max_positions < 1) throw Error(ErrorCode::kConfig, "max_positions must be >= 1");
  if (!(ln_eps > 0)) throw Error(ErrorCode::kConfig, "ln_eps must be positive");
}

nlohmann::json EditorConfig::to_json() const {
  return {{"d_model", d_model},   {"heads", heads},           {"head_dim", head_dim},
          {"d_ff", d_ff},         {"layers", layers},         {"layer_norm", layer_norm},
          {"bias", bias},         {"positional", positional}, {"max_positions", max_positions},
          {"ln_eps", ln_eps}};
}

EditorConfig EditorConfig::from_json(const nlohmann::json& j) {
  EditorConfig c;
  try {
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.layers = j.value("layers", c.layers);
    c.layer_norm = j.value("layer_norm", c.layer_norm);
    c.bias = j.value("bias", c.bias);
    c.positional = j.value("positional", c.positional);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.ln_eps = j.value("ln_eps", c.ln_eps);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("editor config: ") + e.what());
  }
  c.validate();
  return c;
}

// ------------------------------------------------------------------- params

std::vector<std::pair<std::string, Mat*>> EditorParams::tensors() {
  std::vector<std::pair<std::string, Mat*>> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    BlockParams& b = blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    for (auto [n, m] : {std::pair{"w_q", &b.wq}, {"w_k", &b.wk}, {"w_v", &b.wv}, {"w_o", &b.wo},
                        {"w_1", &b.w1}, {"w_2", &b.w2}}) {
      out.emplace_back(p + n, m);
    }
    if (config.bias) {
      for (auto [n, m] : {std::pair{"b_q", &b.bq}, {"b_k", &b.bk}, {"b_v", &b.bv},
                          {"b_o", &b.bo}, {"b_1", &b.b1}, {"b_2", &b.b2}}) {
        out.emplace_back(p + n, m);
      }
    }
    if (config.layer_norm) {
      for (auto [n, m] : {std::pair{"ln1_g", &b.ln1_g}, {"ln1_b", &b.ln1_b},
                          {"ln2_g", &b.ln2_g}, {"ln2_b", &b.ln2_b}}) {
        out.emplace_back(p + n, m);
      }
    }
  }
  if (config.positional) out.emplace_back("pos", &pos);
  return out;
}

std::vector<std::pair<std::string, const Mat*>> EditorParams::tensors() const {
  std::vector<std::pair<std::string, const Mat*>> out;
  for (auto& [name, m] : const_cast<EditorParams*>(this)->tensors()) out.emplace_back(name, m);
  return out;
}

void EditorParams::validate() const {
  config.validate();
  const Eigen::Index d = config.d_model;
  const Eigen::Index hd = static_cast<Eigen::Index>(config.heads) * config.dh();
  const Eigen::Index ff = config.ff();
  if (static_cast<int>(blocks.size()) != config.layers) {
    throw Error(ErrorCode::kShapeMismatch, "block count differs from config.layers");
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockParams& b = blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    require_shape(b.wq, d, hd, p + "w_q");
    require_shape(b.wk, d, hd, p + "w_k");
    require_shape(b.wv, d, hd, p + "w_v");
    require_shape(b.wo, hd, d, p + "w_o");
    require_shape(b.w1, d, ff, p + "w_1");
    require_shape(b.w2, ff, d, p + "w_2");
    require_shape(b.bq, 1, hd, p + "b_q");
    require_shape(b.bk, 1, hd, p + "b_k");
    require_shape(b.bv, 1, hd, p + "b_v");
    require_shape(b.bo, 1, d, p + "b_o");
    require_shape(b.b1, 1, ff, p + "b_1");
    require_shape(b.b2, 1, d, p + "b_2");
    for (const Mat* ln : {&b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b}) require_shape(*ln, 1, d, p + "ln");
  }
  if (config.positional) require_shape(pos, config.max_positions, d, "pos");
  for (const auto& [name, m] : tensors()) {
    if (!m->allFinite()) throw Error(ErrorCode::kNonFinite, "parameter " + name + " is not finite");
  }
}

EditorParams init_params(const EditorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto uniform = [&](Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
  };
  const Eigen::Index d = cfg.d_model;
  const Eigen::Index hd = static_cast<Eigen::Index>(cfg.heads) * cfg.dh();
  const Eigen::Index ff = cfg.ff();

  EditorParams p;
  p.config = cfg;
  for (int l = 0; l < cfg.layers; ++l) {
    BlockParams b;
    b.wq = uniform(d, hd);
    b.wk = uniform(d, hd);
    b.wv = uniform(d, hd);
    b.wo = zeros(hd, d);
    b.w1 = uniform(d, ff);
    b.w2 = zeros(ff, d);
    b.bq = zeros(1, hd);
    b.bk = zeros(1, hd);
    b.bv = zeros(1, hd);
    b.bo = zeros(1, d);
    b.b1 = zeros(1, ff);
    b.b2 = zeros(1, d);
    b.ln1_g = Mat::Ones(1, d);
    b.ln1_b = zeros(1, d);
    b.ln2_g = Mat::Ones(1, d);
    b.ln2_b = zeros(1, d);
    p.blocks.push_back(std::move(b));
  }
  p.pos = zeros(cfg.positional ? cfg.max_positions : 0, d);
  return p;
}

EditorParams zeros_like(const EditorParams& p) {
  EditorParams z = p;
  for (auto& b : z.blocks) {
    for (Mat* m : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2, &b.bq, &b.bk, &b.bv, &b.bo, &b.b1,
                   &b.b2, &b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b}) {
      m->setZero();
    }
  }
  z.pos.setZero();
  return z;
}

// ------------------------------------------------------------------ forward

Mat adaptive_pool(const Mat& e_raw, std::size_t m) {
  const auto n = static_cast<std::size_t>(e_raw.rows());
  if (n < 1 || e_raw.cols() < 1) throw Error(ErrorCode::kShapeMismatch, "adaptive_pool needs N, D >= 1");
  if (m < 1) throw Error(ErrorCode::kInvalidArgument, "adaptive_pool needs M >= 1");
  Mat out(static_cast<Eigen::Index>(m), e_raw.cols());
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t begin = i * n / m;
    const std::size_t end = ((i + 1) * n + m - 1) / m;
    const auto len = static_cast<Eigen::Index>(end - begin);
    out.row(static_cast<Eigen::Index>(i)) =
        e_raw.middleRows(static_cast<Eigen::Index>(begin), len).colwise().sum() /
        static_cast<double>(len);
  }
  return out;
}

Mat editor_block(const Mat& e_v, const Mat& e_act, const BlockParams& block,
                 const EditorConfig& cfg, int block_index) {
  return block_forward(e_v, e_act, block, cfg, block_index, nullptr);
}

Mat editor_forward(const Mat& e_v, const Mat& e_act, const EditorParams& params) {
  check_inputs(e_v, e_act, params);
  Mat x = input_rows(e_v, params);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    x = block_forward(x, e_act, params.blocks[l], params.config, static_cast<int>(l), nullptr);
  }
  return x;
}

double l1_loss(const Mat& pred, const Mat& target) {
  require_shape(target, pred.rows(), pred.cols(), "l1_loss target");
  if (pred.size() == 0) throw Error(ErrorCode::kShapeMismatch, "l1_loss on empty matrices");
  return (pred - target).cwiseAbs().sum() / static_cast<double>(pred.size());
}

Gradients backward(const Mat& e_v, const Mat& e_act, const EditorParams& params,
                   const Mat& target) {
  check_inputs(e_v, e_act, params);
  const std::size_t layers = params.blocks.size();
  std::vector<BlockCache> caches(layers);
  Mat x = input_rows(e_v, params);
  for (std::size_t l = 0; l < layers; ++l) {
    x = block_forward(x, e_act, params.blocks[l], params.config, static_cast<int>(l), &caches[l]);
  }
  Gradients g;
  g.loss = l1_loss(x, target);
  g.params = zeros_like(params);
  g.e_act = zeros(e_act.rows(), e_act.cols());

  const double inv = 1.0 / static_cast<double>(x.size());
  Mat dx = (x - target).unaryExpr([inv](double r) { return r > 0 ? inv : (r < 0 ? -inv : 0.0); });
  for (std::size_t l = layers; l-- > 0;) {
    dx = block_backward(dx, e_act, params.blocks[l], params.config, caches[l], g.params.blocks[l],
                        g.e_act);
    check_finite(dx, static_cast<int>(l), "backward");
  }
  if (params.config.positional) g.params.pos.topRows(dx.rows()) += dx;
  g.e_v = std::move(dx);
  return g;
}

// ----------------------------------------------------------- diff map / ROI

nlohmann::json DiffMap::to_json() const {
  nlohmann::json j{{"distances", distances}, {"grid", nullptr}};
  if (grid) j["grid"] = {grid->first, grid->second};
  return j;
}

std::string DiffMap::to_pgm() const {
  const auto [h, w] = grid.value_or(std::pair<std::size_t, std::size_t>{1, distances.size()});
  const double mx = distances.empty() ? 0.0 : *std::max_element(distances.begin(), distances.end());
  std::ostringstream out;
  out << "P5\n" << w << " " << h << "\n255\n";
  for (const double d : distances) {
    const double v = mx > 0 ? std::round(255.0 * d / mx) : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return out.str();
}

DiffMap diff_map(const Mat& e_in, const Mat& e_out,
                 std::optional<std::pair<std::size_t, std::size_t>> grid) {
  require_shape(e_out, e_in.rows(), e_in.cols(), "diff_map");
  if (grid && grid->first * grid->second != static_cast<std::size_t>(e_in.rows())) {
    throw Error(ErrorCode::kShapeMismatch, "diff_map grid does not cover every token");
  }
  DiffMap d;
  d.grid = grid;
  d.distances.reserve(static_cast<std::size_t>(e_in.rows()));
  for (Eigen::Index i = 0; i < e_in.rows(); ++i) d.distances.push_back((e_in.row(i) - e_out.row(i)).norm());
  return d;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::kEmptyInput, "quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "quantile q must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<std::size_t> roi(const DiffMap& d, double q) {
  if (!(q > 0.0 && q < 1.0)) throw Error(ErrorCode::kInvalidArgument, "roi quantile must lie in (0, 1)");
  std::vector<std::size_t> out;
  if (std::all_of(d.distances.begin(), d.distances.end(), [](double x) { return x == 0.0; })) return out;
  const double threshold = quantile(d.distances, q);
  for (std::size_t i = 0; i < d.distances.size(); ++i) {
    if (d.distances[i] >= threshold) out.push_back(i);
  }
  return out;
}

// --------------------------------------------------------------- checkpoint

void save_checkpoint(const EditorParams& p, const std::filesystem::path& path) {
  p.validate();
  std::ofstream bin(path, std::ios::binary | std::ios::trunc);
  if (!bin) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, m] : p.tensors()) {
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(m->data()[i]);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      char buf[8];
      for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      bin.write(buf, 8);
    }
    tensors.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}, {"offset", offset}});
    offset += static_cast<std::size_t>(m->size()) * 8;
  }
  if (!bin.flush()) throw Error(ErrorCode::kIo, "short write to " + path.string());
  nlohmann::json sidecar{{"format", "float64-le"},
                         {"layout", "row-major"},
                         {"config", p.config.to_json()},
                         {"bytes", offset},
                         {"tensors", std::move(tensors)}};
  std::ofstream side(path.string() + ".json", std::ios::trunc);
  side << sidecar.dump(2) << "\n";
  if (!side) throw Error(ErrorCode::kIo, "cannot write " + path.string() + ".json");
}

EditorParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream side(path.string() + ".json");
  if (!side) throw Error(ErrorCode::kIo, "missing sidecar " + path.string() + ".json");
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptRecord, std::string("checkpoint sidecar: ") + e.what());
  }
  EditorParams p = init_params(EditorConfig::from_json(meta.at("config")));
  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (bytes.size() != meta.at("bytes").get<std::size_t>()) {
    throw Error(ErrorCode::kCorruptRecord, "checkpoint size does not match its sidecar");
  }
  auto expected = p.tensors();
  const auto& listed = meta.at("tensors");
  if (listed.size() != expected.size()) {
    throw Error(ErrorCode::kShapeMismatch, "checkpoint tensor count does not match config");
  }
  for (std::size_t t = 0; t < expected.size(); ++t) {
    auto& [name, m] = expected[t];
    const auto& entry = listed.at(t);
    if (entry.at("name").get<std::string>() != name) {
      throw Error(ErrorCode::kShapeMismatch, "checkpoint tensor order differs at " + name);
    }
    require_shape(*m, entry.at("shape").at(0).get<Eigen::Index>(),
                  entry.at("shape").at(1).get<Eigen::Index>(), name);
    std::size_t off = entry.at("offset").get<std::size_t>();
    if (off + static_cast<std::size_t>(m->size()) * 8 > bytes.size()) {
      throw Error(ErrorCode::kCorruptRecord, "checkpoint tensor " + name + " out of range");
    }
    for (Eigen::Index i = 0; i < m->size(); ++i, off += 8) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[off + b])) << (8 * b);
      }
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      m->data()[i] = std::bit_cast<double>(bits);
    }
  }
  p.validate();
  return p;
}

Mat matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty() || !j.at(0).is_array()) {
    throw Error(ErrorCode::kShapeMismatch, "matrix JSON must be a non-empty array of rows");
  }
  const std::size_t cols = j.at(0).size();
  Mat m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (j.at(r).size() != cols) throw Error(ErrorCode::kShapeMismatch, "ragged matrix JSON");
    for (std::size_t c = 0; c < cols; ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j.at(r).at(c).get<double>();
    }
  }
  if (!m.allFinite()) throw Error(ErrorCode::kNonFinite, "matrix JSON holds non-finite values");
  return m;
}

nlohmann::json matrix_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows.push_back(std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols()));
  }
  return rows;
}

}  // namespace sketchpipe::kernel
