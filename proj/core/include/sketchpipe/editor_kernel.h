// SPDX-License-Identifier: Apache-2.0
//
// Float64 reference of the embedding editor: adaptive pooling of the action
// embedding, a stack of cross-attention blocks whose queries are the visual
// tokens, the l1 objective with hand-written backward pass, and
// difference-map / ROI analysis.
//
// Per block (pre-LN placement when layer_norm is on):
//   Q = LN1(X) W_Q,  K = A W_K,  V = A W_V        A = pooled action, M x D
//   Y = X + concat_h softmax(Q_h K_h^T / sqrt(Dh)) V_h  W_O
//   Z = Y + GELU(LN2(Y) W_1) W_2
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace sketchpipe::kernel {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::size_t kDefaultPoolLength = 32;

struct EditorConfig {
  int d_model = 64;
  int heads = 8;
  int head_dim = 0;  // 0: d_model / heads
  int d_ff = 0;      // 0: 4 * d_model
  int layers = 2;
  bool layer_norm = true;
  bool bias = true;
  bool positional = false;  // learned offsets added to E_V rows
  int max_positions = 1024;
  double ln_eps = 1e-5;

  int dh() const { return head_dim > 0 ? head_dim : d_model / heads; }
  int ff() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  void validate() const;
  nlohmann::json to_json() const;
  static EditorConfig from_json(const nlohmann::json& j);
};

struct BlockParams {
  Mat wq, wk, wv;  // D x (heads*Dh)
  Mat wo;          // (heads*Dh) x D
  Mat w1;          // D x D_ff
  Mat w2;          // D_ff x D
  Mat bq, bk, bv, bo, b1, b2;  // 1 x n
  Mat ln1_g, ln1_b, ln2_g, ln2_b;  // 1 x D
};

struct EditorParams {
  EditorConfig config;
  std::vector<BlockParams> blocks;
  Mat pos;  // max_positions x D, used when config.positional

  /// Every trainable tensor in checkpoint order. Biases are listed only when
  /// config.bias, layer-norm tensors only when config.layer_norm.
  std::vector<std::pair<std::string, Mat*>> tensors();
  std::vector<std::pair<std::string, const Mat*>> tensors() const;

  /// Throws Error(kShapeMismatch) or Error(kNonFinite).
  void validate() const;
};

/// W_O, W_2, biases and positional offsets zero; layer-norm gain one;
/// remaining weights uniform in [-1/sqrt(D), 1/sqrt(D)] from `seed`.
EditorParams init_params(const EditorConfig& cfg, std::uint64_t seed = 0x5eed);

/// Same structure and shapes, all zeros (the gradient layout).
EditorParams zeros_like(const EditorParams& p);

/// Row i is the mean of input rows [floor(iN/M), ceil((i+1)N/M)).
Mat adaptive_pool(const Mat& e_raw, std::size_t m = kDefaultPoolLength);

/// One block; `block_index` only labels non-finite errors.
Mat editor_block(const Mat& e_v, const Mat& e_act, const BlockParams& block,
                 const EditorConfig& cfg, int block_index = 0);

Mat editor_forward(const Mat& e_v, const Mat& e_act, const EditorParams& params);

/// Mean absolute difference over all entries.
double l1_loss(const Mat& pred, const Mat& target);

struct Gradients {
  EditorParams params;  // same layout as the parameters
  Mat e_act;
  Mat e_v;
  double loss = 0.0;
};

/// Gradients of l1_loss(editor_forward(e_v, e_act, params), target); the
/// subgradient of |x| at 0 is taken as 0.
Gradients backward(const Mat& e_v, const Mat& e_act, const EditorParams& params,
                   const Mat& target);

struct DiffMap {
  std::vector<double> distances;
  std::optional<std::pair<std::size_t, std::size_t>> grid;  // (h, w), h*w == size

  nlohmann::json to_json() const;
  /// Binary PGM (P5) scaled to the maximum distance; 1 x K without a grid.
  std::string to_pgm() const;
};

/// Euclidean distance between corresponding rows.
DiffMap diff_map(const Mat& e_in, const Mat& e_out,
                 std::optional<std::pair<std::size_t, std::size_t>> grid = std::nullopt);

/// Linear-interpolation quantile of the sorted distances.
double quantile(std::vector<double> values, double q);

/// Tokens whose distance is at least the q-quantile. Empty iff all zero.
std::vector<std::size_t> roi(const DiffMap& d, double q);

/// Writes `path` (float64 little-endian, tensors in order) and
/// `path`.json describing config, names, shapes and offsets.
void save_checkpoint(const EditorParams& p, const std::filesystem::path& path);
EditorParams load_checkpoint(const std::filesystem::path& path);

/// Reads a matrix stored as JSON rows ([[...], ...]).
Mat matrix_from_json(const nlohmann::json& j);
nlohmann::json matrix_to_json(const Mat& m);

}  // namespace sketchpipe::kernel
