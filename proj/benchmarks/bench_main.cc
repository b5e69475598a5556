// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "sketchpipe/agentic_loop.h"
#include "sketchpipe/editor_kernel.h"
#include "sketchpipe/hash.h"
#include "sketchpipe/trainset.h"

using namespace sketchpipe;

namespace {

kernel::Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n;
  kernel::Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

void BM_ParseSolverOutput(benchmark::State& state) {
  std::string text(static_cast<std::size_t>(state.range(0)), 'r');
  text += "\n<tool_call>label the third bar with its value</tool_call>\n";
  for (auto _ : state) benchmark::DoNotOptimize(parse_solver_output(text));
  state.SetBytesProcessed(state.iterations() * static_cast<int64_t>(text.size()));
}
BENCHMARK(BM_ParseSolverOutput)->Arg(64)->Arg(4096);

void BM_Sha256(benchmark::State& state) {
  const std::string data(static_cast<std::size_t>(state.range(0)), 'x');
  for (auto _ : state) benchmark::DoNotOptimize(sha256_hex(data));
  state.SetBytesProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Sha256)->Arg(1 << 10)->Arg(1 << 20);

void BM_AdaptivePool(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const auto e = random_mat(rng, state.range(0), 64);
  for (auto _ : state) benchmark::DoNotOptimize(kernel::adaptive_pool(e));
}
BENCHMARK(BM_AdaptivePool)->Arg(17)->Arg(100)->Arg(1000);

void BM_EditorForward(benchmark::State& state) {
  std::mt19937_64 rng(2);
  kernel::EditorConfig cfg;
  cfg.d_model = 64;
  cfg.heads = 8;
  auto p = kernel::init_params(cfg);
  for (auto& [_, m] : p.tensors()) {
    if (m->isZero()) *m = random_mat(rng, m->rows(), m->cols()) * 0.05;
  }
  const auto ev = random_mat(rng, state.range(0), 64);
  const auto ea = random_mat(rng, 32, 64);
  for (auto _ : state) benchmark::DoNotOptimize(kernel::editor_forward(ev, ea, p));
}
BENCHMARK(BM_EditorForward)->Arg(49)->Arg(256);

void BM_EditorBackward(benchmark::State& state) {
  std::mt19937_64 rng(3);
  kernel::EditorConfig cfg;
  cfg.d_model = 32;
  cfg.heads = 4;
  const auto p = kernel::init_params(cfg);
  const auto ev = random_mat(rng, state.range(0), 32);
  const auto ea = random_mat(rng, 32, 32);
  const auto target = random_mat(rng, state.range(0), 32);
  for (auto _ : state) benchmark::DoNotOptimize(kernel::backward(ev, ea, p, target));
}
BENCHMARK(BM_EditorBackward)->Arg(49);

void BM_BuildMask(benchmark::State& state) {
  std::vector<TokenRole> roles{TokenRole::kUserText};
  for (int i = 0; i < state.range(0); ++i) {
    roles.push_back(TokenRole::kVisionStart);
    roles.insert(roles.end(), 64, TokenRole::kImageEmbedding);
    roles.push_back(TokenRole::kVisionEnd);
    roles.insert(roles.end(), 40, TokenRole::kAssistantText);
    roles.push_back(TokenRole::kToolCallOpen);
    roles.insert(roles.end(), 8, TokenRole::kAssistantText);
    roles.push_back(TokenRole::kToolCallClose);
  }
  for (auto _ : state) benchmark::DoNotOptimize(build_mask(std::span<const TokenRole>(roles)));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(roles.size()));
}
BENCHMARK(BM_BuildMask)->Arg(1)->Arg(5);

}  // namespace
BENCHMARK_MAIN();
