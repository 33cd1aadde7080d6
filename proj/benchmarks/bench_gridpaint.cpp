#include <benchmark/benchmark.h>

#include <numeric>

#include "gridpaint/metrics.hpp"
#include "gridpaint/pretrain.hpp"
#include "gridpaint/samplers.hpp"

using namespace gridpaint;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor::parameter(std::move(shape), std::move(v));
}

struct Fixture {
  Dataset ds;
  Codebook cb;
  std::vector<Example> examples;
  ModelConfig mc;
  Fixture() {
    DatasetConfig dc;
    dc.train_records = 512;
    dc.eval_records = 16;
    ds = make_dataset(1, dc);
    std::vector<float> pts;
    for (const auto& r : ds.train) pts.insert(pts.end(), r.features.values.begin(), r.features.values.end());
    cb = kmeans_fit(pts, dc.features.dim, {32, 20, 1});
    examples = make_examples(ds.train, cb, dc.max_text_len);
    mc.text_vocab = TextVocab::size();
    mc.visual_vocab = cb.k;
    mc.grid_n = dc.scene.grid_n;
    mc.max_text_len = dc.max_text_len;
    mc.feature_dim = dc.features.dim;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

static void BM_MatmulForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  auto a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto loss = sum(matmul(a, b));
    tape.backward(loss);
    benchmark::DoNotOptimize(a.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(3 * 2 * n * n * n));
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(64)->Arg(256);

static void BM_AttentionForward(benchmark::State& state) {
  const std::size_t batch = 64, seq = 32, d = 64, heads = 4;
  Rng rng(2);
  auto q = random_tensor({batch * seq, d}, rng), k = random_tensor({batch * seq, d}, rng),
       v = random_tensor({batch * seq, d}, rng);
  std::vector<std::uint8_t> pad(batch * seq, 1);
  for (auto _ : state) benchmark::DoNotOptimize(attention(q, k, v, batch, heads, pad).data().data());
}
BENCHMARK(BM_AttentionForward);

static void BM_TrainingStep(benchmark::State& state) {
  const auto& f = fixture();
  Model model(f.mc, 1);
  TrainConfig tc;
  tc.batch_size = 64;
  Trainer trainer(model, tc, 1 << 20);
  Rng rng(3);
  std::vector<std::size_t> idx(static_cast<std::size_t>(tc.batch_size));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (auto _ : state) {
    const auto batch = prepare_batch(f.examples, idx, Task{TaskKind::image_mask, false}, tc, f.mc, rng);
    benchmark::DoNotOptimize(trainer.step(batch, nullptr).total);
  }
}
BENCHMARK(BM_TrainingStep)->Unit(benchmark::kMillisecond);

static void BM_SampleGrid(benchmark::State& state) {
  const auto& f = fixture();
  const Model model(f.mc, 1);
  SamplerSchedule s;
  s.strategy = static_cast<Strategy>(state.range(0));
  std::vector<TokenSequence> captions;
  for (std::size_t i = 0; i < 32; ++i) captions.push_back(f.ds.eval[i % f.ds.eval.size()].caption);
  for (auto _ : state) benchmark::DoNotOptimize(sample_grids(model, captions, s).size());
  state.SetLabel(std::string(strategy_name(s.strategy)));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(captions.size()));
}
BENCHMARK(BM_SampleGrid)
    ->Arg(static_cast<int>(Strategy::mask_predict))
    ->Arg(static_cast<int>(Strategy::tlbr))
    ->Arg(static_cast<int>(Strategy::random))
    ->Unit(benchmark::kMillisecond);

static void BM_KMeansFit(benchmark::State& state) {
  const auto& f = fixture();
  std::vector<float> pts;
  for (const auto& r : f.ds.train) pts.insert(pts.end(), r.features.values.begin(), r.features.values.end());
  for (auto _ : state) benchmark::DoNotOptimize(kmeans_fit(pts, 16, {32, 20, 1}).inertia());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(pts.size() / 16));
}
BENCHMARK(BM_KMeansFit)->Unit(benchmark::kMillisecond);

static void BM_Fid(benchmark::State& state) {
  const int dim = static_cast<int>(state.range(0));
  Rng rng(4);
  std::vector<float> a(500 * static_cast<std::size_t>(dim)), b(a.size());
  for (auto& x : a) x = static_cast<float>(rng.normal());
  for (auto& x : b) x = static_cast<float>(1.2 * rng.normal() + 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(fid(a, b, dim));
}
BENCHMARK(BM_Fid)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
