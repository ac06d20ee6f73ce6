#include <benchmark/benchmark.h>

#include "mitdet/pipeline.hpp"

using namespace mitdet;

namespace {

const SyntheticDataset& dataset() {
  static const SyntheticDataset ds = [] {
    SyntheticConfig c;
    c.image_count = 1;
    return generate_synthetic(c);
  }();
  return ds;
}

void BM_Deconvolve(benchmark::State& state) {
  const OdImage od = rgb_to_od(dataset().images[0].image);
  const StainMatrix m = StainMatrix::default_he();
  for (auto _ : state) benchmark::DoNotOptimize(deconvolve(od, m));
  state.SetItemsProcessed(state.iterations() * od.height() * od.width());
}
BENCHMARK(BM_Deconvolve);

void BM_ExtractCandidates(benchmark::State& state) {
  const ScalarMap h = hematoxylin_channel(dataset().images[0].image, StainMatrix::default_he());
  const LocalizeConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(extract_candidates(h, cfg));
}
BENCHMARK(BM_ExtractCandidates);

void BM_KMeans(benchmark::State& state) {
  Rng rng(1);
  FeatureMatrix f(state.range(0), DefaultEmbedder::kDim);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(kmeans(f, 10, 3));
}
BENCHMARK(BM_KMeans)->Arg(500)->Arg(2000);

void BM_ClassifierForward(benchmark::State& state) {
  MitosisClassifier model;
  model.init(1);
  const auto& img = dataset().images[0].image;
  std::vector<RgbImage> patches;
  for (int i = 0; i < state.range(0); ++i) patches.push_back(crop_reflect(img, 40 + 5 * i, 200, 80));
  for (auto _ : state) benchmark::DoNotOptimize(model.predict_proba(patches));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ClassifierForward)->Arg(16)->Arg(64);

}  // namespace
BENCHMARK_MAIN();
