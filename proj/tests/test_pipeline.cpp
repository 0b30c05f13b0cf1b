#include <doctest.h>

#include <filesystem>

#include "mbd/config.hpp"
#include "mbd/errors.hpp"
#include "mbd/pipeline.hpp"
#include "test_util.hpp"

using namespace mbd;
using namespace mbd::pipeline;

namespace {

// smallest config that exercises the whole chain
const char* kTinyConfig = R"(
[phantom]
dims = 32 32 32
seed = 11
[protocol]
bvalues = 0 1000 4000
sigma_frac_wm_b0 = 0.07
n_train_directions = 1
[lesions]
shape_pool = 8
test_shapes = 0 3
train_shapes = 4 7
count_range = 1 2
size_range = 4 5
seed = 23
[training]
patch_size = 16
batch_size = 16
max_epochs = 1
patience = 1
n_val_slices = 2
seed = 100
[evaluation]
n_paramsets = 2
seed = 900
)";

} // namespace

TEST_CASE("experiment config parsing and validation") {
  ExperimentConfig cfg = ExperimentConfig::from_kv(KeyValueConfig::parse_string(kTinyConfig));
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.resolved_target_bvalue() == 4000.0);
  CHECK(cfg.resolved_stride() == 16);

  SUBCASE("overlapping train/test shape pools are rejected with a field path") {
    ExperimentConfig bad = cfg;
    bad.train_shape_range = {2, 7};
    try {
      bad.validate();
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("lesions.train_shapes") != std::string::npos);
    }
  }
  SUBCASE("bad b-values are rejected") {
    ExperimentConfig bad = cfg;
    bad.bvalues = {0, 1000};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
  SUBCASE("target must be among the b-values") {
    ExperimentConfig bad = cfg;
    bad.target_bvalue = 300;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
  SUBCASE("non-NN methods are not trainable") {
    ExperimentConfig bad = cfg;
    bad.methods.push_back(denoise::Method::MPPCA);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_CASE("config hash tracks semantic changes only") {
  const ExperimentConfig a = ExperimentConfig::from_kv(KeyValueConfig::parse_string(kTinyConfig));
  ExperimentConfig b = a;
  CHECK(a.to_kv().hash() == b.to_kv().hash());
  b.threads = 4; // execution detail, not experiment identity
  CHECK(a.to_kv().hash() == b.to_kv().hash());
  b.n_paramsets = 3;
  CHECK(a.to_kv().hash() != b.to_kv().hash());
}

TEST_CASE("tiny pipeline run emits the full artifact tree") {
  TempDir tmp("pipeline");
  ExperimentConfig cfg = ExperimentConfig::from_kv(KeyValueConfig::parse_string(kTinyConfig));
  cfg.threads = 2;
  cfg.training.threads = 2;

  run_pipeline(cfg, tmp.str("exp"));

  namespace fs = std::filesystem;
  for (const char* rel :
       {"phantom/wm.f32raw", "phantom/tensor.vhdr", "phantom/params.cfg", "sim/directions.tsv",
        "sim/dir0/clean.f32raw", "sim/dir0/rep0.f32raw", "sim/dir0/rep1.f32raw",
        "sim/dir0/lesions.lesions.tsv", "checkpoints/MBD.net", "checkpoints/N2N.net",
        "checkpoints/CNNe.net", "checkpoints/MBD_curves.tsv", "checkpoints/training_summary.tsv",
        "eval/metrics.tsv", "eval/hist_mean.tsv", "eval/hist_abs.tsv", "eval/attribution.tsv",
        "eval/error_map_MBD.png", "eval/error_diff_MBD_vs_ALGe.png", "eval/conspicuity_MBD.png",
        "manifest.txt"}) {
    INFO(rel);
    CHECK(fs::exists(fs::path(tmp.str("exp")) / rel));
  }

  // manifest lists every artifact
  const std::string manifest = read_text_file(tmp.str("exp") + "/manifest.txt");
  std::size_t files_on_disk = 0;
  for (const auto& entry : fs::recursive_directory_iterator(tmp.str("exp")))
    if (entry.is_regular_file() && entry.path().filename() != "manifest.txt") {
      ++files_on_disk;
      const std::string rel = fs::relative(entry.path(), tmp.str("exp")).generic_string();
      INFO(rel);
      CHECK(manifest.find(rel) != std::string::npos);
    }
  CHECK(files_on_disk > 10);
}
