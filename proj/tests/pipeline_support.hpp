#pragma once
// A pipeline configuration small enough to run end to end in a few seconds.

#include <fstream>
#include <string>

#include "gasp/binary_io.hpp"
#include "gasp/digest.hpp"
#include "gasp/pipeline.hpp"
#include "support.hpp"

namespace test {

inline gasp::RunConfig tiny_run_config(std::uint64_t seed = 42, int scenes = 2) {
  gasp::RunConfig c;
  c.suite = small_suite(seed, scenes);
  c.sampler.seed = seed;
  c.sampler.n_occ_pos = 300;
  c.sampler.n_occ_neg = 300;
  c.sampler.n_feat = 100;
  c.sampler.n_ego_pos = 20;
  c.sampler.n_ego_neg = 20;
  c.pca.dim = 8;
  c.pca.max_samples = 2000;
  c.field.channels = 4;
  c.field.hidden = 8;
  c.field.feature_dim = 8;
  c.train.seed = seed;
  c.train.total_steps = 20;
  c.train.warmup_steps = 5;
  c.train.batch_occ = 64;
  c.train.batch_feat = 16;
  c.train.batch_ego = 8;
  c.eval.grid.step = 0.4;
  c.eval.heldout_scenes = 1;
  // Parse back so derived fields are checked the way a config file is.
  return gasp::run_config_from_json(gasp::run_config_to_json(c));
}

inline void write_config(const gasp::RunConfig& c, const std::string& path) {
  std::ofstream(path) << gasp::run_config_to_json(c).dump(2) << "\n";
}

inline std::string file_digest(const std::string& path) { return gasp::sha256_hex(gasp::read_file(path)); }

}  // namespace test
