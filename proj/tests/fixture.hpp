#pragma once

// The synthetic fixture shared by the protocol tests and the acceptance
// suite: 4 Gaussian classes in 16 dimensions, 5 nodes at alpha = 1, a public
// set under a domain shift of length 0.5, S = 200 and gamma = 1.

#include "fedkd/config.hpp"

namespace fedkd::testing {

inline ExperimentConfig fixture_config(std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.synthetic.classes = 4;
  cfg.synthetic.dim = 16;
  cfg.synthetic.train_per_class = 500;
  cfg.synthetic.test_per_class = 1000;
  cfg.synthetic.public_size = 5000;
  cfg.synthetic.separation = 0.6;
  cfg.synthetic.public_shift = 0.5;
  cfg.nodes = 5;
  cfg.alpha = 1.0;
  cfg.seed = seed;
  cfg.ensemble.scale = 200;
  cfg.ensemble.gamma = 1.0;
  cfg.validate();
  return cfg;
}

/// Well-separated variant on which every local model can fit its shard.
inline ExperimentConfig separable_config(std::uint64_t seed) {
  ExperimentConfig cfg = fixture_config(seed);
  cfg.synthetic.separation = 3.0;
  return cfg;
}

struct Prepared {
  FederatedData data;
  PartitionPlan plan;
};

inline Prepared prepare(const ExperimentConfig& cfg) {
  Prepared p{make_federated_data(cfg), {}};
  p.plan = make_partition(cfg, p.data);
  return p;
}

}  // namespace fedkd::testing
