#pragma once

#include <string>

#include "genatt/model.hpp"
#include "genatt/train.hpp"

namespace genatt {

// Flat key=value experiment configuration. Files use one `key = value` pair
// per line with `#` comments; unknown keys are rejected. Command-line flags
// override file values, and every command writes the fully resolved config
// next to its outputs.
struct ExperimentConfig {
  // model
  std::string mode = "vae";
  int d = 64;
  int n = 50;
  int layers = 1;
  int heads = 1;
  int d_h = 0;      // 0 -> 2 * d
  int t_steps = 0;  // 0 -> n
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double gamma = 1.0;
  double dropout = 0.4;
  // training
  double lr = 1e-3;
  int batch = 128;
  int max_epochs = 500;
  int patience = 20;
  int eval_avg = 1;
  std::uint64_t seed = 1;
  // data
  std::string interactions;
  std::string categories;
  std::string data_dir;
  std::string out_dir;
  int min_interactions = 10;
  // synthetic corpus (prepare)
  bool synthetic = false;
  int users = 500;
  int items = 200;
  int cats = 10;

  void apply(const std::string& key, const std::string& value);
  void load_file(const std::string& path);
  std::string serialize() const;
  void write_resolved(const std::string& path) const;

  ModelConfig model_config(int num_items) const;
  TrainOptions train_options() const;
};

}  // namespace genatt
