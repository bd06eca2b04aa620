#include "genatt/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>

namespace genatt {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key `" + key + "`: not an integer: " + v);
  }
}

double parse_dbl(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key `" + key + "`: not a number: " + v);
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key `" + key + "`: not an unsigned integer: " + v);
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key `" + key + "`: not a boolean: " + v);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void ExperimentConfig::apply(const std::string& key, const std::string& value) {
  if (key == "mode") {
    mode_from_string(value);  // validates
    mode = value;
  } else if (key == "d") {
    d = parse_int(key, value);
  } else if (key == "n") {
    n = parse_int(key, value);
  } else if (key == "layers") {
    layers = parse_int(key, value);
  } else if (key == "heads") {
    heads = parse_int(key, value);
  } else if (key == "d_h") {
    d_h = parse_int(key, value);
  } else if (key == "t_steps") {
    t_steps = parse_int(key, value);
  } else if (key == "beta_start") {
    beta_start = parse_dbl(key, value);
  } else if (key == "beta_end") {
    beta_end = parse_dbl(key, value);
  } else if (key == "gamma") {
    gamma = parse_dbl(key, value);
  } else if (key == "dropout") {
    dropout = parse_dbl(key, value);
  } else if (key == "lr") {
    lr = parse_dbl(key, value);
  } else if (key == "batch") {
    batch = parse_int(key, value);
  } else if (key == "max_epochs") {
    max_epochs = parse_int(key, value);
  } else if (key == "patience") {
    patience = parse_int(key, value);
  } else if (key == "eval_avg") {
    eval_avg = parse_int(key, value);
  } else if (key == "seed") {
    seed = parse_u64(key, value);
  } else if (key == "interactions") {
    interactions = value;
  } else if (key == "categories") {
    categories = value;
  } else if (key == "data_dir") {
    data_dir = value;
  } else if (key == "out_dir") {
    out_dir = value;
  } else if (key == "min_interactions") {
    min_interactions = parse_int(key, value);
  } else if (key == "synthetic") {
    synthetic = parse_bool(key, value);
  } else if (key == "users") {
    users = parse_int(key, value);
  } else if (key == "items") {
    items = parse_int(key, value);
  } else if (key == "cats") {
    cats = parse_int(key, value);
  } else {
    throw ConfigError("unknown config key: " + key);
  }
}

void ExperimentConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected key = value, got: " + t);
    }
    apply(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

std::string ExperimentConfig::serialize() const {
  std::map<std::string, std::string> kv = {
      {"mode", mode},
      {"d", std::to_string(d)},
      {"n", std::to_string(n)},
      {"layers", std::to_string(layers)},
      {"heads", std::to_string(heads)},
      {"d_h", std::to_string(d_h)},
      {"t_steps", std::to_string(t_steps)},
      {"beta_start", fmt_double(beta_start)},
      {"beta_end", fmt_double(beta_end)},
      {"gamma", fmt_double(gamma)},
      {"dropout", fmt_double(dropout)},
      {"lr", fmt_double(lr)},
      {"batch", std::to_string(batch)},
      {"max_epochs", std::to_string(max_epochs)},
      {"patience", std::to_string(patience)},
      {"eval_avg", std::to_string(eval_avg)},
      {"seed", std::to_string(seed)},
      {"interactions", interactions},
      {"categories", categories},
      {"data_dir", data_dir},
      {"out_dir", out_dir},
      {"min_interactions", std::to_string(min_interactions)},
      {"synthetic", synthetic ? "true" : "false"},
      {"users", std::to_string(users)},
      {"items", std::to_string(items)},
      {"cats", std::to_string(cats)},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

void ExperimentConfig::write_resolved(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write resolved config: " + path);
  out << serialize();
}

ModelConfig ExperimentConfig::model_config(int num_items) const {
  ModelConfig c;
  c.d = d;
  c.n = n;
  c.layers = layers;
  c.heads = heads;
  c.d_h = d_h;
  c.T = t_steps;
  c.beta_start = beta_start;
  c.beta_end = beta_end;
  c.gamma = gamma;
  c.dropout = dropout;
  c.mode = mode_from_string(mode);
  c.seed = seed;
  c.num_items = num_items;
  c.resolve();
  return c;
}

TrainOptions ExperimentConfig::train_options() const {
  TrainOptions t;
  t.lr = lr;
  t.batch = batch;
  t.max_epochs = max_epochs;
  t.patience = patience;
  t.eval_avg = eval_avg;
  return t;
}

}  // namespace genatt
