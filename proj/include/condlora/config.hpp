#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "condlora/adapters.hpp"
#include "condlora/model.hpp"
#include "condlora/task.hpp"
#include "condlora/trainer.hpp"

namespace condlora {

enum class TaskKind { teacher, parity };

inline std::string to_string(TaskKind k) { return k == TaskKind::teacher ? "teacher" : "parity"; }

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "teacher") return TaskKind::teacher;
  if (s == "parity") return TaskKind::parity;
  throw ConfigError("unknown task '" + s + "' (expected teacher|parity)");
}

struct Seeds {
  std::uint64_t model = 0;
  std::uint64_t adapter = 1;
  std::uint64_t data = 2;
  friend bool operator==(const Seeds&, const Seeds&) = default;
};

/// Everything one experiment needs. Text form is `key = value` lines with
/// dotted keys and `#` comments.
struct ExperimentConfig {
  ModelConfig model;
  Method method = Method::lora;
  int rank = 4;
  double alpha = 0.0;  // <= 0 means alpha = rank
  std::vector<Module> modules{Module::query, Module::value};
  std::vector<int> layers;  // empty means every layer
  std::size_t batch_size = 16;
  double learning_rate = 5e-3;
  std::int64_t max_steps = 2000;
  std::size_t eval_batches = 4;
  TaskKind task = TaskKind::teacher;
  TeacherOptions teacher;
  std::string output_dir = "out";
  Seeds seeds;

  AdapterSpec adapter_spec() const {
    AdapterSpec s;
    s.method = method;
    s.rank = rank;
    s.alpha = alpha > 0.0 ? alpha : static_cast<double>(rank);
    s.modules = modules;
    if (layers.empty()) s.with_all_layers(model.n_layers);
    else s.layers = layers;
    s.normalize();
    return s;
  }

  ModelConfig model_config() const {
    ModelConfig c = model;
    c.seed = seeds.model;
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.max_steps = max_steps;
    t.eval_batches = eval_batches;
    t.seed = seeds.data;
    return t;
  }

  void validate() const {
    model_config().validate();
    adapter_spec().validate(model_config());
    train_config().validate();
    if (task == TaskKind::teacher && (teacher.rank < 1 || teacher.rank > model.d_model))
      throw ConfigError("task.teacher_rank must be in 1..d_model");
    if (teacher.seq_len < 1 || teacher.seq_len > static_cast<std::size_t>(model.max_len))
      throw ConfigError("task.seq_len must be in 1..max_len");
  }

  void set(const std::string& key, const std::string& value) {
    auto list = [](const std::string& v) {
      std::vector<std::string> parts;
      std::stringstream ss(v);
      std::string p;
      while (std::getline(ss, p, ',')) {
        const auto b = p.find_first_not_of(' ');
        const auto e = p.find_last_not_of(' ');
        if (b != std::string::npos) parts.push_back(p.substr(b, e - b + 1));
      }
      return parts;
    };
    try {
      if (key == "model.n_layers") model.n_layers = std::stoi(value);
      else if (key == "model.d_model") model.d_model = std::stoi(value);
      else if (key == "model.n_heads") model.n_heads = std::stoi(value);
      else if (key == "model.d_ff") model.d_ff = std::stoi(value);
      else if (key == "model.vocab_size") model.vocab_size = std::stoi(value);
      else if (key == "model.max_len") model.max_len = std::stoi(value);
      else if (key == "model.n_outputs") model.n_outputs = std::stoi(value);
      else if (key == "adapter.method") method = parse_method(value);
      else if (key == "adapter.rank") rank = std::stoi(value);
      else if (key == "adapter.alpha") alpha = parse_double(value);
      else if (key == "adapter.modules") {
        modules.clear();
        for (const auto& p : list(value)) modules.push_back(parse_module(p));
      } else if (key == "adapter.layers") {
        layers.clear();
        if (value != "all")
          for (const auto& p : list(value)) layers.push_back(std::stoi(p));
      } else if (key == "train.batch_size") batch_size = std::stoul(value);
      else if (key == "train.learning_rate") learning_rate = parse_double(value);
      else if (key == "train.max_steps") max_steps = std::stoll(value);
      else if (key == "train.eval_batches") eval_batches = std::stoul(value);
      else if (key == "task.kind") task = parse_task_kind(value);
      else if (key == "task.teacher_rank") teacher.rank = std::stoi(value);
      else if (key == "task.teacher_kind") teacher.kind = parse_teacher_kind(value);
      else if (key == "task.delta_scale") teacher.delta_scale = parse_double(value);
      else if (key == "task.seq_len") teacher.seq_len = std::stoul(value);
      else if (key == "output_dir") output_dir = value;
      else if (key == "seeds.model") seeds.model = std::stoull(value);
      else if (key == "seeds.adapter") seeds.adapter = std::stoull(value);
      else if (key == "seeds.data") seeds.data = std::stoull(value);
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const ConfigError*>(&e)) throw;
      throw ConfigError("bad value for '" + key + "': '" + value + "'");
    } catch (const ParseError&) {
      throw ConfigError("bad value for '" + key + "': '" + value + "'");
    }
  }

  static ExperimentConfig parse(std::istream& is) {
    ExperimentConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      auto trim = [](std::string s) {
        const auto f = s.find_first_not_of(" \t\r");
        const auto l = s.find_last_not_of(" \t\r");
        return f == std::string::npos ? std::string{} : s.substr(f, l - f + 1);
      };
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    return parse(is);
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "model.n_layers = " << model.n_layers << '\n'
       << "model.d_model = " << model.d_model << '\n'
       << "model.n_heads = " << model.n_heads << '\n'
       << "model.d_ff = " << model.d_ff << '\n'
       << "model.vocab_size = " << model.vocab_size << '\n'
       << "model.max_len = " << model.max_len << '\n'
       << "model.n_outputs = " << model.n_outputs << '\n'
       << "adapter.method = " << to_string(method) << '\n'
       << "adapter.rank = " << rank << '\n'
       << "adapter.alpha = " << format_double(alpha) << '\n'
       << "adapter.modules = ";
    for (std::size_t i = 0; i < modules.size(); ++i) os << (i ? "," : "") << to_string(modules[i]);
    os << "\nadapter.layers = ";
    if (layers.empty()) os << "all";
    for (std::size_t i = 0; i < layers.size(); ++i) os << (i ? "," : "") << layers[i];
    os << "\ntrain.batch_size = " << batch_size << '\n'
       << "train.learning_rate = " << format_double(learning_rate) << '\n'
       << "train.max_steps = " << max_steps << '\n'
       << "train.eval_batches = " << eval_batches << '\n'
       << "task.kind = " << to_string(task) << '\n'
       << "task.teacher_rank = " << teacher.rank << '\n'
       << "task.teacher_kind = " << to_string(teacher.kind) << '\n'
       << "task.delta_scale = " << format_double(teacher.delta_scale) << '\n'
       << "task.seq_len = " << teacher.seq_len << '\n'
       << "output_dir = " << output_dir << '\n'
       << "seeds.model = " << seeds.model << '\n'
       << "seeds.adapter = " << seeds.adapter << '\n'
       << "seeds.data = " << seeds.data << '\n';
    return os.str();
  }

  bool operator==(const ExperimentConfig& o) const { return serialize() == o.serialize(); }
};

/// Task for `kind`, seeded from the data seed.
inline std::unique_ptr<Task> build_task(TaskKind kind, const ExperimentConfig& cfg,
                                        const BaseWeights& base, std::uint64_t seed) {
  if (kind == TaskKind::teacher) return std::make_unique<TeacherTask>(base, cfg.teacher, seed);
  return std::make_unique<ParityTask>(base.config, seed, cfg.teacher.seq_len);
}

} // namespace condlora
