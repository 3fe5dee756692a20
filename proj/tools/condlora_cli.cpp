// condlora: command-line driver for the adapter workbench.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 numeric error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "condlora/analysis.hpp"
#include "condlora/config.hpp"
#include "condlora/trainer.hpp"

namespace fs = std::filesystem;
using namespace condlora;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed_model, seed_adapter, seed_data;
  std::string method;
  std::string out;
  std::vector<std::string> overrides;
  bool pseudoinverse = false;
  bool paper_dims = false;
  std::optional<std::int64_t> max_steps;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "Config file (key = value lines)");
  cmd->add_option("--seed-model", o.seed_model, "Base-model seed");
  cmd->add_option("--seed-adapter", o.seed_adapter, "Adapter initialization seed");
  cmd->add_option("--seed-data", o.seed_data, "Task data seed");
  cmd->add_option("--method", o.method, "lora | condlora")->check(CLI::IsMember({"lora", "condlora"}));
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--set", o.overrides, "Config override key=value (repeatable)");
}

ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed_model) c.seeds.model = *o.seed_model;
  if (o.seed_adapter) c.seeds.adapter = *o.seed_adapter;
  if (o.seed_data) c.seeds.data = *o.seed_data;
  if (!o.method.empty()) c.method = parse_method(o.method);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.max_steps) c.max_steps = *o.max_steps;
  c.validate();
  return c;
}

void write_text(const fs::path& p, const auto& writer) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  writer(os);
}

MatrixBundle read_bundle_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw UsageError("cannot open checkpoint " + p.string());
  return read_bundle(is);
}

int cmd_count_params(const CommonOptions& o) {
  ExperimentConfig c = resolve(o);
  AdapterSpec spec = c.adapter_spec();
  Dims dims = dims_of(c.model_config());
  if (o.paper_dims) {
    spec.rank = 8;
    spec.alpha = 8;
    spec.modules = {Module::query, Module::value};
    spec.with_all_layers(12);
    dims = {768, 768};
  }
  spec.method = Method::lora;
  const auto lora = count_trainable(spec, dims);
  spec.method = Method::condlora;
  const auto cond = count_trainable(spec, dims);
  std::printf("d1=%zu d2=%zu r=%d k=%zu N=%zu\n", dims.d1, dims.d2, spec.rank, spec.k(),
              spec.layers.size());
  std::printf("%-10s %lld\n", "lora", static_cast<long long>(lora));
  std::printf("%-10s %lld\n", "condlora", static_cast<long long>(cond));
  if (lora % cond == 0) std::printf("%-10s %lld\n", "ratio", static_cast<long long>(lora / cond));
  else std::printf("%-10s %.6g\n", "ratio", static_cast<double>(lora) / static_cast<double>(cond));
  return 0;
}

int cmd_train(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  const BaseWeights base = build_model(c.model_config());
  const auto task = build_task(c.task, c, base, c.seeds.data);
  const Adapter init = init_adapter(c.adapter_spec(), dims_of(base.config), c.seeds.adapter);
  const fs::path out = c.output_dir;
  fs::create_directories(out);

  TrainConfig tc = c.train_config();
  tc.checkpoint = out / "adapter.ckpt";
  const auto [trained, rep] = train_run(base, init, *task, tc);

  write_text(out / "report.csv", [&](std::ostream& os) { rep.write_csv(os); });
  write_text(out / "model.ckpt", [&](std::ostream& os) { write_bundle(os, to_bundle(base)); });
  write_text(out / "config.txt", [&](std::ostream& os) { os << c.serialize(); });
  write_text(out / "run.txt", [&](std::ostream& os) {
    os << "method=" << to_string(c.method) << " task=" << task->name()
       << " steps=" << rep.losses.size() << " initial_loss=" << format_double(rep.initial_loss)
       << " final_loss=" << format_double(rep.final_loss)
       << " examples_per_second=" << format_double(rep.examples_per_second)
       << " params=" << rep.trainable_params << " seconds=" << format_double(rep.wall_clock_seconds)
       << " seed_model=" << c.seeds.model << " seed_adapter=" << c.seeds.adapter
       << " seed_data=" << c.seeds.data << '\n';
  });
  std::printf("method=%s steps=%zu initial_loss=%.6g final_loss=%.6g ratio=%.4g params=%lld "
              "examples_per_second=%.1f\n",
              to_string(c.method).c_str(), rep.losses.size(), rep.initial_loss, rep.final_loss,
              rep.initial_loss > 0 ? rep.final_loss / rep.initial_loss : 0.0,
              static_cast<long long>(rep.trainable_params), rep.examples_per_second);
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

struct AnalyzeOptions {
  std::vector<std::string> checkpoints;
  std::string model;
  std::string side = "left";
  std::size_t baseline_seeds = 10;
  std::uint64_t baseline_seed = 12345;
};

void print_grid_line(const std::string& what, const SimilarityGrid& g) {
  std::printf("%-28s avg_offdiag=%.6f side=%s i=%zu j=%zu%s\n", what.c_str(), g.average_offdiagonal,
              to_string(g.side).c_str(), g.i, g.j, g.pinv ? " pinv=true" : "");
}

int cmd_analyze(const CommonOptions& o, const AnalyzeOptions& a) {
  if (a.checkpoints.empty() && !o.paper_dims)
    throw UsageError("analyze: give adapter checkpoints and/or --paper-dims");
  const fs::path out = o.out.empty() ? fs::path("analysis") : fs::path(o.out);
  fs::create_directories(out);
  const Side side = parse_side(a.side);

  if (o.paper_dims) {
    // 12 independent 768 x 8 Gaussian matrices, left side, i = j = 8, averaged over seeds.
    double total = 0.0;
    SimilarityGrid first;
    for (std::size_t s = 0; s < a.baseline_seeds; ++s) {
      SimilarityGrid g = random_baseline_grid(768, 8, 12, 8, 8, Side::left, derive_seed(a.baseline_seed, s));
      total += g.average_offdiagonal;
      if (s == 0) first = std::move(g);
    }
    write_text(out / "random_baseline_768x8.csv", [&](std::ostream& os) { first.write_csv(os); });
    std::printf("%-28s avg_offdiag=%.6f (mean over %zu seeds, 12 x 768x8, i=j=8, left)\n",
                "random baseline (768x8)", total / static_cast<double>(a.baseline_seeds),
                a.baseline_seeds);
  }
  if (a.checkpoints.empty()) return 0;

  const fs::path model_path =
      a.model.empty() ? fs::path(a.checkpoints.front()).parent_path() / "model.ckpt" : fs::path(a.model);
  const BaseWeights base = from_bundle(read_bundle_file(model_path));
  std::vector<Adapter> adapters;
  for (const auto& p : a.checkpoints) {
    adapters.push_back(adapter_from_bundle(read_bundle_file(p), dims_of(base.config)));
    adapters.back().spec.validate(base.config);
  }

  for (std::size_t k = 0; k < adapters.size(); ++k) {
    const Adapter& ad = adapters[k];
    const fs::path dir = adapters.size() == 1
                             ? out
                             : out / ("ckpt" + std::to_string(k + 1) + "_" + to_string(ad.spec.method));
    fs::create_directories(dir);
    const auto r = static_cast<std::size_t>(ad.spec.rank);
    for (Module m : ad.spec.modules) {
      for (Factor f : {Factor::a, Factor::b}) {
        const SimilarityGrid g = conversion_grid(base, ad, m, f, side, r, r, o.pseudoinverse);
        const std::string name =
            std::string("conv_") + (f == Factor::a ? "A_" : "B_") + to_string(m);
        write_text(dir / (name + ".csv"), [&](std::ostream& os) { g.write_csv(os); });
        print_grid_line(to_string(ad.spec.method) + " " + name, g);
      }
    }
    if (ad.spec.layers.size() >= 2) {
      double total = 0.0;
      SimilarityGrid first;
      for (std::size_t s = 0; s < a.baseline_seeds; ++s) {
        SimilarityGrid g = random_baseline_grid(base.config.d_model, r, ad.spec.layers.size(), r, r,
                                                side, derive_seed(a.baseline_seed, 100 + s));
        total += g.average_offdiagonal;
        if (s == 0) first = std::move(g);
      }
      write_text(dir / "random_baseline.csv", [&](std::ostream& os) { first.write_csv(os); });
      std::printf("%-28s avg_offdiag=%.6f (mean over %zu seeds, %zu x %dx%zu)\n",
                  "random baseline (matched)", total / static_cast<double>(a.baseline_seeds),
                  a.baseline_seeds, ad.spec.layers.size(), base.config.d_model, r);
    }
  }

  if (adapters.size() >= 2) {
    const auto rows = compare_adapters(adapters[0], adapters[1], base);
    write_text(out / "comparison.csv", [&](std::ostream& os) { write_comparison_csv(os, rows); });
    std::printf("%-8s %-5s %-10s %-10s %-10s\n", "module", "layer", "phi_A", "phi_B", "phi_dW");
    for (const auto& row : rows)
      std::printf("%-8s %-5d %-10.6f %-10.6f %-10.6f\n", to_string(row.module).c_str(), row.layer,
                  row.phi_a, row.phi_b, row.phi_dw);
  }
  return 0;
}

int cmd_bench(const CommonOptions& o, double seconds) {
  if (seconds < 1.0) throw UsageError("bench: --seconds must be >= 1");
  const ExperimentConfig c = resolve(o);
  const BaseWeights base = build_model(c.model_config());
  const auto task = build_task(c.task, c, base, c.seeds.data);
  std::printf("%-10s %-20s %s\n", "method", "examples_per_second", "params");
  for (Method m : {Method::lora, Method::condlora}) {
    ExperimentConfig mc = c;
    mc.method = m;
    const Adapter init = init_adapter(mc.adapter_spec(), dims_of(base.config), c.seeds.adapter);
    const double eps = bench_throughput(base, init, *task, c.train_config(), seconds);
    std::printf("%-10s %-20.3f %lld\n", to_string(m).c_str(), eps,
                static_cast<long long>(count_trainable(init.spec, dims_of(base.config))));
  }
  return 0;
}

struct GradcheckOptions {
  double perturb = 0.0;
  std::size_t trials = 1;
};

/// Small model used by gradcheck unless the config overrides it.
ExperimentConfig gradcheck_defaults() {
  ExperimentConfig c;
  c.model.n_layers = 2;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.d_ff = 32;
  c.model.vocab_size = 16;
  c.model.max_len = 8;
  c.model.n_outputs = 4;
  c.teacher.seq_len = 6;
  return c;
}

int cmd_gradcheck(CommonOptions o, const GradcheckOptions& g) {
  ExperimentConfig c = gradcheck_defaults();
  if (!o.config_path.empty()) c = ExperimentConfig::load(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed_model) c.seeds.model = *o.seed_model;
  if (o.seed_adapter) c.seeds.adapter = *o.seed_adapter;
  if (o.seed_data) c.seeds.data = *o.seed_data;
  c.validate();
  if (c.model.d_model > 16 || c.model.n_layers > 2)
    throw UsageError("gradcheck: model too large (requires d_model <= 16 and n_layers <= 2)");

  std::vector<Method> methods{Method::lora, Method::condlora};
  if (!o.method.empty()) methods = {parse_method(o.method)};
  bool ok = true;
  for (Method m : methods) {
    double worst = 0.0;
    std::string worst_name;
    for (std::size_t trial = 0; trial < g.trials; ++trial) {
      ModelConfig mc = c.model_config();
      mc.seed = derive_seed(c.seeds.model, trial);
      const BaseWeights base = build_model(mc);
      ExperimentConfig ec = c;
      ec.method = m;
      Adapter ad = init_adapter(ec.adapter_spec(), dims_of(mc), derive_seed(c.seeds.adapter, trial));
      randomize(ad, derive_seed(c.seeds.adapter, 1000 + trial), 0.3);
      const auto task = build_task(c.task, c, base, derive_seed(c.seeds.data, trial));
      const Batch batch = task->train_batch(0, 4);
      for (const auto& chk : gradcheck(base, ad, batch, task->loss_kind(), 1e-5, g.perturb)) {
        if (chk.max_relative_error > worst) {
          worst = chk.max_relative_error;
          worst_name = chk.name;
        }
        if (g.trials == 1)
          std::printf("%-9s %-22s max_rel_err=%.3e %s\n", to_string(m).c_str(), chk.name.c_str(),
                      chk.max_relative_error, chk.max_relative_error < 1e-4 ? "PASS" : "FAIL");
      }
    }
    const bool pass = worst < 1e-4;
    ok = ok && pass;
    std::printf("%-9s trials=%zu worst=%.3e (%s) %s\n", to_string(m).c_str(), g.trials, worst,
                worst_name.c_str(), pass ? "PASS" : "FAIL");
  }
  std::printf("gradcheck: %s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : kExitNumeric;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"LoRA / CondLoRA adapter workbench"};
  app.require_subcommand(1);
  CommonOptions common;

  auto* count = app.add_subcommand("count-params", "Trainable-parameter counts for both methods");
  add_common(count, common);
  count->add_flag("--paper-dims", common.paper_dims, "Use d=768, r=8, k=2, N=12");

  auto* train = app.add_subcommand("train", "Train one adapter on the configured task");
  add_common(train, common);
  train->add_option("--max-steps", common.max_steps, "Override train.max_steps");

  AnalyzeOptions analyze_opts;
  auto* analyze = app.add_subcommand("analyze", "Conversion-matrix grids, baselines, comparisons");
  add_common(analyze, common);
  analyze->add_option("checkpoints", analyze_opts.checkpoints, "Adapter checkpoints");
  analyze->add_option("--model", analyze_opts.model, "Model checkpoint (default: next to the first adapter)");
  analyze->add_option("--side", analyze_opts.side, "Unitary side for grids")->check(CLI::IsMember({"left", "right"}));
  analyze->add_option("--baseline-seeds", analyze_opts.baseline_seeds, "Random-baseline repetitions")->check(CLI::PositiveNumber);
  analyze->add_flag("--pseudoinverse", common.pseudoinverse, "Fall back to the pseudoinverse for singular W0");
  analyze->add_flag("--paper-dims", common.paper_dims, "Also emit the 768x8 random baseline");

  double bench_seconds = 2.0;
  auto* bench = app.add_subcommand("bench", "Training throughput for both methods");
  add_common(bench, common);
  bench->add_option("--seconds", bench_seconds, "Measurement window per method (>= 1)");

  GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "Analytic vs central-difference gradients");
  add_common(grad, common);
  grad->add_option("--trials", gc.trials, "Seeded trials per method")->check(CLI::PositiveNumber);
  grad->add_option("--perturb", gc.perturb, "Corrupt the analytic gradient (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*count) return cmd_count_params(common);
    if (*train) return cmd_train(common);
    if (*analyze) return cmd_analyze(common, analyze_opts);
    if (*bench) return cmd_bench(common, bench_seconds);
    if (*grad) return cmd_gradcheck(common, gc);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return kExitUsage;
  } catch (const SingularMatrixError& e) {
    std::fprintf(stderr, "numeric error: %s (use --pseudoinverse to fall back)\n", e.what());
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
