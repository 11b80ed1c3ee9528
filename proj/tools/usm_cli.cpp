// usm: train, sample, profile and inspect U-shaped Mamba flow models.
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "usm/checkpoint.hpp"
#include "usm/gradcheck.hpp"
#include "usm/harness.hpp"
#include "usm/image.hpp"
#include "usm/log.hpp"
#include "usm/metrics.hpp"
#include "usm/profiler.hpp"
#include "usm/scan_paths.hpp"

namespace fs = std::filesystem;
using namespace usm;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--config", c.config, "Key-value config file (model.*, data.*, train.*)");
  cmd->add_option("--out", c.out, "Output directory");
}

KeyValue load_config(const Common& c) { return c.config.empty() ? KeyValue{} : KeyValue::load(c.config); }

std::string out_path(const Common& c, const std::string& name) {
  fs::create_directories(c.out);
  return (fs::path(c.out) / name).string();
}

void write_text(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp);
    f << text;
  }
  fs::rename(tmp, path);
}

// Samples are stored in the checkpoint container as a "samples" tensor.
void save_samples(const std::string& path, const Tensor& x, const KeyValue& meta) {
  Checkpoint ck;
  ck.config = meta;
  ck.tensors.push_back({"samples", x});
  save_checkpoint(path, ck);
}

Tensor load_samples(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  for (auto& nt : ck.tensors)
    if (nt.name == "samples") return nt.tensor;
  throw FormatError(path + " has no 'samples' tensor");
}

int run_train(const Common& c, std::int64_t steps, std::int64_t batch, double lr, const std::string& optimizer,
              bool no_timing) {
  KeyValue kv = load_config(c);
  TrainRun run;
  run.model = ModelConfig::read(kv);
  run.data = data::DatasetSpec::read(kv);
  run.train = TrainOptions::read(kv);
  if (steps >= 0) run.train.steps = steps;
  if (batch > 0) run.train.batch = batch;
  if (lr >= 0.0) run.train.lr = lr;
  if (!optimizer.empty()) run.train.optimizer = optimizer;
  run.train.timing = !no_timing;
  run.seed = c.seed;
  run.model.validate();

  const std::string metrics = out_path(c, "metrics.csv");
  std::ofstream csv(metrics + ".tmp", std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot open " + metrics);
  log::info("training " + std::to_string(run.train.steps) + " steps, batch " + std::to_string(run.train.batch) +
            ", " + run.train.optimizer + " lr " + format_double(run.train.lr));
  UsmParams params = train_model(run, &csv, [&](const flow::StepStats& st) {
    if (st.step % 100 == 0) log::info("step " + std::to_string(st.step) + " weighted loss " + format_double(st.weighted_loss));
    return true;
  });
  csv.close();
  fs::rename(metrics + ".tmp", metrics);

  KeyValue meta;
  run.data.write(meta);
  run.train.write(meta);
  meta.set("train.seed", static_cast<std::int64_t>(c.seed));
  save_checkpoint(out_path(c, "model.usmc"), make_checkpoint(params, run.model, meta));
  KeyValue full = meta;
  run.model.write(full);
  write_text(out_path(c, "config.txt"), full.to_string());
  log::info("wrote " + metrics + " and " + out_path(c, "model.usmc"));
  return kOk;
}

int run_sample(const Common& c, const std::string& checkpoint, std::int64_t n, int steps, std::int64_t label) {
  LoadedModel m = model_from_checkpoint(load_checkpoint(checkpoint));
  SeedStreams rng(c.seed);
  std::vector<std::int64_t> labels;
  if (m.config.use_text) {
    if (label < 0 || label >= m.config.num_classes) {
      for (std::int64_t i = 0; i < n; ++i) labels.push_back(rng.data.below(std::max<std::int64_t>(m.config.num_classes, 1)));
    } else {
      labels.assign(static_cast<std::size_t>(n), label);
    }
  }
  Tensor x = sample_model(m.params, m.config, n, steps, rng.sample, labels);
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("sampling produced a non-finite value");
  }
  KeyValue meta = m.meta;
  meta.set("sample.steps", steps);
  meta.set("sample.seed", static_cast<std::int64_t>(c.seed));
  save_samples(out_path(c, "samples.usmc"), x, meta);
  const std::int64_t shown = std::min<std::int64_t>(n, 64);
  Tensor head = Tensor::from({shown, x.dim(1), x.dim(2), x.dim(3)},
                             std::vector<double>(x.data().begin(), x.data().begin() + shown * x.numel() / n));
  const std::string img = out_path(c, x.dim(1) == 1 ? "samples.pgm" : "samples.ppm");
  write_image(img, montage(head));
  log::info("wrote " + out_path(c, "samples.usmc") + " and " + img);
  return kOk;
}

int run_profile(const Common& c, int reps) {
  KeyValue kv = load_config(c);
  ModelConfig cfg = ModelConfig::read(kv);
  CostReport r = flops_count(cfg);
  {
    std::ostringstream os;
    os << "name,kind,block,tokens,macs,quadratic_in_d\n";
    const char* kinds[] = {"block", "block_fixed", "down", "up", "skip", "embed"};
    for (const auto& it : r.items) {
      os << it.name << ',' << kinds[static_cast<int>(it.kind)] << ',' << it.block << ',' << it.tokens << ','
         << it.macs << ',' << (it.quadratic_in_d ? 1 : 0) << '\n';
    }
    write_text(out_path(c, "cost.csv"), os.str());
  }
  ProfileReport u = profile_run(cfg, reps, c.seed);
  u.write_csv(out_path(c, "profile.csv"));
  ModelConfig flat = cfg;
  flat.layout = Layout::kFlat;
  ProfileReport f = profile_run(flat, reps, c.seed);
  f.write_csv(out_path(c, "profile_flat.csv"));
  std::cout << std::setprecision(6);
  std::cout << "macs total " << r.total << " (flat reference " << r.flat_total << ", ratio " << r.ratio()
            << ")\n"
            << "block-cost ratio " << r.block_ratio() << "\n"
            << "skip projections " << r.skip_total << " macs\n"
            << "peak activation estimate " << r.peak_activation_estimate << " elements\n"
            << "forward ms: ushape " << u.mean_ms << " +- " << u.stddev_ms << ", flat " << f.mean_ms << " +- " << f.stddev_ms << "\n"
            << "peak live elements: ushape " << u.peak_live_elements << ", flat " << f.peak_live_elements << "\n";
  return kOk;
}

int run_gradcheck(const Common& c, std::int64_t coords) {
  KeyValue kv;
  ModelConfig d;
  d.channels = 4;
  d.height = 8;
  d.width = 8;
  d.hidden = 8;
  d.state = 4;
  d.t_freq_dim = 8;
  d.heads = 2;
  d.ctx_dim = 4;
  d.use_text = true;
  d.num_classes = 2;
  d.write(kv);
  kv.merge(load_config(c));
  ModelConfig cfg = ModelConfig::read(kv);
  GradcheckOptions opts;
  opts.coords_per_group = coords;
  GradcheckReport r = model_gradcheck(cfg, c.seed, opts);
  std::ostringstream os;
  os << "group,elements,checked,failures,worst_rel,worst_abs\n";
  for (const auto& g : r.groups) {
    os << g.name << ',' << g.elements << ',' << g.checked << ',' << g.failures << ',' << format_double(g.worst_rel) << ','
       << format_double(g.worst_abs) << '\n';
  }
  write_text(out_path(c, "gradcheck.csv"), os.str());
  std::cout << "checked " << r.checked << " coordinates in " << r.groups.size() << " groups, " << r.failures
            << " beyond tolerance: " << (r.passed ? "PASS" : "FAIL") << "\n";
  return r.passed ? kOk : kNumeric;
}

int run_scan_dump(const Common& c, int config_id, std::int64_t h, std::int64_t w) {
  std::vector<int> ids;
  if (config_id < 0) {
    for (int k = 0; k < kNumScanConfigs; ++k) ids.push_back(k);
  } else {
    ids.push_back(config_id);
  }
  for (int k : ids) {
    ScanPath p = generate_scan(k, h, w);
    std::ostringstream os;
    for (auto v : p.perm) os << v << '\n';
    const std::string path =
        out_path(c, "scan_" + std::to_string(k) + "_" + std::to_string(h) + "x" + std::to_string(w) + ".txt");
    write_text(path, os.str());
    std::cout << path << "\n";
  }
  return kOk;
}

int run_eval(const Common& c, const std::string& samples, const std::string& reference, std::int64_t n_ref) {
  Tensor gen = load_samples(samples);
  Tensor ref;
  if (!reference.empty()) {
    ref = load_samples(reference);
  } else {
    KeyValue kv = load_config(c);
    data::DatasetSpec spec = data::DatasetSpec::read(kv);
    SeedStreams rng(c.seed);
    ref = data::dataset_sample(spec, n_ref, rng.data).x;
  }
  const double d = eval_moments(gen, ref);
  nlohmann::json j = {{"eval_moments", d},
                      {"generated", gen.dim(0)},
                      {"reference", ref.dim(0)},
                      {"samples_file", samples}};
  write_text(out_path(c, "eval.json"), j.dump(2) + "\n");
  std::cout << "eval_moments " << format_double(d) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"U-shaped Mamba flow-matching toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only print warnings and errors");

  Common common;

  auto* train = app.add_subcommand("train", "Train on a synthetic dataset; writes metrics.csv and model.usmc");
  add_common(train, common);
  std::int64_t steps = -1, batch = 0;
  double lr = -1.0;
  std::string optimizer;
  bool no_timing = false;
  train->add_option("--steps", steps, "Training steps (overrides train.steps)");
  train->add_option("--batch", batch, "Batch size (overrides train.batch)");
  train->add_option("--lr", lr, "Learning rate (overrides train.lr)");
  train->add_option("--optimizer", optimizer, "adam or sgd")->check(CLI::IsMember({"adam", "sgd"}));
  train->add_flag("--no-timing", no_timing, "Write wall_ms as 0 so reruns are byte-identical");

  auto* sample = app.add_subcommand("sample", "Draw samples from a checkpoint; writes samples.usmc and a montage");
  add_common(sample, common);
  std::string checkpoint;
  std::int64_t n = 16, label = -1;
  int sample_steps = 25;
  sample->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  sample->add_option("-n,--count", n, "Number of samples")->check(CLI::PositiveNumber);
  sample->add_option("--steps", sample_steps, "Euler steps")->check(CLI::PositiveNumber);
  sample->add_option("--label", label, "Class label for text-conditioned models (default: random)");

  auto* profile = app.add_subcommand("profile", "Analytic cost report and forward timing against the flat reference");
  add_common(profile, common);
  int reps = 5;
  profile->add_option("--reps", reps, "Timed forwards per layout")->check(CLI::PositiveNumber);

  auto* gradcheck = app.add_subcommand("gradcheck", "Compare model gradients with finite differences");
  add_common(gradcheck, common);
  std::int64_t coords = 200;
  gradcheck->add_option("--coords", coords, "Coordinates per parameter group")->check(CLI::PositiveNumber);

  auto* scan_dump = app.add_subcommand("scan-dump", "Write scan permutations, one index per line");
  add_common(scan_dump, common);
  int config_id = -1;
  std::int64_t h = 16, w = 16;
  scan_dump->add_option("--id", config_id, "Scan configuration 0-7 (default: all)")->check(CLI::Range(0, 7));
  scan_dump->add_option("--height", h, "Grid height")->check(CLI::PositiveNumber);
  scan_dump->add_option("--width", w, "Grid width")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Moment distance between generated samples and a reference set");
  add_common(eval, common);
  std::string samples, reference;
  std::int64_t n_ref = 4096;
  eval->add_option("--samples", samples, "samples.usmc from the sample command")->required();
  eval->add_option("--reference", reference, "Reference samples file (default: draw from the config dataset)");
  eval->add_option("--n-ref", n_ref, "Reference draws when no file is given")->check(CLI::Range(2, 1 << 24));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  if (quiet) log::set_level(log::Level::kWarn);

  try {
    if (*train) return run_train(common, steps, batch, lr, optimizer, no_timing);
    if (*sample) return run_sample(common, checkpoint, n, sample_steps, label);
    if (*profile) return run_profile(common, reps);
    if (*gradcheck) return run_gradcheck(common, coords);
    if (*scan_dump) return run_scan_dump(common, config_id, h, w);
    if (*eval) return run_eval(common, samples, reference, n_ref);
  } catch (const NumericError& e) {
    log::error(e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    log::error(e.what());
    return kData;
  }
  return kUsage;
}
