#include "cli.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "rohydr/tensor_io.hpp"
#include "run_config.hpp"
#include "svg.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace rohydr::cli {

namespace {

// Anything the user got wrong: bad flags, files, or combinations.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string rate_label(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", rate);
  return buf;
}

std::string dims_str(const std::array<std::size_t, data::kModalities>& d) {
  return std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]);
}

std::uint64_t env_seed() {
  const char* env = std::getenv("ROHYDR_SEED");
  if (env == nullptr || *env == '\0') return 1;
  try {
    RunConfig probe;
    set_config_key(probe, "seed", env);
    return probe.train.seed;
  } catch (const ConfigError&) {
    throw UsageError(std::string("ROHYDR_SEED is not a non-negative integer: ") + env);
  }
}

// Flag, then config file, then ROHYDR_SEED, then 1.
std::uint64_t resolve_seed(const CLI::Option* flag, std::uint64_t flag_value, const RunConfig& cfg) {
  if (flag != nullptr && flag->count() > 0) return flag_value;
  if (cfg.seed_set) return cfg.train.seed;
  return env_seed();
}

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return load_run_config(path);
}

data::Dataset load_data(const std::string& dir) {
  if (dir.empty()) throw UsageError("no dataset given (--data or 'data' in the config)");
  try {
    return data::load_dataset(dir);
  } catch (const std::exception& e) {
    throw UsageError("cannot load dataset from " + dir + ": " + e.what());
  }
}

struct Protocol {
  std::string name;   // "random", "fixed" or "stored"
  std::string label;  // mr_or_set column
};

// Masks for one run, fixed for its whole duration.
data::Dataset apply_protocol(const data::Dataset& base, const RunConfig& cfg, bool rate_given,
                             Protocol& protocol) {
  if (!cfg.availability.empty()) {
    data::ModalitySet set;
    try {
      set = data::ModalitySet::parse(cfg.availability);
    } catch (const ContractViolation& e) {
      throw UsageError(std::string("--availability: ") + e.what());
    }
    if (set.empty()) throw UsageError("--availability: empty modality set");
    protocol = {"fixed", set.str()};
    return data::apply_fixed_availability(base, set);
  }
  if (!rate_given && base.masked()) {
    protocol = {"stored", rate_label(data::compute_missing_rate(base.masks))};
    return base;
  }
  if (cfg.missing_rate < 0.0 || cfg.missing_rate > data::kMaxMissingRate) {
    throw UsageError("missing rate must lie in [0, " + rate_label(data::kMaxMissingRate) + "]");
  }
  protocol = {"random", rate_label(cfg.missing_rate)};
  return data::apply_random_missing(base, cfg.missing_rate, cfg.effective_mask_seed());
}

std::string strategy_log(const RunConfig& cfg) {
  if (cfg.model.zero_impute) return "baseline (baseline_step)";
  switch (cfg.train.strategy) {
    case train::Strategy::kOne: return "one (one_stage_step)";
    case train::Strategy::kTwo: return "two (two_stage_step)";
    case train::Strategy::kThree: return "three (stage1_step, stage2_step, stage3_step)";
  }
  return "?";
}

json train_config_json(const train::TrainConfig& t) {
  return {{"epochs", t.epochs},       {"batch_size", t.batch_size}, {"lr", t.lr},
          {"lr_disc", t.lr_disc},     {"lambda_g", t.lambda_g},     {"lambda_al", t.lambda_al},
          {"lambda_c", t.lambda_c},   {"strategy", train::strategy_name(t.strategy)},
          {"seed", t.seed},           {"stride", t.stride},         {"eval_stride", t.eval_stride},
          {"eval_batch", t.eval_batch}};
}

void validate_all(const RunConfig& cfg) {
  try {
    cfg.model.validate();
    cfg.train.validate();
  } catch (const ContractViolation& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
}

// ---- gen-data ------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = cfg.out_dir;
  try {
    cfg.dataset.validate();
  } catch (const ContractViolation& e) {
    throw UsageError(std::string("invalid dataset settings: ") + e.what());
  }
  data::Dataset ds = data::generate_synthetic(cfg.dataset);
  try {
    data::save_dataset(ds, dir);
  } catch (const std::exception& e) {
    throw UsageError("cannot write dataset to " + dir.string() + ": " + e.what());
  }
  out << "wrote " << ds.n << " samples (" << ds.train.size() << " train, " << ds.val.size() << " val, "
      << ds.test.size() << " test), dims " << dims_str(ds.dims) << ", seq_len " << ds.seq_len
      << ", seed " << ds.seed << " to " << dir.string() << '\n';
  return kExitOk;
}

// ---- train -----------------------------------------------------------------------

struct TrainArgs {
  RunConfig cfg;
  bool rate_given = false;
  std::string resume;
};

int cmd_train(TrainArgs args, std::ostream& out, std::ostream& err) {
  RunConfig& cfg = args.cfg;
  if (cfg.out_dir.empty()) throw UsageError("no output directory given (--out or 'out' in the config)");
  data::Dataset base = load_data(cfg.data_dir);
  Protocol protocol;
  data::Dataset ds = apply_protocol(base, cfg, args.rate_given, protocol);
  cfg.model.dims = ds.dims;

  double prior_best = -1.0;
  std::size_t prior_best_epoch = 0;
  std::size_t epochs_done = 0;
  if (!args.resume.empty()) {
    try {
      model::ModelConfig saved = model::read_checkpoint_config(args.resume);
      if (saved.dims != ds.dims) {
        throw UsageError("checkpoint expects dims " + dims_str(saved.dims) + " but the dataset has " +
                         dims_str(ds.dims));
      }
      cfg.model = saved;
      json extra = json::parse(model::read_checkpoint_extra(args.resume));
      epochs_done = extra.value("epochs_done", std::size_t{0});
      prior_best = extra.value("best_acc2", -1.0);
      prior_best_epoch = extra.value("best_epoch", std::size_t{0});
    } catch (const FormatError& e) {
      throw UsageError(std::string("cannot resume: ") + e.what());
    } catch (const json::exception& e) {
      throw UsageError(std::string("cannot resume: bad checkpoint metadata: ") + e.what());
    }
  }
  validate_all(cfg);

  const fs::path out_dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw UsageError("cannot create " + out_dir.string() + ": " + ec.message());

  model::RoHyDR model(cfg.model, cfg.train.seed);
  train::Trainer trainer(model, cfg.train);
  if (!args.resume.empty()) {
    try {
      model::load_checkpoint(model, args.resume);
    } catch (const FormatError& e) {
      throw UsageError(std::string("cannot resume: ") + e.what());
    }
    trainer.set_epochs_done(epochs_done);
    err << "resuming after epoch " << epochs_done << " from " << args.resume << '\n';
  }
  err << "strategy: " << strategy_log(cfg) << '\n'
      << "components: " << cfg.model.components.str() << '\n'
      << "protocol: " << protocol.name << ' ' << protocol.label << ", seed " << cfg.train.seed << '\n';

  const fs::path csv_path = out_dir / "metrics.csv";
  const bool append = !args.resume.empty() && fs::exists(csv_path);
  std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw UsageError("cannot write " + csv_path.string());
  if (!append) csv << train::csv_header() << '\n';

  const json train_json = train_config_json(cfg.train);
  auto extra = [&](std::size_t done, double best_acc2, std::size_t best_epoch) {
    json e = {{"epochs_done", done},  {"best_acc2", best_acc2},   {"best_epoch", best_epoch},
              {"epoch", best_epoch},  {"protocol", protocol.name}, {"mr_or_set", protocol.label},
              {"mask_seed", cfg.effective_mask_seed()}, {"train", train_json}};
    return e.dump();
  };

  double best = prior_best;
  std::size_t best_epoch = prior_best_epoch;
  train::RunOptions options;
  options.protocol = protocol.name;
  options.mr_or_set = protocol.label;
  options.on_epoch = [&](const train::MetricsRecord& rec, bool) {
    csv << train::csv_row(rec) << '\n' << std::flush;
    err << "epoch " << rec.epoch << ": val acc2 " << rate_label(rec.metrics.acc2) << ", losses "
        << rec.loss_s1 << ' ' << rec.loss_s2 << ' ' << rec.loss_s3 << '\n';
    if (rec.metrics.acc2 > best) {
      best = rec.metrics.acc2;
      best_epoch = rec.epoch;
      model::save_checkpoint(model, out_dir / "best", extra(rec.epoch, best, best_epoch));
    }
    model::save_checkpoint(model, out_dir / "last", extra(rec.epoch, best, best_epoch));
  };

  train::RunResult result;
  try {
    result = train::run(model, ds, cfg.train, options, &trainer);
  } catch (const train::NumericFailure& e) {
    err << "numeric failure in " << e.stage() << ": " << e.what() << '\n';
    return kExitNumeric;
  }

  // The best epoch may predate a resume; the checkpoint on disk is authoritative.
  train::Metrics test = result.test;
  if (best_epoch != result.best_epoch && fs::exists(out_dir / "best")) {
    model::load_checkpoint(model, out_dir / "best");
    test = train::evaluate(model, ds, ds.test, cfg.train);
  }
  train::MetricsRecord test_row{protocol.name, protocol.label, cfg.train.seed, best_epoch, test, 0, 0, 0};
  std::ofstream test_csv(out_dir / "test.csv", std::ios::trunc);
  test_csv << train::csv_header() << '\n' << train::csv_row(test_row) << '\n';
  out << train::csv_header() << '\n' << train::csv_row(test_row) << '\n';
  err << "best epoch " << best_epoch << ", checkpoint " << (out_dir / "best").string() << '\n';
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------------

struct Cell {
  Protocol protocol;
  std::optional<double> rate;
  data::ModalitySet set;
};

std::vector<Cell> parse_protocol(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : spec.substr(colon + 1);
  std::vector<Cell> cells;
  if (kind == "random") {
    std::vector<double> parts;
    std::stringstream ss(rest);
    std::string item;
    try {
      while (std::getline(ss, item, ':')) parts.push_back(parse_double_list(item).at(0));
    } catch (const std::exception&) {
      throw UsageError("--protocol: expected random:FROM:TO:STEP, got '" + spec + "'");
    }
    if (parts.size() == 1) parts = {parts[0], parts[0], 1.0};
    if (parts.size() != 3 || parts[2] <= 0.0 || parts[1] < parts[0]) {
      throw UsageError("--protocol: expected random:FROM:TO:STEP, got '" + spec + "'");
    }
    const auto count = static_cast<std::size_t>(std::llround((parts[1] - parts[0]) / parts[2])) + 1;
    for (std::size_t i = 0; i < count; ++i) {
      // Round to the printed precision so 0.1 steps land on 0.3, not 0.30000000000000004.
      const double rate = std::round((parts[0] + parts[2] * static_cast<double>(i)) * 1e6) / 1e6;
      if (rate < 0.0 || rate > data::kMaxMissingRate + 1e-12) {
        throw UsageError("--protocol: missing rate " + rate_label(rate) + " outside [0, 0.7]");
      }
      cells.push_back({{"random", rate_label(rate)}, rate, {}});
    }
  } else if (kind == "fixed") {
    if (rest == "all" || rest.empty()) {
      for (auto s : data::ModalitySet::all_nonempty()) cells.push_back({{"fixed", s.str()}, std::nullopt, s});
    } else {
      std::stringstream ss(rest);
      std::string item;
      while (std::getline(ss, item, ';')) {
        data::ModalitySet s;
        try {
          s = data::ModalitySet::parse(item);
        } catch (const ContractViolation& e) {
          throw UsageError(std::string("--protocol: ") + e.what());
        }
        if (s.empty()) throw UsageError("--protocol: empty modality set");
        cells.push_back({{"fixed", s.str()}, std::nullopt, s});
      }
    }
  } else {
    throw UsageError("--protocol: expected random:FROM:TO:STEP or fixed:all, got '" + spec + "'");
  }
  return cells;
}

struct EvalArgs {
  std::string ckpt, data, protocol, out, split = "test";
  std::uint64_t seed = 1;
  std::size_t stride = 0;  // 0: what the run trained with
};

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  const std::vector<Cell> cells = parse_protocol(args.protocol);
  data::Dataset base = load_data(args.data);
  model::ModelConfig mc;
  json extra;
  try {
    mc = model::read_checkpoint_config(args.ckpt);
    extra = json::parse(model::read_checkpoint_extra(args.ckpt));
  } catch (const FormatError& e) {
    throw UsageError(std::string("bad checkpoint: ") + e.what());
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad checkpoint metadata: ") + e.what());
  }
  if (mc.dims != base.dims) {
    throw UsageError("checkpoint expects dims " + dims_str(mc.dims) + " but the dataset has " +
                     dims_str(base.dims));
  }
  model::RoHyDR model(mc, 0);
  try {
    model::load_checkpoint(model, args.ckpt);
  } catch (const FormatError& e) {
    throw UsageError(std::string("checkpoint does not match its manifest: ") + e.what());
  }
  train::TrainConfig tc;
  if (extra.contains("train")) {
    tc.eval_stride = extra["train"].value("eval_stride", tc.eval_stride);
    tc.eval_batch = extra["train"].value("eval_batch", tc.eval_batch);
  }
  if (args.stride > 0) tc.eval_stride = args.stride;
  tc.seed = args.seed;
  const std::size_t epoch = extra.value("epoch", std::size_t{0});

  std::ofstream file;
  std::ostream* sink = &out;
  if (!args.out.empty()) {
    file.open(args.out, std::ios::trunc);
    if (!file) throw UsageError("cannot write " + args.out);
    sink = &file;
  }
  *sink << train::csv_header() << '\n';
  for (const auto& cell : cells) {
    data::Dataset ds = cell.rate ? data::apply_random_missing(base, *cell.rate, args.seed)
                                 : data::apply_fixed_availability(base, cell.set);
    const auto& rows = args.split == "val" ? ds.val : ds.test;
    train::MetricsRecord rec{cell.protocol.name, cell.protocol.label, args.seed, epoch,
                             train::evaluate(model, ds, rows, tc), 0, 0, 0};
    *sink << train::csv_row(rec) << '\n';
    err << cell.protocol.name << ' ' << cell.protocol.label << ": acc2 " << rate_label(rec.metrics.acc2)
        << '\n';
  }
  return kExitOk;
}

// ---- sweep -----------------------------------------------------------------------

struct SweepArgs {
  RunConfig cfg;
  bool rate_given = false;
  std::string param;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
};

int cmd_sweep(const SweepArgs& args, std::ostream& out, std::ostream& err) {
  if (args.values.empty()) throw UsageError("--values: empty list");
  data::Dataset base = load_data(args.cfg.data_dir);

  struct Job {
    double value;
    std::uint64_t seed;
    train::RunResult result;
    std::string label;
    std::exception_ptr error;
  };
  std::vector<Job> jobs;
  for (double v : args.values) {
    for (std::uint64_t s : args.seeds) jobs.push_back({v, s, {}, {}, nullptr});
  }
  // Check every cell's configuration before spending time on any of them.
  for (double v : args.values) {
    RunConfig probe = args.cfg;
    set_config_key(probe, args.param, rate_label(v));
    validate_all(probe);
  }

  std::mutex log_mutex;
  auto run_job = [&](Job& job) {
    try {
      RunConfig cfg = args.cfg;
      set_config_key(cfg, args.param, rate_label(job.value));
      cfg.train.seed = job.seed;
      Protocol protocol;
      data::Dataset ds = apply_protocol(base, cfg, args.rate_given, protocol);
      cfg.model.dims = ds.dims;
      model::RoHyDR model(cfg.model, cfg.train.seed);
      train::RunOptions options;
      options.protocol = protocol.name;
      options.mr_or_set = protocol.label;
      job.result = train::run(model, ds, cfg.train, options);
      job.label = protocol.name + " " + protocol.label;
      std::lock_guard lock(log_mutex);
      err << args.param << " = " << rate_label(job.value) << ", seed " << job.seed << ": test acc2 "
          << rate_label(job.result.test.acc2) << " (best epoch " << job.result.best_epoch << ")\n";
    } catch (...) {
      job.error = std::current_exception();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(args.jobs, jobs.size()));
  if (workers == 1) {
    for (auto& job : jobs) run_job(job);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) run_job(jobs[i]);
      });
    }
  }
  for (auto& job : jobs) {
    if (job.error) std::rethrow_exception(job.error);
  }

  std::ofstream runs_csv, summary_csv;
  if (!args.cfg.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(args.cfg.out_dir, ec);
    if (ec) throw UsageError("cannot create " + args.cfg.out_dir + ": " + ec.message());
    runs_csv.open(fs::path(args.cfg.out_dir) / "runs.csv", std::ios::trunc);
    summary_csv.open(fs::path(args.cfg.out_dir) / "summary.csv", std::ios::trunc);
    runs_csv << args.param << ",seed,best_epoch,acc2,acc7,f1\n";
    for (const auto& job : jobs) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%.6f,%llu,%zu,%.6f,%.6f,%.6f", job.value,
                    static_cast<unsigned long long>(job.seed), job.result.best_epoch, job.result.test.acc2,
                    job.result.test.acc7, job.result.test.f1);
      runs_csv << buf << '\n';
    }
  }

  const std::string header = args.param + ",runs,acc2,acc7,f1";
  out << header << '\n';
  if (summary_csv.is_open()) summary_csv << header << '\n';
  for (double v : args.values) {
    train::Metrics mean;
    std::size_t n = 0;
    for (const auto& job : jobs) {
      if (job.value != v) continue;
      mean.acc2 += job.result.test.acc2;
      mean.acc7 += job.result.test.acc7;
      mean.f1 += job.result.test.f1;
      ++n;
    }
    const double k = static_cast<double>(n);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%.6f,%zu,%.6f,%.6f,%.6f", v, n, mean.acc2 / k, mean.acc7 / k, mean.f1 / k);
    out << buf << '\n';
    if (summary_csv.is_open()) summary_csv << buf << '\n';
  }
  return kExitOk;
}

// ---- plot ------------------------------------------------------------------------

struct Run {
  std::string id;  // "protocol mr_or_set seed S"
  std::vector<train::MetricsRecord> rows;
};

std::vector<Run> read_runs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::vector<Run> runs;
  std::map<std::string, std::size_t> index;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != train::csv_header()) {
        throw UsageError(path.string() + ": row 1: expected header '" + train::csv_header() + "'");
      }
      continue;
    }
    train::MetricsRecord rec;
    try {
      rec = train::parse_csv_row(line);
    } catch (const std::invalid_argument& e) {
      throw UsageError(path.string() + ": row " + std::to_string(line_no) + ": malformed (" + e.what() + ")");
    }
    const std::string id = rec.protocol + " " + rec.mr_or_set + " seed " + std::to_string(rec.seed);
    auto [it, added] = index.emplace(id, runs.size());
    if (added) runs.push_back({id, {}});
    runs[it->second].rows.push_back(rec);
  }
  if (line_no == 0) throw UsageError(path.string() + ": empty file");
  if (runs.empty()) throw UsageError(path.string() + ": no data rows");
  return runs;
}

int cmd_plot(const std::vector<std::string>& csvs, const std::string& out_dir, std::ostream& out) {
  // Parse everything first so a bad file leaves no partial output behind.
  std::vector<std::pair<fs::path, std::vector<Run>>> inputs;
  for (const auto& csv : csvs) inputs.emplace_back(csv, read_runs(csv));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw UsageError("cannot create " + out_dir + ": " + ec.message());

  std::map<std::string, int> used;
  for (const auto& [path, runs] : inputs) {
    std::string stem = path.stem().string();
    if (int n = used[stem]++; n > 0) stem += "-" + std::to_string(n + 1);

    ChartSpec acc{"Validation accuracy: " + stem, "epoch", "ACC2", {}};
    ChartSpec loss{"Stage losses: " + stem, "epoch", "loss", {}};
    for (std::size_t r = 0; r < runs.size(); ++r) {
      Series a{runs[r].id, {}, r, false};
      std::array<Series, 3> stages;
      for (std::size_t s = 0; s < 3; ++s) {
        stages[s] = {runs[r].id + " L_S" + std::to_string(s + 1), {}, r * 3 + s, s > 0};
      }
      for (const auto& rec : runs[r].rows) {
        const double x = static_cast<double>(rec.epoch);
        a.points.emplace_back(x, rec.metrics.acc2);
        stages[0].points.emplace_back(x, rec.loss_s1);
        stages[1].points.emplace_back(x, rec.loss_s2);
        stages[2].points.emplace_back(x, rec.loss_s3);
      }
      acc.series.push_back(std::move(a));
      for (auto& s : stages) loss.series.push_back(std::move(s));
    }
    for (auto [chart, suffix] : {std::pair{&acc, "-accuracy.svg"}, std::pair{&loss, "-loss.svg"}}) {
      const fs::path target = fs::path(out_dir) / (stem + suffix);
      std::ofstream f(target, std::ios::trunc);
      if (!f) throw UsageError("cannot write " + target.string());
      f << line_chart(*chart);
      out << target.string() << '\n';
    }
  }
  return kExitOk;
}

std::string active_help(const CLI::App& app) {
  for (const CLI::App* sub : app.get_subcommands()) return sub->help();
  return app.help();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust multimodal sentiment models with recovery of missing modalities", "rohydr"};
  app.require_subcommand(1);

  // Shared flag storage; only the chosen subcommand's entries are filled.
  std::string config_path, data_dir, out_dir, strategy, availability, resume, param, values, seeds_text;
  std::uint64_t seed = 1;
  double rate = 0.0;
  std::size_t n = 2000, seq_len = 0, latent = 0, jobs = 1;
  std::string dims;
  bool no_hddm = false, no_ur = false, no_disc = false, no_mr = false, baseline = false;
  std::size_t epochs = 0;
  EvalArgs eval_args;
  std::vector<std::string> run_csvs;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multimodal dataset");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  auto* gen_seed = gen->add_option("--seed", seed, "Generator seed (default: ROHYDR_SEED or 1)");
  gen->add_option("--dims", dims, "Feature widths for audio,text,vision");
  gen->add_option("--seq-len", seq_len, "Sequence length");
  gen->add_option("--latent", latent, "Latent factors");
  gen->add_option("--config", config_path, "Config file for the remaining dataset keys");

  auto* tr = app.add_subcommand("train", "Train one model and keep the best validation checkpoint");
  tr->add_option("--config", config_path, "Config file (key = value lines)");
  tr->add_option("--data", data_dir, "Dataset directory");
  tr->add_option("--out", out_dir, "Output directory");
  tr->add_option("--strategy", strategy, "one | two | three");
  auto* tr_rate = tr->add_option("--mr", rate, "Random missing rate in [0, 0.7]");
  auto* tr_avail = tr->add_option("--availability", availability, "Fixed available set, e.g. a,t");
  tr_rate->excludes(tr_avail);
  tr->add_flag("--no-hddm", no_hddm, "Disable the diffusion generator");
  tr->add_flag("--no-ur", no_ur, "Disable the unimodal reconstructor");
  tr->add_flag("--no-disc", no_disc, "Disable the discriminator");
  tr->add_flag("--no-mr", no_mr, "Disable the multimodal reconstructor");
  tr->add_flag("--baseline", baseline, "Zero-impute baseline instead of recovery");
  auto* tr_seed = tr->add_option("--seed", seed, "Run seed (default: config, ROHYDR_SEED or 1)");
  auto* tr_epochs = tr->add_option("--epochs", epochs, "Total epochs");
  tr->add_option("--resume", resume, "Continue from a 'last' checkpoint directory");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint over a missing-modality protocol");
  ev->add_option("--ckpt", eval_args.ckpt, "Checkpoint directory")->required();
  ev->add_option("--data", eval_args.data, "Dataset directory")->required();
  ev->add_option("--protocol", eval_args.protocol, "random:FROM:TO:STEP or fixed:all")->required();
  auto* ev_seed = ev->add_option("--seed", eval_args.seed, "Mask and sampling seed (default: ROHYDR_SEED or 1)");
  ev->add_option("--out", eval_args.out, "Write CSV here instead of stdout");
  ev->add_option("--stride", eval_args.stride, "Reverse-chain stride (default: from the checkpoint)");
  ev->add_option("--split", eval_args.split, "test | val")->check(CLI::IsMember({"test", "val"}));

  auto* sw = app.add_subcommand("sweep", "Train one run per (value, seed) and average test metrics");
  sw->add_option("--config", config_path, "Config file");
  sw->add_option("--data", data_dir, "Dataset directory");
  sw->add_option("--out", out_dir, "Directory for runs.csv and summary.csv");
  sw->add_option("--param", param, "Swept parameter")
      ->required()
      ->check(CLI::IsMember({"lambda_g", "lambda_al", "lambda_c"}));
  sw->add_option("--values", values, "Comma separated values")->required();
  auto* sw_seeds = sw->add_option("--seeds", seeds_text, "Comma separated seeds");
  auto* sw_rate = sw->add_option("--mr", rate, "Random missing rate");
  auto* sw_avail = sw->add_option("--availability", availability, "Fixed available set");
  sw_rate->excludes(sw_avail);
  auto* sw_epochs = sw->add_option("--epochs", epochs, "Epochs per run");
  sw->add_option("--jobs", jobs, "Cells trained in parallel")->check(CLI::PositiveNumber);

  auto* pl = app.add_subcommand("plot", "Render accuracy and loss curves from metrics CSV files");
  pl->add_option("--runs", run_csvs, "Metrics CSV files")->required()->expected(1, -1);
  pl->add_option("--out", out_dir, "Output directory")->required();

  std::vector<const char*> argv{"rohydr"};
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << active_help(app);
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << active_help(app);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      RunConfig cfg = load_config_or_default(config_path);
      cfg.out_dir = out_dir;
      if (gen->count("--n") > 0 || config_path.empty()) cfg.dataset.n = n;
      cfg.dataset.seed = gen_seed->count() > 0 ? seed : env_seed();
      if (!dims.empty()) set_config_key(cfg, "dims", dims);
      if (seq_len > 0) cfg.dataset.seq_len = seq_len;
      if (latent > 0) cfg.dataset.latent = latent;
      return cmd_gen_data(cfg, out);
    }
    if (tr->parsed() || sw->parsed()) {
      RunConfig cfg = load_config_or_default(config_path);
      if (!data_dir.empty()) cfg.data_dir = data_dir;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (!strategy.empty()) set_config_key(cfg, "strategy", strategy);
      const bool rate_flag = (tr->parsed() ? tr_rate : sw_rate)->count() > 0;
      if (rate_flag) cfg.missing_rate = rate;
      if (!availability.empty()) cfg.availability = availability;
      if ((tr->parsed() ? tr_epochs : sw_epochs)->count() > 0) cfg.train.epochs = epochs;
      if (no_hddm) cfg.model.components.hddm = false;
      if (no_ur) cfg.model.components.ur = false;
      if (no_disc) cfg.model.components.disc = false;
      if (no_mr) cfg.model.components.mr = false;
      if (baseline) cfg.model.zero_impute = true;
      // Without any rate, a dataset saved with masks keeps them.
      const bool rate_given = rate_flag || cfg.rate_set;
      if (tr->parsed()) {
        cfg.train.seed = resolve_seed(tr_seed, seed, cfg);
        return cmd_train({cfg, rate_given, resume}, out, err);
      }
      SweepArgs sweep{cfg, rate_given, param, parse_double_list(values), cfg.seeds, jobs};
      if (sw_seeds->count() > 0) sweep.seeds = parse_seed_list(seeds_text);
      return cmd_sweep(sweep, out, err);
    }
    if (ev->parsed()) {
      if (ev_seed->count() == 0) eval_args.seed = env_seed();
      return cmd_eval(eval_args, out, err);
    }
    if (pl->parsed()) return cmd_plot(run_csvs, out_dir, out);
  } catch (const ConfigError& e) {
    err << "config error";
    if (!config_path.empty()) err << " in " << config_path;
    if (e.line() > 0) err << " at line " << e.line();
    err << ": " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const train::NumericFailure& e) {
    err << "numeric failure in " << e.stage() << ": " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitUsage;
}

}  // namespace rohydr::cli
