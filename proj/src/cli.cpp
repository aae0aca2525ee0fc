// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <omp.h>

#include <CLI11.hpp>

#include "lipdistill/alignment.hpp"
#include "lipdistill/config.hpp"
#include "lipdistill/gradcheck_suite.hpp"
#include "lipdistill/training.hpp"

namespace lipdistill::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> overrides;
  int threads = 0;
  bool serial = false;
};

/// Splits `--<config key> value` and `--<config key>=value` out of args.
std::vector<std::string> extract_overrides(const std::vector<std::string>& args, Common& common) {
  std::map<std::string, bool> known;
  for (const auto& k : config_keys()) known[k.key] = true;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) == 0) {
      std::string name = a.substr(2);
      std::optional<std::string> value;
      if (auto eq = name.find('='); eq != std::string::npos) {
        value = name.substr(eq + 1);
        name = name.substr(0, eq);
      }
      if (known.count(name)) {
        if (!value) {
          if (i + 1 >= args.size()) throw ConfigError("--" + name + " needs a value");
          value = args[++i];
        }
        common.overrides.emplace_back(name, *value);
        continue;
      }
    }
    rest.push_back(a);
  }
  return rest;
}

RunConfig build_config(const Common& common) {
  RunConfig cfg;
  cfg.out_dir = default_out_root();
  if (!common.config_file.empty()) {
    RunConfig from_file = RunConfig::from_file(common.config_file);
    json j = from_file.to_json();
    // keep the environment default unless the file names a directory
    std::ifstream in(common.config_file);
    const json raw = json::parse(in, nullptr, false);
    if (!raw.contains("run.out_dir")) j.erase("run.out_dir");
    cfg.merge(j);
  }
  for (const auto& [key, value] : common.overrides) cfg.set(key, value);
  return cfg;
}

train::Execution execution(const Common& common) {
  if (common.threads > 0) omp_set_num_threads(common.threads);
  return common.serial ? train::Execution::kSerial : train::Execution::kParallel;
}

data::AVDataset obtain_dataset(RunConfig& cfg, const std::string& data_dir, train::Execution exec) {
  if (!data_dir.empty()) {
    data::AVDataset ds = data::load_dataset(data_dir);
    cfg.synth = ds.config;
    return ds;
  }
  return data::generate_dataset(cfg.synth, exec == train::Execution::kParallel);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_steps(const fs::path& path, const std::vector<train::StepRecord>& steps) {
  std::ostringstream s;
  for (const auto& r : steps) {
    s << json{{"step", r.step},           {"lr", r.lr},
              {"loss_base", r.loss_base}, {"loss_kd1", r.loss_kd1},
              {"loss_kd2", r.loss_kd2},   {"loss_total", r.loss_total}}
             .dump()
      << '\n';
  }
  write_text(path, s.str());
}

void write_metrics(const fs::path& path, const std::vector<train::EpochMetrics>& epochs) {
  std::ostringstream s;
  for (const auto& e : epochs) s << e.to_json().dump() << '\n';
  write_text(path, s.str());
}

/// Restores the configuration a checkpoint was trained with.
RunConfig config_of(const train::Checkpoint& ckpt) {
  RunConfig cfg;
  cfg.merge(ckpt.config);
  return cfg;
}

struct TeacherRun {
  train::TrainResult result;
  double test_top1 = 0.0;
};

TeacherRun run_teacher(const data::AVDataset& ds, const RunConfig& cfg, const fs::path& dir,
                       train::Execution exec, std::ostream& log) {
  train::RunOptions opts;
  opts.execution = exec;
  opts.config_echo = cfg.to_json();
  opts.log = &log;
  TeacherRun run;
  run.result = train::train_teacher(ds, cfg.model_config(), cfg.train, cfg.distill.epsilon, opts);
  const auto model = train::make_teacher(cfg.model_config(), run.result.checkpoint);
  run.test_top1 = train::evaluate_teacher(model, ds.test, cfg.train.word_isolation, exec);
  run.result.checkpoint.metrics["test_top1"] = run.test_top1;
  write_metrics(dir / "metrics.jsonl", run.result.epochs);
  write_steps(dir / "steps.jsonl", run.result.steps);
  train::save_checkpoint(run.result.checkpoint, dir / "best.json");
  write_text(dir / "result.json", json{{"role", "teacher"},
                                       {"test_top1", run.test_top1},
                                       {"best_epoch", run.result.best_epoch},
                                       {"best_val_top1", run.result.best_val_top1}}
                                          .dump(2) + "\n");
  return run;
}

double run_student(const data::AVDataset& ds, const RunConfig& cfg,
                   const train::FrozenTeacher& teacher, const fs::path& dir, train::Execution exec,
                   std::ostream& log) {
  train::RunOptions opts;
  opts.execution = exec;
  opts.config_echo = cfg.to_json();
  opts.log = &log;
  auto result = train::train_student(ds, teacher, cfg.model_config(), cfg.train, cfg.distill, opts);
  const auto model = train::make_student(cfg.model_config(), cfg.train.word_boundary, result.checkpoint);
  const double test = train::evaluate_student(model, ds.test, cfg.train.word_boundary, exec);
  result.checkpoint.metrics["test_top1"] = test;
  write_metrics(dir / "metrics.jsonl", result.epochs);
  write_steps(dir / "steps.jsonl", result.steps);
  train::save_checkpoint(result.checkpoint, dir / "best.json");
  write_text(dir / "result.json", json{{"role", "student"},
                                       {"test_top1", test},
                                       {"best_epoch", result.best_epoch},
                                       {"best_val_top1", result.best_val_top1}}
                                          .dump(2) + "\n");
  return test;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
  return {mean, sd};
}

struct SummaryRow {
  std::string name;
  std::string detail;
  std::vector<double> top1;
};

void write_summary(const fs::path& stem, const std::vector<SummaryRow>& rows,
                   const std::vector<std::uint64_t>& seeds, std::ostream& out) {
  std::ostringstream csv, txt;
  csv << "configuration,detail,runs,mean_top1,std_top1";
  for (auto s : seeds) csv << ",seed" << s;
  csv << '\n';
  txt << std::left << std::setw(16) << "configuration" << std::setw(30) << "detail"
      << "top-1 (mean ± std over " << seeds.size() << " seeds)\n";
  for (const auto& r : rows) {
    const auto [m, sd] = mean_std(r.top1);
    csv << r.name << ',' << r.detail << ',' << r.top1.size() << ',' << std::setprecision(17) << m
        << ',' << sd;
    for (double v : r.top1) csv << ',' << v;
    csv << '\n';
    char line[64];
    std::snprintf(line, sizeof line, "%6.2f%% ± %5.2f", 100.0 * m, 100.0 * sd);
    txt << std::left << std::setw(16) << r.name << std::setw(30) << r.detail << line << '\n';
  }
  write_text(stem.string() + ".csv", csv.str());
  write_text(stem.string() + ".txt", txt.str());
  out << txt.str();
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size()) throw ConfigError("bad seed '" + item + "' in --seeds");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw ConfigError("--seeds needs at least one seed");
  return seeds;
}

// ---- subcommands --------------------------------------------------------------------

int cmd_gen_data(const Common& common, const std::string& out_dir, std::ostream& out) {
  RunConfig cfg = build_config(common);
  cfg.validate();
  const auto exec = execution(common);
  const data::AVDataset ds = data::generate_dataset(cfg.synth, exec == train::Execution::kParallel);
  const fs::path dir = out_dir.empty() ? fs::path(cfg.out_dir) / "data" : fs::path(out_dir);
  out << data::dump_dataset(ds, dir).string() << '\n';
  return kOk;
}

struct TrainFlags {
  std::string role;
  std::string teacher;
  std::string data_dir;
  std::string out_dir;
  bool kd1 = false, kd2 = false, mixup = false;
  std::optional<double> sigma;
  bool no_wi = false, no_sa = false, no_wb = false;
};

int cmd_train(const Common& common, const TrainFlags& f, std::ostream& out) {
  RunConfig cfg = build_config(common);
  if (f.kd1) cfg.distill.kd1_enabled = true;
  if (f.kd2) cfg.distill.kd2_enabled = true;
  if (f.mixup) cfg.distill.mixup_enabled = true;
  if (f.sigma) cfg.distill.sigma = *f.sigma;
  if (f.no_wi) cfg.train.word_isolation = false;
  if (f.no_sa) cfg.train.spec_augment = false;
  if (f.no_wb) cfg.train.word_boundary = false;
  if (f.role == "student" && f.teacher.empty()) {
    throw ConfigError("train student needs --teacher <checkpoint.json>");
  }
  cfg.validate();
  const auto exec = execution(common);
  const fs::path dir = f.out_dir.empty() ? fs::path(cfg.out_dir) / f.role : fs::path(f.out_dir);

  if (f.role == "teacher") {
    const data::AVDataset ds = obtain_dataset(cfg, f.data_dir, exec);
    write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
    const auto run = run_teacher(ds, cfg, dir, exec, out);
    out << "teacher test top-1 " << run.test_top1 << '\n' << (dir / "best.json").string() << '\n';
    return kOk;
  }
  const train::Checkpoint ckpt = train::load_checkpoint(f.teacher);
  if (ckpt.role != "teacher") throw ConfigError(f.teacher + " is not a teacher checkpoint");
  const RunConfig teacher_cfg = config_of(ckpt);
  const auto teacher = train::make_teacher(teacher_cfg.model_config(), ckpt);
  const data::AVDataset ds = obtain_dataset(cfg, f.data_dir, exec);
  cfg.validate();
  write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
  const double test = run_student(ds, cfg, {teacher, teacher_cfg.train.word_isolation}, dir, exec, out);
  out << "student test top-1 " << test << '\n' << (dir / "best.json").string() << '\n';
  return kOk;
}

int cmd_ablation(const Common& common, const std::string& seeds_text, bool teacher_table,
                 const std::string& data_dir, const std::string& out_dir, std::ostream& out) {
  RunConfig cfg = build_config(common);
  cfg.validate();
  const auto seeds = parse_seeds(seeds_text);
  const auto exec = execution(common);
  const data::AVDataset ds = obtain_dataset(cfg, data_dir, exec);
  const fs::path root = out_dir.empty() ? fs::path(cfg.out_dir) / "ablation" : fs::path(out_dir);
  write_text(root / "config.json", cfg.to_json().dump(2) + "\n");

  struct Variant {
    std::string name, detail;
    bool kd1, kd2;
    double sigma;
  };
  const std::vector<Variant> variants = {
      {"baseline", "no distillation", false, false, cfg.distill.sigma},
      {"kd1", "sequence-level", true, false, cfg.distill.sigma},
      {"kd1_kd2_sigma3", "sequence + frame at sigma 3", true, true, 3.0},
      {"kd1_kd2_sigma2", "sequence + frame at sigma 2", true, true, 2.0}};
  std::vector<SummaryRow> rows;
  for (const auto& v : variants) rows.push_back({v.name, v.detail, {}});
  std::vector<SummaryRow> teacher_rows = {{"teacher_basic", "no isolation or masking", {}},
                                          {"teacher_wi_sa", "isolation + masking", {}}};

  for (std::uint64_t seed : seeds) {
    RunConfig tcfg = cfg;
    tcfg.train.seed = seed;
    const std::string tag = "seed" + std::to_string(seed);
    const auto trun = run_teacher(ds, tcfg, root / "teacher" / tag, exec, out);
    const auto teacher = train::make_teacher(tcfg.model_config(), trun.result.checkpoint);
    for (std::size_t i = 0; i < variants.size(); ++i) {
      RunConfig scfg = tcfg;
      scfg.distill.kd1_enabled = variants[i].kd1;
      scfg.distill.kd2_enabled = variants[i].kd2;
      scfg.distill.sigma = variants[i].sigma;
      rows[i].top1.push_back(run_student(ds, scfg, {teacher, tcfg.train.word_isolation},
                                         root / variants[i].name / tag, exec, out));
    }
    if (teacher_table) {
      for (int on = 0; on < 2; ++on) {
        RunConfig vcfg = tcfg;
        vcfg.train.word_isolation = vcfg.train.spec_augment = on == 1;
        const std::string name = on ? "teacher_wi_sa" : "teacher_basic";
        teacher_rows[static_cast<std::size_t>(on)].top1.push_back(
            run_teacher(ds, vcfg, root / name / tag, exec, out).test_top1);
      }
    }
  }
  write_summary(root / "summary", rows, seeds, out);
  if (teacher_table) write_summary(root / "teacher_summary", teacher_rows, seeds, out);
  return kOk;
}

int cmd_eval(const Common& common, const std::string& checkpoint, const std::string& split,
             const std::string& data_dir, std::ostream& out) {
  const train::Checkpoint ckpt = train::load_checkpoint(checkpoint);
  RunConfig cfg = config_of(ckpt);
  for (const auto& [key, value] : common.overrides) {
    if (key.rfind("synth.", 0) != 0) throw ConfigError("eval only accepts synth.* overrides");
    cfg.set(key, value);
  }
  cfg.validate();
  const auto exec = execution(common);
  const data::AVDataset ds = obtain_dataset(cfg, data_dir, exec);
  const auto& samples = ds.split(data::parse_split(split));
  double top1 = 0.0;
  if (ckpt.role == "teacher") {
    top1 = train::evaluate_teacher(train::make_teacher(cfg.model_config(), ckpt), samples,
                                   cfg.train.word_isolation, exec);
  } else {
    top1 = train::evaluate_student(
        train::make_student(cfg.model_config(), cfg.train.word_boundary, ckpt), samples,
        cfg.train.word_boundary, exec);
  }
  out << ckpt.role << ' ' << split << " top-1 " << top1 << '\n';
  return kOk;
}

int cmd_gradcheck(const std::string& seeds_text, const std::vector<std::string>& only,
                  bool inject_fault, std::ostream& out) {
  GradCheckOptions opts;
  opts.corrupt_analytic = inject_fault;
  const auto results = run_gradcheck_suite(parse_seeds(seeds_text), opts, only);
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  bool ok = true;
  for (const auto& r : results) {
    if (!worst.count(r.name)) order.push_back(r.name);
    worst[r.name] = std::max(worst[r.name], r.report.max_rel_error);
    ok = ok && r.report.passed;
  }
  for (const auto& name : order) {
    char line[128];
    std::snprintf(line, sizeof line, "%-22s max rel err %.3e  %s", name.c_str(), worst[name],
                  worst[name] < opts.tolerance ? "ok" : "FAIL");
    out << line << '\n';
  }
  out << order.size() << " components, " << (ok ? "all passed" : "FAILURES") << '\n';
  return ok ? kOk : kRuntime;
}

int cmd_inspect_align(std::size_t audio_frames, std::size_t visual_frames, double sigma,
                      std::size_t window, const std::string& out_csv, const Common& common,
                      std::ostream& out) {
  align::AlignmentMap map;
  try {
    map = align::build_alignment_map(audio_frames, visual_frames, sigma, window);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const fs::path path = out_csv.empty() ? fs::path(build_config(common).out_dir) / "alignment.csv"
                                        : fs::path(out_csv);
  const Tensor dense = map.dense();
  std::ostringstream csv, centers;
  double worst = 0.0;
  centers << "row,center\n";
  for (std::size_t j = 0; j < visual_frames; ++j) {
    double sum = 0.0;
    for (std::size_t t = 0; t < audio_frames; ++t) {
      const double w = dense[j * audio_frames + t];
      sum += w;
      char cell[32];
      std::snprintf(cell, sizeof cell, "%.17g", w);
      csv << (t ? "," : "") << cell;
    }
    csv << '\n';
    centers << j << ',' << map.centers[j] << '\n';
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  fs::path centers_path = path;
  centers_path.replace_filename(path.stem().string() + "_centers.csv");
  write_text(path, csv.str());
  write_text(centers_path, centers.str());
  char line[128];
  std::snprintf(line, sizeof line, "%zu rows, max |row sum - 1| = %.3e (%s)\n", visual_frames,
                worst, worst <= 1e-12 ? "row sums all 1.000000" : "NOT STOCHASTIC");
  out << path.string() << '\n' << centers_path.string() << '\n' << line;
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  Common common;
  CLI::App app{"Cross-modal distillation for word-level lipreading"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "List every subcommand option");
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_file, "JSON file of dotted config keys")
        ->check(CLI::ExistingFile);
    sub->add_option("--threads", common.threads, "worker threads (0 = OpenMP default)");
    sub->add_flag("--serial", common.serial, "run the serial reference kernels");
    sub->footer("Any config key may be overridden as --<key> <value>, e.g. --train.epochs 5.");
  };

  std::string out_dir, data_dir;
  auto* gen = app.add_subcommand("gen-data", "Materialise the synthetic dataset");
  add_common(gen);
  gen->add_option("--out", out_dir, "output directory (default <out_dir>/data)");

  TrainFlags tf;
  auto* tr = app.add_subcommand("train", "Train the audio teacher or the visual student");
  add_common(tr);
  tr->add_option("role", tf.role, "teacher or student")->required()->check(CLI::IsMember({"teacher", "student"}));
  tr->add_option("--teacher", tf.teacher, "teacher checkpoint (student only)");
  tr->add_option("--data", tf.data_dir, "load a dumped dataset instead of generating");
  tr->add_option("--out", tf.out_dir, "output directory (default <out_dir>/<role>)");
  tr->add_flag("--kd1", tf.kd1, "sequence-level distillation");
  tr->add_flag("--kd2", tf.kd2, "frame-level distillation");
  tr->add_flag("--mixup", tf.mixup, "mixup on both modalities");
  tr->add_option("--sigma", tf.sigma, "alignment Gaussian width");
  tr->add_flag("--no-word-isolation", tf.no_wi, "teacher hears the whole clip");
  tr->add_flag("--no-spec-augment", tf.no_sa, "no time/frequency masking");
  tr->add_flag("--no-word-boundary", tf.no_wb, "student gets no boundary channel");

  std::string seeds = "1,2,3,4,5";
  bool teacher_table = false;
  auto* abl = app.add_subcommand("ablation", "Baseline / +KD1 / +KD1+KD2 (sigma 3, 2) over seeds");
  add_common(abl);
  abl->add_option("--seeds", seeds, "comma-separated training seeds");
  abl->add_flag("--teacher-table", teacher_table, "also compare teachers with and without isolation + masking");
  abl->add_option("--data", data_dir, "load a dumped dataset instead of generating");
  abl->add_option("--out", out_dir, "output directory (default <out_dir>/ablation)");

  std::string checkpoint, split = "test";
  auto* ev = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "checkpoint manifest (.json)")->required();
  ev->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--data", data_dir, "load a dumped dataset instead of generating");

  std::string gc_seeds = "1,2,3";
  std::vector<std::string> components;
  bool inject_fault = false;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every layer and loss");
  gc->add_option("--seeds", gc_seeds, "comma-separated seeds");
  gc->add_option("--component", components, "restrict to named components");
  gc->add_flag("--inject-fault", inject_fault, "perturb one analytic gradient (harness self-test)");

  std::size_t audio_frames = 139, visual_frames = 29, window = 7;
  double sigma = 3.0;
  std::string align_out;
  auto* ia = app.add_subcommand("inspect-align", "Dump the audio-to-video alignment weights as CSV");
  add_common(ia);
  ia->add_option("--audio-frames", audio_frames, "audio frames (columns)");
  ia->add_option("--visual-frames", visual_frames, "video frames (rows)");
  ia->add_option("--sigma", sigma, "Gaussian width in audio frames");
  ia->add_option("--window", window, "window length (odd)");
  ia->add_option("--out", align_out, "CSV path (default <out_dir>/alignment.csv)");

  try {
    std::vector<std::string> args = extract_overrides(raw_args, common);
    std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
    try {
      app.parse(args);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kOk;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << '\n';
      return kValidation;
    }
    if (gc->parsed() && !common.overrides.empty()) {
      throw ConfigError("gradcheck takes no config overrides");
    }
    if (gen->parsed()) return cmd_gen_data(common, out_dir, out);
    if (tr->parsed()) return cmd_train(common, tf, out);
    if (abl->parsed()) return cmd_ablation(common, seeds, teacher_table, data_dir, out_dir, out);
    if (ev->parsed()) return cmd_eval(common, checkpoint, split, data_dir, out);
    if (gc->parsed()) return cmd_gradcheck(gc_seeds, components, inject_fault, out);
    if (ia->parsed()) {
      return cmd_inspect_align(audio_frames, visual_frames, sigma, window, align_out, common, out);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kValidation;
}

}  // namespace lipdistill::cli
