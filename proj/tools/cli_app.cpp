#include "cli_app.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "eqcm/eval.hpp"
#include "eqcm/grad_check.hpp"
#include "eqcm/model.hpp"
#include "eqcm/synth.hpp"
#include "eqcm/train.hpp"

namespace fs = std::filesystem;

namespace eqcm::cli {
namespace {

struct DataOpts {
  std::string dir;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

LossWeights parse_toggles(const std::string& list, double lambda_kd, int schedule_t) {
  LossWeights w;
  w.lambda_kd = lambda_kd;
  w.schedule_T = schedule_t;
  for (const auto& item : split_list(list)) {
    if (item == "kd") w.kd = true;
    else if (item == "er") w.er = true;
    else if (item == "cmer") w.cmer = true;
    else if (item == "none") { /* explicit baseline */ }
    else throw CLI::ValidationError("--loss-toggles", "unknown toggle '" + item + "' (use kd,er,cmer)");
  }
  return w;
}

TransformSampler parse_transforms(const std::string& list) {
  TransformSampler s;
  s.flip = s.rot90 = s.scale = s.translate = false;
  for (const auto& item : split_list(list)) {
    if (item == "flip") s.flip = true;
    else if (item == "rot90") s.rot90 = true;
    else if (item == "scale") s.scale = true;
    else if (item == "translate") s.translate = true;
    else
      throw CLI::ValidationError("--transforms",
                                 "unknown transform '" + item + "' (use flip,rot90,scale,translate)");
  }
  return s;
}

Dataset load_dataset_dir(const std::string& dir) {
  Dataset d;
  const DatasetFile train = load_dataset((fs::path(dir) / "train.bin").string());
  const DatasetFile val = load_dataset((fs::path(dir) / "val.bin").string());
  const DatasetFile test = load_dataset((fs::path(dir) / "test.bin").string());
  require(train.k == val.k && train.k == test.k && train.h == val.h && train.h == test.h,
          "dataset splits disagree on K or extents");
  d.k = train.k;
  d.c = train.c;
  d.h = train.h;
  d.w = train.w;
  d.train = train.samples;
  d.val = val.samples;
  d.test = test.samples;
  return d;
}

void write_run_info(const std::string& out_dir, const CLI::App& app, std::uint64_t seed) {
  fs::create_directories(out_dir);
  {
    std::ofstream f(fs::path(out_dir) / "config.snapshot");
    f << app.config_to_str(true, false);
  }
  {
    std::ofstream f(fs::path(out_dir) / "run_info.txt");
    f << "eqcm " << kVersion << "\nseed " << seed << "\n";
  }
}

void write_eval_outputs(const std::string& out_dir, const EvalReport& report,
                        const std::vector<ModalitySample>& split,
                        const std::vector<std::vector<Tensor<real>>>* maps, bool dump_cams) {
  const fs::path eval_dir = fs::path(out_dir) / "eval";
  fs::create_directories(eval_dir);
  {
    std::ofstream f(eval_dir / "report.json");
    f << report_json(report) << "\n";
  }
  {
    std::ofstream f(eval_dir / "report.txt");
    f << report_text(report);
  }
  write_sweep_csv((eval_dir / "sweep.csv").string(), report.sweep);
  if (dump_cams && maps) {
    fs::create_directories(eval_dir / "cams");
    save_cam_dump((eval_dir / "cams" / "maps.bin").string(), split, *maps);
  }
  std::cout << report_text(report);
}

// ---- subcommand configs ----

struct GenDataArgs {
  DatasetSpec spec;
  std::string out;
};

struct TrainArgs {
  std::string data, out, resume;
  std::uint64_t seed = 0;
  int epochs = 40;
  int batch_size = 16;
  double lr = 5e-5;
  double weight_decay = 0.1;
  double lambda_kd = 0.5;
  int schedule_t = 15;
  std::string toggles = "kd,er,cmer";
  std::string transforms = "flip,rot90,scale,translate";

  TrainConfig to_config(TrainMode mode) const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.lr = lr;
    c.weight_decay = weight_decay;
    c.weights = parse_toggles(toggles, lambda_kd, schedule_t);
    c.transforms = parse_transforms(transforms);
    c.seed = seed;
    c.mode = mode;
    c.out_dir = out;
    return c;
  }
};

void add_train_options(CLI::App* cmd, TrainArgs& a, bool toggles_default_full) {
  cmd->add_option("--data", a.data, "dataset directory from gen-data")->required();
  cmd->add_option("--out", a.out, "run output directory")->required();
  cmd->add_option("--seed", a.seed, "run seed");
  cmd->add_option("--epochs", a.epochs, "training epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--batch-size", a.batch_size, "minibatch size")->check(CLI::PositiveNumber);
  cmd->add_option("--lr", a.lr, "learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--weight-decay", a.weight_decay, "decoupled weight decay")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--lambda-kd", a.lambda_kd, "distillation weight")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--schedule-T", a.schedule_t, "equivariance ramp epoch T")
      ->check(CLI::PositiveNumber);
  if (toggles_default_full)
    cmd->add_option("--loss-toggles", a.toggles, "comma list from {kd,er,cmer}; 'none' for baseline");
  cmd->add_option("--transforms", a.transforms, "comma list from {flip,rot90,scale,translate}");
  cmd->add_option("--resume", a.resume, "checkpoint to resume from");
}

int run_train(const CLI::App& app, const TrainArgs& a, TrainMode mode) {
  const TrainConfig config = a.to_config(mode);
  config.validate();
  const Dataset data = load_dataset_dir(a.data);
  write_run_info(a.out, app, a.seed);
  {
    std::ofstream f(fs::path(a.out) / "run_info.txt", std::ios::app);
    f << "train_digest " << std::hex << dataset_digest(data.train) << std::dec << "\n";
  }
  Checkpoint resume;
  const Checkpoint* resume_ptr = nullptr;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    resume_ptr = &resume;
  }
  const TrainResult result = mode == TrainMode::weak
                                 ? train(config, data, resume_ptr)
                                 : train_fully_supervised(config, data, resume_ptr);
  std::cout << "trained " << result.epochs_done << " epochs, " << result.nets.size()
            << " networks -> " << a.out << "/checkpoints/final\n";
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"weakly supervised multi-modal segmentation with equivariant constraints"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key = value config file; flags override file values");
  app.set_version_flag("--version", std::string("eqcm ") + kVersion);

  // gen-data
  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic multi-modal dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--seed", gen.spec.seed, "generator seed");
  gen_cmd->add_option("--modalities", gen.spec.modalities, "modality count K")
      ->check(CLI::Range(2, 4));
  gen_cmd->add_option("--n-train", gen.spec.n_train, "training samples")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--n-val", gen.spec.n_val, "validation samples")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--n-test", gen.spec.n_test, "test samples")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--height", gen.spec.height, "image height")->check(CLI::Range(8, 256));
  gen_cmd->add_option("--width", gen.spec.width, "image width")->check(CLI::Range(8, 256));
  gen_cmd->add_option("--prevalence", gen.spec.lesion_prevalence, "lesion prevalence in (0,1)");

  // train
  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train the weakly supervised objective");
  add_train_options(train_cmd, train_args, true);

  // upper-bound
  TrainArgs ub_args;
  ub_args.epochs = 20;
  auto* ub_cmd = app.add_subcommand("upper-bound", "train the fully supervised reference");
  add_train_options(ub_cmd, ub_args, false);
  bool ub_eval = true;
  ub_cmd->add_flag("--eval,!--no-eval", ub_eval, "evaluate on the test split after training");
  double ub_tau = 0.5;
  ub_cmd->add_option("--tau", ub_tau, "binarization threshold")->check(CLI::Range(0.0, 1.0));

  // eval
  struct {
    std::string ckpt, data, out, split = "test";
    double tau = 0.5;
    bool dump_cams = false;
  } eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", eval_args.ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--data", eval_args.data, "dataset directory")->required();
  eval_cmd->add_option("--out", eval_args.out, "output directory")->required();
  eval_cmd->add_option("--tau", eval_args.tau, "binarization threshold")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--split", eval_args.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_flag("--dump-cams", eval_args.dump_cams, "persist per-sample maps");
  bool eval_softmax = false;
  eval_cmd->add_flag("--softmax-maps", eval_softmax,
                     "threshold per-pixel softmax instead of CAMs (supervised checkpoints)");

  // sweep
  struct {
    std::string ckpt, data, out, split = "test";
  } sweep_args;
  auto* sweep_cmd = app.add_subcommand("sweep", "threshold sweep for a checkpoint");
  sweep_cmd->add_option("--ckpt", sweep_args.ckpt, "checkpoint path")->required();
  sweep_cmd->add_option("--data", sweep_args.data, "dataset directory")->required();
  sweep_cmd->add_option("--out", sweep_args.out, "output directory")->required();
  sweep_cmd->add_option("--split", sweep_args.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));

  // ablate
  TrainArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and compare the loss-toggle rows");
  add_train_options(ablate_cmd, ablate_args, false);
  double ablate_tau = 0.5;
  ablate_cmd->add_option("--tau", ablate_tau, "binarization threshold")
      ->check(CLI::Range(0.0, 1.0));

  // grad-check
  struct {
    std::uint64_t seed = 0;
    double step = 1e-3;
    double tolerance = 1e-3;
  } gc_args;
  auto* gc_cmd = app.add_subcommand("grad-check",
                                    "finite-difference check of the full objective's gradients");
  gc_cmd->add_option("--seed", gc_args.seed, "seed for parameters and inputs");
  gc_cmd->add_option("--step", gc_args.step, "relative finite-difference step")
      ->check(CLI::PositiveNumber);
  gc_cmd->add_option("--tolerance", gc_args.tolerance, "max relative error to accept")
      ->check(CLI::PositiveNumber);

  std::vector<const char*> argv;
  argv.push_back("eqcm");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen_cmd->parsed()) {
      gen.spec.validate();
      const Dataset d = generate(gen.spec);
      fs::create_directories(gen.out);
      save_dataset(d.train, d.k, d.c, (fs::path(gen.out) / "train.bin").string());
      save_dataset(d.val, d.k, d.c, (fs::path(gen.out) / "val.bin").string());
      save_dataset(d.test, d.k, d.c, (fs::path(gen.out) / "test.bin").string());
      write_run_info(gen.out, app, gen.spec.seed);
      std::cout << "wrote " << d.train.size() << "/" << d.val.size() << "/" << d.test.size()
                << " samples (K=" << d.k << ", " << d.h << "x" << d.w << ") to " << gen.out
                << "\ntrain digest " << std::hex << dataset_digest(d.train) << std::dec << "\n";
      return 0;
    }

    if (train_cmd->parsed()) return run_train(app, train_args, TrainMode::weak);

    if (ub_cmd->parsed()) {
      const int rc = run_train(app, ub_args, TrainMode::fully_supervised);
      if (rc != 0 || !ub_eval) return rc;
      const Dataset data = load_dataset_dir(ub_args.data);
      const auto nets = load_networks(
          (fs::path(ub_args.out) / "checkpoints" / "final").string());
      std::vector<std::vector<Tensor<real>>> maps;
      const EvalReport report =
          evaluate(nets, data.test, ub_tau, default_sweep_grid(), MapSource::softmax_fg, &maps);
      write_eval_outputs(ub_args.out, report, data.test, &maps, false);
      return 0;
    }

    if (eval_cmd->parsed()) {
      const Dataset data = load_dataset_dir(eval_args.data);
      const auto& split = eval_args.split == "train" ? data.train
                          : eval_args.split == "val" ? data.val
                                                     : data.test;
      const auto nets = load_networks(eval_args.ckpt);
      std::vector<std::vector<Tensor<real>>> maps;
      const EvalReport report =
          evaluate(nets, split, eval_args.tau, default_sweep_grid(),
                   eval_softmax ? MapSource::softmax_fg : MapSource::cam, &maps);
      write_run_info(eval_args.out, app, 0);
      write_eval_outputs(eval_args.out, report, split, &maps, eval_args.dump_cams);
      return 0;
    }

    if (sweep_cmd->parsed()) {
      const Dataset data = load_dataset_dir(sweep_args.data);
      const auto& split = sweep_args.split == "train" ? data.train
                          : sweep_args.split == "val" ? data.val
                                                      : data.test;
      const auto nets = load_networks(sweep_args.ckpt);
      const EvalReport report = evaluate(nets, split, 0.5);
      fs::create_directories(fs::path(sweep_args.out) / "eval");
      write_sweep_csv((fs::path(sweep_args.out) / "eval" / "sweep.csv").string(), report.sweep);
      for (const auto& p : report.sweep)
        std::cout << std::fixed << std::setprecision(4) << p.tau << "," << p.mean_dsc << ","
                  << p.std_dsc << "\n";
      return 0;
    }

    if (ablate_cmd->parsed()) {
      const Dataset data = load_dataset_dir(ablate_args.data);
      write_run_info(ablate_args.out, app, ablate_args.seed);
      const std::uint64_t digest = dataset_digest(data.train);

      struct Row {
        const char* name;
        const char* toggles;
      };
      const Row rows[] = {{"baseline", "none"},
                          {"kd", "kd"},
                          {"kd+er", "kd,er"},
                          {"er+cmer", "er,cmer"},
                          {"all", "kd,er,cmer"}};

      std::ostringstream csv, txt;
      csv << "config,dataset_digest";
      for (int k = 0; k < data.k; ++k) csv << ",dsc_m" << k << ",assd_m" << k;
      csv << ",dsc_fused,assd_fused\n";
      txt << std::left << std::setw(10) << "config";
      for (int k = 0; k < data.k; ++k)
        txt << std::right << std::setw(10) << ("DSC m" + std::to_string(k)) << std::setw(10)
            << ("ASSD m" + std::to_string(k));
      txt << std::right << std::setw(10) << "DSC f" << std::setw(10) << "ASSD f" << "\n";

      for (const Row& row : rows) {
        TrainArgs a = ablate_args;
        a.toggles = row.toggles;
        a.out = (fs::path(ablate_args.out) / "rows" / row.name).string();
        const TrainConfig config = a.to_config(TrainMode::weak);
        config.validate();
        const TrainResult result = train(config, data);
        const EvalReport report = evaluate(result.nets, data.test, ablate_tau);
        csv << row.name << "," << std::hex << digest << std::dec;
        txt << std::left << std::setw(10) << row.name << std::right << std::fixed
            << std::setprecision(4);
        for (const auto& r : report.rows) {
          csv << "," << r.dsc_mean << "," << r.assd_mean;
          txt << std::setw(10) << r.dsc_mean << std::setw(10) << r.assd_mean;
        }
        csv << "\n";
        txt << "\n";
        std::cout << "row " << row.name << " done (fused DSC "
                  << report.rows.back().dsc_mean << ")\n";
      }
      std::ofstream(fs::path(ablate_args.out) / "ablation.csv") << csv.str();
      std::ofstream(fs::path(ablate_args.out) / "ablation.txt") << txt.str();
      std::cout << txt.str();
      return 0;
    }

    if (gc_cmd->parsed()) {
      // 8x8, K=2, full objective, every transform kind exercised
      DatasetSpec spec;
      spec.n_train = 2;
      spec.n_val = 1;
      spec.n_test = 1;
      spec.height = spec.width = 8;
      spec.seed = gc_args.seed;
      const Dataset data = generate(spec);
      const auto arch = ArchDescriptor::classifier(1, 2);
      std::vector<NetworkState> nets;
      for (int k = 0; k < 2; ++k)
        nets.push_back(init_params(splitmix64(gc_args.seed ^ 0x47434bu), arch, k));

      Tensor<double> y({2, 2});
      std::vector<Tensor<double>> xs;
      for (int k = 0; k < 2; ++k) {
        Tensor<double> x({2, 1, 8, 8});
        for (int i = 0; i < 2; ++i) {
          const auto& img = data.train[static_cast<std::size_t>(i)].images[static_cast<std::size_t>(k)];
          for (std::size_t p = 0; p < img.numel(); ++p)
            x.v[static_cast<std::size_t>(i) * img.numel() + p] = img.v[p];
          for (int c = 0; c < 2; ++c)
            y.v[static_cast<std::size_t>(i) * 2 + c] = data.train[static_cast<std::size_t>(i)].label[static_cast<std::size_t>(c)];
        }
        xs.push_back(std::move(x));
      }

      LossWeights weights = LossWeights::full();
      const int epoch = weights.schedule_T;  // lambda_e == 1: all terms at full weight

      std::vector<AffineTransform> pis;
      {
        AffineTransform t;
        t.kind = TransformKind::flip_h;
        pis.push_back(t);
        t.kind = TransformKind::rotate90;
        t.quarter_turns = 1;
        pis.push_back(t);
        t.kind = TransformKind::scale;
        t.scale_ratio = 0.9;
        pis.push_back(t);
        t.kind = TransformKind::translate;
        t.dh = 1.7;
        t.dw = -2.3;
        pis.push_back(t);
      }

      bool all_pass = true;
      double global_max = 0.0;
      for (const auto& pi : pis) {
        const ValidityMask mask = validity_mask(pi, 8, 8);
        for (int k = 0; k < 2; ++k) {
          std::vector<std::pair<std::string, Tensor<double>>> params;
          for (const auto& [name, t] : nets[static_cast<std::size_t>(k)].params)
            params.emplace_back(name, t.cast<double>());
          std::vector<std::pair<std::string, Tensor<double>>> peer;
          for (const auto& [name, t] : nets[static_cast<std::size_t>(1 - k)].params)
            peer.emplace_back(name, t.cast<double>());

          auto build = [&](Graph<double>& g, const std::vector<NodeId>& ids) {
            std::vector<NodeId> peer_ids;
            for (const auto& [name, t] : peer) peer_ids.push_back(g.leaf(t, false));
            std::vector<BranchOutputs<double>> branches(2);
            for (int m = 0; m < 2; ++m) {
              const auto& pid = (m == k) ? ids : peer_ids;
              const auto s = siamese_step(g, pid, arch, g.leaf(xs[static_cast<std::size_t>(m)], false), pi);
              branches[static_cast<std::size_t>(m)] = {s.plain.probs, s.transformed.probs,
                                                       s.cam, s.cam_t};
            }
            return network_objective(g, k, branches, y, weights, epoch, pi, mask).total;
          };

          const auto report =
              grad_check(params, build, gc_args.step, gc_args.tolerance, 64,
                         splitmix64(gc_args.seed + static_cast<std::uint64_t>(k)));
          for (const auto& e : report.entries) {
            std::cout << "pi=" << std::left << std::setw(24) << pi.describe() << " net " << k
                      << " " << std::setw(14) << e.name << " max_rel_err "
                      << std::scientific << std::setprecision(3) << e.max_rel_err
                      << (e.pass ? "  ok" : "  FAIL") << std::defaultfloat << "\n";
            global_max = std::max(global_max, e.max_rel_err);
          }
          all_pass = all_pass && report.pass();
        }
      }
      std::cout << "max relative error " << std::scientific << std::setprecision(3) << global_max
                << std::defaultfloat << " (tolerance " << gc_args.tolerance << ")\n"
                << (all_pass ? "gradient check passed" : "gradient check FAILED") << "\n";
      return all_pass ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args);
}

}  // namespace eqcm::cli
