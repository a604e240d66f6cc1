#pragma once

// Command-line front end: `odometry`, `simulate`, `evaluate`.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "msfo/errors.hpp"
#include "msfo/estimator.hpp"
#include "msfo/eval.hpp"
#include "msfo/io.hpp"
#include "msfo/sim.hpp"

namespace msfo {

inline constexpr int kExitUsage = 2;

struct OdometryRun {
  Trajectory trajectory;
  EstimatorStats stats;
  std::size_t rejected_rows = 0;
  double runtime_s = 0.0;
};

/// Drives the estimator over a loaded dataset: every IMU sample up to a
/// frame's timestamp is fed before that frame.
inline OdometryRun run_odometry(const EstimatorConfig& cfg, const io::Dataset& ds) {
  const auto t0 = std::chrono::steady_clock::now();
  Estimator est(cfg);
  std::size_t k = 0;
  for (const auto& fr : ds.frames) {
    const double t = fr.t();
    if (uses_imu(cfg.mode)) {
      while (k < ds.imu.size() && ds.imu[k].t <= t + 1e-9) est.process_imu(ds.imu[k++]);
    }
    est.process_frame(fr.frame_id, t, fr.observations);
  }
  OdometryRun run;
  run.trajectory = est.finish();
  run.stats = est.stats();
  run.rejected_rows = ds.rejected_rows;
  run.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

/// Writes a simulated scenario in the dataset layout plus a matching config.
inline void write_simulation(const std::filesystem::path& dir, const sim::Scenario& sc) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto imu = sim::synthesize_imu(sc.trajectory, sc.world);
  const auto tracks = sim::synthesize_features(sc.trajectory, sc.world);
  io::write_imu_csv(dir / io::kImuFile, imu.samples);
  for (std::size_t c = 0; c < sc.world.rig.size(); ++c) {
    std::vector<io::TrackFrame> frames;
    for (const auto& f : tracks.frames) {
      io::TrackFrame tf{f.frame_id, f.stamp_ns, {}};
      for (const auto& o : f.observations) {
        if (o.camera_id == static_cast<int>(c)) tf.observations.push_back(o);
      }
      frames.push_back(std::move(tf));
    }
    io::write_tracks_csv(dir / io::track_file_name(static_cast<int>(c)), frames);
  }
  Trajectory gt;
  for (const auto& f : tracks.frames) gt.push_back({f.t, sim::sample_trajectory(sc.trajectory, f.t).pose});
  io::write_trajectory_tum(dir / io::kGroundTruthFile, gt);

  EstimatorConfig cfg;
  cfg.mode = Mode::StereoImu;
  cfg.rig = sc.world.rig;
  cfg.sigma_px = sc.world.sigma_px > 0.0 ? sc.world.sigma_px : 1.0;
  std::ofstream(dir / "config.json") << io::dump_config(cfg).dump(2) << '\n';
  if (!tracks.corrupted.empty()) {
    std::ofstream out(dir / "outliers.txt");
    for (auto id : tracks.corrupted) out << id << '\n';
  }
}

inline int cli_run(int argc, const char* const* argv) {
  CLI::App app{"msfo: sliding-window multi-sensor odometry"};
  app.require_subcommand(1);

  std::string config, dataset, output, mode_override, report;
  auto* odo = app.add_subcommand("odometry", "run the estimator over a dataset directory");
  odo->add_option("--config", config, "estimator config (JSON)")->required();
  odo->add_option("--dataset", dataset, "dataset directory")->required();
  odo->add_option("--output", output, "TUM trajectory output")->required();
  odo->add_option("--mode", mode_override, "override mode: stereo | mono-imu | stereo-imu");
  odo->add_option("--report", report, "run report (JSON); default <output>.report.json");

  std::string scenario = "circle", sim_out;
  std::uint64_t seed = 0;
  int frames = 200;
  double sigma_px = -1.0, outliers = 0.0;
  auto* simc = app.add_subcommand("simulate", "write a synthetic dataset with ground truth");
  simc->add_option("--scenario", scenario, "circle | circle-noisy | sinusoid | static");
  simc->add_option("--seed", seed, "noise seed");
  simc->add_option("--output", sim_out, "output directory")->required();
  simc->add_option("--frames", frames, "number of camera frames")->check(CLI::Range(2, 100000));
  simc->add_option("--sigma-px", sigma_px, "pixel noise override");
  simc->add_option("--outliers", outliers, "share of landmarks with corrupted tracks")->check(CLI::Range(0.0, 1.0));

  std::string est_path, gt_path, rpe_out, align = "rigid";
  std::vector<double> rpe_lengths;
  double max_dt = kDefaultMaxDt;
  auto* evalc = app.add_subcommand("evaluate", "ATE and RPE of an estimate against ground truth");
  evalc->add_option("--est", est_path, "estimated trajectory (TUM)")->required();
  evalc->add_option("--gt", gt_path, "ground-truth trajectory (TUM)")->required();
  evalc->add_option("--rpe-lengths", rpe_lengths, "RPE segment lengths in meters");
  evalc->add_option("--rpe-output", rpe_out, "RPE table output (TSV)");
  evalc->add_option("--max-dt", max_dt, "association window in seconds");
  evalc->add_option("--align", align, "rigid | sim3 | none")->check(CLI::IsMember({"rigid", "sim3", "none"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*odo) {
      auto loaded = io::load_config(config);
      for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << '\n';
      EstimatorConfig cfg = loaded.config;
      if (!mode_override.empty()) {
        auto m = parse_mode(mode_override);
        if (!m) {
          std::cerr << "usage error: unknown mode '" << mode_override << "'\n";
          return kExitUsage;
        }
        cfg.mode = *m;
        cfg.validate();
      }
      const auto ds = io::load_dataset(dataset, cfg.mode, cfg.rig);
      const OdometryRun run = run_odometry(cfg, ds);
      io::write_trajectory_tum(output, run.trajectory);

      const int opt = std::max(1, run.stats.optimizations);
      nlohmann::json rep = {{"mode", to_string(cfg.mode)},
                            {"frames", run.stats.frames},
                            {"poses_written", run.trajectory.size()},
                            {"optimizations", run.stats.optimizations},
                            {"mean_iterations", static_cast<double>(run.stats.iterations) / opt},
                            {"outliers_removed", run.stats.outliers_removed},
                            {"marginalizations", run.stats.marginalizations},
                            {"degraded_frames", run.stats.degraded_frames},
                            {"imu_rejected", run.stats.imu_rejected},
                            {"rows_rejected", run.rejected_rows},
                            {"runtime_s", run.runtime_s}};
      const std::string rp = report.empty() ? output + ".report.json" : report;
      std::ofstream(rp) << rep.dump(2) << '\n';
      std::cout << "wrote " << run.trajectory.size() << " poses to " << output << '\n';
      return 0;
    }
    if (*simc) {
      const auto sc = sim::make_scenario(scenario, seed, frames, sigma_px, outliers);
      write_simulation(sim_out, sc);
      std::cout << "wrote scenario '" << scenario << "' (" << frames << " frames, seed " << seed << ") to " << sim_out
                << '\n';
      return 0;
    }
    if (*evalc) {
      const Trajectory est = io::read_trajectory_tum(est_path);
      const Trajectory gt = io::read_trajectory_tum(gt_path);
      if (est.empty() || gt.empty()) throw EvaluationError("evaluate: empty trajectory");
      const AteResult a = ate(est, gt, align != "none", align == "sim3", max_dt);
      char line[128];
      std::snprintf(line, sizeof(line), "ATE RMSE [m]: %.6f (%zu pairs)\n", a.rmse, a.pairs);
      std::cout << line;
      if (rpe_lengths.empty()) rpe_lengths = default_rpe_lengths(gt);
      const auto bins = rpe(est, gt, rpe_lengths, max_dt);
      std::ostringstream table;
      table << "length_m\tsegments\ttranslation_pct\trotation_deg_per_m\n";
      for (const auto& b : bins) {
        table << io::format_double(b.length) << '\t' << b.segments << '\t';
        if (b.segments == 0) {
          table << "nan\tnan\n";
        } else {
          std::snprintf(line, sizeof(line), "%.6f\t%.6f\n", b.translation_pct, b.rotation_deg_per_m);
          table << line;
        }
      }
      std::cout << table.str();
      if (!rpe_out.empty()) std::ofstream(rpe_out) << table.str();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}

inline int cli_run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace msfo
