#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "storyviz/checkpoint.hpp"
#include "storyviz/training.hpp"

namespace storyviz {

// Drives a training run in a working directory: appends to metrics.csv,
// checkpoints periodically and at the end, and resumes from checkpoint.bin if
// one is present (truncating any metrics lines past the checkpointed step, so
// a crash between log line and checkpoint cannot fork the trace).

inline std::string checkpoint_path(const std::string& out_dir) {
  return (std::filesystem::path(out_dir) / "checkpoint.bin").string();
}

inline std::string metrics_path(const std::string& out_dir) {
  return (std::filesystem::path(out_dir) / "metrics.csv").string();
}

namespace run_detail {

inline void truncate_metrics(const std::string& path, int64_t keep_up_to) {
  std::ifstream in(path);
  if (!in.good()) return;
  std::vector<std::string> kept;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      kept.push_back(line);
      first = false;
      continue;
    }
    std::istringstream ls(line);
    long long step = 0;
    ls >> step;
    if (ls && step <= keep_up_to) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << "\n";
}

}  // namespace run_detail

template <typename T>
struct TrainRunResult {
  int64_t final_iter = 0;
  StepMetrics last;
  bool resumed = false;
};

template <typename T>
TrainRunResult<T> run_training(Model<T>& model, Trainer<T>& trainer,
                               const std::string& out_dir, bool quiet = false) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string ckpt = checkpoint_path(out_dir);
  const std::string metrics = metrics_path(out_dir);

  TrainRunResult<T> result;
  if (fs::exists(ckpt)) {
    load_checkpoint(ckpt, model, trainer);
    run_detail::truncate_metrics(metrics, trainer.iter());
    result.resumed = true;
    if (!quiet) {
      std::cerr << "resumed from " << ckpt << " at iteration " << trainer.iter()
                << "\n";
    }
  } else {
    std::ofstream f(metrics, std::ios::trunc);
    SV_CHECK(f.good(), "cannot write metrics log: ", metrics);
    f << metrics_header() << "\n";
  }

  std::ofstream log(metrics, std::ios::app);
  SV_CHECK(log.good(), "cannot append metrics log: ", metrics);

  const int64_t max_iter = trainer.config().max_iter;
  while (trainer.iter() < max_iter) {
    result.last = trainer.step();
    log << format_metrics(result.last) << "\n";
    log.flush();
    const int64_t it = trainer.iter();
    if (it % trainer.config().checkpoint_every == 0 || it == max_iter) {
      save_checkpoint(ckpt, model, trainer);
    }
    if (!quiet && it % 50 == 0) {
      std::cerr << "iter " << it << "/" << max_iter << "  "
                << format_metrics(result.last) << "\n";
    }
  }
  if (trainer.iter() > 0 && !fs::exists(ckpt)) {
    save_checkpoint(ckpt, model, trainer);
  }
  result.final_iter = trainer.iter();
  return result;
}

}  // namespace storyviz
