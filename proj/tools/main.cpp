// Operator entry points: dataset forging, training, generation, evaluation,
// and the four-variant ablation sweep.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "storyviz/checkpoint.hpp"
#include "storyviz/dataset.hpp"
#include "storyviz/eval.hpp"
#include "storyviz/model.hpp"
#include "storyviz/run.hpp"
#include "storyviz/ssim.hpp"
#include "storyviz/training.hpp"

namespace fs = std::filesystem;
using namespace storyviz;

namespace {

ObjectDescriptor parse_descriptor_tuple(const std::string& tuple) {
  std::vector<std::string> fields;
  std::istringstream is(tuple);
  std::string field;
  while (std::getline(is, field, ',')) {
    const size_t a = field.find_first_not_of(" \t");
    const size_t b = field.find_last_not_of(" \t");
    fields.push_back(a == std::string::npos ? "" : field.substr(a, b - a + 1));
  }
  SV_CHECK(fields.size() == 6,
           "descriptor tuple needs material,color,size,shape,x,y; got '", tuple, "'");
  ObjectDescriptor d;
  d.material = material_from_string(fields[0]);
  d.color = color_from_string(fields[1]);
  d.size = size_from_string(fields[2]);
  d.shape = shape_from_string(fields[3]);
  d.x = std::stod(fields[4]);
  d.y = std::stod(fields[5]);
  validate(d);
  return d;
}

// One story per line: four ';'-separated "material,color,size,shape,x,y"
// tuples. Blank lines and '#' comments are skipped.
std::vector<std::vector<ObjectDescriptor>> parse_story_file(const std::string& path) {
  std::ifstream f(path);
  SV_CHECK(f.good(), "cannot open story file: ", path);
  std::vector<std::vector<ObjectDescriptor>> stories;
  std::string line;
  while (std::getline(f, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<ObjectDescriptor> story;
    std::istringstream is(line);
    std::string tuple;
    while (std::getline(is, tuple, ';')) story.push_back(parse_descriptor_tuple(tuple));
    SV_CHECK(story.size() == static_cast<size_t>(kStoryLen), "story line needs ",
             kStoryLen, " descriptors, got ", story.size());
    stories.push_back(std::move(story));
  }
  SV_CHECK(!stories.empty(), "story file has no stories: ", path);
  return stories;
}

ModelF build_model_for(const TrainingConfig& cfg) {
  ModelConfig mc;
  mc.kind = cfg.variant;
  mc.story_len = kStoryLen;
  mc.noise_dim = cfg.noise_dim;
  mc.init_seed = Rng::derive_seed(cfg.seed, 0x696e6974ull);
  return ModelF(mc);
}

int cmd_dataset(const std::string& out, int64_t n_train, int64_t n_test,
                uint64_t seed) {
  build_dataset(n_train, n_test, seed, out);
  std::cout << "dataset: " << n_train << " train / " << n_test << " test stories at "
            << out << "\n";
  return 0;
}

int cmd_train(const std::string& dataset_path, const std::string& out,
              const TrainingConfig& cfg, bool quiet) {
  Dataset ds = load_dataset(dataset_path);
  ModelF model = build_model_for(cfg);
  Trainer<float> trainer(model, ds.train, cfg);
  auto result = run_training(model, trainer, out, quiet);
  std::cout << "trained " << to_string(cfg.variant) << " to iteration "
            << result.final_iter << "; checkpoint at " << checkpoint_path(out) << "\n";
  return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& input,
                 const std::string& out, uint64_t seed) {
  const CheckpointHeader header = checkpoint_header(ckpt);
  TrainingConfig cfg = header.config;
  ModelF model = build_model_for(cfg);
  load_checkpoint_model(ckpt, model);

  const auto stories = parse_story_file(input);
  fs::create_directories(out);
  for (size_t i = 0; i < stories.size(); ++i) {
    Rng rng = Rng::derive(seed, static_cast<uint64_t>(i));
    TensorF frames = model.generate_story(stories[i], rng);
    for (int64_t t = 0; t < kStoryLen; ++t) {
      TensorF frame({kFrameChannels, kFrameSize, kFrameSize});
      const int64_t n = frame.numel();
      for (int64_t j = 0; j < n; ++j) frame[j] = frames[t * n + j];
      std::ostringstream name;
      name << "story" << i << "_" << t << ".png";
      write_frame_png((fs::path(out) / name.str()).string(), frame);
    }
  }
  std::cout << "generated " << stories.size() * kStoryLen << " frames at " << out
            << "\n";
  return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& dataset_path,
                 const std::string& out, uint64_t seed, bool grid,
                 bool with_classifier, int64_t classifier_epochs) {
  const CheckpointHeader header = checkpoint_header(ckpt);
  ModelF model = build_model_for(header.config);
  load_checkpoint_model(ckpt, model);
  Dataset ds = load_dataset(dataset_path);
  SV_CHECK(!ds.test.empty(), "dataset has no test split");

  EvalReport report = evaluate_ssim(model, ds.test, seed);
  report.dataset_fingerprint = ds.fingerprint;

  if (with_classifier) {
    AttributeClassifier cls(Rng::derive_seed(seed, 0x636c73ull));
    cls.train(ds.train, classifier_epochs, seed);
    report.classifier_real_acc = cls.real_accuracy(ds.test);
    if (report.classifier_real_acc < 0.9) {
      std::cerr << "classifier unfit: real-frame accuracy "
                << report.classifier_real_acc << " < 0.9; aborting exact-match\n";
      return 2;
    }
    report.exact_match = exact_match_accuracy(cls, model, ds.test, seed);
  }

  fs::create_directories(out);
  {
    std::ofstream f((fs::path(out) / "report.kv").string(), std::ios::trunc);
    f << report.to_kv();
  }
  {
    std::ofstream f((fs::path(out) / "report.txt").string(), std::ios::trunc);
    f << report.to_table();
  }
  if (grid) {
    write_grid_png((fs::path(out) / "grid.png").string(), model, ds.test, seed);
  }
  std::cout << report.to_table();
  return 0;
}

int cmd_ablate(const std::string& dataset_path, const std::string& out,
               TrainingConfig cfg, bool quiet, int64_t classifier_epochs) {
  Dataset ds = load_dataset(dataset_path);

  AttributeClassifier cls(Rng::derive_seed(cfg.seed, 0x636c73ull));
  cls.train(ds.train, classifier_epochs, cfg.seed);
  const double real_acc = cls.real_accuracy(ds.test);
  std::cout << "classifier real-frame accuracy: " << real_acc << "\n";

  const VariantKind kinds[] = {VariantKind::kImageGan, VariantKind::kSvc,
                               VariantKind::kSvfn, VariantKind::kStoryGan};
  std::ostringstream table;
  table << "variant      ssim      exact_match\n";
  for (VariantKind kind : kinds) {
    TrainingConfig vcfg = cfg;
    vcfg.variant = kind;
    const std::string run_dir =
        (fs::path(out) / (std::string(to_string(kind)) + "_seed" +
                          std::to_string(cfg.seed))).string();
    ModelF model = build_model_for(vcfg);
    Trainer<float> trainer(model, ds.train, vcfg);
    run_training(model, trainer, run_dir, quiet);

    EvalReport report = evaluate_ssim(model, ds.test, cfg.seed);
    report.dataset_fingerprint = ds.fingerprint;
    report.classifier_real_acc = real_acc;
    if (real_acc >= 0.9) {
      report.exact_match = exact_match_accuracy(cls, model, ds.test, cfg.seed);
    }
    {
      std::ofstream f((fs::path(run_dir) / "eval.kv").string(), std::ios::trunc);
      f << report.to_kv();
    }
    char row[128];
    std::snprintf(row, sizeof(row), "%-12s %-9.4f %-9.4f", to_string(kind),
                  report.global_mean, report.exact_match);
    table << row << "\n";
    std::cout << row << "\n";
  }
  fs::create_directories(out);
  std::ofstream f((fs::path(out) / "ablation.txt").string(), std::ios::trunc);
  f << "classifier_real_acc " << real_acc << "\n" << table.str();
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sequential conditional GAN for story visualization"};
  app.require_subcommand(1);

  std::string dataset_out = "dataset";
  int64_t n_train = 8, n_test = 4;
  uint64_t dataset_seed = 7;
  auto* c_dataset = app.add_subcommand("dataset", "build a procedural dataset");
  c_dataset->add_option("--out", dataset_out, "output directory");
  c_dataset->add_option("--n-train", n_train, "training stories");
  c_dataset->add_option("--n-test", n_test, "test stories");
  c_dataset->add_option("--seed", dataset_seed, "dataset seed");

  std::string train_dataset, train_out = "run", config_path, variant_name;
  uint64_t train_seed = 0;
  int64_t max_iter = -1;
  bool quiet = false;
  bool seed_given = false, variant_given = false;
  auto* c_train = app.add_subcommand("train", "train one variant");
  c_train->add_option("--dataset", train_dataset, "dataset directory")->required();
  c_train->add_option("--out", train_out, "run directory");
  c_train->add_option("--config", config_path, "key=value config file");
  c_train->add_option("--seed", train_seed, "training seed (overrides config)")
      ->each([&](const std::string&) { seed_given = true; });
  c_train->add_option("--variant", variant_name,
                      "imagegan|svc|svfn|storygan (overrides config)")
      ->each([&](const std::string&) { variant_given = true; });
  c_train->add_option("--max-iter", max_iter, "outer iterations (overrides config)");
  c_train->add_flag("--quiet", quiet, "suppress progress output");

  std::string gen_ckpt, gen_input, gen_out = "generated";
  uint64_t gen_seed = 0;
  auto* c_generate = app.add_subcommand("generate", "render stories from descriptors");
  c_generate->add_option("--checkpoint", gen_ckpt, "trained checkpoint")->required();
  c_generate->add_option("--input", gen_input, "descriptor story file")->required();
  c_generate->add_option("--out", gen_out, "output directory");
  c_generate->add_option("--seed", gen_seed, "generation seed");

  std::string eval_ckpt, eval_dataset, eval_out = "eval";
  uint64_t eval_seed = 0;
  bool grid = false, no_classifier = false;
  int64_t classifier_epochs = 3;
  auto* c_evaluate = app.add_subcommand("evaluate", "SSIM + exact-match report");
  c_evaluate->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  c_evaluate->add_option("--dataset", eval_dataset, "dataset directory")->required();
  c_evaluate->add_option("--out", eval_out, "report directory");
  c_evaluate->add_option("--seed", eval_seed, "evaluation seed");
  c_evaluate->add_flag("--grid", grid, "emit grid.png contact sheet");
  c_evaluate->add_flag("--no-classifier", no_classifier, "skip exact-match scoring");
  c_evaluate->add_option("--classifier-epochs", classifier_epochs,
                         "classifier training epochs");

  std::string ablate_dataset, ablate_out = "runs";
  auto* c_ablate = app.add_subcommand("ablate", "train and score all four variants");
  c_ablate->add_option("--dataset", ablate_dataset, "dataset directory")->required();
  c_ablate->add_option("--out", ablate_out, "runs directory");
  c_ablate->add_option("--config", config_path, "key=value config file");
  c_ablate->add_option("--seed", train_seed, "training seed (overrides config)")
      ->each([&](const std::string&) { seed_given = true; });
  c_ablate->add_option("--max-iter", max_iter, "outer iterations (overrides config)");
  c_ablate->add_flag("--quiet", quiet, "suppress progress output");
  c_ablate->add_option("--classifier-epochs", classifier_epochs,
                       "classifier training epochs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(c_dataset)) {
      return cmd_dataset(dataset_out, n_train, n_test, dataset_seed);
    }
    TrainingConfig cfg;
    if (!config_path.empty()) cfg = TrainingConfig::from_file(config_path);
    if (seed_given) cfg.seed = train_seed;
    if (variant_given) cfg.variant = variant_from_string(variant_name);
    if (max_iter >= 0) cfg.max_iter = max_iter;
    cfg.validate();

    if (app.got_subcommand(c_train)) {
      return cmd_train(train_dataset, train_out, cfg, quiet);
    }
    if (app.got_subcommand(c_generate)) {
      return cmd_generate(gen_ckpt, gen_input, gen_out, gen_seed);
    }
    if (app.got_subcommand(c_evaluate)) {
      return cmd_evaluate(eval_ckpt, eval_dataset, eval_out, eval_seed, grid,
                          !no_classifier, classifier_epochs);
    }
    if (app.got_subcommand(c_ablate)) {
      return cmd_ablate(ablate_dataset, ablate_out, cfg, quiet, classifier_epochs);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
