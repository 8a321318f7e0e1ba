// dair: dataset generation, training, evaluation and figure output.
//
// Exit status: 0 success, 1 usage error, 2 runtime failure. Errors go to
// stderr as a single line "dair: error <CODE>: <message>".

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "dair/datasets.hpp"
#include "dair/metrics.hpp"
#include "dair/model.hpp"
#include "dair/png.hpp"
#include "dair/selftest.hpp"
#include "dair/training.hpp"

namespace {

using namespace dair;

struct Failure {
  int status;
  std::string code;
  std::string message;
};

[[noreturn]] void fail(int status, std::string code, std::string message) {
  throw Failure{status, std::move(code), std::move(message)};
}

void print_config(const CLI::App& sub) {
  std::cout << "# resolved configuration: " << sub.get_name() << "\n" << sub.config_to_str(true, false) << std::flush;
}

Dataset load_dataset(const std::string& path) {
  try {
    return read_dataset(path);
  } catch (const FormatError& e) {
    fail(2, "E_FORMAT", e.what());
  } catch (const std::runtime_error& e) {
    fail(2, "E_IO", e.what());
  }
}

// ---------------------------------------------------------------- gen-*

struct GenSpritesArgs {
  std::uint32_t count = 1000;
  std::uint64_t seed = 1;
  std::string out;
  SpriteConfig cfg;
};

void run_gen_sprites(const GenSpritesArgs& a) {
  Dataset ds = gen_multi_sprites(a.count, a.seed, a.cfg);
  write_dataset(ds, a.out);
  std::cout << "wrote " << ds.records.size() << " records to " << a.out << "\n";
}

struct GenMnistArgs {
  std::uint32_t count = 1000;
  std::uint64_t seed = 1;
  std::string out, images, labels;
  MnistConfig cfg;
};

void run_gen_mnist(const GenMnistArgs& a) {
  MnistSource src;
  try {
    src = MnistSource::load(a.images, a.labels);
  } catch (const FormatError& e) {
    fail(2, "E_FORMAT", e.what());
  }
  Dataset ds = gen_multi_mnist(a.count, src, a.seed, a.cfg);
  write_dataset(ds, a.out);
  std::cout << "wrote " << ds.records.size() << " records to " << a.out << "\n";
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data, out = "model.ckpt", log, resume;
  int precision = 32;
  ModelConfig model;
  TrainConfig train;
  double clip = 5.0;
  std::size_t max_steps = 0, categories = 0;  // 0: take from the dataset header
  std::string combiner = "additive";
};

template <class T>
void train_with(TrainArgs a) {
  Dataset ds = load_dataset(a.data);
  std::unique_ptr<TrainState<T>> state;
  if (!a.resume.empty()) {
    state = std::make_unique<TrainState<T>>(load_checkpoint<T>(a.resume));
    state->train.total_steps = a.train.total_steps;
    std::cout << "resuming from step " << state->step << "\n";
  } else {
    a.model.canvas_h = ds.header.height;
    a.model.canvas_w = ds.header.width;
    a.model.max_steps = a.max_steps ? a.max_steps : std::max<std::size_t>(1, ds.header.max_objects);
    a.model.num_categories = a.categories ? a.categories : ds.header.num_categories;
    a.model.combiner = parse_combiner(a.combiner);
    a.train.grad_clip_norm = a.clip > 0 ? std::optional<double>(a.clip) : std::nullopt;
    a.model.validate();
    a.train.validate();
    state = std::make_unique<TrainState<T>>(a.model, a.train);
  }
  std::cout << "model parameters: " << state->model.params().scalar_count() << "\n";
  TrainHooks hooks;
  hooks.checkpoint_path = a.out;
  hooks.csv_path = a.log;
  auto start = std::chrono::steady_clock::now();
  hooks.on_log = [&](const LogRow& r) {
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << "step " << r.step << " loss " << r.total << " nll " << r.nll << " kl_where " << r.kl_where
              << " kl_cat " << r.kl_cat << " kl_attr " << r.kl_attr << " kl_pres " << r.kl_pres << " tau " << r.tau
              << " (" << secs << " s)\n"
              << std::flush;
  };
  try {
    train(*state, ds, hooks);
  } catch (const NonFiniteError& e) {
    fail(2, "E_NONFINITE", std::string(e.what()) + "; last good checkpoint kept at " + a.out);
  }
  std::cout << "trained to step " << state->step << ", checkpoint " << a.out << "\n";
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, data, report, csv;
  double radius = 10.0;
};

template <class T>
void eval_with(const EvalArgs& a) {
  TrainState<T> s = load_checkpoint<T>(a.checkpoint);
  Dataset ds = load_dataset(a.data);
  Evaluation ev = evaluate(s.model, ds, s.tau, a.radius);
  std::string kv = ev.report.key_values();
  std::cout << kv;
  if (!a.report.empty()) {
    std::ofstream(a.report) << kv;
  }
  if (!a.csv.empty()) {
    bool fresh = !std::filesystem::exists(a.csv);
    std::ofstream out(a.csv, std::ios::app);
    if (fresh) out << MetricsReport::csv_header() << "\n";
    out << ev.report.csv_row(s.step) << "\n";
  }
}

// ---------------------------------------------------------------- reconstruct

struct ReconstructArgs {
  std::string checkpoint, data, out = "reconstruction.png";
  std::size_t count = 8, first = 0, pad = 2;
};

template <class T>
void reconstruct_with(const ReconstructArgs& a) {
  TrainState<T> s = load_checkpoint<T>(a.checkpoint);
  Dataset ds = load_dataset(a.data);
  if (a.first >= ds.records.size()) fail(1, "E_USAGE", "--first is past the end of the dataset");
  Dataset part;
  part.header = ds.header;
  for (std::size_t i = a.first; i < std::min(ds.records.size(), a.first + a.count); ++i) part.records.push_back(ds.records[i]);
  part.header.count = static_cast<std::uint32_t>(part.records.size());
  Evaluation ev = evaluate(s.model, part, s.tau);
  const std::size_t h = ds.header.height, w = ds.header.width;
  std::vector<RgbImage> inputs, recons;
  for (std::size_t i = 0; i < part.records.size(); ++i) {
    std::vector<double> gray;
    for (auto p : part.records[i].image) gray.push_back(p / 255.0);
    RgbImage in = RgbImage::from_gray(gray, w, h);
    RgbImage rec = RgbImage::from_gray(ev.inference.reconstructions[i], w, h);
    for (const auto& d : ev.inference.detections[i]) {
      Rgb c = step_palette[d.step % step_palette.size()];
      auto x0 = static_cast<long>(std::floor(d.box_x0)), y0 = static_cast<long>(std::floor(d.box_y0));
      auto x1 = static_cast<long>(std::ceil(d.box_x1)), y1 = static_cast<long>(std::ceil(d.box_y1));
      draw_box(in, x0, y0, x1, y1, c);
      draw_box(rec, x0, y0, x1, y1, c);
    }
    draw_number(in, 1, 1, ev.inference.detections[i].size(), {255, 255, 255});
    inputs.push_back(std::move(in));
    recons.push_back(std::move(rec));
  }
  std::vector<RgbImage> tiles = inputs;
  tiles.insert(tiles.end(), recons.begin(), recons.end());
  write_png(a.out, grid(tiles, inputs.size(), a.pad));
  std::cout << "wrote " << a.out << " (" << inputs.size() << " inputs over their reconstructions)\n";
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string checkpoint, spec, out = "generated.png";
};

template <class T>
void generate_with(const GenerateArgs& a) {
  TrainState<T> s = load_checkpoint<T>(a.checkpoint);
  const auto& mc = s.model.config();
  std::ifstream in(a.spec);
  if (!in) fail(2, "E_IO", "cannot open " + a.spec);
  std::vector<ObjectSpec> spec;
  try {
    spec = parse_scene_spec(in, mc);
  } catch (const std::invalid_argument& e) {
    fail(2, "E_SPEC", a.spec + ":" + e.what());
  }
  Tensor<T> img = s.model.generate_scene(spec);
  std::vector<double> gray(img.numel());
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = static_cast<double>(img[i]);
  write_png(a.out, RgbImage::from_gray(gray, mc.canvas_w, mc.canvas_h));
  std::cout << "wrote " << a.out << " with " << spec.size() << " objects\n";
}

template <class F>
void with_precision(const std::string& checkpoint, F&& f) {
  CheckpointInfo info;
  try {
    info = read_checkpoint_info(checkpoint);
  } catch (const FormatError& e) {
    fail(2, "E_FORMAT", e.what());
  } catch (const std::runtime_error& e) {
    fail(2, "E_IO", e.what());
  }
  if (info.element_bits == 64) {
    f(double{});
  } else {
    f(float{});
  }
}

void add_model_options(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--glimpse-h", a.model.glimpse_h, "Glimpse height")->capture_default_str();
  sub->add_option("--glimpse-w", a.model.glimpse_w, "Glimpse width")->capture_default_str();
  sub->add_option("--max-steps", a.max_steps, "Inference steps (0: dataset max objects)")->capture_default_str();
  sub->add_option("--categories", a.categories, "Number of categories k (0: from dataset)")->capture_default_str();
  sub->add_option("--attr-dim", a.model.attr_dim, "Continuous attribute dimension")->capture_default_str();
  sub->add_option("--rnn-hidden", a.model.rnn_hidden, "Recurrent cell width")->capture_default_str();
  sub->add_option("--enc-hidden", a.model.enc_hidden, "Glimpse encoder width")->capture_default_str();
  sub->add_option("--dec-hidden", a.model.dec_hidden, "Decoder widths")->capture_default_str();
  sub->add_option("--combiner", a.combiner, "additive | multiplicative | convolutional")
      ->check(CLI::IsMember({"additive", "multiplicative", "convolutional"}))
      ->capture_default_str();
  sub->add_option("--kernel-size", a.model.kernel_size, "Convolutional combiner kernel size")->capture_default_str();
  sub->add_flag("--shear", a.model.enable_shear, "Enable the shear factor");
  sub->add_flag("--merge-rot-shear", a.model.merge_rot_shear, "Merge rotation and shear into one block");
  sub->add_option("--sigma-x", a.model.sigma_x, "Pixel likelihood std")->capture_default_str();
  sub->add_option("--continue-prob", a.model.continue_prob, "Geometric prior continuation probability")
      ->capture_default_str();
}

void add_train_options(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--steps", a.train.total_steps, "Total training steps")->capture_default_str();
  sub->add_option("--batch", a.train.batch_size, "Batch size")->capture_default_str();
  sub->add_option("--lr", a.train.learning_rate, "Adam learning rate")->capture_default_str();
  sub->add_option("--beta1", a.train.beta1, "Adam beta1")->capture_default_str();
  sub->add_option("--beta2", a.train.beta2, "Adam beta2")->capture_default_str();
  sub->add_option("--adam-eps", a.train.adam_eps, "Adam epsilon")->capture_default_str();
  sub->add_option("--clip", a.clip, "Global gradient-norm clip (0 disables)")->capture_default_str();
  sub->add_option("--eval-every", a.train.eval_every, "Log interval in steps")->capture_default_str();
  sub->add_option("--checkpoint-every", a.train.checkpoint_every, "Checkpoint interval in steps")->capture_default_str();
  sub->add_option("--seed", a.train.seed, "Seed for init, noise and shuffling")->capture_default_str();
  sub->add_option("--tau0", a.train.anneal.tau0, "Initial temperature")->capture_default_str();
  sub->add_option("--tau-min", a.train.anneal.tau_min, "Temperature floor")->capture_default_str();
  sub->add_option("--anneal-rate", a.train.anneal.rate, "Temperature decay per step")->capture_default_str();
  sub->add_option("--anneal-every", a.train.anneal.anneal_every, "Steps between temperature updates")
      ->capture_default_str();
  sub->add_option("--precision", a.precision, "Element width: 32 or 64")->check(CLI::IsMember({32, 64}))->capture_default_str();
}

// Expands "--config FILE" into "--key=value" arguments placed ahead of the
// command line ones, skipping keys the command line sets itself.
std::vector<std::string> with_config_defaults(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string path;
  std::vector<std::string> given;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) continue;
    std::string key = a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2);
    if (key == "config") {
      if (a.find('=') != std::string::npos) {
        path = a.substr(a.find('=') + 1);
      } else if (i + 1 < args.size()) {
        path = args[i + 1];
      }
    }
    given.push_back(key);
  }
  if (!path.empty() && !args.empty()) {
    std::ifstream in(path);
    if (!in) fail(2, "E_IO", "cannot open config file " + path);
    std::vector<std::string> defaults;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = line.substr(0, line.find('#'));
      auto trim = [](std::string v) {
        auto b = v.find_first_not_of(" \t\r"), e = v.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) fail(1, "E_CONFIG", path + ":" + std::to_string(lineno) + ": expected key=value");
      std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      if (std::find(given.begin(), given.end(), key) != given.end()) continue;
      defaults.push_back("--" + key + "=" + value);
    }
    args.insert(args.begin() + 1, defaults.begin(), defaults.end());
  }
  std::reverse(args.begin(), args.end());
  return args;
}

int run(int argc, char** argv) {
  std::string config_path;
  CLI::App app{"Discrete latent scene decomposition: datasets, training, evaluation and figures", "dair"};
  app.require_subcommand(1);
  app.fallthrough(false);

  GenSpritesArgs gs;
  auto* sprites = app.add_subcommand("gen-sprites", "Generate a Multi-Sprites dataset");
  sprites->add_option("--config", config_path, "key=value file of option defaults");
  sprites->add_option("--count", gs.count, "Number of images")->capture_default_str();
  sprites->add_option("--seed", gs.seed, "Generator seed")->capture_default_str();
  sprites->add_option("--out", gs.out, "Output DAIR file")->required();
  sprites->add_option("--height", gs.cfg.height, "Image height")->capture_default_str();
  sprites->add_option("--width", gs.cfg.width, "Image width")->capture_default_str();
  sprites->add_option("--max-objects", gs.cfg.max_objects, "Maximum objects per image")->capture_default_str();
  sprites->add_option("--min-scale", gs.cfg.min_scale, "Smallest object scale")->capture_default_str();
  sprites->add_option("--max-scale", gs.cfg.max_scale, "Largest object scale")->capture_default_str();

  GenMnistArgs gm;
  auto* mnist = app.add_subcommand("gen-mnist", "Compose a Multi-MNIST dataset from IDX digit files");
  mnist->add_option("--config", config_path, "key=value file of option defaults");
  mnist->add_option("--count", gm.count, "Number of images")->capture_default_str();
  mnist->add_option("--seed", gm.seed, "Generator seed")->capture_default_str();
  mnist->add_option("--out", gm.out, "Output DAIR file")->required();
  mnist->add_option("--images", gm.images, "IDX digit images (optionally gzipped)")->required();
  mnist->add_option("--labels", gm.labels, "IDX digit labels (optionally gzipped)")->required();
  mnist->add_option("--height", gm.cfg.height, "Image height")->capture_default_str();
  mnist->add_option("--width", gm.cfg.width, "Image width")->capture_default_str();
  mnist->add_option("--max-digits", gm.cfg.max_digits, "Maximum digits per image")->capture_default_str();

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Train on a DAIR dataset");
  trainc->add_option("--config", config_path, "key=value file of option defaults");
  trainc->add_option("--data", ta.data, "Training DAIR file")->required();
  trainc->add_option("--out", ta.out, "Checkpoint path")->capture_default_str();
  trainc->add_option("--log", ta.log, "CSV log path");
  trainc->add_option("--resume", ta.resume, "Resume from this checkpoint (its configuration wins)");
  add_model_options(trainc, ta);
  add_train_options(trainc, ta);

  EvalArgs ea;
  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint on a DAIR dataset");
  evalc->add_option("--config", config_path, "key=value file of option defaults");
  evalc->add_option("--checkpoint", ea.checkpoint, "Checkpoint path")->required();
  evalc->add_option("--data", ea.data, "Evaluation DAIR file")->required();
  evalc->add_option("--report", ea.report, "Write key=value metrics here");
  evalc->add_option("--csv", ea.csv, "Append a CSV row here");
  evalc->add_option("--radius", ea.radius, "Matching radius in pixels")->capture_default_str();

  ReconstructArgs ra;
  auto* recon = app.add_subcommand("reconstruct", "Write inputs with detections over their reconstructions");
  recon->add_option("--config", config_path, "key=value file of option defaults");
  recon->add_option("--checkpoint", ra.checkpoint, "Checkpoint path")->required();
  recon->add_option("--data", ra.data, "DAIR file")->required();
  recon->add_option("--out", ra.out, "Output PNG")->capture_default_str();
  recon->add_option("--count", ra.count, "Number of images")->capture_default_str();
  recon->add_option("--first", ra.first, "Index of the first image")->capture_default_str();
  recon->add_option("--pad", ra.pad, "Padding around each tile")->capture_default_str();

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Render a scene from a spec file");
  gen->add_option("--config", config_path, "key=value file of option defaults");
  gen->add_option("--checkpoint", ga.checkpoint, "Checkpoint path")->required();
  gen->add_option("--spec", ga.spec, "Scene spec: category attr t_x t_y s omega [k_x k_y] per line")->required();
  gen->add_option("--out", ga.out, "Output PNG")->capture_default_str();

  auto* self = app.add_subcommand("selftest", "Run the property suite");

  try {
    app.parse(with_config_defaults(argc, argv));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (argc <= 1) {
      std::cerr << app.help();
    } else {
      std::cerr << "dair: error E_USAGE: " << e.what() << "\n";
    }
    return 1;
  }

  auto* sub = app.get_subcommands().front();
  print_config(*sub);
  if (sub == sprites) run_gen_sprites(gs);
  if (sub == mnist) run_gen_mnist(gm);
  if (sub == trainc) {
    if (ta.precision == 64) {
      train_with<double>(ta);
    } else {
      train_with<float>(ta);
    }
  }
  if (sub == evalc) with_precision(ea.checkpoint, [&](auto t) { eval_with<decltype(t)>(ea); });
  if (sub == recon) with_precision(ra.checkpoint, [&](auto t) { reconstruct_with<decltype(t)>(ra); });
  if (sub == gen) with_precision(ga.checkpoint, [&](auto t) { generate_with<decltype(t)>(ga); });
  if (sub == self) return run_selftest(std::cout) ? 0 : 2;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Failure& f) {
    std::cerr << "dair: error " << f.code << ": " << f.message << "\n";
    return f.status;
  } catch (const dair::FormatError& e) {
    std::cerr << "dair: error E_FORMAT: " << e.what() << "\n";
  } catch (const dair::ShapeError& e) {
    std::cerr << "dair: error E_SHAPE: " << e.what() << "\n";
  } catch (const std::invalid_argument& e) {
    std::cerr << "dair: error E_CONFIG: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "dair: error E_RUNTIME: " << e.what() << "\n";
  }
  return 2;
}
