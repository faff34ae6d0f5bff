// swiftsr command-line tool: upscale, bench, train, eval, inspect.
// Exit codes: 0 success, 1 internal error, 2 user or input error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "swiftsr/bench.hpp"
#include "swiftsr/checkpoint.hpp"
#include "swiftsr/config.hpp"
#include "swiftsr/metrics.hpp"
#include "swiftsr/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace swiftsr;

namespace {

// Input problems the user can fix.
struct UsageError : Error {
  using Error::Error;
};

json score_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return nullptr;
  return v;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw UsageError("cannot write '" + path.string() + "'");
  f << j.dump(2) << '\n';
}

ModelGraph load_generator(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("checkpoint '" + path.string() + "' does not exist");
  LoadedCheckpoint ck = load_checkpoint(path);
  if (ck.model.topology() != Topology::Generator) {
    throw UsageError("'" + path.string() + "' holds a " + topology_name(ck.model.topology()) +
                     ", not a generator");
  }
  return std::move(ck.model);
}

void apply_threads(int flag) {
  int n = flag;
  if (n <= 0) {
    if (const char* env = std::getenv("SWIFT_SR_THREADS")) {
      try {
        n = std::stoi(env);
      } catch (const std::exception&) {
        throw UsageError(std::string("SWIFT_SR_THREADS is not an integer: '") + env + "'");
      }
    }
  }
  detail::set_blas_threads(n);
}

// --- upscale ---------------------------------------------------------------

struct UpscaleArgs {
  std::string model, input, output, reference;
  std::size_t scale = 4;
};

int cmd_upscale(const UpscaleArgs& a) {
  ModelGraph g = load_generator(a.model);
  const std::size_t r = generator_config(g).upscale_factor;
  if (r != a.scale) {
    throw UsageError("checkpoint upscales by " + std::to_string(r) + " but --scale is " + std::to_string(a.scale));
  }
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    inputs = list_images(a.input);
    if (inputs.empty()) throw UsageError("no images in '" + a.input + "'");
  } else if (fs::exists(a.input)) {
    inputs.push_back(a.input);
  } else {
    throw UsageError("input '" + a.input + "' does not exist");
  }
  fs::create_directories(a.output);
  for (const auto& in : inputs) {
    const Image img = load_image(in);
    Tensor sr = g.forward(stack({img.pixels}, 1.0f / 255.0f), Pass::eval());
    for (float& v : sr.data()) v = std::clamp(std::round(v * 255.0f), 0.0f, 255.0f);
    std::string scores;
    if (!a.reference.empty()) {
      const fs::path ref = fs::is_directory(a.reference) ? fs::path(a.reference) / in.filename() : fs::path(a.reference);
      const PairScore s = score_pair(in.filename().string(), sr, load_image(ref).pixels);
      scores = " psnr " + format_score(s.psnr) + " ssim " + format_score(s.ssim);
    }
    const fs::path out = fs::path(a.output) / in.filename();
    save_image(sr, out);
    std::cout << in.filename().string() << ": " << img.pixels.shape().w << "x" << img.pixels.shape().h << " -> "
              << sr.shape().w << "x" << sr.shape().h << " " << out.string() << scores;
    std::cout << '\n';
  }
  return 0;
}

// --- bench -----------------------------------------------------------------

struct BenchArgs {
  std::string model, in_res = "64x64", variant = "dsconv", json_path;
  std::size_t iters = 20, warmup = 10;
};

int cmd_bench(const BenchArgs& a) {
  const auto [w, h] = parse_resolution(a.in_res);
  if (a.iters < 1) throw UsageError("--iters must be >= 1");
  GeneratorConfig cfg;
  if (!a.model.empty()) cfg = generator_config(load_generator(a.model));
  // Timing does not depend on weight values, so the twin gets a fresh init.
  ModelGraph m = a.variant == "standard" ? build_standard_conv_twin(cfg, 0)
                 : a.model.empty()        ? build_generator(cfg, 0)
                                          : load_generator(a.model);
  const BenchReport r = run_bench(m, w, h, a.warmup, a.iters, a.variant);

  std::cout << std::fixed << std::setprecision(3) << "variant     " << r.variant << '\n'
            << "input       " << r.in_w << "x" << r.in_h << '\n'
            << "output      " << r.out_w << "x" << r.out_h << '\n'
            << "warmup      " << r.warmup << '\n'
            << "iterations  " << r.iters << '\n'
            << "threads     " << r.threads << '\n'
            << "ms min      " << r.min_ms << '\n'
            << "ms median   " << r.median_ms << '\n'
            << "ms p95      " << r.p95_ms << '\n'
            << "ms mean     " << r.mean_ms << '\n'
            << "fps         " << r.fps << '\n'
            << "GMAC/frame  " << static_cast<double>(r.macs) * 1e-9 << '\n';
  if (!a.json_path.empty()) {
    json j;
    j["variant"] = r.variant;
    j["input"] = {{"width", r.in_w}, {"height", r.in_h}};
    j["output"] = {{"width", r.out_w}, {"height", r.out_h}};
    j["warmup"] = r.warmup;
    j["iterations"] = r.iters;
    j["threads"] = r.threads;
    j["ms"] = {{"min", r.min_ms}, {"median", r.median_ms}, {"p95", r.p95_ms}, {"mean", r.mean_ms}};
    j["fps"] = r.fps;
    j["macs"] = r.macs;
    j["samples_ms"] = r.samples_ms;
    write_json(a.json_path, j);
  }
  return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data, val, config, out = "runs";
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string resume;
  std::size_t log_every = 10;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) {
    if (!fs::exists(a.config)) throw UsageError("config '" + a.config + "' does not exist");
    cfg = load_config(a.config);
  }
  if (a.seed_set) cfg.seed = a.seed;
  validate_config(cfg);
  if (!fs::is_directory(a.data)) throw UsageError("--data '" + a.data + "' is not a directory");
  if (!a.val.empty() && !fs::is_directory(a.val)) throw UsageError("--val '" + a.val + "' is not a directory");

  FitOptions opt;
  opt.train_dir = a.data;
  opt.val_dir = a.val;
  opt.out_dir = a.out;
  opt.epochs = a.epochs;
  if (!a.resume.empty()) opt.resume = a.resume;
  opt.on_step = [&](const TrainState& s, const LossReport& r) {
    if (a.log_every && s.step % a.log_every == 0) {
      std::cout << "epoch " << s.epoch + 1 << " step " << s.step << " content " << format_score(r.content)
                << " adversarial " << format_score(r.adversarial) << " perceptual " << format_score(r.perceptual)
                << " d_loss " << format_score(r.discriminator) << std::endl;
    }
  };
  const FitResult res = fit(cfg, opt);
  std::cout << "epochs run " << res.epochs_run << ", steps " << res.steps << ", best val perceptual "
            << format_score(res.best_val_perceptual) << '\n'
            << "checkpoint " << res.last_checkpoint.string() << '\n'
            << "metrics    " << res.metric_log.string() << '\n';
  return 0;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string sr, hr, json_path, csv_path;
  bool luma = false;
};

int cmd_eval(const EvalArgs& a) {
  for (const auto& d : {a.sr, a.hr}) {
    if (!fs::is_directory(d)) throw UsageError("'" + d + "' is not a directory");
  }
  EvalOptions opt;
  opt.luma = a.luma;
  const EvalReport rep = evaluate_pair_directory(a.sr, a.hr, opt);
  for (const auto& row : rep.rows) {
    std::cout << row.name << "  psnr " << format_score(row.psnr) << " dB  ssim " << format_score(row.ssim) << '\n';
  }
  std::cout << "mean (" << rep.rows.size() << " images, " << (a.luma ? "luma" : "rgb") << ")  psnr "
            << format_score(rep.psnr_mean) << " dB  ssim " << format_score(rep.ssim_mean) << '\n';
  if (!a.csv_path.empty()) {
    std::ofstream f(a.csv_path);
    if (!f) throw UsageError("cannot write '" + a.csv_path + "'");
    write_eval_csv(f, rep);
  }
  if (!a.json_path.empty()) {
    json j;
    j["channel"] = a.luma ? "luma" : "rgb";
    j["count"] = rep.rows.size();
    j["psnr_mean"] = score_json(rep.psnr_mean);
    j["ssim_mean"] = score_json(rep.ssim_mean);
    j["images"] = json::array();
    for (const auto& row : rep.rows) {
      j["images"].push_back({{"name", row.name}, {"psnr", score_json(row.psnr)}, {"ssim", score_json(row.ssim)}});
    }
    write_json(a.json_path, j);
  }
  return 0;
}

// --- inspect ---------------------------------------------------------------

struct InspectArgs {
  std::string model, json_path;
};

int cmd_inspect(const InspectArgs& a) {
  if (!fs::exists(a.model)) throw UsageError("checkpoint '" + a.model + "' does not exist");
  LoadedCheckpoint ck = load_checkpoint(a.model);
  ModelGraph& m = ck.model;
  const auto rows = parameter_table(m);
  json j;
  j["topology"] = topology_name(m.topology());
  j["layers"] = json::array();
  std::cout << "topology " << topology_name(m.topology()) << '\n';
  std::cout << std::left << std::setw(34) << "layer" << std::setw(12) << "kind" << std::right << std::setw(10)
            << "weights" << std::setw(8) << "biases" << '\n';
  for (const auto& r : rows) {
    std::cout << std::left << std::setw(34) << r.path << std::setw(12) << r.kind << std::right << std::setw(10)
              << r.weights << std::setw(8) << r.biases << '\n';
    j["layers"].push_back({{"path", r.path}, {"kind", r.kind}, {"weights", r.weights}, {"biases", r.biases}});
  }
  const std::size_t all = count_parameters(m, true, false), all_nb = count_parameters(m, false, false);
  const std::size_t conv = count_parameters(m, true, true), conv_nb = count_parameters(m, false, true);
  std::cout << "learnable total          " << all << '\n'
            << "learnable without biases " << all_nb << '\n'
            << "conv weights + biases    " << conv << '\n'
            << "conv weights only        " << conv_nb << '\n';
  j["totals"] = {{"learnable", all}, {"learnable_no_bias", all_nb}, {"conv", conv}, {"conv_no_bias", conv_nb}};

  if (m.topology() == Topology::Generator) {
    GeneratorConfig cfg = generator_config(m);
    ModelGraph twin = build_standard_conv_twin(cfg, 0);
    const std::size_t twin_nb = count_parameters(twin, false, true);
    const double ratio = static_cast<double>(twin_nb) / static_cast<double>(conv_nb);
    if (cfg.conv == ConvKind::DepthwiseSeparable) {
      std::cout << "standard twin conv only  " << twin_nb << '\n'
                << "twin / this              " << std::fixed << std::setprecision(3) << ratio << '\n';
      j["standard_twin_conv_no_bias"] = twin_nb;
      j["ratio"] = ratio;
    }
  } else if (m.topology() == Topology::Discriminator) {
    std::size_t blocks = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      const std::string head = "block" + std::to_string(i) + ".";
      bool bn = false;
      for (const auto& r : rows) bn |= r.path.rfind(head, 0) == 0 && r.kind == "batch_norm";
      std::cout << "block" << i << " dsconv" << (bn ? " + batch_norm" : " (no batch_norm)") << '\n';
      j["blocks"].push_back({{"name", "block" + std::to_string(i)}, {"batch_norm", bn}});
      ++blocks;
    }
  }
  if (!a.json_path.empty()) write_json(a.json_path, j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"swiftsr: depthwise-separable super-resolution"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "BLAS worker cap (default: SWIFT_SR_THREADS or library default)");

  UpscaleArgs up;
  auto* c_up = app.add_subcommand("upscale", "Super-resolve an image or a directory of images");
  c_up->add_option("--model", up.model, "Generator checkpoint")->required();
  c_up->add_option("--input", up.input, "Image file or directory")->required();
  c_up->add_option("--output", up.output, "Output directory")->required();
  c_up->add_option("--scale", up.scale, "Expected upscale factor")->capture_default_str();
  c_up->add_option("--reference", up.reference, "HR image or directory; prints PSNR/SSIM");

  BenchArgs bn;
  auto* c_bn = app.add_subcommand("bench", "Time generator forwards");
  c_bn->add_option("--model", bn.model, "Generator checkpoint (default: fresh default generator)");
  c_bn->add_option("--in-res", bn.in_res, "WxH, 270p or 540p")->capture_default_str();
  c_bn->add_option("--iters", bn.iters, "Timed iterations")->capture_default_str();
  c_bn->add_option("--warmup", bn.warmup, "Untimed iterations")->capture_default_str();
  c_bn->add_option("--variant", bn.variant, "dsconv or standard")
      ->check(CLI::IsMember({"dsconv", "standard"}))
      ->capture_default_str();
  c_bn->add_option("--json", bn.json_path, "Write the report as JSON");
  c_bn->add_option("--threads", threads, "BLAS worker cap");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train generator and discriminator");
  c_tr->add_option("--data", tr.data, "Training image directory")->required();
  c_tr->add_option("--val", tr.val, "Validation image directory (default: --data)");
  c_tr->add_option("--epochs", tr.epochs, "Total epochs")->capture_default_str();
  auto* seed_opt = c_tr->add_option("--seed", tr.seed, "Seed (overrides the config)");
  c_tr->add_option("--config", tr.config, "key=value config file");
  c_tr->add_option("--out", tr.out, "Output directory")->capture_default_str();
  c_tr->add_option("--resume", tr.resume, "Continue from checkpoint_last.ssrg");
  c_tr->add_option("--log-every", tr.log_every, "Print losses every N steps (0: never)")->capture_default_str();

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "PSNR/SSIM between same-named images");
  c_ev->add_option("--sr", ev.sr, "Super-resolved directory")->required();
  c_ev->add_option("--hr", ev.hr, "Ground-truth directory")->required();
  c_ev->add_flag("--luma", ev.luma, "Score the BT.601 luma channel");
  c_ev->add_option("--json", ev.json_path, "Write the report as JSON");
  c_ev->add_option("--csv", ev.csv_path, "Write per-image rows as CSV");

  InspectArgs in;
  auto* c_in = app.add_subcommand("inspect", "Parameter audit of a checkpoint");
  c_in->add_option("--model", in.model, "Checkpoint")->required();
  c_in->add_option("--json", in.json_path, "Write the audit as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  tr.seed_set = seed_opt->count() > 0;

  try {
    apply_threads(threads);
    if (c_up->parsed()) return cmd_upscale(up);
    if (c_bn->parsed()) return cmd_bench(bn);
    if (c_tr->parsed()) return cmd_train(tr);
    if (c_ev->parsed()) return cmd_eval(ev);
    if (c_in->parsed()) return cmd_inspect(in);
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
