// crossmark CLI: train / embed / extract / evaluate / ablate.
//
// Exit codes: 0 success; 2 configuration or shape error; 3 checkpoint error
// (missing, malformed, or stage-inappropriate); 4 numeric divergence;
// 5 I/O failure; 1 anything else.

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crossmark/augment.hpp"
#include "crossmark/checkpoint.hpp"
#include "crossmark/config.hpp"
#include "crossmark/dataset.hpp"
#include "crossmark/image_io.hpp"
#include "crossmark/training.hpp"

namespace fs = std::filesystem;
using namespace crossmark;

namespace {

std::string checkpoint_dir(const RunConfig& cfg) {
  if (const char* env = std::getenv("CROSSMARK_CKPT_DIR"); env && *env) return env;
  return cfg.out_dir;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw IoError("failed writing " + path);
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

nlohmann::json json_db(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json("inf");
}

bool looks_like_hex64(const std::string& s) {
  if (s.size() != 16) return false;
  for (char c : s)
    if (!std::isxdigit((unsigned char)c)) return false;
  return true;
}

// --wm / --expected accept a 16-hex-digit literal or an image path. A
// 16-character token that is neither valid hex nor an existing file is
// reported as an encoding error, not a missing image.
WatermarkBits watermark_from_arg(const std::string& arg) {
  if (looks_like_hex64(arg)) return WatermarkBits::from_hex(arg);
  if (arg.size() == 16 && !fs::exists(arg)) return WatermarkBits::from_hex(arg);
  return generate_watermark(load_image(arg));
}

Tensor<float> load_cover(const std::string& path, const ModelConfig& cfg) {
  Tensor<float> img = load_image(path);
  if (img.shape[0] != cfg.image_size || img.shape[1] != cfg.image_size)
    img = resize_bilinear(img, cfg.image_size, cfg.image_size);
  return img;
}

Tensor<float> one_image_batch(const Tensor<float>& img) {
  Tensor<float> out({1, img.shape[0], img.shape[1], img.shape[2]});
  std::copy(img.data.begin(), img.data.end(), out.data.begin());
  return out;
}

void save_marked(const std::string& path, const Tensor<float>& img) {
  const std::string ext = fs::path(path).extension().string();
  if (ext == ".jpg" || ext == ".jpeg")
    save_jpeg(path, img, 95);
  else
    save_png(path, img);  // lossless by default: a file round-trip is not an attack
}

void print_report(const MetricReport& rep) {
  const auto db = [](double v) {
    if (!std::isfinite(v)) return std::string("inf");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };
  std::cout << "embedding psnr_db: " << db(rep.psnr_db) << "\n";
  std::cout << "clean brr_percent: " << db(rep.brr_percent) << "\n";
  if (rep.entries.empty()) return;
  std::cout << "noise            level   brr_percent  psnr_db\n";
  for (const auto& e : rep.entries) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-16s %-7g %-12.2f %s\n", e.noise.c_str(), e.level,
                  e.brr_percent, db(e.psnr_db).c_str());
    std::cout << line;
  }
}

ModelCheckpoint load_prereq(const std::string& resume, const std::string& dir,
                            const std::string& stage_file, const char* needed_by) {
  const std::string path = !resume.empty() ? resume : (fs::path(dir) / stage_file).string();
  if (!fs::exists(path))
    throw CheckpointError(std::string("prerequisite checkpoint for ") + needed_by +
                          " not found at " + path);
  return load_checkpoint(path);
}

struct StagePaths {
  std::string ckpt, log;
};
StagePaths stage_paths(const std::string& dir, int stage) {
  const std::string base = "stage" + std::to_string(stage);
  return {(fs::path(dir) / (base + ".ckpt")).string(),
          (fs::path(dir) / (base + "_log.json")).string()};
}

void persist_stage(const StageResult& res, const StagePaths& paths) {
  save_checkpoint(paths.ckpt, res.ckpt);
  write_json_file(paths.log, res.log);
  const auto& fin = res.log.at("final");
  std::cout << res.log.at("stage").get<std::string>() << ": steps=" << fin.at("steps")
            << " final_loss=" << fin.at("final_loss") << " -> " << paths.ckpt << "\n";
}

int cmd_train(const std::string& config_path, const std::string& stage,
              const std::string& resume) {
  RunConfig cfg = RunConfig::load_file(config_path);
  cfg.validate();
  if (cfg.dataset.resize != cfg.model.image_size)
    throw ConfigError("dataset.resize must equal model.image_size");
  const std::string dir = checkpoint_dir(cfg);
  fs::create_directories(dir);
  write_json_file((fs::path(dir) / "config.effective.json").string(), cfg.to_json());

  Dataset data = load_dataset(cfg.dataset);
  if (data.skipped > 0)
    std::cout << "ingest: skipped " << data.skipped << " undecodable file(s)\n";
  Trainer trainer(cfg, std::move(data));

  if (stage == "1" || stage == "all") {
    persist_stage(trainer.stage1_pretrain(), stage_paths(dir, 1));
  }
  if (stage == "2" || stage == "all") {
    const ModelCheckpoint s1 = load_prereq(stage == "2" ? resume : "", dir, "stage1.ckpt",
                                           "stage 2");
    persist_stage(trainer.stage2_train_encoder(s1), stage_paths(dir, 2));
  }
  if (stage == "3" || stage == "all") {
    const ModelCheckpoint s2 = load_prereq(stage == "3" ? resume : "", dir, "stage2.ckpt",
                                           "stage 3");
    persist_stage(trainer.stage3_finetune(s2), stage_paths(dir, 3));
  }
  return 0;
}

int cmd_embed(const std::string& ckpt_path, const std::string& cover_path,
              const std::string& wm_arg, const std::string& out_path) {
  const ModelCheckpoint ckpt = load_checkpoint(ckpt_path);
  Nets nets = nets_from_checkpoint(ckpt);
  const Tensor<float> cover = load_cover(cover_path, nets.cfg);
  const WatermarkBits wm = watermark_from_arg(wm_arg);

  const Tensor<float> marked =
      slice_batch(nets.embed(ad::leaf(one_image_batch(cover)),
                             ad::leaf(one_image_batch(wm.to_tensor<float>())))
                      ->value,
                  0);
  save_marked(out_path, marked);
  const double fidelity = psnr(cover, marked);
  std::cout << "marked: " << out_path << "\n";
  std::cout << "watermark: " << wm.to_hex() << "\n";
  std::cout << "psnr_db: " << (std::isfinite(fidelity) ? std::to_string(fidelity) : "inf")
            << "\n";
  write_json_file(out_path + ".meta.json",
                  {{"checkpoint", ckpt_path},
                   {"cover", cover_path},
                   {"watermark_hex", wm.to_hex()},
                   {"psnr_db", json_db(fidelity)},
                   {"model", nlohmann::json(ckpt.config)}});
  return 0;
}

int cmd_extract(const std::string& ckpt_path, const std::string& image_path,
                const std::string& expected_arg) {
  const ModelCheckpoint ckpt = load_checkpoint(ckpt_path);
  Nets nets = nets_from_checkpoint(ckpt);
  const Tensor<float> img = load_cover(image_path, nets.cfg);
  const WatermarkBits bits = extract_bits_batch(nets, one_image_batch(img)).at(0);
  std::cout << "recovered: " << bits.to_hex() << "\n";
  if (!expected_arg.empty()) {
    const WatermarkBits expected = watermark_from_arg(expected_arg);
    std::cout << "expected: " << expected.to_hex() << "\n";
    std::cout << "brr_percent: " << brr(expected, bits) << "\n";
  }
  return 0;
}

std::vector<NoiseSpec> parse_noise_arg(const std::string& arg) {
  if (arg == "none") return {};
  if (arg == "sweep") {
    std::vector<Noise> all = train_noises();
    for (Noise n : test_noises()) all.push_back(n);
    return sweep_specs(all);
  }
  if (arg.rfind("sweep:", 0) == 0) return sweep_specs({parse_noise(arg.substr(6))});
  std::vector<NoiseSpec> specs;
  std::string rest = arg;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    specs.push_back(parse_noise_spec(rest.substr(0, comma)));
    rest = (comma == std::string::npos) ? "" : rest.substr(comma + 1);
  }
  if (specs.empty()) throw ConfigError("--noises must name at least one attack or 'none'");
  return specs;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& dataset_dir,
                 const std::string& noises_arg, const std::string& out_stem, i64 repeats,
                 std::uint64_t seed, i64 limit) {
  const ModelCheckpoint ckpt = load_checkpoint(ckpt_path);
  DatasetSpec spec;
  spec.dir = dataset_dir;
  spec.resize = ckpt.config.image_size;
  spec.shuffle_seed = 0;
  IngestResult ingest = ingest_images(spec);
  if (limit > 0 && (i64)ingest.images.size() > limit) ingest.images.resize((size_t)limit);

  EvalOptions opts;
  opts.repeats = repeats;
  opts.seed = seed;
  const MetricReport rep = evaluate(ckpt, ingest.images, parse_noise_arg(noises_arg), opts);
  print_report(rep);
  if (!out_stem.empty()) {
    write_report(rep, out_stem + ".json", out_stem + ".csv");
    write_json_file(out_stem + ".config.json", {{"checkpoint", ckpt_path},
                                                {"dataset", dataset_dir},
                                                {"noises", noises_arg},
                                                {"repeats", repeats},
                                                {"seed", seed},
                                                {"images", ingest.images.size()},
                                                {"model", nlohmann::json(ckpt.config)}});
    std::cout << "wrote " << out_stem << ".json and " << out_stem << ".csv\n";
  }
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& mode, i64 repeats,
               std::uint64_t seed) {
  RunConfig cfg = RunConfig::load_file(config_path);
  cfg.validate();
  if (cfg.dataset.resize != cfg.model.image_size)
    throw ConfigError("dataset.resize must equal model.image_size");
  const std::string dir = checkpoint_dir(cfg);
  fs::create_directories(dir);
  write_json_file((fs::path(dir) / "config.effective.json").string(), cfg.to_json());
  Dataset data = load_dataset(cfg.dataset);

  if (mode == "cross-vs-conv") {
    const EmbedderAblation res = ablate_embedder(cfg, data);
    save_checkpoint((fs::path(dir) / "ablate_cross.ckpt").string(), res.ckpt_cross);
    save_checkpoint((fs::path(dir) / "ablate_conv.ckpt").string(), res.ckpt_conv);
    std::cout << "cross_attention: psnr_db=" << res.cross.psnr_db
              << " brr_percent=" << res.cross.brr_percent
              << " residual_mean=" << res.residual_mean_cross
              << " residual_max=" << res.residual_max_cross << "\n";
    std::cout << "conv_baseline:   psnr_db=" << res.conv.psnr_db
              << " brr_percent=" << res.conv.brr_percent
              << " residual_mean=" << res.residual_mean_conv
              << " residual_max=" << res.residual_max_conv << "\n";
    std::cout << "psnr_delta_db: " << res.cross.psnr_db - res.conv.psnr_db << "\n";
    write_json_file((fs::path(dir) / "ablate_embedder.json").string(),
                    {{"mode", mode},
                     {"cross", res.cross.to_json()},
                     {"conv", res.conv.to_json()},
                     {"residual_mean_cross", res.residual_mean_cross},
                     {"residual_max_cross", res.residual_max_cross},
                     {"residual_mean_conv", res.residual_mean_conv},
                     {"residual_max_conv", res.residual_max_conv},
                     {"psnr_delta_db", res.cross.psnr_db - res.conv.psnr_db}});
    return 0;
  }

  if (mode != "id-vs-noid") throw ConfigError("unknown ablation mode '" + mode + "'");

  // Reuse pipeline checkpoints when present (runs are deterministic), train
  // the missing prefix of the stage chain otherwise.
  Trainer trainer(cfg, data);
  const auto p1 = stage_paths(dir, 1), p2 = stage_paths(dir, 2), p3 = stage_paths(dir, 3);
  ModelCheckpoint s1, s3;
  if (fs::exists(p1.ckpt)) {
    s1 = load_checkpoint(p1.ckpt);
  } else {
    auto r = trainer.stage1_pretrain();
    persist_stage(r, p1);
    s1 = std::move(r.ckpt);
  }
  if (fs::exists(p3.ckpt)) {
    s3 = load_checkpoint(p3.ckpt);
  } else {
    ModelCheckpoint s2;
    if (fs::exists(p2.ckpt)) {
      s2 = load_checkpoint(p2.ckpt);
    } else {
      auto r = trainer.stage2_train_encoder(s1);
      persist_stage(r, p2);
      s2 = std::move(r.ckpt);
    }
    auto r = trainer.stage3_finetune(s2);
    persist_stage(r, p3);
    s3 = std::move(r.ckpt);
  }

  EvalOptions opts;
  opts.repeats = repeats;
  opts.seed = seed;
  const AblationPair pair =
      ablate_invariant_domain(s1, s3, trainer.data().train, cfg.augment, opts);
  const double delta =
      pair.invariant.entries.at(0).brr_percent - pair.direct.entries.at(0).brr_percent;
  std::cout << "path A (stage-1 extractor, no invariant domain):\n";
  print_report(pair.direct);
  std::cout << "path B (full pipeline, invariant domain):\n";
  print_report(pair.invariant);
  std::cout << "augmented_brr_delta: " << delta << "\n";
  write_json_file((fs::path(dir) / "ablate_invariant.json").string(),
                  {{"mode", mode},
                   {"direct", pair.direct.to_json()},
                   {"invariant", pair.invariant.to_json()},
                   {"augmented_brr_delta", delta},
                   {"repeats", repeats},
                   {"seed", seed}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crossmark: cross-attention image watermarking toolkit"};
  app.require_subcommand(1);

  // train
  std::string train_config, train_stage = "all", train_resume;
  auto* train = app.add_subcommand("train", "Run the staged training pipeline");
  train->add_option("config", train_config, "Run configuration (JSON)")->required();
  train->add_option("--stage", train_stage, "Stage to run: 1, 2, 3 or all")
      ->check(CLI::IsMember({"1", "2", "3", "all"}));
  train->add_option("--resume", train_resume,
                    "Prerequisite checkpoint for a single later stage");

  // embed
  std::string em_ckpt, em_cover, em_wm, em_out = "marked.png";
  auto* embed = app.add_subcommand("embed", "Embed a watermark into a cover image");
  embed->add_option("--ckpt", em_ckpt, "Checkpoint with an embedder")->required();
  embed->add_option("--cover", em_cover, "Cover image (PNG/JPEG)")->required();
  embed->add_option("--wm", em_wm, "16 hex digits or an image to binarize")->required();
  embed->add_option("--out", em_out, "Output image path (PNG unless .jpg)");

  // extract
  std::string ex_ckpt, ex_image, ex_expected;
  auto* extract = app.add_subcommand("extract", "Recover the watermark from an image");
  extract->add_option("--ckpt", ex_ckpt, "Stage-1 or stage-3 checkpoint")->required();
  extract->add_option("--image", ex_image, "Image to read")->required();
  extract->add_option("--expected", ex_expected, "16 hex digits or an image; prints BRR");

  // evaluate
  std::string ev_ckpt, ev_dataset, ev_noises = "sweep", ev_out;
  i64 ev_repeats = 1, ev_limit = 0;
  std::uint64_t ev_seed = 0;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Attack-suite evaluation report");
  evaluate_cmd->add_option("--ckpt", ev_ckpt, "Checkpoint to evaluate")->required();
  evaluate_cmd->add_option("--dataset", ev_dataset, "Directory of cover images")->required();
  evaluate_cmd->add_option(
      "--noises", ev_noises,
      "'none', 'sweep', 'sweep:<noise>', or comma list of name:level specs");
  evaluate_cmd->add_option("--out", ev_out, "Report stem; writes <stem>.json and <stem>.csv");
  evaluate_cmd->add_option("--repeats", ev_repeats, "Noise applications per (image, attack)");
  evaluate_cmd->add_option("--seed", ev_seed, "Evaluation noise seed");
  evaluate_cmd->add_option("--limit", ev_limit, "Use only the first N ingested images");

  // ablate
  std::string ab_config, ab_mode;
  i64 ab_repeats = 3;
  std::uint64_t ab_seed = 0;
  auto* ablate = app.add_subcommand("ablate", "Paired ablation studies");
  ablate->add_option("config", ab_config, "Run configuration (JSON)")->required();
  ablate->add_option("--mode", ab_mode, "cross-vs-conv or id-vs-noid")
      ->required()
      ->check(CLI::IsMember({"cross-vs-conv", "id-vs-noid"}));
  ablate->add_option("--repeats", ab_repeats, "Compound-noise repeats (id-vs-noid)");
  ablate->add_option("--seed", ab_seed, "Ablation noise seed");

  try {
    app.parse(argc, argv);
    if (*train) return cmd_train(train_config, train_stage, train_resume);
    if (*embed) return cmd_embed(em_ckpt, em_cover, em_wm, em_out);
    if (*extract) return cmd_extract(ex_ckpt, ex_image, ex_expected);
    if (*evaluate_cmd)
      return cmd_evaluate(ev_ckpt, ev_dataset, ev_noises, ev_out, ev_repeats, ev_seed,
                          ev_limit);
    if (*ablate) return cmd_ablate(ab_config, ab_mode, ab_repeats, ab_seed);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad usage is a configuration error
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
