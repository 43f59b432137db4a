#include "dmr/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <optional>

#include <CLI11.hpp>

#include "dmr/evaluation.hpp"
#include "dmr/gradcheck_suite.hpp"
#include "dmr/io.hpp"

namespace dmr {

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::string features_path;
};

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig{} : RunConfig::from_file(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  if (args.steps) cfg.steps = *args.steps;
  cfg.decoder.validate();
  return cfg;
}

std::vector<SyntheticSample> build_dataset(const RunConfig& cfg, std::uint64_t dataset_seed,
                                           const BodyTemplate& tmpl,
                                           const std::string& features_path) {
  if (!features_path.empty()) return load_feature_file(features_path, cfg.decoder, tmpl);
  return synth_dataset(dataset_seed, cfg.dataset_size, cfg.decoder, tmpl);
}

int cmd_train(const CommonArgs& common, const std::string& out_dir) {
  RunConfig cfg = resolve_config(common);
  fs::create_directories(out_dir);
  BodyTemplate tmpl = make_synthetic_template(cfg.seed, cfg.template_vertices);
  std::vector<SyntheticSample> data = build_dataset(cfg, cfg.seed, tmpl, common.features_path);

  Model model = init_model(cfg);
  TrainSettings settings;
  settings.steps = cfg.steps;
  settings.lr = cfg.lr;
  settings.weight_decay = cfg.weight_decay;
  TrainResult result = train(model, data, tmpl, settings);

  const std::string ckpt = out_dir + "/checkpoint.bin";
  const std::string csv = out_dir + "/losses.csv";
  save_checkpoint(ckpt, model);
  write_loss_csv(csv, result.curve);

  RunManifest manifest;
  manifest.command = "train";
  manifest.config_text = cfg.to_text();
  manifest.seed = cfg.seed;
  if (!common.config_path.empty()) manifest.inputs.emplace_back("config", common.config_path);
  if (!common.features_path.empty())
    manifest.inputs.emplace_back("features", common.features_path);
  manifest.outputs.emplace_back("checkpoint", ckpt);
  manifest.outputs.emplace_back("losses", csv);
  write_manifest(out_dir + "/train_manifest.json", manifest);

  if (!result.curve.empty()) {
    std::printf("trained %d steps: loss %.6g -> %.6g\n", cfg.steps, result.curve.front().total,
                result.curve.back().total);
  } else {
    std::printf("trained 0 steps: checkpoint holds the initialization\n");
  }
  return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& checkpoint_path,
             const std::string& out_path) {
  Model model = load_checkpoint(checkpoint_path);
  // the template always follows the checkpoint; --seed swaps the dataset only
  BodyTemplate tmpl = make_synthetic_template(model.cfg.seed, model.cfg.template_vertices);
  const std::uint64_t dataset_seed = common.seed ? *common.seed : model.cfg.seed;
  std::vector<SyntheticSample> data =
      build_dataset(model.cfg, dataset_seed, tmpl, common.features_path);

  EvalReport report = evaluate(model, data, tmpl);

  fs::path out(out_path);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_eval_report_json(out_path, report);
  fs::path per_sample = out;
  per_sample.replace_extension("");
  const std::string csv_path = per_sample.string() + "_per_sample.csv";
  write_eval_report_csv(csv_path, report);

  RunManifest manifest;
  manifest.command = "eval";
  manifest.config_text = model.cfg.to_text();
  manifest.seed = dataset_seed;
  manifest.inputs.emplace_back("checkpoint", checkpoint_path);
  if (!common.features_path.empty())
    manifest.inputs.emplace_back("features", common.features_path);
  manifest.outputs.emplace_back("report", out_path);
  manifest.outputs.emplace_back("per_sample", csv_path);
  const fs::path manifest_path =
      (out.has_parent_path() ? out.parent_path() : fs::path(".")) / "eval_manifest.json";
  write_manifest(manifest_path.string(), manifest);

  std::printf("mpjpe_mm=%.6g pa_mpjpe_mm=%.6g pve_mm=%.6g\n", report.mpjpe_mm,
              report.pa_mpjpe_mm, report.pve_mm);
  return 0;
}

int cmd_gradcheck(const CommonArgs& common, bool corrupt) {
  DecoderConfig layer_cfg = gradcheck_default_config();
  if (!common.config_path.empty()) {
    layer_cfg = RunConfig::from_file(common.config_path).decoder;
    layer_cfg.num_layers = 1;
  }
  const std::uint64_t seed = common.seed ? *common.seed : 7;
  const double tolerance = 1e-4;
  const auto rows = run_gradcheck_suite(seed, layer_cfg, tolerance, corrupt);

  std::printf("%-24s %-14s %s\n", "op", "max_rel_err", "status");
  const GradCheckRow* worst = nullptr;
  bool all_pass = true;
  for (const GradCheckRow& row : rows) {
    std::printf("%-24s %-14.3e %s\n", row.name.c_str(), row.max_rel_err,
                row.pass ? "pass" : "FAIL");
    if (!row.pass) all_pass = false;
    if (!worst || row.max_rel_err > worst->max_rel_err) worst = &row;
  }
  if (!all_pass) {
    std::fprintf(stderr, "gradcheck failed; worst op '%s' at %.3e (tolerance %.1e)\n",
                 worst->name.c_str(), worst->max_rel_err, tolerance);
    return 1;
  }
  std::printf("all %zu rows pass at %.1e\n", rows.size(), tolerance);
  return 0;
}

struct AblateVariant {
  std::string name;
  RunConfig cfg;
};

std::vector<AblateVariant> make_suite(const std::string& suite, const RunConfig& base) {
  std::vector<AblateVariant> variants;
  auto with = [&](const std::string& name, auto&& edit) {
    RunConfig cfg = base;
    edit(cfg);
    cfg.decoder.validate();
    variants.push_back({name, cfg});
  };
  if (suite == "table2") {
    with("Reg-S", [](RunConfig& c) { c.decoder.deformable = false; c.decoder.single_query = true; });
    with("Reg-M", [](RunConfig& c) { c.decoder.deformable = false; });
    with("Def-S", [](RunConfig& c) { c.decoder.single_query = true; });
    with("Def-M", [](RunConfig&) {});
  } else if (suite == "table3") {
    // heads x offset range, groups at heads/2
    for (int heads : {16, 8})
      for (int range : {1, 2})
        with("h" + std::to_string(heads) + "_g" + std::to_string(heads / 2) + "_l" +
                 std::to_string(range),
             [&](RunConfig& c) {
               c.decoder.num_heads = heads;
               c.decoder.num_groups = heads / 2;
               c.decoder.offset_range = range;
             });
  } else if (suite == "table4") {
    with("none", [](RunConfig& c) { c.decoder.pe_type = PeType::none; });
    with("absolute", [](RunConfig& c) { c.decoder.pe_type = PeType::absolute; });
    with("relative", [](RunConfig& c) { c.decoder.pe_type = PeType::relative; });
  } else {
    throw config_error("unknown ablation suite '" + suite + "' (expected table2|table3|table4)");
  }
  return variants;
}

int cmd_ablate(const CommonArgs& common, const std::string& suite, const std::string& out_dir) {
  RunConfig base = resolve_config(common);
  base.decoder.num_layers = common.config_path.empty() ? 2 : base.decoder.num_layers;
  fs::create_directories(out_dir);
  const std::vector<AblateVariant> variants = make_suite(suite, base);

  // one dataset and template shared by every variant
  BodyTemplate tmpl = make_synthetic_template(base.seed, base.template_vertices);
  std::vector<SyntheticSample> data = build_dataset(base, base.seed, tmpl, common.features_path);

  const std::string csv_path = out_dir + "/" + suite + ".csv";
  std::ofstream csv(csv_path);
  if (!csv) throw config_error("cannot write '" + csv_path + "'");
  csv << "variant,attention,queries,num_heads,num_groups,offset_range,pe_type,status,"
         "initial_loss,final_loss,loss_ratio,mpjpe_mm,pa_mpjpe_mm,pve_mm\n";

  bool any_failed = false;
  for (const AblateVariant& variant : variants) {
    const RunConfig& cfg = variant.cfg;
    csv << variant.name << "," << (cfg.decoder.deformable ? "deformable" : "regular") << ","
        << (cfg.decoder.single_query ? "single" : "multi") << "," << cfg.decoder.num_heads << ","
        << cfg.decoder.num_groups << "," << cfg.decoder.offset_range << ","
        << pe_type_name(cfg.decoder.pe_type) << ",";
    try {
      Model model = init_model(cfg);
      TrainSettings settings;
      settings.steps = cfg.steps;
      settings.lr = cfg.lr;
      settings.weight_decay = cfg.weight_decay;
      TrainResult result = train(model, data, tmpl, settings);
      EvalReport report = evaluate(model, data, tmpl);
      const double initial = result.curve.empty() ? 0.0 : result.curve.front().total;
      const double final_loss = result.curve.empty() ? 0.0 : result.curve.back().total;
      char buf[256];
      std::snprintf(buf, sizeof(buf), "ok,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", initial,
                    final_loss, initial > 0 ? final_loss / initial : 0.0, report.mpjpe_mm,
                    report.pa_mpjpe_mm, report.pve_mm);
      csv << buf << "\n";
      std::printf("%-10s final loss %.6g (mpjpe %.4g mm)\n", variant.name.c_str(), final_loss,
                  report.mpjpe_mm);
    } catch (const numeric_error& e) {
      csv << "failed,,,,,,\n";
      std::fprintf(stderr, "warning: variant '%s' diverged: %s\n", variant.name.c_str(),
                   e.what());
      any_failed = true;
    }
  }
  csv.close();

  RunManifest manifest;
  manifest.command = "ablate";
  manifest.config_text = base.to_text();
  manifest.seed = base.seed;
  manifest.inputs.emplace_back("suite", suite);
  manifest.outputs.emplace_back("csv", csv_path);
  write_manifest(out_dir + "/ablate_manifest.json", manifest);

  if (any_failed) std::fprintf(stderr, "warning: some variants failed; see CSV\n");
  return 0;
}

int cmd_visualize(const CommonArgs& common, const std::string& checkpoint_path,
                  const std::string& out_dir, int sample_index, double threshold) {
  if (threshold < 0.0) throw config_error("visualize: threshold must be >= 0");
  Model model = load_checkpoint(checkpoint_path);
  BodyTemplate tmpl = make_synthetic_template(model.cfg.seed, model.cfg.template_vertices);
  const std::uint64_t dataset_seed = common.seed ? *common.seed : model.cfg.seed;
  std::vector<SyntheticSample> data =
      build_dataset(model.cfg, dataset_seed, tmpl, common.features_path);
  if (sample_index < 0 || sample_index >= static_cast<int>(data.size()))
    throw config_error("visualize: sample index " + std::to_string(sample_index) +
                       " out of range [0," + std::to_string(data.size()) + ")");

  fs::create_directories(out_dir);
  Shape ctx_shape = data[sample_index].context.shape();
  ctx_shape.insert(ctx_shape.begin(), 1);
  Tensor context = reshape(data[sample_index].context, ctx_shape);
  AttentionTrace trace;
  forward_pipeline(model, context, tmpl, &trace);

  const std::vector<Hotspot> hotspots = extract_attention_hotspots(trace, threshold);
  const std::string json_path = out_dir + "/hotspots.json";
  write_hotspots_json(json_path, hotspots, threshold);
  const std::vector<std::string> images = write_attention_graymaps(out_dir, trace);

  RunManifest manifest;
  manifest.command = "visualize";
  manifest.config_text = model.cfg.to_text();
  manifest.seed = dataset_seed;
  manifest.inputs.emplace_back("checkpoint", checkpoint_path);
  manifest.inputs.emplace_back("sample", std::to_string(sample_index));
  manifest.outputs.emplace_back("hotspots", json_path);
  manifest.outputs.emplace_back("graymaps", std::to_string(images.size()) + " files");
  write_manifest(out_dir + "/visualize_manifest.json", manifest);

  std::printf("%zu hotspots above %.3g across %zu layers; %zu graymaps written\n",
              hotspots.size(), threshold, trace.layers.size(), images.size());
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"deformable-attention body-mesh regression toolkit"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string out;
  std::string checkpoint;
  std::string suite;
  int sample_index = 0;
  double threshold = 0.25;
  bool corrupt = false;

  auto add_common = [&common](CLI::App* cmd, bool with_steps = true) {
    cmd->add_option("--config", common.config_path, "key=value config file");
    cmd->add_option("--seed", common.seed, "RNG seed");
    if (with_steps) cmd->add_option("--steps", common.steps, "optimizer steps");
    cmd->add_option("--features", common.features_path,
                    "external feature-map file replacing the synthetic context");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train on a synthetic dataset");
  add_common(train_cmd);
  train_cmd->add_option("--out", out, "output directory")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, /*with_steps=*/false);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--out", out, "report JSON path")->required();

  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(grad_cmd, /*with_steps=*/false);
  grad_cmd->add_flag("--corrupt", corrupt,
                     "testing hook: include an op with a deliberately wrong gradient");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run an ablation suite");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--suite", suite, "table2|table3|table4")->required();
  ablate_cmd->add_option("--out", out, "output directory")->required();

  CLI::App* vis_cmd = app.add_subcommand("visualize", "attention hotspots and graymaps");
  add_common(vis_cmd, /*with_steps=*/false);
  vis_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  vis_cmd->add_option("--out", out, "output directory")->required();
  vis_cmd->add_option("--sample", sample_index, "dataset sample index");
  vis_cmd->add_option("--threshold", threshold, "attention-mass threshold (default 0.25)");

  std::vector<const char*> argv;
  argv.push_back("dmr");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(common, out);
    if (eval_cmd->parsed()) return cmd_eval(common, checkpoint, out);
    if (grad_cmd->parsed()) return cmd_gradcheck(common, corrupt);
    if (ablate_cmd->parsed()) return cmd_ablate(common, suite, out);
    if (vis_cmd->parsed()) return cmd_visualize(common, checkpoint, out, sample_index, threshold);
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}

}  // namespace dmr
