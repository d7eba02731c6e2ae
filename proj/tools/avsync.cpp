// avsync: synthetic audio-visual synchronisation experiments.
//
// Subcommands: generate, train, evaluate, robustness, ablate, heatmap.
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "avsync/config.hpp"
#include "avsync/eval.hpp"
#include "avsync/training.hpp"

using namespace avsync;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    uint64_t seed = 0;
    bool seed_set = false;
};

ExperimentConfig load_config(const CommonArgs& args) {
    ExperimentConfig cfg = args.config_path.empty() ? ExperimentConfig::defaults()
                                                    : ExperimentConfig::from_file(args.config_path);
    if (args.seed_set) {
        cfg.seed = args.seed;
        cfg.curriculum.seed = args.seed;
    }
    return cfg;
}

ScorerFactory model_factory(const AvstModel& model) {
    return [&model]() -> std::unique_ptr<PairScorer> { return std::make_unique<ModelScorer>(model); };
}

int run_generate(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    cfg.write_resolved(args.out_dir);
    generate_dataset(default_event_classes(), cfg.generator, cfg.n_train, cfg.n_test, cfg.seed, args.out_dir);
    std::cout << "wrote " << cfg.n_train << " train and " << cfg.n_test << " test clips to " << args.out_dir << "\n";
    return 0;
}

int run_train(const CommonArgs& args, const std::string& data_dir, const std::string& variant_override) {
    ExperimentConfig cfg = load_config(args);
    if (!variant_override.empty()) cfg.model.variant = variant_from_name(variant_override);
    cfg.write_resolved(args.out_dir);
    DatasetSplit train = load_split(data_dir + "/train");

    AvstModel model(cfg.model, cfg.seed);
    CurriculumConfig cc = cfg.curriculum;
    cc.log_path = args.out_dir + "/train_log.jsonl";
    cc.checkpoint_dir = args.out_dir + "/checkpoints";
    const std::string final_ckpt = run_curriculum(cc, train, model);
    std::cout << "trained " << variant_name(cfg.model.variant) << "; final checkpoint: " << final_ckpt << "\n";
    return 0;
}

int run_evaluate(const CommonArgs& args, const std::string& data_dir, const std::string& checkpoint, int tolerance,
                 int grid_max, const std::vector<int>& lengths) {
    ExperimentConfig cfg = load_config(args);
    if (tolerance >= 0) cfg.eval.tolerance = tolerance;
    if (grid_max > 0) cfg.eval.grid.max = grid_max;
    if (!lengths.empty()) cfg.eval.lengths = lengths;
    cfg.validate();
    cfg.write_resolved(args.out_dir);

    AvstModel model = AvstModel::load_checkpoint(checkpoint);
    DatasetSplit test = load_split(data_dir + "/test");
    EvalOptions opt = cfg.eval;
    opt.context = "ckpt=" + checkpoint;
    EvalReport report = evaluate(test, model_factory(model), opt);
    std::ofstream out(args.out_dir + "/eval_report.json");
    if (!out) throw DataError("cannot write eval report to " + args.out_dir);
    out << report.dump();
    std::cout << "overall accuracy " << report.overall << " (tolerance +/-" << opt.tolerance << ", "
              << report.clip_count << " clips)\n";
    for (const auto& [len, acc] : report.per_length) std::cout << "  length " << len << ": " << acc << "\n";
    return 0;
}

int run_robustness(const CommonArgs& args, const std::string& data_dir, const std::string& checkpoint,
                   const std::vector<int>& mask_lengths, const std::vector<int>& lengths) {
    ExperimentConfig cfg = load_config(args);
    if (!lengths.empty()) cfg.eval.lengths = lengths;
    cfg.validate();
    cfg.write_resolved(args.out_dir);

    AvstModel model = AvstModel::load_checkpoint(checkpoint);
    DatasetSplit test = load_split(data_dir + "/test");
    EvalOptions opt = cfg.eval;
    opt.context = "ckpt=" + checkpoint;
    std::vector<int> masks = mask_lengths.empty() ? std::vector<int>{0, 1} : mask_lengths;
    RobustnessReport sweep = robustness_sweep(test, model_factory(model), opt,
                                              {MaskModality::audio, MaskModality::visual, MaskModality::both}, masks,
                                              cfg.generator.fps);
    std::ofstream csv(args.out_dir + "/robustness.csv");
    csv << sweep.to_csv(opt.lengths);
    std::ofstream js(args.out_dir + "/robustness.json");
    js << sweep.to_json().dump(2) << "\n";
    std::cout << sweep.to_csv(opt.lengths);
    return 0;
}

int run_ablate(const CommonArgs& args, const std::string& data_dir, const std::vector<int>& depths) {
    ExperimentConfig cfg = load_config(args);
    cfg.write_resolved(args.out_dir);
    DatasetSplit train = load_split(data_dir + "/train");
    DatasetSplit test = load_split(data_dir + "/test");
    EvalOptions opt = cfg.eval;
    opt.context = "ablate";
    AblationTable table =
        run_depth_ablation(cfg.model, cfg.curriculum, train, test, opt,
                           depths.empty() ? std::vector<int>{1, 2, 3} : depths, cfg.seed);
    std::ofstream csv(args.out_dir + "/ablation.csv");
    csv << table.to_csv(opt.lengths);
    std::ofstream js(args.out_dir + "/ablation.json");
    js << table.to_json().dump(2) << "\n";
    std::cout << table.to_csv(opt.lengths);
    std::cout << "accuracy at the longest length non-decreasing in depth: "
              << (table.longest_length_trend_nondecreasing ? "yes" : "no") << "\n";
    return 0;
}

int run_heatmap(const CommonArgs& args, const std::string& data_dir, const std::string& checkpoint,
                const std::string& clip_id, int length, bool write_png) {
    ExperimentConfig cfg = load_config(args);
    cfg.write_resolved(args.out_dir);
    AvstModel model = AvstModel::load_checkpoint(checkpoint);
    DatasetSplit test = load_split(data_dir + "/test");
    const ClipRecord* rec = nullptr;
    for (const auto& r : test.clips)
        if (r.clip_id == clip_id) rec = &r;
    if (!rec) throw DataError("clip " + clip_id + " not found in " + data_dir + "/test");
    SyntheticClip clip = load_clip(test, *rec);
    const int len = length > 0 ? length : cfg.eval.lengths.back();
    export_heatmaps(clip, model, args.out_dir, len, write_png);
    std::cout << "wrote heatmaps for " << clip_id << " (length " << len << ") to " << args.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic audio-visual synchronisation experiments"};
    app.require_subcommand(1);

    CommonArgs common;
    app.add_option("--config", common.config_path, "TOML experiment config");
    app.add_option("--out", common.out_dir, "output directory");
    auto* seed_opt = app.add_option("--seed", common.seed, "override the experiment seed");

    auto* gen = app.add_subcommand("generate", "generate a labelled synthetic dataset");

    std::string data_dir = "out";
    std::string variant_override, checkpoint, clip_id;
    int tolerance = -1, grid_max = 0, heat_length = 0;
    bool write_png = false;
    std::vector<int> lengths, depths, mask_lengths;

    auto* train = app.add_subcommand("train", "run the two-stage curriculum");
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--variant", variant_override, "enc | enc_mp | dec");

    auto* eval_cmd = app.add_subcommand("evaluate", "dense offset-grid evaluation");
    eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
    eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    eval_cmd->add_option("--tolerance", tolerance, "tolerance window in frames");
    eval_cmd->add_option("--grid-max", grid_max, "offset grid half-width");
    eval_cmd->add_option("--lengths", lengths, "clip lengths in frames")->delimiter(',');

    auto* robust = app.add_subcommand("robustness", "masking robustness sweep");
    robust->add_option("--data", data_dir, "dataset directory")->required();
    robust->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    robust->add_option("--mask-lengths", mask_lengths, "masked frame runs")->delimiter(',');
    robust->add_option("--lengths", lengths, "clip lengths in frames")->delimiter(',');

    auto* ablate = app.add_subcommand("ablate", "transformer depth ablation");
    ablate->add_option("--data", data_dir, "dataset directory")->required();
    ablate->add_option("--depths", depths, "transformer depths")->delimiter(',');

    auto* heat = app.add_subcommand("heatmap", "export decoder cross-attention heatmaps");
    heat->add_option("--data", data_dir, "dataset directory")->required();
    heat->add_option("--checkpoint", checkpoint, "decoder-variant checkpoint")->required();
    heat->add_option("--clip", clip_id, "clip id from the test split")->required();
    heat->add_option("--length", heat_length, "window length in frames");
    heat->add_flag("--png", write_png, "also write PNG renderings");

    CLI11_PARSE(app, argc, argv);
    common.seed_set = seed_opt->count() > 0;

    try {
        if (gen->parsed()) return run_generate(common);
        if (train->parsed()) return run_train(common, data_dir, variant_override);
        if (eval_cmd->parsed()) return run_evaluate(common, data_dir, checkpoint, tolerance, grid_max, lengths);
        if (robust->parsed()) return run_robustness(common, data_dir, checkpoint, mask_lengths, lengths);
        if (ablate->parsed()) return run_ablate(common, data_dir, depths);
        if (heat->parsed()) return run_heatmap(common, data_dir, checkpoint, clip_id, heat_length, write_png);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
