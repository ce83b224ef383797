#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "dfar/pipeline.hpp"
#include "dfar/synthetic.hpp"

using namespace dfar;
namespace fs = std::filesystem;

namespace {

struct GlobalOptions {
    std::string config_path;
    std::optional<unsigned long long> seed;
    std::string device = "cpu";
    std::vector<std::string> overrides;
    bool no_tda = false, no_fr = false, no_mc = false, no_afs = false, no_agdf = false;
    std::optional<int> max_iters;
};

TrainConfig build_config(const GlobalOptions& g) {
    TrainConfig c = g.config_path.empty() ? TrainConfig{} : load_config(g.config_path);
    for (const auto& kv : g.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (g.no_tda) c.tda = false;
    if (g.no_fr) c.fr = false;
    if (g.no_mc) c.mc_loss = false;
    if (g.no_afs) c.afs = false;
    if (g.no_agdf) c.agdf = false;
    if (g.max_iters) c.max_iters = *g.max_iters;
    if (g.seed) c.seed = *g.seed;
    c.validate();
    return c;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

int cmd_train(const GlobalOptions& g, const std::string& data_root, const fs::path& out_dir, std::string log_path) {
    const TrainConfig cfg = build_config(g);
    const auto seqs = load_dataset(data_root);
    const auto data = prepare_dataset<float>(seqs, cfg.input_size);
    DfarModel<float> model(cfg);
    fs::create_directories(out_dir);
    write_text(out_dir / "config.txt", format_config(cfg));
    if (log_path.empty()) log_path = (out_dir / "loss_log.jsonl").string();
    std::ofstream log(log_path);
    if (!log) throw std::runtime_error("cannot write " + log_path);
    std::cerr << "training on " << seqs.size() << " sequences, " << parameter_count(model.parameters()) << " parameters\n";
    TrainOptions opts;
    opts.out_dir = out_dir;
    opts.loss_log = &log;
    const TrainResult res = train_model(model, data, opts);
    std::cout << "iterations " << res.iterations << ", epochs " << res.epochs_completed << ", " << res.seconds << " s\n"
              << "checkpoint " << res.last_checkpoint.string() << '\n';
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& data_root, const fs::path& out_path, std::optional<double> conf,
              bool log_clips) {
    CheckpointMeta meta;
    const DfarModel<float> model = load_model<float>(ckpt, &meta);
    const auto seqs = load_dataset(data_root);
    const auto data = prepare_dataset<float>(seqs, meta.config.input_size);
    ClipObserver observer;
    if (log_clips)
        observer = [](const std::string& id, int t, const std::vector<int>& idx) {
            std::cerr << "clip " << id << ' ' << t << ':';
            for (int k : idx) std::cerr << ' ' << k;
            std::cerr << '\n';
        };
    const auto recs = run_inference(model, data, conf.value_or(meta.config.conf_thresh), observer);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    std::ofstream out(out_path);
    write_detections(out, recs);
    if (!out) throw std::runtime_error("cannot write " + out_path.string());
    std::cout << recs.size() << " detections written to " << out_path.string() << '\n';
    return 0;
}

int cmd_eval(const std::string& dets_path, const std::string& data_root, const std::string& out_dir, double conf) {
    std::ifstream in(dets_path);
    if (!in) throw std::runtime_error("cannot open " + dets_path);
    const auto recs = read_detections(in, fs::path(dets_path).filename().string());
    const auto seqs = load_dataset(data_root);
    const EvaluationReport rep = evaluate(recs, ground_truth(seqs), conf);
    const nlohmann::json j = report_json(rep, conf);
    if (!out_dir.empty()) {
        write_text(fs::path(out_dir) / "metrics.json", j.dump(2) + "\n");
        export_pr_curve(rep.matches, fs::path(out_dir) / "pr_curve.csv");
    }
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_synth(const GlobalOptions& g, const std::string& spec_path, const fs::path& out_root) {
    SyntheticSpec spec;
    if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        if (!in) throw std::runtime_error("cannot open " + spec_path);
        spec = parse_synthetic_spec(in, fs::path(spec_path).filename().string());
    }
    if (g.seed) spec.seed = *g.seed;
    const auto seqs = generate_synthetic_dataset(spec, out_root);
    std::cout << spec.num_train << " train + " << spec.num_test << " test sequences written to " << out_root.string() << '\n';
    return seqs.empty() ? 1 : 0;
}

int cmd_visualize(const std::string& ckpt, const std::string& data_root, const std::string& sequence, int frame,
                  const fs::path& out_dir) {
    const DfarModel<float> model = load_model<float>(ckpt);
    const Sequence seq = load_sequence(fs::path(data_root) / sequence);
    for (const auto& p : export_visualization(model, seq, frame, out_dir)) std::cout << p.string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Moving infrared small target detector: training, inference, evaluation and tooling"};
    app.footer("\nConfiguration keys (config file lines are `key = value`):\n" + describe_config());
    app.require_subcommand(1);

    GlobalOptions g;
    app.add_option("--config", g.config_path, "Training config file")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Seed for model init, clip order and synthetic data");
    app.add_option("--device", g.device, "Compute device")->check(CLI::IsMember({"cpu"}));
    app.add_option("--set", g.overrides, "Override a config key, key=value (repeatable)");
    app.add_flag("--no-tda", g.no_tda, "Disable temporal alignment (also drops the motion-compensation loss)");
    app.add_flag("--no-fr", g.no_fr, "Disable feature refinement (plain convolutional fusion)");
    app.add_flag("--no-mc", g.no_mc, "Disable the motion-compensation loss");
    app.add_flag("--no-afs", g.no_afs, "Disable the adaptive fusion branch");
    app.add_flag("--no-agdf", g.no_agdf, "Disable the attention-guided deformable fusion branch");
    app.add_option("--max-iters", g.max_iters, "Stop training after this many optimizer steps")->check(CLI::NonNegativeNumber);

    auto* train = app.add_subcommand("train", "Train on a dataset split; writes checkpoints and a JSONL loss log");
    std::string train_data, train_out, train_log;
    train->add_option("--data", train_data, "Split directory holding sequence folders")->required();
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--log", train_log, "Loss log path (default <out>/loss_log.jsonl)");

    auto* infer = app.add_subcommand("infer", "Detect targets in every frame of a split");
    std::string infer_ckpt, infer_data, infer_out;
    std::optional<double> infer_conf;
    bool log_clips = false;
    infer->add_option("--checkpoint", infer_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
    infer->add_option("--data", infer_data, "Split directory")->required();
    infer->add_option("--out", infer_out, "Detections file")->required();
    infer->add_option("--conf", infer_conf, "Confidence threshold (default from the checkpoint config)");
    infer->add_flag("--log-clips", log_clips, "Print the frame indices of every clip to stderr");

    auto* eval = app.add_subcommand("eval", "Score a detections file against ground truth");
    std::string eval_dets, eval_data, eval_out;
    double eval_conf = TrainConfig{}.report_conf_thresh;
    eval->add_option("--detections", eval_dets, "Detections file")->required();
    eval->add_option("--data", eval_data, "Split directory")->required();
    eval->add_option("--out", eval_out, "Directory for metrics.json and pr_curve.csv");
    eval->add_option("--conf", eval_conf, "Confidence threshold for precision, recall and F1")->capture_default_str();

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
    std::string synth_spec, synth_out;
    synth->add_option("--spec", synth_spec, "Synthetic spec file (key = value)")->check(CLI::ExistingFile);
    synth->add_option("--out", synth_out, "Dataset root (train/ and test/ are created)")->required();

    auto* viz = app.add_subcommand("visualize", "Export feature heatmaps and a detection overlay for one frame");
    std::string viz_ckpt, viz_data, viz_seq, viz_out;
    int viz_frame = 0;
    viz->add_option("--checkpoint", viz_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
    viz->add_option("--data", viz_data, "Split directory")->required();
    viz->add_option("--sequence", viz_seq, "Sequence id")->required();
    viz->add_option("--frame", viz_frame, "Target frame index")->required();
    viz->add_option("--out", viz_out, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(g, train_data, train_out, train_log);
        if (*infer) return cmd_infer(infer_ckpt, infer_data, infer_out, infer_conf, log_clips);
        if (*eval) return cmd_eval(eval_dets, eval_data, eval_out, eval_conf);
        if (*synth) return cmd_synth(g, synth_spec, synth_out);
        if (*viz) return cmd_visualize(viz_ckpt, viz_data, viz_seq, viz_frame, viz_out);
    } catch (const TrainingAborted& e) {
        std::cerr << "training aborted: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
