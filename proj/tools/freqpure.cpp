// freqpure: train toy models, craft frequency-domain attacks, purify with the
// reverse VP-SDE and evaluate the four-column accuracy protocol.
//
// exit codes: 0 ok, 1 usage/config error, 2 component failure, 3 every eval cell failed

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "freqpure/freqpure.hpp"

namespace fs = std::filesystem;
using namespace freqpure;

namespace {

constexpr int exit_usage = 1;
constexpr int exit_component = 2;
constexpr int exit_all_failed = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Overrides {
    std::string config;
    std::string out;
    std::optional<std::string> mode;
    std::optional<double> t_star, dt, lambda;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
};

RunConfig resolve_config(const Overrides& o) {
    RunConfig c;
    try {
        if (!o.config.empty()) c = load_config(o.config);
        if (!o.out.empty()) c.out_dir = o.out;
        if (o.seed) {
            c.seed = *o.seed;
            c.classifier.seed = c.score.seed = c.purify.seed = *o.seed;
        }
        if (o.workers) c.workers = *o.workers;
        if (o.mode) {
            c.attack.mode = attack_mode_from_string(*o.mode);
            c.plan.modes = {c.attack.mode};
        }
        if (o.lambda) c.attack.lambda = *o.lambda;
        if (o.t_star) {
            c.purify.t_star = *o.t_star;
            c.plan.t_star_list = {*o.t_star};
        }
        if (o.dt) c.purify.dt = *o.dt;
        c.validate();
    } catch (const InvalidInput& e) {
        throw UsageError(e.what());
    }
    return c;
}

struct Paths {
    fs::path root;
    fs::path classifier() const { return root / "models" / "classifier.fqm"; }
    fs::path score() const { return root / "models" / "score.fqm"; }
    fs::path classifier_curve() const { return root / "models" / "classifier_loss.tsv"; }
    fs::path score_curve() const { return root / "models" / "score_loss.tsv"; }
    fs::path attack_dir(AttackMode m) const { return root / ("attack_" + to_string(m)); }
    fs::path eval_dir() const { return root / "eval"; }
    fs::path cache_dir() const { return root / "cache"; }
};

void log(const std::string& msg) { std::cerr << "[freqpure] " << msg << '\n'; }

void write_curve(const fs::path& path, const std::vector<double>& curve) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp);
        os << "epoch\tloss\n" << std::setprecision(17);
        for (std::size_t i = 0; i < curve.size(); ++i) os << i << '\t' << curve[i] << '\n';
    }
    fs::rename(tmp, path);
}

std::unique_ptr<ToyClassifier> load_classifier(const Paths& p) {
    if (!fs::exists(p.classifier()))
        throw LoadError(p.classifier().string(), "no trained classifier; run `freqpure train` with the same --config/--out first");
    return ToyClassifier::load(p.classifier().string());
}

std::unique_ptr<ToyScoreNet> load_score(const Paths& p) {
    if (!fs::exists(p.score()))
        throw LoadError(p.score().string(), "no trained score model; run `freqpure train` with the same --config/--out first");
    return ToyScoreNet::load(p.score().string());
}

/// One PGM per channel; single-channel images get no channel suffix.
void export_image(const fs::path& stem, const ImageBatch& batch, std::size_t item, double scale = 1.0, double offset = 0.0) {
    const Shape s = batch.shape();
    for (std::size_t c = 0; c < s.c; ++c) {
        const std::string suffix = s.c == 1 ? "" : "_c" + std::to_string(c);
        write_pgm16(stem.string() + suffix + ".pgm", batch.data.plane(item, c), s.h, s.w, scale, offset);
    }
}

int cmd_train(const RunConfig& cfg) {
    const Paths paths{cfg.out_dir};
    fs::create_directories(paths.root / "models");
    log("dataset " + std::to_string(cfg.dataset.height) + "x" + std::to_string(cfg.dataset.width) + ", " +
        std::to_string(cfg.dataset.train_size) + " training images");
    const ToyDataset ds = make_toy_dataset(cfg.dataset);

    auto clf = train_classifier(ds.train, ds.test, cfg.dataset.class_count, cfg.classifier, [](std::size_t ep, double loss) {
        log("classifier epoch " + std::to_string(ep + 1) + " loss " + std::to_string(loss));
    });
    clf.model->save(paths.classifier().string());
    write_curve(paths.classifier_curve(), clf.loss_curve);
    log("classifier test accuracy " + std::to_string(100.0 * clf.test_accuracy) + "%, " + clf.model->fingerprint());

    auto score = train_score_model(to_signed(ds.train.images).data, to_signed(ds.val.images).data, cfg.schedule, cfg.score,
                                   [](std::size_t ep, double loss) {
                                       log("score epoch " + std::to_string(ep + 1) + " loss " + std::to_string(loss));
                                   });
    score.model->save(paths.score().string());
    write_curve(paths.score_curve(), score.loss_curve);
    log("score validation loss " + std::to_string(score.val_loss) + " (zero predictor " +
        std::to_string(score.zero_baseline) + "), " + score.model->fingerprint());
    std::cout << paths.classifier().string() << '\n' << paths.score().string() << '\n';
    return 0;
}

int cmd_attack(const RunConfig& cfg) {
    const Paths paths{cfg.out_dir};
    const auto clf = load_classifier(paths);
    const ToyDataset ds = make_toy_dataset(cfg.dataset);
    const std::size_t n = std::min(cfg.attack_count, ds.test.size());
    const auto idx = subset_indices(ds.test.size(), n, cfg.seed);
    const LabeledBatch sub = ds.test.subset(idx);
    log("attacking " + std::to_string(n) + " test images, mode " + to_string(cfg.attack.mode));

    const auto result = run_attack(sub.images, sub.labels, *clf, cfg.attack, cfg.seed);
    const ImageBatch delta = extract_perturbation(sub.images, result.adversarial);
    const SpectrumHistogram hist = radial_spectrum(delta, cfg.histogram_bins);

    const fs::path dir = paths.attack_dir(cfg.attack.mode);
    fs::create_directories(dir / "images");
    const std::string hash = config_hash(cfg);
    const std::string mode = to_string(cfg.attack.mode);
    write_batch((dir / "clean.fqb").string(), BatchFile{sub.images, sub.labels, "clean", cfg.seed, hash});
    write_batch((dir / "adversarial.fqb").string(), BatchFile{result.adversarial, sub.labels, mode, cfg.seed, hash});
    write_batch((dir / "perturbation.fqb").string(), BatchFile{delta, sub.labels, mode, cfg.seed, hash});
    write_traces((dir / "trace.tsv").string(), result.traces);
    write_histogram((dir / "histogram.tsv").string(), hist);
    for (std::size_t b = 0; b < n; ++b) {
        const std::string id = std::to_string(b);
        export_image(dir / "images" / ("clean_" + id), sub.images, b);
        export_image(dir / "images" / ("adversarial_" + id), result.adversarial, b);
        export_image(dir / "images" / ("perturbation_x20_" + id), delta, b, 20.0, 0.5);
    }
    log("accuracy clean " + std::to_string(100.0 * accuracy(*clf, sub.images.data, sub.labels)) + "%, adversarial " +
        std::to_string(100.0 * accuracy(*clf, result.adversarial.data, sub.labels)) + "%");
    std::cout << (dir / "adversarial.fqb").string() << '\n';
    return 0;
}

int cmd_purify(const RunConfig& cfg, const std::string& input, std::size_t snapshots) {
    const Paths paths{cfg.out_dir};
    const BatchFile in = read_batch(input);
    if (in.batch.range != RangeTag::unit)
        throw InvalidInput(input + " holds a " + std::string(to_string(in.batch.range)) +
                           "-range batch; purify expects unit-range images (perturbation files go to `analyze`)");
    const auto score = load_score(paths);
    PurifyConfig pc = cfg.purify;
    PurifyTrajectory traj;
    const auto t0 = std::chrono::steady_clock::now();
    const ImageBatch out = purify(in.batch, cfg.schedule, *score, pc, snapshots ? &traj : nullptr, snapshots);
    log("purified " + std::to_string(in.batch.shape().n) + " images at t*=" + std::to_string(pc.t_star) + " in " +
        std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");

    const fs::path stem = fs::path(input).stem();
    const fs::path dir = paths.root / "purified";
    fs::create_directories(dir);
    const fs::path target = dir / (stem.string() + ".fqb");
    write_batch(target.string(), BatchFile{out, in.labels, "purified_" + in.mode, pc.seed, config_hash(cfg)});
    if (snapshots) {
        const fs::path sdir = dir / (stem.string() + "_snapshots");
        fs::create_directories(sdir);
        for (std::size_t b = 0; b < out.shape().n; ++b) {
            const std::string id = "sample" + std::to_string(b);
            export_image(sdir / (id + "_diffused"), traj.diffused, b);
            for (std::size_t k = 0; k < traj.frames.size(); ++k)
                export_image(sdir / (id + "_step" + std::to_string(k + 1)), traj.frames[k], b);
            export_image(sdir / (id + "_final"), out, b);
        }
        std::ofstream times(sdir / "frame_times.tsv");
        times << "frame\tt\n" << "diffused\t" << pc.t_star << '\n';
        for (std::size_t k = 0; k < traj.frame_times.size(); ++k) times << "step" << k + 1 << '\t' << traj.frame_times[k] << '\n';
        times << "final\t0\n";
    }
    std::cout << target.string() << '\n';
    return 0;
}

/// Accuracy of the stored classifier on ready-made batch files.
int eval_files(const RunConfig& cfg, const std::vector<std::string>& inputs) {
    const Paths paths{cfg.out_dir};
    const auto clf = load_classifier(paths);
    nlohmann::json report = nlohmann::json::array();
    for (const auto& path : inputs) {
        const BatchFile f = read_batch(path);
        if (f.labels.size() != f.batch.shape().n) throw InvalidInput(path + " carries no labels");
        f.batch.require_range(RangeTag::unit, "eval");
        const double acc = 100.0 * accuracy(*clf, f.batch.data, f.labels);
        report.push_back({{"file", path}, {"mode", f.mode}, {"images", f.labels.size()}, {"accuracy", acc}});
        std::cout << std::left << std::setw(24) << f.mode << std::right << std::fixed << std::setprecision(2) << std::setw(7)
                  << acc << "%  " << path << '\n';
    }
    fs::create_directories(paths.eval_dir());
    std::ofstream(paths.eval_dir() / "files.json") << report.dump(2) << '\n';
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& inputs) {
    if (!inputs.empty()) return eval_files(cfg, inputs);
    const Paths paths{cfg.out_dir};
    const auto clf = load_classifier(paths);
    const auto score = load_score(paths);
    const ToyDataset ds = make_toy_dataset(cfg.dataset);
    AttackCache cache(paths.cache_dir().string());
    EvalComponents comp;
    comp.classifier = clf.get();
    comp.score = score.get();
    comp.schedule = cfg.schedule;
    comp.test = &ds.test;
    comp.attack = cfg.attack;
    comp.attack_hash = attack_hash(cfg.attack);
    comp.purify = cfg.purify;
    comp.cache = &cache;

    const std::size_t total = cfg.plan.cell_count();
    std::size_t done = 0;
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport report = run_sweep(cfg.plan, comp, cfg.workers, [&](const CellRecord& r) {
        ++done;
        log("cell " + std::to_string(done) + "/" + std::to_string(total) + " " + r.mode + " t*=" + std::to_string(r.t_star) +
            " repeat " + std::to_string(r.repeat) + (r.failed ? " FAILED: " + r.cause : ""));
    });
    report.config_hash = config_hash(cfg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const fs::path dir = paths.eval_dir();
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "report.json", std::ios::binary);
        os << report_json(report);
    }
    const std::string table = render_table(report);
    std::ofstream(dir / "table.txt") << table;

    std::size_t failed = 0;
    std::ofstream summary(dir / "summary.txt");
    summary << "config_hash " << report.config_hash << "\nseed " << cfg.seed << "\ncells " << report.records.size()
            << "\nwall_seconds " << std::to_string(wall) << "\n";
    for (const auto& r : report.records) {
        summary << r.mode << " t*=" << r.t_star << " repeat " << r.repeat << " subset_seed " << r.subset_seed << " "
                << std::to_string(r.wall_seconds) << " s";
        if (r.failed) {
            ++failed;
            summary << " FAILED: " << r.cause;
        }
        summary << '\n';
    }
    std::cout << table;
    if (failed) log(std::to_string(failed) + " of " + std::to_string(report.records.size()) + " cells failed; see summary.txt");
    return failed == report.records.size() ? exit_all_failed : 0;
}

int cmd_analyze(const RunConfig& cfg, const std::string& input, const std::string& output) {
    const BatchFile f = read_batch(input);
    if (f.batch.range != RangeTag::signed_unit)
        throw InvalidInput(input + " is not a perturbation file (expected signed range, got " +
                           std::string(to_string(f.batch.range)) + ")");
    const SpectrumHistogram h = radial_spectrum(f.batch, cfg.histogram_bins);
    const std::string target = output.empty() ? (fs::path(input).replace_extension(".hist.tsv")).string() : output;
    write_histogram(target, h);
    std::cout << target << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Frequency-domain adversarial attacks and diffusion purification on a toy image pipeline"};
    app.require_subcommand(1);
    Overrides o;
    app.add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    app.add_option("--out", o.out, "Output directory (overrides out_dir)");
    app.add_option("--seed", o.seed, "Global seed (overrides seed)");
    app.add_option("--workers", o.workers, "Worker threads for eval")->check(CLI::PositiveNumber);
    app.add_option("--mode", o.mode, "Attack mode: pixel, mag, phase, phase_mag, all");
    app.add_option("--lambda", o.lambda, "Distortion weight");
    app.add_option("--t-star", o.t_star, "Diffusion timestep in (0, 1)");
    app.add_option("--dt", o.dt, "Reverse-solver step size");

    auto* train = app.add_subcommand("train", "Train the toy classifier and score model");
    auto* attack = app.add_subcommand("attack", "Attack test images and export perturbations");
    auto* purify_cmd = app.add_subcommand("purify", "Purify a batch file");
    std::string purify_input;
    std::size_t snapshots = 0;
    purify_cmd->add_option("input", purify_input, "Unit-range batch file (.fqb)")->required()->check(CLI::ExistingFile);
    purify_cmd->add_option("--snapshots", snapshots, "Reverse-process frames to export per sample");
    auto* eval = app.add_subcommand("eval", "Run the evaluation grid, or score given batch files");
    std::vector<std::string> eval_inputs;
    eval->add_option("inputs", eval_inputs, "Batch files to score instead of running the grid")->check(CLI::ExistingFile);
    auto* analyze = app.add_subcommand("analyze", "Radial spectrum of a perturbation file");
    std::string analyze_input, analyze_output;
    analyze->add_option("input", analyze_input, "Perturbation batch file")->required()->check(CLI::ExistingFile);
    analyze->add_option("-o,--output", analyze_output, "Histogram path");
    for (auto* sub : {train, attack, purify_cmd, eval, analyze}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : exit_usage;
    }

    RunConfig cfg;
    try {
        cfg = resolve_config(o);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_usage;
    }

    try {
        if (*train) return cmd_train(cfg);
        if (*attack) return cmd_attack(cfg);
        if (*purify_cmd) return cmd_purify(cfg, purify_input, snapshots);
        if (*eval) return cmd_eval(cfg, eval_inputs);
        if (*analyze) return cmd_analyze(cfg, analyze_input, analyze_output);
    } catch (const TrainingFailure& e) {
        std::cerr << "error: " << e.what() << " (loss curve:";
        for (double l : e.loss_curve) std::cerr << ' ' << l;
        std::cerr << ")\n";
        return exit_component;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_component;
    }
    return exit_usage;
}
