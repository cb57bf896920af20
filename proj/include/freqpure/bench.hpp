#pragma once

// Four-column accuracy protocol (clean, adversarial, purified clean,
// purified adversarial) over seeded test subsets, repeated runs and a grid
// of attack modes and diffusion timesteps.

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <future>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "freqpure/attack.hpp"
#include "freqpure/classifier.hpp"
#include "freqpure/diffusion.hpp"
#include "freqpure/io.hpp"
#include "freqpure/models.hpp"

namespace freqpure {

struct EvalPlan {
    std::size_t subset_size = 512;
    std::size_t subset_count = 3;
    std::size_t repeats = 3;
    std::vector<AttackMode> modes{AttackMode::pixel, AttackMode::mag, AttackMode::phase, AttackMode::phase_mag,
                                  AttackMode::all};
    std::vector<double> t_star_list{0.15};
    std::vector<std::uint64_t> seeds{0, 1, 2}; ///< one per subset

    void validate() const {
        if (subset_size == 0) throw InvalidInput("plan: subset_size must be positive");
        if (subset_count == 0 || repeats == 0) throw InvalidInput("plan: subset_count and repeats must be positive");
        if (seeds.size() != subset_count) throw InvalidInput("plan: need exactly one seed per subset");
        if (t_star_list.empty()) throw InvalidInput("plan: t_star_list is empty");
        for (double t : t_star_list)
            if (!(t > 0.0 && t < 1.0)) throw InvalidInput("plan: every t_star must lie in (0, 1)");
    }

    std::size_t cell_count() const { return std::max<std::size_t>(modes.size(), 1) * t_star_list.size() * repeats; }
};

/// Indices of a subset drawn without replacement; a pure function of (n, size, seed).
inline std::vector<std::size_t> subset_indices(std::size_t n, std::size_t size, std::uint64_t seed) {
    if (size > n) throw InvalidInput("subset of " + std::to_string(size) + " requested from " + std::to_string(n) + " samples");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 gen(seed);
    for (std::size_t i = 0; i < size; ++i) std::swap(idx[i], idx[i + gen() % (n - i)]);
    idx.resize(size);
    return idx;
}

/// One (mode, t*, repeat) run. Accuracies are percentages.
struct CellRecord {
    std::string model;
    std::string mode; ///< attack mode, or "none" for a plan without attacks
    double t_star = 0.0;
    std::size_t repeat = 0;
    std::uint64_t subset_seed = 0;
    std::uint64_t purify_seed = 0;
    std::optional<double> clean, adversarial, purified_clean, purified_adversarial;
    bool failed = false;
    std::string cause;
    double wall_seconds = 0.0; ///< kept out of the report file
};

struct MetricSummary {
    std::string model, mode, metric;
    double t_star = 0.0;
    std::vector<double> runs;
    double mean = 0.0, std = 0.0;
};

struct EvalReport {
    std::string config_hash;
    std::vector<CellRecord> records;
    std::vector<MetricSummary> summaries;
};

inline const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"clean", "adversarial", "purified_clean", "purified_adversarial"};
    return names;
}

inline std::optional<double> metric_value(const CellRecord& r, const std::string& m) {
    if (m == "clean") return r.clean;
    if (m == "adversarial") return r.adversarial;
    if (m == "purified_clean") return r.purified_clean;
    return r.purified_adversarial;
}

inline double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

/// Sample standard deviation (n - 1); zero for fewer than two runs.
inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / double(v.size() - 1));
}

/// Attack outputs shared across cells, keyed by (model, mode, subset seed, attack config).
class AttackCache {
public:
    explicit AttackCache(std::string dir = {}) : dir_(std::move(dir)) {
        if (!dir_.empty()) std::filesystem::create_directories(dir_);
    }

    static std::string key(const std::string& model, AttackMode mode, std::uint64_t subset_seed, const std::string& cfg_hash) {
        return model + "_" + to_string(mode) + "_s" + std::to_string(subset_seed) + "_" + cfg_hash;
    }

    /// Returns the cached batch or computes it once, even under concurrent callers.
    ImageBatch get(const std::string& k, const std::function<ImageBatch()>& compute) {
        std::shared_future<ImageBatch> fut;
        std::promise<ImageBatch> promise;
        bool owner = false;
        {
            std::lock_guard lock(mu_);
            auto it = entries_.find(k);
            if (it == entries_.end()) {
                fut = promise.get_future().share();
                entries_.emplace(k, fut);
                owner = true;
            } else {
                fut = it->second;
            }
        }
        if (owner) {
            try {
                promise.set_value(load_or_compute(k, compute));
            } catch (...) {
                promise.set_exception(std::current_exception());
            }
        }
        return fut.get();
    }

    std::size_t computed() const { return computed_.load(); }

private:
    ImageBatch load_or_compute(const std::string& k, const std::function<ImageBatch()>& compute) {
        const std::string path = dir_.empty() ? std::string() : (std::filesystem::path(dir_) / (k + ".fqb")).string();
        if (!path.empty() && std::filesystem::exists(path)) return read_batch(path).batch;
        ImageBatch b = compute();
        ++computed_;
        if (!path.empty()) write_batch(path, BatchFile{b, {}, "adversarial", 0, k});
        return b;
    }

    std::string dir_;
    std::mutex mu_;
    std::map<std::string, std::shared_future<ImageBatch>> entries_;
    std::atomic<std::size_t> computed_{0};
};

struct EvalComponents {
    const Classifier* classifier = nullptr;
    const ScoreModel* score = nullptr;
    DiffusionSchedule schedule;
    const LabeledBatch* test = nullptr;
    AttackConfig attack;
    std::string attack_hash;     ///< identifies `attack` in cache keys
    PurifyConfig purify;         ///< dt / final-step flag; t* and seed are set per cell
    std::string model_name = "toy";
    AttackCache* cache = nullptr;
    std::size_t purify_chunk = 64;
};

namespace detail {

inline double percent_correct(const Classifier& clf, const Tensor& x, std::span<const int> labels) {
    return 100.0 * accuracy(clf, x, labels);
}

inline ImageBatch purify_chunked(const ImageBatch& x, const EvalComponents& comp, const PurifyConfig& cfg) {
    const std::size_t n = x.shape().n, chunk = std::max<std::size_t>(comp.purify_chunk, 1);
    ImageBatch out{Tensor(x.shape()), RangeTag::unit};
    for (std::size_t start = 0; start < n; start += chunk) {
        std::vector<std::size_t> idx(std::min(chunk, n - start));
        std::iota(idx.begin(), idx.end(), start);
        PurifyConfig c = cfg;
        c.seed = cfg.seed + 7919 * start;
        const ImageBatch part = purify(ImageBatch{x.data.gather(idx), RangeTag::unit}, comp.schedule, *comp.score, c);
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy(part.data.item(i).begin(), part.data.item(i).end(), out.data.item(start + i).begin());
    }
    return out;
}

inline std::uint64_t purify_seed(std::uint64_t subset_seed, std::size_t repeat, double t_star) {
    return subset_seed * 1000003ull + repeat * 7919ull + std::uint64_t(std::llround(t_star * 1e6));
}

} // namespace detail

/// One run of the four-metric protocol. `mode` empty = clean columns only.
/// Failures are captured in the record rather than thrown.
inline CellRecord evaluate_cell(const EvalComponents& comp, std::optional<AttackMode> mode, double t_star,
                                const EvalPlan& plan, std::size_t repeat) {
    const auto t0 = std::chrono::steady_clock::now();
    CellRecord rec;
    rec.model = comp.model_name;
    rec.mode = mode ? to_string(*mode) : "none";
    rec.t_star = t_star;
    rec.repeat = repeat;
    rec.subset_seed = plan.seeds[repeat % plan.subset_count];
    rec.purify_seed = detail::purify_seed(rec.subset_seed, repeat, t_star);
    try {
        const auto idx = subset_indices(comp.test->size(), plan.subset_size, rec.subset_seed);
        const LabeledBatch sub = comp.test->subset(idx);
        const Classifier& clf = *comp.classifier;
        rec.clean = detail::percent_correct(clf, sub.images.data, sub.labels);
        PurifyConfig pc = comp.purify;
        pc.t_star = t_star;
        pc.seed = rec.purify_seed;
        rec.purified_clean = detail::percent_correct(clf, detail::purify_chunked(sub.images, comp, pc).data, sub.labels);
        if (mode) {
            AttackConfig ac = comp.attack;
            ac.mode = *mode;
            auto compute = [&] { return run_attack(sub.images, sub.labels, clf, ac).adversarial; };
            const ImageBatch adv =
                comp.cache ? comp.cache->get(AttackCache::key(clf.fingerprint(), *mode, rec.subset_seed, comp.attack_hash), compute)
                           : compute();
            rec.adversarial = detail::percent_correct(clf, adv.data, sub.labels);
            rec.purified_adversarial = detail::percent_correct(clf, detail::purify_chunked(adv, comp, pc).data, sub.labels);
        }
    } catch (const std::exception& e) {
        rec.failed = true;
        rec.cause = e.what();
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

/// Aggregates completed records per (model, mode, t*, metric).
inline std::vector<MetricSummary> summarize(const std::vector<CellRecord>& records) {
    std::vector<MetricSummary> out;
    std::map<std::tuple<std::string, std::string, double, std::string>, std::size_t> where;
    for (const auto& r : records) {
        if (r.failed) continue;
        for (const auto& m : metric_names()) {
            const auto v = metric_value(r, m);
            if (!v) continue;
            const auto key = std::make_tuple(r.model, r.mode, r.t_star, m);
            auto it = where.find(key);
            if (it == where.end()) {
                it = where.emplace(key, out.size()).first;
                out.push_back({r.model, r.mode, m, r.t_star, {}, 0.0, 0.0});
            }
            out[it->second].runs.push_back(*v);
        }
    }
    for (auto& s : out) {
        s.mean = mean_of(s.runs);
        s.std = sample_std(s.runs);
    }
    return out;
}

/// Runs the full grid (modes x t* x repeats) on `workers` threads. Records
/// come back in grid order whatever the scheduling.
inline EvalReport run_sweep(const EvalPlan& plan, const EvalComponents& comp, std::size_t workers = 1,
                            const std::function<void(const CellRecord&)>& on_done = {}) {
    plan.validate();
    if (!comp.classifier || !comp.score || !comp.test) throw InvalidInput("run_sweep: missing components");
    struct Job {
        std::optional<AttackMode> mode;
        double t_star;
        std::size_t repeat;
    };
    std::vector<Job> jobs;
    std::vector<std::optional<AttackMode>> modes(plan.modes.begin(), plan.modes.end());
    if (modes.empty()) modes.push_back(std::nullopt);
    for (const auto& m : modes)
        for (double t : plan.t_star_list)
            for (std::size_t r = 0; r < plan.repeats; ++r) jobs.push_back({m, t, r});

    EvalReport report;
    report.records.resize(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex done_mu;
    auto worker = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
            CellRecord rec = evaluate_cell(comp, jobs[j].mode, jobs[j].t_star, plan, jobs[j].repeat);
            std::lock_guard lock(done_mu);
            report.records[j] = std::move(rec);
            if (on_done) on_done(report.records[j]);
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < std::max<std::size_t>(workers, 1); ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    report.summaries = summarize(report.records);
    return report;
}

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

} // namespace detail

/// Machine-readable report: one record per cell run plus aggregates. Wall
/// clock times are excluded so identical configs give identical bytes.
inline std::string report_json(const EvalReport& r) {
    nlohmann::json j;
    j["config_hash"] = r.config_hash;
    j["records"] = nlohmann::json::array();
    for (const auto& c : r.records) {
        j["records"].push_back({{"model", c.model},
                                {"mode", c.mode},
                                {"t_star", c.t_star},
                                {"repeat", c.repeat},
                                {"subset_seed", c.subset_seed},
                                {"purify_seed", c.purify_seed},
                                {"clean", detail::opt_json(c.clean)},
                                {"adversarial", detail::opt_json(c.adversarial)},
                                {"purified_clean", detail::opt_json(c.purified_clean)},
                                {"purified_adversarial", detail::opt_json(c.purified_adversarial)},
                                {"failed", c.failed},
                                {"cause", c.cause}});
    }
    j["summary"] = nlohmann::json::array();
    for (const auto& s : r.summaries)
        j["summary"].push_back({{"model", s.model},
                                {"mode", s.mode},
                                {"t_star", s.t_star},
                                {"metric", s.metric},
                                {"runs", s.runs},
                                {"mean", s.mean},
                                {"std", s.std}});
    return j.dump(2) + "\n";
}

inline EvalReport parse_report(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    EvalReport r;
    r.config_hash = j.at("config_hash").get<std::string>();
    auto opt = [](const nlohmann::json& v) { return v.is_null() ? std::optional<double>() : std::optional<double>(v.get<double>()); };
    for (const auto& c : j.at("records")) {
        CellRecord rec;
        rec.model = c.at("model");
        rec.mode = c.at("mode");
        rec.t_star = c.at("t_star");
        rec.repeat = c.at("repeat");
        rec.subset_seed = c.at("subset_seed");
        rec.purify_seed = c.at("purify_seed");
        rec.clean = opt(c.at("clean"));
        rec.adversarial = opt(c.at("adversarial"));
        rec.purified_clean = opt(c.at("purified_clean"));
        rec.purified_adversarial = opt(c.at("purified_adversarial"));
        rec.failed = c.at("failed");
        rec.cause = c.at("cause");
        r.records.push_back(std::move(rec));
    }
    for (const auto& s : j.at("summary"))
        r.summaries.push_back({s.at("model"), s.at("mode"), s.at("metric"), s.at("t_star"),
                               s.at("runs").get<std::vector<double>>(), s.at("mean"), s.at("std")});
    return r;
}

/// Plain-text table, one row per (model, mode, t*), four metric columns as mean +- std.
inline std::string render_table(const EvalReport& r) {
    std::map<std::tuple<std::string, std::string, double>, std::map<std::string, const MetricSummary*>> rows;
    std::vector<std::tuple<std::string, std::string, double>> order;
    for (const auto& s : r.summaries) {
        const auto key = std::make_tuple(s.model, s.mode, s.t_star);
        if (!rows.count(key)) order.push_back(key);
        rows[key][s.metric] = &s;
    }
    std::ostringstream os;
    auto cell = [](const MetricSummary* s) {
        if (!s) return std::string("-");
        std::ostringstream c;
        c << std::fixed << std::setprecision(2) << s->mean << " +- " << s->std;
        return c.str();
    };
    os << std::left << std::setw(8) << "Model" << std::setw(11) << "Attack" << std::setw(7) << "t*" << std::setw(17)
       << "Clean" << std::setw(17) << "Adversarial" << std::setw(17) << "Purified Clean"
       << "Purified Adversarial\n";
    for (const auto& key : order) {
        const auto& m = rows[key];
        std::ostringstream t;
        t << std::get<2>(key);
        auto get = [&](const char* name) {
            auto it = m.find(name);
            return it == m.end() ? nullptr : it->second;
        };
        os << std::setw(8) << std::get<0>(key) << std::setw(11) << std::get<1>(key) << std::setw(7) << t.str()
           << std::setw(17) << cell(get("clean")) << std::setw(17) << cell(get("adversarial")) << std::setw(17)
           << cell(get("purified_clean")) << cell(get("purified_adversarial")) << '\n';
    }
    return os.str();
}

} // namespace freqpure
