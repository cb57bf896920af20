#pragma once

// Run configuration: one JSON file covering dataset, training, attack,
// purification and evaluation settings. Missing keys keep their defaults.

#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "freqpure/attack.hpp"
#include "freqpure/bench.hpp"
#include "freqpure/diffusion.hpp"
#include "freqpure/models.hpp"

namespace freqpure {

struct RunConfig {
    ToyDatasetSpec dataset;
    ClassifierTraining classifier;
    ScoreTraining score;
    AttackConfig attack;
    DiffusionSchedule schedule;
    PurifyConfig purify;
    EvalPlan plan;
    std::size_t histogram_bins = 16;
    std::size_t attack_count = 16; ///< images attacked by the `attack` command
    std::string out_dir = "runs";
    std::size_t workers = 1;
    std::uint64_t seed = 0;

    void validate() const {
        dataset.validate();
        attack.validate();
        schedule.validate();
        purify.validate();
        plan.validate();
        if (histogram_bins < 2) throw InvalidInput("histogram_bins must be at least 2");
        if (workers == 0) throw InvalidInput("workers must be positive");
        if (plan.subset_size > dataset.test_size)
            throw InvalidInput("plan.subset_size exceeds the test split (" + std::to_string(dataset.test_size) + ")");
    }
};

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

/// Every field that influences results. out_dir and workers are excluded so
/// they do not change the config hash.
inline nlohmann::json canonical_json(const RunConfig& c) {
    nlohmann::json modes = nlohmann::json::array();
    for (auto m : c.plan.modes) modes.push_back(to_string(m));
    return {
        {"seed", c.seed},
        {"histogram_bins", c.histogram_bins},
        {"attack_count", c.attack_count},
        {"dataset",
         {{"channels", c.dataset.channels},
          {"height", c.dataset.height},
          {"width", c.dataset.width},
          {"class_count", c.dataset.class_count},
          {"train_size", c.dataset.train_size},
          {"val_size", c.dataset.val_size},
          {"test_size", c.dataset.test_size},
          {"seed", c.dataset.seed},
          {"band", c.dataset.band},
          {"separation", c.dataset.separation},
          {"spread", c.dataset.spread},
          {"amplitude", c.dataset.amplitude},
          {"pixel_noise", c.dataset.pixel_noise}}},
        {"classifier",
         {{"epochs", c.classifier.epochs},
          {"batch_size", c.classifier.batch_size},
          {"learning_rate", c.classifier.learning_rate},
          {"label_smoothing", c.classifier.label_smoothing},
          {"whitening_floor", c.classifier.whitening_floor},
          {"width", c.classifier.width}}},
        {"score",
         {{"epochs", c.score.epochs},
          {"batch_size", c.score.batch_size},
          {"learning_rate", c.score.learning_rate},
          {"t_min", c.score.t_min},
          {"width", c.score.width}}},
        {"attack",
         {{"lambda", c.attack.lambda},
          {"learning_rate", c.attack.learning_rate},
          {"weight_decay", c.attack.weight_decay},
          {"max_iterations", c.attack.max_iterations},
          {"patience", c.attack.patience},
          {"mode", to_string(c.attack.mode)},
          {"distortion", to_string(c.attack.distortion)}}},
        {"diffusion",
         {{"beta_min", c.schedule.beta_min},
          {"beta_max", c.schedule.beta_max},
          {"t_star", c.purify.t_star},
          {"dt", c.purify.dt},
          {"final_step_noiseless", c.purify.final_step_noiseless},
          {"seed", c.purify.seed}}},
        {"eval",
         {{"subset_size", c.plan.subset_size},
          {"subset_count", c.plan.subset_count},
          {"repeats", c.plan.repeats},
          {"modes", modes},
          {"t_star_list", c.plan.t_star_list},
          {"seeds", c.plan.seeds}}},
    };
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j = canonical_json(c);
    j["out_dir"] = c.out_dir;
    j["workers"] = c.workers;
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    using detail::read_key;
    RunConfig c;
    read_key(j, "seed", c.seed);
    read_key(j, "histogram_bins", c.histogram_bins);
    read_key(j, "attack_count", c.attack_count);
    read_key(j, "out_dir", c.out_dir);
    read_key(j, "workers", c.workers);
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        read_key(d, "channels", c.dataset.channels);
        read_key(d, "height", c.dataset.height);
        read_key(d, "width", c.dataset.width);
        read_key(d, "class_count", c.dataset.class_count);
        read_key(d, "train_size", c.dataset.train_size);
        read_key(d, "val_size", c.dataset.val_size);
        read_key(d, "test_size", c.dataset.test_size);
        read_key(d, "seed", c.dataset.seed);
        read_key(d, "band", c.dataset.band);
        read_key(d, "separation", c.dataset.separation);
        read_key(d, "spread", c.dataset.spread);
        read_key(d, "amplitude", c.dataset.amplitude);
        read_key(d, "pixel_noise", c.dataset.pixel_noise);
    }
    if (j.contains("classifier")) {
        const auto& d = j["classifier"];
        read_key(d, "epochs", c.classifier.epochs);
        read_key(d, "batch_size", c.classifier.batch_size);
        read_key(d, "learning_rate", c.classifier.learning_rate);
        read_key(d, "label_smoothing", c.classifier.label_smoothing);
        read_key(d, "whitening_floor", c.classifier.whitening_floor);
        read_key(d, "width", c.classifier.width);
    }
    if (j.contains("score")) {
        const auto& d = j["score"];
        read_key(d, "epochs", c.score.epochs);
        read_key(d, "batch_size", c.score.batch_size);
        read_key(d, "learning_rate", c.score.learning_rate);
        read_key(d, "t_min", c.score.t_min);
        read_key(d, "width", c.score.width);
    }
    if (j.contains("attack")) {
        const auto& d = j["attack"];
        read_key(d, "lambda", c.attack.lambda);
        read_key(d, "learning_rate", c.attack.learning_rate);
        read_key(d, "weight_decay", c.attack.weight_decay);
        read_key(d, "max_iterations", c.attack.max_iterations);
        read_key(d, "patience", c.attack.patience);
        if (d.contains("mode")) c.attack.mode = attack_mode_from_string(d["mode"].get<std::string>());
        if (d.contains("distortion")) c.attack.distortion = distortion_from_string(d["distortion"].get<std::string>());
    }
    if (j.contains("diffusion")) {
        const auto& d = j["diffusion"];
        read_key(d, "beta_min", c.schedule.beta_min);
        read_key(d, "beta_max", c.schedule.beta_max);
        read_key(d, "t_star", c.purify.t_star);
        read_key(d, "dt", c.purify.dt);
        read_key(d, "final_step_noiseless", c.purify.final_step_noiseless);
        read_key(d, "seed", c.purify.seed);
    }
    if (j.contains("eval")) {
        const auto& d = j["eval"];
        read_key(d, "subset_size", c.plan.subset_size);
        read_key(d, "subset_count", c.plan.subset_count);
        read_key(d, "repeats", c.plan.repeats);
        read_key(d, "t_star_list", c.plan.t_star_list);
        read_key(d, "seeds", c.plan.seeds);
        if (d.contains("modes")) {
            c.plan.modes.clear();
            for (const auto& m : d["modes"]) c.plan.modes.push_back(attack_mode_from_string(m.get<std::string>()));
        }
    }
    c.classifier.seed = c.seed;
    c.score.seed = c.seed;
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidInput("cannot open config " + path);
    try {
        return config_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(path + ": " + e.what());
    }
}

/// FNV-1a of the canonical serialization, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
    const std::string text = canonical_json(c).dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return detail::hex64(h);
}

/// Hash of the attack settings alone, for attack-cache keys.
inline std::string attack_hash(const AttackConfig& a) {
    RunConfig c;
    c.attack = a;
    c.attack.mode = AttackMode::pixel;
    const std::string text = canonical_json(c)["attack"].dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return detail::hex64(h);
}

} // namespace freqpure
