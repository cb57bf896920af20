#pragma once

// Variance-preserving SDE machinery: linear beta schedule, one-shot forward
// noising and an Euler-Maruyama integrator for the reverse-time SDE.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "freqpure/tensor.hpp"

namespace freqpure {

/// beta(t) = beta_min + t (beta_max - beta_min) on t in [0, 1].
struct DiffusionSchedule {
    double beta_min = 0.1;
    double beta_max = 20.0;

    void validate() const {
        if (!(beta_min > 0.0) || !(beta_max > 0.0))
            throw InvalidInput("diffusion schedule: beta_min and beta_max must be positive");
    }

    double beta(double t) const { return beta_min + t * (beta_max - beta_min); }

    /// Closed-form integral of beta over [0, t].
    double integral(double t) const { return beta_min * t + 0.5 * (beta_max - beta_min) * t * t; }

    /// alpha_t = exp(-int_0^t beta).
    double alpha(double t) const {
        if (!(t >= 0.0 && t <= 1.0)) throw InvalidInput("alpha: t must lie in [0, 1], got " + std::to_string(t));
        return std::exp(-integral(t));
    }
};

inline double alpha(const DiffusionSchedule& s, double t) { return s.alpha(t); }

struct PurifyConfig {
    double t_star = 0.15;
    double dt = 1e-3;
    bool final_step_noiseless = true;
    bool deterministic = false; ///< drop every stochastic term of the reverse integrator
    std::uint64_t seed = 0;

    void validate() const {
        if (!(t_star > 0.0 && t_star < 1.0))
            throw InvalidInput("t_star must lie in the open interval (0, 1), got " + std::to_string(t_star));
        if (!(dt > 0.0)) throw InvalidInput("dt must be positive");
    }
};

/// grad_x log p_t(x) on signed-range batches.
class ScoreModel {
public:
    virtual ~ScoreModel() = default;
    virtual Tensor evaluate(const Tensor& x, double t) const = 0;
};

/// Wraps any callable as a ScoreModel (analytic scores, tests).
class FunctionScore final : public ScoreModel {
public:
    explicit FunctionScore(std::function<Tensor(const Tensor&, double)> fn) : fn_(std::move(fn)) {}
    Tensor evaluate(const Tensor& x, double t) const override { return fn_(x, t); }

private:
    std::function<Tensor(const Tensor&, double)> fn_;
};

/// Seeded standard-normal stream. One per purification call.
class NoiseSource {
public:
    explicit NoiseSource(std::uint64_t seed) : gen_(seed) {}
    void fill(Tensor& t) {
        for (double& v : t.values()) v = dist_(gen_);
    }
    Tensor draw(const Shape& s) {
        Tensor t(s);
        fill(t);
        return t;
    }

private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> dist_{0.0, 1.0};
};

/// sqrt(alpha) x + sqrt(1 - alpha) eps, drawn from `noise`.
inline ImageBatch forward_diffuse(const ImageBatch& x, const DiffusionSchedule& schedule, double t_star,
                                  NoiseSource& noise) {
    x.require_range(RangeTag::signed_unit, "forward_diffuse");
    if (!(t_star > 0.0 && t_star < 1.0)) throw InvalidInput("forward_diffuse: t_star must lie in (0, 1)");
    const double a = schedule.alpha(t_star);
    const double sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
    ImageBatch out{noise.draw(x.shape()), RangeTag::signed_unit};
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = sa * x.data[i] + sn * out.data[i];
    return out;
}

inline ImageBatch forward_diffuse(const ImageBatch& x, const DiffusionSchedule& schedule, double t_star,
                                  std::uint64_t seed) {
    NoiseSource noise(seed);
    return forward_diffuse(x, schedule, t_star, noise);
}

/// Times at which the reverse integrator evaluates the score: t*, t*-dt, ...
/// with a shortened final step that lands on 0.
inline std::vector<double> reverse_time_grid(double t_star, double dt) {
    std::vector<double> grid;
    if (dt >= t_star) return {t_star};
    const auto full = std::size_t(std::floor(t_star / dt * (1.0 + 1e-12)));
    for (std::size_t k = 0; k < full; ++k) grid.push_back(t_star - double(k) * dt);
    // leftover shorter than 1e-9 of a step is rounding noise, not a step
    if (t_star - double(full) * dt > 1e-9 * dt) grid.push_back(t_star - double(full) * dt);
    return grid;
}

/// Observer hook for trajectory snapshots: (step index, time after the step, state).
using ReverseObserver = std::function<void(std::size_t, double, const Tensor&)>;

/// Euler-Maruyama on the reverse VP-SDE from t* to 0:
///   x <- x + [beta/2 x + beta s(x,t)] dt + sqrt(beta dt) z
inline ImageBatch reverse_denoise(const ImageBatch& x_t, const DiffusionSchedule& schedule, const ScoreModel& score,
                                  const PurifyConfig& cfg, NoiseSource& noise, const ReverseObserver& observe = {}) {
    x_t.require_range(RangeTag::signed_unit, "reverse_denoise");
    cfg.validate();
    const auto grid = reverse_time_grid(cfg.t_star, cfg.dt);
    Tensor x = x_t.data;
    Tensor z(x.shape());
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const double t = grid[k];
        const double h = std::min(cfg.dt, t);
        const double b = schedule.beta(t);
        const Tensor s = score.evaluate(x, t);
        if (!s.all_finite())
            throw NumericalFailure("score model returned non-finite values at t=" + std::to_string(t));
        const bool last = k + 1 == grid.size();
        const bool stochastic = !cfg.deterministic && !(last && cfg.final_step_noiseless);
        if (stochastic) noise.fill(z);
        const double sd = std::sqrt(b * h);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += (0.5 * b * x[i] + b * s[i]) * h;
            if (stochastic) x[i] += sd * z[i];
        }
        if (observe) observe(k, t - h, x);
    }
    return {std::move(x), RangeTag::signed_unit};
}

inline ImageBatch reverse_denoise(const ImageBatch& x_t, const DiffusionSchedule& schedule, const ScoreModel& score,
                                  const PurifyConfig& cfg) {
    NoiseSource noise(cfg.seed);
    return reverse_denoise(x_t, schedule, score, cfg, noise);
}

/// Intermediate states of one purification, for visualisation.
struct PurifyTrajectory {
    ImageBatch diffused;                 ///< forward sample at t*, unit range
    std::vector<ImageBatch> frames;      ///< evenly spaced reverse states, unit range
    std::vector<double> frame_times;
};

/// Full two-step purification of a unit-range batch: rescale, diffuse to t*,
/// integrate back to 0, rescale and clip. Forward and reverse noise share one
/// seeded stream, forward draws first.
inline ImageBatch purify(const ImageBatch& x, const DiffusionSchedule& schedule, const ScoreModel& score,
                         const PurifyConfig& cfg, PurifyTrajectory* trajectory = nullptr,
                         std::size_t snapshot_count = 0) {
    x.require_range(RangeTag::unit, "purify");
    cfg.validate();
    NoiseSource noise(cfg.seed);
    const ImageBatch diffused = forward_diffuse(to_signed(x), schedule, cfg.t_star, noise);
    ReverseObserver observer;
    if (trajectory) {
        trajectory->diffused = to_unit(diffused);
        trajectory->frames.clear();
        trajectory->frame_times.clear();
        const std::size_t steps = reverse_time_grid(cfg.t_star, cfg.dt).size();
        if (snapshot_count > 0) {
            // frames j = 1..K after step floor(j * steps / (K + 1)) - 1
            std::vector<std::size_t> marks;
            for (std::size_t j = 1; j <= snapshot_count; ++j) {
                std::size_t m = (j * steps) / (snapshot_count + 1);
                marks.push_back(m == 0 ? 0 : m - 1);
            }
            observer = [trajectory, marks](std::size_t k, double t, const Tensor& state) {
                for (std::size_t m : marks)
                    if (m == k) {
                        trajectory->frames.push_back(to_unit(ImageBatch{state, RangeTag::signed_unit}));
                        trajectory->frame_times.push_back(t);
                    }
            };
        }
    }
    const ImageBatch restored = reverse_denoise(diffused, schedule, score, cfg, noise, observer);
    return to_unit(restored);
}

} // namespace freqpure
