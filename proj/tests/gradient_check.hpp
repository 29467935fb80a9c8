#pragma once

#include "rio/descriptor.hpp"

#include <algorithm>
#include <cmath>

namespace riotest {

inline rio::Patch random_patch(rio::Rng& rng, int resolution) {
    rio::Patch p;
    p.resolution = resolution;
    p.values.resize(std::size_t(resolution) * resolution * resolution);
    for (auto& v : p.values) {
        v = static_cast<float>(rng.uniform(0.0, 1.0));
    }
    return p;
}

inline rio::TrainingTriplet random_triplet(rio::Rng& rng, int resolution) {
    rio::TrainingTriplet t;
    for (rio::PatchPair* pair : {&t.anchor, &t.positive, &t.negative}) {
        pair->fine = random_patch(rng, resolution);
        pair->coarse = random_patch(rng, resolution);
    }
    return t;
}

// A model exercising every layer kind on small inputs.
inline rio::NetworkConfig tiny_config(rio::NetworkConfig::Arch arch =
                                          rio::NetworkConfig::Arch::multiscale) {
    using rio::nn::LayerDesc;
    rio::NetworkConfig cfg;
    cfg.arch = arch;
    cfg.input_resolution = 8;
    cfg.sse = {
        LayerDesc::conv3(1, 2), LayerDesc::relu(), LayerDesc::maxpool2(),
        LayerDesc::flatten(),   LayerDesc::dense(54, 6), LayerDesc::relu(),
    };
    cfg.mse = {
        LayerDesc::dense(6 * cfg.active_sse_count(), 8),
        LayerDesc::relu(),
        LayerDesc::dense(8, 8),
    };
    return cfg;
}

struct FdReport {
    double max_rel_error = 0.0;
    int checked = 0;
    int fallback_refined = 0;  // params re-checked at a finer step (kink crossings)
    bool hinge_active = false;
};

// Central finite differences of the batch loss against backward()'s analytic
// gradient, every parameter. A failure at the coarse step is re-checked at
// step/100 before it counts: a discretization artifact (ReLU/pool kink inside
// the step) vanishes, a wrong gradient does not.
inline FdReport finite_difference_check(const rio::NetworkConfig& cfg, std::uint64_t seed,
                                        double step, double tol) {
    using S = double;
    rio::Rng rng(rio::Rng::derive(seed, 0xfd));
    rio::DescriptorModel<S> model = rio::init_descriptor_model<S>(cfg, seed);
    std::vector<rio::TrainingTriplet> batch = {random_triplet(rng, cfg.input_resolution),
                                               random_triplet(rng, cfg.input_resolution)};

    rio::TripletLossConfig lc;
    lc.margin = 10.0;  // keep every hinge active and far from its kink
    lc.threads = 1;

    auto loss_at = [&](const rio::DescriptorModel<S>& m) {
        double total = 0.0;
        for (const auto& t : batch) {
            auto fa = rio::forward<S>(m, t.anchor.fine, t.anchor.coarse);
            auto fp = rio::forward<S>(m, t.positive.fine, t.positive.coarse);
            auto fn = rio::forward<S>(m, t.negative.fine, t.negative.coarse);
            total += rio::triplet_loss<S>(fa, fp, fn, lc.margin);
        }
        return total / static_cast<double>(batch.size());
    };

    rio::BatchGradient<S> analytic = rio::backward<S>(model, batch, lc);

    FdReport report;
    report.hinge_active = analytic.mean_loss > 1.0;
    rio::DescriptorModel<S> probe = model;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        auto numeric_at = [&](double h) {
            probe.params[i] = model.params[i] + h;
            double lp = loss_at(probe);
            probe.params[i] = model.params[i] - h;
            double lm = loss_at(probe);
            probe.params[i] = model.params[i];
            return (lp - lm) / (2.0 * h);
        };
        double numeric = numeric_at(step);
        double denom = std::max({std::abs(numeric), std::abs(analytic.grads[i]), 1e-6});
        double rel = std::abs(numeric - analytic.grads[i]) / denom;
        if (rel >= tol) {
            numeric = numeric_at(step / 100.0);
            denom = std::max({std::abs(numeric), std::abs(analytic.grads[i]), 1e-6});
            rel = std::abs(numeric - analytic.grads[i]) / denom;
            ++report.fallback_refined;
        }
        report.max_rel_error = std::max(report.max_rel_error, rel);
        ++report.checked;
    }
    return report;
}

}  // namespace riotest
