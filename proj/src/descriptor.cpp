#include "rio/descriptor.hpp"

#include "binio.hpp"
#include "json_helpers.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <mutex>
#include <thread>

namespace rio {

using jsonio::json;

namespace nn {

std::int64_t LayerDesc::param_count() const {
    switch (kind) {
        case LayerKind::conv3:
            return std::int64_t(out_channels) * in_channels * 27 + out_channels;
        case LayerKind::dense:
            return std::int64_t(in_features) * out_features + out_features;
        default:
            return 0;
    }
}

}  // namespace nn

// ---- stack planning -------------------------------------------------------------

namespace {

using nn::LayerDesc;
using nn::LayerKind;

struct LayerShape {
    int channels = 0;
    int n = 0;         // cubic spatial extent; 0 once flattened
    int features = 0;  // set once flattened

    bool flat() const { return n == 0; }
    std::int64_t size() const {
        return flat() ? features : std::int64_t(channels) * n * n * n;
    }
};

struct StackPlan {
    std::vector<LayerDesc> descs;
    std::vector<LayerShape> shapes;          // shapes[i] = input of layer i; back() = output
    std::vector<std::int64_t> param_offset;  // within the stack's parameter block
    std::int64_t param_count = 0;

    int output_dim() const { return shapes.back().features; }
};

StackPlan plan_stack(const std::vector<LayerDesc>& descs, LayerShape input, const char* name) {
    StackPlan plan;
    plan.descs = descs;
    plan.shapes.push_back(input);
    for (const LayerDesc& d : descs) {
        const LayerShape& in = plan.shapes.back();
        LayerShape out = in;
        switch (d.kind) {
            case LayerKind::conv3:
                if (in.flat() || in.n < 3 || in.channels != d.in_channels) {
                    throw std::invalid_argument(std::string(name) + ": conv3 shape mismatch");
                }
                out.channels = d.out_channels;
                out.n = in.n - 2;
                break;
            case LayerKind::maxpool2:
                if (in.flat() || in.n % 2 != 0) {
                    throw std::invalid_argument(std::string(name) + ": maxpool2 needs even extent");
                }
                out.n = in.n / 2;
                break;
            case LayerKind::relu:
                break;
            case LayerKind::flatten:
                if (in.flat()) {
                    throw std::invalid_argument(std::string(name) + ": flatten of flat input");
                }
                out = LayerShape{0, 0, static_cast<int>(in.size())};
                break;
            case LayerKind::dense:
                if (!in.flat() || in.features != d.in_features) {
                    throw std::invalid_argument(std::string(name) + ": dense shape mismatch");
                }
                out = LayerShape{0, 0, d.out_features};
                break;
        }
        plan.param_offset.push_back(plan.param_count);
        plan.param_count += d.param_count();
        plan.shapes.push_back(out);
    }
    if (!plan.shapes.back().flat()) {
        throw std::invalid_argument(std::string(name) + ": stack must end in a flat feature vector");
    }
    return plan;
}

struct ModelPlan {
    StackPlan sse;
    StackPlan mse;
    int active_sse = 2;
    std::int64_t sse_params = 0;  // per scale

    std::int64_t total() const { return sse_params * active_sse + mse.param_count; }
    int concat_dim() const { return sse.output_dim() * active_sse; }
};

ModelPlan plan_model(const NetworkConfig& cfg) {
    if (cfg.input_resolution < 2) {
        throw std::invalid_argument("input_resolution must be >= 2");
    }
    ModelPlan plan;
    plan.sse = plan_stack(cfg.sse, LayerShape{1, cfg.input_resolution, 0}, "sse");
    plan.active_sse = cfg.active_sse_count();
    plan.sse_params = plan.sse.param_count;
    plan.mse = plan_stack(cfg.mse, LayerShape{0, 0, plan.sse.output_dim() * plan.active_sse}, "mse");
    return plan;
}

}  // namespace

NetworkConfig NetworkConfig::standard(Arch arch, int input_resolution) {
    // shape chain: r -> r-4 -> /2 -> -4 -> /2
    int n = input_resolution - 4;
    if (n <= 0 || n % 2 != 0 || (n / 2 - 4) <= 0 || (n / 2 - 4) % 2 != 0) {
        throw std::invalid_argument("standard stack needs a resolution divisible by 4, >= 16");
    }
    n = (n / 2 - 4) / 2;

    NetworkConfig cfg;
    cfg.arch = arch;
    cfg.input_resolution = input_resolution;
    cfg.sse = {
        LayerDesc::conv3(1, 8),    LayerDesc::relu(),
        LayerDesc::conv3(8, 16),   LayerDesc::relu(),
        LayerDesc::maxpool2(),
        LayerDesc::conv3(16, 32),  LayerDesc::relu(),
        LayerDesc::conv3(32, 64),  LayerDesc::relu(),
        LayerDesc::maxpool2(),
        LayerDesc::flatten(),
        LayerDesc::dense(64 * n * n * n, 256), LayerDesc::relu(),
    };
    int concat = 256 * cfg.active_sse_count();
    cfg.mse = {
        LayerDesc::dense(concat, 512), LayerDesc::relu(),
        LayerDesc::dense(512, 512),
    };
    return cfg;
}

std::int64_t NetworkConfig::sse_param_count() const {
    std::int64_t n = 0;
    for (const auto& d : sse) {
        n += d.param_count();
    }
    return n;
}

std::int64_t NetworkConfig::mse_param_count() const {
    std::int64_t n = 0;
    for (const auto& d : mse) {
        n += d.param_count();
    }
    return n;
}

std::int64_t NetworkConfig::param_count() const {
    return sse_param_count() * active_sse_count() + mse_param_count();
}

int NetworkConfig::sse_output_dim() const {
    return plan_stack(sse, LayerShape{1, input_resolution, 0}, "sse").output_dim();
}

int NetworkConfig::feature_dim() const {
    return plan_model(*this).mse.output_dim();
}

void NetworkConfig::validate() const {
    plan_model(*this);
}

// ---- layer kernels --------------------------------------------------------------

namespace {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecXT = Eigen::Vector<S, Eigen::Dynamic>;

// im2col for valid 3³ convolution: column r = c*27 + (dz*3+dy)*3+dx holds the
// shifted input channel c; rows enumerate output voxels x-fastest.
template <typename S>
void im2col(const S* input, int channels, int n, AlignedVec<S>& out) {
    const int m = n - 2;
    const std::int64_t vout = std::int64_t(m) * m * m;
    out.resize(vout * channels * 27);
    std::int64_t col = 0;
    for (int c = 0; c < channels; ++c) {
        const S* chan = input + std::int64_t(c) * n * n * n;
        for (int dz = 0; dz < 3; ++dz) {
            for (int dy = 0; dy < 3; ++dy) {
                for (int dx = 0; dx < 3; ++dx) {
                    S* dst = out.data() + col * vout;
                    for (int z = 0; z < m; ++z) {
                        for (int y = 0; y < m; ++y) {
                            const S* src = chan + (std::int64_t(z + dz) * n + (y + dy)) * n + dx;
                            std::copy(src, src + m, dst);
                            dst += m;
                        }
                    }
                    ++col;
                }
            }
        }
    }
}

// transpose of im2col: scatter-add columns back into the input gradient
template <typename S>
void col2im_add(const S* cols, int channels, int n, S* d_input) {
    const int m = n - 2;
    const std::int64_t vout = std::int64_t(m) * m * m;
    std::int64_t col = 0;
    for (int c = 0; c < channels; ++c) {
        S* chan = d_input + std::int64_t(c) * n * n * n;
        for (int dz = 0; dz < 3; ++dz) {
            for (int dy = 0; dy < 3; ++dy) {
                for (int dx = 0; dx < 3; ++dx) {
                    const S* src = cols + col * vout;
                    for (int z = 0; z < m; ++z) {
                        for (int y = 0; y < m; ++y) {
                            S* dst = chan + (std::int64_t(z + dz) * n + (y + dy)) * n + dx;
                            for (int x = 0; x < m; ++x) {
                                dst[x] += src[x];
                            }
                            src += m;
                        }
                    }
                    ++col;
                }
            }
        }
    }
}

template <typename S>
struct StackCache {
    std::vector<AlignedVec<S>> inputs;              // per layer
    std::vector<std::vector<std::int32_t>> argmax;  // per layer (pool layers only)
};

template <typename S>
struct Workspace {
    AlignedVec<S> im2col_buf;
    AlignedVec<S> gemm_buf;
};

template <typename S>
void stack_forward(const StackPlan& plan, const S* params, AlignedVec<S> input,
                   AlignedVec<S>& output, StackCache<S>* cache, Workspace<S>& ws) {
    if (cache) {
        cache->inputs.resize(plan.descs.size());
        cache->argmax.assign(plan.descs.size(), {});
    }
    AlignedVec<S> cur = std::move(input);
    for (std::size_t li = 0; li < plan.descs.size(); ++li) {
        const LayerDesc& d = plan.descs[li];
        const LayerShape& in = plan.shapes[li];
        const LayerShape& out = plan.shapes[li + 1];
        const S* layer_params = params + plan.param_offset[li];
        AlignedVec<S> next(static_cast<std::size_t>(out.size()));

        switch (d.kind) {
            case LayerKind::conv3: {
                const int m = out.n;
                const std::int64_t vout = std::int64_t(m) * m * m;
                const std::int64_t r = std::int64_t(d.in_channels) * 27;
                im2col(cur.data(), d.in_channels, in.n, ws.im2col_buf);
                Eigen::Map<const MatX<S>> mcol(ws.im2col_buf.data(), vout, r);
                Eigen::Map<const MatX<S>> w(layer_params, r, d.out_channels);
                Eigen::Map<MatX<S>> o(next.data(), vout, d.out_channels);
                o.noalias() = mcol * w;
                const S* bias = layer_params + r * d.out_channels;
                for (int c = 0; c < d.out_channels; ++c) {
                    o.col(c).array() += bias[c];
                }
                break;
            }
            case LayerKind::relu: {
                for (std::size_t i = 0; i < cur.size(); ++i) {
                    next[i] = cur[i] > S(0) ? cur[i] : S(0);
                }
                break;
            }
            case LayerKind::maxpool2: {
                const int n = in.n, m = out.n;
                std::vector<std::int32_t>* arg = nullptr;
                if (cache) {
                    cache->argmax[li].resize(next.size());
                    arg = &cache->argmax[li];
                }
                std::size_t oi = 0;
                for (int c = 0; c < in.channels; ++c) {
                    const S* chan = cur.data() + std::int64_t(c) * n * n * n;
                    const std::int64_t base = std::int64_t(c) * n * n * n;
                    for (int z = 0; z < m; ++z) {
                        for (int y = 0; y < m; ++y) {
                            for (int x = 0; x < m; ++x) {
                                std::int64_t best_idx = 0;
                                S best = std::numeric_limits<S>::lowest();
                                for (int dz = 0; dz < 2; ++dz) {
                                    for (int dy = 0; dy < 2; ++dy) {
                                        for (int dx = 0; dx < 2; ++dx) {
                                            std::int64_t idx =
                                                (std::int64_t(2 * z + dz) * n + (2 * y + dy)) * n +
                                                (2 * x + dx);
                                            if (chan[idx] > best) {
                                                best = chan[idx];
                                                best_idx = idx;
                                            }
                                        }
                                    }
                                }
                                next[oi] = best;
                                if (arg) {
                                    (*arg)[oi] = static_cast<std::int32_t>(base + best_idx);
                                }
                                ++oi;
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::flatten: {
                next = cur;  // [c][z][y][x] already flattens in feature order
                break;
            }
            case LayerKind::dense: {
                Eigen::Map<const MatX<S>> w(layer_params, d.in_features, d.out_features);
                const S* bias = layer_params + std::int64_t(d.in_features) * d.out_features;
                Eigen::Map<const VecXT<S>> x(cur.data(), d.in_features);
                Eigen::Map<VecXT<S>> y(next.data(), d.out_features);
                y.noalias() = w.transpose() * x;
                y += Eigen::Map<const VecXT<S>>(bias, d.out_features);
                break;
            }
        }
        if (cache) {
            cache->inputs[li] = std::move(cur);
        }
        cur = std::move(next);
    }
    output = std::move(cur);
}

// d_out is consumed; param gradients accumulate (+=) into param_grads.
template <typename S>
AlignedVec<S> stack_backward(const StackPlan& plan, const S* params, const StackCache<S>& cache,
                             AlignedVec<S> d_out, S* param_grads, Workspace<S>& ws,
                             bool need_input_grad) {
    AlignedVec<S> grad = std::move(d_out);
    for (std::size_t li = plan.descs.size(); li-- > 0;) {
        const LayerDesc& d = plan.descs[li];
        const LayerShape& in = plan.shapes[li];
        const AlignedVec<S>& input = cache.inputs[li];
        S* layer_grads = param_grads + plan.param_offset[li];
        const S* layer_params = params + plan.param_offset[li];
        const bool want_dx = li > 0 || need_input_grad;
        AlignedVec<S> d_in;

        switch (d.kind) {
            case LayerKind::conv3: {
                const int m = in.n - 2;
                const std::int64_t vout = std::int64_t(m) * m * m;
                const std::int64_t r = std::int64_t(d.in_channels) * 27;
                im2col(input.data(), d.in_channels, in.n, ws.im2col_buf);
                Eigen::Map<const MatX<S>> mcol(ws.im2col_buf.data(), vout, r);
                Eigen::Map<const MatX<S>> dy(grad.data(), vout, d.out_channels);

                Eigen::Map<MatX<S>> dw(layer_grads, r, d.out_channels);
                dw.noalias() += mcol.transpose() * dy;
                S* dbias = layer_grads + r * d.out_channels;
                for (int c = 0; c < d.out_channels; ++c) {
                    dbias[c] += dy.col(c).sum();
                }
                if (want_dx) {
                    ws.gemm_buf.resize(vout * r);
                    Eigen::Map<MatX<S>> dcols(ws.gemm_buf.data(), vout, r);
                    Eigen::Map<const MatX<S>> w(layer_params, r, d.out_channels);
                    dcols.noalias() = dy * w.transpose();
                    d_in.assign(input.size(), S(0));
                    col2im_add(ws.gemm_buf.data(), d.in_channels, in.n, d_in.data());
                }
                break;
            }
            case LayerKind::relu: {
                if (want_dx) {
                    d_in.resize(input.size());
                    for (std::size_t i = 0; i < input.size(); ++i) {
                        d_in[i] = input[i] > S(0) ? grad[i] : S(0);
                    }
                }
                break;
            }
            case LayerKind::maxpool2: {
                if (want_dx) {
                    d_in.assign(input.size(), S(0));
                    const auto& arg = cache.argmax[li];
                    for (std::size_t i = 0; i < grad.size(); ++i) {
                        d_in[arg[i]] += grad[i];
                    }
                }
                break;
            }
            case LayerKind::flatten: {
                if (want_dx) {
                    d_in = std::move(grad);
                }
                break;
            }
            case LayerKind::dense: {
                Eigen::Map<const VecXT<S>> x(input.data(), d.in_features);
                Eigen::Map<const VecXT<S>> dy(grad.data(), d.out_features);
                Eigen::Map<MatX<S>> dw(layer_grads, d.in_features, d.out_features);
                dw.noalias() += x * dy.transpose();
                S* dbias = layer_grads + std::int64_t(d.in_features) * d.out_features;
                Eigen::Map<VecXT<S>>(dbias, d.out_features) += dy;
                if (want_dx) {
                    d_in.resize(d.in_features);
                    Eigen::Map<const MatX<S>> w(layer_params, d.in_features, d.out_features);
                    Eigen::Map<VecXT<S>>(d_in.data(), d.in_features).noalias() = w * dy;
                }
                break;
            }
        }
        grad = std::move(d_in);
    }
    return grad;
}

template <typename S>
AlignedVec<S> patch_values(const Patch& patch, int expected_resolution, const char* what) {
    if (patch.resolution != expected_resolution ||
        patch.values.size() !=
            std::size_t(patch.resolution) * patch.resolution * patch.resolution) {
        throw std::invalid_argument(std::string(what) + ": patch shape mismatch, expected " +
                                    std::to_string(expected_resolution) + "^3");
    }
    return AlignedVec<S>(patch.values.begin(), patch.values.end());
}

// activation caches of one stream (anchor, positive or negative)
template <typename S>
struct StreamCache {
    StackCache<S> sse[2];
    StackCache<S> mse;
};

template <typename S>
VecXT<S> model_forward(const ModelPlan& plan, const NetworkConfig& cfg, const S* params,
                       const Patch& fine, const Patch& coarse, StreamCache<S>* cache,
                       Workspace<S>& ws, bool cache_sse = true) {
    AlignedVec<S> concat(static_cast<std::size_t>(plan.concat_dim()));
    int slot = 0;
    const std::array<std::pair<bool, const Patch*>, 2> scales = {
        std::make_pair(cfg.uses_fine(), &fine), std::make_pair(cfg.uses_coarse(), &coarse)};
    for (const auto& [active, patch] : scales) {
        if (!active) {
            continue;
        }
        AlignedVec<S> out;
        stack_forward(plan.sse, params + std::int64_t(slot) * plan.sse_params,
                      patch_values<S>(*patch, cfg.input_resolution, "forward"), out,
                      cache && cache_sse ? &cache->sse[slot] : nullptr, ws);
        std::copy(out.begin(), out.end(), concat.begin() + std::int64_t(slot) * plan.sse.output_dim());
        ++slot;
    }
    AlignedVec<S> feature;
    stack_forward(plan.mse, params + plan.sse_params * plan.active_sse, std::move(concat), feature,
                  cache ? &cache->mse : nullptr, ws);
    return Eigen::Map<const VecXT<S>>(feature.data(), feature.size());
}

// Backpropagates d(loss)/d(feature) of one stream into the shared gradients.
template <typename S>
void model_backward(const ModelPlan& plan, const S* params, const StreamCache<S>& cache,
                    const VecXT<S>& d_feature, S* grads, Workspace<S>& ws, bool sse_frozen) {
    AlignedVec<S> d_feat(d_feature.data(), d_feature.data() + d_feature.size());
    S* mse_grads = grads + plan.sse_params * plan.active_sse;
    const S* mse_params = params + plan.sse_params * plan.active_sse;
    AlignedVec<S> d_concat =
        stack_backward(plan.mse, mse_params, cache.mse, std::move(d_feat), mse_grads, ws, !sse_frozen);
    if (sse_frozen) {
        return;
    }
    for (int slot = 0; slot < plan.active_sse; ++slot) {
        AlignedVec<S> d_out(d_concat.begin() + std::int64_t(slot) * plan.sse.output_dim(),
                            d_concat.begin() + std::int64_t(slot + 1) * plan.sse.output_dim());
        stack_backward(plan.sse, params + std::int64_t(slot) * plan.sse_params, cache.sse[slot],
                       std::move(d_out), grads + std::int64_t(slot) * plan.sse_params, ws, false);
    }
}

// loss + d(loss)/d(feature) for one triplet; zero gradients when the hinge is
// inactive (and exactly at the kink).
template <typename S>
S triplet_loss_grads(const VecXT<S>& fa, const VecXT<S>& fp, const VecXT<S>& fn, S margin,
                     VecXT<S>& dfa, VecXT<S>& dfp, VecXT<S>& dfn) {
    VecXT<S> ap = fa - fp;
    VecXT<S> an = fa - fn;
    S hinge = ap.squaredNorm() - an.squaredNorm() + margin;
    if (hinge > S(0)) {
        dfa = S(2) * (fn - fp);
        dfp = S(-2) * ap;
        dfn = S(2) * an;
        return hinge;
    }
    dfa.setZero(fa.size());
    dfp.setZero(fa.size());
    dfn.setZero(fa.size());
    return S(0);
}

// Gradient of the mean batch loss. Workers claim triplets in order and merge
// their per-triplet gradients through a sequencer so the accumulation order
// never depends on thread count or scheduling.
template <typename S>
BatchGradient<S> backward_batch(const DescriptorModel<S>& model, const ModelPlan& plan,
                                std::span<const TrainingTriplet* const> batch,
                                const TripletLossConfig& config) {
    BatchGradient<S> result;
    result.grads.assign(model.params.size(), S(0));
    if (batch.empty()) {
        return result;
    }

    const bool frozen = config.freeze == TripletLossConfig::Freeze::sse_frozen;
    const S margin = static_cast<S>(config.margin);
    const S scale = S(1) / static_cast<S>(batch.size());
    std::vector<double> losses(batch.size(), 0.0);

    std::atomic<std::size_t> next{0};
    std::size_t turn = 0;
    std::mutex turn_mutex;
    std::condition_variable turn_cv;

    auto worker = [&] {
        Workspace<S> ws;
        AlignedVec<S> local;
        for (;;) {
            std::size_t bi = next.fetch_add(1);
            if (bi >= batch.size()) {
                return;
            }
            const TrainingTriplet& t = *batch[bi];
            StreamCache<S> caches[3];
            VecXT<S> f[3];
            const PatchPair* pairs[3] = {&t.anchor, &t.positive, &t.negative};
            for (int s = 0; s < 3; ++s) {
                f[s] = model_forward<S>(plan, model.config, model.params.data(), pairs[s]->fine,
                                        pairs[s]->coarse, &caches[s], ws, !frozen);
            }
            VecXT<S> df[3];
            double loss = static_cast<double>(
                triplet_loss_grads<S>(f[0], f[1], f[2], margin, df[0], df[1], df[2]));
            bool active = loss > 0.0;
            if (active) {
                local.assign(model.params.size(), S(0));
                for (int s = 0; s < 3; ++s) {
                    df[s] *= scale;
                    model_backward<S>(plan, model.params.data(), caches[s], df[s], local.data(), ws,
                                      frozen);
                }
            }

            std::unique_lock lock(turn_mutex);
            turn_cv.wait(lock, [&] { return turn == bi; });
            losses[bi] = loss;
            if (active) {
                Eigen::Map<VecXT<S>>(result.grads.data(), result.grads.size()) +=
                    Eigen::Map<const VecXT<S>>(local.data(), local.size());
            }
            ++turn;
            lock.unlock();
            turn_cv.notify_all();
        }
    };

    int workers = std::max(1, std::min<int>(config.threads, static_cast<int>(batch.size())));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back(worker);
        }
        for (auto& th : pool) {
            th.join();
        }
    }

    double total = 0.0;
    for (double l : losses) {
        total += l;
    }
    result.mean_loss = total / static_cast<double>(batch.size());
    return result;
}

}  // namespace

// ---- public API -------------------------------------------------------------------

template <typename S>
DescriptorModel<S> init_descriptor_model(const NetworkConfig& config, std::uint64_t seed) {
    ModelPlan plan = plan_model(config);
    DescriptorModel<S> model;
    model.config = config;
    model.meta.seed = seed;
    model.params.assign(static_cast<std::size_t>(plan.total()), S(0));

    Rng rng(Rng::derive(seed, 0x1417));
    auto init_stack = [&](const StackPlan& sp, S* params, bool is_head) {
        for (std::size_t li = 0; li < sp.descs.size(); ++li) {
            const LayerDesc& d = sp.descs[li];
            if (d.param_count() == 0) {
                continue;
            }
            std::int64_t fan_in =
                d.kind == LayerKind::conv3 ? std::int64_t(d.in_channels) * 27 : d.in_features;
            std::int64_t bias_count =
                d.kind == LayerKind::conv3 ? d.out_channels : d.out_features;
            std::int64_t weights = d.param_count() - bias_count;
            double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
            if (is_head && li + 1 == sp.descs.size()) {
                // keep initial feature distances on the order of the unit
                // triplet margin, so the hinge starts in its active regime
                limit *= 0.25;
            }
            S* w = params + sp.param_offset[li];
            for (std::int64_t i = 0; i < weights; ++i) {
                w[i] = static_cast<S>(rng.uniform(-limit, limit));
            }
            // biases stay zero
        }
    };
    for (int slot = 0; slot < plan.active_sse; ++slot) {
        init_stack(plan.sse, model.params.data() + std::int64_t(slot) * plan.sse_params, false);
    }
    init_stack(plan.mse, model.params.data() + plan.sse_params * plan.active_sse, true);
    return model;
}

template <typename S>
Eigen::Vector<S, Eigen::Dynamic> forward(const DescriptorModel<S>& model, const Patch& fine,
                                         const Patch& coarse) {
    ModelPlan plan = plan_model(model.config);
    if (model.params.size() != static_cast<std::size_t>(plan.total())) {
        throw std::invalid_argument("model parameter buffer does not match its layer spec");
    }
    Workspace<S> ws;
    return model_forward<S>(plan, model.config, model.params.data(), fine, coarse, nullptr, ws);
}

template <typename S>
S triplet_loss(const Eigen::Vector<S, Eigen::Dynamic>& f_a,
               const Eigen::Vector<S, Eigen::Dynamic>& f_p,
               const Eigen::Vector<S, Eigen::Dynamic>& f_n, S margin) {
    if (f_a.size() != f_p.size() || f_a.size() != f_n.size()) {
        throw std::invalid_argument("triplet features must share one dimension");
    }
    S hinge = (f_a - f_p).squaredNorm() - (f_a - f_n).squaredNorm() + margin;
    return std::max(S(0), hinge);
}

template <typename S>
BatchGradient<S> backward(const DescriptorModel<S>& model, std::span<const TrainingTriplet> batch,
                          const TripletLossConfig& config) {
    ModelPlan plan = plan_model(model.config);
    std::vector<const TrainingTriplet*> ptrs(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        ptrs[i] = &batch[i];
    }
    return backward_batch<S>(model, plan, ptrs, config);
}

template <typename S>
TrainResult train(DescriptorModel<S>& model, std::span<const TrainingTriplet> triplets,
                  const TripletLossConfig& config) {
    TrainResult result;
    if (triplets.empty()) {
        return result;
    }
    if (config.learning_rate < 0.0 || config.margin <= 0.0 || config.batch_size <= 0 ||
        config.epochs < 0) {
        throw std::invalid_argument("invalid training configuration");
    }
    if (config.freeze == TripletLossConfig::Freeze::sse_frozen && model.meta.epoch == 0) {
        throw std::invalid_argument("sse_frozen requires a statically pre-trained model");
    }

    ModelPlan plan = plan_model(model.config);
    const bool update = config.learning_rate > 0.0;
    const std::size_t update_begin =
        config.freeze == TripletLossConfig::Freeze::sse_frozen
            ? static_cast<std::size_t>(plan.sse_params * plan.active_sse)
            : 0;

    AlignedVec<S> adam_m(update ? model.params.size() : 0, S(0));
    AlignedVec<S> adam_v(update ? model.params.size() : 0, S(0));
    double beta1_t = 1.0, beta2_t = 1.0;

    std::vector<const TrainingTriplet*> order(triplets.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = &triplets[i];
    }

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng(Rng::derive(config.seed, 0xe70c0 + std::uint64_t(epoch)));
        rng.shuffle(order);

        double epoch_total = 0.0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            std::span<const TrainingTriplet* const> batch(order.data() + start, stop - start);
            BatchGradient<S> bg = backward_batch<S>(model, plan, batch, config);
            epoch_total += bg.mean_loss * static_cast<double>(batch.size());

            if (update) {
                beta1_t *= config.adam_beta1;
                beta2_t *= config.adam_beta2;
                const S lr = static_cast<S>(config.learning_rate);
                const S b1 = static_cast<S>(config.adam_beta1);
                const S b2 = static_cast<S>(config.adam_beta2);
                const S eps = static_cast<S>(config.adam_epsilon);
                const S c1 = static_cast<S>(1.0 / (1.0 - beta1_t));
                const S c2 = static_cast<S>(1.0 / (1.0 - beta2_t));
                for (std::size_t i = update_begin; i < model.params.size(); ++i) {
                    S g = bg.grads[i];
                    adam_m[i] = b1 * adam_m[i] + (S(1) - b1) * g;
                    adam_v[i] = b2 * adam_v[i] + (S(1) - b2) * g * g;
                    model.params[i] -= lr * (adam_m[i] * c1) / (std::sqrt(adam_v[i] * c2) + eps);
                }
            }
        }
        result.epoch_loss.push_back(epoch_total / static_cast<double>(order.size()));
    }

    if (update && config.epochs > 0) {
        model.meta.epoch += config.epochs;
        model.meta.stage = config.stage;
    }
    return result;
}

FeatureMatrix describe_keypoints(const DescriptorModel<float>& model, const TsdfVolume& volume,
                                 std::span<const Keypoint> keypoints, const PatchPairSpec& spec,
                                 int threads) {
    spec.validate();
    ModelPlan plan = plan_model(model.config);
    FeatureMatrix features(keypoints.size(), plan.mse.output_dim());
    parallel_chunks(keypoints.size(), threads, [&](std::size_t begin, std::size_t end) {
        Workspace<float> ws;
        for (std::size_t i = begin; i < end; ++i) {
            PatchPair pair = extract_two_scale(volume, keypoints[i].position, spec);
            VecXT<float> f = model_forward<float>(plan, model.config, model.params.data(), pair.fine,
                                                  pair.coarse, nullptr, ws);
            features.row(i) = f.transpose();
        }
    });
    return features;
}

// ---- model serialization -------------------------------------------------------------

namespace {

json layer_to_json(const LayerDesc& d) {
    switch (d.kind) {
        case LayerKind::conv3:
            return json{{"kind", "conv3"}, {"in", d.in_channels}, {"out", d.out_channels}};
        case LayerKind::relu:
            return json{{"kind", "relu"}};
        case LayerKind::maxpool2:
            return json{{"kind", "maxpool2"}};
        case LayerKind::flatten:
            return json{{"kind", "flatten"}};
        case LayerKind::dense:
            return json{{"kind", "dense"}, {"in", d.in_features}, {"out", d.out_features}};
    }
    return {};
}

LayerDesc layer_from_json(const json& j) {
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "conv3") return LayerDesc::conv3(j.at("in").get<int>(), j.at("out").get<int>());
    if (kind == "relu") return LayerDesc::relu();
    if (kind == "maxpool2") return LayerDesc::maxpool2();
    if (kind == "flatten") return LayerDesc::flatten();
    if (kind == "dense") return LayerDesc::dense(j.at("in").get<int>(), j.at("out").get<int>());
    throw std::runtime_error("unknown layer kind: " + kind);
}

std::string arch_name(NetworkConfig::Arch arch) {
    switch (arch) {
        case NetworkConfig::Arch::multiscale: return "multiscale";
        case NetworkConfig::Arch::singlescale_fine: return "singlescale_fine";
        case NetworkConfig::Arch::singlescale_coarse: return "singlescale_coarse";
    }
    return "multiscale";
}

NetworkConfig::Arch arch_from_name(const std::string& name) {
    if (name == "multiscale") return NetworkConfig::Arch::multiscale;
    if (name == "singlescale_fine") return NetworkConfig::Arch::singlescale_fine;
    if (name == "singlescale_coarse") return NetworkConfig::Arch::singlescale_coarse;
    throw std::runtime_error("unknown arch: " + name);
}

}  // namespace

void save_model(const DescriptorModel<float>& model, const std::filesystem::path& path) {
    json sse = json::array(), mse = json::array();
    for (const auto& d : model.config.sse) {
        sse.push_back(layer_to_json(d));
    }
    for (const auto& d : model.config.mse) {
        mse.push_back(layer_to_json(d));
    }
    json header{{"arch", arch_name(model.config.arch)},
                {"input_resolution", model.config.input_resolution},
                {"sse", sse},
                {"mse", mse},
                {"stage", model.meta.stage},
                {"seed", model.meta.seed},
                {"epoch", model.meta.epoch}};
    std::string header_str = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot open for writing: " + path.string());
    }
    os.write("RIOM", 4);
    binio::write_u32(os, 1);
    binio::write_u32(os, static_cast<std::uint32_t>(header_str.size()));
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    binio::write_f32_array(os, model.params.data(), model.params.size());
    if (!os) {
        throw std::runtime_error("write failed: " + path.string());
    }
}

DescriptorModel<float> load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open: " + path.string());
    }
    binio::expect_magic(is, "RIOM");
    std::uint32_t version = binio::read_u32(is);
    if (version != 1) {
        throw std::runtime_error("unsupported RIOM version " + std::to_string(version));
    }
    std::uint32_t header_len = binio::read_u32(is);
    std::string header_str(header_len, '\0');
    is.read(header_str.data(), header_len);
    if (!is) {
        throw std::runtime_error("truncated model header in " + path.string());
    }
    json header = json::parse(header_str);

    DescriptorModel<float> model;
    model.config.arch = arch_from_name(header.at("arch").get<std::string>());
    model.config.input_resolution = header.at("input_resolution").get<int>();
    for (const auto& j : header.at("sse")) {
        model.config.sse.push_back(layer_from_json(j));
    }
    for (const auto& j : header.at("mse")) {
        model.config.mse.push_back(layer_from_json(j));
    }
    model.meta.stage = header.at("stage").get<std::string>();
    model.meta.seed = header.at("seed").get<std::uint64_t>();
    model.meta.epoch = header.at("epoch").get<int>();

    ModelPlan plan = plan_model(model.config);
    model.params.resize(static_cast<std::size_t>(plan.total()));
    binio::read_f32_array(is, model.params.data(), model.params.size());
    return model;
}

// ---- explicit instantiations ----------------------------------------------------------

template DescriptorModel<float> init_descriptor_model<float>(const NetworkConfig&, std::uint64_t);
template DescriptorModel<double> init_descriptor_model<double>(const NetworkConfig&, std::uint64_t);
template Eigen::Vector<float, Eigen::Dynamic> forward<float>(const DescriptorModel<float>&,
                                                             const Patch&, const Patch&);
template Eigen::Vector<double, Eigen::Dynamic> forward<double>(const DescriptorModel<double>&,
                                                               const Patch&, const Patch&);
template float triplet_loss<float>(const Eigen::Vector<float, Eigen::Dynamic>&,
                                   const Eigen::Vector<float, Eigen::Dynamic>&,
                                   const Eigen::Vector<float, Eigen::Dynamic>&, float);
template double triplet_loss<double>(const Eigen::Vector<double, Eigen::Dynamic>&,
                                     const Eigen::Vector<double, Eigen::Dynamic>&,
                                     const Eigen::Vector<double, Eigen::Dynamic>&, double);
template BatchGradient<float> backward<float>(const DescriptorModel<float>&,
                                              std::span<const TrainingTriplet>,
                                              const TripletLossConfig&);
template BatchGradient<double> backward<double>(const DescriptorModel<double>&,
                                                std::span<const TrainingTriplet>,
                                                const TripletLossConfig&);
template TrainResult train<float>(DescriptorModel<float>&, std::span<const TrainingTriplet>,
                                  const TripletLossConfig&);
template TrainResult train<double>(DescriptorModel<double>&, std::span<const TrainingTriplet>,
                                   const TripletLossConfig&);

}  // namespace rio
