#pragma once

#include "rio/core.hpp"
#include "rio/keypoints.hpp"
#include "rio/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rio {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace nn {

enum class LayerKind { conv3, relu, maxpool2, flatten, dense };

struct LayerDesc {
    LayerKind kind = LayerKind::relu;
    int in_channels = 0;   // conv3
    int out_channels = 0;  // conv3
    int in_features = 0;   // dense
    int out_features = 0;  // dense

    static LayerDesc conv3(int in_ch, int out_ch) { return {LayerKind::conv3, in_ch, out_ch, 0, 0}; }
    static LayerDesc relu() { return {LayerKind::relu, 0, 0, 0, 0}; }
    static LayerDesc maxpool2() { return {LayerKind::maxpool2, 0, 0, 0, 0}; }
    static LayerDesc flatten() { return {LayerKind::flatten, 0, 0, 0, 0}; }
    static LayerDesc dense(int in_f, int out_f) { return {LayerKind::dense, 0, 0, in_f, out_f}; }

    std::int64_t param_count() const;
    bool operator==(const LayerDesc&) const = default;
};

}  // namespace nn

// Layer stack of the two-scale encoder. Each active scale gets its own copy
// of the SSE parameters (the branches do not share weights); the MSE runs on
// the concatenated SSE outputs.
struct NetworkConfig {
    enum class Arch { multiscale, singlescale_fine, singlescale_coarse };

    Arch arch = Arch::multiscale;
    int input_resolution = 32;
    std::vector<nn::LayerDesc> sse;
    std::vector<nn::LayerDesc> mse;

    // The 32³ -> 512 stack: two non-padded conv blocks around each of the two
    // pooling layers, a 256-wide bottleneck per scale, 512-d output. Other
    // input resolutions reuse the stack when the shape chain stays valid.
    static NetworkConfig standard(Arch arch = Arch::multiscale, int input_resolution = 32);

    int active_sse_count() const { return arch == Arch::multiscale ? 2 : 1; }
    bool uses_fine() const { return arch != Arch::singlescale_coarse; }
    bool uses_coarse() const { return arch != Arch::singlescale_fine; }
    std::int64_t sse_param_count() const;
    std::int64_t mse_param_count() const;
    std::int64_t param_count() const;
    int sse_output_dim() const;
    int feature_dim() const;
    void validate() const;  // shape-checks the stacks, throws std::invalid_argument
    bool operator==(const NetworkConfig&) const = default;
};

// Parameters live in one flat buffer, declaration order
// [sse(fine) | sse(coarse) | mse] with inactive scales absent.
template <typename S>
struct DescriptorModel {
    NetworkConfig config;
    AlignedVec<S> params;
    struct Meta {
        std::string stage = "static";
        std::uint64_t seed = 0;
        int epoch = 0;
    } meta;

    std::span<const S> sse_params() const {
        return {params.data(), static_cast<std::size_t>(config.sse_param_count() * config.active_sse_count())};
    }
    std::span<const S> mse_params() const {
        auto oframe = config.sse_param_count() * config.active_sse_count();
        return {params.data() + oframe, static_cast<std::size_t>(config.mse_param_count())};
    }
};

template <typename S>
DescriptorModel<S> init_descriptor_model(const NetworkConfig& config, std::uint64_t seed);

// Encodes one inverted two-scale patch pair into a feature vector.
template <typename S>
Eigen::Vector<S, Eigen::Dynamic> forward(const DescriptorModel<S>& model, const Patch& fine,
                                         const Patch& coarse);

// max(0, ||f_a − f_p||² − ||f_a − f_n||² + margin)
template <typename S>
S triplet_loss(const Eigen::Vector<S, Eigen::Dynamic>& f_a,
               const Eigen::Vector<S, Eigen::Dynamic>& f_p,
               const Eigen::Vector<S, Eigen::Dynamic>& f_n, S margin);

struct TripletLossConfig {
    double margin = 1.0;
    double learning_rate = 0.001;
    int batch_size = 32;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int epochs = 1;
    std::uint64_t seed = 0;
    enum class Freeze { none, sse_frozen } freeze = Freeze::none;
    int threads = 1;
    std::string stage = "static";  // recorded in the trained model's metadata
};

template <typename S>
struct BatchGradient {
    AlignedVec<S> grads;  // same layout as DescriptorModel::params
    double mean_loss = 0.0;
};

// Exact gradient of the mean batch triplet loss w.r.t. every parameter.
template <typename S>
BatchGradient<S> backward(const DescriptorModel<S>& model, std::span<const TrainingTriplet> batch,
                          const TripletLossConfig& config);

struct TrainResult {
    std::vector<double> epoch_loss;
};

// Adam. With Freeze::sse_frozen the SSE parameters are left bitwise
// untouched (and their gradients are skipped). learning_rate 0 is an exact
// no-op on the model, metadata included.
template <typename S>
TrainResult train(DescriptorModel<S>& model, std::span<const TrainingTriplet> triplets,
                  const TripletLossConfig& config);

// One feature row per keypoint, row i = forward(extract_two_scale(position i)).
FeatureMatrix describe_keypoints(const DescriptorModel<float>& model, const TsdfVolume& volume,
                                 std::span<const Keypoint> keypoints, const PatchPairSpec& spec,
                                 int threads = 1);

// "RIOM" model file: magic, version, length-prefixed JSON header, f32
// parameters in declaration order. Round-trips bit-exactly.
void save_model(const DescriptorModel<float>& model, const std::filesystem::path& path);
DescriptorModel<float> load_model(const std::filesystem::path& path);

}  // namespace rio
