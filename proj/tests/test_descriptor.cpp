#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rio/descriptor.hpp"
#include "gradient_check.hpp"
#include "testutil.hpp"

#include <cmath>
#include <numeric>

using namespace rio;
using riotest::random_patch;
using riotest::random_triplet;
using riotest::TempDir;
using riotest::tiny_config;

TEST_CASE("standard config: shapes and parameter layout") {
    NetworkConfig cfg = NetworkConfig::standard();
    CHECK_NOTHROW(cfg.validate());  // checks the 32->30->28->14->12->10->5 chain
    CHECK(cfg.input_resolution == 32);
    CHECK(cfg.sse_output_dim() == 256);
    CHECK(cfg.feature_dim() == 512);

    // conv(1,8)+conv(8,16)+conv(16,32)+conv(32,64)+fc(8000,256), two branches
    // without weight sharing plus the shared MSE evaluated per stream
    std::int64_t sse = (8 * 27 + 8) + (16 * 8 * 27 + 16) + (32 * 16 * 27 + 32) +
                       (64 * 32 * 27 + 64) + (8000 * 256 + 256);
    std::int64_t mse = (512 * 512 + 512) + (512 * 512 + 512);
    CHECK(cfg.sse_param_count() == sse);
    CHECK(cfg.mse_param_count() == mse);
    CHECK(cfg.param_count() == 2 * sse + mse);

    // single parameter storage: one set of weights serves all three triplet
    // streams, so the model allocates exactly param_count entries
    auto model = init_descriptor_model<float>(cfg, 1);
    CHECK(model.params.size() == std::size_t(cfg.param_count()));
    CHECK(model.sse_params().size() + model.mse_params().size() == model.params.size());

    NetworkConfig single = NetworkConfig::standard(NetworkConfig::Arch::singlescale_coarse);
    CHECK(single.param_count() == sse + (256 * 512 + 512) + (512 * 512 + 512));
    CHECK(single.feature_dim() == 512);

    NetworkConfig bad = cfg;
    bad.sse.push_back(nn::LayerDesc::dense(10, 10));
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("training defaults match the published margin and learning rate") {
    TripletLossConfig cfg;
    CHECK(cfg.margin == 1.0);
    CHECK(cfg.learning_rate == 0.001);
    CHECK(cfg.adam_beta1 == 0.9);
    CHECK(cfg.adam_beta2 == 0.999);
}

TEST_CASE("forward: zero parameters give the zero vector") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 3);
    std::fill(model.params.begin(), model.params.end(), 0.0f);
    Rng rng(4);
    Patch fine = random_patch(rng, 8), coarse = random_patch(rng, 8);
    auto f = forward<float>(model, fine, coarse);
    REQUIRE(f.size() == 8);
    for (Eigen::Index i = 0; i < f.size(); ++i) {
        CHECK(f[i] == 0.0f);
    }
}

TEST_CASE("forward: bitwise deterministic and shape-checked") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 5);
    Rng rng(6);
    Patch fine = random_patch(rng, 8), coarse = random_patch(rng, 8);
    auto a = forward<float>(model, fine, coarse);
    auto b = forward<float>(model, fine, coarse);
    CHECK(a == b);

    Patch wrong = random_patch(rng, 6);
    CHECK_THROWS_AS(forward<float>(model, wrong, coarse), std::invalid_argument);
}

TEST_CASE("forward: single conv layer matches a direct convolution oracle") {
    // 4^3 input, one non-padded conv to 2^3, identity dense head
    NetworkConfig cfg;
    cfg.arch = NetworkConfig::Arch::singlescale_fine;
    cfg.input_resolution = 4;
    cfg.sse = {nn::LayerDesc::conv3(1, 1), nn::LayerDesc::flatten()};
    cfg.mse = {nn::LayerDesc::dense(8, 8)};
    auto model = init_descriptor_model<double>(cfg, 7);

    // identity MSE: W = I, b = 0 (column-major in x out layout)
    std::int64_t mse_off = cfg.sse_param_count();
    for (int i = 0; i < 8; ++i) {
        for (int o = 0; o < 8; ++o) {
            model.params[mse_off + i + 8 * o] = i == o ? 1.0 : 0.0;
        }
    }
    for (int o = 0; o < 8; ++o) {
        model.params[mse_off + 64 + o] = 0.0;
    }

    Rng rng(8);
    Patch in = random_patch(rng, 4);
    Patch unused = random_patch(rng, 4);
    auto f = forward<double>(model, in, unused);

    auto value = [&](int x, int y, int z) { return double(in.values[(std::size_t(z) * 4 + y) * 4 + x]); };
    const double* w = model.params.data();  // [27 taps][1 out channel], dz,dy,dx order
    double bias = model.params[27];
    for (int z = 0; z < 2; ++z) {
        for (int y = 0; y < 2; ++y) {
            for (int x = 0; x < 2; ++x) {
                double acc = bias;
                for (int dz = 0; dz < 3; ++dz) {
                    for (int dy = 0; dy < 3; ++dy) {
                        for (int dx = 0; dx < 3; ++dx) {
                            acc += w[(dz * 3 + dy) * 3 + dx] * value(x + dx, y + dy, z + dz);
                        }
                    }
                }
                CHECK(f[(z * 2 + y) * 2 + x] == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("triplet_loss: hinge arithmetic") {
    Eigen::VectorXd fa = Eigen::VectorXd::Zero(4);
    Eigen::VectorXd fp = Eigen::VectorXd::Zero(4);
    Eigen::VectorXd fn = Eigen::VectorXd::Zero(4);
    CHECK(triplet_loss<double>(fa, fp, fn, 1.0) == 1.0);  // equal features -> margin

    fp[0] = std::sqrt(0.5);
    fn[0] = -std::sqrt(2.0);
    CHECK(triplet_loss<double>(fa, fp, fn, 1.0) == doctest::Approx(0.0));  // 0.5 - 2 + 1 <= 0

    fp[0] = std::sqrt(2.0);
    fn[0] = -std::sqrt(0.5);
    CHECK(triplet_loss<double>(fa, fp, fn, 1.0) == doctest::Approx(2.5));  // 2 - 0.5 + 1

    Eigen::VectorXd short_vec = Eigen::VectorXd::Zero(3);
    CHECK_THROWS_AS(triplet_loss<double>(fa, fp, short_vec, 1.0), std::invalid_argument);
}

TEST_CASE("triplet_loss: non-negative, zero exactly when the hinge closes") {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        Eigen::VectorXd fa(6), fp(6), fn(6);
        for (int i = 0; i < 6; ++i) {
            fa[i] = rng.uniform(-1, 1);
            fp[i] = rng.uniform(-1, 1);
            fn[i] = rng.uniform(-1, 1);
        }
        double margin = rng.uniform(0.1, 2.0);
        double loss = triplet_loss<double>(fa, fp, fn, margin);
        CHECK(loss >= 0.0);
        bool closed = (fa - fn).squaredNorm() >= (fa - fp).squaredNorm() + margin;
        CHECK((loss == 0.0) == closed);
    }
}

TEST_CASE("backward: hinge-inactive batch has exactly zero gradients") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<double>(cfg, 11);
    Rng rng(12);
    TrainingTriplet t = random_triplet(rng, 8);
    t.positive = t.anchor;  // d_p = 0, so any d_n >= margin closes the hinge

    TripletLossConfig lc;
    lc.margin = 1e-9;
    std::vector<TrainingTriplet> batch = {t};
    auto bg = backward<double>(model, batch, lc);
    CHECK(bg.mean_loss == 0.0);
    for (double g : bg.grads) {
        CHECK(g == 0.0);
    }
}

TEST_CASE("backward: analytic gradients match central finite differences") {
    auto report = riotest::finite_difference_check(tiny_config(), 42, 1e-3, 1e-4);
    CHECK(report.hinge_active);
    CHECK(report.checked == int(tiny_config().param_count()));
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("backward: singlescale gradients match finite differences too") {
    auto report = riotest::finite_difference_check(
        tiny_config(NetworkConfig::Arch::singlescale_coarse), 43, 1e-3, 1e-4);
    CHECK(report.hinge_active);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("backward: duplicating a triplet leaves the mean gradient unchanged") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<double>(cfg, 13);
    Rng rng(14);
    TrainingTriplet t = random_triplet(rng, 8);
    TripletLossConfig lc;
    lc.margin = 10.0;

    std::vector<TrainingTriplet> one = {t};
    std::vector<TrainingTriplet> two = {t, t};
    auto g1 = backward<double>(model, one, lc);
    auto g2 = backward<double>(model, two, lc);
    CHECK(g1.mean_loss == doctest::Approx(g2.mean_loss).epsilon(1e-12));
    for (std::size_t i = 0; i < g1.grads.size(); ++i) {
        CHECK(g1.grads[i] == doctest::Approx(g2.grads[i]).epsilon(1e-9));
    }
}

TEST_CASE("backward: threaded batch reduction is bit-identical to serial") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 15);
    Rng rng(16);
    std::vector<TrainingTriplet> batch;
    for (int i = 0; i < 7; ++i) {
        batch.push_back(random_triplet(rng, 8));
    }
    TripletLossConfig serial;
    serial.margin = 10.0;
    serial.threads = 1;
    TripletLossConfig threaded = serial;
    threaded.threads = 2;
    auto a = backward<float>(model, batch, serial);
    auto b = backward<float>(model, batch, threaded);
    CHECK(a.mean_loss == b.mean_loss);
    CHECK(a.grads == b.grads);
}

namespace {

// anchors/positives share a pattern, negatives come from a different one
std::vector<TrainingTriplet> learnable_triplets(int count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TrainingTriplet> out;
    for (int i = 0; i < count; ++i) {
        Vec3 dir_a = rng.unit_vector(), dir_b = rng.unit_vector();
        auto pattern = [&](const Vec3& dir, double noise) {
            Patch p;
            p.resolution = 8;
            p.values.resize(512);
            for (int z = 0; z < 8; ++z) {
                for (int y = 0; y < 8; ++y) {
                    for (int x = 0; x < 8; ++x) {
                        double s = dir.dot(Vec3(x, y, z) / 8.0);
                        p.values[(std::size_t(z) * 8 + y) * 8 + x] = static_cast<float>(
                            std::clamp(0.5 + 0.5 * std::sin(6.0 * s) + rng.uniform(-noise, noise),
                                       0.0, 1.0));
                    }
                }
            }
            return p;
        };
        TrainingTriplet t;
        t.anchor = {pattern(dir_a, 0.02), pattern(dir_a, 0.02)};
        t.positive = {pattern(dir_a, 0.02), pattern(dir_a, 0.02)};
        t.negative = {pattern(dir_b, 0.02), pattern(dir_b, 0.02)};
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace

TEST_CASE("train: learning rate zero is an exact no-op on the model") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 17);
    auto before = model;
    auto triplets = learnable_triplets(8, 18);
    TripletLossConfig lc;
    lc.learning_rate = 0.0;
    lc.epochs = 3;
    lc.batch_size = 4;
    TrainResult r = train<float>(model, triplets, lc);
    CHECK(r.epoch_loss.size() == 3);
    CHECK(model.params == before.params);
    CHECK(model.meta.epoch == before.meta.epoch);
    CHECK(model.meta.stage == before.meta.stage);
}

TEST_CASE("train: empty stream leaves the model untouched with an empty curve") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 19);
    auto before = model;
    TrainResult r = train<float>(model, {}, {});
    CHECK(r.epoch_loss.empty());
    CHECK(model.params == before.params);
}

TEST_CASE("train: frozen SSE parameters stay bitwise identical") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 20);
    auto triplets = learnable_triplets(16, 21);

    TripletLossConfig pre;
    pre.epochs = 2;
    pre.batch_size = 8;
    pre.stage = "static";
    train<float>(model, triplets, pre);
    CHECK(model.meta.epoch == 2);
    CHECK(model.meta.stage == "static");

    std::vector<float> sse_before(model.sse_params().begin(), model.sse_params().end());
    std::vector<float> mse_before(model.mse_params().begin(), model.mse_params().end());

    TripletLossConfig fine;
    fine.epochs = 3;
    fine.batch_size = 8;
    fine.freeze = TripletLossConfig::Freeze::sse_frozen;
    fine.stage = "dynamic";
    train<float>(model, triplets, fine);

    std::vector<float> sse_after(model.sse_params().begin(), model.sse_params().end());
    std::vector<float> mse_after(model.mse_params().begin(), model.mse_params().end());
    CHECK(sse_before == sse_after);
    CHECK(mse_before != mse_after);
    CHECK(model.meta.stage == "dynamic");
    CHECK(model.meta.epoch == 5);
}

TEST_CASE("train: sse_frozen requires a pre-trained model") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 22);
    auto triplets = learnable_triplets(4, 23);
    TripletLossConfig lc;
    lc.freeze = TripletLossConfig::Freeze::sse_frozen;
    CHECK_THROWS_AS(train<float>(model, triplets, lc), std::invalid_argument);
}

TEST_CASE("train: loss decreases on learnable synthetic triplets") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 24);
    auto triplets = learnable_triplets(200, 25);
    TripletLossConfig lc;
    lc.epochs = 50;
    lc.batch_size = 16;
    lc.threads = 2;
    lc.seed = 3;
    TrainResult r = train<float>(model, triplets, lc);
    REQUIRE(r.epoch_loss.size() == 50);
    CHECK(r.epoch_loss.back() < r.epoch_loss.front());
}

TEST_CASE("train: identical seeds give identical models") {
    NetworkConfig cfg = tiny_config();
    auto triplets = learnable_triplets(12, 26);
    TripletLossConfig lc;
    lc.epochs = 2;
    lc.batch_size = 4;
    lc.seed = 77;

    auto m1 = init_descriptor_model<float>(cfg, 27);
    auto m2 = init_descriptor_model<float>(cfg, 27);
    lc.threads = 1;
    train<float>(m1, triplets, lc);
    lc.threads = 2;
    train<float>(m2, triplets, lc);
    CHECK(m1.params == m2.params);
}

TEST_CASE("describe_keypoints: batching matches one-at-a-time forwards") {
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 28);

    SyntheticScene scene = riotest::single_object_scene(riotest::make_sphere(1, Vec3::Zero(), 0.3));
    TsdfVolume v = analytic_tsdf(scene, {40, 40, 40}, 0.02, Vec3::Constant(-0.39), 0.1);

    PatchPairSpec spec;
    spec.resolution = 8;
    std::vector<Keypoint> kps = {{Vec3(0.3, 0.0, 0.0), 1.0},
                                 {Vec3(0.0, 0.3, 0.0), 0.5},
                                 {Vec3(0.3, 0.0, 0.0), 1.0},  // duplicate of the first
                                 {Vec3(0.0, 0.0, -0.3), 0.25}};

    CHECK(describe_keypoints(model, v, {}, spec).rows() == 0);

    FeatureMatrix f = describe_keypoints(model, v, kps, spec, 2);
    REQUIRE(f.rows() == 4);
    REQUIRE(f.cols() == 8);
    CHECK(f.row(0) == f.row(2));

    for (std::size_t i = 0; i < kps.size(); ++i) {
        PatchPair pair = extract_two_scale(v, kps[i].position, spec);
        auto single = forward<float>(model, pair.fine, pair.coarse);
        for (int c = 0; c < 8; ++c) {
            CHECK(f(i, c) == single[c]);
        }
    }

    FeatureMatrix serial = describe_keypoints(model, v, kps, spec, 1);
    CHECK(serial == f);
}

TEST_CASE("RIOM model file round-trips bit-exactly") {
    TempDir tmp("riom");
    NetworkConfig cfg = tiny_config();
    auto model = init_descriptor_model<float>(cfg, 29);
    model.meta.stage = "dynamic";
    model.meta.epoch = 7;

    auto path = tmp.path() / "model.riom";
    save_model(model, path);
    auto loaded = load_model(path);
    CHECK(loaded.params == model.params);
    CHECK(loaded.config == model.config);
    CHECK(loaded.meta.stage == "dynamic");
    CHECK(loaded.meta.epoch == 7);
    CHECK(loaded.meta.seed == 29);

    auto path2 = tmp.path() / "model2.riom";
    save_model(loaded, path2);
    CHECK(riotest::slurp(path) == riotest::slurp(path2));
}
