#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rio/datasynth.hpp"
#include "rio/volume.hpp"
#include "testutil.hpp"

#include <cmath>

using namespace rio;
using riotest::TempDir;

namespace {

// One frame of constant depth seen by a camera at `pose`.
DepthFrame constant_depth_frame(double depth, const RigidPose& pose = {}) {
    DepthFrame f;
    f.width = 64;
    f.height = 64;
    f.fx = f.fy = 64.0;
    f.cx = f.cy = 31.5;
    f.camera_pose = pose;
    f.depth.assign(std::size_t(f.width) * f.height, static_cast<float>(depth));
    return f;
}

}  // namespace

TEST_CASE("fuse_depth: surface voxel of a frontal plane lands at zero") {
    // plane of depth 1 m; voxel (2,2,2) sits exactly at (0,0,1)
    auto frame = constant_depth_frame(1.0);
    TsdfVolume v = fuse_depth(std::span(&frame, 1), {5, 5, 9}, 0.02, Vec3(-0.04, -0.04, 0.96), 0.05);
    CHECK(v.values[v.index(2, 2, 2)] == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(v.weights[v.index(2, 2, 2)] > 0.0f);
}

TEST_CASE("fuse_depth: voxel two truncations behind the surface stays unobserved") {
    auto frame = constant_depth_frame(1.0);
    // z range 0.96 .. 1.12; voxel (2,2,7) at z = 1.10 = 1.0 + 2*0.05
    TsdfVolume v = fuse_depth(std::span(&frame, 1), {5, 5, 9}, 0.02, Vec3(-0.04, -0.04, 0.96), 0.05);
    CHECK(v.values[v.index(2, 2, 7)] == 1.0f);
    CHECK(v.weights[v.index(2, 2, 7)] == 0.0f);
    // 4 cm in front of the surface sits inside the band: 0.04 / 0.05
    CHECK(v.values[v.index(2, 2, 0)] == doctest::Approx(0.8).epsilon(1e-6));
    CHECK(v.weights[v.index(2, 2, 0)] > 0.0f);
}

TEST_CASE("fuse_depth: argument validation") {
    auto frame = constant_depth_frame(1.0);
    CHECK_THROWS_AS(fuse_depth({}, {4, 4, 4}, 0.02, Vec3::Zero(), 0.05), std::invalid_argument);
    CHECK_THROWS_AS(fuse_depth(std::span(&frame, 1), {4, 4, 4}, 0.0, Vec3::Zero(), 0.05),
                    std::invalid_argument);
    CHECK_THROWS_AS(fuse_depth(std::span(&frame, 1), {4, 4, 4}, 0.02, Vec3::Zero(), 0.03),
                    std::invalid_argument);
}

TEST_CASE("fuse_depth: fused sphere agrees with the analytic TSDF oracle") {
    SyntheticScene scene = riotest::single_object_scene(riotest::make_sphere(1, Vec3::Zero(), 0.5));
    CameraIntrinsics intr;
    std::vector<DepthFrame> frames;
    Rng rng(7);
    for (int i = 0; i < 8; ++i) {
        double a = 2.0 * M_PI * i / 8.0;
        Vec3 pos(2.0 * std::cos(a), 2.0 * std::sin(a), (i % 2 == 0 ? 0.6 : -0.6));
        Vec3 fwd = (-pos).normalized();
        Vec3 right = fwd.cross(Vec3::UnitZ()).normalized();
        RigidPose cam;
        cam.rotation.col(0) = right;
        cam.rotation.col(1) = fwd.cross(right);
        cam.rotation.col(2) = fwd;
        cam.translation = pos;
        frames.push_back(render_depth(scene, intr, cam));
    }

    GridDims dims{70, 70, 70};
    Vec3 origin(-0.69, -0.69, -0.69);
    double voxel = 0.02, trunc = 0.1;
    TsdfVolume fused = fuse_depth(frames, dims, voxel, origin, trunc, 2);
    TsdfVolume exact = analytic_tsdf(scene, dims, voxel, origin, trunc, 2);

    double err = 0.0;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < fused.values.size(); ++i) {
        if (fused.weights[i] > 0.0f) {
            err += std::abs(double(fused.values[i]) - double(exact.values[i]));
            ++n;
        }
    }
    REQUIRE(n > 10000);
    CHECK(err / n < voxel / trunc);
}

TEST_CASE("fuse_depth: frame order does not change the average") {
    SyntheticScene scene = riotest::single_object_scene(riotest::make_sphere(1, Vec3::Zero(), 0.4));
    CameraIntrinsics intr;
    std::vector<DepthFrame> frames = render_orbit(scene, intr, 3);
    GridDims dims{40, 40, 40};
    TsdfVolume a = fuse_depth(frames, dims, 0.02, Vec3(-0.39, -0.39, -0.39), 0.06);
    std::swap(frames[0], frames[2]);
    std::swap(frames[0], frames[1]);
    TsdfVolume b = fuse_depth(frames, dims, 0.02, Vec3(-0.39, -0.39, -0.39), 0.06);
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        CHECK(a.values[i] == doctest::Approx(b.values[i]).epsilon(1e-6));
        CHECK(a.weights[i] == b.weights[i]);
    }
}

TEST_CASE("analytic_tsdf: box interior clamps to -1 and the face reads 0") {
    SyntheticScene scene =
        riotest::single_object_scene(riotest::make_box(1, Vec3::Zero(), Vec3(0.5, 0.5, 0.5)));
    // voxel (2,2,2) at origin (deep inside), voxel (4,2,2) exactly on the +x face
    TsdfVolume v = analytic_tsdf(scene, {5, 5, 5}, 0.25, Vec3(-0.5, -0.5, -0.5), 0.1);
    CHECK(v.values[v.index(2, 2, 2)] == -1.0f);
    CHECK(v.values[v.index(4, 2, 2)] == 0.0f);
}

TEST_CASE("analytic_tsdf: two overlapping spheres equal the pointwise min oracle") {
    SyntheticScene scene;
    scene.room = riotest::far_room();
    scene.objects.push_back(riotest::make_sphere(1, Vec3(-0.2, 0.0, 0.0), 0.3));
    scene.objects.push_back(riotest::make_sphere(2, Vec3(0.2, 0.05, 0.0), 0.3));

    GridDims dims{30, 30, 30};
    Vec3 origin(-0.6, -0.6, -0.6);
    double voxel = 0.04, trunc = 0.12;
    TsdfVolume v = analytic_tsdf(scene, dims, voxel, origin, trunc);

    for (int iz = 0; iz < dims.z; ++iz) {
        for (int iy = 0; iy < dims.y; ++iy) {
            for (int ix = 0; ix < dims.x; ++ix) {
                Vec3 p = v.voxel_center(ix, iy, iz);
                double d1 = (p - Vec3(-0.2, 0.0, 0.0)).norm() - 0.3;
                double d2 = (p - Vec3(0.2, 0.05, 0.0)).norm() - 0.3;
                double expect = std::clamp(std::min(d1, d2), -trunc, trunc) / trunc;
                CHECK(std::abs(v.values[v.index(ix, iy, iz)] - expect) < 1e-6);
            }
        }
    }
}

TEST_CASE("analytic_tsdf: single convex primitive is monotone along rays until clamping") {
    SyntheticScene scene = riotest::single_object_scene(riotest::make_sphere(1, Vec3::Zero(), 0.3));
    TsdfVolume v = analytic_tsdf(scene, {64, 64, 64}, 0.02, Vec3(-0.63, -0.63, -0.63), 0.1);
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Vec3 dir = rng.unit_vector();
        float prev = -1.0f;
        for (double t = 0.0; t < 0.6; t += 0.01) {
            float s = v.sample(dir * t);
            CHECK(s >= prev - 1e-6f);
            prev = s;
        }
    }
}

TEST_CASE("extract_patch: aligned odd-resolution samples reproduce voxel values exactly") {
    // dyadic grid spacing so every sample position is exact in floating point
    TsdfVolume v;
    v.dims = {9, 9, 9};
    v.voxel_size = 0.25;
    v.origin = Vec3(0.5, -1.0, 2.0);
    v.truncation = 1.0;
    v.values.resize(v.dims.count());
    Rng rng(3);
    for (auto& x : v.values) {
        x = static_cast<float>(rng.uniform(-1.0, 1.0));
    }

    Vec3 center = v.voxel_center(4, 4, 4);
    Patch p = extract_patch(v, center, 5 * v.voxel_size, 5);
    for (int k = 0; k < 5; ++k) {
        for (int j = 0; j < 5; ++j) {
            for (int i = 0; i < 5; ++i) {
                CHECK(p.values[(std::size_t(k) * 5 + j) * 5 + i] ==
                      v.values[v.index(i + 2, j + 2, k + 2)]);
            }
        }
    }
}

TEST_CASE("extract_patch: far-outside center yields the empty-space default") {
    TsdfVolume v;
    v.dims = {4, 4, 4};
    v.voxel_size = 0.05;
    v.truncation = 0.1;
    v.values.assign(v.dims.count(), -0.5f);
    Patch p = extract_patch(v, Vec3(100.0, 0.0, 0.0), 0.3, 8);
    for (float x : p.values) {
        CHECK(x == 1.0f);
    }
}

TEST_CASE("extract_patch: half-out patch over an analytic plane matches the SDF oracle") {
    // floor slab with top face at z = 0; kinks of the clamped profile fall on
    // voxel centers so trilinear interpolation is exact everywhere
    SyntheticScene scene = riotest::single_object_scene(
        riotest::make_box(1, Vec3(0.0, 0.0, -5.0), Vec3(40.0, 40.0, 5.0)));
    double trunc = 0.05, voxel = 0.0125;
    GridDims dims{33, 33, 17};  // z centers -0.1 .. 0.1
    Vec3 origin(-0.2, -0.2, -0.1);
    TsdfVolume v = analytic_tsdf(scene, dims, voxel, origin, trunc);

    Vec3 center(0.0, 0.0, 0.06);
    int res = 8;
    double extent = 0.2;
    Patch p = extract_patch(v, center, extent, res);
    double spacing = extent / res;
    for (int k = 0; k < res; ++k) {
        for (int j = 0; j < res; ++j) {
            for (int i = 0; i < res; ++i) {
                Vec3 sample = center + Vec3((i - 3.5) * spacing, (j - 3.5) * spacing,
                                            (k - 3.5) * spacing);
                double expect = std::clamp(sample.z(), -trunc, trunc) / trunc;
                CHECK(p.values[(std::size_t(k) * res + j) * res + i] ==
                      doctest::Approx(expect).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("extract_patch: argument validation") {
    TsdfVolume v;
    v.dims = {4, 4, 4};
    v.voxel_size = 0.05;
    v.truncation = 0.1;
    v.values.assign(v.dims.count(), 1.0f);
    CHECK_THROWS_AS(extract_patch(v, Vec3(0, 0, std::nan("")), 0.3, 8), std::invalid_argument);
    CHECK_THROWS_AS(extract_patch(v, Vec3::Zero(), 0.3, 1), std::invalid_argument);
}

TEST_CASE("extract_patch: translation equivariance is exact for dyadic shifts") {
    TsdfVolume v;
    v.dims = {8, 8, 8};
    v.voxel_size = 0.125;
    v.origin = Vec3(0.25, 0.5, -0.75);
    v.truncation = 1.0;
    v.values.resize(v.dims.count());
    Rng rng(5);
    for (auto& x : v.values) {
        x = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    // dyadic sample spacing (0.75 / 6 = 0.125) keeps every position exact
    Vec3 center(0.5, 0.75, -0.25);
    Patch a = extract_patch(v, center, 0.75, 6);

    Vec3 shift(2.25, -1.5, 0.75);
    TsdfVolume moved = v;
    moved.origin += shift;
    Patch b = extract_patch(moved, center + shift, 0.75, 6);
    CHECK(a.values == b.values);
}

TEST_CASE("invert_tsdf: surface maps to 1, far space to 0") {
    Patch p;
    p.resolution = 2;
    p.values = {0.0f, 1.0f, -1.0f, -0.5f, 0.5f, 0.25f, -0.25f, 1.0f};
    Patch out = invert_tsdf(p);
    CHECK(out.values[0] == 1.0f);
    CHECK(out.values[1] == 0.0f);
    CHECK(out.values[2] == 0.0f);
    CHECK(out.values[3] == 0.5f);
    CHECK(out.values[4] == 0.5f);
    CHECK(out.values[5] == 0.75f);
    CHECK(out.values[6] == 0.75f);
}

TEST_CASE("invert_tsdf: double inversion follows the closed form") {
    Rng rng(9);
    Patch p;
    p.resolution = 4;
    p.values.resize(64);
    for (auto& x : p.values) {
        x = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    Patch twice = invert_tsdf(invert_tsdf(p));
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        float expect = 1.0f - std::abs(1.0f - std::abs(p.values[i]));
        CHECK(twice.values[i] == doctest::Approx(expect).epsilon(1e-7));
    }
}

TEST_CASE("extract_two_scale: default spec voxel sizes are 1.875 cm and 3.75 cm") {
    PatchPairSpec spec;
    CHECK(spec.fine_voxel_size() == doctest::Approx(0.01875).epsilon(1e-12));
    CHECK(spec.coarse_voxel_size() == doctest::Approx(0.0375).epsilon(1e-12));
    CHECK_NOTHROW(spec.validate());
    PatchPairSpec bad = spec;
    bad.resolution = 7;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = spec;
    bad.fine_extent = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("extract_two_scale: coarse agrees with 2x-downsampled fine over the overlap") {
    SyntheticScene scene = riotest::single_object_scene(riotest::make_sphere(1, Vec3::Zero(), 0.3));
    double voxel = 0.015, trunc = 0.15;
    TsdfVolume v = analytic_tsdf(scene, {100, 100, 100}, voxel, Vec3::Constant(-0.7425), trunc);

    PatchPairSpec spec;
    Vec3 center(0.21, 0.05, 0.15);  // near the sphere surface
    PatchPair pair = extract_two_scale(v, center, spec);

    const int r = spec.resolution;
    auto at = [&](const Patch& p, int i, int j, int k) {
        return double(p.values[(std::size_t(k) * r + j) * r + i]);
    };
    double tol = 2.0 * voxel / trunc;
    for (int k = 8; k < 24; ++k) {
        for (int j = 8; j < 24; ++j) {
            for (int i = 8; i < 24; ++i) {
                double mean = 0.0;
                for (int dz = 0; dz < 2; ++dz) {
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            mean += at(pair.fine, 2 * i - 16 + dx, 2 * j - 16 + dy, 2 * k - 16 + dz);
                        }
                    }
                }
                mean /= 8.0;
                CHECK(std::abs(mean - at(pair.coarse, i, j, k)) < tol);
            }
        }
    }
}

TEST_CASE("extract_two_scale: empty-space center inverts to all-zero") {
    TsdfVolume v;
    v.dims = {4, 4, 4};
    v.voxel_size = 0.05;
    v.truncation = 0.1;
    v.values.assign(v.dims.count(), 1.0f);
    PatchPairSpec spec;
    PatchPair pair = extract_two_scale(v, Vec3(50.0, 50.0, 50.0), spec);
    for (float x : pair.fine.values) {
        CHECK(x == 0.0f);
    }
    for (float x : pair.coarse.values) {
        CHECK(x == 0.0f);
    }
}

TEST_CASE("RIOT file round-trips bit-exactly") {
    TempDir tmp("riot");
    Rng rng(21);
    TsdfVolume v;
    v.dims = {7, 5, 3};
    v.voxel_size = 0.0175;
    v.origin = Vec3(0.11, -0.22, 0.33);
    v.truncation = 0.15;
    v.values.resize(v.dims.count());
    for (auto& x : v.values) {
        x = static_cast<float>(rng.uniform(-1.0, 1.0));
    }

    SUBCASE("without weights") {}
    SUBCASE("with weights") {
        v.weights.resize(v.dims.count());
        for (auto& w : v.weights) {
            w = static_cast<float>(rng.below(12));
        }
    }

    auto path = tmp.path() / "vol.tsdf";
    save_tsdf(v, path);
    TsdfVolume loaded = load_tsdf(path);
    CHECK(loaded.dims == v.dims);
    CHECK(loaded.values == v.values);
    CHECK(loaded.weights == v.weights);
    CHECK(static_cast<float>(loaded.voxel_size) == static_cast<float>(v.voxel_size));
    CHECK(static_cast<float>(loaded.truncation) == static_cast<float>(v.truncation));

    auto path2 = tmp.path() / "vol2.tsdf";
    save_tsdf(loaded, path2);
    CHECK(riotest::slurp(path) == riotest::slurp(path2));
}

TEST_CASE("RIOT loader rejects foreign and truncated files") {
    TempDir tmp("riot-bad");
    auto path = tmp.path() / "bad.tsdf";
    std::ofstream(path) << "not a riot file";
    CHECK_THROWS(load_tsdf(path));
}
