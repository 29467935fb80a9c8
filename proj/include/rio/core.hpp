#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rio {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Fixed 64-byte alignment keeps Eigen's vectorized kernels on the same
// code path run after run, which bit-reproducibility depends on.
template <typename T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

// Rigid transform x -> R*x + t.
struct RigidPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    // this after other: (this ∘ other)(x) = this(other(x))
    RigidPose compose(const RigidPose& other) const {
        return {rotation * other.rotation, rotation * other.translation + translation};
    }

    RigidPose inverse() const {
        Mat3 rt = rotation.transpose();
        return {rt, -(rt * translation)};
    }

    static RigidPose rotation_about(const Vec3& axis, double radians) {
        return {Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix(), Vec3::Zero()};
    }

    static RigidPose translation_of(const Vec3& t) { return {Mat3::Identity(), t}; }
};

inline bool is_rotation_matrix(const Mat3& r, double tol = 1e-6) {
    return (r.transpose() * r - Mat3::Identity()).norm() < tol && r.determinant() > 0.0;
}

// Error taxonomy. invalid-argument conditions use std::invalid_argument directly.
struct DegenerateInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct AlignmentFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ObjectTooSmallError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SchemaError : std::runtime_error {
    explicit SchemaError(std::vector<std::string> violations_in)
        : std::runtime_error(join(violations_in)), violations(std::move(violations_in)) {}
    std::vector<std::string> violations;

  private:
    static std::string join(const std::vector<std::string>& v) {
        std::string s = "schema validation failed:";
        for (const auto& m : v) {
            s += "\n  - " + m;
        }
        return s;
    }
};

struct EvaluationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// SplitMix64. Cheap to seed, platform-independent, and trivially split into
// independent counter-based streams, which RANSAC and the samplers rely on.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    Vec3 unit_vector() {
        // rejection from the cube keeps the distribution exact
        for (;;) {
            Vec3 v(uniform(-1.0, 1.0), uniform(-1.0, 1.0), uniform(-1.0, 1.0));
            double n2 = v.squaredNorm();
            if (n2 > 1e-8 && n2 <= 1.0) {
                return v / std::sqrt(n2);
            }
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // Derives an independent stream from (seed, salt), e.g. per RANSAC iteration.
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t salt) {
        Rng r(seed ^ (0x9e3779b97f4a7c15ull * (salt + 1)));
        return r.next_u64();
    }

  private:
    std::uint64_t state_;
};

// Runs fn(begin, end) over [0, n) on up to `threads` workers. threads <= 1 runs
// inline. Chunks are contiguous so callers can keep deterministic per-index state.
void parallel_chunks(std::size_t n, int threads, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace rio
