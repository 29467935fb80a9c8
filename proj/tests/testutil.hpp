#pragma once

#include "rio/core.hpp"
#include "rio/datasynth.hpp"
#include "rio/volume.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace riotest {

// Self-cleaning unique directory under the system temp dir.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        auto base = std::filesystem::temp_directory_path();
        for (int i = 0;; ++i) {
            path_ = base / (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(i));
            std::error_code ec;
            if (std::filesystem::create_directory(path_, ec)) {
                break;
            }
        }
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

// A room big and far enough that its walls never influence the band of interest.
inline rio::RoomBounds far_room() {
    return {rio::Vec3(-50.0, -50.0, -50.0), rio::Vec3(50.0, 50.0, 50.0)};
}

inline rio::SceneObject make_sphere(int id, const rio::Vec3& center, double radius) {
    rio::SceneObject obj;
    obj.id = id;
    obj.primitive = rio::PrimitiveType::sphere;
    obj.size = rio::Vec3(radius, 0.0, 0.0);
    obj.pose.translation = center;
    obj.symmetry.type = rio::SymmetryClass::Type::cinf;
    obj.class_label = "ball";
    return obj;
}

inline rio::SceneObject make_box(int id, const rio::Vec3& center, const rio::Vec3& half,
                                 const rio::Mat3& rotation = rio::Mat3::Identity()) {
    rio::SceneObject obj;
    obj.id = id;
    obj.primitive = rio::PrimitiveType::box;
    obj.size = half;
    obj.pose.rotation = rotation;
    obj.pose.translation = center;
    obj.symmetry.type = rio::SymmetryClass::Type::c2;
    obj.class_label = "box";
    return obj;
}

inline rio::SyntheticScene single_object_scene(const rio::SceneObject& obj,
                                               rio::RoomBounds room = far_room()) {
    rio::SyntheticScene scene;
    scene.room = room;
    scene.objects.push_back(obj);
    return scene;
}

inline rio::Mat3 random_rotation(rio::Rng& rng) {
    return Eigen::AngleAxisd(rng.uniform(0.0, 2.0 * 3.14159265358979323846), rng.unit_vector())
        .toRotationMatrix();
}

}  // namespace riotest
