#pragma once

#include "rio/core.hpp"

#include <json.hpp>

namespace rio::jsonio {

using nlohmann::json;

inline json vec3_to_json(const Vec3& v) {
    return json::array({v.x(), v.y(), v.z()});
}

inline Vec3 vec3_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3) {
        throw std::invalid_argument("expected a 3-element array");
    }
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

// Rotation as 9 floats row-major.
inline json pose_to_json(const RigidPose& pose) {
    json r = json::array();
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 3; ++k) {
            r.push_back(pose.rotation(i, k));
        }
    }
    return json{{"rotation", r}, {"translation", vec3_to_json(pose.translation)}};
}

inline RigidPose pose_from_json(const json& j) {
    const auto& r = j.at("rotation");
    if (!r.is_array() || r.size() != 9) {
        throw std::invalid_argument("pose rotation must hold 9 row-major entries");
    }
    RigidPose pose;
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 3; ++k) {
            pose.rotation(i, k) = r[std::size_t(i) * 3 + k].get<double>();
        }
    }
    pose.translation = vec3_from_json(j.at("translation"));
    return pose;
}

}  // namespace rio::jsonio
