#include "rio/datasynth.hpp"
#include "rio/descriptor.hpp"
#include "rio/evaluation.hpp"
#include "rio/keypoints.hpp"
#include "rio/registration.hpp"
#include "rio/volume.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace {

using nlohmann::json;
using namespace rio;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitAllAlignmentsFailed = 3;

std::string scene_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene-%04d", index);
    return buf;
}

// reference analytic volumes computed on demand, a few kept alive
class VolumeCache {
  public:
    VolumeCache(const std::vector<ScenePairManifest>* pairs, const BundleOptions& opt)
        : pairs_(pairs), opt_(opt) {}

    const TsdfVolume& reference(std::size_t index) {
        for (auto& [idx, vol] : cache_) {
            if (idx == index) {
                return vol;
            }
        }
        const auto& pair = (*pairs_)[index];
        GridSpec grid = scene_grid(pair.reference.room, opt_.voxel_size, opt_.truncation, opt_.margin);
        TsdfVolume vol = analytic_tsdf(pair.reference, grid.dims, grid.voxel_size, grid.origin,
                                       grid.truncation, opt_.threads);
        if (cache_.size() >= 3) {
            cache_.erase(cache_.begin());
        }
        cache_.emplace_back(index, std::move(vol));
        return cache_.back().second;
    }

  private:
    const std::vector<ScenePairManifest>* pairs_;
    BundleOptions opt_;
    std::vector<std::pair<std::size_t, TsdfVolume>> cache_;
};

struct DatasetOptions {
    std::string data_dir;
    double voxel_size = 0.015;
    double truncation = 0.15;
    double margin = 0.30;
};

void add_dataset_options(CLI::App* cmd, DatasetOptions& opt) {
    cmd->add_option("--data", opt.data_dir, "dataset root directory")
        ->envname("RIO_DATA_DIR")
        ->required();
    cmd->add_option("--voxel-size", opt.voxel_size, "volume voxel size [m]");
    cmd->add_option("--truncation", opt.truncation, "TSDF truncation band [m]");
    cmd->add_option("--grid-margin", opt.margin, "grid margin beyond the room [m]");
}

// ---- synth ----------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    int scenes = 10;
    std::uint64_t seed = 0;
    int threads = 2;
    SceneGenConfig gen;
    ChangeConfig change;
    double train_frac = 385.0 / 478.0;
    double val_frac = 47.0 / 478.0;
    std::vector<double> room = {2.4, 2.4, 1.8};
    BundleOptions bundle;
};

int run_synth(const SynthArgs& args) {
    if (args.room.size() != 3) {
        throw std::invalid_argument("--room needs three extents");
    }
    SceneGenConfig gen = args.gen;
    gen.room = {{-args.room[0] / 2, -args.room[1] / 2, 0.0},
                {args.room[0] / 2, args.room[1] / 2, args.room[2]}};

    auto splits = assign_splits(args.scenes, args.train_frac, args.val_frac, args.seed);
    std::vector<ScenePairManifest> pairs;
    for (int i = 0; i < args.scenes; ++i) {
        SyntheticScene reference = generate_scene(gen, Rng::derive(args.seed, 1000 + i));
        ScenePairManifest pair =
            apply_changes(reference, args.change, Rng::derive(args.seed, 2000 + i));
        pair.scan_pair_id = scene_name(i);
        pair.split = splits[i];
        pairs.push_back(std::move(pair));
    }

    BundleOptions bundle = args.bundle;
    bundle.threads = args.threads;
    export_benchmark_bundle(pairs, args.out, bundle);

    int instances = 0;
    for (const auto& pair : pairs) {
        instances += static_cast<int>(build_instance_records(pair).size());
    }
    std::cerr << "wrote " << pairs.size() << " scan pairs (" << instances
              << " moved instances) to " << args.out << "\n";
    return kExitOk;
}

// ---- fuse -----------------------------------------------------------------------

struct FuseArgs {
    std::string manifest;
    std::string which = "reference";
    std::string out;
    std::string mode = "analytic";
    int frames = 12;
    double voxel_size = 0.015;
    double truncation = 0.15;
    double margin = 0.30;
    int threads = 2;
};

int run_fuse(const FuseArgs& args) {
    ScenePairManifest pair = load_scene_pair_manifest(args.manifest);
    const SyntheticScene* scene = nullptr;
    if (args.which == "reference") {
        scene = &pair.reference;
    } else if (args.which == "rescan" || args.which == "rescan-1") {
        scene = &pair.rescan;
    } else {
        throw std::invalid_argument("--which must be reference or rescan");
    }

    GridSpec grid = scene_grid(scene->room, args.voxel_size, args.truncation, args.margin);
    TsdfVolume volume;
    if (args.mode == "analytic") {
        volume = analytic_tsdf(*scene, grid.dims, grid.voxel_size, grid.origin, grid.truncation,
                               args.threads);
    } else if (args.mode == "render") {
        CameraIntrinsics intr;
        std::vector<DepthFrame> frames = render_orbit(*scene, intr, args.frames);
        volume = fuse_depth(frames, grid.dims, grid.voxel_size, grid.origin, grid.truncation,
                            args.threads);
    } else {
        throw std::invalid_argument("--mode must be analytic or render");
    }
    save_tsdf(volume, args.out);
    std::cerr << "wrote " << args.out << " (" << volume.dims.x << "x" << volume.dims.y << "x"
              << volume.dims.z << ")\n";
    return kExitOk;
}

// ---- keypoints ------------------------------------------------------------------

struct KeypointArgs {
    std::string volume;
    std::string out;
    HarrisConfig harris{0.04, 2, -std::numeric_limits<double>::infinity(), 0.5};
    double nms_radius = 0.1;
    int max_keypoints = 0;  // 0 = all
    int threads = 2;
};

int run_keypoints(const KeypointArgs& args) {
    TsdfVolume volume = load_tsdf(args.volume);
    std::vector<Keypoint> kps =
        nms(harris3d(volume, args.harris, nullptr, args.threads), args.nms_radius);
    if (args.max_keypoints > 0 && static_cast<int>(kps.size()) > args.max_keypoints) {
        kps.resize(args.max_keypoints);
    }
    save_keypoints_json(kps, args.out);
    std::cerr << "wrote " << kps.size() << " keypoints to " << args.out << "\n";
    return kExitOk;
}

// ---- train ----------------------------------------------------------------------

struct TrainArgs {
    DatasetOptions data;
    std::string out;
    std::string stage = "static";
    std::string split = "train";
    std::string init;
    std::string arch = "multiscale";
    std::string loss_csv;
    std::string dump_init;
    std::string save_triplets;
    std::string from_triplets;
    bool freeze_sse = false;
    int triplets_per_scene = 8;
    int frames = 12;
    double depth_noise = 0.005;
    double depth_dropout = 0.02;
    int epochs = 6;
    int max_scenes = 0;  // 0 = all in split
    PatchPairSpec patch;
    TripletLossConfig loss;
    std::uint64_t seed = 0;
    int threads = 2;
};

NetworkConfig::Arch parse_arch(const std::string& name) {
    if (name == "multiscale") return NetworkConfig::Arch::multiscale;
    if (name == "singlescale_fine") return NetworkConfig::Arch::singlescale_fine;
    if (name == "singlescale_coarse") return NetworkConfig::Arch::singlescale_coarse;
    throw std::invalid_argument("unknown --arch " + name);
}

std::vector<TrainingTriplet> collect_triplets(const TrainArgs& args,
                                              const std::vector<ScenePairManifest>& pairs,
                                              const std::vector<std::size_t>& selected) {
    BundleOptions vol_opt;
    vol_opt.voxel_size = args.data.voxel_size;
    vol_opt.truncation = args.data.truncation;
    vol_opt.margin = args.data.margin;
    vol_opt.threads = args.threads;
    VolumeCache negatives_cache(&pairs, vol_opt);

    TripletSampleConfig sample;
    sample.rotation_augmentation = args.stage == "dynamic";

    CameraIntrinsics intr;
    std::vector<TrainingTriplet> triplets;
    for (std::size_t si = 0; si < selected.size(); ++si) {
        std::size_t index = selected[si];
        const ScenePairManifest& pair = pairs[index];
        GridSpec grid = scene_grid(pair.reference.room, args.data.voxel_size, args.data.truncation,
                                   args.data.margin);

        std::vector<TsdfVolume> negatives;
        if (selected.size() > 1) {
            negatives.push_back(negatives_cache.reference(selected[(si + 1) % selected.size()]));
        }
        if (selected.size() > 2) {
            negatives.push_back(negatives_cache.reference(selected[(si + 2) % selected.size()]));
        }

        TripletBatch batch;
        if (args.stage == "static") {
            std::vector<DepthFrame> frames = render_orbit(pair.reference, intr, args.frames);
            for (std::size_t fi = 0; fi < frames.size(); ++fi) {
                add_depth_noise(frames[fi], args.depth_noise, args.depth_dropout,
                                Rng::derive(args.seed, 5000 + index * 100 + fi));
            }
            batch = sample_static_triplets(frames, grid, negatives, args.patch, sample,
                                           args.triplets_per_scene,
                                           Rng::derive(args.seed, 3000 + index), args.threads);
        } else {
            TsdfVolume source = analytic_tsdf(pair.reference, grid.dims, grid.voxel_size,
                                              grid.origin, grid.truncation, args.threads);
            TsdfVolume rescan = analytic_tsdf(pair.rescan, grid.dims, grid.voxel_size, grid.origin,
                                              grid.truncation, args.threads);
            std::vector<DynamicInstance> instances;
            for (const auto& change : pair.changes) {
                if (change.kind == ChangeKind::moved && change.gt_pose) {
                    instances.push_back({change.instance_id, false, *change.gt_pose,
                                         instance_mask(pair.reference, change.instance_id, source)});
                } else if (change.kind == ChangeKind::removed) {
                    instances.push_back({change.instance_id, true, RigidPose{},
                                         instance_mask(pair.reference, change.instance_id, source)});
                }
            }
            batch = sample_dynamic_triplets(source, rescan, instances, negatives, args.patch,
                                            sample, args.triplets_per_scene,
                                            Rng::derive(args.seed, 4000 + index), args.threads);
        }
        for (const auto& d : batch.diagnostics) {
            std::cerr << pair.scan_pair_id << ": " << d << "\n";
        }
        for (auto& t : batch.triplets) {
            triplets.push_back(std::move(t));
        }
    }
    return triplets;
}

int run_train(const TrainArgs& args) {
    args.patch.validate();

    DescriptorModel<float> model;
    if (!args.init.empty()) {
        model = load_model(args.init);
        if (model.config.input_resolution != args.patch.resolution) {
            throw std::invalid_argument("--patch-resolution does not match the loaded model");
        }
    } else {
        model = init_descriptor_model<float>(
            NetworkConfig::standard(parse_arch(args.arch), args.patch.resolution), args.seed);
    }
    if (!args.dump_init.empty()) {
        save_model(model, args.dump_init);
    }

    std::vector<TrainingTriplet> triplets;
    if (!args.from_triplets.empty()) {
        triplets = load_triplet_store(args.from_triplets);
    } else {
        LoadedDataset data = load_scan_manifest(args.data.data_dir);
        std::vector<std::size_t> selected;
        for (std::size_t i = 0; i < data.pairs.size(); ++i) {
            if (data.pairs[i].split == args.split) {
                selected.push_back(i);
            }
        }
        if (args.max_scenes > 0 && static_cast<int>(selected.size()) > args.max_scenes) {
            selected.resize(args.max_scenes);
        }
        if (selected.empty()) {
            throw std::invalid_argument("no scenes in split '" + args.split + "' under " +
                                        args.data.data_dir);
        }
        triplets = collect_triplets(args, data.pairs, selected);
    }
    std::cerr << "training on " << triplets.size() << " triplets (" << args.stage << ")\n";
    if (!args.save_triplets.empty()) {
        save_triplet_store(triplets, args.save_triplets, args.patch);
    }

    TripletLossConfig loss = args.loss;
    loss.epochs = args.epochs;
    loss.seed = args.seed;
    loss.threads = args.threads;
    loss.stage = args.stage;
    loss.freeze = args.freeze_sse ? TripletLossConfig::Freeze::sse_frozen
                                  : TripletLossConfig::Freeze::none;
    TrainResult result = train<float>(model, triplets, loss);

    save_model(model, args.out);
    if (!args.loss_csv.empty()) {
        std::ofstream csv(args.loss_csv);
        csv << "epoch,mean_loss\n";
        for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
            csv << e << ',' << result.epoch_loss[e] << '\n';
        }
    }
    if (!result.epoch_loss.empty()) {
        std::cerr << "loss " << result.epoch_loss.front() << " -> " << result.epoch_loss.back()
                  << "\n";
    }
    std::cerr << "wrote " << args.out << "\n";
    return kExitOk;
}

// ---- relocalize -----------------------------------------------------------------

struct RelocalizeArgs {
    DatasetOptions data;
    std::string model;
    std::string out;
    std::string split = "test";
    RelocalizeConfig config;
    std::uint64_t seed = 0;
    int threads = 2;
};

int run_relocalize(const RelocalizeArgs& args) {
    DescriptorModel<float> model = load_model(args.model);
    LoadedDataset data = load_scan_manifest(args.data.data_dir);

    RelocalizeConfig config = args.config;
    config.patch.resolution = model.config.input_resolution;
    config.ransac.seed = args.seed;
    config.ransac.threads = args.threads;
    config.threads = args.threads;

    std::vector<Prediction> predictions;
    int attempted = 0, failed = 0;
    for (const auto& pair : data.pairs) {
        if (!args.split.empty() && pair.split != args.split) {
            continue;
        }
        namespace fs = std::filesystem;
        fs::path dir = fs::path(args.data.data_dir) / "scenes" / pair.scan_pair_id;
        TsdfVolume source = load_tsdf(dir / "reference.tsdf");
        TsdfVolume target = load_tsdf(dir / "rescan-1.tsdf");
        SceneFeatures features = compute_scene_features(model, target, config);

        for (const auto& change : pair.changes) {
            if (change.kind != ChangeKind::moved) {
                continue;
            }
            ++attempted;
            Prediction pred;
            pred.scan_pair_id = pair.scan_pair_id;
            pred.instance_id = change.instance_id;
            try {
                VoxelMask mask = instance_mask(pair.reference, change.instance_id, source);
                RelocalizeResult res = relocalize_instance(model, source, mask, features, config);
                pred.pose = res.pose;
                pred.ok = true;
                std::cerr << pair.scan_pair_id << " instance " << change.instance_id << ": ok ("
                          << res.diagnostics.inlier_count << "/" << res.diagnostics.matches
                          << " inliers)\n";
            } catch (const ObjectTooSmallError& e) {
                pred.ok = false;
                ++failed;
                std::cerr << pair.scan_pair_id << " instance " << change.instance_id
                          << ": object-too-small (" << e.what() << ")\n";
            } catch (const AlignmentFailure& e) {
                pred.ok = false;
                ++failed;
                std::cerr << pair.scan_pair_id << " instance " << change.instance_id
                          << ": alignment-failure (" << e.what() << ")\n";
            }
            predictions.push_back(std::move(pred));
        }
    }
    save_predictions(predictions, args.out);
    std::cerr << "wrote " << predictions.size() << " predictions (" << failed << " failed) to "
              << args.out << "\n";
    if (attempted > 0 && failed == attempted) {
        return kExitAllAlignmentsFailed;
    }
    return kExitOk;
}

// ---- evaluate -------------------------------------------------------------------

struct EvaluateArgs {
    std::string predictions;
    std::string gt;
    std::string out;
    std::string table;
    std::string class_map;
    std::string match_distances;
    std::string prc_csv;
};

int run_evaluate(const EvaluateArgs& args) {
    std::vector<Prediction> preds = load_predictions(args.predictions);
    std::vector<ScanPairRecords> gt = load_gt_manifest(args.gt);
    ClassMapping mapping =
        args.class_map.empty() ? ClassMapping::defaults() : ClassMapping::load(args.class_map);

    EvalReport report = benchmark(preds, gt, kBenchmarkThresholds, mapping);
    json out = json::parse(report_to_json(report));

    if (!args.match_distances.empty()) {
        std::ifstream is(args.match_distances);
        if (!is) {
            throw std::runtime_error("cannot open " + args.match_distances);
        }
        json dj = json::parse(is);
        std::vector<double> pos = dj.at("positive").get<std::vector<double>>();
        std::vector<double> neg = dj.at("negative").get<std::vector<double>>();
        MatchingReport matching = keypoint_matching_metrics(pos, neg);
        out["keypoint_matching"] = {
            {"threshold", matching.operating_point.threshold},
            {"recall", matching.operating_point.recall},
            {"precision", matching.operating_point.precision},
            {"accuracy", matching.operating_point.accuracy},
            {"fpr", matching.operating_point.fpr},
            {"er", matching.operating_point.er},
            {"f1", matching.operating_point.f1},
        };
        if (!args.prc_csv.empty()) {
            save_prc_csv(matching.prc, args.prc_csv);
        }
    }

    std::string table = format_report_table(report);
    std::cout << table;
    if (!args.out.empty()) {
        std::ofstream(args.out) << out.dump(2) << '\n';
    }
    if (!args.table.empty()) {
        std::ofstream(args.table) << table;
    }
    for (const auto& w : report.warnings) {
        std::cerr << "warning: " << w << "\n";
    }
    return kExitOk;
}

// Applies "--config file.json" by injecting "--key=value" tokens right after
// the subcommand; explicit flags later on the command line win (take-last).
std::vector<std::string> inject_config(std::vector<std::string> tokens) {
    std::string config_path;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        if (tokens[i] == "--config") {
            config_path = tokens[i + 1];
            tokens.erase(tokens.begin() + i, tokens.begin() + i + 2);
            break;
        }
    }
    if (config_path.empty()) {
        return tokens;
    }
    std::ifstream is(config_path);
    if (!is) {
        throw std::runtime_error("cannot open config file " + config_path);
    }
    json cfg = json::parse(is);
    std::size_t after = tokens.size();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!tokens[i].starts_with("-")) {
            after = i + 1;
            break;
        }
    }
    std::vector<std::string> injected;
    for (const auto& [key, value] : cfg.items()) {
        std::string v = value.is_string() ? value.get<std::string>() : value.dump();
        injected.push_back("--" + key + "=" + v);
    }
    tokens.insert(tokens.begin() + after, injected.begin(), injected.end());
    return tokens;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RIO: 6DoF object instance re-localization in changing indoor scans"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    SynthArgs synth;
    auto* cmd_synth = app.add_subcommand("synth", "generate a synthetic benchmark bundle");
    cmd_synth->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd_synth->add_option("--out", synth.out, "output bundle directory")->required();
    cmd_synth->add_option("--scenes", synth.scenes, "number of scan pairs");
    cmd_synth->add_option("--seed", synth.seed, "master seed");
    cmd_synth->add_option("--threads", synth.threads, "worker threads");
    cmd_synth->add_option("--room", synth.room, "room extents x,y,z [m]")->expected(3);
    cmd_synth->add_option("--objects-min", synth.gen.min_objects, "min objects per scene");
    cmd_synth->add_option("--objects-max", synth.gen.max_objects, "max objects per scene");
    cmd_synth->add_option("--size-min", synth.gen.min_size, "min primitive half-size [m]");
    cmd_synth->add_option("--size-max", synth.gen.max_size, "max primitive half-size [m]");
    cmd_synth->add_option("--move", synth.change.move_fraction, "moved fraction");
    cmd_synth->add_option("--remove", synth.change.remove_fraction, "removed fraction");
    cmd_synth->add_option("--add", synth.change.add_fraction, "added fraction");
    cmd_synth->add_option("--max-translation", synth.change.max_translation, "max move [m]");
    cmd_synth->add_option("--max-rotation-deg", synth.change.max_rotation_deg, "max move rotation");
    cmd_synth->add_flag("--vertical-rotation", synth.change.vertical_rotation_only,
                        "rotate moves about the vertical axis only");
    cmd_synth->add_option("--train-frac", synth.train_frac, "train split fraction");
    cmd_synth->add_option("--val-frac", synth.val_frac, "validation split fraction");
    cmd_synth->add_option("--voxel-size", synth.bundle.voxel_size, "volume voxel size [m]");
    cmd_synth->add_option("--truncation", synth.bundle.truncation, "TSDF truncation [m]");
    cmd_synth->add_option("--grid-margin", synth.bundle.margin, "grid margin [m]");
    cmd_synth->add_flag("--hidden", synth.bundle.hidden, "omit ground-truth poses");

    FuseArgs fuse;
    auto* cmd_fuse = app.add_subcommand("fuse", "build a TSDF volume from a scene manifest");
    cmd_fuse->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd_fuse->add_option("--manifest", fuse.manifest, "scene pair manifest.json")->required();
    cmd_fuse->add_option("--which", fuse.which, "reference | rescan");
    cmd_fuse->add_option("--out", fuse.out, "output .tsdf path")->required();
    cmd_fuse->add_option("--mode", fuse.mode, "analytic | render (depth-frame fusion)");
    cmd_fuse->add_option("--frames", fuse.frames, "rendered frames for --mode render");
    cmd_fuse->add_option("--voxel-size", fuse.voxel_size, "voxel size [m]");
    cmd_fuse->add_option("--truncation", fuse.truncation, "truncation [m]");
    cmd_fuse->add_option("--grid-margin", fuse.margin, "grid margin [m]");
    cmd_fuse->add_option("--threads", fuse.threads, "worker threads");

    KeypointArgs keypoints;
    auto* cmd_kp = app.add_subcommand("keypoints", "detect Harris-3D keypoints on a volume");
    cmd_kp->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd_kp->add_option("--volume", keypoints.volume, "input .tsdf")->required();
    cmd_kp->add_option("--out", keypoints.out, "output keypoints .json")->required();
    cmd_kp->add_option("--k", keypoints.harris.k, "Harris k");
    cmd_kp->add_option("--gradient-radius", keypoints.harris.gradient_radius, "window radius [voxels]");
    cmd_kp->add_option("--min-response", keypoints.harris.min_response, "response threshold");
    cmd_kp->add_option("--nms-radius", keypoints.nms_radius, "suppression radius [m]");
    cmd_kp->add_option("--max", keypoints.max_keypoints, "cap on keypoints, 0 = all");
    cmd_kp->add_option("--threads", keypoints.threads, "worker threads");

    TrainArgs train_args;
    auto* cmd_train = app.add_subcommand("train", "train the two-scale descriptor");
    cmd_train->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    add_dataset_options(cmd_train, train_args.data);
    cmd_train->add_option("--out", train_args.out, "output model .riom")->required();
    cmd_train->add_option("--stage", train_args.stage, "static | dynamic");
    cmd_train->add_option("--split", train_args.split, "dataset split to train on");
    cmd_train->add_option("--init", train_args.init, "initial model to continue from");
    cmd_train->add_option("--arch", train_args.arch,
                          "multiscale | singlescale_fine | singlescale_coarse");
    cmd_train->add_flag("--freeze-sse", train_args.freeze_sse, "train only the multi-scale encoder");
    cmd_train->add_option("--triplets-per-scene", train_args.triplets_per_scene, "samples per scene");
    cmd_train->add_option("--frames", train_args.frames, "rendered frames per scene (static)");
    cmd_train->add_option("--depth-noise", train_args.depth_noise, "depth noise amplitude [m]");
    cmd_train->add_option("--depth-dropout", train_args.depth_dropout, "invalid-pixel fraction");
    cmd_train->add_option("--epochs", train_args.epochs, "training epochs");
    cmd_train->add_option("--max-scenes", train_args.max_scenes, "limit scenes, 0 = all");
    cmd_train->add_option("--batch-size", train_args.loss.batch_size, "triplets per batch");
    cmd_train->add_option("--lr", train_args.loss.learning_rate, "Adam learning rate");
    cmd_train->add_option("--margin", train_args.loss.margin, "triplet margin");
    cmd_train->add_option("--patch-resolution", train_args.patch.resolution, "patch voxels per axis");
    cmd_train->add_option("--fine-extent", train_args.patch.fine_extent, "fine patch extent [m]");
    cmd_train->add_option("--coarse-extent", train_args.patch.coarse_extent, "coarse patch extent [m]");
    cmd_train->add_option("--loss-csv", train_args.loss_csv, "write the loss curve here");
    cmd_train->add_option("--dump-init", train_args.dump_init, "save the initialized model here");
    cmd_train->add_option("--save-triplets", train_args.save_triplets, "export the triplet store");
    cmd_train->add_option("--from-triplets", train_args.from_triplets, "load a triplet store");
    cmd_train->add_option("--seed", train_args.seed, "master seed");
    cmd_train->add_option("--threads", train_args.threads, "worker threads");

    RelocalizeArgs reloc;
    auto* cmd_reloc = app.add_subcommand("relocalize", "estimate 6DoF poses of changed instances");
    cmd_reloc->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    add_dataset_options(cmd_reloc, reloc.data);
    cmd_reloc->add_option("--model", reloc.model, "descriptor model .riom")->required();
    cmd_reloc->add_option("--out", reloc.out, "output predictions .json")->required();
    cmd_reloc->add_option("--split", reloc.split, "dataset split to process (empty = all)");
    cmd_reloc->add_option("--scene-keypoints", reloc.config.max_scene_keypoints, "scene keypoint cap");
    cmd_reloc->add_option("--object-keypoints", reloc.config.max_object_keypoints,
                          "object keypoint cap");
    cmd_reloc->add_option("--min-object-keypoints", reloc.config.min_object_keypoints,
                          "minimum object keypoints");
    cmd_reloc->add_option("--knn", reloc.config.knn, "neighbours per source keypoint");
    cmd_reloc->add_option("--nms-radius", reloc.config.nms_radius, "keypoint suppression radius [m]");
    cmd_reloc->add_option("--ransac-iterations", reloc.config.ransac.max_iterations,
                          "RANSAC iterations");
    cmd_reloc->add_option("--inlier-threshold", reloc.config.ransac.inlier_threshold,
                          "RANSAC inlier radius [m]");
    cmd_reloc->add_option("--min-inliers", reloc.config.ransac.min_inliers, "RANSAC acceptance");
    cmd_reloc->add_option("--fine-extent", reloc.config.patch.fine_extent, "fine patch extent [m]");
    cmd_reloc->add_option("--coarse-extent", reloc.config.patch.coarse_extent,
                          "coarse patch extent [m]");
    cmd_reloc->add_option("--seed", reloc.seed, "RANSAC seed");
    cmd_reloc->add_option("--threads", reloc.threads, "worker threads");

    EvaluateArgs eval;
    auto* cmd_eval = app.add_subcommand("evaluate", "score predictions against ground truth");
    cmd_eval->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd_eval->add_option("--predictions", eval.predictions, "predictions .json")->required();
    cmd_eval->add_option("--gt", eval.gt, "ground-truth manifest .json")->required();
    cmd_eval->add_option("--out", eval.out, "report .json");
    cmd_eval->add_option("--table", eval.table, "plain-text table output");
    cmd_eval->add_option("--class-map", eval.class_map, "label-to-class overrides .json");
    cmd_eval->add_option("--match-distances", eval.match_distances,
                         "positive/negative descriptor distances .json");
    cmd_eval->add_option("--prc-csv", eval.prc_csv, "precision-recall curve CSV");

    std::vector<std::string> tokens(argv + 1, argv + argc);
    try {
        tokens = inject_config(std::move(tokens));
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    // CLI11 parses the reversed token vector
    std::vector<std::string> reversed(tokens.rbegin(), tokens.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (cmd_synth->parsed()) return run_synth(synth);
        if (cmd_fuse->parsed()) return run_fuse(fuse);
        if (cmd_kp->parsed()) return run_keypoints(keypoints);
        if (cmd_train->parsed()) return run_train(train_args);
        if (cmd_reloc->parsed()) return run_relocalize(reloc);
        if (cmd_eval->parsed()) return run_evaluate(eval);
    } catch (const SchemaError& e) {
        std::cerr << "schema error:\n";
        for (const auto& v : e.violations) {
            std::cerr << "  - " << v << "\n";
        }
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitOk;
}
