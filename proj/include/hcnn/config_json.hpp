#pragma once

// Run configuration as a strict JSON document: network architecture,
// training schedule, augmentation policy, data source, seed, output
// directory, thread count. Unknown keys are rejected at every level so a
// typo cannot silently fall back to a default. Absent keys take defaults;
// every run re-serializes the fully resolved document next to its outputs.

#include <cstdint>
#include <fstream>
#include <string>

#include "json.hpp"

#include "hcnn/errors.hpp"
#include "hcnn/model.hpp"
#include "hcnn/train.hpp"

namespace hcnn {

using json = nlohmann::json;

struct DataConfig {
    std::string dataset = "cifar10";  // cifar10|cifar100|synth-easy|synth-noisy
    std::string dir;                  // directory with the binary batches
    std::size_t train_limit = 0;      // 0 keeps every record
    std::size_t test_limit = 0;
    std::size_t synth_count = 2000;   // synthetic train size; test is 1/5
};

struct RunConfig {
    NetworkConfig network;
    TrainOptions train;
    DataConfig data;
    std::uint64_t seed = 0;  // parameter init and shuffle/augment stream
    std::string output_dir = "run_out";
};

namespace detail {

inline void reject_unknown(const json& j, const char* scope,
                           std::initializer_list<const char*> allowed) {
    if (!j.is_object())
        throw config_error(std::string("config: ") + scope +
                           " must be an object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (item.key() == k) { ok = true; break; }
        if (!ok)
            throw config_error(std::string("config: unknown key \"") +
                               item.key() + "\" in " + scope);
    }
}

inline long long require_int(const json& j, const std::string& key) {
    if (!j.is_number_integer())
        throw config_error("config: \"" + key + "\" must be an integer");
    return j.get<long long>();
}

inline double require_num(const json& j, const std::string& key) {
    if (!j.is_number())
        throw config_error("config: \"" + key + "\" must be a number");
    return j.get<double>();
}

inline bool require_bool(const json& j, const std::string& key) {
    if (!j.is_boolean())
        throw config_error("config: \"" + key + "\" must be a boolean");
    return j.get<bool>();
}

inline std::string require_str(const json& j, const std::string& key) {
    if (!j.is_string())
        throw config_error("config: \"" + key + "\" must be a string");
    return j.get<std::string>();
}

inline std::size_t require_size(const json& j, const std::string& key) {
    long long v = require_int(j, key);
    if (v < 0)
        throw config_error("config: \"" + key + "\" must be non-negative");
    return static_cast<std::size_t>(v);
}

}  // namespace detail

inline void network_from_json(const json& j, NetworkConfig& c) {
    detail::reject_unknown(j, "network",
                           {"attribute_support", "boundary", "depth",
                            "max_attributes", "num_classes", "rank",
                            "spatial_size", "spatial_support",
                            "stride_depths", "variant"});
    using namespace detail;
    if (j.contains("depth")) c.depth = int(require_int(j["depth"], "depth"));
    if (j.contains("max_attributes"))
        c.max_attributes = int(require_int(j["max_attributes"],
                                           "max_attributes"));
    if (j.contains("rank")) c.rank = int(require_int(j["rank"], "rank"));
    if (j.contains("spatial_size"))
        c.spatial_size = int(require_int(j["spatial_size"], "spatial_size"));
    if (j.contains("num_classes"))
        c.num_classes = int(require_int(j["num_classes"], "num_classes"));
    if (j.contains("attribute_support")) {
        const auto& a = j["attribute_support"];
        if (!a.is_array() || a.size() != 2)
            throw config_error(
                "config: \"attribute_support\" must be [a, b]");
        c.attr_support_a = require_size(a[0], "attribute_support[0]");
        c.attr_support_b = require_size(a[1], "attribute_support[1]");
    }
    if (j.contains("spatial_support")) {
        const auto& a = j["spatial_support"];
        if (!a.is_array() || a.size() != 2)
            throw config_error("config: \"spatial_support\" must be [s1, s2]");
        c.spatial_support_1 = require_size(a[0], "spatial_support[0]");
        c.spatial_support_2 = require_size(a[1], "spatial_support[1]");
    }
    if (j.contains("stride_depths")) {
        const auto& a = j["stride_depths"];
        if (!a.is_array())
            throw config_error("config: \"stride_depths\" must be an array");
        c.stride_depths.clear();
        for (const auto& e : a)
            c.stride_depths.push_back(int(require_int(e, "stride_depths[]")));
    }
    if (j.contains("boundary")) {
        std::string b = require_str(j["boundary"], "boundary");
        if (b == "zero_pad") c.boundary = BoundaryMode::ZeroPad;
        else if (b == "periodic") c.boundary = BoundaryMode::Periodic;
        else throw config_error("config: boundary must be zero_pad|periodic");
    }
    if (j.contains("variant")) {
        std::string v = require_str(j["variant"], "variant");
        if (v == "standard") c.variant = Variant::Standard;
        else if (v == "plus") c.variant = Variant::Plus;
        else throw config_error("config: variant must be standard|plus");
    }
}

inline json network_to_json(const NetworkConfig& c) {
    return json{{"attribute_support", {c.attr_support_a, c.attr_support_b}},
                {"boundary", to_string(c.boundary)},
                {"depth", c.depth},
                {"max_attributes", c.max_attributes},
                {"num_classes", c.num_classes},
                {"rank", c.rank},
                {"spatial_size", c.spatial_size},
                {"spatial_support", {c.spatial_support_1, c.spatial_support_2}},
                {"stride_depths", c.stride_depths},
                {"variant", to_string(c.variant)}};
}

inline RunConfig run_config_from_json(const json& j) {
    detail::reject_unknown(j, "top level",
                           {"network", "schedule", "augment", "data", "seed",
                            "output_dir", "threads"});
    using namespace detail;
    RunConfig rc;
    if (j.contains("network")) network_from_json(j["network"], rc.network);
    if (j.contains("schedule")) {
        const json& s = j["schedule"];
        reject_unknown(s, "schedule",
                       {"epochs", "batch_size", "base_lr", "decay_period",
                        "decay_factor", "momentum", "weight_decay",
                        "checkpoint_every", "log_timing"});
        if (s.contains("epochs"))
            rc.train.epochs = int(require_int(s["epochs"], "epochs"));
        if (s.contains("batch_size"))
            rc.train.batch_size =
                int(require_int(s["batch_size"], "batch_size"));
        if (s.contains("base_lr"))
            rc.train.base_lr = require_num(s["base_lr"], "base_lr");
        if (s.contains("decay_period"))
            rc.train.decay_period =
                int(require_int(s["decay_period"], "decay_period"));
        if (s.contains("decay_factor"))
            rc.train.decay_factor =
                require_num(s["decay_factor"], "decay_factor");
        if (s.contains("momentum"))
            rc.train.momentum = require_num(s["momentum"], "momentum");
        if (s.contains("weight_decay"))
            rc.train.weight_decay =
                require_num(s["weight_decay"], "weight_decay");
        if (s.contains("checkpoint_every"))
            rc.train.checkpoint_every =
                int(require_int(s["checkpoint_every"], "checkpoint_every"));
        if (s.contains("log_timing"))
            rc.train.log_timing = require_bool(s["log_timing"], "log_timing");
    }
    if (j.contains("augment")) {
        const json& a = j["augment"];
        reject_unknown(a, "augment", {"enabled", "max_shift"});
        if (a.contains("enabled"))
            rc.train.augment = require_bool(a["enabled"], "enabled");
        if (a.contains("max_shift"))
            rc.train.max_shift = int(require_int(a["max_shift"], "max_shift"));
    }
    if (j.contains("data")) {
        const json& d = j["data"];
        reject_unknown(d, "data",
                       {"dataset", "dir", "train_limit", "test_limit",
                        "synth_count"});
        if (d.contains("dataset")) {
            rc.data.dataset = require_str(d["dataset"], "dataset");
            if (rc.data.dataset != "cifar10" && rc.data.dataset != "cifar100" &&
                rc.data.dataset != "synth-easy" &&
                rc.data.dataset != "synth-noisy")
                throw config_error("config: dataset must be one of "
                                   "cifar10|cifar100|synth-easy|synth-noisy");
        }
        if (d.contains("dir")) rc.data.dir = require_str(d["dir"], "dir");
        if (d.contains("train_limit"))
            rc.data.train_limit = require_size(d["train_limit"], "train_limit");
        if (d.contains("test_limit"))
            rc.data.test_limit = require_size(d["test_limit"], "test_limit");
        if (d.contains("synth_count"))
            rc.data.synth_count = require_size(d["synth_count"], "synth_count");
    }
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned() && !j["seed"].is_number_integer())
            throw config_error("config: \"seed\" must be an integer");
        long long v = j["seed"].get<long long>();
        if (v < 0) throw config_error("config: \"seed\" must be non-negative");
        rc.seed = static_cast<std::uint64_t>(v);
        rc.train.seed = rc.seed;
    }
    if (j.contains("output_dir"))
        rc.output_dir = require_str(j["output_dir"], "output_dir");
    if (j.contains("threads")) {
        rc.train.threads = int(require_int(j["threads"], "threads"));
        if (rc.train.threads < 1)
            throw config_error("config: \"threads\" must be >= 1");
    }
    return rc;
}

inline json run_config_to_json(const RunConfig& rc) {
    return json{
        {"network", network_to_json(rc.network)},
        {"schedule",
         {{"epochs", rc.train.epochs},
          {"batch_size", rc.train.batch_size},
          {"base_lr", rc.train.base_lr},
          {"decay_period", rc.train.decay_period},
          {"decay_factor", rc.train.decay_factor},
          {"momentum", rc.train.momentum},
          {"weight_decay", rc.train.weight_decay},
          {"checkpoint_every", rc.train.checkpoint_every},
          {"log_timing", rc.train.log_timing}}},
        {"augment",
         {{"enabled", rc.train.augment}, {"max_shift", rc.train.max_shift}}},
        {"data",
         {{"dataset", rc.data.dataset},
          {"dir", rc.data.dir},
          {"train_limit", rc.data.train_limit},
          {"test_limit", rc.data.test_limit},
          {"synth_count", rc.data.synth_count}}},
        {"seed", rc.seed},
        {"output_dir", rc.output_dir},
        {"threads", rc.train.threads}};
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw config_error(std::string("config parse error: ") + e.what());
    }
    return run_config_from_json(j);
}

inline void save_run_config(const std::string& path, const RunConfig& rc) {
    std::ofstream out(path);
    if (!out) throw data_error("cannot write config file: " + path);
    out << run_config_to_json(rc).dump(2) << "\n";
}

}  // namespace hcnn
