#pragma once

// Flat key=value configuration. Each command declares the keys it accepts;
// config files and command-line flags write into the same table, and keys
// outside the declared set are rejected.

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dualrc/container.hpp"
#include "dualrc/error.hpp"

namespace dualrc::harness {

struct KeySpec {
    std::string name;
    std::string default_value;
    std::string help;
};

class Settings {
public:
    Settings() = default;
    explicit Settings(std::vector<KeySpec> keys) : keys_(std::move(keys)) {
        for (const auto& k : keys_) values_[k.name] = k.default_value;
    }

    const std::vector<KeySpec>& keys() const { return keys_; }
    bool accepts(const std::string& key) const { return values_.count(key) > 0; }

    void set(const std::string& key, const std::string& value) {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
        it->second = value;
    }

    // Lines of "key = value"; blank lines and lines starting with '#' skipped.
    void load_text(const std::string& text, const std::string& origin = "config") {
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key=value");
            const std::string key = trim(t.substr(0, eq));
            if (!accepts(key))
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
            set(key, trim(t.substr(eq + 1)));
        }
    }

    void load_file(const std::string& path) { load_text(read_file_bytes(path), path); }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("configuration key '" + key + "' is not defined here");
        return it->second;
    }

    long integer(const std::string& key) const { return parse_integer(key, str(key)); }

    std::size_t count(const std::string& key) const {
        const long v = integer(key);
        if (v < 0) throw ConfigError(key + ": must be nonnegative");
        return std::size_t(v);
    }

    double real(const std::string& key) const { return parse_real(key, str(key)); }

    bool flag(const std::string& key) const {
        const std::string& v = str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError(key + ": expected true/false, got '" + v + "'");
    }

    std::vector<std::size_t> count_list(const std::string& key) const {
        std::vector<std::size_t> out;
        for (const auto& item : split(str(key))) {
            const long v = parse_integer(key, item);
            if (v < 0) throw ConfigError(key + ": entries must be nonnegative");
            out.push_back(std::size_t(v));
        }
        return out;
    }

    std::vector<double> real_list(const std::string& key) const {
        std::vector<double> out;
        for (const auto& item : split(str(key))) out.push_back(parse_real(key, item));
        return out;
    }

    // The effective table, one "key=value" per line in declaration order.
    std::string dump() const {
        std::string out;
        for (const auto& k : keys_) out += k.name + "=" + values_.at(k.name) + "\n";
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static std::vector<std::string> split(const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!trim(item).empty()) out.push_back(trim(item));
        return out;
    }

    static long parse_integer(const std::string& key, const std::string& v) {
        long out = 0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || ptr != v.data() + v.size())
            throw ConfigError(key + ": expected an integer, got '" + v + "'");
        return out;
    }

    static double parse_real(const std::string& key, const std::string& v) {
        double out = 0.0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || ptr != v.data() + v.size())
            throw ConfigError(key + ": expected a number, got '" + v + "'");
        return out;
    }

    std::vector<KeySpec> keys_;
    std::map<std::string, std::string> values_;
};

inline std::vector<KeySpec> join_keys(std::initializer_list<std::vector<KeySpec>> groups) {
    std::vector<KeySpec> out;
    for (const auto& g : groups)
        for (const auto& k : g)
            if (std::none_of(out.begin(), out.end(), [&](const KeySpec& o) { return o.name == k.name; }))
                out.push_back(k);
    return out;
}

inline std::vector<KeySpec> backbone_keys() {
    return {
        {"backbone", "patch", "feature extractor: patch (training-free) or toy (learned pyramid)"},
        {"patch", "9", "patch descriptor size (odd)"},
        {"fine_stride", "1", "patch backbone fine stride in pixels"},
        {"variant", "a", "toy pyramid fusion variant a-e"},
        {"base_stride", "2", "toy backbone fine stride"},
        {"trunk_channels", "8,16,32,32", "toy trunk widths per level"},
        {"lateral_channels", "32", "toy lateral/fused channel width"},
        {"trunk_seed", "17", "seed of the frozen trunk weights"},
        {"param_seed", "1", "seed for trainable weights when no weights file is given"},
        {"weights", "", "parameter container with trained weights (optional)"},
    };
}

inline std::vector<KeySpec> consensus_keys() {
    return {
        {"nc_layers", "5:1:16,5:16:16,5:16:1", "consensus stack, k:in:out per layer"},
        {"nc_relu", "true", "ReLU between consensus layers"},
        {"nc_init", "delta", "consensus init without weights file: delta or uniform"},
    };
}

inline std::vector<KeySpec> matching_keys() {
    return {
        {"keep_fraction", "0.5", "fraction of coarse cells whose fine cells are queried"},
        {"top_k", "500", "keep the k best-scoring matches (0 keeps all)"},
    };
}

inline std::vector<KeySpec> evaluation_keys() {
    return {{"thresholds", "1,2,3,4,5,6,7,8,9,10", "MMA pixel thresholds"}};
}

inline std::vector<KeySpec> synth_keys() {
    return {
        {"seed", "0", "scene seed"},
        {"size", "64", "image side length in pixels"},
        {"warp", "translation", "identity, translation, affine or projective"},
        {"annotations", "128", "number of annotated correspondences"},
        {"tx", "", "translation x override (translation warp)"},
        {"ty", "", "translation y override (translation warp)"},
    };
}

inline std::vector<KeySpec> training_keys() {
    return {
        {"steps", "200", "optimizer steps"},
        {"optimizer", "sgd", "sgd or adam"},
        {"learning_rate", "0.01", "initial learning rate"},
        {"halve_every", "0", "halve the learning rate every n steps (0 = never)"},
        {"sigma", "1", "ground-truth blur in grid cells"},
        {"lambda", "0.05", "orthogonal loss weight"},
    };
}

} // namespace dualrc::harness
