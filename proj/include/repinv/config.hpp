#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "repinv/common.hpp"
#include "repinv/io.hpp"

namespace repinv {

// Flat `key = value` configuration with a closed key registry: unknown keys
// are errors, so typos never silently fall back to defaults.
inline const std::map<std::string, std::string>& config_defaults() {
    static const std::map<std::string, std::string> defaults = {
        {"seed", "0"},

        {"data.source", "digits"},  // digits | idx | cifar10
        {"data.images", "data/digits-images-idx3-ubyte"},
        {"data.labels", "data/digits-labels-idx1-ubyte"},
        {"data.cifar_batches", ""},
        {"data.levels", "16"},
        {"data.resize", "14"},        // 0 keeps the source extent
        {"data.mean_pool", "0"},      // 2x2 mean pooling before quantization
        {"data.canvas", "0"},         // >0 renders the affine-digit set
        {"data.affine_expansion", "1"},
        {"data.train_frac", "0.8"},
        {"data.val_frac", "0.1"},
        {"data.test_frac", "0.1"},
        {"data.num_classes", "10"},

        {"classifier.variant", "baseline"},
        {"classifier.c1", "32"},
        {"classifier.c2", "32"},
        {"classifier.fc3_units", "256"},
        {"classifier.fc_width", "2048"},
        {"classifier.dropout_conv", "0.2"},
        {"classifier.dropout_fc", "0.5"},
        {"classifier.dropout_enabled", "1"},
        {"classifier.lr", "0.0003"},
        {"classifier.max_steps", "10000"},
        {"classifier.eval_every", "200"},
        {"classifier.patience", "10"},
        {"classifier.batch_size", "64"},
        {"classifier.train_subset", "0"},
        {"classifier.checkpoint_steps", "0,10,100,1000,10000"},

        {"inverter.layer", "FC3"},
        {"inverter.filters", "24"},
        {"inverter.blocks", "2"},
        {"inverter.kernel0", "5"},
        {"inverter.kernel", "3"},
        {"inverter.conditioning", "auto"},
        {"inverter.dropout", "0.5"},
        {"inverter.context_dropout", "0"},
        {"inverter.lr", "0.001"},
        {"inverter.max_steps", "1200"},
        {"inverter.eval_every", "200"},
        {"inverter.patience", "1000000"},
        {"inverter.batch_size", "32"},

        {"mse.layer", "FC3"},
        {"mse.filters", "16"},
        {"mse.lr", "0.001"},
        {"mse.max_steps", "600"},
        {"mse.eval_every", "100"},
        {"mse.batch_size", "32"},

        {"eval.subset", "200"},
        {"eval.n_samples", "10"},
        {"eval.pool", "256"},
        {"eval.topk", "6"},
        {"eval.bins", "30"},
        {"eval.knn_k", "3"},
        {"eval.kde_sigma2", "1"},
        {"eval.kde_holdout", "0.5"},
        {"eval.mi_n", "10000"},
        {"eval.workers", "1"},
        {"eval.layers", "CONV1,CONV2,FC3"},
    };
    return defaults;
}

struct RunConfig {
    std::map<std::string, std::string> values;

    void set(const std::string& key, const std::string& value) {
        require_usage(config_defaults().count(key) == 1, cat("unknown config key '", key, "'"));
        values[key] = value;
    }

    const std::string& str(const std::string& key) const {
        auto it = values.find(key);
        if (it != values.end()) return it->second;
        auto dit = config_defaults().find(key);
        require_usage(dit != config_defaults().end(), cat("unknown config key '", key, "'"));
        return dit->second;
    }

    std::int64_t i64(const std::string& key) const {
        try {
            return std::stoll(str(key));
        } catch (const std::exception&) {
            throw UsageError(cat("config key '", key, "' needs an integer, got '", str(key), "'"));
        }
    }

    double f64(const std::string& key) const {
        try {
            return std::stod(str(key));
        } catch (const std::exception&) {
            throw UsageError(cat("config key '", key, "' needs a number, got '", str(key), "'"));
        }
    }

    bool flag(const std::string& key) const {
        const std::string& v = str(key);
        if (v == "1" || v == "true" || v == "yes") return true;
        if (v == "0" || v == "false" || v == "no") return false;
        throw UsageError(cat("config key '", key, "' needs a boolean, got '", v, "'"));
    }

    std::vector<std::int64_t> i64_list(const std::string& key) const {
        std::vector<std::int64_t> out;
        const std::string& v = str(key);
        std::size_t pos = 0;
        while (pos < v.size()) {
            std::size_t comma = v.find(',', pos);
            if (comma == std::string::npos) comma = v.size();
            const std::string item = v.substr(pos, comma - pos);
            if (!item.empty()) {
                try {
                    out.push_back(std::stoll(item));
                } catch (const std::exception&) {
                    throw UsageError(cat("config key '", key, "' has a non-integer item '", item,
                                         "'"));
                }
            }
            pos = comma + 1;
        }
        return out;
    }

    std::vector<std::string> str_list(const std::string& key) const {
        std::vector<std::string> out;
        const std::string& v = str(key);
        std::size_t pos = 0;
        while (pos < v.size()) {
            std::size_t comma = v.find(',', pos);
            if (comma == std::string::npos) comma = v.size();
            if (comma > pos) out.push_back(v.substr(pos, comma - pos));
            pos = comma + 1;
        }
        return out;
    }

    // Full effective configuration (defaults overlaid with explicit values),
    // written next to every run's outputs.
    std::string resolved_text() const {
        std::string out;
        for (const auto& [key, def] : config_defaults()) {
            auto it = values.find(key);
            out += key + " = " + (it != values.end() ? it->second : def) + "\n";
        }
        return out;
    }
};

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::size_t pos = 0;
    std::int64_t line_no = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        require_usage(eq != std::string::npos,
                      cat("'", origin, "' line ", line_no, ": expected key = value"));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            cfg.set(key, value);
        } catch (const UsageError& e) {
            throw UsageError(cat("'", origin, "' line ", line_no, ": ", e.what()));
        }
        if (nl == text.size()) break;
    }
    return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const DataError& e) {
        throw UsageError(e.what());
    }
    return parse_config_text(text, path);
}

}  // namespace repinv
