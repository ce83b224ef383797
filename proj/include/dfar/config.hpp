#pragma once

// Training configuration and its `key = value` text format.
//
//   # comment
//   frames = 5
//   lr = 1e-4
//   tda = true
//
// Keys are the field names below; unknown keys and malformed values are
// errors that name the line.

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace dfar {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    // Reference setting.
    int frames = 5;
    int input_size = 544;
    int batch_size = 4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double lr = 1e-4;
    int epochs = 20;
    double lambda_reg = 5.0;
    double eta_mc = 1.0;
    int tda_deform_groups = 8;
    int fr_deform_groups = 32;
    int dcaf_blocks = 4;
    int agdf_blocks = 4;
    int backbone_filters = 48;
    int feature_channels = 64;
    int baseline_filters = 320;
    int plain_convs = 8;

    // Ablation switches.
    bool tda = true;
    bool mc_loss = true;
    bool fr = true;
    bool afs = true;
    bool agdf = true;

    // Artifact conventions.
    int kernel = 3;
    double dcaf_residual_scale = 0.2;
    int attention_reduction = 4;
    int fusion_hidden = 16;
    int head_width = 64;
    double conf_thresh = 0.25;
    double eval_conf_thresh = 0.001;
    double report_conf_thresh = 0.5;
    double nms_iou = 0.5;   // matches the evaluation IoU
    int max_iters = 0;   // 0: run every epoch
    bool shuffle = true;
    unsigned long long seed = 0;

    int radius() const { return frames / 2; }
    /// Motion-compensation weight actually applied.
    double effective_eta() const { return (tda && mc_loss) ? eta_mc : 0.0; }
    /// Refinement is active only when at least one of its branches is.
    bool uses_refinement() const { return fr && (afs || agdf); }

    void validate() const {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw ConfigError(msg);
        };
        need(frames >= 1 && frames % 2 == 1, "frames must be odd and positive");
        need(input_size > 0 && input_size % 8 == 0, "input_size must be a positive multiple of 8");
        need(batch_size >= 1, "batch_size must be positive");
        need(lr > 0, "lr must be positive");
        need(epochs >= 1, "epochs must be positive");
        need(lambda_reg >= 0 && eta_mc >= 0, "loss weights must be non-negative");
        need(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1, "adam betas must lie in [0, 1)");
        need(feature_channels % tda_deform_groups == 0, "feature_channels must be divisible by tda_deform_groups");
        need((feature_channels / 2) % fr_deform_groups == 0, "half of feature_channels must be divisible by fr_deform_groups");
        need(kernel % 2 == 1, "kernel must be odd");
        need(max_iters >= 0, "max_iters must be non-negative");
    }
};

namespace detail {

struct ConfigField {
    const char* key;
    const char* help;
    bool reference;   // default taken from the reference training setting
    std::variant<int TrainConfig::*, double TrainConfig::*, bool TrainConfig::*, unsigned long long TrainConfig::*> member;
};

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        {"frames", "clip length 2R+1", true, &TrainConfig::frames},
        {"input_size", "network input side in pixels", true, &TrainConfig::input_size},
        {"batch_size", "clips per optimizer step", true, &TrainConfig::batch_size},
        {"adam_beta1", "Adam first-moment decay", true, &TrainConfig::adam_beta1},
        {"adam_beta2", "Adam second-moment decay", true, &TrainConfig::adam_beta2},
        {"adam_eps", "Adam epsilon", true, &TrainConfig::adam_eps},
        {"lr", "constant learning rate", true, &TrainConfig::lr},
        {"epochs", "passes over every (sequence, frame) pair", true, &TrainConfig::epochs},
        {"lambda_reg", "weight of the box regression loss", true, &TrainConfig::lambda_reg},
        {"eta_mc", "weight of the motion-compensation loss", true, &TrainConfig::eta_mc},
        {"tda_deform_groups", "deformable groups in temporal alignment", true, &TrainConfig::tda_deform_groups},
        {"fr_deform_groups", "deformable groups in AGDF blocks", true, &TrainConfig::fr_deform_groups},
        {"dcaf_blocks", "DCAF blocks in the offset predictor", true, &TrainConfig::dcaf_blocks},
        {"agdf_blocks", "AGDF blocks in feature refinement", true, &TrainConfig::agdf_blocks},
        {"backbone_filters", "backbone hidden filters", true, &TrainConfig::backbone_filters},
        {"feature_channels", "backbone output / fused feature channels", true, &TrainConfig::feature_channels},
        {"baseline_filters", "filters of the baseline 3x3 fusion conv", true, &TrainConfig::baseline_filters},
        {"plain_convs", "3x3 convs replacing the AGDF stack when agdf=false", true, &TrainConfig::plain_convs},
        {"tda", "temporal deformable alignment", true, &TrainConfig::tda},
        {"mc_loss", "motion-compensation loss (needs tda)", true, &TrainConfig::mc_loss},
        {"fr", "feature refinement", true, &TrainConfig::fr},
        {"afs", "attention-weighted adaptive fusion inside refinement", true, &TrainConfig::afs},
        {"agdf", "AGDF stack inside refinement", true, &TrainConfig::agdf},
        {"kernel", "deformable kernel size", false, &TrainConfig::kernel},
        {"dcaf_residual_scale", "DCAF residual scaling", false, &TrainConfig::dcaf_residual_scale},
        {"attention_reduction", "channel-attention reduction ratio", false, &TrainConfig::attention_reduction},
        {"fusion_hidden", "hidden width of the fusion-weight branch", false, &TrainConfig::fusion_hidden},
        {"head_width", "detection head width", false, &TrainConfig::head_width},
        {"conf_thresh", "inference confidence threshold", false, &TrainConfig::conf_thresh},
        {"eval_conf_thresh", "confidence floor for evaluation sweeps", false, &TrainConfig::eval_conf_thresh},
        {"report_conf_thresh", "operating point for precision/recall/F1", false, &TrainConfig::report_conf_thresh},
        {"nms_iou", "NMS IoU threshold", false, &TrainConfig::nms_iou},
        {"max_iters", "stop after this many optimizer steps (0: no cap)", false, &TrainConfig::max_iters},
        {"shuffle", "shuffle (sequence, frame) pairs every epoch", false, &TrainConfig::shuffle},
        {"seed", "random seed", false, &TrainConfig::seed},
    };
    return fields;
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace detail

/// Value of a field as config text.
inline std::string config_value(const TrainConfig& cfg, const std::string& key) {
    for (const auto& f : detail::config_fields()) {
        if (key != f.key) continue;
        return std::visit(
            [&](auto member) -> std::string {
                const auto& v = cfg.*member;
                using V = std::decay_t<decltype(v)>;
                if constexpr (std::is_same_v<V, bool>)
                    return v ? "true" : "false";
                else if constexpr (std::is_same_v<V, double>)
                    return detail::format_double(v);
                else
                    return std::to_string(v);
            },
            f.member);
    }
    throw ConfigError("unknown config key '" + key + "'");
}

/// Sets one field from text; throws ConfigError naming the key on bad input.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& text) {
    for (const auto& f : detail::config_fields()) {
        if (key != f.key) continue;
        std::visit(
            [&](auto member) {
                auto& v = cfg.*member;
                using V = std::decay_t<decltype(v)>;
                std::size_t used = 0;
                try {
                    if constexpr (std::is_same_v<V, bool>) {
                        if (text == "true" || text == "1")
                            v = true;
                        else if (text == "false" || text == "0")
                            v = false;
                        else
                            throw std::invalid_argument(text);
                        used = text.size();
                    } else if constexpr (std::is_same_v<V, double>) {
                        v = std::stod(text, &used);
                    } else if constexpr (std::is_same_v<V, int>) {
                        v = std::stoi(text, &used);
                    } else {
                        if (!text.empty() && text[0] == '-') throw std::invalid_argument(text);
                        v = std::stoull(text, &used);
                    }
                } catch (const std::logic_error&) {
                    throw ConfigError("bad value '" + text + "' for " + key);
                }
                if (used != text.size()) throw ConfigError("bad value '" + text + "' for " + key);
            },
            f.member);
        return;
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : detail::config_fields()) keys.emplace_back(f.key);
    return keys;
}

inline TrainConfig parse_config(std::istream& in, const std::string& source = "<config>") {
    TrainConfig cfg;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
        try {
            set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    return parse_config(in, path);
}

/// Every field, one `key = value` line each.
inline std::string format_config(const TrainConfig& cfg) {
    std::string out;
    for (const auto& f : detail::config_fields()) out += std::string(f.key) + " = " + config_value(cfg, f.key) + "\n";
    return out;
}

/// Field table for --help: key, default, description and origin.
inline std::string describe_config() {
    const TrainConfig defaults;
    std::string out;
    for (const auto& f : detail::config_fields()) {
        std::string line = "  " + std::string(f.key);
        line.resize(22, ' ');
        std::string value = config_value(defaults, f.key);
        value.resize(10, ' ');
        out += line + value + "  " + f.help + (f.reference ? "  [reference setting]" : "  [artifact default]") + "\n";
    }
    return out;
}

}  // namespace dfar
