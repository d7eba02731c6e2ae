#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "avsync/eval.hpp"
#include "avsync/model.hpp"
#include "avsync/synthdata.hpp"
#include "avsync/training.hpp"

namespace avsync {

// TOML subset: [sections], key = value with strings, booleans, integers,
// floats and flat arrays. Comments start with '#'.
class TomlFile {
public:
    static TomlFile parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    static TomlFile parse(const std::string& text, const std::string& origin = "<string>") {
        TomlFile t;
        std::string section;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string stripped = strip_comment(line);
            const std::string trimmed = trim(stripped);
            if (trimmed.empty()) continue;
            if (trimmed.front() == '[') {
                if (trimmed.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
                section = trim(trimmed.substr(1, trimmed.size() - 2));
                continue;
            }
            const size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty() || value.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key or value");
            t.values_[section + "." + key] = value;
        }
        return t;
    }

    bool has(const std::string& section, const std::string& key) const {
        return values_.count(section + "." + key) > 0;
    }

    std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const {
        auto it = values_.find(section + "." + key);
        if (it == values_.end()) return fallback;
        std::string v = it->second;
        if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
        return v;
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        auto it = values_.find(section + "." + key);
        if (it == values_.end()) return fallback;
        if (it->second == "true") return true;
        if (it->second == "false") return false;
        throw ConfigError("config key " + section + "." + key + " is not a boolean: " + it->second);
    }

    int64_t get_int(const std::string& section, const std::string& key, int64_t fallback) const {
        auto it = values_.find(section + "." + key);
        if (it == values_.end()) return fallback;
        try {
            size_t pos = 0;
            const int64_t v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw ConfigError("config key " + section + "." + key + " is not an integer: " + it->second);
        }
    }

    double get_float(const std::string& section, const std::string& key, double fallback) const {
        auto it = values_.find(section + "." + key);
        if (it == values_.end()) return fallback;
        try {
            size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw ConfigError("config key " + section + "." + key + " is not a number: " + it->second);
        }
    }

    std::vector<int> get_int_array(const std::string& section, const std::string& key,
                                   std::vector<int> fallback) const {
        auto it = values_.find(section + "." + key);
        if (it == values_.end()) return fallback;
        const std::string& v = it->second;
        if (v.size() < 2 || v.front() != '[' || v.back() != ']')
            throw ConfigError("config key " + section + "." + key + " is not an array: " + v);
        std::vector<int> out;
        std::string inner = v.substr(1, v.size() - 2);
        std::istringstream ss(inner);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const std::string t = trim(item);
            if (t.empty()) continue;
            try {
                out.push_back(std::stoi(t));
            } catch (...) {
                throw ConfigError("config key " + section + "." + key + " has a non-integer element: " + t);
            }
        }
        return out;
    }

private:
    static std::string strip_comment(const std::string& line) {
        bool in_string = false;
        for (size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_string = !in_string;
            if (line[i] == '#' && !in_string) return line.substr(0, i);
        }
        return line;
    }

    static std::string trim(const std::string& s) {
        size_t b = s.find_first_not_of(" \t\r");
        size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

// Everything one experiment needs: model dims, data generation, curriculum and
// evaluation protocol. Every run writes the resolved form next to its outputs.
struct ExperimentConfig {
    ModelConfig model;
    GeneratorConfig generator;
    int n_train = 2000;
    int n_test = 250;
    CurriculumConfig curriculum;
    EvalOptions eval;
    uint64_t seed = 7;

    static ExperimentConfig defaults() {
        ExperimentConfig c;
        c.curriculum.lr = 1e-3;
        c.curriculum.stage1_epochs = 1;
        c.curriculum.stage2_epochs = 2;
        c.curriculum.steps_per_epoch = 250;
        c.curriculum.seed = c.seed;
        c.eval.threads = 0;
        return c;
    }

    static ExperimentConfig from_file(const std::string& path) { return from_toml(TomlFile::parse_file(path)); }

    static ExperimentConfig from_toml(const TomlFile& t) {
        ExperimentConfig c = defaults();
        // [model]
        c.model.variant = variant_from_name(t.get_string("model", "variant", variant_name(c.model.variant)));
        c.model.channels = static_cast<int>(t.get_int("model", "channels", c.model.channels));
        c.model.layers = static_cast<int>(t.get_int("model", "layers", c.model.layers));
        c.model.heads = static_cast<int>(t.get_int("model", "heads", c.model.heads));
        c.model.ffn_dim = static_cast<int>(t.get_int("model", "ffn_dim", c.model.ffn_dim));
        c.model.t_v_max = static_cast<int>(t.get_int("model", "t_v_max", c.model.t_v_max));
        c.model.steps_per_frame = static_cast<int>(t.get_int("model", "steps_per_frame", c.model.steps_per_frame));
        c.model.visual_stage_channels = t.get_int_array("model", "visual_stage_channels", c.model.visual_stage_channels);
        c.model.visual_temporal_kernel =
            static_cast<int>(t.get_int("model", "visual_temporal_kernel", c.model.visual_temporal_kernel));
        c.model.audio_mid_channels = static_cast<int>(t.get_int("model", "audio_mid_channels", c.model.audio_mid_channels));
        // [data]
        c.generator.fps = static_cast<int>(t.get_int("data", "fps", c.generator.fps));
        c.generator.sample_rate = static_cast<int>(t.get_int("data", "sample_rate", c.generator.sample_rate));
        c.generator.frame_height = static_cast<int>(t.get_int("data", "frame_height", c.generator.frame_height));
        c.generator.frame_width = static_cast<int>(t.get_int("data", "frame_width", c.generator.frame_width));
        c.generator.clip_frames = static_cast<int>(t.get_int("data", "clip_frames", c.generator.clip_frames));
        c.generator.max_offset_frames =
            static_cast<int>(t.get_int("data", "max_offset_frames", c.generator.max_offset_frames));
        c.generator.stft_window = static_cast<int>(t.get_int("data", "stft_window", c.generator.stft_window));
        c.generator.stft_hop = static_cast<int>(t.get_int("data", "stft_hop", c.generator.stft_hop));
        c.generator.visual_noise = t.get_float("data", "visual_noise", c.generator.visual_noise);
        c.generator.audio_noise = t.get_float("data", "audio_noise", c.generator.audio_noise);
        c.n_train = static_cast<int>(t.get_int("data", "n_train", c.n_train));
        c.n_test = static_cast<int>(t.get_int("data", "n_test", c.n_test));
        c.seed = static_cast<uint64_t>(t.get_int("data", "seed", static_cast<int64_t>(c.seed)));
        // [train]
        c.curriculum.stage1_epochs = static_cast<int>(t.get_int("train", "stage1_epochs", c.curriculum.stage1_epochs));
        c.curriculum.stage2_epochs = static_cast<int>(t.get_int("train", "stage2_epochs", c.curriculum.stage2_epochs));
        c.curriculum.steps_per_epoch =
            static_cast<int>(t.get_int("train", "steps_per_epoch", c.curriculum.steps_per_epoch));
        c.curriculum.batch_size = static_cast<int>(t.get_int("train", "batch_size", c.curriculum.batch_size));
        c.curriculum.lr = t.get_float("train", "lr", c.curriculum.lr);
        c.curriculum.grad_clip = t.get_float("train", "grad_clip", c.curriculum.grad_clip);
        c.curriculum.train_lengths = t.get_int_array("train", "lengths", c.curriculum.train_lengths);
        c.curriculum.mask_n_frames = static_cast<int>(t.get_int("train", "mask_frames", c.curriculum.mask_n_frames));
        c.curriculum.mask_modality =
            mask_modality_from_name(t.get_string("train", "mask_modality", mask_modality_name(c.curriculum.mask_modality)));
        // [eval]
        c.eval.grid.max = static_cast<int>(t.get_int("eval", "grid_max", c.eval.grid.max));
        c.eval.tolerance = static_cast<int>(t.get_int("eval", "tolerance", c.eval.tolerance));
        c.eval.lengths = t.get_int_array("eval", "lengths", c.eval.lengths);
        c.eval.threads = static_cast<int>(t.get_int("eval", "threads", c.eval.threads));

        // shared media geometry
        c.model.fps = c.generator.fps;
        c.model.sample_rate = c.generator.sample_rate;
        c.model.stft_window = c.generator.stft_window;
        c.model.stft_hop = c.generator.stft_hop;
        c.model.frame_height = c.generator.frame_height;
        c.model.frame_width = c.generator.frame_width;
        c.curriculum.max_offset_frames = c.generator.max_offset_frames;
        c.curriculum.seed = c.seed;
        c.validate();
        return c;
    }

    void validate() const {
        model.validate();
        generator.validate();
        eval.grid.validate();
        if (eval.grid.max > generator.max_offset_frames)
            throw ConfigError("offset grid +/-" + std::to_string(eval.grid.max) +
                              " exceeds the generated margin +/-" + std::to_string(generator.max_offset_frames));
        for (int len : eval.lengths)
            if (len + 2 * eval.grid.max > generator.clip_frames)
                throw ConfigError("evaluation length " + std::to_string(len) + " does not fit " +
                                  std::to_string(generator.clip_frames) + "-frame clips with the +/-" +
                                  std::to_string(eval.grid.max) + " grid");
        for (int len : curriculum.train_lengths)
            if (len > model.t_v_max)
                throw ConfigError("training length " + std::to_string(len) + " exceeds t_v_max " +
                                  std::to_string(model.t_v_max));
    }

    // resolved config in the same format the parser reads
    std::string to_toml() const {
        std::ostringstream out;
        out << "[model]\n";
        out << "variant = \"" << variant_name(model.variant) << "\"\n";
        out << "channels = " << model.channels << "\n";
        out << "layers = " << model.layers << "\n";
        out << "heads = " << model.heads << "\n";
        out << "ffn_dim = " << model.ffn_dim << "\n";
        out << "t_v_max = " << model.t_v_max << "\n";
        out << "steps_per_frame = " << model.steps_per_frame << "\n";
        out << "visual_stage_channels = " << int_array(model.visual_stage_channels) << "\n";
        out << "visual_temporal_kernel = " << model.visual_temporal_kernel << "\n";
        out << "audio_mid_channels = " << model.audio_mid_channels << "\n";
        out << "\n[data]\n";
        out << "fps = " << generator.fps << "\n";
        out << "sample_rate = " << generator.sample_rate << "\n";
        out << "frame_height = " << generator.frame_height << "\n";
        out << "frame_width = " << generator.frame_width << "\n";
        out << "clip_frames = " << generator.clip_frames << "\n";
        out << "max_offset_frames = " << generator.max_offset_frames << "\n";
        out << "stft_window = " << generator.stft_window << "\n";
        out << "stft_hop = " << generator.stft_hop << "\n";
        out << "visual_noise = " << generator.visual_noise << "\n";
        out << "audio_noise = " << generator.audio_noise << "\n";
        out << "n_train = " << n_train << "\n";
        out << "n_test = " << n_test << "\n";
        out << "seed = " << seed << "\n";
        out << "\n[train]\n";
        out << "stage1_epochs = " << curriculum.stage1_epochs << "\n";
        out << "stage2_epochs = " << curriculum.stage2_epochs << "\n";
        out << "steps_per_epoch = " << curriculum.steps_per_epoch << "\n";
        out << "batch_size = " << curriculum.batch_size << "\n";
        out << "lr = " << curriculum.lr << "\n";
        out << "grad_clip = " << curriculum.grad_clip << "\n";
        out << "lengths = " << int_array(curriculum.train_lengths) << "\n";
        out << "mask_frames = " << curriculum.mask_n_frames << "\n";
        out << "mask_modality = \"" << mask_modality_name(curriculum.mask_modality) << "\"\n";
        out << "\n[eval]\n";
        out << "grid_max = " << eval.grid.max << "\n";
        out << "tolerance = " << eval.tolerance << "\n";
        out << "lengths = " << int_array(eval.lengths) << "\n";
        out << "threads = " << eval.threads << "\n";
        return out.str();
    }

    std::string hash() const { return hex64(fnv1a(to_toml())); }

    void write_resolved(const std::string& dir) const {
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        std::ofstream out(dir + "/resolved_config.toml");
        if (!out) throw DataError("cannot write resolved config to " + dir);
        out << to_toml();
    }

private:
    static std::string int_array(const std::vector<int>& v) {
        std::string out = "[";
        for (size_t i = 0; i < v.size(); ++i) {
            if (i) out += ", ";
            out += std::to_string(v[i]);
        }
        return out + "]";
    }
};

}  // namespace avsync
