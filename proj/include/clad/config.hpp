#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "clad/errors.hpp"
#include "clad/hash.hpp"

namespace clad {

// All hyperparameters of a run. Serialized as flat JSON with exactly these
// field names; flags override file values and defaults apply last.
struct Config {
    int embed_dim = 32;
    int image_size = 64;
    int channels = 1;
    std::vector<std::string> vocab = {"<unk>",   "uniform", "stripes",
                                      "texture", "no",      "defects"};
    int token_dim = 16;
    double alpha = 0.2;   // positive-pair margin (Eq. 3 alpha)
    double beta = 1.0;    // negative-pair margin
    double sigma = 1.0;   // score scaling
    double lambda = 0.1;  // reconstruction weight
    double lr = 1e-3;
    int batch_size = 8;
    int epochs_pretrain = 20;
    int epochs_finetune = 30;
    uint64_t seed = 42;

    void validate() const {
        if (embed_dim <= 0) throw UsageError("config: embed_dim must be positive");
        if (image_size <= 0 || image_size % 8 != 0)
            throw UsageError("config: image_size must be a positive multiple of 8");
        if (channels != 1 && channels != 3)
            throw UsageError("config: channels must be 1 or 3");
        if (token_dim <= 0) throw UsageError("config: token_dim must be positive");
        if (alpha < 0) throw UsageError("config: alpha must be non-negative");
        if (!(beta > alpha))
            throw UsageError("config: beta must exceed alpha");
        if (!(sigma > 0)) throw UsageError("config: sigma must be positive");
        if (lambda < 0) throw UsageError("config: lambda must be non-negative");
        if (!(lr > 0)) throw UsageError("config: lr must be positive");
        if (batch_size <= 0) throw UsageError("config: batch_size must be positive");
        if (epochs_pretrain < 0 || epochs_finetune < 0)
            throw UsageError("config: epoch counts must be non-negative");
        if (vocab.empty()) throw UsageError("config: vocab must be nonempty");
        std::set<std::string> seen(vocab.begin(), vocab.end());
        if (seen.size() != vocab.size())
            throw UsageError("config: vocab contains duplicate tokens");
    }
};

inline nlohmann::ordered_json config_to_json(const Config& c) {
    nlohmann::ordered_json j;
    j["embed_dim"] = c.embed_dim;
    j["image_size"] = c.image_size;
    j["channels"] = c.channels;
    j["vocab"] = c.vocab;
    j["token_dim"] = c.token_dim;
    j["alpha"] = c.alpha;
    j["beta"] = c.beta;
    j["sigma"] = c.sigma;
    j["lambda"] = c.lambda;
    j["lr"] = c.lr;
    j["batch_size"] = c.batch_size;
    j["epochs_pretrain"] = c.epochs_pretrain;
    j["epochs_finetune"] = c.epochs_finetune;
    j["seed"] = c.seed;
    return j;
}

// Applies fields present in `j` on top of `base`; unknown keys are rejected.
inline Config config_from_json(const nlohmann::json& j, Config base = {}) {
    static const std::set<std::string> known = {
        "embed_dim",  "image_size", "channels",        "vocab",
        "token_dim",  "alpha",      "beta",            "sigma",
        "lambda",     "lr",         "batch_size",      "epochs_pretrain",
        "epochs_finetune", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key()))
            throw UsageError("config: unknown field \"" + it.key() + "\"");
    }
    Config c = base;
    if (j.contains("embed_dim")) c.embed_dim = j["embed_dim"].get<int>();
    if (j.contains("image_size")) c.image_size = j["image_size"].get<int>();
    if (j.contains("channels")) c.channels = j["channels"].get<int>();
    if (j.contains("vocab"))
        c.vocab = j["vocab"].get<std::vector<std::string>>();
    if (j.contains("token_dim")) c.token_dim = j["token_dim"].get<int>();
    if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
    if (j.contains("beta")) c.beta = j["beta"].get<double>();
    if (j.contains("sigma")) c.sigma = j["sigma"].get<double>();
    if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("epochs_pretrain"))
        c.epochs_pretrain = j["epochs_pretrain"].get<int>();
    if (j.contains("epochs_finetune"))
        c.epochs_finetune = j["epochs_finetune"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    return c;
}

inline Config load_config(const std::string& path, Config base = {}) {
    std::ifstream in(path);
    if (!in) throw IntegrityError("config file not readable: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config file " + path + ": " + e.what());
    }
    return config_from_json(j, base);
}

// Stable hash of the canonical JSON form, reported in every EvalReport.
inline std::string config_hash(const Config& c) {
    return hex64(fnv1a64(config_to_json(c).dump()));
}

}  // namespace clad
