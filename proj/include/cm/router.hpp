#pragma once

#include "cm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

// Query router: hashed bag-of-words (plus bigrams) features into a
// multinomial logistic regression trained with seeded mini-batch gradient
// descent. Deterministic end to end: zero initialization, seeded shuffling,
// fixed update order.

namespace cm {

struct TokenizerConfig {
    bool lowercase = true;
    bool bigrams = true;
    std::uint64_t hash_seed = 0;
    std::size_t dim = std::size_t{1} << 15;

    bool operator==(const TokenizerConfig&) const = default;
};

// Sorted (feature index, value) pairs; values are L2-normalized counts.
using SparseVec = std::vector<std::pair<std::uint32_t, float>>;

// Lowercases (ASCII), splits on Unicode whitespace, hashes each token (and
// bigram when enabled) into [0, dim) with a seeded 64-bit hash. Throws
// DataError("empty query") when no tokens survive.
SparseVec featurize(const std::string& text, const TokenizerConfig& cfg);

struct LabeledQuery {
    std::string text;
    std::string label;
};

struct RouterModel {
    TokenizerConfig tok;
    std::vector<std::string> classes; // sorted; at least 2
    Tensor2D weights;                 // [#classes, dim]
    std::vector<float> bias;          // [#classes]
};

struct TrainConfig {
    double lr = 0.1;
    std::size_t epochs = 30;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    TokenizerConfig tok;
};

// Trains on cross-entropy; classes are the sorted distinct labels. Optional
// epoch_loss receives the mean training loss after each epoch.
RouterModel train_router(const std::vector<LabeledQuery>& data, const TrainConfig& cfg,
                         std::vector<double>* epoch_loss = nullptr);

struct RouteResult {
    std::vector<double> scores; // softmax probabilities, one per class
    std::size_t chosen_index = 0;
    std::string chosen;
};

// Softmax over class logits; argmax with ties to the lowest class index.
RouteResult route(const RouterModel& model, const std::string& query);

// Single tensor file holding weights/bias plus metadata carrying the
// tokenizer config and class names.
void save_router(const RouterModel& model, const std::filesystem::path& path);
RouterModel load_router(const std::filesystem::path& path);

// JSON-lines {"text": ..., "label": ...}, one object per line.
std::vector<LabeledQuery> read_labeled_queries(const std::filesystem::path& path);

namespace router_detail {

// Featurized sample: sparse vector and class index.
using Sample = std::pair<SparseVec, std::size_t>;

// Mean cross-entropy over the samples, in double precision.
double mean_loss(const RouterModel& model, const std::vector<Sample>& samples);

// Analytic gradient of mean_loss w.r.t. weights (row-major [C, dim]) and
// bias, for the finite-difference check.
void mean_loss_grad(const RouterModel& model, const std::vector<Sample>& samples,
                    std::vector<double>& grad_w, std::vector<double>& grad_b);

} // namespace router_detail

} // namespace cm
