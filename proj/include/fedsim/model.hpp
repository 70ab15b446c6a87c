#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fedsim/params.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// Row-major dense matrix; rows are samples.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }
    double* row(std::size_t r) { return data.data() + r * cols; }
};

enum class Activation { kTanh, kRelu };

// Shared feature extractor: an MLP mapping input_dim -> hidden_dims... ->
// feature_dim. Hidden layers carry the activation; the final projection is
// linear. Parameters are laid out layer-major, each layer as a row-major
// (out x in) weight matrix followed by its bias vector, so checkpoints are
// portable across implementations.
struct BackboneSpec {
    int input_dim = 16;
    std::vector<int> hidden_dims = {32};
    int feature_dim = 16;
    Activation activation = Activation::kTanh;

    std::size_t param_count() const;
    void validate() const;
};

enum class HeadLoss { kSoftmaxCe, kCosineMargin };

// Per-party classifier head. Bias-free linear layout: omega holds a row-major
// (num_classes x feature_dim) matrix. softmax_ce consumes raw features; the
// cosine_margin head L2-normalizes embeddings and class vectors, subtracts
// margin_m from the target-class cosine and scales by scale_s.
struct HeadSpec {
    int feature_dim = 16;
    int num_classes = 2;
    HeadLoss loss = HeadLoss::kSoftmaxCe;
    double scale_s = 64.0;
    double margin_m = 0.35;

    std::size_t param_count() const;
    void validate() const;
};

struct Batch {
    Matrix inputs;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

struct LossGrads {
    double loss = 0.0;
    ParamVec backbone_grad;
    ParamVec head_grad;
};

// Batch embedding pass. Throws on dimension mismatch.
Matrix forward_features(const BackboneSpec& spec, const ParamVec& theta, const Matrix& inputs);

// Mean cross-entropy loss over the batch together with the analytic gradients
// for backbone and head. Pure; throws DivergenceError on a non-finite loss.
LossGrads loss_and_grads(const BackboneSpec& b_spec, const HeadSpec& h_spec, const ParamVec& theta,
                         const ParamVec& omega, const Batch& batch);

// Max relative error between the analytic gradients and central finite
// differences at the given step.
double gradient_check(const BackboneSpec& b_spec, const HeadSpec& h_spec, const ParamVec& theta,
                      const ParamVec& omega, const Batch& batch, double fd_step);

// Same check against caller-supplied "analytic" gradients; lets a harness
// verify that a deliberately perturbed gradient is flagged.
double gradient_check_against(const BackboneSpec& b_spec, const HeadSpec& h_spec,
                              const ParamVec& theta, const ParamVec& omega, const Batch& batch,
                              double fd_step, const ParamVec& analytic_g, const ParamVec& analytic_h);

// Seeded initializers. Backbone weights ~ N(0, 1/fan_in), biases zero; head
// entries ~ N(0, 0.01^2).
ParamVec init_backbone(const BackboneSpec& spec, Rng& rng);
ParamVec init_head(const HeadSpec& spec, Rng& rng);

const char* to_string(Activation a);
const char* to_string(HeadLoss l);

}  // namespace fedsim
