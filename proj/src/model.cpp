#include "fedsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fedsim/errors.hpp"

namespace fedsim {

namespace {

constexpr double kNormFloor = 1e-12;

std::vector<int> layer_dims(const BackboneSpec& spec) {
    std::vector<int> dims;
    dims.reserve(spec.hidden_dims.size() + 2);
    dims.push_back(spec.input_dim);
    for (int h : spec.hidden_dims) dims.push_back(h);
    dims.push_back(spec.feature_dim);
    return dims;
}

double activate(Activation a, double x) {
    return a == Activation::kTanh ? std::tanh(x) : std::max(0.0, x);
}

double activate_grad(Activation a, double pre, double post) {
    return a == Activation::kTanh ? 1.0 - post * post : (pre > 0.0 ? 1.0 : 0.0);
}

// Per-layer forward pass over one batch; keeps pre- and post-activation
// values so the backward pass can reuse them.
struct ForwardTrace {
    std::vector<Matrix> pre;    // one per layer, batch x out_dim
    std::vector<Matrix> post;   // activations (last layer: post == pre)
};

ForwardTrace run_forward(const BackboneSpec& spec, const ParamVec& theta, const Matrix& inputs) {
    const std::vector<int> dims = layer_dims(spec);
    const std::size_t layers = dims.size() - 1;
    ForwardTrace trace;
    trace.pre.reserve(layers);
    trace.post.reserve(layers);

    const double* p = theta.values().data();
    const Matrix* cur = &inputs;
    for (std::size_t l = 0; l < layers; ++l) {
        const int in_dim = dims[l];
        const int out_dim = dims[l + 1];
        const double* weights = p;
        const double* bias = p + static_cast<std::size_t>(out_dim) * in_dim;
        p = bias + out_dim;

        Matrix pre(cur->rows, static_cast<std::size_t>(out_dim));
        for (std::size_t r = 0; r < cur->rows; ++r) {
            const double* x = cur->row(r);
            double* y = pre.row(r);
            for (int j = 0; j < out_dim; ++j) {
                const double* wrow = weights + static_cast<std::size_t>(j) * in_dim;
                double acc = bias[j];
                for (int k = 0; k < in_dim; ++k) acc += wrow[k] * x[k];
                y[j] = acc;
            }
        }
        const bool last = l + 1 == layers;
        Matrix post = pre;
        if (!last) {
            for (double& v : post.data) v = activate(spec.activation, v);
        }
        trace.pre.push_back(std::move(pre));
        trace.post.push_back(std::move(post));
        cur = &trace.post.back();
    }
    return trace;
}

// dfeat (batch x feature_dim) -> gradient w.r.t. theta, plus nothing else;
// walks the trace backwards.
ParamVec backprop_backbone(const BackboneSpec& spec, const ParamVec& theta, const Matrix& inputs,
                           const ForwardTrace& trace, Matrix dfeat) {
    const std::vector<int> dims = layer_dims(spec);
    const std::size_t layers = dims.size() - 1;

    std::vector<double> grad(theta.size(), 0.0);
    std::vector<std::size_t> offsets(layers);
    std::size_t off = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        offsets[l] = off;
        off += static_cast<std::size_t>(dims[l + 1]) * dims[l] + dims[l + 1];
    }

    Matrix delta = std::move(dfeat);  // gradient w.r.t. layer post-activation
    for (std::size_t l = layers; l-- > 0;) {
        const int in_dim = dims[l];
        const int out_dim = dims[l + 1];
        const bool last = l + 1 == layers;
        const Matrix& layer_in = (l == 0) ? inputs : trace.post[l - 1];

        if (!last) {
            for (std::size_t r = 0; r < delta.rows; ++r) {
                for (int j = 0; j < out_dim; ++j) {
                    delta.at(r, j) *= activate_grad(spec.activation, trace.pre[l].at(r, j),
                                                    trace.post[l].at(r, j));
                }
            }
        }

        double* wgrad = grad.data() + offsets[l];
        double* bgrad = wgrad + static_cast<std::size_t>(out_dim) * in_dim;
        const double* weights = theta.values().data() + offsets[l];

        Matrix next(delta.rows, static_cast<std::size_t>(in_dim));
        for (std::size_t r = 0; r < delta.rows; ++r) {
            const double* x = layer_in.row(r);
            const double* d = delta.row(r);
            double* nd = next.row(r);
            for (int j = 0; j < out_dim; ++j) {
                const double dj = d[j];
                double* wrow = wgrad + static_cast<std::size_t>(j) * in_dim;
                const double* w = weights + static_cast<std::size_t>(j) * in_dim;
                for (int k = 0; k < in_dim; ++k) {
                    wrow[k] += dj * x[k];
                    nd[k] += dj * w[k];
                }
                bgrad[j] += dj;
            }
        }
        delta = std::move(next);
    }
    for (double v : grad) {
        if (!std::isfinite(v)) throw DivergenceError("loss_and_grads: non-finite backbone gradient");
    }
    return ParamVec::from_values(std::move(grad));
}

double log_sum_exp(const std::vector<double>& logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    double acc = 0.0;
    for (double v : logits) acc += std::exp(v - m);
    return m + std::log(acc);
}

void check_batch(const BackboneSpec& b_spec, const HeadSpec& h_spec, const Batch& batch) {
    if (batch.size() == 0) throw std::invalid_argument("loss_and_grads: empty batch");
    if (batch.inputs.rows != batch.size())
        throw std::invalid_argument("loss_and_grads: inputs/labels row mismatch");
    if (batch.inputs.cols != static_cast<std::size_t>(b_spec.input_dim))
        throw std::invalid_argument("loss_and_grads: input width mismatch");
    for (int label : batch.labels) {
        if (label < 0 || label >= h_spec.num_classes)
            throw std::invalid_argument("loss_and_grads: label out of range");
    }
}

}  // namespace

std::size_t BackboneSpec::param_count() const {
    const std::vector<int> dims = layer_dims(*this);
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        n += static_cast<std::size_t>(dims[l + 1]) * dims[l] + dims[l + 1];
    }
    return n;
}

void BackboneSpec::validate() const {
    if (input_dim < 1) throw std::invalid_argument("BackboneSpec: input_dim must be positive");
    if (feature_dim < 1) throw std::invalid_argument("BackboneSpec: feature_dim must be positive");
    for (int h : hidden_dims) {
        if (h < 1) throw std::invalid_argument("BackboneSpec: hidden dims must be positive");
    }
}

std::size_t HeadSpec::param_count() const {
    return static_cast<std::size_t>(feature_dim) * num_classes;
}

void HeadSpec::validate() const {
    if (feature_dim < 1) throw std::invalid_argument("HeadSpec: feature_dim must be positive");
    if (num_classes < 1) throw std::invalid_argument("HeadSpec: num_classes must be positive");
    if (scale_s <= 0.0) throw std::invalid_argument("HeadSpec: scale_s must be positive");
    if (margin_m < 0.0 || margin_m >= 1.0)
        throw std::invalid_argument("HeadSpec: margin_m must be in [0, 1)");
}

Matrix forward_features(const BackboneSpec& spec, const ParamVec& theta, const Matrix& inputs) {
    if (theta.size() != spec.param_count())
        throw std::invalid_argument("forward_features: theta length mismatch");
    if (inputs.cols != static_cast<std::size_t>(spec.input_dim))
        throw std::invalid_argument("forward_features: input width mismatch");
    ForwardTrace trace = run_forward(spec, theta, inputs);
    return std::move(trace.post.back());
}

LossGrads loss_and_grads(const BackboneSpec& b_spec, const HeadSpec& h_spec, const ParamVec& theta,
                         const ParamVec& omega, const Batch& batch) {
    if (theta.size() != b_spec.param_count())
        throw std::invalid_argument("loss_and_grads: theta length mismatch");
    if (omega.size() != h_spec.param_count())
        throw std::invalid_argument("loss_and_grads: omega length mismatch");
    if (b_spec.feature_dim != h_spec.feature_dim)
        throw std::invalid_argument("loss_and_grads: feature_dim mismatch");
    check_batch(b_spec, h_spec, batch);

    const std::size_t batch_size = batch.size();
    const int feat_dim = b_spec.feature_dim;
    const int classes = h_spec.num_classes;
    const double inv_b = 1.0 / static_cast<double>(batch_size);

    ForwardTrace trace = run_forward(b_spec, theta, batch.inputs);
    const Matrix& features = trace.post.back();

    std::vector<double> head_grad(omega.size(), 0.0);
    Matrix dfeat(batch_size, static_cast<std::size_t>(feat_dim));
    double loss = 0.0;

    const double* w = omega.values().data();

    if (h_spec.loss == HeadLoss::kSoftmaxCe) {
        std::vector<double> logits(classes);
        for (std::size_t r = 0; r < batch_size; ++r) {
            const double* x = features.row(r);
            for (int c = 0; c < classes; ++c) {
                const double* wc = w + static_cast<std::size_t>(c) * feat_dim;
                double acc = 0.0;
                for (int k = 0; k < feat_dim; ++k) acc += wc[k] * x[k];
                logits[c] = acc;
            }
            const int y = batch.labels[r];
            const double lse = log_sum_exp(logits);
            loss += (lse - logits[y]) * inv_b;

            double* dx = dfeat.row(r);
            for (int c = 0; c < classes; ++c) {
                const double p = std::exp(logits[c] - lse);
                const double dlogit = (p - (c == y ? 1.0 : 0.0)) * inv_b;
                const double* wc = w + static_cast<std::size_t>(c) * feat_dim;
                double* gc = head_grad.data() + static_cast<std::size_t>(c) * feat_dim;
                for (int k = 0; k < feat_dim; ++k) {
                    gc[k] += dlogit * x[k];
                    dx[k] += dlogit * wc[k];
                }
            }
        }
    } else {
        // Cosine-margin head over L2-normalized embeddings and class vectors.
        std::vector<double> wnorm(classes);
        for (int c = 0; c < classes; ++c) {
            const double* wc = w + static_cast<std::size_t>(c) * feat_dim;
            double acc = 0.0;
            for (int k = 0; k < feat_dim; ++k) acc += wc[k] * wc[k];
            wnorm[c] = std::max(std::sqrt(acc), kNormFloor);
        }

        std::vector<double> logits(classes);
        std::vector<double> cosines(classes);
        std::vector<double> xhat(feat_dim);
        std::vector<double> dxhat(feat_dim);
        for (std::size_t r = 0; r < batch_size; ++r) {
            const double* x = features.row(r);
            double xacc = 0.0;
            for (int k = 0; k < feat_dim; ++k) xacc += x[k] * x[k];
            const double xn = std::max(std::sqrt(xacc), kNormFloor);
            for (int k = 0; k < feat_dim; ++k) xhat[k] = x[k] / xn;

            const int y = batch.labels[r];
            for (int c = 0; c < classes; ++c) {
                const double* wc = w + static_cast<std::size_t>(c) * feat_dim;
                double acc = 0.0;
                for (int k = 0; k < feat_dim; ++k) acc += wc[k] * xhat[k];
                cosines[c] = acc / wnorm[c];
                logits[c] = h_spec.scale_s * (cosines[c] - (c == y ? h_spec.margin_m : 0.0));
            }
            const double lse = log_sum_exp(logits);
            loss += (lse - logits[y]) * inv_b;

            std::fill(dxhat.begin(), dxhat.end(), 0.0);
            for (int c = 0; c < classes; ++c) {
                const double p = std::exp(logits[c] - lse);
                const double dcos = h_spec.scale_s * (p - (c == y ? 1.0 : 0.0)) * inv_b;
                const double* wc = w + static_cast<std::size_t>(c) * feat_dim;
                double* gc = head_grad.data() + static_cast<std::size_t>(c) * feat_dim;
                // d cos/d w_c = (xhat - cos * w_c/|w_c|) / |w_c|
                for (int k = 0; k < feat_dim; ++k) {
                    const double what = wc[k] / wnorm[c];
                    gc[k] += dcos * (xhat[k] - cosines[c] * what) / wnorm[c];
                    dxhat[k] += dcos * what;
                }
            }
            // Through the embedding normalization: (I - xhat xhat^T)/|x|.
            double dot = 0.0;
            for (int k = 0; k < feat_dim; ++k) dot += dxhat[k] * xhat[k];
            double* dx = dfeat.row(r);
            for (int k = 0; k < feat_dim; ++k) dx[k] = (dxhat[k] - dot * xhat[k]) / xn;
        }
    }

    if (!std::isfinite(loss)) throw DivergenceError("loss_and_grads: non-finite loss");
    for (double v : head_grad) {
        if (!std::isfinite(v)) throw DivergenceError("loss_and_grads: non-finite head gradient");
    }

    LossGrads out;
    out.loss = loss;
    out.head_grad = ParamVec::from_values(std::move(head_grad));
    out.backbone_grad = backprop_backbone(b_spec, theta, batch.inputs, trace, std::move(dfeat));
    return out;
}

namespace {

double fd_max_rel_error(const BackboneSpec& b_spec, const HeadSpec& h_spec, const ParamVec& theta,
                        const ParamVec& omega, const Batch& batch, double fd_step,
                        const ParamVec& analytic_g, const ParamVec& analytic_h) {
    auto loss_at = [&](const ParamVec& t, const ParamVec& o) {
        return loss_and_grads(b_spec, h_spec, t, o, batch).loss;
    };
    auto rel_error = [](double analytic, double fd) {
        const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-8});
        return std::abs(analytic - fd) / denom;
    };

    double worst = 0.0;
    std::vector<double> t = theta.values();
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double saved = t[i];
        t[i] = saved + fd_step;
        const double up = loss_at(ParamVec::from_values(t), omega);
        t[i] = saved - fd_step;
        const double down = loss_at(ParamVec::from_values(t), omega);
        t[i] = saved;
        worst = std::max(worst, rel_error(analytic_g[i], (up - down) / (2.0 * fd_step)));
    }
    std::vector<double> o = omega.values();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double saved = o[i];
        o[i] = saved + fd_step;
        const double up = loss_at(theta, ParamVec::from_values(o));
        o[i] = saved - fd_step;
        const double down = loss_at(theta, ParamVec::from_values(o));
        o[i] = saved;
        worst = std::max(worst, rel_error(analytic_h[i], (up - down) / (2.0 * fd_step)));
    }
    return worst;
}

}  // namespace

double gradient_check(const BackboneSpec& b_spec, const HeadSpec& h_spec, const ParamVec& theta,
                      const ParamVec& omega, const Batch& batch, double fd_step) {
    if (fd_step <= 0.0) throw std::invalid_argument("gradient_check: fd_step must be positive");
    const LossGrads lg = loss_and_grads(b_spec, h_spec, theta, omega, batch);
    return fd_max_rel_error(b_spec, h_spec, theta, omega, batch, fd_step, lg.backbone_grad,
                            lg.head_grad);
}

double gradient_check_against(const BackboneSpec& b_spec, const HeadSpec& h_spec,
                              const ParamVec& theta, const ParamVec& omega, const Batch& batch,
                              double fd_step, const ParamVec& analytic_g,
                              const ParamVec& analytic_h) {
    if (fd_step <= 0.0) throw std::invalid_argument("gradient_check: fd_step must be positive");
    return fd_max_rel_error(b_spec, h_spec, theta, omega, batch, fd_step, analytic_g, analytic_h);
}

ParamVec init_backbone(const BackboneSpec& spec, Rng& rng) {
    const std::vector<int> dims = layer_dims(spec);
    std::vector<double> values;
    values.reserve(spec.param_count());
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const double stddev = 1.0 / std::sqrt(static_cast<double>(dims[l]));
        const std::size_t weights = static_cast<std::size_t>(dims[l + 1]) * dims[l];
        for (std::size_t i = 0; i < weights; ++i) values.push_back(rng.normal(0.0, stddev));
        for (int i = 0; i < dims[l + 1]; ++i) values.push_back(0.0);
    }
    return ParamVec::from_values(std::move(values));
}

ParamVec init_head(const HeadSpec& spec, Rng& rng) {
    std::vector<double> values(spec.param_count());
    for (double& v : values) v = rng.normal(0.0, 0.01);
    return ParamVec::from_values(std::move(values));
}

const char* to_string(Activation a) {
    return a == Activation::kTanh ? "tanh" : "relu";
}

const char* to_string(HeadLoss l) {
    return l == HeadLoss::kSoftmaxCe ? "softmax_ce" : "cosine_margin";
}

}  // namespace fedsim
