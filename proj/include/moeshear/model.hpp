#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "moeshear/errors.hpp"

namespace moeshear {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { SiLU, ReLU, GeluTanh };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

/// One gated FFN expert: gate projection theta1 (d_ff x d_model),
/// down projection theta2 (d_model x d_ff), up projection theta3 (d_ff x d_model).
struct ExpertParams {
    Matrix theta1;
    Matrix theta2;
    Matrix theta3;
    Activation activation = Activation::SiLU;

    long d_model() const { return theta1.cols(); }
    long d_ff() const { return theta1.rows(); }
    std::size_t parameter_count() const {
        return static_cast<std::size_t>(theta1.size() + theta2.size() + theta3.size());
    }
    void validate() const;
};

struct MoELayer {
    std::vector<ExpertParams> experts;
    Matrix router;  // N x d_model, one row per expert
    int top_k = 1;
    bool renormalize_topk = false;
    std::set<int> protected_experts;  // exempt from pruning (shared experts)

    int num_experts() const { return static_cast<int>(experts.size()); }
    long d_model() const { return experts.empty() ? router.cols() : experts.front().d_model(); }
    long d_ff() const { return experts.empty() ? 0 : experts.front().d_ff(); }
    std::size_t parameter_count() const;
    void validate() const;
};

struct MoEModel {
    std::vector<MoELayer> layers;
    long d_model = 0;
    std::map<std::string, std::string> metadata;

    std::size_t parameter_count() const;
    void validate() const;
};

/// Per-layer counts of how often each expert appeared in a token's top-K.
struct VisitCounter {
    std::vector<std::vector<std::int64_t>> counts;

    static VisitCounter for_model(const MoEModel& m);
    void merge(const VisitCounter& other);
};

struct RouteChoice {
    int expert;
    double weight;
};

/// f(x; theta) = theta2 (sigma(theta1 x) * theta3 x), applied row-wise to X (s x d_model).
Matrix expert_forward(const ExpertParams& e, const Matrix& X);

/// Softmax over all router logits, then the K largest entries sorted by
/// descending weight; ties go to the lower expert index. Weights are
/// renormalized to sum to 1 when the layer's renormalize_topk flag is set.
std::vector<RouteChoice> route(const MoELayer& layer, const Vector& x);

/// Weighted top-K mixture per token. `counts`, when given, receives one
/// increment per selected expert per token.
Matrix layer_forward(const MoELayer& layer, const Matrix& X,
                     std::vector<std::int64_t>* counts = nullptr);

/// Residual stack: X <- X + layer_forward(layer, X) for each layer in order.
Matrix model_forward(const MoEModel& m, Matrix X, VisitCounter* counter = nullptr);

}  // namespace moeshear
