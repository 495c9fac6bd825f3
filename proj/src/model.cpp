#include "moeshear/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moeshear {

Activation activation_from_string(const std::string& name) {
    if (name == "silu") return Activation::SiLU;
    if (name == "relu") return Activation::ReLU;
    if (name == "gelu-tanh") return Activation::GeluTanh;
    throw ConfigError("unknown activation '" + name + "' (expected silu, relu or gelu-tanh)");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::SiLU: return "silu";
        case Activation::ReLU: return "relu";
        case Activation::GeluTanh: return "gelu-tanh";
    }
    throw ConfigError("invalid activation enum value");
}

namespace {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double gelu_tanh(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

Matrix apply_activation(Activation a, Matrix m) {
    switch (a) {
        case Activation::SiLU: return m.unaryExpr([](double v) { return silu(v); });
        case Activation::ReLU: return m.cwiseMax(0.0);
        case Activation::GeluTanh: return m.unaryExpr([](double v) { return gelu_tanh(v); });
    }
    throw ConfigError("invalid activation enum value");
}

void require_finite(const Matrix& m, const std::string& what) {
    if (!m.allFinite()) throw DataError(what + " contains non-finite entries");
}

}  // namespace

void ExpertParams::validate() const {
    if (theta1.rows() != theta3.rows() || theta1.cols() != theta3.cols())
        throw DimensionError("theta1 and theta3 must have identical shape",
                             theta1.rows(), theta1.cols(), theta3.rows(), theta3.cols());
    if (theta2.cols() != theta1.rows() || theta2.rows() != theta1.cols())
        throw DimensionError("theta2 must map d_ff back to d_model",
                             theta2.rows(), theta2.cols(), theta1.cols(), theta1.rows());
    require_finite(theta1, "theta1");
    require_finite(theta2, "theta2");
    require_finite(theta3, "theta3");
}

std::size_t MoELayer::parameter_count() const {
    std::size_t n = static_cast<std::size_t>(router.size());
    for (const auto& e : experts) n += e.parameter_count();
    return n;
}

void MoELayer::validate() const {
    if (experts.empty()) throw DataError("layer has no experts");
    if (router.rows() != num_experts())
        throw DimensionError("router row count must equal expert count",
                             router.rows(), router.cols(),
                             num_experts(), experts.front().d_model());
    const long d = experts.front().d_model();
    const long ff = experts.front().d_ff();
    for (const auto& e : experts) {
        e.validate();
        if (e.d_model() != d || e.d_ff() != ff)
            throw DimensionError("experts must share d_model and d_ff",
                                 e.d_ff(), e.d_model(), ff, d);
    }
    if (router.cols() != d)
        throw DimensionError("router column count must equal d_model",
                             router.rows(), router.cols(), num_experts(), d);
    require_finite(router, "router");
    if (top_k < 1 || top_k > num_experts())
        throw ConfigError("top_k=" + std::to_string(top_k) + " out of range for " +
                          std::to_string(num_experts()) + " experts");
    for (int p : protected_experts)
        if (p < 0 || p >= num_experts())
            throw ConfigError("protected expert index " + std::to_string(p) + " out of range");
}

std::size_t MoEModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
}

void MoEModel::validate() const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].validate();
        if (layers[i].d_model() != d_model)
            throw DimensionError("layer " + std::to_string(i) + " d_model mismatch",
                                 layers[i].d_model(), 1, d_model, 1);
    }
}

VisitCounter VisitCounter::for_model(const MoEModel& m) {
    VisitCounter c;
    c.counts.reserve(m.layers.size());
    for (const auto& l : m.layers)
        c.counts.emplace_back(l.num_experts(), 0);
    return c;
}

void VisitCounter::merge(const VisitCounter& other) {
    if (other.counts.size() != counts.size())
        throw ConfigError("cannot merge visit counters with different layer counts");
    for (std::size_t l = 0; l < counts.size(); ++l) {
        if (other.counts[l].size() != counts[l].size())
            throw ConfigError("cannot merge visit counters with different expert counts");
        for (std::size_t e = 0; e < counts[l].size(); ++e)
            counts[l][e] += other.counts[l][e];
    }
}

Matrix expert_forward(const ExpertParams& e, const Matrix& X) {
    if (X.cols() != e.d_model())
        throw DimensionError("expert_forward input width must equal d_model",
                             X.rows(), X.cols(), e.d_ff(), e.d_model());
    require_finite(X, "expert_forward input");
    Matrix gate = apply_activation(e.activation, X * e.theta1.transpose());  // s x d_ff
    Matrix up = X * e.theta3.transpose();                                    // s x d_ff
    return (gate.cwiseProduct(up)) * e.theta2.transpose();                   // s x d_model
}

std::vector<RouteChoice> route(const MoELayer& layer, const Vector& x) {
    const int n = layer.num_experts();
    if (layer.top_k > n)
        throw ConfigError("top_k=" + std::to_string(layer.top_k) +
                          " exceeds expert count " + std::to_string(n));
    if (x.size() != layer.router.cols())
        throw DimensionError("route input width must equal d_model",
                             x.size(), 1, layer.router.cols(), 1);
    if (!x.allFinite()) throw DataError("route input contains non-finite entries");

    Vector logits = layer.router * x;
    const double m = logits.maxCoeff();
    Vector probs = (logits.array() - m).exp();
    probs /= probs.sum();

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });

    std::vector<RouteChoice> out;
    out.reserve(layer.top_k);
    double sum = 0.0;
    for (int k = 0; k < layer.top_k; ++k) {
        out.push_back({order[k], probs[order[k]]});
        sum += probs[order[k]];
    }
    if (layer.renormalize_topk && sum > 0.0)
        for (auto& c : out) c.weight /= sum;
    return out;
}

Matrix layer_forward(const MoELayer& layer, const Matrix& X,
                     std::vector<std::int64_t>* counts) {
    const int n = layer.num_experts();
    if (counts && static_cast<int>(counts->size()) != n)
        throw ConfigError("visit count vector length must equal expert count");

    // Gather per-expert token lists, then run each expert once on its batch.
    std::vector<std::vector<std::pair<long, double>>> dispatch(n);
    for (long t = 0; t < X.rows(); ++t) {
        for (const auto& c : route(layer, X.row(t).transpose())) {
            dispatch[c.expert].emplace_back(t, c.weight);
            if (counts) ++(*counts)[c.expert];
        }
    }

    Matrix Y = Matrix::Zero(X.rows(), X.cols());
    for (int e = 0; e < n; ++e) {
        if (dispatch[e].empty()) continue;
        Matrix sub(static_cast<long>(dispatch[e].size()), X.cols());
        for (std::size_t i = 0; i < dispatch[e].size(); ++i)
            sub.row(static_cast<long>(i)) = X.row(dispatch[e][i].first);
        Matrix out = expert_forward(layer.experts[e], sub);
        for (std::size_t i = 0; i < dispatch[e].size(); ++i)
            Y.row(dispatch[e][i].first) += dispatch[e][i].second * out.row(static_cast<long>(i));
    }
    return Y;
}

Matrix model_forward(const MoEModel& m, Matrix X, VisitCounter* counter) {
    if (counter && counter->counts.size() != m.layers.size())
        throw ConfigError("visit counter layer count mismatch");
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        std::vector<std::int64_t>* c = counter ? &counter->counts[l] : nullptr;
        X += layer_forward(m.layers[l], X, c);
    }
    return X;
}

}  // namespace moeshear
