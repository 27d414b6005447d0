#include "grait/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <fmt/core.h>
#include <json.hpp>

namespace grait {

using json = nlohmann::json;

namespace {

void fnv1a(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
}

template <class M>
void hash_matrix(std::uint64_t& h, const M& m) {
    const std::int64_t dims[2] = {m.rows(), m.cols()};
    fnv1a(h, dims, sizeof(dims));
    fnv1a(h, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

void check_features(const ModelState& model, const Eigen::Ref<const Vec>& x) {
    if (x.size() != model.arch.n_features)
        throw ShapeError(fmt::format("expected {} features, got {}", model.arch.n_features, x.size()));
}

json matrix_to_json(const Mat& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

Mat matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols, const char* name) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
        throw ShapeError(fmt::format("checkpoint field {}: expected {} rows", name, rows));
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& row = j[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw ShapeError(fmt::format("checkpoint field {}: row {} expected {} cols", name, i, cols));
        for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

} // namespace

Vec ModelState::hidden_of(const Eigen::Ref<const Vec>& x) const {
    return (base_in * x + base_bias).array().tanh().matrix();
}

std::uint64_t ModelState::base_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const int dims[4] = {arch.n_features, arch.hidden, arch.n_answers, arch.rank};
    fnv1a(h, dims, sizeof(dims));
    hash_matrix(h, base_in);
    hash_matrix(h, base_bias);
    hash_matrix(h, base_out);
    return h;
}

std::uint64_t ModelState::checksum() const {
    std::uint64_t h = base_checksum();
    hash_matrix(h, adapter_a);
    hash_matrix(h, adapter_b);
    return h;
}

Vec ModelState::adapter_params() const {
    Vec flat(static_cast<Eigen::Index>(arch.adapter_size()));
    const auto na = adapter_a.size();
    flat.head(na) = Eigen::Map<const Vec>(adapter_a.data(), na);
    flat.tail(adapter_b.size()) = Eigen::Map<const Vec>(adapter_b.data(), adapter_b.size());
    return flat;
}

void ModelState::set_adapter_params(const Eigen::Ref<const Vec>& flat) {
    if (flat.size() != static_cast<Eigen::Index>(arch.adapter_size()))
        throw ShapeError(fmt::format("adapter vector has {} entries, expected {}", flat.size(),
                                     arch.adapter_size()));
    const auto na = adapter_a.size();
    Eigen::Map<Vec>(adapter_a.data(), na) = flat.head(na);
    Eigen::Map<Vec>(adapter_b.data(), adapter_b.size()) = flat.tail(adapter_b.size());
}

bool ModelState::operator==(const ModelState& o) const {
    auto same = [](const auto& a, const auto& b) {
        return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
    };
    return arch == o.arch && same(base_in, o.base_in) && same(base_bias, o.base_bias) &&
           same(base_out, o.base_out) && same(adapter_a, o.adapter_a) && same(adapter_b, o.adapter_b);
}

void Hyper::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

ModelState init_model(const Arch& arch, double adapter_init_scale, std::uint64_t seed) {
    if (arch.n_features < 1 || arch.hidden < 1 || arch.n_answers < 2 || arch.rank < 1)
        throw ConfigError("invalid architecture");
    ModelState m;
    m.arch = arch;
    Rng rng(stream_seed(seed, Stream::pretrain_init));
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(arch.n_features));
    const double out_scale = 1.0 / std::sqrt(static_cast<double>(arch.hidden));
    m.base_in.resize(arch.hidden, arch.n_features);
    for (auto& x : m.base_in.reshaped()) x = in_scale * rng.normal();
    m.base_bias.resize(arch.hidden);
    for (auto& x : m.base_bias) x = rng.normal();
    m.base_out.resize(arch.n_classes(), arch.hidden);
    for (auto& x : m.base_out.reshaped()) x = out_scale * rng.normal();

    Rng arng(stream_seed(seed, Stream::adapter_init));
    m.adapter_a.resize(arch.rank, arch.hidden);
    for (auto& x : m.adapter_a.reshaped()) x = adapter_init_scale * arng.normal();
    m.adapter_b = Mat::Zero(arch.n_classes(), arch.rank);
    return m;
}

Vec softmax(const Eigen::Ref<const Vec>& z) {
    const double mx = z.maxCoeff();
    Vec e = (z.array() - mx).exp().matrix();
    return e / e.sum();
}

int argmax(const Eigen::Ref<const Vec>& v) {
    int best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
        if (v(i) > v(best)) best = static_cast<int>(i);
    return best;
}

Vec logits(const ModelState& model, const Eigen::Ref<const Vec>& features) {
    check_features(model, features);
    const Vec h = model.hidden_of(features);
    return model.base_out * h + model.adapter_b * (model.adapter_a * h);
}

Vec forward(const ModelState& model, const Eigen::Ref<const Vec>& features) {
    return softmax(logits(model, features));
}

Vec answer_distribution(const ModelState& model, const Eigen::Ref<const Vec>& features) {
    const Vec z = logits(model, features);
    return softmax(z.head(model.arch.n_answers));
}

namespace {

// -log softmax(z)[t]. When z_t is the largest logit the log1p form keeps
// full relative precision for near-zero losses.
double cross_entropy(const Vec& z, int t) {
    const double mx = z.maxCoeff();
    if (z(t) == mx) {
        double rest = 0.0;
        for (Eigen::Index k = 0; k < z.size(); ++k)
            if (k != t) rest += std::exp(z(k) - mx);
        return std::log1p(rest);
    }
    return mx + std::log((z.array() - mx).exp().sum()) - z(t);
}

} // namespace

double loss(const ModelState& model, const Eigen::Ref<const Vec>& features, int target) {
    if (target < 0 || target >= model.arch.n_classes())
        throw ShapeError(fmt::format("target {} outside [0, {})", target, model.arch.n_classes()));
    return cross_entropy(logits(model, features), target);
}

LossGrad loss_and_grad(const ModelState& model, const Eigen::Ref<const Vec>& features, int target) {
    if (target < 0 || target >= model.arch.n_classes())
        throw ShapeError(fmt::format("target {} outside [0, {})", target, model.arch.n_classes()));
    check_features(model, features);
    const Vec h = model.hidden_of(features);
    const Vec ah = model.adapter_a * h;
    const Vec z = model.base_out * h + model.adapter_b * ah;
    const double mx = z.maxCoeff();
    const Vec e = (z.array() - mx).exp().matrix();
    const double s = e.sum();

    LossGrad out;
    out.loss = cross_entropy(z, target);
    Vec delta = e / s;
    delta(target) -= 1.0;

    const auto& arch = model.arch;
    out.grad.resize(static_cast<Eigen::Index>(arch.adapter_size()));
    const auto na = static_cast<Eigen::Index>(arch.rank) * arch.hidden;
    // dL/dA = B^T delta h^T ; dL/dB = delta (A h)^T
    const Vec bt_delta = model.adapter_b.transpose() * delta;
    Eigen::Map<Mat>(out.grad.data(), arch.rank, arch.hidden) = bt_delta * h.transpose();
    Eigen::Map<Mat>(out.grad.data() + na, arch.n_classes(), arch.rank) = delta * ah.transpose();
    return out;
}

int sample_from(const Eigen::Ref<const Vec>& probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (Eigen::Index k = 0; k < probs.size(); ++k) {
        acc += probs(k);
        if (u < acc) return static_cast<int>(k);
    }
    // u landed in the rounding slack above the cumulative sum
    for (Eigen::Index k = probs.size() - 1; k >= 0; --k)
        if (probs(k) > 0.0) return static_cast<int>(k);
    return 0;
}

int sample_answer(const ModelState& model, const Eigen::Ref<const Vec>& features, Rng& rng) {
    return sample_from(forward(model, features), rng);
}

ModelState sgd_step(const ModelState& model, const Eigen::Ref<const Vec>& grad, double lr) {
    if (grad.size() != static_cast<Eigen::Index>(model.arch.adapter_size()))
        throw ShapeError(fmt::format("gradient has {} entries, expected {}", grad.size(),
                                     model.arch.adapter_size()));
    if (!grad.allFinite()) throw NumericError("non-finite gradient entry");
    ModelState next = model;
    if (lr == 0.0) return next;
    next.set_adapter_params(model.adapter_params() - lr * grad);
    return next;
}

PretrainResult pretrain_base(std::span<const QaSample> train, const Arch& arch,
                             const PretrainConfig& config, std::uint64_t seed) {
    if (train.empty()) throw ConfigError("pretraining corpus is empty");
    PretrainResult result;
    result.model = init_model(arch, config.adapter_init_scale, seed);
    ModelState& m = result.model;

    std::vector<const QaSample*> known;
    std::vector<const QaSample*> unknown;
    for (const auto& q : train) (q.latent_known ? known : unknown).push_back(&q);

    auto accuracy = [&](const std::vector<const QaSample*>& set) {
        if (set.empty()) return 0.0;
        std::size_t hit = 0;
        for (const auto* q : set) hit += argmax(answer_distribution(m, q->features)) == q->gold;
        return static_cast<double>(hit) / static_cast<double>(set.size());
    };

    if (config.epochs > 0 && known.empty())
        throw ConfigError("pretraining needs at least one latent-known training sample");

    Mat v_in = Mat::Zero(m.base_in.rows(), m.base_in.cols());
    Vec v_bias = Vec::Zero(m.base_bias.size());
    Mat v_out = Mat::Zero(m.base_out.rows(), m.base_out.cols());
    Rng order_rng(stream_seed(seed, Stream::pretrain_order));
    std::vector<std::size_t> order(known.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng.engine());
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            Mat g_in = Mat::Zero(m.base_in.rows(), m.base_in.cols());
            Vec g_bias = Vec::Zero(m.base_bias.size());
            Mat g_out = Mat::Zero(m.base_out.rows(), m.base_out.cols());
            for (std::size_t i = start; i < end; ++i) {
                const QaSample& q = *known[order[i]];
                const Vec h = m.hidden_of(q.features);
                Vec delta = softmax(m.base_out * h);
                delta(q.gold) -= 1.0;
                g_out += delta * h.transpose();
                const Vec dpre = ((m.base_out.transpose() * delta).array() * (1.0 - h.array().square())).matrix();
                g_in += dpre * q.features.transpose();
                g_bias += dpre;
            }
            const double scale = 1.0 / static_cast<double>(end - start);
            v_in = config.momentum * v_in - config.lr * scale * g_in;
            v_bias = config.momentum * v_bias - config.lr * scale * g_bias;
            v_out = config.momentum * v_out - config.lr * scale * g_out;
            m.base_in += v_in;
            m.base_bias += v_bias;
            m.base_out += v_out;
        }
        result.epochs_run = epoch + 1;
    }

    result.known_accuracy = accuracy(known);
    result.unknown_accuracy = accuracy(unknown);
    if (!m.base_in.allFinite() || !m.base_out.allFinite() || !m.base_bias.allFinite())
        throw NumericError("pretraining diverged to non-finite weights");
    if (config.epochs > 0 && result.known_accuracy < config.target_known_accuracy)
        throw NumericError(fmt::format(
            "pretraining did not converge after {} epochs: known accuracy {:.4f} < target {:.4f}"
            " (unknown accuracy {:.4f})",
            result.epochs_run, result.known_accuracy, config.target_known_accuracy,
            result.unknown_accuracy));
    const double chance_ceiling = 1.0 / arch.n_answers + 0.15;
    if (config.epochs > 0 && !unknown.empty() && result.unknown_accuracy > chance_ceiling)
        throw NumericError(fmt::format("pretrained base answers unknown samples above chance: {:.4f} > {:.4f}",
                                       result.unknown_accuracy, chance_ceiling));
    return result;
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
    json j;
    j["arch"] = {{"n_features", model.arch.n_features},
                 {"hidden", model.arch.hidden},
                 {"n_answers", model.arch.n_answers},
                 {"rank", model.arch.rank}};
    j["base_in"] = matrix_to_json(model.base_in);
    j["base_bias"] = std::vector<double>(model.base_bias.begin(), model.base_bias.end());
    j["base_out"] = matrix_to_json(model.base_out);
    j["adapter_a"] = matrix_to_json(model.adapter_a);
    j["adapter_b"] = matrix_to_json(model.adapter_b);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << j.dump() << '\n';
}

ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(e.what(), 1);
    }
    ModelState m;
    const auto& a = j.at("arch");
    m.arch.n_features = a.at("n_features").get<int>();
    m.arch.hidden = a.at("hidden").get<int>();
    m.arch.n_answers = a.at("n_answers").get<int>();
    m.arch.rank = a.at("rank").get<int>();
    const auto& ar = m.arch;
    m.base_in = matrix_from_json(j.at("base_in"), ar.hidden, ar.n_features, "base_in");
    const auto bias = j.at("base_bias").get<std::vector<double>>();
    if (static_cast<int>(bias.size()) != ar.hidden) throw ShapeError("checkpoint field base_bias");
    m.base_bias = Eigen::Map<const Vec>(bias.data(), ar.hidden);
    m.base_out = matrix_from_json(j.at("base_out"), ar.n_classes(), ar.hidden, "base_out");
    m.adapter_a = matrix_from_json(j.at("adapter_a"), ar.rank, ar.hidden, "adapter_a");
    m.adapter_b = matrix_from_json(j.at("adapter_b"), ar.n_classes(), ar.rank, "adapter_b");
    return m;
}

} // namespace grait
