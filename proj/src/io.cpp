#include "moeshear/io.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace moeshear {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "container writer assumes a little-endian host");

constexpr char kMagic[8] = {'M', 'O', 'E', 'S', 'H', 'E', 'A', 'R'};
constexpr std::uint64_t kAlign = 64;

std::uint64_t align_up(std::uint64_t x) { return (x + kAlign - 1) & ~(kAlign - 1); }

// Round through float32 so in-memory values are exactly representable in the
// container payload.
inline double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

struct TensorRef {
    std::string name;
    const Matrix* mat;
};

void append_f32_row_major(std::string& out, const Matrix& m) {
    for (long r = 0; r < m.rows(); ++r)
        for (long c = 0; c < m.cols(); ++c) {
            float f = static_cast<float>(m(r, c));
            char buf[4];
            std::memcpy(buf, &f, 4);
            out.append(buf, 4);
        }
}

std::string serialize_container(const json& header_fields, const std::vector<TensorRef>& tensors) {
    json tensor_dir = json::object();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        const std::uint64_t bytes = static_cast<std::uint64_t>(t.mat->size()) * 4;
        tensor_dir[t.name] = {{"dtype", "F32"},
                              {"shape", {t.mat->rows(), t.mat->cols()}},
                              {"offset", offset}};
        offset = align_up(offset + bytes);
    }
    json header = header_fields;
    header["tensors"] = tensor_dir;
    const std::string header_text = header.dump();

    std::string out;
    out.append(kMagic, 8);
    std::uint64_t hlen = header_text.size();
    char lenbuf[8];
    std::memcpy(lenbuf, &hlen, 8);
    out.append(lenbuf, 8);
    out += header_text;
    out.resize(align_up(out.size()), '\0');

    const std::size_t payload_start = out.size();
    for (const auto& t : tensors) {
        const std::uint64_t off = tensor_dir[t.name]["offset"].get<std::uint64_t>();
        out.resize(payload_start + off, '\0');
        append_f32_row_major(out, *t.mat);
    }
    return out;
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing '" + path + "'");
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct ParsedContainer {
    json header;
    std::string_view payload;
};

struct TensorInfo {
    std::string name;
    long rows = 0, cols = 0;
    std::uint64_t offset = 0;
};

ParsedContainer parse_container(const std::string& bytes) {
    if (bytes.size() < 16) throw DataError("container truncated before header length");
    if (std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw DataError("bad container magic (expected MOESHEAR)");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    if (16 + hlen > bytes.size()) throw DataError("container truncated inside header");
    json header;
    try {
        header = json::parse(bytes.substr(16, hlen));
    } catch (const json::exception& e) {
        throw DataError(std::string("container header is not valid JSON: ") + e.what());
    }
    const std::size_t payload_start = align_up(16 + hlen);
    if (payload_start > bytes.size()) throw DataError("container truncated before payload");
    return {std::move(header), std::string_view(bytes).substr(payload_start)};
}

std::vector<TensorInfo> validated_tensor_infos(const json& header, std::size_t payload_size) {
    if (!header.contains("tensors") || !header["tensors"].is_object())
        throw DataError("container header lacks a tensor directory");
    std::vector<TensorInfo> infos;
    for (const auto& [name, meta] : header["tensors"].items()) {
        if (!meta.contains("dtype") || meta["dtype"] != "F32")
            throw DataError("unknown dtype for tensor '" + name + "' (only F32 supported)");
        const auto shape = meta.at("shape");
        if (!shape.is_array() || shape.size() != 2)
            throw DataError("tensor '" + name + "' has a non-2D shape");
        TensorInfo info;
        info.name = name;
        info.rows = shape[0].get<long>();
        info.cols = shape[1].get<long>();
        info.offset = meta.at("offset").get<std::uint64_t>();
        if (info.rows < 0 || info.cols < 0)
            throw DataError("tensor '" + name + "' has a negative dimension");
        if (info.offset % kAlign != 0)
            throw DataError("tensor '" + name + "' offset is not 64-byte aligned");
        infos.push_back(std::move(info));
    }
    std::sort(infos.begin(), infos.end(),
              [](const TensorInfo& a, const TensorInfo& b) { return a.offset < b.offset; });
    std::uint64_t prev_end = 0;
    for (const auto& info : infos) {
        const std::uint64_t bytes = static_cast<std::uint64_t>(info.rows) * info.cols * 4;
        if (info.offset < prev_end)
            throw DataError("tensor '" + info.name + "' overlaps the preceding tensor");
        if (info.offset + bytes > payload_size)
            throw DataError("truncated payload: tensor '" + info.name + "' extends past end of file");
        prev_end = info.offset + bytes;
    }
    return infos;
}

Matrix read_tensor(std::string_view payload, const TensorInfo& info) {
    Matrix m(info.rows, info.cols);
    const char* src = payload.data() + info.offset;
    for (long r = 0; r < info.rows; ++r)
        for (long c = 0; c < info.cols; ++c) {
            float f;
            std::memcpy(&f, src, 4);
            src += 4;
            m(r, c) = static_cast<double>(f);
        }
    if (!m.allFinite())
        throw DataError("tensor '" + info.name + "' contains non-finite entries");
    return m;
}

std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

}  // namespace

void save_model(const MoEModel& m, const std::string& path) {
    m.validate();
    if (m.layers.empty()) throw ConfigError("cannot save a model with zero layers");
    const int n = m.layers.front().num_experts();
    const long d_ff = m.layers.front().d_ff();
    const int k = m.layers.front().top_k;
    const bool renorm = m.layers.front().renormalize_topk;
    const Activation act = m.layers.front().experts.front().activation;
    json protected_json = json::array();
    for (const auto& layer : m.layers) {
        if (layer.num_experts() != n || layer.d_ff() != d_ff || layer.top_k != k ||
            layer.renormalize_topk != renorm)
            throw ConfigError("container requires uniform N, d_ff, K and renormalize_topk across layers");
        for (const auto& e : layer.experts)
            if (e.activation != act)
                throw ConfigError("container requires a uniform activation across experts");
        protected_json.push_back(std::vector<int>(layer.protected_experts.begin(),
                                                  layer.protected_experts.end()));
    }

    json header = {{"kind", "model"},
                   {"d_model", m.d_model},
                   {"d_ff", d_ff},
                   {"N", n},
                   {"K", k},
                   {"L", m.layers.size()},
                   {"activation", to_string(act)},
                   {"renormalize_topk", renorm},
                   {"protected", protected_json},
                   {"metadata", m.metadata}};

    std::vector<TensorRef> tensors;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        tensors.push_back({layer_prefix(l) + "router", &m.layers[l].router});
        for (int e = 0; e < n; ++e) {
            const std::string p = layer_prefix(l) + "experts." + std::to_string(e) + ".";
            tensors.push_back({p + "theta1", &m.layers[l].experts[e].theta1});
            tensors.push_back({p + "theta2", &m.layers[l].experts[e].theta2});
            tensors.push_back({p + "theta3", &m.layers[l].experts[e].theta3});
        }
    }
    write_file(path, serialize_container(header, tensors));
}

MoEModel load_model(const std::string& path) {
    const std::string bytes = read_file(path);
    ParsedContainer pc = parse_container(bytes);
    const json& h = pc.header;
    if (h.value("kind", "model") != "model")
        throw DataError("container at '" + path + "' does not hold a model");

    MoEModel m;
    int n, k;
    long d_ff;
    std::size_t layer_count;
    try {
        m.d_model = h.at("d_model").get<long>();
        d_ff = h.at("d_ff").get<long>();
        n = h.at("N").get<int>();
        k = h.at("K").get<int>();
        layer_count = h.at("L").get<std::size_t>();
    } catch (const json::exception& e) {
        throw DataError(std::string("model header missing required fields: ") + e.what());
    }
    const Activation act = activation_from_string(h.value("activation", "silu"));
    const bool renorm = h.value("renormalize_topk", false);
    if (h.contains("metadata"))
        for (const auto& [key, val] : h["metadata"].items())
            m.metadata[key] = val.get<std::string>();

    auto infos = validated_tensor_infos(h, pc.payload.size());
    std::map<std::string, const TensorInfo*> by_name;
    for (const auto& info : infos) by_name[info.name] = &info;
    auto fetch = [&](const std::string& name, long rows, long cols) -> Matrix {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("missing tensor '" + name + "'");
        if (it->second->rows != rows || it->second->cols != cols)
            throw DimensionError("tensor '" + name + "' shape mismatch",
                                 it->second->rows, it->second->cols, rows, cols);
        return read_tensor(pc.payload, *it->second);
    };

    for (std::size_t l = 0; l < layer_count; ++l) {
        MoELayer layer;
        layer.top_k = k;
        layer.renormalize_topk = renorm;
        layer.router = fetch(layer_prefix(l) + "router", n, m.d_model);
        for (int e = 0; e < n; ++e) {
            const std::string p = layer_prefix(l) + "experts." + std::to_string(e) + ".";
            ExpertParams ep;
            ep.activation = act;
            ep.theta1 = fetch(p + "theta1", d_ff, m.d_model);
            ep.theta2 = fetch(p + "theta2", m.d_model, d_ff);
            ep.theta3 = fetch(p + "theta3", d_ff, m.d_model);
            layer.experts.push_back(std::move(ep));
        }
        if (h.contains("protected") && l < h["protected"].size())
            for (const auto& idx : h["protected"][l])
                layer.protected_experts.insert(idx.get<int>());
        m.layers.push_back(std::move(layer));
    }
    const std::size_t expected = 1 + layer_count * (1 + 3 * static_cast<std::size_t>(n)) - 1;
    if (infos.size() != expected)
        throw DataError("container holds " + std::to_string(infos.size()) +
                        " tensors, expected " + std::to_string(expected));
    m.validate();
    return m;
}

void save_embeddings(const Matrix& embeddings, const std::string& path) {
    if (!embeddings.allFinite()) throw DataError("embeddings contain non-finite entries");
    json header = {{"kind", "embeddings"},
                   {"d_model", embeddings.cols()},
                   {"d_ff", 0},
                   {"N", 0},
                   {"K", 0},
                   {"L", 0},
                   {"activation", "silu"},
                   {"metadata", json::object()}};
    write_file(path, serialize_container(header, {{"embeddings", &embeddings}}));
}

Matrix load_embeddings(const std::string& path) {
    const std::string bytes = read_file(path);
    ParsedContainer pc = parse_container(bytes);
    if (pc.header.value("kind", "") != "embeddings")
        throw DataError("container at '" + path + "' does not hold embeddings");
    auto infos = validated_tensor_infos(pc.header, pc.payload.size());
    for (const auto& info : infos)
        if (info.name == "embeddings") return read_tensor(pc.payload, info);
    throw DataError("missing tensor 'embeddings'");
}

std::vector<CalibrationBatch> load_calibration(const std::string& path,
                                               long s_per_batch, int n_batches,
                                               std::uint64_t seed) {
    if (s_per_batch < 2)
        throw ConfigError("calibration batches need at least 2 rows, requested " +
                          std::to_string(s_per_batch));
    if (n_batches < 1) throw ConfigError("n_batches must be positive");
    Matrix all = load_embeddings(path);
    const long needed = s_per_batch * n_batches;
    if (needed > all.rows())
        throw DataError("requested " + std::to_string(needed) + " rows but '" + path +
                        "' holds only " + std::to_string(all.rows()));

    std::vector<long> idx(all.rows());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);

    std::vector<CalibrationBatch> batches;
    for (int b = 0; b < n_batches; ++b) {
        CalibrationBatch batch;
        batch.embeddings.resize(s_per_batch, all.cols());
        for (long r = 0; r < s_per_batch; ++r)
            batch.embeddings.row(r) = all.row(idx[b * s_per_batch + r]);
        batch.source_id = path + ":" + std::to_string(b);
        batches.push_back(std::move(batch));
    }
    return batches;
}

void SyntheticSpec::validate() const {
    if (num_experts < 1) throw ConfigError("synthetic spec needs at least one expert");
    if (d_model < 1 || d_ff < 1) throw ConfigError("synthetic spec needs positive d_model and d_ff");
    if (num_layers < 1) throw ConfigError("synthetic spec needs at least one layer");
    if (top_k < 1 || top_k > num_experts)
        throw ConfigError("synthetic spec top_k out of range");
    if (noise_sigma < 0) throw ConfigError("noise_sigma must be non-negative");
    std::vector<bool> seen(num_experts, false);
    for (const auto& g : duplicate_groups) {
        if (g.empty()) throw ConfigError("duplicate groups must be non-empty");
        for (int i : g) {
            if (i < 0 || i >= num_experts)
                throw ConfigError("duplicate group index " + std::to_string(i) + " out of range");
            if (seen[i])
                throw ConfigError("duplicate group index " + std::to_string(i) + " repeated");
            seen[i] = true;
        }
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
        throw ConfigError("duplicate groups must cover every expert index");
}

MoEModel generate_synthetic(const SyntheticSpec& spec) {
    SyntheticSpec s = spec;
    if (s.duplicate_groups.empty())
        for (int i = 0; i < s.num_experts; ++i) s.duplicate_groups.push_back({i});
    s.validate();

    std::mt19937_64 rng(s.seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    auto fill = [&](Matrix& m, double sd) {
        for (long r = 0; r < m.rows(); ++r)
            for (long c = 0; c < m.cols(); ++c) m(r, c) = quantize(sd * unit(rng));
    };
    auto add_noise = [&](Matrix& m, double sd) {
        if (sd == 0.0) return;
        for (long r = 0; r < m.rows(); ++r)
            for (long c = 0; c < m.cols(); ++c) m(r, c) = quantize(m(r, c) + sd * unit(rng));
    };

    const double sd_in = 1.0 / std::sqrt(static_cast<double>(s.d_model));
    const double sd_down = 1.0 / std::sqrt(static_cast<double>(s.d_ff));

    MoEModel model;
    model.d_model = s.d_model;
    model.metadata["generator"] = "synthetic";
    model.metadata["seed"] = std::to_string(s.seed);
    for (int l = 0; l < s.num_layers; ++l) {
        MoELayer layer;
        layer.top_k = s.top_k;
        layer.renormalize_topk = s.renormalize_topk;
        layer.experts.resize(s.num_experts);
        layer.router.resize(s.num_experts, s.d_model);
        for (const auto& group : s.duplicate_groups) {
            ExpertParams base;
            base.activation = s.activation;
            base.theta1.resize(s.d_ff, s.d_model);
            base.theta2.resize(s.d_model, s.d_ff);
            base.theta3.resize(s.d_ff, s.d_model);
            fill(base.theta1, sd_in);
            fill(base.theta2, sd_down);
            fill(base.theta3, sd_in);
            Matrix base_row(1, s.d_model);
            fill(base_row, s.router_scale);
            for (std::size_t j = 0; j < group.size(); ++j) {
                ExpertParams e = base;
                Matrix row = base_row;
                if (j > 0) {
                    add_noise(e.theta1, s.noise_sigma);
                    add_noise(e.theta2, s.noise_sigma);
                    add_noise(e.theta3, s.noise_sigma);
                    add_noise(row, s.noise_sigma);
                }
                layer.experts[group[j]] = std::move(e);
                layer.router.row(group[j]) = row.row(0);
            }
        }
        model.layers.push_back(std::move(layer));
    }
    model.validate();
    return model;
}

SyntheticSpec synthetic_spec_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw DataError(std::string("synthetic spec is not valid JSON: ") + e.what());
    }
    SyntheticSpec s;
    try {
        s.num_experts = j.at("N").get<int>();
        s.d_model = j.at("d_model").get<long>();
        s.d_ff = j.at("d_ff").get<long>();
        s.num_layers = j.value("L", 1);
        s.top_k = j.value("K", 1);
        if (j.contains("duplicate_groups"))
            s.duplicate_groups = j["duplicate_groups"].get<std::vector<std::vector<int>>>();
        s.noise_sigma = j.value("noise_sigma", 0.0);
        s.seed = j.value("seed", std::uint64_t{0});
        s.router_scale = j.value("router_scale", 1.0);
        s.renormalize_topk = j.value("renormalize_topk", false);
        s.activation = activation_from_string(j.value("activation", "silu"));
    } catch (const json::exception& e) {
        throw DataError(std::string("synthetic spec field error: ") + e.what());
    }
    return s;
}

std::string synthetic_spec_to_json(const SyntheticSpec& spec) {
    json j = {{"N", spec.num_experts},
              {"d_model", spec.d_model},
              {"d_ff", spec.d_ff},
              {"L", spec.num_layers},
              {"K", spec.top_k},
              {"duplicate_groups", spec.duplicate_groups},
              {"noise_sigma", spec.noise_sigma},
              {"seed", spec.seed},
              {"router_scale", spec.router_scale},
              {"renormalize_topk", spec.renormalize_topk},
              {"activation", to_string(spec.activation)}};
    return j.dump(2);
}

void write_matrix_csv(const Matrix& m, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    char buf[48];
    for (long r = 0; r < m.rows(); ++r) {
        for (long c = 0; c < m.cols(); ++c) {
            std::snprintf(buf, sizeof(buf), "%.9g", m(r, c));
            if (c) f << ',';
            f << buf;
        }
        f << '\n';
    }
    if (!f) throw DataError("failed writing '" + path + "'");
}

Matrix read_matrix_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path + "' for reading");
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw DataError("'" + path + "' holds a non-numeric cell: " + cell);
            }
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw DataError("'" + path + "' is not rectangular");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw DataError("'" + path + "' holds no data");
    Matrix m(static_cast<long>(rows.size()), static_cast<long>(rows.front().size()));
    for (long r = 0; r < m.rows(); ++r)
        for (long c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c];
    return m;
}

}  // namespace moeshear
