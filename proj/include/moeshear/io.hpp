#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moeshear/model.hpp"

namespace moeshear {

struct CalibrationBatch {
    Matrix embeddings;  // s x d_model, s >= 2
    std::string source_id;
};

/// Recipe for a toy model with planted groups of near-duplicate experts.
/// Within a group, member 0 carries the base weights and base router row;
/// the others add i.i.d. Gaussian noise of scale noise_sigma per entry.
/// router_scale sets the magnitude of the base router rows: large values
/// make routing decisive, which is what redundancy-preserving merges need.
struct SyntheticSpec {
    int num_experts = 0;
    long d_model = 0;
    long d_ff = 0;
    int num_layers = 1;
    int top_k = 1;
    std::vector<std::vector<int>> duplicate_groups;  // disjoint cover of 0..N-1
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    double router_scale = 1.0;
    bool renormalize_topk = false;
    Activation activation = Activation::SiLU;

    void validate() const;
};

// Container format (bit-exact):
//   8-byte magic "MOESHEAR" | u64 LE header length | UTF-8 JSON header |
//   zero padding to the next 64-byte file offset | payload.
// The header's tensor directory maps name -> {dtype, shape, offset}, with
// offsets relative to the payload start, 64-byte aligned, non-overlapping.
// Payload tensors are contiguous little-endian float32, row-major.

void save_model(const MoEModel& m, const std::string& path);
MoEModel load_model(const std::string& path);

/// Embedding files reuse the container with a single "embeddings" tensor.
void save_embeddings(const Matrix& embeddings, const std::string& path);
Matrix load_embeddings(const std::string& path);

/// Seeded sampling without replacement of rows into n_batches batches of
/// s_per_batch rows each.
std::vector<CalibrationBatch> load_calibration(const std::string& path,
                                               long s_per_batch, int n_batches,
                                               std::uint64_t seed);

MoEModel generate_synthetic(const SyntheticSpec& spec);

SyntheticSpec synthetic_spec_from_json(const std::string& json_text);
std::string synthetic_spec_to_json(const SyntheticSpec& spec);

/// CSV helpers shared by the CLI surfaces (9 significant digits).
void write_matrix_csv(const Matrix& m, const std::string& path);
Matrix read_matrix_csv(const std::string& path);

}  // namespace moeshear
