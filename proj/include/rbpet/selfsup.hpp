#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rbpet/transport.hpp"
#include "rbpet/volume.hpp"

namespace rbpet {

struct MaskPattern {
    Dims dims;
    std::vector<std::uint8_t> masked;  // 1 = voxel removed
    double target_fraction = 0.5;
    std::uint64_t seed = 0;

    double masked_fraction() const {
        std::size_t n = 0;
        for (auto m : masked) n += (m != 0);
        return double(n) / double(masked.size());
    }
};

// Blind-spot masking: selected voxels are set to zero ("removed").
std::pair<Volume3, MaskPattern> n2v_mask(const Volume3& vol, double fraction, std::uint64_t seed);

// theta_T' = alpha * theta_T + (1 - alpha) * theta_S, elementwise
void ema_update(std::vector<double>& theta_teacher, std::span<const double> theta_student,
                double alpha = 0.99);

using VolumeModel = std::function<Volume3(const Volume3&)>;

struct PseudoLabel {
    Volume3 mean;                      // average of the M stochastic passes
    std::vector<Volume3> per_pass;
};

// M independently masked copies through the model; the pseudo-label is
// the mean of the passes. Pass m uses mask seed (seed, m).
PseudoLabel teacher_pseudo_label(const VolumeModel& model, const Volume3& x, int m_passes,
                                 std::uint64_t seed, double mask_fraction = 0.5);

// Per-voxel mean absolute deviation of the passes about their mean,
// normalized by (max deviation + eps) into [0, 1).
Volume3 teacher_uncertainty(const std::vector<Volume3>& per_pass, const Volume3& mean);

// sum_i (1-u_i)|yT_i - yS_i| / sum_i (1-u_i). Throws if the weights vanish.
double consistency_loss(const Volume3& y_teacher, const Volume3& y_student, const Volume3& u);

double mae(const Volume3& a, const Volume3& b);

struct NoiseEncoding {
    double value = 0.0;  // sin(total activity) + cos(SD of nonzero voxels)
};

NoiseEncoding noise_encoding(const Volume3& vol);

struct LossReport {
    double tsc = 0.0;
    double mae_identity = 0.0;
    double prc = 0.0;
    double idt = 0.0;
    double pkc = 0.0;
    double adv = 0.0;
    double lambda_a = 0.05;
    double lambda_b = 0.5;
    double total = 0.0;
};

using AdversarialHook = std::function<double(const Volume3&)>;

// Composite denoising objective: tsc + lambda_a * adv_hook(y_S) + MAE(x, y_S).
// The adversarial hook defaults to the constant-zero function.
LossReport denoise_loss(const Volume3& x, const Volume3& y_student, const Volume3& y_teacher,
                        const Volume3& u, double lambda_a = 0.05,
                        const AdversarialHook& adv_hook = nullptr);

// Composite range-correction objective:
//   prc = MAE(y_prc (x) H_rb, y_S), idt = MAE(y_S, y_prc),
//   pkc = MAE(model(fdg (x) H_f2rb), fdg), total = prc + lambda_b * idt + pkc
LossReport prc_losses(const Volume3& y_student, const Volume3& y_prc, const RangeKernel& h_rb,
                      const Volume3& fdg_img, const RangeKernel& h_f2rb, double lambda_b,
                      const VolumeModel& model);

std::string loss_report_jsonl(const LossReport& r, long step);

// ---------------------------------------------------------------------------
// Noise-conditioned dynamic convolution
// ---------------------------------------------------------------------------

// Multi-channel scalar field on a voxel grid, channel-major storage.
struct FeatureMap {
    int channels = 0;
    Dims dims;
    std::vector<double> data;

    FeatureMap() = default;
    FeatureMap(int c, Dims d, double fill = 0.0)
        : channels(c), dims(d), data(std::size_t(c) * d.count(), fill) {}

    std::size_t index(int c, int x, int y, int z) const {
        return (std::size_t(c) * dims.nz + z) * dims.ny * dims.nx + std::size_t(y) * dims.nx + x;
    }
    double& at(int c, int x, int y, int z) { return data[index(c, x, y, z)]; }
    double at(int c, int x, int y, int z) const { return data[index(c, x, y, z)]; }
};

FeatureMap to_feature_map(const Volume3& v);
Volume3 to_volume(const FeatureMap& f, VoxelSize voxel);

// Convolution weights for one layer: w indexed [c_out][c_in][kz][ky][kx].
struct ConvWeights {
    int k = 3;  // odd cubic kernel edge
    int c_in = 1;
    int c_out = 1;
    std::vector<double> w;
    std::vector<double> b;

    std::size_t w_index(int co, int ci, int kz, int ky, int kx) const {
        return (((std::size_t(co) * c_in + ci) * k + kz) * k + ky) * k + kx;
    }
    std::size_t w_count() const { return std::size_t(c_out) * c_in * k * k * k; }
};

// Two dense layers mapping the scalar noise encoding to `out` attention logits:
// att = sigmoid(w2 * relu(w1 * e + b1) + b2).
struct AttentionDense {
    int hidden = 0;
    int out = 0;
    std::vector<double> w1;  // hidden
    std::vector<double> b1;  // hidden
    std::vector<double> w2;  // out x hidden, row-major
    std::vector<double> b2;  // out

    std::size_t param_count() const { return std::size_t(2) * hidden + std::size_t(out) * hidden + out; }
};

struct AttentionParams {
    AttentionDense spa;  // out = k^3
    AttentionDense in;   // out = c_in
    AttentionDense out;  // out = c_out
};

struct AttentionTriple {
    std::vector<double> att_spa;  // k^3, each in (0,1)
    std::vector<double> att_in;   // c_in
    std::vector<double> att_out;  // c_out
};

AttentionTriple attention_weights(double encoding, const AttentionParams& p);

// d(attention)/d(encoding) for each of the three heads, same layout as the triple.
AttentionTriple attention_encoding_gradient(double encoding, const AttentionParams& p);

AttentionTriple unit_attention(int k, int c_in, int c_out);

// Plain multi-channel cross-correlation with reflect padding plus bias.
FeatureMap plain_conv(const FeatureMap& in, const ConvWeights& w);

// Same, with the kernel modulated voxel-wise by the mean of the three
// broadcast attention maps before convolution.
FeatureMap dynamic_conv(const FeatureMap& in, const ConvWeights& w, const AttentionTriple& att);

}  // namespace rbpet
