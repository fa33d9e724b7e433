#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rbpet/selfsup.hpp"
#include "rbpet/transport.hpp"
#include "rbpet/volume.hpp"

namespace rbpet {

// One convolutional layer. Dynamic layers modulate their kernel with the
// noise-conditioned attention triple; plain layers ignore the encoding.
struct Layer {
    bool dynamic = false;
    bool relu_after = false;
    ConvWeights conv;
    AttentionParams att;  // used only when dynamic
};

struct Network {
    std::vector<Layer> layers;

    std::size_t param_count() const;
    std::vector<double> params() const;
    void set_params(std::span<const double> p);
};

// 3 dynamic-conv layers (1 -> 8 -> 8 -> 1, kernel 3, ReLU between),
// initialized near the identity map.
Network make_denoiser(std::uint64_t seed);

// 5 plain conv layers (1 -> 8 -> 8 -> 8 -> 8 -> 1, kernel 3, ReLU between).
// Without a kernel the stack starts near the identity map. With one, each
// layer starts as a 3^3 spectral factor of the regularized kernel inverse
// W = H/(H^2 + lambda), so the stack begins as a Wiener-style deconvolver
// that training then refines; a delta kernel reduces this to the identity
// init.
Network make_prc_model(std::uint64_t seed, const RangeKernel* kernel = nullptr,
                       double wiener_lambda = 0.003);

struct ForwardCache {
    double encoding = 0.0;
    std::vector<FeatureMap> inputs;   // input fed to each layer
    std::vector<FeatureMap> pre_act;  // conv output before the optional ReLU
    std::vector<AttentionTriple> atts;
};

FeatureMap net_forward(const Network& net, const FeatureMap& in, double encoding,
                       ForwardCache* cache = nullptr);

// Backpropagates grad_out; adds parameter gradients into grad_params
// (size param_count()) and returns the gradient with respect to the input.
FeatureMap net_backward(const Network& net, const ForwardCache& cache, const FeatureMap& grad_out,
                        std::vector<double>& grad_params);

// Single-channel convenience wrapper; computes the noise encoding internally.
Volume3 apply_model(const Network& net, const Volume3& vol);

struct TrainConfig {
    int epochs = 200;  // one optimization step (one patch) per epoch
    Dims patch{32, 32, 8};
    double learning_rate = 1e-3;
    double lr_decay = 0.0;  // step t uses learning_rate / (1 + lr_decay * t)
    double lr_gamma = 1.0;  // additional multiplicative decay: * lr_gamma^t
    bool record_trajectory = false;
    double lambda_a = 0.05;
    double lambda_b = 0.5;
    double alpha = 0.99;  // teacher EMA
    int m_passes = 4;     // stochastic teacher passes
    std::uint64_t seed = 0;
    std::string stage = "denoise";  // denoise | prc | joint
};

struct ModelState {
    Network student;
    Network teacher;  // EMA copy; meaningful for the denoiser only
    long step = 0;
    std::uint64_t seed = 0;
    std::vector<LossReport> log;
    // student parameters after each step, kept only when
    // TrainConfig::record_trajectory is set (EMA replay verification)
    std::vector<std::vector<double>> student_trajectory;
};

ModelState train_denoiser(const DynamicSeries& series, const TrainConfig& cfg);

ModelState train_prc(const std::vector<Volume3>& static_imgs, const RangeKernel& h_rb,
                     const RangeKernel& h_f2rb, const std::vector<Volume3>& fdg_like,
                     const TrainConfig& cfg);

// End-to-end fine-tuning: gradients of the composite objective flow through
// the range-correction model into the denoiser. Updates both states in place.
void train_joint(ModelState& denoiser, ModelState& prc, const DynamicSeries& series,
                 const RangeKernel& h_rb, const RangeKernel& h_f2rb,
                 const std::vector<Volume3>& fdg_like, const TrainConfig& cfg);

// Per frame: noise encoding -> denoiser -> range-correction model.
DynamicSeries apply_pipeline(const DynamicSeries& series, const ModelState& denoiser,
                             const ModelState& prc);

// Checkpoint: JSON header + raw little-endian float32 parameter payload.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

// Reflect-padded convolution of a volume with a range kernel and its exact
// adjoint, used by the training objectives so analytic gradients match.
Volume3 conv_kernel_reflect(const Volume3& v, const RangeKernel& k);
Volume3 conv_kernel_reflect_adjoint(const Volume3& g, const RangeKernel& k);

}  // namespace rbpet
