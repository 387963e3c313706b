#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spectdiff/denoiser.hpp"
#include "spectdiff/diffusion.hpp"
#include "spectdiff/types.hpp"

namespace spectdiff {

/// Depth weights for 2.5D conditioning: w(i,j) = 1 - |i-j|/n_z, in (0,1],
/// with w(i,i) = 1.
std::vector<double> depth_weights(int slice_index, int n_z);

/// Fixed sinusoidal encoding (half sines, half cosines, log-spaced
/// frequencies down to 1/max_period).
std::vector<double> sinusoid_encoding(double value, int dim, double max_period);

/// Small conditional eps-predictor: three 3x3 conv layers with SiLU, the
/// whole anatomy volume entering as depth-weighted channels, and a
/// (timestep + slice-number) embedding injected after the first conv as a
/// per-channel scale and shift. Two output channels: eps_hat and the
/// variance coefficient v squashed to [0,1] by a sigmoid.
class TinyEpsNet {
public:
    TinyEpsNet() = default;
    TinyEpsNet(int n_z, int channels = 16, int emb_dim = 32, int emb_hidden = 32);

    int n_z() const { return n_z_; }
    int channels() const { return channels_; }
    int emb_dim() const { return emb_dim_; }
    size_t n_params() const { return params_.size(); }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    uint64_t train_step() const { return train_step_; }
    void set_train_step(uint64_t s) { train_step_ = s; }

    void init_params(uint64_t seed);

    /// Embedding for (t, slice i): sinusoid(t) + sinusoid(i) through two
    /// linear maps with SiLU between. Returns 2*channels values
    /// (scale, shift).
    std::vector<double> slice_embedding(int t, int slice_index) const;

    /// cond holds n_z channels of nx*ny values, already depth-weighted.
    /// Internally the network predicts the clean slice through a gated
    /// bypass head and converts to the eps parameterization with the
    /// schedule's abar_t, which keeps its outputs at image scale for all t.
    void forward(std::span<const double> x_t, std::span<const double> cond, int nx, int ny,
                 int t, int slice_index, const NoiseSchedule& sched, std::span<double> eps_out,
                 std::span<double> v_out) const;

    /// Loss for one sample; accumulates parameter gradients into grad
    /// (same length as params). Returns the scalar loss.
    double training_loss_and_grad(std::span<const double> x0, std::span<const double> cond,
                                  int nx, int ny, int t, int slice_index,
                                  std::span<const double> eps, const NoiseSchedule& sched,
                                  double lambda_vlb, std::span<double> grad) const;

    /// g_in = (d eps_hat/d x_t)^T g_out for one slice.
    void eps_input_vjp(std::span<const double> x_t, std::span<const double> cond, int nx, int ny,
                       int t, int slice_index, const NoiseSchedule& sched,
                       std::span<const double> g_out, std::span<double> g_in) const;

    // Checkpoint: magic "SPNN", u64 train step, u32 tensor count, per tensor
    // (u32 name length, name, u32 ndim, u32 dims[]), then f32 payloads.
    void save(const std::string& path) const;
    static TinyEpsNet load(const std::string& path);

private:
    struct Trace;
    void forward_impl(std::span<const double> x_t, std::span<const double> cond, int nx, int ny,
                      int t, int slice_index, const NoiseSchedule& sched, Trace& tr) const;
    void backward_impl(const Trace& tr, int nx, int ny, std::span<const double> d_eps,
                       std::span<const double> d_vraw, std::span<double> grad,
                       std::span<double> d_input_x) const;

    int n_z_ = 0;
    int channels_ = 0;
    int emb_dim_ = 0;
    int emb_hidden_ = 0;
    uint64_t train_step_ = 0;
    std::vector<double> params_;

    // Flat parameter layout offsets.
    struct Layout {
        size_t lin1_w, lin1_b, lin2_w, lin2_b;
        size_t conv1_w, conv1_b, conv2_w, conv2_b, conv2b_w, conv2b_b, conv3_w, conv3_b;
        size_t total;
    };
    Layout layout_;
    void compute_layout();
};

struct TrainingSample {
    const ImageVolume* x0;
    const ImageVolume* anatomy;
};

struct TrainConfig {
    int steps = 2000;
    int batch = 4;
    double lr = 1e-3;
    double momentum = 0.9;
    double lambda_vlb = 1e-3;
    double grad_clip = 5.0;  // max L2 norm of the batch gradient; <= 0 disables
    uint64_t seed = 0;
    int threads = 1;
};

struct TrainResult {
    std::vector<std::pair<uint64_t, double>> loss_curve;  // (step, batch loss)
};

/// Plain SGD with momentum over uniformly sampled (volume, slice, t, eps)
/// tuples. Training touches only fully-sampled volumes and anatomy.
/// Deterministic given the seed; aborts if the loss exceeds 1e3x its
/// starting value.
TrainResult train(TinyEpsNet& net, std::span<const TrainingSample> data,
                  const NoiseSchedule& sched, const TrainConfig& cfg);

void write_loss_csv(const std::string& path, const TrainResult& result);

/// DenoiserModel adapter binding a trained net to one anatomy volume, with
/// depth-weighted condition channels precomputed per slice.
class NetDenoiser final : public DenoiserModel {
public:
    NetDenoiser(const TinyEpsNet& net, const ImageVolume& anatomy, const NoiseSchedule& sched);

    void eval(std::span<const double> x_t, int t, int slice_index, std::span<double> eps_out,
              std::span<double> v_out) const override;
    bool has_input_grad() const override { return true; }
    void eps_vjp(std::span<const double> x_t, int t, int slice_index,
                 std::span<const double> g_out, std::span<double> g_in) const override;

private:
    const TinyEpsNet& net_;
    const NoiseSchedule& sched_;
    int nx_, ny_, n_z_;
    std::vector<std::vector<double>> cond_;  // per target slice
};

/// Depth-weighted condition stack for one target slice.
std::vector<double> make_condition_stack(const ImageVolume& anatomy, int slice_index);

}  // namespace spectdiff
