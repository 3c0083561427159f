#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "unwarp/image.hpp"
#include "unwarp/model.hpp"
#include "unwarp/optim.hpp"
#include "unwarp/synth.hpp"

namespace unwarp {

struct TrainOptions {
    int steps = 500;
    int batch = 4;
    double lr_max = 1e-4;
    double warmup_frac = 0.1;
    double weight_decay = 1e-2;
    std::uint64_t seed = 1;
    int checkpoint_every = 0;  // 0: only at the end
    int stop_after = 0;        // >0: pause after that many steps (schedule still spans `steps`)
    std::string checkpoint_path;
    std::string loss_log_path;
    bool augment = true;
    double jitter_h = 0.03, jitter_s = 0.08, jitter_v = 0.08;
};

struct LoadedSample {
    ImageRaster image;
    WarpFlow flow;
};

inline std::vector<LoadedSample> load_samples(const std::string& dataset_dir,
                                              const std::vector<SampleRecord>& records) {
    namespace fs = std::filesystem;
    std::vector<LoadedSample> out;
    out.reserve(records.size());
    for (const auto& rec : records) {
        LoadedSample s;
        s.image = read_ppm((fs::path(dataset_dir) / rec.image_file).string());
        s.flow = read_wfl((fs::path(dataset_dir) / rec.flow_file).string());
        out.push_back(std::move(s));
    }
    return out;
}

template <typename T>
struct TrainResult {
    Checkpoint checkpoint;
    ParamStore<T> params;
    std::vector<double> loss_trace;
    std::vector<double> lr_trace;
};

// Mean flow L1 of the model against a sample set, without augmentation.
template <typename T>
double eval_flow_l1(const ParamStore<T>& params, const ModelConfig& cfg,
                    const std::vector<LoadedSample>& samples) {
    double acc = 0;
    for (const auto& s : samples) {
        WarpFlow pred = predict_flow(params, cfg, s.image);
        acc += flow_l1(pred, s.flow);
    }
    return samples.empty() ? 0.0 : acc / static_cast<double>(samples.size());
}

// Single-writer training loop: fresh tape per sample, gradients averaged over
// the batch, AdamW with a one-cycle schedule. Deterministic per seed and
// bit-exactly resumable from a checkpoint carrying the rng stream.
template <typename T>
TrainResult<T> train(const std::vector<LoadedSample>& samples, const ModelConfig& cfg, const TrainOptions& opt,
                     const Checkpoint* resume = nullptr) {
    cfg.validate();
    require(!samples.empty(), "train: no samples");
    for (const auto& s : samples)
        require(s.image.height == cfg.height && s.image.width == cfg.width && s.flow.height == cfg.height &&
                    s.flow.width == cfg.width,
                "train: sample extents do not match the configured network size");

    ParamStore<T> params;
    std::map<std::string, AdamWState<T>> opt_state;
    std::int64_t start_step = 0;
    std::mt19937_64 rng(opt.seed);
    if (resume) {
        params = params_from_checkpoint<T>(*resume);
        for (const auto& [name, st] : resume->opt_state) {
            AdamWState<T> s;
            s.step = st.step;
            s.m = NdArray<T>(st.m.shape);
            s.v = NdArray<T>(st.v.shape);
            for (size_t i = 0; i < st.m.data.size(); ++i) s.m.data[i] = static_cast<T>(st.m.data[i]);
            for (size_t i = 0; i < st.v.data.size(); ++i) s.v.data[i] = static_cast<T>(st.v.data[i]);
            opt_state[name] = std::move(s);
        }
        start_step = resume->train_step;
        if (!resume->rng_state.empty()) {
            std::istringstream is(resume->rng_state);
            is >> rng;
        }
    } else {
        params = init_params<T>(cfg, opt.seed);
    }

    std::ofstream log;
    if (!opt.loss_log_path.empty()) {
        const bool fresh = start_step == 0;
        log.open(opt.loss_log_path, fresh ? std::ios::trunc : std::ios::app);
        require(log.good(), "train: cannot open loss log " + opt.loss_log_path);
        if (fresh) log << "step,lr,loss\n";
    }

    TrainResult<T> result;
    const int n = static_cast<int>(samples.size());
    std::map<std::string, NdArray<T>> grad_acc;

    auto make_checkpoint = [&](std::int64_t step) {
        Checkpoint ck;
        ck.config = cfg;
        ck.params = params_to_f32(params);
        for (const auto& [name, st] : opt_state) {
            AdamWState<float> s32;
            s32.step = st.step;
            s32.m = NdArray<float>(st.m.shape);
            s32.v = NdArray<float>(st.v.shape);
            for (size_t i = 0; i < st.m.data.size(); ++i) s32.m.data[i] = static_cast<float>(st.m.data[i]);
            for (size_t i = 0; i < st.v.data.size(); ++i) s32.v.data[i] = static_cast<float>(st.v.data[i]);
            ck.opt_state[name] = std::move(s32);
            ck.opt_step = st.step;
        }
        ck.train_step = step;
        std::ostringstream os;
        os << rng;
        ck.rng_state = os.str();
        return ck;
    };

    std::int64_t completed = opt.steps;
    for (std::int64_t step = start_step; step < opt.steps; ++step) {
        const double lr = onecycle_lr(step, opt.steps, opt.lr_max, opt.warmup_frac);
        for (auto& [name, g] : grad_acc) std::fill(g.data.begin(), g.data.end(), T(0));

        double batch_loss = 0;
        for (int bi = 0; bi < opt.batch; ++bi) {
            const int idx = std::uniform_int_distribution<int>(0, n - 1)(rng);
            const std::uint64_t jseed = rng();
            ImageRaster img = samples[static_cast<size_t>(idx)].image;
            if (opt.augment) img = hsv_jitter(img, opt.jitter_h, opt.jitter_s, opt.jitter_v, jseed);

            Tape<T> tape;
            auto tp = inject_params(tape, params, /*requires_grad=*/true);
            auto in = tape.leaf(image_to_input<T>(img));
            auto out = model_forward(tape, tp, cfg, in);
            auto gt = tape.leaf(flow_to_value<T>(samples[static_cast<size_t>(idx)].flow));
            auto loss = tape.mean(tape.abs_(tape.sub(out, gt)));
            const double lv = static_cast<double>(tape.value(loss).data[0]);
            if (!std::isfinite(lv))
                throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
            batch_loss += lv;
            tape.backward(loss);
            for (const auto& [name, pid] : tp.id) {
                const auto& g = tape.grad(pid);
                auto it = grad_acc.find(name);
                if (it == grad_acc.end()) it = grad_acc.emplace(name, NdArray<T>(g.shape)).first;
                for (size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
            }
        }
        batch_loss /= opt.batch;

        AdamWConfig<T> acfg;
        acfg.lr = static_cast<T>(lr);
        acfg.weight_decay = static_cast<T>(opt.weight_decay);
        const T inv_batch = T(1) / static_cast<T>(opt.batch);
        for (auto& [name, param] : params) {
            auto& g = grad_acc.at(name);
            for (auto& v : g.data) v *= inv_batch;
            adamw_step(param, g, opt_state[name], acfg);
        }

        result.loss_trace.push_back(batch_loss);
        result.lr_trace.push_back(lr);
        if (log.is_open()) log << step << "," << lr << "," << batch_loss << "\n";

        if (opt.checkpoint_every > 0 && !opt.checkpoint_path.empty() && (step + 1) % opt.checkpoint_every == 0 &&
            step + 1 < opt.steps)
            save_checkpoint(make_checkpoint(step + 1), opt.checkpoint_path);

        if (opt.stop_after > 0 && step + 1 >= opt.stop_after && step + 1 < opt.steps) {
            completed = step + 1;
            break;
        }
    }

    result.checkpoint = make_checkpoint(completed);
    result.params = std::move(params);
    if (!opt.checkpoint_path.empty()) save_checkpoint(result.checkpoint, opt.checkpoint_path);
    return result;
}

struct RectifyResult {
    ImageRaster rectified;
    WarpFlow flow;  // at native resolution, native pixel units
    ValidityMask mask;
};

// Resize to the network size, predict, rescale the flow to native extents,
// warp with zero fill.
template <typename T>
RectifyResult rectify(const ImageRaster& native, const ParamStore<T>& params, const ModelConfig& cfg) {
    ImageRaster net_in = resize_bilinear(native.to_rgb(), cfg.height, cfg.width);
    WarpFlow net_flow = predict_flow(params, cfg, net_in);
    WarpFlow full = resize_flow(net_flow, native.height, native.width, native.height, native.width);
    auto [img, mask] = warp(native, full, 0.0);
    return RectifyResult{std::move(img), std::move(full), std::move(mask)};
}

}  // namespace unwarp
