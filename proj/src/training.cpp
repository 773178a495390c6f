#include "hydrofusion/training.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace hydrofusion {

using nlohmann::json;

bool decay_exempt(const std::string& name) {
    constexpr std::string_view suffix = ".period";
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::size_t step, const AdamWConfig& c, double decay) {
    if (step == 0) throw std::invalid_argument("adamw_update: step count starts at 1");
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad.empty() ? 0.0 : grad[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        theta[i] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + decay * theta[i]);
    }
}

AdamW::AdamW(nn::ParamList params, const AdamWConfig& config) : params_(std::move(params)), config_(config) {
    if (!(config.lr > 0.0) || config.beta1 < 0.0 || config.beta1 >= 1.0 || config.beta2 < 0.0 || config.beta2 >= 1.0 ||
        !(config.eps > 0.0) || config.weight_decay < 0.0) {
        throw std::invalid_argument("adamw: lr > 0, betas in [0,1), eps > 0 and decay >= 0 required");
    }
    for (const auto& p : params_) {
        state_.m.emplace_back(p.tensor.numel(), 0.0);
        state_.v.emplace_back(p.tensor.numel(), 0.0);
    }
}

void AdamW::step() {
    ++state_.step;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor t = params_[k].tensor;
        const double decay = decay_exempt(params_[k].name) ? 0.0 : config_.weight_decay;
        adamw_update(t.mutable_data(), t.grad(), state_.m[k], state_.v[k], state_.step, config_, decay);
    }
}

double clip_grad_norm(const nn::ParamList& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& p : params) {
            Tensor t = p.tensor;
            if (!t.has_grad()) continue;
            for (double& g : t.mutable_grad()) g *= scale;
        }
    }
    return norm;
}

void CurriculumSchedule::validate() const {
    if (!(0.0 <= start && start <= end && end <= 100.0)) {
        throw std::invalid_argument("curriculum: need 0 <= start <= end <= 100");
    }
}

double CurriculumSchedule::percentile(std::size_t epoch) const {
    if (ramp_epochs == 0) return end;
    const double frac = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(ramp_epochs));
    return start + (end - start) * frac;
}

void TrainConfig::validate() const {
    if (batch == 0) throw std::invalid_argument("train: batch must be positive");
    if (epochs == 0) throw std::invalid_argument("train: epochs must be positive");
    if (clip_norm < 0.0) throw std::invalid_argument("train: clip_norm must be non-negative");
    weights.validate();
    curriculum.validate();
}

bool TrainConfig::semi_supervised() const {
    return weights.mask > 0.0 || weights.ctr > 0.0 || weights.cons > 0.0 || weights.pl > 0.0;
}

std::string EpochRecord::to_json() const {
    json j = {{"epoch", epoch},
              {"iterations", iterations},
              {"train", json::parse(train.to_json())},
              {"val_sup", val_sup},
              {"val_mse", val_mse},
              {"q_percentile", q_percentile},
              {"accepted_fraction", accepted_fraction}};
    return j.dump();
}

namespace {

constexpr std::size_t kEvalChunk = 128;

void require_finite(const Tensor& t, const char* name, std::size_t epoch, std::size_t iteration) {
    if (t.numel() == 0) return;
    const double v = t.item();
    if (!std::isfinite(v)) {
        throw NumericError("non-finite loss term '" + std::string(name) + "' at epoch " + std::to_string(epoch) +
                           ", iteration " + std::to_string(iteration));
    }
}

nn::ParamList penalised(const nn::ParamList& params) {
    nn::ParamList out;
    for (const auto& p : params) {
        if (!decay_exempt(p.name)) out.push_back(p);
    }
    return out;
}

LossReport mean_report(const std::vector<IterationRecord>& records) {
    LossReport m;
    if (records.empty()) return m;
    for (const auto& r : records) {
        const LossReport& x = r.report;
        m.sup += x.sup, m.mse_mae += x.mse_mae, m.ext += x.ext, m.nse += x.nse, m.kge += x.kge;
        m.mask += x.mask, m.ctr += x.ctr, m.cons += x.cons, m.pl += x.pl, m.reg += x.reg, m.total += x.total;
        m.nse_skipped += x.nse_skipped, m.kge_skipped += x.kge_skipped;
        m.pl_threshold += x.pl_threshold, m.pl_accepted += x.pl_accepted;
    }
    const double n = static_cast<double>(records.size());
    for (double* f : {&m.sup, &m.mse_mae, &m.ext, &m.nse, &m.kge, &m.mask, &m.ctr, &m.cons, &m.pl, &m.reg, &m.total,
                      &m.pl_threshold, &m.pl_accepted}) {
        *f /= n;
    }
    m.pl_percentile = records.back().report.pl_percentile;
    return m;
}

}  // namespace

ValidationResult validation_loss(const HydroFusionModel& model, const Dataset& data,
                                 const std::vector<WindowSample>& windows, const LossWeights& weights) {
    ValidationResult r;
    if (windows.empty()) return r;
    double sup = 0.0, sq = 0.0;
    std::size_t pairs = 0;
    const UnitScale scale{data.runoff_scaler.mean, data.runoff_scaler.std};
    for (std::size_t first = 0; first < windows.size(); first += kEvalChunk) {
        const std::size_t n = std::min(kEvalChunk, windows.size() - first);
        const Batch b = make_batch(data, std::span<const WindowSample>(windows.data() + first, n), true);
        const ModelOutput out = model.forward(b.input);
        const SupervisedTerms t = loss_supervised(b.target, out.forecast, weights, data.stats.flood_threshold, scale);
        sup += t.total.item() * static_cast<double>(n);
        const auto f = out.forecast.data();
        const auto y = b.target.data();
        for (std::size_t i = 0; i < f.size(); ++i) sq += (f[i] - y[i]) * (f[i] - y[i]);
        pairs += f.size();
    }
    r.windows = windows.size();
    r.sup = sup / static_cast<double>(windows.size());
    r.mse = sq / static_cast<double>(pairs);
    return r;
}

Trainer::Trainer(HydroFusionModel& model, const Dataset& data, const TrainConfig& config)
    : model_(model), data_(data), config_(config), optimizer_(model.parameters(), config.optimizer), rng_(config.seed) {
    config_.validate();
    if (data.windows.train_labeled.empty()) throw std::invalid_argument("train: no labeled training windows");
    unlabeled_order_.resize(data.windows.train_unlabeled.size());
    std::iota(unlabeled_order_.begin(), unlabeled_order_.end(), std::size_t{0});
    unlabeled_cursor_ = unlabeled_order_.size();  // forces a shuffle on first use
}

const Batch& Trainer::next_unlabeled_batch(std::size_t size, Batch& storage) {
    const auto& pool = data_.windows.train_unlabeled;
    const std::size_t n = std::min(size, pool.size());
    if (unlabeled_cursor_ + n > unlabeled_order_.size()) {
        std::shuffle(unlabeled_order_.begin(), unlabeled_order_.end(), rng_);
        unlabeled_cursor_ = 0;
    }
    std::vector<WindowSample> picked;
    picked.reserve(n);
    for (std::size_t i = 0; i < n; ++i) picked.push_back(pool[unlabeled_order_[unlabeled_cursor_ + i]]);
    unlabeled_cursor_ += n;
    storage = make_batch(data_, picked, false);
    return storage;
}

IterationRecord Trainer::step(const Batch& labeled, const Batch* unlabeled, std::size_t epoch, std::size_t iteration) {
    const LossWeights& w = config_.weights;
    const nn::ParamList& params = optimizer_.params();
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
    const std::uint64_t mask_seed = rng_();
    const std::uint64_t aug_seed_a = rng_();
    const std::uint64_t aug_seed_b = rng_();

    IterationRecord rec;
    rec.epoch = epoch;
    rec.iteration = iteration;
    LossReport& report = rec.report;
    LossTerms terms;
    ad::Tape tape;
    Tensor total;
    try {
        ad::TapeScope scope(tape);
        const ModelOutput out = model_.forward(labeled.input);
        const SupervisedTerms sup = loss_supervised(labeled.target, out.forecast, w, data_.stats.flood_threshold,
                                                    {data_.runoff_scaler.mean, data_.runoff_scaler.std});
        terms.sup = sup.total;
        report.mse_mae = sup.mse_mae.item();
        report.ext = sup.ext.item();
        report.nse = sup.nse.item();
        report.kge = sup.kge.item();
        report.nse_skipped = sup.nse_skipped;
        report.kge_skipped = sup.kge_skipped;
        require_finite(sup.mse_mae, "mse_mae", epoch, iteration);
        require_finite(sup.ext, "ext", epoch, iteration);
        require_finite(sup.nse, "nse", epoch, iteration);
        require_finite(sup.kge, "kge", epoch, iteration);
        terms.reg = loss_regularization(out.gate, penalised(params), w.entropy, w.l2);
        require_finite(terms.reg, "reg", epoch, iteration);

        report.pl_percentile = config_.curriculum.percentile(epoch);
        if (config_.semi_supervised() && unlabeled != nullptr) {
            const Tensor& xu = unlabeled->input.x;
            const std::size_t B = xu.shape()[0], L = xu.shape()[1];
            if (w.mask > 0.0) {
                std::vector<unsigned char> mask;
                mask.reserve(B * L);
                for (std::size_t i = 0; i < B; ++i) {
                    const auto m = sample_mask(L, w.mask_ratio, mask_seed + i);
                    mask.insert(mask.end(), m.begin(), m.end());
                }
                terms.mask = loss_masked_reconstruction(xu, model_.reconstruct(xu, mask), mask);
                require_finite(terms.mask, "mask", epoch, iteration);
            }
            if (w.ctr > 0.0) {
                terms.ctr = loss_contrastive(model_.embed_scales(xu), w.tau_ctr);
                require_finite(terms.ctr, "ctr", epoch, iteration);
            }
            if (w.cons > 0.0 || w.pl > 0.0) {
                const Batch view_a = augment_batch(*unlabeled, aug_seed_a, config_.augment);
                const ModelOutput oa = model_.forward(view_a.input);
                if (w.cons > 0.0) {
                    const Batch view_b = augment_batch(*unlabeled, aug_seed_b, config_.augment);
                    const ModelOutput ob = model_.forward(view_b.input);
                    terms.cons = loss_consistency(oa.forecast, ob.forecast);
                    require_finite(terms.cons, "cons", epoch, iteration);
                }
                if (w.pl > 0.0 && model_.config().residual) {
                    const PseudoLabels pl =
                        forecast_pseudo_labels(oa, report.pl_percentile, model_.config().active_experts());
                    const Tensor labels(oa.forecast.shape(), pl.labels);
                    terms.pl = loss_pseudo(pl.accepted, labels, oa.forecast);
                    report.pl_threshold = pl.threshold;
                    report.pl_accepted = pl.accepted_fraction;
                    require_finite(terms.pl, "pl", epoch, iteration);
                }
            }
        }
        total = loss_total(terms, w, report);
        require_finite(total, "total", epoch, iteration);
    } catch (const ad::DomainError& e) {
        // NaN or inf reaching a guarded op
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", iteration " +
                           std::to_string(iteration));
    }
    tape.backward(total);
    rec.grad_norm = clip_grad_norm(params, config_.clip_norm);
    if (!std::isfinite(rec.grad_norm)) {
        throw NumericError("non-finite gradient norm at epoch " + std::to_string(epoch) + ", iteration " +
                           std::to_string(iteration));
    }
    optimizer_.step();
    model_.after_step();
    return rec;
}

PseudoLabels forecast_pseudo_labels(const ModelOutput& out, double pct, const std::vector<std::size_t>& experts) {
    PseudoLabels pl = pseudo_label_filter_percentile(out.expert_outputs, pct, experts);
    // labels live in forecast space: extrapolated components plus the expert mean
    const auto th = out.trend_hat.data();
    const auto sh = out.seasonal_hat.data();
    for (std::size_t i = 0; i < pl.labels.size(); ++i) pl.labels[i] += th[i] + sh[i];
    return pl;
}

std::vector<IterationRecord> Trainer::train_epoch(std::size_t epoch) {
    const auto& pool = data_.windows.train_labeled;
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);
    std::size_t iterations = (pool.size() + config_.batch - 1) / config_.batch;
    if (config_.max_iterations > 0) iterations = std::min(iterations, config_.max_iterations);
    std::vector<IterationRecord> out;
    out.reserve(iterations);
    Batch unlabeled_storage;
    for (std::size_t it = 0; it < iterations; ++it) {
        const std::size_t first = it * config_.batch;
        const std::size_t n = std::min(config_.batch, pool.size() - first);
        std::vector<WindowSample> picked;
        picked.reserve(n);
        for (std::size_t i = 0; i < n; ++i) picked.push_back(pool[order[first + i]]);
        const Batch labeled = make_batch(data_, picked, true);
        const Batch* unlabeled = nullptr;
        if (config_.semi_supervised()) {
            // without unlabeled windows the self-supervised terms read the labeled inputs
            unlabeled = data_.windows.train_unlabeled.empty() ? &labeled : &next_unlabeled_batch(n, unlabeled_storage);
        }
        out.push_back(step(labeled, unlabeled, epoch, it));
    }
    return out;
}

TrainHistory Trainer::fit(const std::function<void(const EpochRecord&)>& on_epoch) {
    if (data_.windows.validation.empty()) throw std::invalid_argument("train: no validation windows");
    TrainHistory h;
    const nn::ParamList params = model_.parameters();
    std::vector<std::vector<double>> best = snapshot(params);
    OptimizerState best_state = optimizer_.state();
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t waited = 0;
    for (std::size_t e = 0; e < config_.epochs; ++e) {
        std::vector<IterationRecord> its = train_epoch(e);
        EpochRecord rec;
        rec.epoch = e;
        rec.iterations = its.size();
        rec.train = mean_report(its);
        rec.q_percentile = config_.curriculum.percentile(e);
        rec.accepted_fraction = rec.train.pl_accepted;
        const ValidationResult v = validation_loss(model_, data_, data_.windows.validation, config_.weights);
        rec.val_sup = v.sup;
        rec.val_mse = v.mse;
        if (!std::isfinite(v.sup)) throw NumericError("non-finite validation loss at epoch " + std::to_string(e));
        h.iterations.insert(h.iterations.end(), its.begin(), its.end());
        h.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (v.sup < best_val) {
            best_val = v.sup;
            h.best_epoch = e;
            best = snapshot(params);
            best_state = optimizer_.state();
            waited = 0;
        } else if (++waited > config_.patience) {
            h.stopped_early = true;
            break;
        }
    }
    restore(params, best);
    optimizer_.state() = best_state;
    h.best_val = best_val;
    return h;
}

std::vector<std::vector<double>> snapshot(const nn::ParamList& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

void restore(const nn::ParamList& params, const std::vector<std::vector<double>>& values) {
    if (values.size() != params.size()) throw std::invalid_argument("restore: parameter count mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor t = params[k].tensor;
        if (values[k].size() != t.numel()) throw std::invalid_argument("restore: size mismatch for " + params[k].name);
        std::copy(values[k].begin(), values[k].end(), t.mutable_data().begin());
    }
}

namespace {

json params_json(const nn::ParamList& params) {
    json arr = json::array();
    for (const auto& p : params) {
        arr.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"values", std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())}});
    }
    return arr;
}

void params_from_json(const json& arr, const nn::ParamList& params, const char* group) {
    if (!arr.is_array() || arr.size() != params.size()) {
        throw std::runtime_error(std::string("checkpoint: ") + group + " parameter count does not match the model");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        const json& e = arr[k];
        Tensor t = params[k].tensor;
        if (e.at("name").get<std::string>() != params[k].name || e.at("shape").get<ad::Shape>() != t.shape()) {
            throw std::runtime_error("checkpoint: parameter " + params[k].name + " missing or reshaped");
        }
        const auto values = e.at("values").get<std::vector<double>>();
        if (values.size() != t.numel()) throw std::runtime_error("checkpoint: bad value count for " + params[k].name);
        std::copy(values.begin(), values.end(), t.mutable_data().begin());
    }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const HydroFusionModel& model, const AdamW* optimizer,
                     const std::string& config_hash, std::size_t epoch) {
    json j;
    j["format"] = "hydrofusion-checkpoint";
    j["version"] = 1;
    j["config_hash"] = config_hash;
    j["epoch"] = epoch;
    j["parameters"] = params_json(model.parameters());
    j["frozen"] = params_json(model.frozen_parameters());
    if (model.frozen_encoder() != nullptr) j["frozen_hash"] = model.frozen_encoder()->hash();
    if (optimizer != nullptr) {
        j["optimizer"] = {{"step", optimizer->state().step}, {"m", optimizer->state().m}, {"v", optimizer->state().v}};
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << j.dump() << '\n';
}

CheckpointInfo load_checkpoint(const std::filesystem::path& path, HydroFusionModel& model, AdamW* optimizer) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    const json j = json::parse(in);
    if (j.value("format", "") != "hydrofusion-checkpoint" || j.value("version", 0) != 1) {
        throw std::runtime_error("checkpoint: unsupported format in " + path.string());
    }
    params_from_json(j.at("parameters"), model.parameters(), "trainable");
    params_from_json(j.at("frozen"), model.frozen_parameters(), "frozen");
    if (optimizer != nullptr && j.contains("optimizer")) {
        OptimizerState& s = optimizer->state();
        s.step = j["optimizer"].at("step").get<std::size_t>();
        s.m = j["optimizer"].at("m").get<std::vector<std::vector<double>>>();
        s.v = j["optimizer"].at("v").get<std::vector<std::vector<double>>>();
        if (s.m.size() != optimizer->params().size() || s.v.size() != s.m.size()) {
            throw std::runtime_error("checkpoint: optimizer state does not match the model");
        }
    }
    return {j.value("config_hash", ""), j.value("epoch", std::size_t{0})};
}

void write_history(const std::filesystem::path& path, const TrainHistory& history) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write history " + path.string());
    for (const auto& e : history.epochs) out << e.to_json() << '\n';
}

}  // namespace hydrofusion
