#include "hydrofusion/data_pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace hydrofusion {

namespace chr = std::chrono;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::optional<double> parse_number(const std::string& text) {
    double v = 0.0;
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) return std::nullopt;
    return v;
}

std::string shortest(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

unsigned day_of_year(const Date& d) {
    const chr::sys_days jan1{chr::year_month_day{d.year(), chr::January, chr::day{1}}};
    return static_cast<unsigned>((chr::sys_days{d} - jan1).count());
}

}  // namespace

std::string format_date(const Date& d) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                  static_cast<unsigned>(d.day()));
    return buf;
}

std::optional<Date> parse_date(std::string_view text) {
    if (text.size() != 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
    int y = 0;
    unsigned m = 0, d = 0;
    auto num = [&](std::size_t pos, std::size_t len, auto& out) {
        const auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + pos + len, out);
        return ec == std::errc() && ptr == text.data() + pos + len;
    };
    if (!num(0, 4, y) || !num(5, 2, m) || !num(8, 2, d)) return std::nullopt;
    const Date date{chr::year{y}, chr::month{m}, chr::day{d}};
    if (!date.ok()) return std::nullopt;
    return date;
}

DataError::DataError(std::size_t row, const std::string& message)
    : std::runtime_error(row > 0 ? "row " + std::to_string(row) + ": " + message : message), row_(row) {}

void SeriesRecord::validate() const {
    const std::size_t n = dates.size();
    if (runoff.size() != n || precip.size() != n || temp.size() != n || labeled.size() != n) {
        throw DataError(0, "series columns differ in length");
    }
    if (extra.size() != extra_names.size()) throw DataError(0, "extra column names and data disagree");
    for (const auto& col : extra) {
        if (col.size() != n) throw DataError(0, "extra column length differs from dates");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0 && chr::sys_days{dates[i]} != chr::sys_days{dates[i - 1]} + chr::days{1}) {
            throw DataError(i + 1, "date " + format_date(dates[i]) + " does not follow " + format_date(dates[i - 1]));
        }
        if (!std::isfinite(runoff[i]) || !std::isfinite(precip[i]) || !std::isfinite(temp[i])) {
            throw DataError(i + 1, "non-finite value on " + format_date(dates[i]));
        }
        if (runoff[i] < 0.0) throw DataError(i + 1, "negative runoff on " + format_date(dates[i]));
    }
}

void SyntheticConfig::validate() const {
    if (years <= 0) throw std::invalid_argument("synthetic: years must be positive");
    if (event_rate < 0.0 || event_rate > 1.0) throw std::invalid_argument("synthetic: event_rate must lie in [0,1]");
    if (noise_scale < 0.0) throw std::invalid_argument("synthetic: noise_scale must be non-negative");
    if (!(noise_ar > -1.0 && noise_ar < 1.0)) throw std::invalid_argument("synthetic: noise_ar must lie in (-1,1)");
    if (unlabeled_fraction < 0.0 || unlabeled_fraction >= 1.0) {
        throw std::invalid_argument("synthetic: unlabeled_fraction must lie in [0,1)");
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw std::invalid_argument("synthetic: train_fraction must lie in (0,1)");
    }
    if (trend_knot_days == 0 || recession_days <= 0.0) throw std::invalid_argument("synthetic: bad trend or recession");
}

SeriesRecord generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    const chr::sys_days first{chr::year_month_day{chr::year{cfg.start_year}, chr::January, chr::day{1}}};
    const chr::sys_days stop{chr::year_month_day{chr::year{cfg.start_year + cfg.years}, chr::January, chr::day{1}}};
    const auto n = static_cast<std::size_t>((stop - first).count());

    SeriesRecord r;
    r.static_desc = cfg.static_desc;
    r.dates.resize(n);
    r.runoff.resize(n);
    r.precip.resize(n);
    r.temp.resize(n);
    r.labeled.assign(n, 1);
    SeriesComponents truth;
    truth.trend.resize(n);
    truth.seasonal.resize(n);
    truth.residual.resize(n);

    const double phase = kTwoPi * uniform(rng);
    const double phase2 = kTwoPi * uniform(rng);

    // piecewise-linear drift with a random slope per piece
    double level = cfg.base_flow;
    double slope = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        if (t % cfg.trend_knot_days == 0) slope = cfg.trend_slope_std * normal(rng);
        truth.trend[t] = level;
        level += slope;
    }

    const double year = 365.25;
    const double recession = std::exp(-1.0 / cfg.recession_days);
    double store = 0.0;
    double ar = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        const double td = static_cast<double>(t);
        r.dates[t] = chr::year_month_day{first + chr::days{static_cast<int>(t)}};
        const double annual = std::sin(kTwoPi * td / year + phase);
        const double amp = cfg.seasonal_amplitude * (1.0 + 0.15 * std::sin(kTwoPi * td / (4.0 * year) + phase2));
        truth.seasonal[t] = amp * (annual + 0.4 * std::sin(2.0 * kTwoPi * td / year + phase2));

        // storms cluster in the wet half of the year
        const double rate = cfg.event_rate * (1.0 + 0.8 * annual);
        double storm = 0.0;
        if (uniform(rng) < rate) storm = -cfg.storm_depth * std::log(1.0 - uniform(rng));
        const double drizzle = uniform(rng) < 0.2 ? -2.0 * std::log(1.0 - uniform(rng)) : 0.0;
        r.precip[t] = storm + drizzle;
        store = store * recession + cfg.runoff_coefficient * storm;

        ar = cfg.noise_ar * ar + cfg.noise_scale * normal(rng);
        const double dry = std::max(0.0, -annual);
        const double regulation = cfg.regulation_amplitude * dry * std::sin(kTwoPi * td / 7.0);
        truth.residual[t] = store + ar + regulation;
        r.temp[t] = 15.0 + 10.0 * std::sin(kTwoPi * td / year + phase - 0.3) + 1.5 * normal(rng);
        r.runoff[t] = std::max(0.0, truth.trend[t] + truth.seasonal[t] + truth.residual[t]);
    }

    // contiguous unlabeled blocks inside the training span
    const auto train_days = static_cast<std::size_t>(std::floor(cfg.train_fraction * static_cast<double>(n)));
    auto remaining = static_cast<std::size_t>(std::llround(cfg.unlabeled_fraction * static_cast<double>(train_days)));
    std::uniform_int_distribution<std::size_t> block_len(20, 60);
    std::size_t attempts = 0;
    while (remaining > 0 && attempts < 100000 && train_days > 0) {
        ++attempts;
        const std::size_t len = std::min(remaining, std::min(block_len(rng), train_days));
        std::uniform_int_distribution<std::size_t> start_dist(0, train_days - len);
        const std::size_t start = start_dist(rng);
        // keep at least one labeled day between blocks
        const std::size_t lo = start > 0 ? start - 1 : 0;
        const std::size_t hi = std::min(train_days, start + len + 1);
        if (std::any_of(r.labeled.begin() + static_cast<std::ptrdiff_t>(lo), r.labeled.begin() + static_cast<std::ptrdiff_t>(hi),
                        [](unsigned char l) { return l == 0; })) {
            continue;
        }
        std::fill_n(r.labeled.begin() + static_cast<std::ptrdiff_t>(start), len, 0);
        remaining -= len;
    }
    r.truth = std::move(truth);
    return r;
}

SeriesRecord load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(0, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError(1, "empty file, expected a header");
    std::vector<std::string> header = split_fields(line);
    for (auto& h : header) h = trim(h);
    const std::vector<std::string> required = {"date", "runoff", "precip", "temp"};
    if (header.size() < required.size() || !std::equal(required.begin(), required.end(), header.begin())) {
        throw DataError(1, "header must start with date,runoff,precip,temp");
    }
    const bool has_labeled = header.size() > 4 && header[4] == "labeled";
    SeriesRecord r;
    const std::size_t extra_from = has_labeled ? 5 : 4;
    for (std::size_t c = extra_from; c < header.size(); ++c) r.extra_names.push_back(header[c]);
    r.extra.resize(r.extra_names.size());

    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        std::vector<std::string> f = split_fields(line);
        if (f.size() != header.size()) {
            throw DataError(row, "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
        }
        for (auto& v : f) v = trim(v);
        const auto date = parse_date(f[0]);
        if (!date) throw DataError(row, "invalid date '" + f[0] + "'");
        if (!r.dates.empty()) {
            const chr::sys_days prev{r.dates.back()}, cur{*date};
            if (cur == prev) throw DataError(row, "duplicated date " + f[0]);
            if (cur < prev) throw DataError(row, "date " + f[0] + " is earlier than " + format_date(r.dates.back()));
            if (cur != prev + chr::days{1}) {
                throw DataError(row, "gap in dates after " + format_date(r.dates.back()) + " (next is " + f[0] + ")");
            }
        }
        auto number = [&](std::size_t c) {
            const auto v = parse_number(f[c]);
            if (!v || !std::isfinite(*v)) throw DataError(row, "column " + header[c] + " is not a finite number: '" + f[c] + "'");
            return *v;
        };
        const double q = number(1);
        if (q < 0.0) throw DataError(row, "negative runoff " + f[1]);
        r.dates.push_back(*date);
        r.runoff.push_back(q);
        r.precip.push_back(number(2));
        r.temp.push_back(number(3));
        if (has_labeled) {
            if (f[4] != "0" && f[4] != "1") throw DataError(row, "labeled must be 0 or 1, found '" + f[4] + "'");
            r.labeled.push_back(f[4] == "1" ? 1 : 0);
        } else {
            r.labeled.push_back(1);
        }
        for (std::size_t c = extra_from; c < header.size(); ++c) r.extra[c - extra_from].push_back(number(c));
    }
    if (r.dates.empty()) throw DataError(row, "no data rows");
    r.validate();
    return r;
}

void write_csv(const SeriesRecord& record, const std::filesystem::path& path) {
    record.validate();
    std::ofstream out(path);
    if (!out) throw DataError(0, "cannot write " + path.string());
    out << "date,runoff,precip,temp,labeled";
    for (const auto& name : record.extra_names) out << ',' << name;
    out << '\n';
    for (std::size_t i = 0; i < record.size(); ++i) {
        out << format_date(record.dates[i]) << ',' << shortest(record.runoff[i]) << ',' << shortest(record.precip[i])
            << ',' << shortest(record.temp[i]) << ',' << (record.labeled[i] ? 1 : 0);
        for (const auto& col : record.extra) out << ',' << shortest(col[i]);
        out << '\n';
    }
}

void write_components_csv(const SeriesRecord& record, const std::filesystem::path& path) {
    if (!record.truth) throw DataError(0, "record carries no ground-truth components");
    std::ofstream out(path);
    if (!out) throw DataError(0, "cannot write " + path.string());
    out << "date,trend,seasonal,residual\n";
    const auto& t = *record.truth;
    for (std::size_t i = 0; i < record.size(); ++i) {
        out << format_date(record.dates[i]) << ',' << shortest(t.trend[i]) << ',' << shortest(t.seasonal[i]) << ','
            << shortest(t.residual[i]) << '\n';
    }
}

SplitSpec SplitSpec::chronological(std::size_t n, double train, double validation) {
    if (!(train > 0.0 && validation > 0.0 && train + validation < 1.0)) {
        throw std::invalid_argument("split fractions must be positive and leave room for a test span");
    }
    SplitSpec s;
    s.total = n;
    s.train_end = static_cast<std::size_t>(std::floor(train * static_cast<double>(n)));
    s.val_end = static_cast<std::size_t>(std::floor((train + validation) * static_cast<double>(n)));
    s.validate();
    return s;
}

void SplitSpec::validate() const {
    if (!(0 < train_end && train_end < val_end && val_end < total)) {
        throw std::invalid_argument("split boundaries must satisfy 0 < train_end < val_end < total");
    }
}

std::vector<std::size_t> candidate_anchors(std::size_t begin, std::size_t end, std::size_t window, std::size_t horizon) {
    std::vector<std::size_t> out;
    if (window == 0 || horizon == 0 || end < begin || end - begin < window + horizon) return out;
    for (std::size_t t = begin + window - 1; t + horizon < end; ++t) out.push_back(t);
    return out;
}

WindowStreams make_windows(const SeriesRecord& record, const SplitSpec& split, const WindowConfig& config) {
    split.validate();
    if (split.total != record.size()) throw std::invalid_argument("split covers a different number of days");
    const std::size_t history = std::max(config.context.variance_window, config.context.api_lags);
    WindowStreams out;
    auto labeled = [&](std::size_t t) {
        for (std::size_t h = 1; h <= config.horizon; ++h) {
            if (!record.labeled[t + h]) return false;
        }
        return true;
    };
    const std::pair<std::size_t, std::size_t> spans[] = {
        {0, split.train_end}, {split.train_end, split.val_end}, {split.val_end, split.total}};
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t t : candidate_anchors(spans[s].first, spans[s].second, config.window, config.horizon)) {
            if (t < history) continue;
            const WindowSample w{t, labeled(t)};
            if (s == 0) {
                (w.labeled ? out.train_labeled : out.train_unlabeled).push_back(w);
            } else if (w.labeled) {
                (s == 1 ? out.validation : out.test).push_back(w);
            }
        }
    }
    return out;
}

Scaler fit_scaler(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("fit_scaler: empty sample");
    Scaler s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(var / static_cast<double>(values.size()));
    if (s.std < 1e-12) s.std = 1.0;
    return s;
}

std::array<double, kContextFeatures> Dataset::context_features(std::size_t t) const {
    ContextInputs in{runoff, record.precip, day_of_year(record.dates[t]), record.static_desc};
    return compute_context(in, t, config.context, stats).features(stats);
}

Dataset prepare_dataset(SeriesRecord record, const SplitSpec& split, const WindowConfig& config) {
    record.validate();
    Dataset d;
    d.split = split;
    d.config = config;
    d.windows = make_windows(record, split, config);
    const std::size_t n = record.size(), tr = split.train_end;
    const std::span<const double> train_runoff(record.runoff.data(), tr);
    d.runoff_scaler = fit_scaler(train_runoff);
    d.covariate_scalers[0] = fit_scaler(std::span<const double>(record.precip.data(), tr));
    d.covariate_scalers[1] = fit_scaler(std::span<const double>(record.temp.data(), tr));
    d.runoff.resize(n);
    d.covariates.resize(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        d.runoff[i] = d.runoff_scaler.apply(record.runoff[i]);
        d.covariates[2 * i] = d.covariate_scalers[0].apply(record.precip[i]);
        d.covariates[2 * i + 1] = d.covariate_scalers[1].apply(record.temp[i]);
    }
    d.stats.flood_threshold = quantile(std::vector<double>(d.runoff.begin(), d.runoff.begin() + static_cast<std::ptrdiff_t>(tr)), 0.9);
    d.stats.sorted_precip.assign(record.precip.begin(), record.precip.begin() + static_cast<std::ptrdiff_t>(tr));
    std::sort(d.stats.sorted_precip.begin(), d.stats.sorted_precip.end());
    std::vector<double> apis;
    const std::size_t lags = config.context.api_lags;
    for (std::size_t t = lags; t < tr; ++t) {
        apis.push_back(compute_api(std::span<const double>(record.precip.data() + t - lags, lags), config.context.api_decay, lags));
    }
    if (!apis.empty()) {
        const Scaler s = fit_scaler(apis);
        d.stats.api_mean = s.mean;
        d.stats.api_std = s.std;
    }
    d.record = std::move(record);
    return d;
}

Batch make_batch(const Dataset& data, std::span<const WindowSample> windows, bool with_target) {
    const std::size_t B = windows.size(), L = data.config.window, H = data.config.horizon, C = 2;
    if (B == 0) throw std::invalid_argument("make_batch: no windows");
    std::vector<double> x(B * L), u(B * L * C), ctx(B * kContextFeatures), y;
    if (with_target) y.resize(B * H);
    Batch b;
    for (std::size_t i = 0; i < B; ++i) {
        const std::size_t t = windows[i].anchor;
        if (with_target && !windows[i].labeled) throw std::invalid_argument("make_batch: target requested for unlabeled window");
        const std::size_t first = t + 1 - L;
        std::copy_n(data.runoff.begin() + static_cast<std::ptrdiff_t>(first), L, x.begin() + static_cast<std::ptrdiff_t>(i * L));
        std::copy_n(data.covariates.begin() + static_cast<std::ptrdiff_t>(first * C), L * C,
                    u.begin() + static_cast<std::ptrdiff_t>(i * L * C));
        const auto f = data.context_features(t);
        std::copy(f.begin(), f.end(), ctx.begin() + static_cast<std::ptrdiff_t>(i * kContextFeatures));
        if (with_target) {
            std::copy_n(data.runoff.begin() + static_cast<std::ptrdiff_t>(t + 1), H, y.begin() + static_cast<std::ptrdiff_t>(i * H));
        }
        b.anchors.push_back(t);
        b.input.anchors.push_back(static_cast<std::int64_t>(t));
    }
    b.input.x = Tensor({B, L}, std::move(x));
    b.input.covariates = Tensor({B, L, C}, std::move(u));
    b.input.context = Tensor({B, kContextFeatures}, std::move(ctx));
    if (with_target) b.target = Tensor({B, H}, std::move(y));
    return b;
}

Batch augment_batch(const Batch& batch, std::uint64_t seed, const AugmentOptions& options) {
    const std::size_t B = batch.input.x.shape()[0], L = batch.input.x.shape()[1];
    const std::size_t C = batch.input.covariates.shape()[2];
    Batch out = batch;
    std::vector<double> x(B * L), u(B * L * C);
    const auto xv = batch.input.x.data();
    const auto uv = batch.input.covariates.data();
    std::vector<double> channel(L);
    for (std::size_t i = 0; i < B; ++i) {
        const auto window = xv.subspan(i * L, L);
        const Augmentation aug = draw_augmentation(window, seed + i, options);
        std::vector<double> noisy(window.begin(), window.end());
        for (std::size_t j = 0; j < L; ++j) noisy[j] += aug.noise[j];
        const auto cropped = apply_crop(noisy, aug);
        std::copy(cropped.begin(), cropped.end(), x.begin() + static_cast<std::ptrdiff_t>(i * L));
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t j = 0; j < L; ++j) channel[j] = uv[(i * L + j) * C + c];
            const auto cc = apply_crop(channel, aug);
            for (std::size_t j = 0; j < L; ++j) u[(i * L + j) * C + c] = cc[j];
        }
    }
    out.input.x = Tensor({B, L}, std::move(x));
    out.input.covariates = Tensor({B, L, C}, std::move(u));
    return out;
}

std::vector<unsigned char> sample_mask(std::size_t length, double p, std::uint64_t seed) {
    if (length == 0) throw std::invalid_argument("sample_mask: empty window");
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("sample_mask: probability must lie in [0,1]");
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(p);
    std::vector<unsigned char> mask(length, 0);
    for (int attempt = 0; attempt < 2; ++attempt) {
        bool any = false;
        for (auto& m : mask) {
            m = coin(rng) ? 1 : 0;
            any = any || m;
        }
        if (any) return mask;
    }
    std::uniform_int_distribution<std::size_t> pick(0, length - 1);
    mask[pick(rng)] = 1;
    return mask;
}

ScaleViews aggregate_scales(std::span<const double> x) {
    auto pool = [&](std::size_t block) {
        const std::size_t n = x.size() / block;
        const std::size_t offset = x.size() - n * block;
        std::vector<double> out(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < block; ++j) out[i] += x[offset + i * block + j];
            out[i] /= static_cast<double>(block);
        }
        return out;
    };
    return {std::vector<double>(x.begin(), x.end()), pool(7), pool(30)};
}

}  // namespace hydrofusion
