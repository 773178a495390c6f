#include "hydrofusion/config.hpp"

#include "json.hpp"

#include <Eigen/Core>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <boost/version.hpp>

#include <charconv>
#include <fstream>
#include <type_traits>
#include <functional>
#include <iomanip>
#include <sstream>

namespace hydrofusion {

namespace {

struct Binding {
    const char* section;
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
T parse_number(const std::string& text, const std::string& name) {
    T v{};
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + text + "' for " + name);
    return v;
}

bool parse_bool(const std::string& text, const std::string& name) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ConfigError("invalid boolean '" + text + "' for " + name);
}

template <typename T>
std::string show(T v) {
    if constexpr (std::is_same_v<T, bool>) {
        return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
        char buf[64];
        const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
        return std::string(buf, ptr);
    } else {
        return std::to_string(v);
    }
}

// Binding for a member reached through an accessor returning a reference.
template <typename T, typename Access>
Binding field(const char* section, const char* key, Access access) {
    const std::string name = std::string(section) + "." + key;
    return {section, key, [access](const RunConfig& c) { return show<T>(access(const_cast<RunConfig&>(c))); },
            [access, name](RunConfig& c, const std::string& v) {
                if constexpr (std::is_same_v<T, bool>) access(c) = parse_bool(v, name);
                else access(c) = parse_number<T>(v, name);
            }};
}

#define HF_FIELD(T, section, key, expr) field<T>(section, key, [](RunConfig& c) -> T& { return expr; })

std::string experts_string(const std::bitset<kExpertCount>& set) {
    std::string out;
    for (std::size_t k = 0; k < kExpertCount; ++k) {
        if (!set.test(k)) continue;
        if (!out.empty()) out += ',';
        out += kExpertNames[k];
    }
    return out;
}

std::bitset<kExpertCount> parse_experts(const std::string& text) {
    std::bitset<kExpertCount> set;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (item.empty()) continue;
        if (item == "all") {
            set.set();
            continue;
        }
        bool found = false;
        for (std::size_t k = 0; k < kExpertCount; ++k) {
            if (item == kExpertNames[k]) set.set(k), found = true;
        }
        if (!found) throw ConfigError("unknown expert '" + item + "' in model.experts");
    }
    if (set.none()) throw ConfigError("model.experts selects no expert");
    return set;
}

const std::vector<Binding>& bindings() {
    static const std::vector<Binding> table = [] {
        std::vector<Binding> t;
        t.push_back({"data", "csv", [](const RunConfig& c) { return c.csv ? c.csv->string() : std::string(); },
                     [](RunConfig& c, const std::string& v) {
                         if (v.empty()) c.csv.reset();
                         else c.csv = v;
                     }});
        t.push_back(HF_FIELD(double, "data", "train_fraction", c.train_fraction));
        t.push_back(HF_FIELD(double, "data", "validation_fraction", c.validation_fraction));

        t.push_back(HF_FIELD(int, "synthetic", "years", c.synthetic.years));
        t.push_back(HF_FIELD(int, "synthetic", "start_year", c.synthetic.start_year));
        t.push_back(HF_FIELD(double, "synthetic", "base_flow", c.synthetic.base_flow));
        t.push_back(HF_FIELD(double, "synthetic", "trend_slope_std", c.synthetic.trend_slope_std));
        t.push_back(HF_FIELD(std::size_t, "synthetic", "trend_knot_days", c.synthetic.trend_knot_days));
        t.push_back(HF_FIELD(double, "synthetic", "seasonal_amplitude", c.synthetic.seasonal_amplitude));
        t.push_back(HF_FIELD(double, "synthetic", "event_rate", c.synthetic.event_rate));
        t.push_back(HF_FIELD(double, "synthetic", "storm_depth", c.synthetic.storm_depth));
        t.push_back(HF_FIELD(double, "synthetic", "runoff_coefficient", c.synthetic.runoff_coefficient));
        t.push_back(HF_FIELD(double, "synthetic", "recession_days", c.synthetic.recession_days));
        t.push_back(HF_FIELD(double, "synthetic", "noise_scale", c.synthetic.noise_scale));
        t.push_back(HF_FIELD(double, "synthetic", "noise_ar", c.synthetic.noise_ar));
        t.push_back(HF_FIELD(double, "synthetic", "regulation_amplitude", c.synthetic.regulation_amplitude));
        t.push_back(HF_FIELD(double, "synthetic", "unlabeled_fraction", c.synthetic.unlabeled_fraction));
        for (std::size_t i = 0; i < kStaticDescriptors; ++i) {
            static const char* names[] = {"static_0", "static_1", "static_2", "static_3"};
            t.push_back(field<double>("synthetic", names[i], [i](RunConfig& c) -> double& { return c.synthetic.static_desc[i]; }));
        }

        t.push_back(HF_FIELD(std::size_t, "context", "variance_window", c.context.variance_window));
        t.push_back(HF_FIELD(std::size_t, "context", "api_lags", c.context.api_lags));
        t.push_back(HF_FIELD(double, "context", "api_decay", c.context.api_decay));

        t.push_back(HF_FIELD(std::size_t, "model", "window", c.model.window));
        t.push_back(HF_FIELD(std::size_t, "model", "horizon", c.model.horizon));
        t.push_back(HF_FIELD(std::size_t, "model", "harmonics", c.model.harmonics));
        t.push_back(HF_FIELD(std::size_t, "model", "lstm_span", c.model.lstm_span));
        t.push_back(HF_FIELD(bool, "model", "decomposition", c.model.decomposition));
        t.push_back(HF_FIELD(bool, "model", "residual", c.model.residual));
        t.push_back(HF_FIELD(bool, "model", "learned_gate", c.model.learned_gate));
        t.push_back(HF_FIELD(bool, "model", "use_covariates", c.model.use_covariates));
        t.push_back(HF_FIELD(bool, "model", "global_seasonal", c.model.global_seasonal));
        t.push_back(HF_FIELD(bool, "model", "foundation", c.model.foundation));
        t.push_back(HF_FIELD(std::uint64_t, "model", "foundation_seed", c.model.foundation_seed));
        t.push_back({"model", "experts", [](const RunConfig& c) { return experts_string(c.model.experts); },
                     [](RunConfig& c, const std::string& v) { c.model.experts = parse_experts(v); }});

        t.push_back(HF_FIELD(std::size_t, "train", "epochs", c.train.epochs));
        t.push_back(HF_FIELD(std::size_t, "train", "batch", c.train.batch));
        t.push_back(HF_FIELD(std::size_t, "train", "patience", c.train.patience));
        t.push_back(HF_FIELD(std::size_t, "train", "max_iterations", c.train.max_iterations));
        t.push_back(HF_FIELD(double, "train", "lr", c.train.optimizer.lr));
        t.push_back(HF_FIELD(double, "train", "beta1", c.train.optimizer.beta1));
        t.push_back(HF_FIELD(double, "train", "beta2", c.train.optimizer.beta2));
        t.push_back(HF_FIELD(double, "train", "eps", c.train.optimizer.eps));
        t.push_back(HF_FIELD(double, "train", "weight_decay", c.train.optimizer.weight_decay));
        t.push_back(HF_FIELD(double, "train", "clip_norm", c.train.clip_norm));
        t.push_back(HF_FIELD(double, "train", "noise_multiplier", c.train.augment.noise_multiplier));
        t.push_back(HF_FIELD(double, "train", "crop_fraction", c.train.augment.crop_fraction));

        t.push_back(HF_FIELD(double, "loss", "sup", c.train.weights.sup));
        t.push_back(HF_FIELD(double, "loss", "mask", c.train.weights.mask));
        t.push_back(HF_FIELD(double, "loss", "ctr", c.train.weights.ctr));
        t.push_back(HF_FIELD(double, "loss", "cons", c.train.weights.cons));
        t.push_back(HF_FIELD(double, "loss", "pl", c.train.weights.pl));
        t.push_back(HF_FIELD(double, "loss", "reg", c.train.weights.reg));
        t.push_back(HF_FIELD(double, "loss", "gamma_mse_mae", c.train.weights.gamma_mse_mae));
        t.push_back(HF_FIELD(double, "loss", "gamma_ext", c.train.weights.gamma_ext));
        t.push_back(HF_FIELD(double, "loss", "gamma_nse", c.train.weights.gamma_nse));
        t.push_back(HF_FIELD(double, "loss", "gamma_kge", c.train.weights.gamma_kge));
        t.push_back(HF_FIELD(double, "loss", "alpha", c.train.weights.alpha));
        t.push_back(HF_FIELD(double, "loss", "beta", c.train.weights.beta));
        t.push_back(HF_FIELD(double, "loss", "eta", c.train.weights.eta));
        t.push_back(HF_FIELD(double, "loss", "tau_ctr", c.train.weights.tau_ctr));
        t.push_back(HF_FIELD(double, "loss", "entropy", c.train.weights.entropy));
        t.push_back(HF_FIELD(double, "loss", "l2", c.train.weights.l2));
        t.push_back(HF_FIELD(double, "loss", "mask_ratio", c.train.weights.mask_ratio));

        t.push_back(HF_FIELD(double, "curriculum", "start", c.train.curriculum.start));
        t.push_back(HF_FIELD(double, "curriculum", "end", c.train.curriculum.end));
        t.push_back(HF_FIELD(std::size_t, "curriculum", "ramp_epochs", c.train.curriculum.ramp_epochs));

        t.push_back(HF_FIELD(bool, "eval", "physical_units", c.physical_units));
        t.push_back({"run", "seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                     [](RunConfig& c, const std::string& v) { c.apply_seed(parse_number<std::uint64_t>(v, "run.seed")); }});
        return t;
    }();
    return table;
}

#undef HF_FIELD

}  // namespace

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    for (const auto& b : bindings()) {
        if (section == b.section && key == b.key) {
            b.set(*this, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + section + "." + key + "'");
}

RunConfig RunConfig::parse(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
    }
    RunConfig c;
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError("config key '" + section + "' outside a section");
        for (const auto& [key, value] : body) c.set(section, key, value.data());
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void RunConfig::apply_seed(std::uint64_t s) {
    seed = s;
    model.seed = s;
    train.seed = s * 0x9E3779B97F4A7C15ULL + 7;
}

void RunConfig::validate() const {
    try {
        if (!(train_fraction > 0.0 && validation_fraction > 0.0 && train_fraction + validation_fraction < 1.0)) {
            throw std::invalid_argument("data: fractions must be positive and leave a test split");
        }
        synthetic.validate();
        model.validate();
        train.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

std::string RunConfig::to_ini() const {
    std::ostringstream os;
    std::string current;
    for (const auto& b : bindings()) {
        if (current != b.section) {
            if (!current.empty()) os << '\n';
            current = b.section;
            os << '[' << current << "]\n";
        }
        os << b.key << " = " << b.get(*this) << '\n';
    }
    return os.str();
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

std::string RunConfig::hash() const { return fnv1a_hex(to_ini()); }

WindowConfig RunConfig::window_config() const { return {model.window, model.horizon, context}; }

Dataset build_dataset(const RunConfig& config) {
    SeriesRecord record;
    if (config.csv) {
        record = load_csv(*config.csv);
    } else {
        SyntheticConfig s = config.synthetic;
        s.train_fraction = config.train_fraction;
        record = generate_synthetic(s, config.seed);
    }
    const SplitSpec split = SplitSpec::chronological(record.size(), config.train_fraction, config.validation_fraction);
    return prepare_dataset(std::move(record), split, config.window_config());
}

std::string run_manifest(const RunConfig& config, const std::string& command) {
    nlohmann::json j = {
        {"command", command},
        {"config_hash", config.hash()},
        {"seeds", {{"run", config.seed}, {"model", config.model.seed}, {"train", config.train.seed},
                   {"foundation", config.model.foundation_seed}}},
        {"data", config.csv ? config.csv->string() : std::string("synthetic")},
        {"versions", {{"hydrofusion", "1.0.0"},
                      {"compiler", __VERSION__},
                      {"cxx_standard", __cplusplus},
                      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)},
                      {"boost", BOOST_LIB_VERSION}}},
        {"config", config.to_ini()},
    };
    return j.dump(2);
}

}  // namespace hydrofusion
