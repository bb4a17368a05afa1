#include "ebcl/featurizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ebcl::feat {

using events::Dataset;
using events::Observation;
using nlohmann::json;

const Vocabulary::Feature* Vocabulary::find(const std::string& name) const {
    auto it = feature_ids.find(name);
    if (it == feature_ids.end()) return nullptr;
    return &features[static_cast<size_t>(it->second)];
}

int default_min_count(size_t n_observations) {
    // 1000 at paper scale (~1e8 observations); scaled with corpus size.
    return std::max(5, static_cast<int>(static_cast<double>(n_observations) * 1e-5));
}

Vocabulary build_vocabulary(const Dataset& train, int min_count) {
    if (train.patients.empty()) throw std::invalid_argument("build_vocabulary: empty training dataset");
    if (min_count < 1) throw std::invalid_argument("build_vocabulary: min_count must be >= 1");

    struct Acc {
        int64_t count = 0;
        int64_t cont_count = 0;
        int64_t cat_count = 0;
        double sum = 0.0;
        double sum_sq = 0.0;
        std::map<std::string, int64_t> value_counts;
    };
    std::map<std::string, Acc> accs;  // keyed by name for deterministic order

    for (const auto& p : train.patients) {
        for (const auto& o : p.obs) {
            Acc& a = accs[train.feature_name(o.feature_id)];
            a.count++;
            if (o.is_categorical) {
                a.cat_count++;
                a.value_counts[train.category_name(o.cat_value)]++;
            } else {
                a.cont_count++;
                a.sum += o.cont_value;
                a.sum_sq += o.cont_value * o.cont_value;
            }
        }
    }

    Vocabulary vocab;
    int next_cat_id = 1;  // 0 reserved for PAD
    for (const auto& [name, a] : accs) {
        if (a.count < min_count) continue;
        if (a.cont_count > 0 && a.cat_count > 0)
            throw std::invalid_argument("build_vocabulary: feature '" + name +
                                        "' mixes continuous and categorical values");
        Vocabulary::Feature f;
        f.name = name;
        f.id = static_cast<int>(vocab.features.size());
        f.count = a.count;
        f.is_cont = a.cont_count > 0;
        if (f.is_cont) {
            const double n = static_cast<double>(a.cont_count);
            f.mean = a.sum / n;
            double var = a.sum_sq / n - f.mean * f.mean;
            f.std = (var > 1e-24 && a.cont_count > 1) ? std::sqrt(var) : 1.0;
        } else {
            f.unknown_id = next_cat_id++;
            for (const auto& [value, count] : a.value_counts) {
                if (count >= min_count) f.value_ids[value] = next_cat_id++;
            }
        }
        vocab.feature_ids[f.name] = f.id;
        vocab.features.push_back(std::move(f));
    }
    vocab.n_cat_ids = next_cat_id;
    if (vocab.features.empty())
        throw std::runtime_error("build_vocabulary: all features fell below min_count=" + std::to_string(min_count));
    return vocab;
}

double compute_time_std(std::span<const events::WindowPair> train_pairs) {
    double sum = 0.0, sum_sq = 0.0;
    int64_t n = 0;
    for (const auto& pair : train_pairs) {
        for (const auto* side : {&pair.pre, &pair.post}) {
            for (const auto& o : *side) {
                const double rel = o.time - pair.event.time;
                sum += rel;
                sum_sq += rel * rel;
                ++n;
            }
        }
    }
    if (n < 2) return 1.0;
    const double mean = sum / static_cast<double>(n);
    const double var = sum_sq / static_cast<double>(n) - mean * mean;
    return var > 1e-24 ? std::sqrt(var) : 1.0;
}

namespace {

struct Encoded {
    double rel_time;
    int32_t feature_id;
    bool is_cont;
    double cont_value;
    int32_t cat_value_id;
    size_t order;
};

std::optional<TokenRow> finalize(std::vector<Encoded> items, double time_std, int max_len, int min_len) {
    if (static_cast<int>(items.size()) < min_len) return std::nullopt;
    if (static_cast<int>(items.size()) > max_len) {
        // Keep the observations nearest the anchor, then restore time order.
        std::stable_sort(items.begin(), items.end(), [](const Encoded& a, const Encoded& b) {
            return std::abs(a.rel_time) < std::abs(b.rel_time);
        });
        items.resize(static_cast<size_t>(max_len));
        std::sort(items.begin(), items.end(), [](const Encoded& a, const Encoded& b) { return a.order < b.order; });
    }
    TokenRow row;
    const size_t S = static_cast<size_t>(max_len);
    row.times.assign(S, 0.0);
    row.feature_ids.assign(S, 0);
    row.cont_values.assign(S, 0.0);
    row.cat_value_ids.assign(S, 0);
    row.is_cont.assign(S, 0);
    row.mask.assign(S, 0);
    row.n_valid = static_cast<int>(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
        row.times[i] = items[i].rel_time / time_std;
        row.feature_ids[i] = items[i].feature_id;
        row.cont_values[i] = items[i].cont_value;
        row.cat_value_ids[i] = items[i].cat_value_id;
        row.is_cont[i] = items[i].is_cont ? 1 : 0;
        row.mask[i] = 1;
    }
    return row;
}

std::optional<Encoded> encode_one(const Observation& o, double rel_time, const Dataset& dataset,
                                  const Vocabulary& vocab, size_t order) {
    const Vocabulary::Feature* f = vocab.find(dataset.feature_name(o.feature_id));
    if (!f) return std::nullopt;  // dropped feature
    Encoded e;
    e.rel_time = rel_time;
    e.feature_id = f->id;
    e.is_cont = f->is_cont;
    e.order = order;
    if (f->is_cont) {
        if (o.is_categorical) return std::nullopt;
        e.cont_value = (o.cont_value - f->mean) / f->std;
        e.cat_value_id = 0;
    } else {
        if (!o.is_categorical) return std::nullopt;
        auto it = f->value_ids.find(dataset.category_name(o.cat_value));
        e.cat_value_id = it == f->value_ids.end() ? f->unknown_id : it->second;
        e.cont_value = 0.0;
    }
    return e;
}

}  // namespace

std::optional<TokenRow> encode_window(std::span<const Observation> window, double event_time,
                                      const Dataset& dataset, const Vocabulary& vocab, int max_len, int min_len) {
    std::vector<Encoded> items;
    items.reserve(window.size());
    size_t order = 0;
    for (const auto& o : window) {
        if (auto e = encode_one(o, o.time - event_time, dataset, vocab, order++)) items.push_back(*e);
    }
    return finalize(std::move(items), vocab.time_std, max_len, min_len);
}

std::optional<TokenRow> encode_relative(std::span<const RelativeObservation> rel_items, const Dataset& dataset,
                                        const Vocabulary& vocab, int max_len, int min_len) {
    std::vector<Encoded> items;
    items.reserve(rel_items.size());
    size_t order = 0;
    for (const auto& r : rel_items) {
        if (auto e = encode_one(*r.obs, r.rel_time, dataset, vocab, order++)) items.push_back(*e);
    }
    return finalize(std::move(items), vocab.time_std, max_len, min_len);
}

size_t tabular_length(const TabularSpec& spec) {
    return spec.windows.size() * 4 * (static_cast<size_t>(spec.top_k) + 1);
}

std::vector<double> aggregate_tabular(const events::PatientTrajectory& traj, double cutoff_time,
                                      const Dataset& dataset, const Vocabulary& vocab, const TabularSpec& spec) {
    const double nan = std::numeric_limits<double>::quiet_NaN();

    // top_k features by training prevalence; slot index within the block.
    std::vector<int> order(static_cast<size_t>(vocab.n_features()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return vocab.features[static_cast<size_t>(a)].count > vocab.features[static_cast<size_t>(b)].count;
    });
    std::vector<int> slot_of_feature(static_cast<size_t>(vocab.n_features()), -1);
    const int n_real = std::min<int>(spec.top_k, vocab.n_features());
    for (int s = 0; s < n_real; ++s) slot_of_feature[static_cast<size_t>(order[static_cast<size_t>(s)])] = s;
    const int n_slots = spec.top_k + 1;  // +1: relative-observation-time pseudo-feature
    const int pseudo_slot = spec.top_k;

    struct Agg {
        int64_t count = 0;
        double sum = 0.0;
        double min = std::numeric_limits<double>::infinity();
        double max = -std::numeric_limits<double>::infinity();
        void add(double v) {
            ++count;
            sum += v;
            min = std::min(min, v);
            max = std::max(max, v);
        }
    };
    const size_t n_windows = spec.windows.size();
    std::vector<Agg> cells(n_windows * static_cast<size_t>(n_slots));

    for (const auto& o : traj.obs) {
        if (o.time > cutoff_time) continue;
        const Vocabulary::Feature* f = vocab.find(dataset.feature_name(o.feature_id));
        if (!f) continue;
        const double age = cutoff_time - o.time;
        const int slot = slot_of_feature[static_cast<size_t>(f->id)];
        double value;
        if (f->is_cont == !o.is_categorical) {
            value = f->is_cont ? o.cont_value : static_cast<double>(o.cat_value);
        } else {
            continue;
        }
        for (size_t w = 0; w < n_windows; ++w) {
            const double len = spec.windows[w];
            if (len > 0 && age >= len) continue;
            if (slot >= 0) cells[w * static_cast<size_t>(n_slots) + static_cast<size_t>(slot)].add(value);
            cells[w * static_cast<size_t>(n_slots) + static_cast<size_t>(pseudo_slot)].add(o.time - cutoff_time);
        }
    }

    std::vector<double> out;
    out.reserve(tabular_length(spec));
    for (size_t w = 0; w < n_windows; ++w) {
        for (int agg = 0; agg < 4; ++agg) {  // mean, count, min, max
            for (int s = 0; s < n_slots; ++s) {
                const Agg& c = cells[w * static_cast<size_t>(n_slots) + static_cast<size_t>(s)];
                switch (agg) {
                    case 0: out.push_back(c.count ? c.sum / static_cast<double>(c.count) : nan); break;
                    case 1: out.push_back(static_cast<double>(c.count)); break;
                    case 2: out.push_back(c.count ? c.min : nan); break;
                    case 3: out.push_back(c.count ? c.max : nan); break;
                }
            }
        }
    }
    return out;
}

std::string vocabulary_to_json(const Vocabulary& vocab) {
    json j;
    j["time_std"] = vocab.time_std;
    j["n_cat_ids"] = vocab.n_cat_ids;
    json feats = json::array();
    for (const auto& f : vocab.features) {
        json jf;
        jf["name"] = f.name;
        jf["kind"] = f.is_cont ? "continuous" : "categorical";
        jf["id"] = f.id;
        jf["count"] = f.count;
        if (f.is_cont) {
            jf["mean"] = f.mean;
            jf["std"] = f.std;
        } else {
            jf["unknown_id"] = f.unknown_id;
            jf["values"] = f.value_ids;
        }
        feats.push_back(std::move(jf));
    }
    j["features"] = std::move(feats);
    return j.dump(2);
}

Vocabulary vocabulary_from_json(const std::string& text) {
    json j = json::parse(text);
    Vocabulary vocab;
    vocab.time_std = j.at("time_std").get<double>();
    vocab.n_cat_ids = j.at("n_cat_ids").get<int>();
    for (const auto& jf : j.at("features")) {
        Vocabulary::Feature f;
        f.name = jf.at("name").get<std::string>();
        f.is_cont = jf.at("kind").get<std::string>() == "continuous";
        f.id = jf.at("id").get<int>();
        f.count = jf.at("count").get<int64_t>();
        if (f.is_cont) {
            f.mean = jf.at("mean").get<double>();
            f.std = jf.at("std").get<double>();
        } else {
            f.unknown_id = jf.at("unknown_id").get<int>();
            f.value_ids = jf.at("values").get<std::map<std::string, int>>();
        }
        vocab.feature_ids[f.name] = f.id;
        vocab.features.push_back(std::move(f));
    }
    return vocab;
}

void write_vocabulary(const Vocabulary& vocab, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary: " + path);
    out << vocabulary_to_json(vocab) << "\n";
}

Vocabulary read_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocabulary: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return vocabulary_from_json(ss.str());
}

}  // namespace ebcl::feat
