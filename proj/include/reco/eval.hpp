#pragma once

// Benchmark score aggregation, proxy edit metrics for synthetic pairs, and
// an HTTP rater client with a seeded offline mock.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "reco/datagen.hpp"
#include "reco/errors.hpp"
#include "reco/instruction.hpp"
#include "reco/latents.hpp"

namespace reco {

inline constexpr std::array<const char*, 9> kScoreFields = {"sa", "sp", "cp", "an", "sn", "mn", "vf", "ts", "es"};

struct ScoreCard {
    std::array<double, 9> scores{};  // sa sp cp | an sn mn | vf ts es
    Task task = Task::add;
    std::string sample_id;

    double& sa() { return scores[0]; }
    double sa() const { return scores[0]; }

    void validate() const {
        for (std::size_t i = 0; i < scores.size(); ++i)
            if (!(scores[i] >= 0.0 && scores[i] <= 10.0))
                throw ValidationError(std::string("ScoreCard: ") + kScoreFields[i] + " = " +
                                      std::to_string(scores[i]) + " outside [0,10]");
    }
    bool operator==(const ScoreCard&) const = default;
};

struct CategoryScores {
    double s_ea = 0, s_vn = 0, s_vq = 0, s = 0;
    bool operator==(const CategoryScores&) const = default;
};

/// Round half away from zero to two decimals. Values within 1e-9 (relative)
/// of a half-cent boundary count as on it, so 8.225 rounds to 8.23.
inline double round2(double x) {
    const double y = x * 100.0;
    return std::round(y + std::copysign(1e-9 * std::max(1.0, std::abs(y)), y)) / 100.0;
}

inline double geometric_mean3(double a, double b, double c) {
    const double p = a * b * c;
    return p == 0.0 ? 0.0 : std::cbrt(p);
}

inline double overall_from_categories(double s_ea, double s_vn, double s_vq) {
    if (s_ea < 0 || s_vn < 0 || s_vq < 0) throw ValidationError("overall_from_categories: negative category score");
    return (s_ea + s_vn + s_vq) / 3.0;
}

inline CategoryScores category_scores(const ScoreCard& c) {
    c.validate();
    CategoryScores r;
    r.s_ea = geometric_mean3(c.scores[0], c.scores[1], c.scores[2]);
    r.s_vn = geometric_mean3(c.scores[3], c.scores[4], c.scores[5]);
    r.s_vq = geometric_mean3(c.scores[6], c.scores[7], c.scores[8]);
    r.s = overall_from_categories(r.s_ea, r.s_vn, r.s_vq);
    return r;
}

// ---- aggregation --------------------------------------------------------

struct BenchmarkRow {
    Task task = Task::add;
    std::size_t samples = 0;
    std::array<double, 9> sub{};  // per-dimension means
    CategoryScores categories;    // means of per-sample category scores; s from those
    bool operator==(const BenchmarkRow&) const = default;
};

struct BenchmarkTable {
    std::array<std::optional<BenchmarkRow>, kNumTasks> rows;  // absent when a task has no cards

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& r : rows) {
            if (!r) continue;
            nlohmann::json row = {{"samples", r->samples},
                                  {"s_ea", round2(r->categories.s_ea)},
                                  {"s_vn", round2(r->categories.s_vn)},
                                  {"s_vq", round2(r->categories.s_vq)},
                                  {"s", round2(r->categories.s)}};
            for (std::size_t i = 0; i < 9; ++i) row[kScoreFields[i]] = round2(r->sub[i]);
            j[task_name(r->task)] = row;
        }
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << std::left << std::setw(8) << "task" << std::right;
        for (auto f : kScoreFields) os << std::setw(7) << f;
        for (auto f : {"S_EA", "S_VN", "S_VQ", "S"}) os << std::setw(7) << f;
        os << std::setw(6) << "n" << '\n';
        os << std::fixed << std::setprecision(2);
        for (const auto& r : rows) {
            if (!r) continue;
            os << std::left << std::setw(8) << task_name(r->task) << std::right;
            for (double v : r->sub) os << std::setw(7) << round2(v);
            for (double v : {r->categories.s_ea, r->categories.s_vn, r->categories.s_vq, r->categories.s})
                os << std::setw(7) << round2(v);
            os << std::setw(6) << r->samples << '\n';
        }
        return os.str();
    }
};

/// Per task: sub-dimension means, and category scores averaged over
/// per-sample geometric means; S is the mean of the three averaged
/// categories. Cards are summed in a canonical order so the result does not
/// depend on input order.
inline BenchmarkTable aggregate_benchmark(std::vector<ScoreCard> cards) {
    if (cards.empty()) throw ValidationError("aggregate_benchmark: no score cards");
    std::sort(cards.begin(), cards.end(), [](const ScoreCard& a, const ScoreCard& b) {
        if (a.task != b.task) return a.task < b.task;
        if (a.sample_id != b.sample_id) return a.sample_id < b.sample_id;
        return a.scores < b.scores;
    });
    BenchmarkTable t;
    for (std::size_t k = 0; k < kNumTasks; ++k) {
        const Task task = static_cast<Task>(k);
        BenchmarkRow row;
        row.task = task;
        double ea = 0, vn = 0, vq = 0;
        for (const auto& c : cards) {
            if (c.task != task) continue;
            const auto cs = category_scores(c);
            for (std::size_t i = 0; i < 9; ++i) row.sub[i] += c.scores[i];
            ea += cs.s_ea;
            vn += cs.s_vn;
            vq += cs.s_vq;
            ++row.samples;
        }
        if (row.samples == 0) continue;
        const double n = static_cast<double>(row.samples);
        for (auto& v : row.sub) v /= n;
        row.categories.s_ea = ea / n;
        row.categories.s_vn = vn / n;
        row.categories.s_vq = vq / n;
        row.categories.s = overall_from_categories(row.categories.s_ea, row.categories.s_vn, row.categories.s_vq);
        t.rows[k] = row;
    }
    return t;
}

/// A row of published category scores (system, task, S_EA, S_VN, S_VQ) for
/// recomputing the overall column.
struct CategoryRow {
    std::string system;
    Task task = Task::add;
    double s_ea = 0, s_vn = 0, s_vq = 0;
    std::optional<double> s_reported;
};

inline std::vector<CategoryRow> read_category_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<CategoryRow> rows;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            CategoryRow r;
            r.system = j.value("system", "");
            r.task = task_from_name(j.at("task").get<std::string>());
            r.s_ea = j.at("s_ea");
            r.s_vn = j.at("s_vn");
            r.s_vq = j.at("s_vq");
            if (j.contains("s")) r.s_reported = j.at("s").get<double>();
            rows.push_back(r);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError::malformed(path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return rows;
}

// ---- score card persistence ---------------------------------------------

inline nlohmann::json to_json(const ScoreCard& c) {
    nlohmann::json j = {{"task", task_name(c.task)}, {"sample_id", c.sample_id}};
    for (std::size_t i = 0; i < 9; ++i) j[kScoreFields[i]] = c.scores[i];
    return j;
}

inline ScoreCard scorecard_from_json(const nlohmann::json& j) {
    ScoreCard c;
    c.task = task_from_name(j.at("task").get<std::string>());
    c.sample_id = j.value("sample_id", "");
    for (std::size_t i = 0; i < 9; ++i) c.scores[i] = j.at(kScoreFields[i]).get<double>();
    c.validate();
    return c;
}

inline void write_scorecards(const std::vector<ScoreCard>& cards, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const auto& c : cards) out << to_json(c).dump() << '\n';
    if (!out) throw IoError("write failed for " + path);
}

inline std::vector<ScoreCard> read_scorecards(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<ScoreCard> cards;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            cards.push_back(scorecard_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError::malformed(path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return cards;
}

// ---- proxy metrics ------------------------------------------------------

struct ProxyMetrics {
    double edit_change = 0;       // mean |out - src| inside the mask
    double background_error = 0;  // mean |out - src| outside the mask
    double gt_compliance = 0;     // mean (out - gt)^2 inside the mask
    double flicker = 0;           // mean |d_t out - d_t gt| over frame deltas

    nlohmann::json to_json() const {
        return {{"edit_change", edit_change},
                {"background_error", background_error},
                {"gt_compliance", gt_compliance},
                {"flicker", flicker}};
    }
};

inline ProxyMetrics proxy_metrics(const PixelVideo& src, const PixelVideo& out, const PixelVideo& gt,
                                  const PixelMask& mask) {
    if (!src.same_dims(out) || !src.same_dims(gt))
        throw ShapeError("proxy_metrics: source, output and ground truth must share dimensions");
    if (mask.frames != src.frames || mask.height != src.height || mask.width != src.width)
        throw ShapeError("proxy_metrics: mask dimensions differ from the video");
    mask.validate_binary("proxy_metrics");
    double in_change = 0, out_change = 0, in_sq = 0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t cell = 0; cell < mask.cells(); ++cell) {
        const bool inside = mask.values[cell] != 0;
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const std::size_t i = cell * 3 + ch;
            const double d = std::abs(static_cast<double>(out.values[i]) - src.values[i]);
            if (inside) {
                const double e = static_cast<double>(out.values[i]) - gt.values[i];
                in_change += d;
                in_sq += e * e;
                ++n_in;
            } else {
                out_change += d;
                ++n_out;
            }
        }
    }
    ProxyMetrics m;
    if (n_in) {
        m.edit_change = in_change / static_cast<double>(n_in);
        m.gt_compliance = in_sq / static_cast<double>(n_in);
    }
    if (n_out) m.background_error = out_change / static_cast<double>(n_out);
    if (src.frames > 1) {
        const std::size_t per_frame = src.height * src.width * 3;
        double acc = 0;
        for (std::size_t f = 1; f < src.frames; ++f)
            for (std::size_t k = 0; k < per_frame; ++k) {
                const std::size_t i = f * per_frame + k, j = i - per_frame;
                const double d_out = static_cast<double>(out.values[i]) - out.values[j];
                const double d_gt = static_cast<double>(gt.values[i]) - gt.values[j];
                acc += std::abs(d_out - d_gt);
            }
        m.flicker = acc / static_cast<double>((src.frames - 1) * per_frame);
    }
    return m;
}

/// Arithmetic mean of each metric over a list.
inline ProxyMetrics mean_metrics(const std::vector<ProxyMetrics>& ms) {
    ProxyMetrics r;
    if (ms.empty()) return r;
    for (const auto& m : ms) {
        r.edit_change += m.edit_change;
        r.background_error += m.background_error;
        r.gt_compliance += m.gt_compliance;
        r.flicker += m.flicker;
    }
    const double n = static_cast<double>(ms.size());
    r.edit_change /= n;
    r.background_error /= n;
    r.gt_compliance /= n;
    r.flicker /= n;
    return r;
}

// ---- rater client -------------------------------------------------------

inline const std::string kDefaultRaterPrompt =
    "You are grading an instruction-guided video edit. You receive the task type, the source frames and the "
    "edited frames. Return a JSON object with nine numeric fields between 0 and 10: "
    "sa (does the edit do what was asked), sp (are changes confined to the intended region), "
    "cp (is everything else unchanged), an (do the frames look natural), sn (is the result physically "
    "plausible), mn (is motion smooth and coherent), vf (visual fidelity), ts (temporal stability), "
    "es (aesthetic quality).";

struct RaterRequest {
    Task task = Task::add;
    std::string sample_id;
    PixelVideo source, edited;
};

struct RaterOptions {
    int retries = 2;  // extra attempts after a transport failure
    int timeout_seconds = 30;
};

namespace detail {

inline nlohmann::json frames_json(const PixelVideo& v) {
    std::vector<int> px(v.values.size());
    for (std::size_t i = 0; i < px.size(); ++i)
        px[i] = static_cast<int>(std::lround(std::clamp(v.values[i], 0.f, 1.f) * 255.f));
    return {{"frames", v.frames}, {"height", v.height}, {"width", v.width}, {"rgb8", px}};
}

struct Endpoint {
    std::string base;  // scheme://host:port
    std::string path;
};

inline Endpoint parse_endpoint(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw RaterError::transport("endpoint must be an http URL: " + url);
    const auto slash = url.find('/', scheme + 3);
    if (slash == std::string::npos) return {url, "/"};
    return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace detail

inline nlohmann::json rater_request_json(const RaterRequest& req, const std::string& system_prompt) {
    return {{"task", task_name(req.task)},
            {"sample_id", req.sample_id},
            {"source_frames", detail::frames_json(req.source)},
            {"edited_frames", detail::frames_json(req.edited)},
            {"system_prompt", system_prompt}};
}

/// Parses a rater response body: nine numeric fields, at top level or under
/// "scores".
inline ScoreCard parse_rater_response(const std::string& body, Task task, const std::string& sample_id) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
        throw RaterError::malformed(std::string("rater response is not JSON: ") + e.what());
    }
    if (j.is_object() && j.contains("scores")) j = j["scores"];
    if (!j.is_object()) throw RaterError::schema("rater response must be a JSON object");
    ScoreCard c;
    c.task = task;
    c.sample_id = sample_id;
    for (std::size_t i = 0; i < 9; ++i) {
        const char* f = kScoreFields[i];
        if (!j.contains(f)) throw RaterError::schema(std::string("rater response missing field \"") + f + "\"");
        if (!j[f].is_number()) throw RaterError::schema(std::string("rater field \"") + f + "\" is not a number");
        const double v = j[f].get<double>();
        if (!(v >= 0.0 && v <= 10.0))
            throw RaterError::range(std::string("rater field \"") + f + "\" = " + j[f].dump() + " outside [0,10]");
        c.scores[i] = v;
    }
    return c;
}

inline ScoreCard rate_remote(const std::string& endpoint, const RaterRequest& req, const std::string& system_prompt,
                             const RaterOptions& opts = {}) {
    const auto ep = detail::parse_endpoint(endpoint);
    const std::string body = rater_request_json(req, system_prompt).dump();
    std::string last_error;
    for (int attempt = 0; attempt <= std::max(0, opts.retries); ++attempt) {
        httplib::Client cli(ep.base);
        cli.set_connection_timeout(opts.timeout_seconds, 0);
        cli.set_read_timeout(opts.timeout_seconds, 0);
        auto res = cli.Post(ep.path, body, "application/json");
        if (!res) {
            last_error = "request to " + endpoint + " failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            last_error = "rater returned HTTP " + std::to_string(res->status);
            continue;
        }
        return parse_rater_response(res->body, req.task, req.sample_id);
    }
    throw RaterError::transport(last_error);
}

/// Seeded offline rater: scores in [0,10] that depend only on the seed, the
/// task and the sample id.
inline ScoreCard mock_rate(const RaterRequest& req, std::uint64_t seed) {
    std::uint64_t h = splitmix64(seed ^ (static_cast<std::uint64_t>(req.task) + 1) * 0x9e3779b97f4a7c15ULL);
    for (unsigned char ch : req.sample_id) h = splitmix64(h ^ ch);
    ScoreCard c;
    c.task = req.task;
    c.sample_id = req.sample_id;
    for (auto& s : c.scores) {
        h = splitmix64(h);
        s = static_cast<double>(h % 1001) / 100.0;
    }
    return c;
}

/// Rates requests with up to `parallelism` concurrent calls; the result is in
/// request order.
template <class RateFn>
std::vector<ScoreCard> rate_all(const std::vector<RaterRequest>& reqs, RateFn&& rate, std::size_t parallelism = 1) {
    std::vector<std::optional<ScoreCard>> out(reqs.size());
    std::vector<std::exception_ptr> errs(reqs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < reqs.size();) {
            try {
                out[i] = rate(reqs[i]);
            } catch (...) {
                errs[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(parallelism, reqs.size()));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
    }
    std::vector<ScoreCard> cards;
    for (std::size_t i = 0; i < reqs.size(); ++i) {
        if (errs[i]) std::rethrow_exception(errs[i]);
        cards.push_back(*out[i]);
    }
    return cards;
}

}  // namespace reco
