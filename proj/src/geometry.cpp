#include "mergeforge/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mergeforge/checkpoint_io.hpp"
#include "mergeforge/errors.hpp"

namespace mergeforge {

bool glob_match(std::string_view pattern, std::string_view text) {
    // iterative '*'/'?' matcher with backtracking to the last star
    std::size_t p = 0, t = 0;
    std::size_t star = std::string_view::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
            ++p;
            ++t;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

bool ParamFilter::selects(const std::string& name) const {
    bool included = false;
    for (const auto& pat : include_patterns)
        if (glob_match(pat, name)) {
            included = true;
            break;
        }
    if (!included) return false;
    for (const auto& pat : exclude_patterns)
        if (glob_match(pat, name)) return false;
    return true;
}

double pairwise_sum(std::span<const double> values) {
    if (values.size() <= 32) {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

namespace {

struct Partials {
    double diff_sq = 0, aa = 0, bb = 0, ab = 0;
    std::int64_t n = 0;
};

Partials tensor_partials(const Tensor& ta, const Tensor& tb, const std::string& name) {
    if (ta.shape != tb.shape)
        throw_incompatible("distance: tensor '" + name + "' shape " + shape_to_string(ta.shape) +
                           " != " + shape_to_string(tb.shape));
    const Eigen::ArrayXd a = ta.to_f32().cast<double>();
    const Eigen::ArrayXd b = tb.to_f32().cast<double>();
    Partials p;
    p.n = a.size();
    const Eigen::ArrayXd diff = (a - b).square();
    const Eigen::ArrayXd asq = a.square();
    const Eigen::ArrayXd bsq = b.square();
    const Eigen::ArrayXd prod = a * b;
    p.diff_sq = pairwise_sum({diff.data(), static_cast<std::size_t>(diff.size())});
    p.aa = pairwise_sum({asq.data(), static_cast<std::size_t>(asq.size())});
    p.bb = pairwise_sum({bsq.data(), static_cast<std::size_t>(bsq.size())});
    p.ab = pairwise_sum({prod.data(), static_cast<std::size_t>(prod.size())});
    return p;
}

DistanceReport finalize(const std::string& id_a, const std::string& id_b, const Partials& total) {
    if (total.n == 0) throw_usage("distance: the filter selected no parameters");
    if (total.aa == 0.0 || total.bb == 0.0)
        throw_usage("distance: zero-norm parameter vector, cosine undefined");
    DistanceReport r;
    r.model_a = id_a;
    r.model_b = id_b;
    r.param_count = total.n;
    r.l2_normalized = std::sqrt(total.diff_sq) / static_cast<double>(total.n);
    r.cosine = total.ab / (std::sqrt(total.aa) * std::sqrt(total.bb));
    return r;
}

template <typename NamesA, typename NamesB>
void require_same_selection(const NamesA& sel_a, const NamesB& sel_b) {
    for (const auto& n : sel_a)
        if (std::find(sel_b.begin(), sel_b.end(), n) == sel_b.end())
            throw_incompatible("distance: tensor '" + n + "' selected in one checkpoint only");
    for (const auto& n : sel_b)
        if (std::find(sel_a.begin(), sel_a.end(), n) == sel_a.end())
            throw_incompatible("distance: tensor '" + n + "' selected in one checkpoint only");
}

}  // namespace

DistanceReport distance(const Checkpoint& a, const Checkpoint& b, const ParamFilter& filter) {
    std::vector<std::string> sel_a, sel_b;
    for (const auto& [name, _] : a.tensors)
        if (filter.selects(name)) sel_a.push_back(name);
    for (const auto& [name, _] : b.tensors)
        if (filter.selects(name)) sel_b.push_back(name);
    require_same_selection(sel_a, sel_b);

    Partials total;
    for (const auto& name : sel_a) {  // lexicographic: map order
        const Partials p = tensor_partials(a.tensors.at(name), b.tensors.at(name), name);
        total.diff_sq += p.diff_sq;
        total.aa += p.aa;
        total.bb += p.bb;
        total.ab += p.ab;
        total.n += p.n;
    }
    return finalize(a.id, b.id, total);
}

DistanceReport distance_files(const std::filesystem::path& path_a,
                              const std::filesystem::path& path_b, const ParamFilter& filter) {
    CheckpointReader ra(path_a), rb(path_b);
    std::vector<std::string> sel_a, sel_b;
    for (const auto& m : ra.metas())
        if (filter.selects(m.name)) sel_a.push_back(m.name);
    for (const auto& m : rb.metas())
        if (filter.selects(m.name)) sel_b.push_back(m.name);
    require_same_selection(sel_a, sel_b);

    Partials total;
    for (const auto& m : ra.metas()) {
        if (!filter.selects(m.name)) continue;
        const Tensor ta = ra.read(m);
        const Tensor tb = rb.read(m.name);
        const Partials p = tensor_partials(ta, tb, m.name);
        total.diff_sq += p.diff_sq;
        total.aa += p.aa;
        total.bb += p.bb;
        total.ab += p.ab;
        total.n += p.n;
    }
    auto file_id = [](const CheckpointReader& r) {
        auto it = r.file_metadata().find("model_id");
        return it != r.file_metadata().end() ? it->second : r.path().stem().string();
    };
    return finalize(file_id(ra), file_id(rb), total);
}

// -----------------------------------------------------------------------------
// Spearman rank correlation
// -----------------------------------------------------------------------------

namespace {

std::vector<double> average_ranks(std::span<const double> xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[idx[j + 1]] == xs[idx[i]]) ++j;
        const double rank = (static_cast<double>(i + j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = rank;
        i = j + 1;
    }
    return ranks;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
    const auto n = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0)
        throw_usage("spearman: all-equal input, correlation undefined");
    return sxy / std::sqrt(sxx * syy);
}

// Regularized incomplete beta via the standard continued fraction.
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 200;
    constexpr double kEps = 3e-16, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

double ibeta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double bt =
        std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                 b * std::log1p(-x));
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

double t_two_sided_p(double t, double dof) {
    return ibeta(dof / 2.0, 0.5, dof / (dof + t * t));
}

// Two-sided exact permutation p: double the smaller tail of the permutation
// distribution of rho, capped at 1.
double exact_permutation_p(std::span<const double> rank_x, std::span<const double> rank_y,
                           double rho_obs) {
    std::vector<std::size_t> perm(rank_y.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::uint64_t total = 0, ge = 0, le = 0;
    constexpr double kEps = 1e-12;
    std::vector<double> permuted(rank_y.size());
    do {
        for (std::size_t i = 0; i < perm.size(); ++i) permuted[i] = rank_y[perm[i]];
        const double r = pearson(rank_x, permuted);
        ++total;
        if (r >= rho_obs - kEps) ++ge;
        if (r <= rho_obs + kEps) ++le;
    } while (std::next_permutation(perm.begin(), perm.end()));
    const double tail = static_cast<double>(std::min(ge, le));
    return std::min(1.0, 2.0 * tail / static_cast<double>(total));
}

}  // namespace

SpearmanResult spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size())
        throw_usage("spearman: length mismatch (" + std::to_string(xs.size()) + " vs " +
                    std::to_string(ys.size()) + ")");
    if (xs.size() < 3) throw_usage("spearman: need at least 3 observations");
    for (std::size_t i = 0; i < xs.size(); ++i)
        if (!std::isfinite(xs[i]) || !std::isfinite(ys[i]))
            throw_usage("spearman: non-finite input at index " + std::to_string(i));

    const std::vector<double> rx = average_ranks(xs);
    const std::vector<double> ry = average_ranks(ys);
    SpearmanResult result;
    result.rho = pearson(rx, ry);

    const std::size_t n = xs.size();
    if (n <= 8) {
        result.p_two_sided = exact_permutation_p(rx, ry, result.rho);
    } else {
        const double dof = static_cast<double>(n - 2);
        const double denom = 1.0 - result.rho * result.rho;
        if (denom <= 0.0) {
            result.p_two_sided = 0.0;
        } else {
            const double t = result.rho * std::sqrt(dof / denom);
            result.p_two_sided = t_two_sided_p(t, dof);
        }
    }
    return result;
}

}  // namespace mergeforge
