// SPDX-License-Identifier: Apache-2.0
#include "diet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <regex>
#include <sstream>

namespace diet {

namespace {

constexpr double kRelErrorFloor = 1e-5;

std::string fmt(const char* pattern, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, value);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- reports

nlohmann::json RankReport::to_json() const {
  nlohmann::json j;
  j["tolerance"] = tolerance;
  j["config"] = config;
  j["passed"] = passed;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : entries) {
    j["entries"].push_back({{"layer", e.layer},
                            {"head", e.head},
                            {"score_rank", e.score_rank},
                            {"token_rank", e.token_rank},
                            {"positional_rank", e.positional_rank}});
  }
  if (trials > 0) {
    j["trials"] = trials;
    j["violations"] = violations;
    j["max_random_rank"] = max_random_rank;
    j["counterexample_seed"] = counterexample_seed ? nlohmann::json(*counterexample_seed) : nlohmann::json(nullptr);
  }
  if (witness_rank >= 0) {
    j["witness_rank"] = witness_rank;
    j["expected_witness_rank"] = expected_witness_rank;
  }
  return j;
}

std::string RankReport::to_csv() const {
  std::ostringstream os;
  os << "layer,head,score_rank,token_rank,positional_rank,tolerance\n";
  for (const auto& e : entries) {
    os << e.layer << "," << e.head << "," << e.score_rank << "," << e.token_rank << "," << e.positional_rank << ","
       << fmt("%.3g", tolerance) << "\n";
  }
  return os.str();
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& g : groups) worst = std::max(worst, g.max_rel_error);
  return worst;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json j;
  j["epsilon"] = epsilon;
  j["max_rel_error"] = max_rel_error();
  j["x_vs_p_max_abs_diff"] = x_vs_p_max_abs_diff;
  j["x_equals_p"] = x_equals_p;
  j["groups"] = nlohmann::json::array();
  for (const auto& g : groups) {
    j["groups"].push_back({{"name", g.name},
                           {"max_rel_error", g.max_rel_error},
                           {"max_abs_error", g.max_abs_error},
                           {"entries_checked", g.entries_checked}});
  }
  return j;
}

// ---------------------------------------------------------------- theorem 1

Matrix theorem1_witness(Index n, Index d, Index d_h, Index d_p) {
  if (d_h < 1 || d_h > d) throw ConfigError("theorem1 witness: need 1 <= d_h <= d");
  if (n < d) throw ConfigError("theorem1 witness: X = [I_d; 0] needs n >= d");
  if (d_p < 0 || d_p > n) throw ConfigError("theorem1 witness: need 0 <= d_p <= n");
  Matrix x = Matrix::Zero(n, d);
  x.topRows(d).setIdentity();
  Matrix w = Matrix::Zero(d, d_h);
  w.topRows(d_h).setIdentity();
  Matrix p = Matrix::Zero(n, d_p);
  if (d_p > 0) p.bottomRows(d_p).setIdentity();
  const Matrix xw = x * w;
  return xw * xw.transpose() + p * p.transpose();
}

RankReport verify_theorem1(Index n, Index d, Index d_h, Index d_p, Index trials, std::uint64_t seed) {
  if (n < d_h + d_p) {
    throw ConfigError("verify_theorem1: hypothesis n >= d_h + d_p violated (n=" + std::to_string(n) + ")");
  }
  RankReport report;
  report.config = {{"n", n}, {"d", d}, {"d_h", d_h}, {"d_p", d_p}, {"trials", trials}, {"seed", seed}};
  report.trials = trials;
  const Rng root(seed);
  for (Index t = 0; t < trials; ++t) {
    const std::uint64_t trial_seed = root.split(static_cast<std::uint64_t>(t))();
    Rng rng(trial_seed);
    const Matrix x = randn_matrix(n, d, 1.0, rng);
    const Matrix p = randn_matrix(n, d, 1.0, rng);
    const Matrix w_q = randn_matrix(d, d_h, 1.0, rng);
    const Matrix w_k = randn_matrix(d, d_h, 1.0, rng);
    const Matrix z = x + p;
    const Matrix scores = (z * w_q) * (z * w_k).transpose();
    const Index rank = numerical_rank(scores, report.tolerance);
    report.max_random_rank = std::max(report.max_random_rank, rank);
    if (rank > d_h) {
      ++report.violations;
      if (!report.counterexample_seed) report.counterexample_seed = trial_seed;
    }
  }
  report.witness_rank = numerical_rank(theorem1_witness(n, d, d_h, d_p), report.tolerance);
  report.expected_witness_rank = std::min(d_h + d_p, n);
  report.passed = report.violations == 0 && report.witness_rank == report.expected_witness_rank;
  return report;
}

// ---------------------------------------------------------------- gradients

double gradient_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

std::vector<Index> entries_to_check(Index size, Index max_entries, Rng& rng) {
  std::vector<Index> all(static_cast<std::size_t>(size));
  std::iota(all.begin(), all.end(), Index{0});
  if (max_entries <= 0 || max_entries >= size) return all;
  // Partial Fisher-Yates with the repo generator keeps the sample reproducible.
  for (Index i = 0; i < max_entries; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(size - i)));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  all.resize(static_cast<std::size_t>(max_entries));
  std::sort(all.begin(), all.end());
  return all;
}

template <typename LossFn>
GradCheckGroup check_tensor(const std::string& name, Matrix& value, const Matrix& analytic, LossFn&& loss_fn,
                            const GradCheckOptions& options, Rng& rng) {
  GradCheckGroup group{name};
  for (const Index flat : entries_to_check(value.size(), options.max_entries, rng)) {
    const Index r = flat / value.cols();
    const Index c = flat % value.cols();
    const double saved = value(r, c);
    value(r, c) = saved + options.epsilon;
    const double plus = loss_fn();
    value(r, c) = saved - options.epsilon;
    const double minus = loss_fn();
    value(r, c) = saved;
    const double numeric = (plus - minus) / (2.0 * options.epsilon);
    group.max_rel_error = std::max(group.max_rel_error, gradient_rel_error(analytic(r, c), numeric));
    group.max_abs_error = std::max(group.max_abs_error, std::abs(analytic(r, c) - numeric));
    ++group.entries_checked;
  }
  return group;
}

void inject(LossAndGrads& lg) {
  auto tensors = lg.grads.weights.tensors();
  tensors.front().value->array() += 1.0;
}

}  // namespace

GradCheckReport gradient_check(const Model& model, const Batch& batch, LossKind kind,
                               const GradCheckOptions& options) {
  LossAndGrads lg = loss_and_grads(model, batch, kind);
  if (options.inject_fault) inject(lg);
  GradCheckReport report;
  report.epsilon = options.epsilon;
  Model work = model;
  Rng rng(options.seed);
  const auto loss_fn = [&] { return loss(work, batch, kind); };

  auto params = work.weights.tensors();
  auto grads = lg.grads.weights.tensors();
  auto pos_params = work.position.tensors();
  auto pos_grads = lg.grads.position.tensors();
  params.insert(params.end(), pos_params.begin(), pos_params.end());
  grads.insert(grads.end(), pos_grads.begin(), pos_grads.end());
  for (std::size_t i = 0; i < params.size(); ++i) {
    report.groups.push_back(check_tensor(params[i].key, *params[i].value, *grads[i].value, loss_fn, options, rng));
  }
  return report;
}

GradCheckReport verify_theorem2(const Model& model, const Batch& batch, LossKind kind,
                                const GradCheckOptions& options) {
  if (!std::holds_alternative<scheme::InputAdditiveLearned>(model.position.scheme())) {
    throw SchemeError("verify_theorem2: requires a learned input-additive position table, model uses '" +
                      scheme_name(model.position.scheme()) + "'");
  }
  LossAndGrads lg = loss_and_grads(model, batch, kind);
  if (options.inject_fault) lg.grads.inputs.front().array() += 1.0;

  GradCheckReport report;
  report.epsilon = options.epsilon;
  const Index n = lg.grads.inputs.front().rows();
  const Matrix grad_p = lg.grads.position.input_table().topRows(n);
  Matrix grad_x = Matrix::Zero(n, grad_p.cols());
  for (const auto& g : lg.grads.inputs) grad_x += g;
  report.x_vs_p_max_abs_diff = (grad_x - grad_p).cwiseAbs().maxCoeff();
  report.x_equals_p = (grad_x.array() == grad_p.array()).all();

  if (!options.finite_differences) return report;
  // Finite differences on P through the model, and on X through the inputs.
  Model work = model;
  Rng rng(options.seed);
  Matrix& table = work.position.mutable_input_table();
  report.groups.push_back(check_tensor("grad_P", table, lg.grads.position.input_table(),
                                       [&] { return loss(work, batch, kind); }, options, rng));

  std::vector<Matrix> embedded;
  for (const auto& ex : batch) embedded.push_back(embed_tokens(model, ex.tokens));
  for (std::size_t e = 0; e < batch.size(); ++e) {
    report.groups.push_back(check_tensor("grad_X[" + std::to_string(e) + "]", embedded[e], lg.grads.inputs[e],
                                         [&] { return loss_from_inputs(model, batch, embedded, kind); }, options,
                                         rng));
  }
  return report;
}

// ---------------------------------------------------------------- rank scan

RankReport rank_scan(const Model& model, const Batch& batch, double rel_tol) {
  RankReport report;
  report.tolerance = rel_tol;
  report.config = to_json(model.config);
  report.config["batch_size"] = batch.size();
  const auto& cfg = model.config.attention;
  for (Index l = 0; l < cfg.layers; ++l) {
    for (Index h = 0; h < cfg.heads; ++h) report.entries.push_back({l, h, 0, 0, 0});
  }
  for (const auto& ex : batch) {
    const auto scores = attention_scores(model, ex.tokens, ex.segments ? &*ex.segments : nullptr);
    for (auto& e : report.entries) {
      const auto& hs = scores[static_cast<std::size_t>(e.layer)][static_cast<std::size_t>(e.head)];
      e.score_rank = std::max(e.score_rank, numerical_rank(hs.scores, rel_tol));
      e.token_rank = std::max(e.token_rank, numerical_rank(hs.token, rel_tol));
      if (hs.bias) e.positional_rank = std::max(e.positional_rank, numerical_rank(*hs.bias, rel_tol));
    }
  }
  return report;
}

// ---------------------------------------------------------------- structural checks

namespace {

void fill_normal(PositionParams& params, double stddev, Rng& rng) {
  for (auto& t : params.tensors()) {
    for (Index i = 0; i < t.value->size(); ++i) t.value->data()[i] = stddev * rng.normal();
  }
}

}  // namespace

CheckResult check_zero_parameter_equivalence(const AttentionConfig& base, Index inputs, std::uint64_t seed) {
  CheckResult result{"zero-parameter-equivalence", true, nlohmann::json::object()};
  result.details["inputs"] = inputs;
  const std::vector<std::pair<std::string, SegmentLocation>> cases = {
      {"diet-abs", SegmentLocation::None}, {"diet-rel", SegmentLocation::None}, {"t5", SegmentLocation::None},
      {"shaw", SegmentLocation::None},     {"diet-abs", SegmentLocation::PerHead}, {"diet-rel", SegmentLocation::PerHead},
      {"t5", SegmentLocation::PerHead},    {"shaw", SegmentLocation::PerHead}};
  for (const auto& [name, location] : cases) {
    AttentionConfig config = base;
    set_variant(config, name);
    config.segment_location = location;
    config.num_segments = location == SegmentLocation::PerHead ? 2 : 1;
    config.validate();
    const PositionParams params(config);
    const SegmentMap segmap = config.num_segments > 1
                                  ? SegmentMap::runs({config.n / 2, config.n - config.n / 2})
                                  : SegmentMap::uniform(config.n);
    const SegmentMap* sp = config.num_segments > 1 ? &segmap : nullptr;
    std::optional<BiasCache> cache;
    if (is_bias_scheme(config.scheme) || sp != nullptr) cache = build_cache(params, config.n, sp);

    Rng rng = Rng(seed).split(static_cast<std::uint64_t>(result.details.size()));
    Index mismatches = 0;
    for (Index t = 0; t < inputs; ++t) {
      const Matrix x = randn_matrix(config.n, config.d, 1.0, rng);
      for (Index l = 0; l < config.layers; ++l) {
        const LayerWeights weights = init_layer_weights(config, rng, 1.0);
        for (Index h = 0; h < config.heads; ++h) {
          const Matrix vanilla = scores_vanilla(x, weights.heads[static_cast<std::size_t>(h)], config.effective_scale());
          const Matrix plain = head_scores(x, weights, params, l, h, sp, config, nullptr);
          if (!(plain.array() == vanilla.array()).all()) ++mismatches;
          if (cache) {
            const Matrix cached = head_scores(x, weights, params, l, h, sp, config, &*cache);
            if (!(cached.array() == vanilla.array()).all()) ++mismatches;
          }
        }
      }
    }
    const std::string key = name + (location == SegmentLocation::PerHead ? "+per-head-segments" : "");
    result.details[key] = {{"mismatches", mismatches}};
    if (mismatches != 0) result.passed = false;
  }
  return result;
}

CheckResult check_toeplitz(const AttentionConfig& base, std::uint64_t seed) {
  CheckResult result{"toeplitz", true, nlohmann::json::object()};
  for (const Sharing sharing : {Sharing::None, Sharing::LayerWise, Sharing::HeadWise}) {
    AttentionConfig config = base;
    set_variant(config, "diet-rel");
    config.sharing = sharing;
    config.segment_location = SegmentLocation::None;
    config.num_segments = 1;
    PositionParams params(config);
    Rng rng = Rng(seed).split(static_cast<std::uint64_t>(sharing));
    fill_normal(params, 1.0, rng);
    Index violations = 0;
    for (Index l = 0; l < config.layers; ++l) {
      for (Index h = 0; h < config.heads; ++h) {
        const Matrix b = positional_bias(params, l, h, config.n);
        for (Index i = 0; i + 1 < config.n; ++i) {
          for (Index j = 0; j + 1 < config.n; ++j) {
            if (b(i, j) != b(i + 1, j + 1)) ++violations;
          }
        }
      }
    }
    result.details[sharing_name(sharing)] = {{"violations", violations}};
    if (violations != 0) result.passed = false;
  }
  return result;
}

CheckResult check_sharing_census(const AttentionConfig& base) {
  CheckResult result{"sharing-census", true, nlohmann::json::object()};
  for (const Sharing sharing : {Sharing::None, Sharing::LayerWise, Sharing::HeadWise}) {
    AttentionConfig config = base;
    if (!is_bias_scheme(config.scheme) && !std::holds_alternative<scheme::ShawRel>(config.scheme)) {
      set_variant(config, "diet-abs");
    }
    config.sharing = sharing;
    const PositionParams params(config);
    std::vector<Index> used;
    for (Index l = 0; l < config.layers; ++l) {
      for (Index h = 0; h < config.heads; ++h) used.push_back(params.slot_index(l, h));
    }
    std::sort(used.begin(), used.end());
    const auto distinct = static_cast<Index>(std::unique(used.begin(), used.end()) - used.begin());
    const Index expected = sharing == Sharing::None        ? config.layers * config.heads
                           : sharing == Sharing::LayerWise ? config.heads
                                                           : config.layers;
    result.details[sharing_name(sharing)] = {
        {"distinct_slots", distinct}, {"slot_count", params.slot_count()}, {"expected", expected}};
    if (distinct != expected || params.slot_count() != expected) result.passed = false;
  }
  return result;
}

// ---------------------------------------------------------------- heatmaps

namespace {

constexpr int kCell = 12;
constexpr int kMargin = 40;

struct Rgb {
  int r, g, b;
};

Rgb color_for(double t, ColorMap map) {
  const int level = static_cast<int>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
  if (map == ColorMap::Grayscale) return {level, level, level};
  return {level, 0, 255 - level};
}

double value_for(const Rgb& c, ColorMap map) {
  if (map == ColorMap::Grayscale) return c.r / 255.0;
  return (c.r + (255 - c.b)) / 510.0;
}

std::string color_map_name(ColorMap map) { return map == ColorMap::Grayscale ? "grayscale" : "blue-red"; }

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string attribute(const std::string& text, const std::string& name) {
  const std::regex re(name + "=\"([^\"]*)\"");
  std::smatch m;
  if (!std::regex_search(text, m, re)) throw InputError("heatmap: missing attribute " + name);
  return m[1];
}

}  // namespace

void export_heatmap(const Eigen::Ref<const Matrix>& m, const std::filesystem::path& path, ColorMap color_map,
                    const std::string& title) {
  require_finite(m, "export_heatmap");
  if (m.size() == 0) throw DimensionError("export_heatmap: empty matrix");
  const double lo = m.minCoeff();
  const double hi = m.maxCoeff();
  const double range = hi - lo;
  const long width = 2 * kMargin + kCell * m.cols();
  const long height = 2 * kMargin + kCell * m.rows();

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << " " << height << "\" data-rows=\"" << m.rows() << "\" data-cols=\""
     << m.cols() << "\" data-min=\"" << fmt("%.17g", lo) << "\" data-max=\"" << fmt("%.17g", hi)
     << "\" data-colormap=\"" << color_map_name(color_map) << "\">\n";
  if (!title.empty()) os << "  <title>" << xml_escape(title) << "</title>\n";
  os << "  <g id=\"cells\" shape-rendering=\"crispEdges\">\n";
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      const double t = range > 0.0 ? (m(i, j) - lo) / range : 0.0;
      const Rgb c = color_for(t, color_map);
      char fill[8];
      std::snprintf(fill, sizeof(fill), "#%02x%02x%02x", c.r, c.g, c.b);
      os << "    <rect x=\"" << kMargin + kCell * j << "\" y=\"" << kMargin + kCell * i << "\" width=\"" << kCell
         << "\" height=\"" << kCell << "\" fill=\"" << fill << "\"/>\n";
    }
  }
  os << "  </g>\n";
  const Rgb lo_c = color_for(0.0, color_map);
  const Rgb hi_c = color_for(1.0, color_map);
  char lo_fill[8], hi_fill[8];
  std::snprintf(lo_fill, sizeof(lo_fill), "#%02x%02x%02x", lo_c.r, lo_c.g, lo_c.b);
  std::snprintf(hi_fill, sizeof(hi_fill), "#%02x%02x%02x", hi_c.r, hi_c.g, hi_c.b);
  os << "  <text x=\"" << kMargin << "\" y=\"" << kMargin / 2 << "\" font-family=\"monospace\" font-size=\"11\" fill=\""
     << lo_fill << "\">min " << fmt("%.6g", lo) << "</text>\n";
  os << "  <text x=\"" << width - kMargin << "\" y=\"" << kMargin / 2
     << "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\" fill=\"" << hi_fill << "\">max "
     << fmt("%.6g", hi) << "</text>\n";
  os << "</svg>\n";

  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("export_heatmap: cannot write " + path.string());
  out << os.str();
  if (!out) throw IoError("export_heatmap: write failed for " + path.string());
}

Matrix read_heatmap(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_heatmap: cannot read " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto svg_open = text.substr(0, text.find('>', text.find("<svg")));
  const Index rows = std::stol(attribute(svg_open, "data-rows"));
  const Index cols = std::stol(attribute(svg_open, "data-cols"));
  const double lo = std::stod(attribute(svg_open, "data-min"));
  const double hi = std::stod(attribute(svg_open, "data-max"));
  const ColorMap map = attribute(svg_open, "data-colormap") == "grayscale" ? ColorMap::Grayscale : ColorMap::BlueRed;

  Matrix out(rows, cols);
  const std::regex rect_re("<rect [^>]*fill=\"#([0-9a-f]{2})([0-9a-f]{2})([0-9a-f]{2})\"");
  Index k = 0;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), rect_re); it != std::sregex_iterator(); ++it, ++k) {
    if (k >= rows * cols) throw InputError("read_heatmap: more cells than declared");
    const Rgb c{std::stoi((*it)[1], nullptr, 16), std::stoi((*it)[2], nullptr, 16), std::stoi((*it)[3], nullptr, 16)};
    out(k / cols, k % cols) = lo + value_for(c, map) * (hi - lo);
  }
  if (k != rows * cols) throw InputError("read_heatmap: expected " + std::to_string(rows * cols) + " cells");
  return out;
}

void write_matrix_csv(const Eigen::Ref<const Matrix>& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("write_matrix_csv: cannot write " + path.string());
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << fmt("%.17g", m(i, j));
    out << "\n";
  }
}

// ---------------------------------------------------------------- diagonal stats

nlohmann::json DiagonalStats::to_json() const {
  return {{"min", min},           {"max", max},
          {"range", max - min},   {"along_mad", along_mad},
          {"across_mad", across_mad}, {"argmax_offset", argmax_offset},
          {"best_offset", best_offset}};
}

DiagonalStats diagonal_stats(const Eigen::Ref<const Matrix>& b) {
  if (b.rows() != b.cols() || b.size() == 0) throw DimensionError("diagonal_stats: need a square matrix, got " + shape_str(b));
  const Index n = b.rows();
  std::vector<double> sums(static_cast<std::size_t>(2 * n - 1), 0.0);
  std::vector<Index> counts(sums.size(), 0);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      sums[static_cast<std::size_t>(j - i + n - 1)] += b(i, j);
      ++counts[static_cast<std::size_t>(j - i + n - 1)];
    }
  }
  DiagonalStats stats;
  Index ai = 0, aj = 0;
  stats.max = b.maxCoeff(&ai, &aj);
  stats.min = b.minCoeff();
  stats.argmax_offset = aj - ai;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < sums.size(); ++k) {
    sums[k] /= static_cast<double>(counts[k]);
    if (sums[k] > best) {
      best = sums[k];
      stats.best_offset = static_cast<Index>(k) - (n - 1);
    }
  }
  const double mean = b.mean();
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      stats.along_mad += std::abs(b(i, j) - sums[static_cast<std::size_t>(j - i + n - 1)]);
      stats.across_mad += std::abs(b(i, j) - mean);
    }
  }
  stats.along_mad /= static_cast<double>(b.size());
  stats.across_mad /= static_cast<double>(b.size());
  return stats;
}

// ---------------------------------------------------------------- cosine stats

nlohmann::json CosineStats::to_json() const {
  return {{"pairs", cosines.size()}, {"mean", mean}, {"stddev", stddev}, {"bins", kCosineBins}, {"histogram", histogram}};
}

std::string CosineStats::to_csv() const {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count\n";
  const double width = 2.0 / static_cast<double>(kCosineBins);
  for (std::size_t b = 0; b < histogram.size(); ++b) {
    os << fmt("%.4f", -1.0 + width * static_cast<double>(b)) << "," << fmt("%.4f", -1.0 + width * static_cast<double>(b + 1))
       << "," << histogram[b] << "\n";
  }
  return os.str();
}

CosineStats position_cosine_stats(const Eigen::Ref<const Matrix>& p) {
  if (p.rows() < 2) throw ConfigError("position_cosine_stats: need at least two rows");
  Vector norms(p.rows());
  for (Index i = 0; i < p.rows(); ++i) {
    norms(i) = p.row(i).norm();
    if (norms(i) == 0.0) throw NumericError("position_cosine_stats: row " + std::to_string(i) + " is zero");
  }
  CosineStats stats;
  stats.histogram.assign(static_cast<std::size_t>(kCosineBins), 0);
  for (Index i = 0; i < p.rows(); ++i) {
    for (Index j = i + 1; j < p.rows(); ++j) {
      const double c = std::clamp(p.row(i).dot(p.row(j)) / (norms(i) * norms(j)), -1.0, 1.0);
      stats.cosines.push_back(c);
      const auto bin = std::min<Index>(kCosineBins - 1, static_cast<Index>((c + 1.0) / 2.0 * kCosineBins));
      ++stats.histogram[static_cast<std::size_t>(bin)];
    }
  }
  const double count = static_cast<double>(stats.cosines.size());
  stats.mean = std::accumulate(stats.cosines.begin(), stats.cosines.end(), 0.0) / count;
  double var = 0.0;
  for (double c : stats.cosines) var += (c - stats.mean) * (c - stats.mean);
  stats.stddev = std::sqrt(var / count);
  return stats;
}

}  // namespace diet
