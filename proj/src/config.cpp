#include "kbl/config.hpp"

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <Eigen/Dense>

#include "kbl/field.hpp"

namespace kbl {

namespace {

std::string at(const YAML::Node& n)
{
  const auto m = n.Mark();
  if (m.line < 0) return "";
  return fmt::format(" (line {})", m.line + 1);
}

class Reader {
 public:
  Reader(const YAML::Node& node, std::string section) : node_(node), section_(std::move(section))
  {
    if (node_ && !node_.IsMap()) throw ConfigError(fmt::format("section '{}' must be a mapping{}", section_, at(node_)));
  }

  template <class T>
  void get(const std::string& key, T& out)
  {
    allowed_.insert(key);
    if (!node_) return;
    const YAML::Node v = node_[key];
    if (!v) return;
    try {
      out = v.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(fmt::format("{}.{}: cannot read value '{}'{}", section_, key, v.Scalar(), at(v)));
    }
  }

  void finish() const
  {
    if (!node_) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!allowed_.count(key))
        throw ConfigError(fmt::format("unknown key '{}' in section '{}'{}", key, section_, at(kv.first)));
    }
  }

  const std::string& name() const { return section_; }

 private:
  YAML::Node node_;
  std::string section_;
  std::set<std::string> allowed_;
};

void check(bool ok, const std::string& what)
{
  if (!ok) throw ConfigError(what);
}

template <class F>
void validated(const std::string& section, F&& f)
{
  try {
    f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(fmt::format("invalid {} settings: {}", section, e.what()));
  }
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& origin)
{
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(fmt::format("{}: {} (line {})", origin, e.msg, e.mark.line + 1));
  }
  RunConfig c;
  c.path = origin;
  if (!root || root.IsNull()) return c;
  if (!root.IsMap()) throw ConfigError(origin + ": top level must be a mapping");

  const std::set<std::string> sections{"grid", "weight", "solver", "nonlinear", "gamma",
                                       "boundary", "source", "outputs", "threads"};
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (!sections.count(key)) throw ConfigError(fmt::format("unknown section '{}'{}", key, at(kv.first)));
  }
  if (root["threads"]) {
    try {
      c.threads = root["threads"].as<int>();
    } catch (const YAML::Exception&) {
      throw ConfigError(fmt::format("threads: cannot read value{}", at(root["threads"])));
    }
    check(c.threads >= 1, "threads must be >= 1");
  }

  {
    Reader r(root["grid"], "grid");
    std::string rule = to_string(c.grid.rule);
    std::vector<double> drift{0.0, 0.0};
    r.get("v_max", c.grid.v_max);
    r.get("n_per_axis", c.grid.n_per_axis);
    r.get("rule", rule);
    r.get("drift", drift);
    r.finish();
    validated("grid", [&] {
      c.grid.rule = parse_quad_rule(rule);
      if (drift.size() == 2) drift.push_back(0.0);
      if (drift.size() != 3) throw std::invalid_argument("grid.drift needs 2 or 3 components");
      c.grid.drift = {drift[0], drift[1], drift[2]};
      c.grid.validate();
    });
  }
  {
    Reader r(root["weight"], "weight");
    r.get("beta", c.weight.beta);
    r.get("varsigma", c.weight.varsigma);
    r.finish();
    validated("weight", [&] { c.weight.validate(); });
  }
  {
    Reader r(root["solver"], "solver");
    auto& s = c.solver;
    std::string cont = to_string(s.continuation);
    r.get("sigma0", s.sigma0);
    r.get("lambda_steps", s.lambda_steps);
    r.get("continuation", cont);
    r.get("n_levels", s.n_levels);
    r.get("n_max", s.n_max);
    r.get("eps_schedule", s.eps_schedule);
    r.get("d_schedule", s.d_schedule);
    r.get("tol", s.tol);
    r.get("cauchy_tol", s.cauchy_tol);
    r.get("compat_tol", s.compat_tol);
    r.get("dx_max", s.dx_max);
    r.get("gmres_restart", s.gmres_restart);
    r.get("gmres_max_iter", s.gmres_max_iter);
    r.get("coarse_dx", s.coarse_dx);
    r.finish();
    validated("solver", [&] {
      s.continuation = parse_continuation(cont);
      s.validate();
    });
  }
  {
    Reader r(root["nonlinear"], "nonlinear");
    auto& n = c.nonlinear;
    r.get("tol", n.tol);
    r.get("max_iter", n.max_iter);
    r.get("sigma", n.sigma);
    r.get("delta_threshold", n.delta_threshold);
    r.get("skip_rel", n.skip_rel);
    r.get("source_orthogonality_tol", n.source_orthogonality_tol);
    r.finish();
    validated("nonlinear", [&] {
      n.validate();
      if (n.sigma >= c.solver.sigma0) throw std::invalid_argument("nonlinear.sigma must be below solver.sigma0");
    });
  }
  {
    Reader r(root["gamma"], "gamma");
    r.get("n_azimuth", c.gamma.n_azimuth);
    r.get("n_polar", c.gamma.n_polar);
    r.get("max_gib", c.gamma.max_gib);
    r.finish();
    check(c.gamma.n_azimuth >= 2 && c.gamma.n_azimuth % 2 == 0, "gamma.n_azimuth must be even and >= 2");
    check(c.gamma.n_polar >= 2 && c.gamma.n_polar % 2 == 0, "gamma.n_polar must be even and >= 2");
    check(c.gamma.max_gib >= 0.0, "gamma.max_gib must be >= 0");
  }
  {
    Reader r(root["boundary"], "boundary");
    r.get("family", c.boundary.family);
    r.get("amplitude", c.boundary.amplitude);
    r.get("file", c.boundary.file);
    r.finish();
    static const std::set<std::string> fam{"zero", "v1v2_gauss", "v1_gauss", "even_gauss", "tabulated"};
    check(fam.count(c.boundary.family), "boundary.family '" + c.boundary.family +
                                            "' must be one of zero, v1v2_gauss, v1_gauss, even_gauss, tabulated");
    check(std::isfinite(c.boundary.amplitude) && c.boundary.amplitude >= 0.0, "boundary.amplitude must be >= 0");
    check(c.boundary.family != "tabulated" || !c.boundary.file.empty(), "boundary.file is required for tabulated data");
  }
  {
    Reader r(root["source"], "source");
    r.get("family", c.source.family);
    r.get("amplitude", c.source.amplitude);
    r.get("decay", c.source.decay);
    r.get("file", c.source.file);
    r.finish();
    static const std::set<std::string> fam{"zero", "v1v2_decay", "tabulated"};
    check(fam.count(c.source.family),
          "source.family '" + c.source.family + "' must be one of zero, v1v2_decay, tabulated");
    check(std::isfinite(c.source.amplitude) && c.source.amplitude >= 0.0, "source.amplitude must be >= 0");
    check(c.source.family == "zero" || c.source.decay >= c.solver.sigma0,
          "source.decay must be >= solver.sigma0 (the source has to decay at the declared rate)");
    check(c.source.family != "tabulated" || !c.source.file.empty(), "source.file is required for tabulated data");
  }
  {
    Reader r(root["outputs"], "outputs");
    r.get("dir", c.outputs.dir);
    r.get("cache", c.outputs.cache);
    r.get("csv", c.outputs.csv);
    r.get("snapshot", c.outputs.snapshot);
    r.get("json", c.outputs.json);
    r.finish();
    check(!c.outputs.dir.empty(), "outputs.dir must not be empty");
  }
  return c;
}

RunConfig load_config(const std::string& path)
{
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path);
}

std::vector<double> read_table(const std::string& path, std::size_t expected)
{
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open table " + path);
  std::vector<double> v;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || !std::isfinite(x))
        throw ConfigError(fmt::format("{}: bad number '{}' (line {})", path, tok, lineno));
      v.push_back(x);
    }
  }
  if (v.size() != expected)
    throw ConfigError(fmt::format("{}: expected {} values (one per velocity node), found {}", path, expected, v.size()));
  return v;
}

std::vector<double> build_boundary(const OperatorSet& op, const BoundarySpec& b, const WeightSpec& w)
{
  const auto& grid = op.grid();
  const std::size_t N = grid.size();
  std::vector<double> f(N, 0.0);
  if (b.family == "zero") return f;
  if (b.family == "tabulated") {
    f = read_table(b.file, N);
    for (std::size_t i = 0; i < N; ++i)
      if (grid.rel(i)[2] >= 0.0 && f[i] != 0.0)
        throw ConfigError(fmt::format("{}: boundary data must vanish where v3 >= 0 (node {})", b.file, i));
    return f;
  }
  auto gauss = [&](std::size_t i) {
    const Vec3& c = grid.rel(i);
    return std::exp(-(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]));
  };
  for (std::size_t i = 0; i < N; ++i) {
    const Vec3& c = grid.rel(i);
    if (c[2] >= 0.0) continue;
    if (b.family == "v1v2_gauss") f[i] = c[0] * c[1] * gauss(i);
    if (b.family == "v1_gauss") f[i] = c[0] * gauss(i);
    if (b.family == "even_gauss") f[i] = (1.0 + 0.5 * c[2] + 0.2 * c[0] * c[0]) * gauss(i);
  }
  if (b.family == "even_gauss") {
    // remove the mass and energy flux moments with exp(-|c|^2) and |c|^2 exp(-|c|^2)
    std::vector<double> h1(N, 0.0), h2(N, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      const Vec3& c = grid.rel(i);
      if (c[2] >= 0.0) continue;
      h1[i] = gauss(i);
      h2[i] = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) * gauss(i);
    }
    const auto m0 = check_compatibility(op, f, 1.0).moments;
    const auto a = check_compatibility(op, h1, 1.0).moments;
    const auto bb = check_compatibility(op, h2, 1.0).moments;
    Eigen::Matrix2d A;
    A << a[0], bb[0], a[3], bb[3];
    const Eigen::Vector2d x = A.fullPivLu().solve(Eigen::Vector2d(m0[0], m0[3]));
    for (std::size_t i = 0; i < N; ++i) f[i] -= x[0] * h1[i] + x[1] * h2[i];
  }
  double mx = 0.0;
  for (std::size_t i = 0; i < N; ++i) mx = std::max(mx, w(grid.vel(i), grid.spec().drift) * std::abs(f[i]));
  if (mx > 0.0)
    for (auto& x : f) x *= b.amplitude / mx;
  return f;
}

std::function<void(double, std::span<double>)> build_source(const OperatorSet& op, const SourceSpec& s,
                                                            const WeightSpec& w)
{
  if (s.family == "zero") return {};
  const auto& grid = op.grid();
  const std::size_t N = grid.size();
  std::vector<double> g(N, 0.0);
  if (s.family == "tabulated") {
    g = read_table(s.file, N);
  } else {
    const auto psi = raw_invariants(grid);
    for (std::size_t i = 0; i < N; ++i) g[i] = grid.rel(i)[0] * grid.rel(i)[1] * psi[0][i];
    double mx = 0.0;
    for (std::size_t i = 0; i < N; ++i) mx = std::max(mx, w(grid.vel(i), grid.spec().drift) * std::abs(g[i]) / op.nu()[i]);
    for (auto& x : g) x *= s.amplitude / mx;
  }
  const double decay = s.decay;
  return [g = std::move(g), decay](double x, std::span<double> out) {
    const double e = std::exp(-decay * x);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = e * g[i];
  };
}

}  // namespace kbl
