#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>

#include "kbl/artifacts.hpp"
#include "kbl/config.hpp"
#include "kbl/pipeline.hpp"
#include "support.hpp"

using namespace kbl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
  {
    path = fs::temp_directory_path() / ("kbl_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& name) const { return (path / name).string(); }
};

std::string error_of(const std::string& yaml)
{
  try {
    parse_config(yaml, "test.yaml");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

void write_file(const std::string& path, const std::string& text)
{
  std::ofstream(path) << text;
}

std::string slurp(const std::string& path)
{
  std::ifstream is(path, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// small but complete linear run
std::string small_run(const std::string& family, const std::string& out)
{
  return "grid:\n  n_per_axis: 6\n"
         "solver:\n  d_schedule: [2, 4]\n  eps_schedule: [1.0e-1, 1.0e-2]\n  dx_max: 0.125\n"
         "boundary:\n  family: " +
         family + "\n  amplitude: 0.05\noutputs:\n  dir: " + out + "\n";
}

int run_cli(const std::string& args, const std::string& log)
{
  const std::string cmd = std::string(KBL_CLI_PATH) + " " + args + " > " + log + " 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

}  // namespace

TEST_CASE("config: defaults and a complete document")
{
  const RunConfig d = parse_config("{}");
  CHECK(d.grid.n_per_axis == 16);
  CHECK(d.weight.beta == 3.0);
  CHECK(d.threads == 1);
  CHECK(d.boundary.family == "zero");

  const RunConfig c = parse_config(
      "grid:\n  n_per_axis: 12\n  v_max: 5.5\n  rule: uniform\n  drift: [0.1, -0.2]\n"
      "weight:\n  beta: 4\n  varsigma: 0.1\n"
      "solver:\n  sigma0: 0.4\n  d_schedule: [4, 8]\n"
      "nonlinear:\n  sigma: 0.1\n"
      "gamma:\n  n_azimuth: 12\n  n_polar: 6\n"
      "boundary:\n  family: v1v2_gauss\n  amplitude: 0.02\n"
      "outputs:\n  dir: somewhere\n  csv: false\n"
      "threads: 2\n");
  CHECK(c.grid.n_per_axis == 12);
  CHECK(c.grid.v_max == 5.5);
  CHECK(c.grid.rule == QuadRule::Uniform);
  CHECK(c.grid.drift[0] == 0.1);
  CHECK(c.grid.drift[1] == -0.2);
  CHECK(c.grid.drift[2] == 0.0);
  CHECK(c.weight.beta == 4.0);
  CHECK(c.solver.sigma0 == 0.4);
  CHECK(c.solver.d_schedule == std::vector<double>{4.0, 8.0});
  CHECK(c.nonlinear.sigma == 0.1);
  CHECK(c.gamma.n_azimuth == 12);
  CHECK(c.boundary.amplitude == 0.02);
  CHECK(c.outputs.dir == "somewhere");
  CHECK_FALSE(c.outputs.csv);
  CHECK(c.threads == 2);
}

TEST_CASE("config: errors name the field and the line")
{
  CHECK(error_of("grid:\n  n_per_axis: 5\n").find("grid") != std::string::npos);
  const std::string unknown = error_of("grid:\n  n_per_axis: 8\n  colour: red\n");
  CHECK(unknown.find("colour") != std::string::npos);
  CHECK(unknown.find("line 3") != std::string::npos);
  const std::string type = error_of("weight:\n  beta: lots\n");
  CHECK(type.find("weight.beta") != std::string::npos);
  CHECK(type.find("line 2") != std::string::npos);
  CHECK(error_of("bogus:\n  x: 1\n").find("bogus") != std::string::npos);
  CHECK(error_of("grid: [1, 2\n").find("line") != std::string::npos);
  CHECK(error_of("solver:\n  d_schedule: [8, 4]\n").find("solver") != std::string::npos);
  CHECK(error_of("nonlinear:\n  sigma: 0.5\nsolver:\n  sigma0: 0.3\n").find("sigma") != std::string::npos);
  CHECK(error_of("gamma:\n  n_polar: 3\n").find("gamma") != std::string::npos);
  CHECK(error_of("boundary:\n  family: nope\n").find("nope") != std::string::npos);
  CHECK(error_of("boundary:\n  family: tabulated\n").find("file") != std::string::npos);
  CHECK(error_of("source:\n  family: v1v2_decay\n  decay: 0.1\n").find("decay") != std::string::npos);
  CHECK(error_of("grid:\n  drift: [0, 0, 0.5]\n") != "");
  CHECK_THROWS_AS(load_config("/nonexistent/kbl.yaml"), ConfigError);
}

TEST_CASE("overrides: flag beats environment beats config")
{
  RunConfig c = parse_config("outputs:\n  dir: from_config\n  cache: cfg_cache\n");
  ::unsetenv("KBL_OUT_DIR");
  ::unsetenv("KBL_CACHE_DIR");
  apply_overrides(c, {});
  CHECK(c.outputs.dir == "from_config");
  ::setenv("KBL_OUT_DIR", "from_env", 1);
  ::setenv("KBL_CACHE_DIR", "env_cache", 1);
  apply_overrides(c, {});
  CHECK(c.outputs.dir == "from_env");
  CHECK(c.outputs.cache == "env_cache");
  RunOverrides f;
  f.out_dir = "from_flag";
  f.threads = 3;
  apply_overrides(c, f);
  CHECK(c.outputs.dir == "from_flag");
  CHECK(c.outputs.cache == "env_cache");
  CHECK(c.threads == 3);
  f.threads = 0;
  CHECK_THROWS_AS(apply_overrides(c, f), ConfigError);
  ::unsetenv("KBL_OUT_DIR");
  ::unsetenv("KBL_CACHE_DIR");
}

TEST_CASE("boundary and source builders")
{
  const OperatorSet& op = test::shared_operator(6);
  const auto& g = op.grid();
  const auto w = node_weights(g, WeightSpec{});
  for (const std::string fam : {"v1v2_gauss", "v1_gauss", "even_gauss"}) {
    BoundarySpec b;
    b.family = fam;
    b.amplitude = 0.07;
    const auto fb = build_boundary(op, b, WeightSpec{});
    double sup = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g.rel(i)[2] >= 0.0) CHECK(fb[i] == 0.0);
      sup = std::max(sup, w[i] * std::abs(fb[i]));
    }
    CHECK(sup == doctest::Approx(0.07).epsilon(1e-12));
    const auto comp = check_compatibility(op, fb, 1e-10);
    CHECK(comp.pass == (fam != "v1_gauss"));
  }
  BoundarySpec z;
  for (double v : build_boundary(op, z, WeightSpec{})) CHECK(v == 0.0);

  SourceSpec s;
  s.family = "v1v2_decay";
  s.amplitude = 0.01;
  s.decay = 1.0;
  const auto src = build_source(op, s, WeightSpec{});
  REQUIRE(src);
  std::vector<double> out(g.size());
  src(0.0, out);
  double sup = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) sup = std::max(sup, w[i] * std::abs(out[i]) / op.nu()[i]);
  CHECK(sup == doctest::Approx(0.01).epsilon(1e-12));
  std::vector<double> later(g.size());
  src(2.0, later);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(later[i] == doctest::Approx(out[i] * std::exp(-2.0)));
  CHECK_FALSE(build_source(op, SourceSpec{}, WeightSpec{}));
}

TEST_CASE("tabulated data files")
{
  const OperatorSet& op = test::shared_operator(6);
  const auto& g = op.grid();
  TempDir dir("table");
  std::ostringstream ok, bad;
  ok << "# one value per node\n";
  for (std::size_t i = 0; i < g.size(); ++i) {
    ok << (g.rel(i)[2] < 0.0 ? 0.001 * static_cast<double>(i % 7) : 0.0) << (i % 5 == 4 ? "\n" : " ");
    bad << 1.0 << "\n";
  }
  write_file(dir.str("ok.txt"), ok.str());
  write_file(dir.str("bad.txt"), bad.str());
  write_file(dir.str("short.txt"), "1 2 3\n");
  BoundarySpec b;
  b.family = "tabulated";
  b.file = dir.str("ok.txt");
  const auto fb = build_boundary(op, b, WeightSpec{});
  CHECK(fb.size() == g.size());
  b.file = dir.str("bad.txt");
  CHECK_THROWS_AS(build_boundary(op, b, WeightSpec{}), ConfigError);
  CHECK_THROWS_AS(read_table(dir.str("short.txt"), g.size()), ConfigError);
  write_file(dir.str("nan.txt"), "1 x 3\n");
  CHECK_THROWS_AS(read_table(dir.str("nan.txt"), 3), ConfigError);
}

TEST_CASE("profiles CSV and snapshot round trips")
{
  const OperatorSet& op = test::shared_operator(6);
  const auto& g = op.grid();
  TempDir dir("artifacts");
  const SlabGrid slab = SlabGrid::make(2.0, 0.5, 1);
  KineticField f = KineticField::zero(slab, static_cast<Eigen::Index>(g.size()));
  std::mt19937_64 rng(59);
  std::normal_distribution<double> nd;
  for (Eigen::Index i = 0; i < f.edge.size(); ++i) f.edge.data()[i] = nd(rng) * 1e-3;
  for (Eigen::Index i = 0; i < f.center.size(); ++i) f.center.data()[i] = nd(rng) / 3.0;

  const auto rows = profile_rows(op, f, WeightSpec{});
  CHECK(rows.size() == f.sample_x().size());
  write_profiles_csv(dir.str("p.csv"), rows);
  CHECK(slurp(dir.str("p.csv")).rfind(kProfileColumns, 0) == 0);
  const auto back = read_profiles_csv(dir.str("p.csv"));
  REQUIRE(back.size() == rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    CHECK(back[k].x == rows[k].x);
    CHECK(back[k].a == rows[k].a);
    CHECK(back[k].b3 == rows[k].b3);
    CHECK(back[k].sup_wf == rows[k].sup_wf);
    CHECK(back[k].ip_nu_norm == rows[k].ip_nu_norm);
  }

  write_snapshot(dir.str("f.bin"), g.hash(), f);
  const Snapshot s = read_snapshot(dir.str("f.bin"));
  CHECK(s.grid_hash == g.hash());
  CHECK(s.x == f.sample_x());
  CHECK(s.values == f.samples());
  CHECK(fs::file_size(dir.str("f.bin")) == 64 + 8 * (s.x.size() + s.x.size() * g.size()));
  // rows recomputed from the snapshot agree bit for bit
  const auto again = profile_rows(op, s.x, s.values, WeightSpec{});
  for (std::size_t k = 0; k < rows.size(); ++k) CHECK(again[k].c == rows[k].c);

  // ip_nu_norm sees only the part of f outside the invariants
  Eigen::MatrixXd inv(g.size(), 2);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto c = g.rel(i);
    inv(i, 0) = (1.0 + 0.5 * c[0] - 0.25 * (test::norm2(c) - 3.0)) * test::sqrt_mu(c);
    inv(i, 1) = inv(i, 0) + c[0] * c[1] * test::sqrt_mu(c);
  }
  std::vector<double> cross(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) cross[i] = inv(i, 1) - inv(i, 0);
  const auto pr = profile_rows(op, {0.0, 1.0}, inv, WeightSpec{});
  CHECK(pr[0].ip_nu_norm < 1e-12 * op.nu_norm(std::vector<double>(inv.col(0).data(), inv.col(0).data() + g.size())));
  CHECK(pr[1].ip_nu_norm == doctest::Approx(op.nu_norm(cross)).epsilon(1e-10));

  write_file(dir.str("junk.bin"), std::string(100, 'x'));
  CHECK_THROWS(read_snapshot(dir.str("junk.bin")));
  write_file(dir.str("junk.csv"), "x,y\n1,2\n");
  CHECK_THROWS(read_profiles_csv(dir.str("junk.csv")));
}

TEST_CASE("JSON reports")
{
  TempDir dir("json");
  const auto id = IdentityReport::make("flux", 1e-12, 0.0, Provenance::Paper, 1e-8);
  nlohmann::json j;
  j["identities"] = to_json(std::vector<IdentityReport>{id});
  SequenceMonitor m;
  m.a = {1.0, 0.1, 0.01};
  j["history"] = to_json(sequence_bound(m));
  write_json(dir.str("r.json"), j);
  const auto r = read_json(dir.str("r.json"));
  CHECK(r["identities"][0]["name"] == "flux");
  CHECK(r["identities"][0]["tag"] == "PAPER");
  CHECK(r["identities"][0]["pass"] == true);
  CHECK(r["identities"][0]["computed"].get<double>() == 1e-12);
  CHECK(r["history"]["class"] == "contractive");
  CHECK_THROWS(read_json(dir.str("missing.json")));
}

TEST_CASE("operator cache keyed by grid, kernel version and weight")
{
  TempDir dir("cache");
  GridSpec gs;
  gs.n_per_axis = 6;
  const VelocityGrid g(gs);
  const std::string p1 = operator_cache_path(dir.path.string(), g, WeightSpec{});
  CHECK(p1.find(fmt::format("{:016x}", g.hash())) != std::string::npos);
  CHECK(p1.find("_k" + std::to_string(kKernelVersion) + "_") != std::string::npos);
  WeightSpec w2;
  w2.beta = 4.0;
  CHECK(operator_cache_path(dir.path.string(), g, w2) != p1);
  GridSpec gs2 = gs;
  gs2.n_per_axis = 8;
  CHECK(operator_cache_path(dir.path.string(), VelocityGrid(gs2), WeightSpec{}) != p1);
  // the key follows the nodes: v_max does not move Gauss-Hermite nodes but does move uniform ones
  GridSpec gs3 = gs;
  gs3.v_max = 5.0;
  CHECK(operator_cache_path(dir.path.string(), VelocityGrid(gs3), WeightSpec{}) == p1);
  gs3.rule = QuadRule::Uniform;
  GridSpec gs4 = gs3;
  gs4.v_max = 6.0;
  CHECK(operator_cache_path(dir.path.string(), VelocityGrid(gs3), WeightSpec{}) !=
        operator_cache_path(dir.path.string(), VelocityGrid(gs4), WeightSpec{}));

  CacheOutcome a, b, c;
  const OperatorSet op1 = load_or_assemble(g, WeightSpec{}, dir.path.string(), a);
  CHECK_FALSE(a.hit);
  CHECK(a.written);
  CHECK(fs::exists(a.path));
  const OperatorSet op2 = load_or_assemble(g, WeightSpec{}, dir.path.string(), b);
  CHECK(b.hit);
  CHECK(op2.kappa1() == op1.kappa1());
  CHECK(op2.c0() == op1.c0());
  const OperatorSet op3 = load_or_assemble(g, w2, dir.path.string(), c);
  CHECK_FALSE(c.hit);
  CacheOutcome none;
  load_or_assemble(g, WeightSpec{}, "", none);
  CHECK(none.path.empty());
  CHECK_FALSE(none.written);
}

TEST_CASE("pipeline in process: linear run, verify and reproducibility")
{
  TempDir dir("pipeline");
  for (const char* sub : {"a", "b"}) {
    const RunConfig cfg = parse_config(small_run("v1v2_gauss", dir.str(sub)));
    std::ostringstream out, err;
    CHECK(run_command("linear", cfg, out, err) == kExitOk);
    CHECK(fs::exists(dir.str(std::string(sub) + "/profiles.csv")));
    CHECK(fs::exists(dir.str(std::string(sub) + "/field.bin")));
    CHECK(fs::exists(dir.str(std::string(sub) + "/report.json")));
    std::ostringstream vo, ve;
    CHECK(run_command("verify", cfg, vo, ve) == kExitOk);
  }
  CHECK(slurp(dir.str("a/profiles.csv")) == slurp(dir.str("b/profiles.csv")));
  CHECK(slurp(dir.str("a/field.bin")) == slurp(dir.str("b/field.bin")));
  const auto rep = read_json(dir.str("a/report.json"));
  CHECK(rep["command"] == "linear");
  CHECK(rep["pass"] == true);

  // verify notices a tampered artifact
  {
    std::fstream f(dir.str("a/field.bin"), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-8, std::ios::end);
    const double big = 1.0;
    f.write(reinterpret_cast<const char*>(&big), sizeof big);
  }
  const RunConfig cfg = parse_config(small_run("v1v2_gauss", dir.str("a")));
  std::ostringstream vo, ve;
  CHECK(run_command("verify", cfg, vo, ve) == kExitFailed);

  std::ostringstream o, e;
  CHECK_THROWS_AS(run_command("bogus", cfg, o, e), ConfigError);
}

TEST_CASE("command line exit codes")
{
  TempDir dir("cli");
  write_file(dir.str("zero.yaml"), small_run("zero", dir.str("zero_out")));
  CHECK(run_cli("linear --config " + dir.str("zero.yaml"), dir.str("zero.log")) == 0);
  CHECK(fs::exists(dir.str("zero_out/profiles.csv")));

  write_file(dir.str("v1.yaml"), small_run("v1_gauss", dir.str("v1_out")));
  CHECK(run_cli("linear --config " + dir.str("v1.yaml"), dir.str("v1.log")) == 1);
  const std::string log = slurp(dir.str("v1.log"));
  CHECK(log.find("compatib") != std::string::npos);

  write_file(dir.str("bad.yaml"), "grid:\n  n_per_axis: 8\n  colour: red\n");
  CHECK(run_cli("linear --config " + dir.str("bad.yaml"), dir.str("bad.log")) == 2);
  CHECK(slurp(dir.str("bad.log")).find("line 3") != std::string::npos);

  CHECK(run_cli("linear", dir.str("noarg.log")) == 2);
  CHECK(run_cli("linear --config " + dir.str("missing.yaml"), dir.str("missing.log")) == 2);
  CHECK(run_cli("--help", dir.str("help.log")) == 0);

  // --out overrides the configured directory
  CHECK(run_cli("linear --config " + dir.str("zero.yaml") + " --out " + dir.str("flag_out"), dir.str("flag.log")) == 0);
  CHECK(fs::exists(dir.str("flag_out/report.json")));
}
