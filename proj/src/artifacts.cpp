#include "kbl/artifacts.hpp"

#include <fmt/format.h>

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kbl {

namespace {

constexpr char kSnapMagic[8] = {'K', 'B', 'L', 'S', 'N', 'A', 'P', '\0'};

struct SnapshotHeader {
  char magic[8];
  std::uint32_t version;
  std::uint32_t reserved;
  std::uint64_t grid_hash;
  std::uint64_t nx;
  std::uint64_t nv;
  std::uint8_t pad[24];
};
static_assert(sizeof(SnapshotHeader) == 64);

nlohmann::json matrix_json(const Eigen::Matrix4d& m)
{
  auto j = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) j.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
  return j;
}

}  // namespace

std::vector<ProfileRow> profile_rows(const OperatorSet& op, const KineticField& f, const WeightSpec& weight)
{
  return profile_rows(op, f.sample_x(), f.samples(), weight);
}

std::vector<ProfileRow> profile_rows(const OperatorSet& op, const std::vector<double>& xs, const Eigen::MatrixXd& s,
                                     const WeightSpec& weight)
{
  const auto w = node_weights(op.grid(), weight);
  const auto N = static_cast<std::size_t>(s.rows());
  std::vector<ProfileRow> rows;
  rows.reserve(xs.size());
  for (Eigen::Index k = 0; k < s.cols(); ++k) {
    const double* col = s.col(k).data();
    const auto abc = macro_coefficients(op, col);
    double sup = 0.0;
    for (std::size_t i = 0; i < N; ++i) sup = std::max(sup, w[i] * std::abs(col[i]));
    auto ip = op.project_P(std::span<const double>(col, N));
    for (std::size_t i = 0; i < N; ++i) ip[i] = col[i] - ip[i];
    rows.push_back({xs[k], abc[0], abc[1], abc[2], abc[3], abc[4], sup, op.nu_norm(ip)});
  }
  return rows;
}

void write_profiles_csv(const std::string& path, const std::vector<ProfileRow>& rows)
{
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << kProfileColumns << '\n';
  for (const auto& r : rows)
    os << fmt::format("{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}\n", r.x, r.a, r.b1, r.b2,
                      r.b3, r.c, r.sup_wf, r.ip_nu_norm);
  if (!os) throw std::runtime_error("error writing " + path);
}

std::vector<ProfileRow> read_profiles_csv(const std::string& path)
{
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != kProfileColumns)
    throw std::runtime_error(path + ": unexpected CSV header");
  std::vector<ProfileRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::array<double, 8> v{};
    std::istringstream ls(line);
    std::string tok;
    std::size_t k = 0;
    while (std::getline(ls, tok, ',')) {
      if (k >= v.size()) throw std::runtime_error(path + ": too many columns");
      v[k++] = std::stod(tok);
    }
    if (k != v.size()) throw std::runtime_error(path + ": too few columns");
    rows.push_back({v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]});
  }
  return rows;
}

void write_snapshot(const std::string& path, std::uint64_t grid_hash, const KineticField& f)
{
  const auto xs = f.sample_x();
  const Eigen::MatrixXd s = f.samples();
  SnapshotHeader h{};
  std::memcpy(h.magic, kSnapMagic, 8);
  h.version = kSnapshotVersion;
  h.grid_hash = grid_hash;
  h.nx = xs.size();
  h.nv = static_cast<std::uint64_t>(s.rows());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write(reinterpret_cast<const char*>(&h), sizeof h);
  os.write(reinterpret_cast<const char*>(xs.data()), static_cast<std::streamsize>(sizeof(double) * xs.size()));
  os.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(sizeof(double) * s.size()));
  if (!os) throw std::runtime_error("error writing " + path);
}

Snapshot read_snapshot(const std::string& path)
{
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  SnapshotHeader h{};
  is.read(reinterpret_cast<char*>(&h), sizeof h);
  if (!is || std::memcmp(h.magic, kSnapMagic, 8) != 0) throw std::runtime_error(path + ": not a field snapshot");
  if (h.version != kSnapshotVersion)
    throw std::runtime_error(fmt::format("{}: snapshot version {} (expected {})", path, h.version, kSnapshotVersion));
  if (h.nx == 0 || h.nv == 0 || h.nx > (1u << 24) || h.nv > (1u << 24))
    throw std::runtime_error(path + ": corrupt snapshot header");
  Snapshot s;
  s.grid_hash = h.grid_hash;
  s.x.resize(h.nx);
  s.values.resize(static_cast<Eigen::Index>(h.nv), static_cast<Eigen::Index>(h.nx));
  is.read(reinterpret_cast<char*>(s.x.data()), static_cast<std::streamsize>(sizeof(double) * h.nx));
  is.read(reinterpret_cast<char*>(s.values.data()), static_cast<std::streamsize>(sizeof(double) * s.values.size()));
  if (!is) throw std::runtime_error(path + ": truncated snapshot");
  return s;
}

std::uint64_t weight_key(const WeightSpec& w)
{
  std::uint64_t h = fnv1a(&w.beta, sizeof w.beta);
  return fnv1a(&w.varsigma, sizeof w.varsigma, h);
}

std::string operator_cache_path(const std::string& dir, const VelocityGrid& grid, const WeightSpec& w)
{
  return (std::filesystem::path(dir) /
          fmt::format("operator_{:016x}_k{}_{:016x}.bin", grid.hash(), kKernelVersion, weight_key(w)))
      .string();
}

OperatorSet load_or_assemble(const VelocityGrid& grid, const WeightSpec& w, const std::string& dir,
                             CacheOutcome& outcome)
{
  outcome = {};
  if (!dir.empty()) {
    outcome.path = operator_cache_path(dir, grid, w);
    if (std::filesystem::exists(outcome.path)) {
      try {
        OperatorSet op = OperatorSet::load(outcome.path, grid, weight_key(w));
        outcome.hit = true;
        return op;
      } catch (const std::runtime_error&) {
        // stale or corrupt file: rebuild below
      }
    }
  }
  OperatorSet op = OperatorSet::assemble(grid);
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    op.save(outcome.path, weight_key(w));
    outcome.written = true;
  }
  return op;
}

nlohmann::json to_json(const IdentityReport& r)
{
  return {{"name", r.name},           {"computed", r.computed}, {"target", r.target},
          {"tag", to_string(r.tag)},  {"tolerance", r.tolerance}, {"pass", r.pass}};
}

nlohmann::json to_json(const std::vector<IdentityReport>& r)
{
  auto j = nlohmann::json::array();
  for (const auto& x : r) j.push_back(to_json(x));
  return j;
}

nlohmann::json to_json(const SolveReport& r)
{
  nlohmann::json j;
  auto& st = j["stages"] = nlohmann::json::array();
  for (const auto& s : r.stages)
    st.push_back({{"kind", s.kind},
                  {"d", s.d},
                  {"eps", s.eps},
                  {"eta", s.eta},
                  {"n", s.n},
                  {"iterations", s.iterations},
                  {"residual", s.residual}});
  auto& ct = j["continuation"] = nlohmann::json::array();
  for (const auto& c : r.continuation)
    ct.push_back({{"sector", c.sector},
                  {"lambda", c.lambda},
                  {"dlambda", c.dlambda},
                  {"halvings", c.halvings},
                  {"accepted", c.accepted},
                  {"diffs", c.diffs},
                  {"ratios", c.ratios},
                  {"max_ratio", c.max_ratio}});
  auto& sl = j["slabs"] = nlohmann::json::array();
  for (const auto& s : r.slabs)
    sl.push_back({{"d", s.d},
                  {"n0", s.n0},
                  {"boundary_ratio", s.boundary_ratio},
                  {"n_values", s.n_values},
                  {"n_diffs", s.n_diffs},
                  {"eps_values", s.eps_values},
                  {"eps_diffs", s.eps_diffs},
                  {"penalized_means", s.penalized_means},
                  {"energy_mismatch", s.energy_mismatch},
                  {"polish_residual", s.polish_residual},
                  {"max_b3", s.max_b3},
                  {"flux_variation", s.flux_variation},
                  {"phi", s.phi},
                  {"shift_matrix", matrix_json(s.shift_matrix)},
                  {"shift_residual", s.shift_residual},
                  {"sigma_fit", s.sigma_fit},
                  {"fit_amplitude", s.fit_amplitude},
                  {"fit_ok", s.fit_ok},
                  {"discrepancy", s.discrepancy}});
  j["compatibility"] = {{"moments", r.compatibility.moments},
                        {"tolerance", r.compatibility.tolerance},
                        {"pass", r.compatibility.pass}};
  j["spectral_bound"] = r.spectral_bound;
  j["flags"] = r.flags;
  return j;
}

nlohmann::json to_json(const NonlinearReport& r)
{
  return {{"smallness",
           {{"delta", r.smallness.delta},
            {"boundary", r.smallness.boundary},
            {"source", r.smallness.source},
            {"threshold", r.smallness.threshold},
            {"below", r.smallness.below}}},
          {"sigma", r.sigma},
          {"diffs", r.diffs},
          {"ratios", r.ratios},
          {"norms", r.norms},
          {"gmres_iterations", r.gmres_iterations},
          {"max_ratio", r.max_ratio},
          {"terminal_ratio", r.terminal_ratio},
          {"c1_estimate", r.c1_estimate},
          {"source_defect", r.source_defect},
          {"residual", r.residual},
          {"boundary_defect", r.boundary_defect},
          {"iterations", r.iterations},
          {"converged", r.converged}};
}

nlohmann::json to_json(const SequenceVerdict& v)
{
  return {{"class", to_string(v.cls)},
          {"clause", v.clause},
          {"k", v.k},
          {"hypothesis_failure", v.hypothesis_failure},
          {"envelope_failure", v.envelope_failure}};
}

void write_json(const std::string& path, const nlohmann::json& j)
{
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("error writing " + path);
}

nlohmann::json read_json(const std::string& path)
{
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

}  // namespace kbl
