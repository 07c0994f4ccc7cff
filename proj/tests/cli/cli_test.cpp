#include "cli.hpp"
#include "toml_subset.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace rose {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code = 0;
  std::string out, err;
};

Run run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "rose");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("rose_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name, const std::string& content) const {
    std::string p = (path_ / name).string();
    std::ofstream(p, std::ios::binary) << content;
    return p;
  }
  std::string path(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

std::string slurp(const std::string& p) { return read_file(p); }

// Heteroscedastic PLM as CSV text.
std::string plm_csv(std::size_t n, std::uint64_t seed) {
  Engine eng = make_engine(seed);
  std::normal_distribution<double> nd;
  std::string s = "y,x,z1,z2\n";
  for (std::size_t i = 0; i < n; ++i) {
    double z1 = nd(eng), z2 = nd(eng);
    double x = z1 + nd(eng);
    double y = x + std::sin(z1) + (0.5 + expit(2 * z2)) * nd(eng);
    s += format_double(y) + "," + format_double(x) + "," + format_double(z1) + "," +
         format_double(z2) + "\n";
  }
  return s;
}

TEST(CliFit, ThreeRowClosedForm) {
  TempDir dir;
  auto csv = dir.file("d.csv", "y,x,z1\n1,1,0\n2,2,0\n3,3,0\n");
  auto r = run_cli({"fit", csv, "--scheme", "oracle", "--nuisances", "zero", "--k-folds", "3",
                    "--seed", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = Json::parse(r.out);
  EXPECT_EQ(j["theta_hat"].get<double>(), 14.0 / 14.0);
  EXPECT_EQ(j["n"], 3);
  EXPECT_EQ(j["d"], 1);
  EXPECT_EQ(j["seed"], 1);
}

TEST(CliFit, OracleMatchesLeastSquaresThroughOrigin) {
  TempDir dir;
  auto csv = dir.file("d.csv", "z1,x,y\n0.5,1,2.5\n-1,2,3\n2,-1,-0.5\n0,3,7\n1,0.5,0\n");
  auto r = run_cli({"fit", csv, "--scheme", "oracle", "--nuisances", "zero", "--k-folds", "2",
                    "--seed", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  double sxy = 1 * 2.5 + 2 * 3 + -1 * -0.5 + 3 * 7 + 0.5 * 0;
  double sxx = 1 + 4 + 1 + 9 + 0.25;
  EXPECT_NEAR(Json::parse(r.out)["theta_hat"].get<double>(), sxy / sxx, 1e-12);
}

TEST(CliFit, EmptyFileIsLineOneParseError) {
  TempDir dir;
  auto r = run_cli({"fit", dir.file("e.csv", ""), "--seed", "1"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("line 1"), std::string::npos) << r.err;
}

TEST(CliFit, BadCellsNameTheirLine) {
  TempDir dir;
  auto r = run_cli({"fit", dir.file("b.csv", "y,x,z1\n1,2,3\n1,abc,3\n"), "--seed", "1"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("line 3"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("'x'"), std::string::npos) << r.err;

  r = run_cli({"fit", dir.file("m.csv", "y,w,z1\n1,2,3\n"), "--seed", "1"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("missing column 'x'"), std::string::npos) << r.err;

  r = run_cli({"fit", dir.file("s.csv", "y,x,z1\n1,2\n"), "--seed", "1"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("line 2"), std::string::npos) << r.err;
}

TEST(CliFit, TooFewRowsIsConfigError) {
  TempDir dir;
  auto r = run_cli({"fit", dir.file("d.csv", plm_csv(20, 1)), "--seed", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("need n >="), std::string::npos) << r.err;
}

TEST(CliFit, ByteIdenticalReruns) {
  TempDir dir;
  auto csv = dir.file("d.csv", plm_csv(300, 2));
  std::vector<std::string> args{"fit", csv, "--seed", "9", "--k-folds", "2", "--trees", "30",
                                "--forest-trees", "30", "--depth", "2"};
  auto a = args, b = args;
  a.insert(a.end(), {"--out", dir.path("a.json"), "--threads", "1"});
  b.insert(b.end(), {"--out", dir.path("b.json"), "--threads", "3"});
  ASSERT_EQ(run_cli(a).code, 0);
  ASSERT_EQ(run_cli(b).code, 0);
  EXPECT_EQ(slurp(dir.path("a.json")), slurp(dir.path("b.json")));
  auto j = Json::parse(slurp(dir.path("a.json")));
  EXPECT_EQ(j["scheme"], "rose");
  EXPECT_LT(std::abs(j["theta_hat"].get<double>() - 1.0), 0.3);
}

TEST(CliFit, RandomSeedIsPrinted) {
  TempDir dir;
  auto csv = dir.file("d.csv", "y,x,z1\n1,1,0\n2,2,0\n3,3,0\n");
  auto r = run_cli({"fit", csv, "--scheme", "oracle", "--nuisances", "zero", "--k-folds", "3"});
  ASSERT_EQ(r.code, 0);
  ASSERT_NE(r.err.find("seed: "), std::string::npos);
  auto printed = std::stoull(r.err.substr(r.err.find("seed: ") + 6));
  EXPECT_EQ(Json::parse(r.out)["seed"].get<std::uint64_t>(), printed);
}

TEST(CliFit, ConfigFileAndFlagPrecedence) {
  TempDir dir;
  auto csv = dir.file("d.csv", "a,b,c\n1,1,0\n2,2,0\n3,3,5\n4,4.5,1\n");
  auto cfg = dir.file("c.toml", R"(
seed = 5   # comment
[data]
y = "a"
x = "b"
[fit]
k_folds = 2
nuisances = "zero"
alpha = 0.1
[scheme]
name = "oracle"
)");
  auto r = run_cli({"fit", csv, "--config", cfg});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = Json::parse(r.out);
  EXPECT_EQ(j["seed"], 5);
  EXPECT_EQ(j["k_folds"], 2);
  EXPECT_NEAR(j["ci"]["level"].get<double>(), 0.9, 1e-15);
  r = run_cli({"fit", csv, "--config", cfg, "--seed", "6", "--alpha", "0.05"});
  ASSERT_EQ(r.code, 0) << r.err;
  j = Json::parse(r.out);
  EXPECT_EQ(j["seed"], 6);
  EXPECT_NEAR(j["ci"]["level"].get<double>(), 0.95, 1e-15);

  auto bad = dir.file("bad.toml", "[fit]\nk_fold = 2\n");
  r = run_cli({"fit", csv, "--config", bad});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("fit.k_fold"), std::string::npos) << r.err;
}

TEST(CliFit, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"fit"}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  TempDir dir;
  auto csv = dir.file("d.csv", "y,x,z1\n1,1,0\n2,2,0\n3,3,0\n");
  auto r = run_cli({"fit", csv, "--scheme", "magic", "--seed", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown scheme"), std::string::npos);
  EXPECT_EQ(run_cli({"fit", csv, "--link", "probit", "--seed", "1"}).code, 2);
}

TEST(CliSimulate, ReportHasRatioAndCsvRoundTrips) {
  TempDir dir;
  auto r = run_cli({"simulate", "--dgp", "sim2", "--schemes", "unweighted,rose", "--n", "800",
                    "--reps", "50", "--seed", "7", "--csv", dir.path("s.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = Json::parse(r.out);
  ASSERT_EQ(j["schemes"].size(), 2u);
  EXPECT_EQ(j["schemes"][1]["scheme"], "rose");
  ASSERT_TRUE(j["schemes"][1]["mse_ratio_to_unweighted"].is_number());

  CsvTable t = read_csv(dir.path("s.csv"));
  ASSERT_EQ(t.header, (std::vector<std::string>{"dgp", "n", "scheme", "metric", "value"}));
  std::size_t matched = 0;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    EXPECT_EQ(row[0], "sim2");
    for (const auto& s : j["schemes"]) {
      if (s["scheme"] != row[2] || !s.contains(row[3])) continue;
      EXPECT_EQ(parse_number(row[4], t.lines[i], "value"), s[row[3]].get<double>());
      ++matched;
    }
  }
  EXPECT_EQ(matched, 12u);  // six metrics per scheme
}

TEST(CliSimulate, Errors) {
  auto r = run_cli({"simulate", "--dgp", "sim2", "--reps", "1", "--seed", "1"});
  EXPECT_EQ(r.code, 2);
  r = run_cli({"simulate", "--dgp", "simX", "--seed", "1"});
  EXPECT_EQ(r.code, 2);
  for (const char* name : {"sim1a", "sim1a_fig2a", "sim1b", "sim2", "sim3"}) {
    EXPECT_NE(r.err.find(name), std::string::npos) << r.err;
  }
  r = run_cli({"simulate", "--dgp", "sim3", "--schemes", "oracle", "--seed", "1"});
  EXPECT_EQ(r.code, 2);
}

TEST(CliSimulate, Deterministic) {
  std::vector<std::string> args{"simulate", "--dgp", "sim2", "--schemes", "unweighted,oracle",
                                "--n", "200", "--reps", "5", "--seed", "3", "--replications"};
  auto a = run_cli(args);
  auto b = run_cli(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  auto j = Json::parse(a.out);
  EXPECT_EQ(j["schemes"][0]["replications"]["theta_hat"].size(), 5u);
}

TEST(CliTune, Grids) {
  auto r = run_cli({"tune", "--dgp", "sim2", "--n", "400", "--grid", "3", "--nuisances", "zero",
                    "--trees", "20", "--seed", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(Json::parse(r.out)["depth"], 3);
  r = run_cli({"tune", "--dgp", "sim2", "--grid", "1,,3", "--seed", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("1,,3"), std::string::npos);
  EXPECT_EQ(run_cli({"tune", "--dgp", "sim2", "--seed", "1"}).code, 2);  // --grid is required
}

TEST(CliTune, ConstantPsiPrefersShallow) {
  // X = +-1 and Y = X + (+-1) independent of Z: dpsi = -1 exactly and psi^2
  // is nearly constant, so a deep tree only adds noise to the weights.
  TempDir dir;
  Engine eng = make_engine(21);
  std::normal_distribution<double> nd;
  std::string s = "y,x,z1,z2\n";
  for (int i = 0; i < 2000; ++i) {
    double x = uniform_index(eng, 2) ? 1.0 : -1.0;
    double e = uniform_index(eng, 2) ? 1.0 : -1.0;
    s += format_double(x + e) + "," + format_double(x) + "," + format_double(nd(eng)) + "," +
         format_double(nd(eng)) + "\n";
  }
  auto r = run_cli({"tune", dir.file("c.csv", s), "--grid", "1,15", "--nuisances", "zero",
                    "--trees", "50", "--seed", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = Json::parse(r.out);
  EXPECT_EQ(j["depth"], 1) << r.out;
}

TEST(Toml, ParsesSubset) {
  auto doc = toml::Document::parse(R"(
a = 1
b = -2.5e-3
c = "x # not a comment"
d = true
e = [1, 2, 3,]
f = ['p', "q"]
[t]
g = 1_000
)");
  std::int64_t a = 0;
  double b = 0;
  std::string c;
  bool d = false;
  std::vector<std::size_t> e;
  std::vector<std::string> f;
  std::size_t g = 0;
  EXPECT_TRUE(toml::get(doc, "", "a", a));
  toml::get(doc, "", "b", b);
  toml::get(doc, "", "c", c);
  toml::get(doc, "", "d", d);
  toml::get(doc, "", "e", e);
  toml::get(doc, "", "f", f);
  toml::get(doc, "t", "g", g);
  EXPECT_EQ(a, 1);
  EXPECT_EQ(b, -2.5e-3);
  EXPECT_EQ(c, "x # not a comment");
  EXPECT_TRUE(d);
  EXPECT_EQ(e, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(f, (std::vector<std::string>{"p", "q"}));
  EXPECT_EQ(g, 1000u);
  double as_double = 0;
  EXPECT_TRUE(toml::get(doc, "", "a", as_double));  // integers widen to floats
  EXPECT_EQ(as_double, 1.0);
  EXPECT_THROW(toml::get(doc, "", "c", a), ConfigError);
  EXPECT_FALSE(toml::get(doc, "", "zzz", a));
}

TEST(Toml, Errors) {
  EXPECT_THROW(toml::Document::parse("a = \n"), ParseError);
  EXPECT_THROW(toml::Document::parse("a = 1\na = 2\n"), ParseError);
  EXPECT_THROW(toml::Document::parse("[t\n"), ParseError);
  EXPECT_THROW(toml::Document::parse("a = [1,,2]\n"), ParseError);
  EXPECT_THROW(toml::Document::parse("a = \"open\n"), ParseError);
  try {
    toml::Document::parse("\n\nbogus line\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  auto doc = toml::Document::parse("[x]\nk = 1\n");
  EXPECT_THROW(doc.check_schema({{"", {}}, {"y", {"k"}}}), ConfigError);
  EXPECT_NO_THROW(doc.check_schema({{"", {}}, {"x", {"k"}}}));
}

TEST(Csv, ParserDetails) {
  auto t = parse_csv("\"y\",x,z\r\n1, 2 ,3\r\n\r\n4,5,6");
  EXPECT_EQ(t.header, (std::vector<std::string>{"y", "x", "z"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.lines[1], 4u);
  auto d = to_dataset(t);
  EXPECT_EQ(d.x[0], 2.0);
  EXPECT_EQ(d.z(1, 0), 6.0);
  EXPECT_THROW(parse_number("1e400", 2, "y"), ParseError);
  EXPECT_THROW(parse_number("nan", 2, "y"), ParseError);
  EXPECT_THROW(parse_number("1,5", 2, "y"), ParseError);
  EXPECT_EQ(parse_number("+1.5e2", 2, "y"), 150.0);
  // Datasets written by the library read back bit for bit.
  auto sim = sample({DgpKind::sim3, 50}, 3);
  auto back = to_dataset(parse_csv(dataset_csv(sim)));
  EXPECT_EQ(back.y, sim.y);
  EXPECT_EQ(back.x, sim.x);
  EXPECT_EQ(back.z.data(), sim.z.data());
}

}  // namespace
}  // namespace rose
