#include <gtest/gtest.h>

#include <map>

#include "ptrick/data.hpp"
#include "ptrick/oracle.hpp"

using namespace ptrick;

namespace {

const std::string kSource = PTRICK_SOURCE_DIR;

CsvSchema toy_schema() {
  CsvSchema s;
  s.count_columns = {"1", "2", "3"};
  return s;
}

Dataset toy() {
  return ingest_csv(kSource + "/tests/data/toy_short.csv", Format::short_format, toy_schema());
}

double num(const Value& v) { return std::get<double>(v); }

}  // namespace

TEST(Ingest, ShortRowExpandsToQLongRows) {
  const Dataset ds = toy();
  ASSERT_EQ(ds.num_observations(), 4u);
  ASSERT_EQ(ds.records().size(), 12u);
  EXPECT_EQ(ds.category_labels(), (std::vector<std::string>{"1", "2", "3"}));
  const std::vector<Count> expected{3, 5, 2};
  for (std::size_t q = 0; q < 3; ++q) {
    const LongRecord& r = ds.records()[q];
    EXPECT_EQ(r.obs_id, "1");
    EXPECT_EQ(r.category, ds.category_labels()[q]);
    EXPECT_EQ(r.count, expected[q]);
    EXPECT_EQ(num(r.covariates[*ds.covariate_index("X1")]), 0.0);
    EXPECT_EQ(num(r.covariates[*ds.covariate_index("X2")]), 0.0);
  }
  EXPECT_FALSE(ds.grouped());
  EXPECT_EQ(ds.num_groups(), 4u);
}

TEST(Ingest, YogurtShortRowResolvesBrandPrice) {
  const std::string text =
      "id,obs,yoplait,dannon,weight,hiland,fy,fd,fw,fh,py,pd,pw,ph\n"
      "1,1,0,1,0,0,0,0,0,0,0.108,0.081,0.079,0.061\n";
  CsvSchema s;
  s.group = "id";
  s.count_columns = {"yoplait", "dannon", "weight", "hiland"};
  s.specific = {{"feature", {"fy", "fd", "fw", "fh"}}, {"price", {"py", "pd", "pw", "ph"}}};
  s.baseline = "hiland";
  const Dataset ds = ingest(csv::parse(text), Format::short_format, s);
  ASSERT_EQ(ds.records().size(), 4u);
  EXPECT_EQ(ds.baseline(), "hiland");
  const std::size_t price = *ds.covariate_index("price");
  const std::map<std::string, double> p{{"yoplait", 0.108}, {"dannon", 0.081}, {"weight", 0.079}, {"hiland", 0.061}};
  for (const auto& r : ds.records()) {
    EXPECT_EQ(num(r.covariates[price]), p.at(r.category));
    EXPECT_EQ(r.count, r.category == "dannon" ? 1 : 0);
  }
}

TEST(Ingest, YogurtFilesAgree) {
  CsvSchema ls;
  ls.group = "id";
  ls.category = "brand";
  ls.baseline = "hiland";
  const Dataset lng = ingest_csv(kSource + "/data/yogurt_long.csv", Format::long_format, ls);
  CsvSchema ss;
  ss.group = "id";
  ss.count_columns = {"yoplait", "dannon", "weight", "hiland"};
  ss.specific = {{"feature", {"fy", "fd", "fw", "fh"}}, {"price", {"py", "pd", "pw", "ph"}}};
  ss.baseline = "hiland";
  const Dataset sht = ingest_csv(kSource + "/data/yogurt_short.csv", Format::short_format, ss);
  ASSERT_EQ(lng.num_observations(), 2412u);
  ASSERT_EQ(sht.num_observations(), 2412u);
  EXPECT_EQ(lng.num_groups(), 100u);
  const std::size_t lp = *lng.covariate_index("price"), sp = *sht.covariate_index("price");
  for (std::size_t j = 0; j < 2412; ++j) {
    ASSERT_EQ(lng.obs_id(j), sht.obs_id(j));
    for (std::size_t q = 0; q < 4; ++q) {
      const auto sq = *sht.category_index(lng.category_labels()[q]);
      ASSERT_EQ(lng.count(j, q), sht.count(j, sq));
      ASSERT_EQ(num(lng.record(j, q).covariates[lp]), num(sht.record(j, sq).covariates[sp]));
    }
  }
}

TEST(Ingest, Errors) {
  EXPECT_THROW(csv::parse(""), ValidationError);
  EXPECT_THROW(ingest(csv::parse("obs,category\n1,a\n"), Format::long_format, CsvSchema{}), SchemaError);
  EXPECT_THROW(ingest(csv::parse("obs,category,count\n1,a,-1\n1,b,2\n"), Format::long_format, CsvSchema{}),
               ValidationError);
  // Observation 2 lacks category b.
  EXPECT_THROW(ingest(csv::parse("obs,category,count\n1,a,1\n1,b,2\n2,a,0\n"), Format::long_format, CsvSchema{}),
               ValidationError);
  EXPECT_THROW(ingest(csv::parse("obs,category,count\n1,a,1\n1,a,2\n"), Format::long_format, CsvSchema{}),
               ValidationError);
  EXPECT_THROW(ingest(csv::parse("obs,category,count\n"), Format::long_format, CsvSchema{}), ValidationError);
  EXPECT_THROW(ingest(csv::parse("obs,category,count\n1,a,1.5\n1,b,2\n"), Format::long_format, CsvSchema{}),
               ValidationError);
  CsvSchema s;
  s.count_columns = {"a", "b"};
  EXPECT_THROW(ingest(csv::parse("obs,a\n1,2\n"), Format::short_format, s), SchemaError);
  EXPECT_THROW(ingest_csv("/nonexistent/file.csv", Format::long_format, CsvSchema{}), SchemaError);
}

TEST(Ingest, RowOrderIsObservationMajorInLabelOrder) {
  const Dataset ds = ingest(csv::parse("obs,category,count\n1,b,1\n2,a,4\n1,a,3\n2,b,0\n"), Format::long_format,
                            CsvSchema{});
  ASSERT_EQ(ds.category_labels(), (std::vector<std::string>{"b", "a"}));
  EXPECT_EQ(ds.obs_id(0), "1");
  EXPECT_EQ(ds.count(0, 0), 1);
  EXPECT_EQ(ds.count(0, 1), 3);
  EXPECT_EQ(ds.count(1, 0), 0);
  EXPECT_EQ(ds.total(1), 4);
}

TEST(Ingest, CategoricalLevelsInFirstObservedOrder) {
  CsvSchema s;
  s.categorical = {"x"};
  const Dataset ds = ingest(csv::parse("obs,category,count,x\n1,a,1,2\n1,b,1,2\n2,a,0,1\n2,b,3,1\n"),
                            Format::long_format, s);
  const Covariate& x = ds.covariates()[*ds.covariate_index("x")];
  EXPECT_EQ(x.kind, CovariateKind::categorical);
  EXPECT_EQ(x.levels, (std::vector<std::string>{"2", "1"}));
}

TEST(ToShort, ToyCounts) {
  const ShortTable t = to_short(toy());
  ASSERT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(t.rows[0].counts, (std::vector<Count>{3, 5, 2}));
  EXPECT_EQ(t.rows[3].counts, (std::vector<Count>{1, 3, 6}));
  EXPECT_EQ(t.shared_names, (std::vector<std::string>{"X1", "X2"}));
  EXPECT_TRUE(t.specific_names.empty());
}

TEST(ToShort, ZeroCountsPreserved) {
  const Dataset ds = ingest(csv::parse("obs,category,count\n1,a,0\n1,b,0\n"), Format::long_format, CsvSchema{});
  const ShortTable t = to_short(ds);
  EXPECT_EQ(t.rows[0].counts, (std::vector<Count>{0, 0}));
}

TEST(ToShort, RoundTripOnSimulatedData) {
  oracle::SimulationSetup s;
  s.groups = 4;
  s.per_group = 5;
  s.covariates = {{"price", CovariateKind::continuous, {}, true}, {"z", CovariateKind::continuous, {}, false},
                  {"k", CovariateKind::categorical, {"u", "v", "w"}, false}};
  s.spec.add("price", CoefficientMode::generic).add("z").add("k");
  s.gamma = Eigen::VectorXd::LinSpaced(2 + 1 + 2 + 4, -0.3, 0.3);
  s.beta = Eigen::Vector2d(0.5, 0.8);
  s.seed = 42;
  const Dataset ds = oracle::simulate(s).data;
  ASSERT_EQ(ds.num_observations(), 20u);

  const csv::Table shortcsv = short_table(to_short(ds));
  CsvSchema schema;
  schema.group = "group";
  schema.count_columns = ds.category_labels();
  schema.categorical = {"k"};
  const Dataset back = ingest(csv::parse(csv::format(shortcsv)), Format::short_format, schema);
  const Dataset back_long =
      ingest(csv::parse(csv::format(long_table(ds))), Format::long_format, [] {
        CsvSchema l;
        l.group = "group";
        l.categorical = {"k"};
        return l;
      }());
  for (const Dataset* other : {&back, &back_long}) {
    ASSERT_EQ(other->num_observations(), ds.num_observations());
    for (std::size_t j = 0; j < ds.num_observations(); ++j) {
      ASSERT_EQ(other->obs_id(j), ds.obs_id(j));
      ASSERT_EQ(other->group_labels()[other->group_of(j)], ds.group_labels()[ds.group_of(j)]);
      Count sum = 0;
      for (std::size_t q = 0; q < 3; ++q) {
        ASSERT_EQ(other->count(j, q), ds.count(j, q));
        sum += other->count(j, q);
        for (const auto& c : ds.covariates()) {
          const Value& a = ds.record(j, q).covariates[*ds.covariate_index(c.name)];
          const Value& b = other->record(j, q).covariates[*other->covariate_index(c.name)];
          ASSERT_EQ(a, b) << c.name;
        }
      }
      ASSERT_EQ(sum, ds.total(j));
    }
  }
}

TEST(Csv, QuotingRoundTrip) {
  csv::Table t{{"a", "b"}, {{"x,y", "say \"hi\""}, {"plain", ""}}};
  const csv::Table back = csv::parse(csv::format(t));
  EXPECT_EQ(back.rows, t.rows);
  EXPECT_EQ(csv::number_to_string(0.1), "0.1");
  EXPECT_EQ(*csv::to_number("-36.5"), -36.5);
  EXPECT_FALSE(csv::to_number("1e"));
}
