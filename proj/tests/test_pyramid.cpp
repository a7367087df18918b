#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <string>

#include "msplora/pyramid.hpp"
#include "msplora/serialize.hpp"
#include "msplora/svd.hpp"

using namespace msplora;

namespace {

void randomize_factors(AdapterSet& set, std::uint64_t seed, double stddev = 0.25) {
  Rng rng(seed);
  for (Parameter* p : set.trainable_parameters()) {
    for (double& x : p->value.data()) x = stddev * rng.gaussian();
  }
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

}  // namespace

TEST_CASE("geometric schedules halve twice") {
  const RankSchedule s8 = RankSchedule::geometric(8);
  CHECK(s8.high == 8);
  CHECK(s8.mid == 4);
  CHECK(s8.low == 2);
  const RankSchedule s64 = RankSchedule::geometric(64);
  CHECK(s64.high == 64);
  CHECK(s64.mid == 32);
  CHECK(s64.low == 16);
}

TEST_CASE("indivisible top rank is rejected with the nearest valid values") {
  try {
    RankSchedule::geometric(6);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("4") != std::string::npos);
    CHECK(msg.find("8") != std::string::npos);
  }
  CHECK_THROWS_AS(RankSchedule::geometric(0), ConfigError);
  CHECK_THROWS_AS(RankSchedule::custom(4, 2, 3), ConfigError);
  CHECK_THROWS_AS(RankSchedule::custom(2, 4, 1), ConfigError);
  CHECK_THROWS_AS(RankSchedule::custom(4, 2, 0), ConfigError);
}

TEST_CASE("layer partition hand cases") {
  const LayerPartition p12(12);
  CHECK(p12.sizes() == std::array<std::size_t, 3>{4, 4, 4});
  for (std::size_t l = 0; l < 4; ++l) CHECK(p12.group_of(l) == Group::lower);
  for (std::size_t l = 4; l < 8; ++l) CHECK(p12.group_of(l) == Group::middle);
  for (std::size_t l = 8; l < 12; ++l) CHECK(p12.group_of(l) == Group::upper);

  CHECK(LayerPartition(32).sizes() == std::array<std::size_t, 3>{11, 11, 10});
  CHECK(LayerPartition(3).sizes() == std::array<std::size_t, 3>{1, 1, 1});
  CHECK(LayerPartition(7).sizes() == std::array<std::size_t, 3>{3, 2, 2});
}

TEST_CASE("layer partition properties for N in 3..48") {
  for (std::size_t n = 3; n <= 48; ++n) {
    const LayerPartition p(n);
    const auto sizes = p.sizes();
    CHECK(sizes[0] + sizes[1] + sizes[2] == n);
    // lower layers take extras first
    CHECK(sizes[0] >= sizes[1]);
    CHECK(sizes[1] >= sizes[2]);
    CHECK(sizes[0] - sizes[2] <= 1);
    // contiguity: group id is non-decreasing over depth
    for (std::size_t l = 1; l < n; ++l) {
      CHECK(static_cast<int>(p.group_of(l)) >= static_cast<int>(p.group_of(l - 1)));
    }
  }
  CHECK_THROWS_AS(LayerPartition(2), ConfigError);
}

TEST_CASE("build_pyramid structure and zero-at-init") {
  const PyramidAdapterSet set = build_pyramid(12, 64, 8, /*seed=*/5);
  CHECK(set.schedule().high == 8);
  CHECK(set.schedule().mid == 4);
  CHECK(set.schedule().low == 2);

  // 2 global + 6 mid + 24 layer pairs -> 64 matrices
  const auto params = set.trainable_parameters();
  CHECK(params.size() == 64);
  std::set<std::string> names;
  for (const Parameter* p : params) names.insert(p->name);
  CHECK(names.size() == params.size());

  for (std::size_t l = 0; l < 12; ++l) {
    for (Proj kind : {Proj::query, Proj::value}) {
      CHECK(set.delta_value(l, kind).max_abs() == 0.0);
      const LoraPair& pair = set.layer_pair(l, kind);
      CHECK(pair.b.value.max_abs() == 0.0);
      CHECK(pair.a.value.max_abs() > 0.0);
    }
  }
}

TEST_CASE("build_pyramid validations") {
  CHECK_THROWS_AS(build_pyramid(2, 64, 8, 0), ConfigError);   // cannot form 3 groups
  CHECK_THROWS_AS(build_pyramid(12, 64, 6, 0), ConfigError);  // not divisible by 4
  CHECK_THROWS_AS(build_pyramid(12, 4, 8, 0), ConfigError);   // r_high > d_model
}

TEST_CASE("builds are deterministic under the seed") {
  const PyramidAdapterSet a = build_pyramid(6, 32, 8, 99);
  const PyramidAdapterSet b = build_pyramid(6, 32, 8, 99);
  const auto pa = a.trainable_parameters();
  const auto pb = b.trainable_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(bit_identical(pa[i]->value, pb[i]->value));
  }
  const PyramidAdapterSet c = build_pyramid(6, 32, 8, 100);
  CHECK_FALSE(bit_identical(pa[0]->value, c.trainable_parameters()[0]->value));
}

TEST_CASE("parameter budget closed forms") {
  const ParamBudget t1 = count_params(12, 768, 8);
  CHECK(t1.lora_total == 294912);
  CHECK(t1.msplora_total == 135168);

  const ParamBudget t2 = count_params(32, 4096, 64);
  CHECK(t2.lora_total == 33554432);
  CHECK(t2.msplora_total == 11010048);
  CHECK(t2.ratio() == doctest::Approx(42.0 / 128.0).epsilon(1e-15));

  // formula-only unit case; the builder itself rejects N < 3
  const ParamBudget unit = count_params(1, 1, 1);
  CHECK(unit.lora_total == 4);
  CHECK(unit.msplora_total == 11);
}

TEST_CASE("enumerated parameters match the closed form over the full grid") {
  for (std::size_t n = 3; n <= 48; ++n) {
    for (std::size_t d : {8, 64, 768}) {
      for (std::size_t r : {4, 8, 64}) {
        if (r > d) {
          CHECK_THROWS_AS(build_pyramid(n, d, r, 1), ConfigError);
          continue;
        }
        const PyramidAdapterSet set = build_pyramid(n, d, r, 1);
        CHECK(set.trainable_count() == count_params(n, d, r).msplora_total);
      }
    }
  }
}

TEST_CASE("delta composition matches a hand-computed three-term sum") {
  // d = 4, ranks 4/2/1. B factors are identity-like, so each term is a
  // column-truncated copy of its A factor:
  //   global: A_g * I4            = A_g
  //   mid:    A_m * [I2 | 0]      = A_m in columns 0,1
  //   layer:  A_l * [1 0 0 0]     = A_l in column 0
  PyramidAdapterSet set(3, 4, RankSchedule::custom(4, 2, 1), 7);

  LoraPair& g = set.global_pair(Proj::query);
  LoraPair& m = set.mid_pair(Group::lower, Proj::query);
  LoraPair& l = set.layer_pair(0, Proj::query);

  g.a.value = Matrix::from_rows({{1, 2, 3, 4}, {5, 6, 7, 8}, {9, 10, 11, 12}, {13, 14, 15, 16}});
  g.b.value = Matrix::identity(4);
  m.a.value = Matrix::from_rows({{1, 0}, {0, 1}, {2, 0}, {0, 2}});
  m.b.value = Matrix::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}});
  l.a.value = Matrix::from_rows({{1}, {1}, {1}, {1}});
  l.b.value = Matrix::from_rows({{1, 0, 0, 0}});

  const Matrix expect = Matrix::from_rows({{1 + 1 + 1, 2 + 0, 3, 4},
                                           {5 + 0 + 1, 6 + 1, 7, 8},
                                           {9 + 2 + 1, 10 + 0, 11, 12},
                                           {13 + 0 + 1, 14 + 2, 15, 16}});
  CHECK(max_abs_diff(set.delta_value(0, Proj::query), expect) == 0.0);

  // the tape route computes the same composition
  Tape tape;
  CHECK(max_abs_diff(tape.value(set.delta(tape, 0, Proj::query)), expect) == 0.0);
}

TEST_CASE("layers in one group share identical global and mid contributions") {
  PyramidAdapterSet set = build_pyramid(12, 16, 8, 3);
  randomize_factors(set, 11);
  // layers 0 and 3 are both in the lower group
  const Group g0 = set.partition().group_of(0);
  const Group g3 = set.partition().group_of(3);
  CHECK(g0 == g3);
  // shared contributions come from the same pair objects, bit for bit
  CHECK(bit_identical(set.mid_delta_value(g0, Proj::query),
                      set.mid_delta_value(g3, Proj::query)));
  CHECK(bit_identical(set.global_delta_value(Proj::query),
                      set.global_delta_value(Proj::query)));
  // and the full delta is exactly the three contributions in order
  Matrix recomposed = set.global_delta_value(Proj::query);
  recomposed += set.mid_delta_value(g0, Proj::query);
  recomposed += set.layer_local_delta_value(0, Proj::query);
  CHECK(bit_identical(set.delta_value(0, Proj::query), recomposed));
}

TEST_CASE("perturbation scope: global hits all layers, mid its group, layer itself") {
  for (std::size_t n : {6, 7, 12}) {
    PyramidAdapterSet set = build_pyramid(n, 16, 8, 17);
    randomize_factors(set, n);
    const Proj kind = Proj::value;

    std::vector<Matrix> before;
    for (std::size_t l = 0; l < n; ++l) before.push_back(set.delta_value(l, kind));

    auto changed_layers = [&]() {
      std::vector<bool> changed;
      for (std::size_t l = 0; l < n; ++l) {
        changed.push_back(max_abs_diff(set.delta_value(l, kind), before[l]) > 0.0);
      }
      return changed;
    };

    {
      LoraPair& g = set.global_pair(kind);
      const double saved = g.a.value(0, 0);
      g.a.value(0, 0) += 0.5;
      for (bool c : changed_layers()) CHECK(c);
      g.a.value(0, 0) = saved;
    }
    {
      LoraPair& m = set.mid_pair(Group::middle, kind);
      const double saved = m.a.value(0, 0);
      m.a.value(0, 0) += 0.5;
      const auto changed = changed_layers();
      const auto [mb, me] = set.partition().range(Group::middle);
      for (std::size_t l = 0; l < n; ++l) {
        CHECK(changed[l] == (l >= mb && l < me));
      }
      m.a.value(0, 0) = saved;
    }
    {
      LoraPair& lp = set.layer_pair(2, kind);
      const double saved = lp.a.value(0, 0);
      lp.a.value(0, 0) += 0.5;
      const auto changed = changed_layers();
      for (std::size_t l = 0; l < n; ++l) CHECK(changed[l] == (l == 2));
      lp.a.value(0, 0) = saved;
    }
  }
}

TEST_CASE("gradient on a shared factor is the sum of per-layer gradients") {
  PyramidAdapterSet set = build_pyramid(6, 12, 4, 23);
  randomize_factors(set, 29);
  const Parameter& ga = set.global_pair(Proj::query).a;

  Tape combined;
  Var total;
  for (std::size_t l = 0; l < 6; ++l) {
    Var d = combined.sum(set.delta(combined, l, Proj::query));
    total = total.valid() ? combined.add(total, d) : d;
  }
  const Matrix g_combined = combined.backward(total).at(ga);

  Matrix g_summed(ga.value.rows(), ga.value.cols());
  for (std::size_t l = 0; l < 6; ++l) {
    Tape single;
    g_summed += single.backward(single.sum(set.delta(single, l, Proj::query))).at(ga);
  }
  for (std::size_t i = 0; i < g_combined.size(); ++i) {
    const double a = g_combined.data()[i];
    const double b = g_summed.data()[i];
    CHECK(std::abs(a - b) <= 1e-10 * std::max({1.0, std::abs(a), std::abs(b)}));
  }
}

TEST_CASE("rank of each tier contribution is bounded by its configured rank") {
  PyramidAdapterSet set = build_pyramid(6, 24, 8, 31);
  randomize_factors(set, 37, 1.0);
  auto rank_of = [](const Matrix& m) {
    std::size_t r = 0;
    for (double s : svd_values(m))
      if (s > 1e-10) ++r;
    return r;
  };
  CHECK(rank_of(set.global_delta_value(Proj::query)) <= 8);
  CHECK(rank_of(set.mid_delta_value(Group::lower, Proj::query)) <= 4);
  CHECK(rank_of(set.layer_local_delta_value(0, Proj::query)) <= 2);
  CHECK(rank_of(set.delta_value(0, Proj::query)) <= 14);
}

TEST_CASE("merge_into_base") {
  PyramidAdapterSet set = build_pyramid(6, 16, 8, 41);
  Rng rng(43);
  const Matrix w = Matrix::gaussian(16, 16, rng, 0.3);

  // fresh set: merged weight equals the base bit for bit
  CHECK(bit_identical(set.merge_into_base(0, Proj::query, w), w));

  randomize_factors(set, 47);
  const Matrix merged = set.merge_into_base(2, Proj::query, w);
  const Matrix x = Matrix::gaussian(5, 16, rng, 1.0);
  // dual-path: x*(W + delta) vs x*W + x*delta
  const Matrix via_merged = matmul(x, merged);
  const Matrix dual = add(matmul(x, w), matmul(x, set.delta_value(2, Proj::query)));
  CHECK(max_abs_diff(via_merged, dual) < 1e-12);

  // merging is additive, not idempotent
  const Matrix twice = set.merge_into_base(2, Proj::query, merged);
  CHECK(max_abs_diff(twice, merged) > 0.0);

  CHECK_THROWS_AS(set.merge_into_base(0, Proj::query, Matrix(4, 4)), ShapeError);
  CHECK_THROWS_AS(set.delta_value(99, Proj::query), ConfigError);
}

TEST_CASE("serialization round-trips bit-exactly") {
  PyramidAdapterSet set = build_pyramid(5, 12, 8, 53);
  randomize_factors(set, 59);
  set.tier_scales().mid = 0.5;

  const json doc = to_json(set);
  const PyramidAdapterSet back = pyramid_from_json(doc);
  const auto pa = set.trainable_parameters();
  const auto pb = back.trainable_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(bit_identical(pa[i]->value, pb[i]->value));
  }
  CHECK(back.tier_scales().mid == 0.5);
  // and the serialized text itself is stable
  CHECK(to_json(back).dump() == doc.dump());

  PlainLoraSet plain(5, 12, 4, 61);
  randomize_factors(plain, 67);
  const PlainLoraSet plain_back = plain_lora_from_json(to_json(plain));
  CHECK(to_json(plain_back).dump() == to_json(plain).dump());

  // dispatch on the method tag
  auto any = adapter_from_json(doc);
  CHECK(any->method() == "msplora");
  CHECK(any->trainable_count() == set.trainable_count());
}

TEST_CASE("base64 payload corruption is caught") {
  CHECK_THROWS_AS(base64_decode("abc"), IoError);      // bad length
  CHECK_THROWS_AS(base64_decode("ab=c"), IoError);     // data after padding
  CHECK_THROWS_AS(base64_decode("a!cd"), IoError);     // bad character
  const std::vector<double> vals{1.5, -2.25, 0.0, 1e-300};
  CHECK(decode_doubles(encode_doubles(vals)) == vals);
}

TEST_CASE("plain lora baseline structure") {
  PlainLoraSet set(6, 16, 8, 71);
  CHECK(set.trainable_count() == count_params(6, 16, 8).lora_total);
  CHECK(set.delta_value(3, Proj::value).max_abs() == 0.0);
  for (const Parameter* p : set.trainable_parameters()) {
    CHECK(set.tier_of(*p) == Tier::layer);
  }
  CHECK_THROWS_AS(PlainLoraSet(6, 4, 8, 0), ConfigError);
}

TEST_CASE("unknown projection kind is reported") {
  PyramidAdapterSet set(3, 8, RankSchedule::geometric(4), 0, 0.02, {Proj::query});
  CHECK_THROWS_AS(set.delta_value(0, Proj::value), ConfigError);
}
