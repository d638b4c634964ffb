#include <gtest/gtest.h>

#include <filesystem>

#include "efcm/container.hpp"
#include "efcm/params.hpp"

using namespace efcm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("efcm_container_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Container, RoundTripProperty) {
  // parse(emit(x)) == x bit-exactly, for a randomized mix of shapes and
  // dtypes plus metadata.
  fs::path dir = temp_dir("roundtrip");
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(1000 + trial);
    ArrayContainer c;
    std::vector<std::pair<std::string, Tensor<float>>> f32s;
    std::vector<std::pair<std::string, Tensor<double>>> f64s;
    const size_t n = 1 + rng.index(6);
    for (size_t i = 0; i < n; ++i) {
      std::vector<size_t> shape;
      const size_t rank = 1 + rng.index(4);
      for (size_t r = 0; r < rank; ++r) shape.push_back(1 + rng.index(5));
      const std::string name = "arr" + std::to_string(i);
      if (rng.uniform() < 0.5) {
        auto t = rng.uniform_tensor<float>(shape, -10, 10);
        c.put(name, t);
        f32s.emplace_back(name, std::move(t));
      } else {
        auto t = rng.uniform_tensor<double>(shape, -10, 10);
        c.put(name, t);
        f64s.emplace_back(name, std::move(t));
      }
    }
    c.metadata()["trial"] = trial;
    c.metadata()["nested"] = {{"k", "v"}, {"list", {1, 2, 3}}};
    fs::path stem = dir / ("t" + std::to_string(trial));
    c.save(stem);

    ArrayContainer l = ArrayContainer::load(stem);
    EXPECT_EQ(l.metadata().at("trial").get<int>(), trial);
    for (const auto& [name, t] : f32s) {
      Tensor<float> got = l.get<float>(name);
      ASSERT_EQ(got.shape(), t.shape());
      EXPECT_EQ(got.content_hash(), t.content_hash());
    }
    for (const auto& [name, t] : f64s) {
      Tensor<double> got = l.get<double>(name);
      ASSERT_EQ(got.shape(), t.shape());
      EXPECT_EQ(got.content_hash(), t.content_hash());
    }
  }
}

TEST(Container, DtypeMismatchAndMissing) {
  ArrayContainer c;
  c.put("a", Tensor<float>::full({2}, 1.f));
  EXPECT_THROW(c.get<double>("a"), std::invalid_argument);
  EXPECT_NO_THROW(c.get_as<double>("a"));
  EXPECT_THROW(c.get<float>("nope"), std::invalid_argument);
  EXPECT_THROW(c.put("a", Tensor<float>({1})), std::invalid_argument);
}

TEST(ParamStore, ContainerRoundTripPreservesFlags) {
  Rng rng(7);
  ParamStore<float> ps;
  ps.add("w", rng.uniform_tensor<float>({3, 2}, -1, 1), true);
  ps.add("frozen.k", rng.uniform_tensor<float>({4}, -1, 1), false);
  ps.add("bn.running_mean", Tensor<float>({4}), false, true);
  ArrayContainer c;
  ps.to_container(c);
  ParamStore<float> back = ParamStore<float>::from_container(c);
  EXPECT_TRUE(back.trainable("w"));
  EXPECT_FALSE(back.trainable("frozen.k"));
  EXPECT_TRUE(back.item("bn.running_mean").buffer);
  EXPECT_EQ(back.at("w").content_hash(), ps.at("w").content_hash());
  EXPECT_EQ(back.total_params(), ps.total_params());
  EXPECT_EQ(ps.total_params(), 3u * 2u + 4u);  // buffers excluded
}

TEST(ParamStore, FreezePrefixAndHash) {
  ParamStore<float> ps;
  ps.add("a.w", Tensor<float>::full({2}, 1.f));
  ps.add("b.w", Tensor<float>::full({2}, 1.f));
  ps.set_trainable_prefix("a.", false);
  EXPECT_FALSE(ps.trainable("a.w"));
  EXPECT_TRUE(ps.trainable("b.w"));
  auto h1 = ps.hash_all();
  ps.at("b.w")[0] = 2.f;
  auto h2 = ps.hash_all();
  EXPECT_EQ(h1.at("a.w"), h2.at("a.w"));
  EXPECT_NE(h1.at("b.w"), h2.at("b.w"));
}

}  // namespace
