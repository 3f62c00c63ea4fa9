#include <doctest.h>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "sprune/io.hpp"

using namespace sprune;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("sprune_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
  static inline int counter = 0;
};

void write_be32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

// two 2x2 images with pixel values 0..7 and labels {3, 5}
void write_idx_pair(const std::string& images, const std::string& labels,
                    std::uint32_t image_magic = 2051,
                    std::uint32_t label_magic = 2049,
                    std::uint32_t label_count = 2, bool truncate = false) {
  std::ofstream im(images, std::ios::binary);
  write_be32(im, image_magic);
  write_be32(im, 2);
  write_be32(im, 2);
  write_be32(im, 2);
  unsigned char pix[8] = {0, 51, 102, 153, 204, 255, 25, 76};
  im.write(reinterpret_cast<char*>(pix), truncate ? 5 : 8);
  im.close();

  std::ofstream lb(labels, std::ios::binary);
  write_be32(lb, label_magic);
  write_be32(lb, label_count);
  unsigned char labs[2] = {3, 5};
  lb.write(reinterpret_cast<char*>(labs), 2);
}

Trainer make_trainer(std::uint64_t seed = 3) {
  Network net =
      make_mlp(4, {5, 4}, 3, LossKind{LossKind::Type::CategoricalCe});
  Rng rng(91);
  glorot_init(net, rng);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.seed = seed;
  cfg.lambda = 0.5;
  cfg.drop_after = 10;
  cfg.prior = FlatteningPrior{0.1};
  return Trainer(std::move(net), cfg);
}

Dataset small_data() { return synth_blobs(3, 4, 30, 17); }

bool networks_equal(const Network& a, const Network& b) {
  if (a.layers.size() != b.layers.size() || a.input_size != b.input_size) {
    return false;
  }
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto* da = std::get_if<DenseLayer>(&a.layers[l]);
    const auto* db = std::get_if<DenseLayer>(&b.layers[l]);
    if ((da == nullptr) != (db == nullptr)) {
      return false;
    }
    if (da && (da->weights != db->weights || da->bias != db->bias ||
               da->gated != db->gated)) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("IDX pairs load with scaled pixels and one-hot labels") {
  TempDir dir;
  write_idx_pair(dir.file("im"), dir.file("lb"));
  Dataset ds = load_idx(dir.file("im"), dir.file("lb"));
  CHECK(ds.x.rows() == 4);
  CHECK(ds.x.cols() == 2);
  CHECK(ds.y.rows() == 10);
  CHECK(ds.x(0, 0) == 0.0);
  CHECK(ds.x(1, 0) == doctest::Approx(51.0 / 255.0));
  CHECK(ds.x(1, 1) == 1.0);  // pixel value 255
  CHECK(ds.y(3, 0) == 1.0);
  CHECK(ds.y(5, 1) == 1.0);
  CHECK(ds.y.col(0).sum() == 1.0);
}

TEST_CASE("malformed IDX files are rejected with clear errors") {
  TempDir dir;
  write_idx_pair(dir.file("bad_magic_im"), dir.file("bad_magic_lb"), 1234);
  CHECK_THROWS_WITH_AS(
      load_idx(dir.file("bad_magic_im"), dir.file("bad_magic_lb")),
      doctest::Contains("bad image magic"), std::runtime_error);

  write_idx_pair(dir.file("im2"), dir.file("lb2"), 2051, 7777);
  CHECK_THROWS_WITH_AS(load_idx(dir.file("im2"), dir.file("lb2")),
                       doctest::Contains("bad label magic"),
                       std::runtime_error);

  write_idx_pair(dir.file("im3"), dir.file("lb3"), 2051, 2049, 3);
  CHECK_THROWS_WITH_AS(load_idx(dir.file("im3"), dir.file("lb3")),
                       doctest::Contains("count mismatch"), std::runtime_error);

  write_idx_pair(dir.file("im4"), dir.file("lb4"), 2051, 2049, 2, true);
  CHECK_THROWS_WITH_AS(load_idx(dir.file("im4"), dir.file("lb4")),
                       doctest::Contains("truncated"), std::runtime_error);

  CHECK_THROWS_WITH_AS(load_idx(dir.file("missing"), dir.file("lb4")),
                       doctest::Contains("cannot open"), std::runtime_error);
}

TEST_CASE("synthetic clusters are deterministic and label-balanced") {
  Dataset a = synth_blobs(3, 5, 10, 42);
  Dataset b = synth_blobs(3, 5, 10, 42);
  Dataset c = synth_blobs(3, 5, 10, 43);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  CHECK(a.x != c.x);
  CHECK(a.x.rows() == 5);
  CHECK(a.size() == 30);
  for (int cls = 0; cls < 3; ++cls) {
    CHECK(a.y.row(cls).sum() == 10.0);
  }
  // classes interleave so any prefix is roughly balanced
  CHECK(a.y(0, 0) == 1.0);
  CHECK(a.y(1, 1) == 1.0);
  CHECK(a.y(2, 2) == 1.0);
  CHECK_THROWS_AS(synth_blobs(0, 5, 10, 1), std::invalid_argument);
}

TEST_CASE("checkpoints restore the trainer bit for bit") {
  TempDir dir;
  Trainer tr = make_trainer();
  Dataset data = small_data();
  for (int i = 0; i < 12; ++i) {
    tr.step(data);
  }
  tr.compact_now();
  std::string path = dir.file("ck.bin");
  save_checkpoint(path, tr);

  Trainer back = load_checkpoint(path);
  CHECK(networks_equal(back.net(), tr.net()));
  CHECK(back.iteration() == tr.iteration());
  CHECK(back.initial_weights() == tr.initial_weights());
  CHECK(back.orig_units() == tr.orig_units());
  CHECK(back.opt().t == tr.opt().t);
  CHECK(back.rng().serialize() == tr.rng().serialize());
  for (std::size_t l = 0; l < tr.gates().layers.size(); ++l) {
    CHECK(back.gates().layers[l].theta == tr.gates().layers[l].theta);
    CHECK(back.gates().layers[l].theta_max == tr.gates().layers[l].theta_max);
    CHECK(back.gates().layers[l].alive == tr.gates().layers[l].alive);
    CHECK(back.opt().layers[l].mw == tr.opt().layers[l].mw);
    CHECK(back.opt().layers[l].vt == tr.opt().layers[l].vt);
  }
  TrainConfig echo = checkpoint_config(path);
  CHECK(echo.lambda == tr.config().lambda);
  CHECK(echo.seed == tr.config().seed);
  CHECK(std::get<FlatteningPrior>(echo.prior).gamma ==
        std::get<FlatteningPrior>(tr.config().prior).gamma);
}

TEST_CASE("a resumed run continues exactly like an uninterrupted one") {
  TempDir dir;
  Dataset data = small_data();

  Trainer straight = make_trainer(5);
  for (int i = 0; i < 20; ++i) {
    straight.step(data);
  }

  Trainer part = make_trainer(5);
  for (int i = 0; i < 9; ++i) {
    part.step(data);
  }
  std::string path = dir.file("mid.bin");
  save_checkpoint(path, part);
  Trainer resumed = load_checkpoint(path);
  for (int i = 0; i < 11; ++i) {
    resumed.step(data);
  }

  CHECK(networks_equal(resumed.net(), straight.net()));
  CHECK(resumed.gates().layers[0].theta == straight.gates().layers[0].theta);
  CHECK(resumed.iteration() == straight.iteration());
  CHECK(resumed.rng().serialize() == straight.rng().serialize());
}

TEST_CASE("corrupted or foreign checkpoint files are rejected") {
  TempDir dir;
  Trainer tr = make_trainer();
  std::string path = dir.file("ck.bin");
  save_checkpoint(path, tr);

  // flip one payload byte: checksum must catch it
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char c;
    f.seekg(200);
    f.get(c);
    f.seekp(200);
    f.put(static_cast<char>(c ^ 0x40));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path),
                       doctest::Contains("checksum mismatch"),
                       std::runtime_error);

  std::string other = dir.file("not_ck.bin");
  {
    std::ofstream f(other, std::ios::binary);
    f << "definitely not a checkpoint, far too short to parse fully";
  }
  CHECK_THROWS_AS(load_checkpoint(other), std::runtime_error);

  // truncated file
  save_checkpoint(path, tr);
  {
    std::string all;
    {
      std::ifstream f(path, std::ios::binary);
      std::stringstream ss;
      ss << f.rdbuf();
      all = ss.str();
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(all.data(), all.size() / 2);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"),
                       std::runtime_error);
}

TEST_CASE("metrics files carry one row per epoch and a stable header") {
  TempDir dir;
  MetricsRow r1;
  r1.epoch = 1;
  r1.iteration = 10;
  r1.train_loss = 1.5;
  r1.eval_loss = 1.25;
  r1.accuracy = 0.5;
  r1.alive_units = 9;
  r1.prune_percent = 10.0;
  r1.layer_stats.push_back({0, 5, 0.5, 0.1, 0.9});
  r1.layer_stats.push_back({1, 4, 0.4, 0.2, 0.8});
  MetricsRow r2 = r1;
  r2.epoch = 2;
  r2.iteration = 20;

  std::string path = dir.file("metrics.csv");
  emit_metrics(path, {r1, r2});
  std::ifstream in(path);
  std::string header, line1, line2, extra;
  std::getline(in, header);
  std::getline(in, line1);
  std::getline(in, line2);
  CHECK_FALSE(std::getline(in, extra));
  CHECK(header ==
        "epoch,iteration,train_loss,eval_loss,accuracy,alive_units,"
        "prune_percent,l0_alive,l0_theta_mean,l0_theta_min,l0_theta_max,"
        "l1_alive,l1_theta_mean,l1_theta_min,l1_theta_max");
  CHECK(line1 ==
        "1,10,1.5,1.25,0.5,9,10,5,0.5,0.10000000000000001,"
        "0.90000000000000002,4,0.40000000000000002,0.20000000000000001,"
        "0.80000000000000004");
  CHECK(line2.substr(0, 5) == "2,20,");

  // an empty run still yields a parseable file
  std::string empty_path = dir.file("empty.csv");
  emit_metrics(empty_path, {});
  std::ifstream ein(empty_path);
  std::getline(ein, header);
  CHECK(header ==
        "epoch,iteration,train_loss,eval_loss,accuracy,alive_units,"
        "prune_percent");
  CHECK_FALSE(std::getline(ein, extra));
}

TEST_CASE("gate trajectories stay on the fixed unit grid") {
  TempDir dir;
  std::vector<UnitId> units = {{0, 0}, {0, 1}, {1, 0}};
  std::vector<std::vector<std::pair<UnitId, double>>> snaps = {
      {{{0, 0}, 0.5}, {{0, 1}, 0.6}, {{1, 0}, 0.7}},
      {{{0, 0}, 0.4}, {{1, 0}, 0.65}},  // unit (0,1) pruned: reads 0
  };
  std::string path = dir.file("theta.csv");
  emit_theta_trajectory(path, snaps, units);
  std::ifstream in(path);
  std::string header, l1, l2;
  std::getline(in, header);
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(header == "epoch,l0_u0,l0_u1,l1_u0");
  CHECK(l1 == "1,0.5,0.59999999999999998,0.69999999999999996");
  CHECK(l2 == "2,0.40000000000000002,0,0.65000000000000002");
}

TEST_CASE("configurations survive a JSON round trip") {
  TrainConfig c;
  c.lambda = 7.5;
  c.batch_size = 32;
  c.lr = 2e-3;
  c.schedule = ScheduleKind::RobbinsMonro;
  c.rm_tau = 55.0;
  c.estimator = EstimatorKind::Hybrid;
  c.hybrid_top_k = 7;
  c.prior = BetaPrior{0.8, 12.0};
  c.theta0 = 0.6;
  c.drop_after = 999;
  c.epochs = 13;
  c.seed = 1234567;

  TrainConfig back = config_from_json(config_to_json(c));
  CHECK(back.lambda == c.lambda);
  CHECK(back.batch_size == c.batch_size);
  CHECK(back.lr == c.lr);
  CHECK(back.schedule == c.schedule);
  CHECK(back.rm_tau == c.rm_tau);
  CHECK(back.estimator == c.estimator);
  CHECK(back.hybrid_top_k == c.hybrid_top_k);
  CHECK(std::get<BetaPrior>(back.prior).alpha == 0.8);
  CHECK(std::get<BetaPrior>(back.prior).beta == 12.0);
  CHECK(back.theta0 == c.theta0);
  CHECK(back.drop_after == c.drop_after);
  CHECK(back.epochs == c.epochs);
  CHECK(back.seed == c.seed);

  // missing keys fall back to defaults; unknown names are rejected
  TrainConfig partial = config_from_json(nlohmann::json{{"lr", 0.5}});
  CHECK(partial.lr == 0.5);
  CHECK(partial.batch_size == TrainConfig{}.batch_size);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"schedule", "sgd"}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"estimator", "exact"}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      config_from_json(nlohmann::json{{"prior", {{"family", "cauchy"}}}}),
      std::invalid_argument);
}
