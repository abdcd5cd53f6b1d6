#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "af/common.hpp"
#include "af/data.hpp"
#include "af/rng.hpp"
#include "af/tensor.hpp"

namespace fs = std::filesystem;
using af::DataMode;
using af::FaceLatent;
using af::Rng;
using af::Tensor;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "af-data-tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void spit(const fs::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary);
  f << content;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(),
                     a.size() * sizeof(double)) == 0;
}

constexpr std::size_t kS = af::kImageSize;

const std::string kMtlHeader =
    "path,valence,arousal,expr,au0,au1,au2,au3,au4,au5,au6,au7,au8,au9,au10,"
    "au11\n";

}  // namespace

TEST_CASE("render determinism and pixel range") {
  FaceLatent l{0.5, 0.8, 0.2, 0.1, 99};
  Tensor a = af::render_face(l, kS, kS);
  Tensor b = af::render_face(l, kS, kS);
  CHECK(bitwise_equal(a, b));
  CHECK(a.shape() == af::Shape{3, kS, kS});
  double mean = 0.0;
  for (double v : a.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    mean += v;
  }
  mean /= a.size();
  CHECK(mean > 0.05);
  CHECK(mean < 0.95);
  // channels replicate the grayscale plane
  for (std::size_t i = 0; i < kS * kS; ++i)
    CHECK(a.data()[i] == a.data()[kS * kS + i]);
}

TEST_CASE("render rejects tiny sizes and bad latents") {
  CHECK_THROWS_AS(af::render_face(FaceLatent{}, 16, 64),
                  std::invalid_argument);
  CHECK_THROWS_AS(af::render_face(FaceLatent{}, 64, 31),
                  std::invalid_argument);
  FaceLatent bad;
  bad.mouth_curve = 1.5;
  CHECK_THROWS_AS(af::render_face(bad, 64, 64), std::invalid_argument);
  CHECK_THROWS_AS(af::label_from_latent(bad, DataMode::kMtl),
                  std::invalid_argument);
}

TEST_CASE("mouth curvature only touches the mouth region") {
  FaceLatent smile{1.0, 0.6, 0.1, 0.2, 7};
  FaceLatent frown = smile;
  frown.mouth_curve = -1.0;
  Tensor a = af::render_face(smile, kS, kS);
  Tensor b = af::render_face(frown, kS, kS);
  const af::PixelBox box = af::mouth_region(kS, kS);
  bool any_diff = false;
  for (std::size_t y = 0; y < kS; ++y)
    for (std::size_t x = 0; x < kS; ++x) {
      const bool inside =
          y >= box.y0 && y < box.y1 && x >= box.x0 && x < box.x1;
      const bool differs = a.data()[y * kS + x] != b.data()[y * kS + x];
      if (differs) {
        any_diff = true;
        CHECK(inside);
      }
    }
  CHECK(any_diff);
}

TEST_CASE("labels from latents") {
  SUBCASE("full smile with wide eyes is happiness at (1,1)") {
    FaceLatent l{1.0, 1.0, 0.0, 0.0, 0};
    af::Labels mtl = af::label_from_latent(l, DataMode::kMtl);
    CHECK(mtl.valence == 1.0);
    CHECK(mtl.arousal == 1.0);
    CHECK(af::expr_names(DataMode::kMtl)[mtl.expr] == "happiness");
    af::Labels lsd = af::label_from_latent(l, DataMode::kLsd);
    CHECK(af::expr_names(DataMode::kLsd)[lsd.expr] == "happiness");
  }
  SUBCASE("neutral latent is class 0 with no active AUs") {
    FaceLatent l{0.0, 0.5, 0.0, 0.0, 0};
    af::Labels lab = af::label_from_latent(l, DataMode::kMtl);
    CHECK(af::expr_names(DataMode::kMtl)[lab.expr] == "neutral");
    for (int a : lab.aus) CHECK(a == 0);
  }
  SUBCASE("each prototype labels as its own class") {
    for (DataMode mode : {DataMode::kMtl, DataMode::kLsd}) {
      const auto& protos = af::expr_prototypes(mode);
      for (std::size_t c = 0; c < protos.size(); ++c) {
        FaceLatent l;
        l.mouth_curve = protos[c][0];
        l.eye_open = (protos[c][1] + 1.0) / 2.0;
        l.brow_raise = protos[c][2];
        l.brow_knit = protos[c][3];
        CHECK(af::label_from_latent(l, mode).expr == static_cast<int>(c));
      }
    }
  }
  SUBCASE("AU thresholds fire on crafted geometry") {
    FaceLatent l{0.9, 0.9, 0.7, 0.0, 0};  // grin, wide eyes, raised brows
    af::Labels lab = af::label_from_latent(l, DataMode::kMtl);
    CHECK(lab.aus[0] == 1);   // brow_raise > 0.3
    CHECK(lab.aus[1] == 1);   // brow_raise > 0.6
    CHECK(lab.aus[2] == 0);
    CHECK(lab.aus[4] == 1);   // eye_open > 0.8
    CHECK(lab.aus[5] == 0);
    CHECK(lab.aus[6] == 1);   // mouth_curve > 0.4
    CHECK(lab.aus[8] == 1);   // |mouth_curve| > 0.7
    CHECK(lab.aus[10] == 1);  // wide eyes with raised brows
    CHECK(lab.aus[11] == 1);  // smile with open eyes
    FaceLatent m{-0.8, 0.1, -0.5, 0.6, 0};  // frown, narrow eyes, knit brows
    af::Labels lb = af::label_from_latent(m, DataMode::kMtl);
    CHECK(lb.aus[2] == 1);  // brow_raise < -0.3
    CHECK(lb.aus[3] == 1);  // brow_knit > 0.5
    CHECK(lb.aus[5] == 1);  // eye_open < 0.2
    CHECK(lb.aus[7] == 1);  // mouth_curve < -0.4
    CHECK(lb.aus[9] == 1);  // knit with lowered brows
  }
  SUBCASE("labeling is pure") {
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
      FaceLatent l = af::sample_latent(DataMode::kMtl, rng);
      af::Labels a = af::label_from_latent(l, DataMode::kMtl);
      af::Labels b = af::label_from_latent(l, DataMode::kMtl);
      CHECK(a.valence == b.valence);
      CHECK(a.arousal == b.arousal);
      CHECK(a.expr == b.expr);
      CHECK(a.aus == b.aus);
    }
  }
}

TEST_CASE("every class stays populated over 10000 draws") {
  for (DataMode mode : {DataMode::kMtl, DataMode::kLsd}) {
    Rng rng(0);
    const std::size_t C = af::expr_prototypes(mode).size();
    std::vector<int> count(C, 0);
    for (int i = 0; i < 10000; ++i)
      ++count[af::label_from_latent(af::sample_latent(mode, rng), mode).expr];
    for (std::size_t c = 0; c < C; ++c) {
      const double freq = count[c] / 10000.0;
      CHECK(freq >= 1.0 / (3.0 * C));
      CHECK(freq <= 3.0 / C);
    }
  }
}

TEST_CASE("every AU sees both labels over 10000 draws") {
  Rng rng(0);
  std::vector<int> pos(af::kNumAus, 0);
  for (int i = 0; i < 10000; ++i) {
    af::Labels l = af::label_from_latent(af::sample_latent(DataMode::kMtl, rng),
                                         DataMode::kMtl);
    for (std::size_t k = 0; k < af::kNumAus; ++k) pos[k] += l.aus[k];
  }
  for (std::size_t k = 0; k < af::kNumAus; ++k) {
    CHECK(pos[k] > 100);
    CHECK(pos[k] < 9900);
  }
}

TEST_CASE("mouth-region brightness predicts valence sign") {
  Rng rng(0);
  const af::PixelBox box = af::mouth_region(kS, kS);
  const std::size_t ymid = (box.y0 + box.y1) / 2;
  std::vector<std::pair<double, int>> feats;
  for (int i = 0; i < 1000; ++i) {
    const FaceLatent lat = af::sample_latent(DataMode::kMtl, rng);
    const Tensor img = af::render_face(lat, kS, kS);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t y = ymid; y < box.y1; ++y)
      for (std::size_t x = box.x0; x < box.x1; ++x) {
        sum += img.data()[y * kS + x];
        ++n;
      }
    feats.emplace_back(sum / n, lat.mouth_curve >= 0.0 ? 1 : 0);
  }
  std::sort(feats.begin(), feats.end());
  // best threshold classifier over the scalar feature, either polarity
  int best = 0;
  for (std::size_t cut = 0; cut <= feats.size(); ++cut) {
    int lo_pos = 0, lo_neg = 0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      const bool left = i < cut;
      if (left == (feats[i].second == 1)) ++lo_pos;
      if (left == (feats[i].second == 0)) ++lo_neg;
    }
    best = std::max({best, lo_pos, lo_neg});
  }
  CHECK(best >= 950);
}

TEST_CASE("pixmap round trip") {
  const fs::path dir = fresh_dir("ppm");
  SUBCASE("all-white 2x2") {
    af::write_ppm((dir / "w.ppm").string(), Tensor::ones({3, 2, 2}));
    Tensor t = af::load_image((dir / "w.ppm").string());
    REQUIRE(t.shape() == af::Shape{3, 2, 2});
    for (double v : t.data()) CHECK(v == 1.0);
  }
  SUBCASE("random image survives quantization") {
    Rng rng(5);
    std::vector<double> v(3 * 4 * 6);
    for (double& x : v) x = rng.uniform(0.0, 1.0);
    Tensor img = Tensor::from({3, 4, 6}, std::vector<double>(v));
    af::write_ppm((dir / "r.ppm").string(), img);
    Tensor back = af::load_image((dir / "r.ppm").string());
    for (std::size_t i = 0; i < v.size(); ++i)
      CHECK(std::abs(back.data()[i] - v[i]) <= 1.0 / 255.0);
    // a second write of the loaded tensor is byte-identical
    af::write_ppm((dir / "r2.ppm").string(), back);
    CHECK(slurp(dir / "r.ppm") == slurp(dir / "r2.ppm"));
  }
  SUBCASE("malformed files raise structured errors") {
    CHECK_THROWS_AS(af::load_image((dir / "absent.ppm").string()), af::IoError);
    spit(dir / "bad1.ppm", "P5\n2 2\n255\n0000");
    CHECK_THROWS_AS(af::load_image((dir / "bad1.ppm").string()),
                    af::ParseError);
    spit(dir / "bad2.ppm", "P6\n2 2\n255\n0000");  // 4 of 12 payload bytes
    CHECK_THROWS_AS(af::load_image((dir / "bad2.ppm").string()),
                    af::ParseError);
    spit(dir / "bad3.ppm", "P6\n2 2\n65535\n");
    CHECK_THROWS_AS(af::load_image((dir / "bad3.ppm").string()),
                    af::ParseError);
    spit(dir / "bad4.ppm", "P6\n999999999 2\n255\n");
    CHECK_THROWS_AS(af::load_image((dir / "bad4.ppm").string()),
                    af::ParseError);
  }
  SUBCASE("comments and extra whitespace in the header are tolerated") {
    std::string body(12, '\0');
    spit(dir / "c.ppm", "P6 # comment\n# another\n 2\t2 \n255\n" + body);
    Tensor t = af::load_image((dir / "c.ppm").string());
    CHECK(t.shape() == af::Shape{3, 2, 2});
    for (double v : t.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("dataset generation is deterministic") {
  const fs::path a = fresh_dir("gen-a"), b = fresh_dir("gen-b");
  const std::string ma = af::generate_dataset(10, DataMode::kMtl, 5, a.string());
  const std::string mb = af::generate_dataset(10, DataMode::kMtl, 5, b.string());
  CHECK(slurp(ma) == slurp(mb));
  for (int i = 0; i < 10; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%06d.ppm", i);
    CHECK(slurp(a / name) == slurp(b / name));
  }
  const std::string mc = af::generate_dataset(10, DataMode::kMtl, 6, fresh_dir("gen-c").string());
  CHECK(slurp(ma) != slurp(mc));
}

TEST_CASE("LSD annotations carry exactly two fields per row") {
  const fs::path dir = fresh_dir("gen-lsd");
  const std::string m = af::generate_dataset(8, DataMode::kLsd, 3, dir.string());
  std::ifstream f(m);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(f, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == 1);
    ++rows;
  }
  CHECK(rows == 9);  // header + 8
  std::vector<af::Sample> samples = af::parse_annotations(m, DataMode::kLsd);
  REQUIRE(samples.size() == 8);
  for (const af::Sample& s : samples) {
    CHECK(s.expr >= 0);
    CHECK(s.expr < 6);
    CHECK(s.aus.empty());
  }
}

TEST_CASE("MTL masking rate lands near one in ten") {
  const fs::path dir = fresh_dir("gen-mask");
  const std::string m =
      af::generate_dataset(1000, DataMode::kMtl, 0, dir.string());
  std::vector<af::Sample> samples = af::parse_annotations(m, DataMode::kMtl);
  REQUIRE(samples.size() == 1000);
  std::size_t masked = 0;
  for (const af::Sample& s : samples) {
    const bool va_masked = s.valence == af::kVaMissing;
    const bool expr_masked = s.expr == af::kClassMissing;
    const bool au_masked =
        std::all_of(s.aus.begin(), s.aus.end(),
                    [](int v) { return v == af::kClassMissing; });
    const int n = int(va_masked) + int(expr_masked) + int(au_masked);
    CHECK(n <= 1);  // generator masks at most one task per row
    masked += n;
    CHECK((s.valence == af::kVaMissing) == (s.arousal == af::kVaMissing));
  }
  CHECK(masked >= 80);
  CHECK(masked <= 120);
}

TEST_CASE("annotation parsing") {
  const fs::path dir = fresh_dir("parse");
  SUBCASE("documented example row") {
    spit(dir / "a.csv",
         kMtlHeader + "img/0.ppm,0.5,-0.2,3,0,1,0,0,0,0,0,0,0,0,0,1\n");
    std::vector<af::Sample> s =
        af::parse_annotations((dir / "a.csv").string(), DataMode::kMtl);
    REQUIRE(s.size() == 1);
    CHECK(s[0].path == "img/0.ppm");
    CHECK(s[0].valence == 0.5);
    CHECK(s[0].arousal == -0.2);
    CHECK(s[0].expr == 3);
    CHECK(s[0].aus[1] == 1);
    CHECK(s[0].aus[11] == 1);
    CHECK(s[0].aus[2] == 0);
  }
  SUBCASE("out-of-range valence names the line") {
    spit(dir / "b.csv",
         kMtlHeader + "x.ppm,0.1,0.1,0,0,0,0,0,0,0,0,0,0,0,0,0\n" +
             "y.ppm,2.0,0.1,0,0,0,0,0,0,0,0,0,0,0,0,0\n");
    try {
      af::parse_annotations((dir / "b.csv").string(), DataMode::kMtl);
      FAIL("expected a parse error");
    } catch (const af::ParseError& e) {
      CHECK(e.line() == 3);
      CHECK(std::string(e.what()).find("valence") != std::string::npos);
    }
  }
  SUBCASE("sentinels are accepted") {
    spit(dir / "c.csv",
         kMtlHeader +
             "x.ppm,-5.000000,-5.000000,-1,1,0,0,0,0,0,0,0,0,0,0,0\n");
    std::vector<af::Sample> s =
        af::parse_annotations((dir / "c.csv").string(), DataMode::kMtl);
    CHECK(s[0].valence == af::kVaMissing);
    CHECK(s[0].expr == -1);
  }
  SUBCASE("structured rejections") {
    const std::vector<std::string> bad{
        "x.ppm,0.1,0.1,0,0,0,0\n",                                // field count
        "x.ppm,zebra,0.1,0,0,0,0,0,0,0,0,0,0,0,0,0\n",            // bad real
        "x.ppm,0.1,0.1,9,0,0,0,0,0,0,0,0,0,0,0,0\n",              // expr range
        "x.ppm,0.1,0.1,0,2,0,0,0,0,0,0,0,0,0,0,0\n",              // au value
        ",0.1,0.1,0,0,0,0,0,0,0,0,0,0,0,0,0\n",                   // empty path
        "x.ppm,-5,-5,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1,-1\n",   // all masked
        "x.ppm,nan,0.1,0,0,0,0,0,0,0,0,0,0,0,0,0\n",              // non-finite
    };
    for (const std::string& row : bad) {
      spit(dir / "d.csv", kMtlHeader + row);
      CHECK_THROWS_AS(
          af::parse_annotations((dir / "d.csv").string(), DataMode::kMtl),
          af::ParseError);
    }
    spit(dir / "e.csv", "path\nx.ppm,1\n");  // wrong header width
    CHECK_THROWS_AS(
        af::parse_annotations((dir / "e.csv").string(), DataMode::kLsd),
        af::ParseError);
    CHECK_THROWS_AS(af::parse_annotations((dir / "nope.csv").string(),
                                          DataMode::kMtl),
                    af::IoError);
  }
  SUBCASE("write then parse round-trips field-for-field") {
    const fs::path gen = fresh_dir("parse-rt");
    const std::string m =
        af::generate_dataset(6, DataMode::kMtl, 11, gen.string());
    std::vector<af::Sample> first = af::parse_annotations(m, DataMode::kMtl);
    af::write_annotations((gen / "copy.csv").string(), first, DataMode::kMtl);
    std::vector<af::Sample> second =
        af::parse_annotations((gen / "copy.csv").string(), DataMode::kMtl);
    REQUIRE(first.size() == second.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
      CHECK(first[i].path == second[i].path);
      CHECK(first[i].valence == second[i].valence);
      CHECK(first[i].arousal == second[i].arousal);
      CHECK(first[i].expr == second[i].expr);
      CHECK(first[i].aus == second[i].aus);
    }
  }
}

TEST_CASE("parser survives ten thousand malformed rows") {
  const fs::path dir = fresh_dir("fuzz");
  const std::string alphabet = "0123456789.,-+eEixn aZ/#\t\"\\";
  Rng rng(123);
  const std::string valid = "x.ppm,0.1,0.1,0,0,1,0,0,0,0,0,0,0,0,0,0";
  std::size_t parsed = 0, rejected = 0;
  for (int i = 0; i < 10000; ++i) {
    std::string row;
    if (rng.bernoulli(0.5)) {
      // random mutation of a valid row
      row = valid;
      const std::size_t edits = 1 + rng.uniform_index(4);
      for (std::size_t e = 0; e < edits; ++e) {
        const std::size_t at = rng.uniform_index(row.size());
        switch (rng.uniform_index(3)) {
          case 0:
            row[at] = alphabet[rng.uniform_index(alphabet.size())];
            break;
          case 1:
            row.erase(at, 1);
            break;
          default:
            row.insert(at, 1, alphabet[rng.uniform_index(alphabet.size())]);
        }
        if (row.empty()) row = ",";
      }
    } else {
      const std::size_t len = rng.uniform_index(40);
      for (std::size_t k = 0; k < len; ++k)
        row.push_back(alphabet[rng.uniform_index(alphabet.size())]);
    }
    spit(dir / "f.csv", kMtlHeader + row + "\n");
    try {
      std::vector<af::Sample> s =
          af::parse_annotations((dir / "f.csv").string(), DataMode::kMtl);
      // anything accepted must satisfy the sample invariants
      for (const af::Sample& smp : s) {
        CHECK(!smp.path.empty());
        CHECK((smp.valence == af::kVaMissing ||
               std::abs(smp.valence) <= 1.0));
        CHECK(smp.expr >= -1);
        CHECK(smp.expr < 8);
      }
      ++parsed;
    } catch (const af::ParseError&) {
      ++rejected;
    }
  }
  CHECK(parsed + rejected == 10000);
  CHECK(rejected > parsed);  // mutations rarely stay well-formed
}

TEST_CASE("augmentation primitives") {
  Rng rng(9);
  std::vector<double> v(3 * 8 * 8);
  for (double& x : v) x = rng.uniform(0.0, 1.0);
  Tensor img = Tensor::from({3, 8, 8}, std::move(v));
  SUBCASE("horizontal flip is an exact involution") {
    CHECK(bitwise_equal(af::hflip(af::hflip(img)), img));
    Tensor f = af::hflip(img);
    CHECK(f.data()[0] == img.data()[7]);
  }
  SUBCASE("full-frame crop is the identity") {
    CHECK(bitwise_equal(af::crop_resize(img, 0, 0, 8, 8), img));
  }
  SUBCASE("crop keeps shape and interpolates within bounds") {
    Tensor c = af::crop_resize(img, 1, 1, 6, 6);
    CHECK(c.shape() == img.shape());
    const auto [lo, hi] =
        std::minmax_element(img.data().begin(), img.data().end());
    for (double x : c.data()) {
      CHECK(x >= *lo);
      CHECK(x <= *hi);
    }
    CHECK_THROWS_AS(af::crop_resize(img, 4, 0, 6, 8), std::invalid_argument);
    CHECK_THROWS_AS(af::crop_resize(img, 0, 0, 0, 8), std::invalid_argument);
  }
}

TEST_CASE("batch stream") {
  const fs::path dir = fresh_dir("batches");
  const std::string m = af::generate_dataset(10, DataMode::kMtl, 21, dir.string());
  const af::Dataset ds = af::load_dataset(m, DataMode::kMtl);
  REQUIRE(ds.meta.size() == 10);
  CHECK(ds.height == kS);
  CHECK(ds.width == kS);

  SUBCASE("ten samples in batches of four split 4,4,2") {
    af::BatchStream bs(ds, 4, 1, false);
    CHECK(bs.batches_per_epoch() == 3);
    af::Batch b;
    std::vector<std::size_t> sizes;
    while (bs.next(b)) {
      sizes.push_back(b.size());
      CHECK(b.images.dim(0) == b.size());
      CHECK(b.images.shape() ==
            af::Shape{b.size(), 3, ds.height, ds.width});
    }
    CHECK(sizes == std::vector<std::size_t>{4, 4, 2});
  }
  SUBCASE("same seed reproduces the exact stream") {
    for (bool augment : {false, true}) {
      af::BatchStream s1(ds, 3, 7, augment), s2(ds, 3, 7, augment);
      af::Batch b1, b2;
      while (s1.next(b1)) {
        REQUIRE(s2.next(b2));
        CHECK(bitwise_equal(b1.images, b2.images));
        CHECK(b1.expr == b2.expr);
        CHECK(b1.valence == b2.valence);
      }
      CHECK_FALSE(s2.next(b2));
    }
  }
  SUBCASE("epochs reshuffle") {
    af::BatchStream bs(ds, 10, 7, false);
    af::Batch e0, e1;
    REQUIRE(bs.next(e0));
    bs.start_epoch(1);
    REQUIRE(bs.next(e1));
    CHECK(e0.expr.size() == e1.expr.size());
    CHECK_FALSE(bitwise_equal(e0.images, e1.images));
    // same multiset of samples either way
    auto v0 = e0.valence, v1 = e1.valence;
    std::sort(v0.begin(), v0.end());
    std::sort(v1.begin(), v1.end());
    CHECK(v0 == v1);
  }
  SUBCASE("augmented pixels stay in range and images change") {
    af::BatchStream bs(ds, 10, 3, true);
    af::BatchStream plain(ds, 10, 3, false);
    af::Batch a, p;
    REQUIRE(bs.next(a));
    REQUIRE(plain.next(p));
    for (double v : a.images.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK_FALSE(bitwise_equal(a.images, p.images));
    CHECK(a.expr == p.expr);  // labels never augmented
  }
  SUBCASE("degenerate construction is rejected") {
    CHECK_THROWS_AS(af::BatchStream(ds, 0, 1, false), std::invalid_argument);
    af::Dataset empty;
    CHECK_THROWS_AS(af::BatchStream(empty, 4, 1, false),
                    std::invalid_argument);
  }
}

TEST_CASE("dataset rejects mixed image sizes") {
  const fs::path dir = fresh_dir("mixed");
  fs::create_directories(dir / "images");
  af::write_ppm((dir / "images/a.ppm").string(), Tensor::zeros({3, 64, 64}));
  af::write_ppm((dir / "images/b.ppm").string(), Tensor::zeros({3, 32, 32}));
  std::vector<af::Sample> rows(2);
  rows[0].path = "images/a.ppm";
  rows[1].path = "images/b.ppm";
  for (af::Sample& s : rows) {
    s.valence = 0.0;
    s.arousal = 0.0;
    s.expr = 0;
    s.aus.assign(af::kNumAus, 0);
  }
  af::write_annotations((dir / "ann.csv").string(), rows, DataMode::kMtl);
  CHECK_THROWS_AS(af::load_dataset((dir / "ann.csv").string(), DataMode::kMtl),
                  std::invalid_argument);
}
