#include <doctest.h>

#include <cstdio>
#include <jpeglib.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "ssmcyto/dataset.hpp"
#include "ssmcyto/error.hpp"
#include "ssmcyto/synth.hpp"
#include "test_util.hpp"

using namespace ssmcyto;
namespace fs = std::filesystem;

namespace {

Image random_image(std::size_t w, std::size_t h, Rng& rng) {
  Image img(w, h);
  for (double& v : img.data) v = uniform01(rng);
  return img;
}

double max_pixel_diff(const Image& a, const Image& b) {
  return testutil::max_abs_diff(a.data, b.data);
}

void write_jpeg(const std::string& path, std::size_t w, std::size_t h, unsigned char value) {
  jpeg_compress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f != nullptr);
  jpeg_stdio_dest(&cinfo, f);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, 100, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  std::vector<unsigned char> row(w * 3, value);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW r = row.data();
    jpeg_write_scanlines(&cinfo, &r, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::fclose(f);
  jpeg_destroy_compress(&cinfo);
}

// Writes `counts[c]` tiny images under root/<names[c]>/.
void mock_dataset(const fs::path& root, const std::vector<std::string>& names, const std::vector<std::size_t>& counts) {
  for (std::size_t c = 0; c < names.size(); ++c) {
    fs::create_directories(root / names[c]);
    for (std::size_t i = 0; i < counts[c]; ++i) {
      Image img(2, 2, (static_cast<double>(c) + 1.0) / 10.0);
      img.at(0, 0, 0) = static_cast<double>(i % 256) / 255.0;
      char file[32];
      std::snprintf(file, sizeof file, "s%05zu.png", i);
      write_png((root / names[c] / file).string(), img);
    }
  }
}

const std::vector<std::size_t> kReferenceCounts{1985, 1253, 567, 514, 157, 156, 93, 83};
const std::vector<std::string> kReferenceClasses{"1_SNE",        "2_Lymphocyte", "3_Monocyte", "4_BNE",
                                             "5_Eosinophil", "6_Myeloblast", "7_Basophil", "8_Metamyelocyte"};

}  // namespace

TEST_CASE("image io") {
  testutil::TempDir dir("io");
  Rng rng(60);
  Image img = random_image(7, 5, rng);
  write_png(dir.str("a.png"), img);
  Image back = read_image(dir.str("a.png"));
  CHECK(back.width == 7);
  CHECK(back.height == 5);
  CHECK(max_pixel_diff(back, img) <= 0.5 / 255.0 + 1e-12);

  write_jpeg(dir.str("b.jpg"), 6, 4, 200);
  Image jpg = read_image(dir.str("b.jpg"));
  CHECK(jpg.width == 6);
  CHECK(jpg.height == 4);
  for (double v : jpg.data) CHECK(v == doctest::Approx(200.0 / 255.0).epsilon(0.02));

  { std::ofstream(dir.str("bad.png")) << "not an image"; }
  CHECK_THROWS_AS(read_image(dir.str("bad.png")), FormatError);
  {
    std::ofstream out(dir.str("trunc.png"), std::ios::binary);
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.write(reinterpret_cast<const char*>(sig), 8);
  }
  CHECK_THROWS_AS(read_image(dir.str("trunc.png")), FormatError);
  { std::ofstream(dir.str("trunc.jpg"), std::ios::binary) << "\xff\xd8\xff\xe0"; }
  CHECK_THROWS_AS(read_image(dir.str("trunc.jpg")), FormatError);
  {
    write_jpeg(dir.str("half.jpg"), 32, 32, 90);
    fs::resize_file(dir.str("half.jpg"), fs::file_size(dir.str("half.jpg")) / 2);
  }
  CHECK_THROWS_AS(read_image(dir.str("half.jpg")), FormatError);
  CHECK_THROWS_AS(read_image(dir.str("missing.png")), IoError);
}

TEST_CASE("augmentation") {
  Rng rng(61);
  Image img = random_image(16, 12, rng);

  SUBCASE("identity parameters leave the image unchanged") {
    for (int trial = 0; trial < 5; ++trial) {
      Image out = augment_image(img, identity_augment(), rng);
      CHECK(max_pixel_diff(out, img) < 1e-6);
    }
  }
  SUBCASE("a forced horizontal flip is an involution") {
    AugmentParams p = identity_augment();
    p.hflip_p = 1.0;
    Image once = augment_image(img, p, rng);
    CHECK(max_pixel_diff(once, img) > 0.0);
    CHECK(max_pixel_diff(augment_image(once, p, rng), img) < 1e-6);
    CHECK(max_pixel_diff(flip_vertical(flip_vertical(img)), img) == 0.0);
  }
  SUBCASE("a constant image survives any affine with edge fill") {
    AugmentParams p = identity_augment();
    p.rotation_deg = {0.0, 360.0};
    p.translate_frac = 0.10;
    p.scale = {0.9, 1.1};
    p.shear_deg = 5.0;
    p.hflip_p = p.vflip_p = 0.5;
    p.blur_sigma = {0.1, 1.0};
    Image flat(16, 12);
    for (std::size_t i = 0; i < 16 * 12; ++i) {
      flat.data[3 * i] = 0.2;
      flat.data[3 * i + 1] = 0.5;
      flat.data[3 * i + 2] = 0.9;
    }
    for (int trial = 0; trial < 20; ++trial) CHECK(max_pixel_diff(augment_image(flat, p, rng), flat) < 1e-12);
  }
  SUBCASE("known affine draws") {
    Image x(5, 5);
    x.at(3, 2, 0) = 1.0;
    AffineDraw shift;
    shift.tx = 1.0;
    CHECK(apply_affine(x, shift).at(4, 2, 0) == doctest::Approx(1.0));
    AffineDraw quarter;
    quarter.rotation_deg = 90.0;
    // Rotating (+1, 0) from the center by +90 degrees lands on (0, +1).
    CHECK(apply_affine(x, quarter).at(2, 3, 0) == doctest::Approx(1.0));
  }
  SUBCASE("defaults produce valid, seed-deterministic output") {
    AugmentParams p;
    CHECK_NOTHROW(validate(p));
    Rng a(5), b(5);
    Image ia = augment_image(img, p, a), ib = augment_image(img, p, b);
    CHECK(max_pixel_diff(ia, ib) == 0.0);
    for (double v : ia.data) CHECK((v >= 0.0 && v <= 1.0));
  }
  SUBCASE("hsv round trip") {
    for (int i = 0; i < 200; ++i) {
      const double r = uniform01(rng), g = uniform01(rng), b = uniform01(rng);
      double h, s, v, r2, g2, b2;
      rgb_to_hsv(r, g, b, h, s, v);
      hsv_to_rgb(h, s, v, r2, g2, b2);
      CHECK(std::abs(r - r2) < 1e-12);
      CHECK(std::abs(g - g2) < 1e-12);
      CHECK(std::abs(b - b2) < 1e-12);
    }
  }
  SUBCASE("parameter validation and json") {
    AugmentParams p;
    p.hflip_p = 1.5;
    CHECK_THROWS_AS(validate(p), ConfigError);
    p = AugmentParams{};
    p.blur_kernel = 4;
    CHECK_THROWS_AS(validate(p), ConfigError);
    CHECK(augment_params_from_json(to_json(identity_augment())) == identity_augment());
    CHECK_THROWS_AS(augment_params_from_json(nlohmann::json{{"sharpen", 1.0}}), ConfigError);
    CHECK_THROWS_AS(augment_params_from_json(nlohmann::json{{"scale", {1.0}}}), ConfigError);
  }
}

TEST_CASE("load_manifest") {
  testutil::TempDir dir("load");
  SUBCASE("reference counts in row order") {
    mock_dataset(dir.path(), kReferenceClasses, kReferenceCounts);
    DatasetManifest m = load_manifest(dir.str());
    CHECK(m.classes == kReferenceClasses);
    CHECK(m.class_counts(Split::train) == kReferenceCounts);
    CHECK(std::is_sorted(m.samples.begin(), m.samples.end(),
                         [](const Sample& a, const Sample& b) { return a.path < b.path; }));
  }
  SUBCASE("empty root") {
    LoadReport rep;
    DatasetManifest m = load_manifest(dir.str(), &rep);
    CHECK(m.classes.empty());
    CHECK(rep.errors.size() == 1);
  }
  SUBCASE("single class, unreadable and empty entries") {
    mock_dataset(dir.path(), {"only"}, {3});
    { std::ofstream(dir.str("only/broken.png")) << "garbage"; }
    { std::ofstream(dir.str("only/notes.txt")) << "ignored"; }
    fs::create_directories(dir.path() / "zempty");
    LoadReport rep;
    DatasetManifest m = load_manifest(dir.str(), &rep);
    CHECK(m.class_counts(Split::train) == std::vector<std::size_t>{3, 0});
    REQUIRE(rep.errors.size() == 1);
    CHECK(rep.errors[0].find("broken.png") != std::string::npos);
    CHECK(rep.warnings.size() == 1);
  }
  CHECK_THROWS_AS(load_manifest(dir.str("nope")), IoError);
}

TEST_CASE("manifest csv round trip") {
  testutil::TempDir dir("csv");
  DatasetManifest m;
  m.classes = {"a", "b,with comma"};
  m.samples = {{"/x/1.png", 0, Split::train, "original"},
               {"/x/\"q\".png", 1, Split::test, "original"},
               {"/x/3.png", 1, Split::holdout, "/x/1.png"}};
  m.stats = NormStats{{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}, 32};
  save_manifest(m, dir.str("m/manifest.csv"));
  CHECK(fs::exists(dir.str("m/stats.json")));
  DatasetManifest back = load_manifest_csv(dir.str("m/manifest.csv"));
  CHECK(back.classes == m.classes);
  REQUIRE(back.samples.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.samples[i].path == m.samples[i].path);
    CHECK(back.samples[i].label == m.samples[i].label);
    CHECK(back.samples[i].split == m.samples[i].split);
    CHECK(back.samples[i].origin == m.samples[i].origin);
  }
  REQUIRE(back.stats.has_value());
  CHECK(back.stats->mean == m.stats->mean);
  CHECK(back.stats->image_size == 32);

  { std::ofstream(dir.str("bad.csv")) << "file,class\n"; }
  CHECK_THROWS_AS(load_manifest_csv(dir.str("bad.csv")), FormatError);
  CHECK_THROWS_AS(load_manifest_csv(dir.str("absent.csv")), IoError);
  m.samples.push_back({"/x/1.png", 0, Split::test, "original"});
  CHECK_THROWS_AS(m.validate(), ContractError);
}

TEST_CASE("stratified split") {
  DatasetManifest m;
  m.classes = {"a", "b"};
  for (int i = 0; i < 100; ++i) m.samples.push_back({"a" + std::to_string(1000 + i), 0});
  for (int i = 0; i < 50; ++i) m.samples.push_back({"b" + std::to_string(1000 + i), 1});

  DatasetManifest s = stratified_split(m, {4, 1}, 3);
  auto counts = s.counts();
  CHECK(counts[0][static_cast<std::size_t>(Split::train)] == 80);
  CHECK(counts[0][static_cast<std::size_t>(Split::test)] == 20);
  CHECK(counts[1][static_cast<std::size_t>(Split::train)] == 40);
  CHECK(counts[1][static_cast<std::size_t>(Split::test)] == 10);

  DatasetManifest again = stratified_split(m, {4, 1}, 3);
  for (std::size_t i = 0; i < s.samples.size(); ++i) CHECK(s.samples[i].split == again.samples[i].split);
  DatasetManifest other = stratified_split(m, {4, 1}, 4);
  bool differs = false;
  for (std::size_t i = 0; i < s.samples.size(); ++i) differs |= s.samples[i].split != other.samples[i].split;
  CHECK(differs);

  DatasetManifest all = stratified_split(m, {1.0}, 3);
  CHECK(all.class_counts(Split::train) == std::vector<std::size_t>{100, 50});

  DatasetManifest three = stratified_split(m, {7, 1, 2}, 3);
  CHECK(three.counts()[0] == std::array<std::size_t, 4>{70, 0, 10, 20});
  CHECK(three.counts()[1] == std::array<std::size_t, 4>{35, 0, 5, 10});

  DatasetManifest tiny;
  tiny.classes = {"t"};
  tiny.samples = {{"t1", 0, Split::test}};
  std::vector<std::string> warnings;
  CHECK(stratified_split(tiny, {4, 1}, 1, &warnings).samples[0].split == Split::train);
  CHECK(warnings.size() == 1);
  CHECK_THROWS_AS(stratified_split(m, {1, 0}, 1), ConfigError);

  SUBCASE("property: proportions within one sample of the ratios") {
    Rng rng(62);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = uniform_index(rng, 300);
      std::vector<double> ratios(1 + uniform_index(rng, 3));
      for (double& r : ratios) r = uniform(rng, 0.05, 1.0);
      const auto sizes = allocate_counts(n, ratios);
      std::size_t total = 0;
      double rsum = 0;
      for (double r : ratios) rsum += r;
      for (std::size_t i = 0; i < sizes.size(); ++i) {
        total += sizes[i];
        CHECK(std::abs(static_cast<double>(sizes[i]) - static_cast<double>(n) * ratios[i] / rsum) < 1.0);
      }
      CHECK(total == n);
    }
  }
}

TEST_CASE("holdout partition") {
  DatasetManifest m;
  m.classes = {"a", "b"};
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 100; ++i) m.samples.push_back({std::to_string(c) + "_" + std::to_string(1000 + i), c});
  m.samples.push_back({"test_only", 0, Split::test});
  DatasetManifest h = partition_holdout(m, 0.2, 9);
  CHECK(h.class_counts(Split::train) == std::vector<std::size_t>{80, 80});
  CHECK(h.class_counts(Split::holdout) == std::vector<std::size_t>{20, 20});
  CHECK(h.samples.back().split == Split::test);
  std::set<std::string> train, hold;
  for (const Sample& s : h.samples) (s.split == Split::train ? train : hold).insert(s.path);
  for (const auto& p : hold) CHECK(train.count(p) == 0);
  DatasetManifest h2 = partition_holdout(m, 0.2, 9);
  for (std::size_t i = 0; i < h.samples.size(); ++i) CHECK(h.samples[i].split == h2.samples[i].split);
  CHECK_THROWS_AS(partition_holdout(m, 1.0, 9), ConfigError);
}

TEST_CASE("balancing") {
  SUBCASE("balancing arithmetic on the reference counts") {
    const auto targets = parse_targets("500", kReferenceClasses, kReferenceCounts);
    const auto plan = plan_balance(kReferenceCounts, targets);
    CHECK(plan == std::vector<std::size_t>{0, 0, 0, 0, 343, 344, 407, 417});
    CHECK(parse_targets("4_BNE=600,1_SNE=10", kReferenceClasses, kReferenceCounts)[3] == 600);
    CHECK(plan_balance(kReferenceCounts, parse_targets("4_BNE=600,1_SNE=10", kReferenceClasses, kReferenceCounts))[0] == 0);
    CHECK_THROWS_AS(parse_targets("Neutrophil=5", kReferenceClasses, kReferenceCounts), ConfigError);
    CHECK_THROWS_AS(parse_targets("-3", kReferenceClasses, kReferenceCounts), ConfigError);
    CHECK_THROWS_AS(plan_balance({0, 5}, {3, 5}, {"empty", "full"}), ConfigError);
  }
  SUBCASE("augmented copies on disk") {
    testutil::TempDir dir("balance");
    mock_dataset(dir.path() / "raw", {"big", "small"}, {6, 2});
    DatasetManifest m = load_manifest(dir.str("raw"));
    DatasetManifest b = balance_dataset(m, {6, 5}, AugmentParams{}, 11, dir.str("out"));
    CHECK(b.class_counts(Split::train) == std::vector<std::size_t>{6, 5});
    std::size_t augmented = 0;
    for (const Sample& s : b.samples) {
      if (s.origin == "original") continue;
      ++augmented;
      CHECK(s.path.find("__aug") != std::string::npos);
      CHECK(fs::exists(s.path));
      CHECK(s.label == 1);
    }
    CHECK(augmented == 3);
    DatasetManifest again = balance_dataset(m, {6, 5}, AugmentParams{}, 11, dir.str("out2"));
    for (std::size_t i = m.samples.size(); i < b.samples.size(); ++i) {
      CHECK(b.samples[i].origin == again.samples[i].origin);
      CHECK(max_pixel_diff(read_image(b.samples[i].path), read_image(again.samples[i].path)) == 0.0);
    }
    DatasetManifest same = balance_dataset(m, {6, 2}, AugmentParams{}, 11, dir.str("out3"));
    CHECK(same.samples.size() == m.samples.size());
  }
}

TEST_CASE("class weights") {
  auto w = compute_class_weights({100, 300});
  CHECK(w[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(w[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  for (double v : compute_class_weights({7, 7, 7})) CHECK(v == 1.0);
  auto tw = compute_class_weights(kReferenceCounts);
  const double nk = 4808.0 / 8.0;
  for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(static_cast<double>(kReferenceCounts[c]) * tw[c] - nk) < 1e-9);
  CHECK(tw[0] < 1.0);
  CHECK(tw[7] > 1.0);
  CHECK_THROWS_WITH_AS(compute_class_weights({3, 0}, {"x", "lonely"}), doctest::Contains("lonely"), ContractError);
}

TEST_CASE("preprocessing") {
  Image blocks(4, 4);
  const double vals[2][2] = {{0.1, 0.4}, {0.7, 0.9}};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 3; ++c) blocks.at(x, y, c) = vals[y / 2][x / 2];
  Image half = resize_bilinear(blocks, 2, 2);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) CHECK(half.at(x, y, 1) == doctest::Approx(vals[y][x]).epsilon(1e-15));

  Image flat(8, 8, 0.3);
  NormStats own{{0.3, 0.3, 0.3}, {0.0, 0.0, 0.0}, 8};
  Tensor t = preprocess(flat, 8, own);
  CHECK(t.shape() == Shape{3, 8, 8});
  CHECK(testutil::max_abs(t.data()) == 0.0);
  CHECK(preprocess(blocks, 16, NormStats{}).shape() == Shape{3, 16, 16});

  testutil::TempDir dir("stats");
  mock_dataset(dir.path(), {"a"}, {4});
  DatasetManifest m = load_manifest(dir.str());
  NormStats st = compute_norm_stats(m, 2);
  CHECK(st.image_size == 2);
  CHECK(st.mean[1] == doctest::Approx(0.1).epsilon(1e-2));
}

TEST_CASE("synthetic generator") {
  testutil::TempDir dir("synth");
  SynthConfig cfg;
  cfg.per_class = {3, 3, 2};
  cfg.seed = 4;
  generate_synthetic(cfg, dir.str("a"));
  generate_synthetic(cfg, dir.str("b"));
  DatasetManifest a = load_manifest(dir.str("a")), b = load_manifest(dir.str("b"));
  CHECK(a.classes == synth_class_names(3));
  CHECK(a.class_counts(Split::train) == std::vector<std::size_t>{3, 3, 2});
  for (std::size_t i = 0; i < a.samples.size(); ++i)
    CHECK(max_pixel_diff(read_image(a.samples[i].path), read_image(b.samples[i].path)) == 0.0);
  Rng rng(1);
  for (std::size_t c = 0; c < kSynthClassCount; ++c) {
    Image img = synth_image(c, 32, 0.0, rng);
    double lo = 1.0, hi = 0.0;
    for (double v : img.data) lo = std::min(lo, v), hi = std::max(hi, v);
    CHECK(hi - lo > 0.3);
  }
  CHECK_THROWS_AS(synth_class_names(9), ConfigError);
}
