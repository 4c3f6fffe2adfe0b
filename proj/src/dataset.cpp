#include "ssmcyto/dataset.hpp"

#include <omp.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ssmcyto/error.hpp"

namespace fs = std::filesystem;

namespace ssmcyto {

namespace {

constexpr const char* kSplitNames[kSplitCount] = {"train", "holdout", "val", "test"};

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// One RFC 4180 record; returns false at end of input.
bool read_csv_record(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string field;
  bool quoted = false, any = false;
  char c;
  while (in.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (!any) return false;
  fields.push_back(std::move(field));
  return true;
}

std::vector<std::size_t> class_indices(const DatasetManifest& m, int label, std::optional<Split> split) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const Sample& s = m.samples[i];
    if (s.label == label && (!split || s.split == *split)) idx.push_back(i);
  }
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return m.samples[a].path < m.samples[b].path; });
  return idx;
}

std::string class_name(const std::vector<std::string>& names, std::size_t c) {
  return c < names.size() ? "'" + names[c] + "'" : "#" + std::to_string(c);
}

}  // namespace

std::string to_string(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }

Split parse_split(const std::string& name) {
  for (std::size_t i = 0; i < kSplitCount; ++i)
    if (name == kSplitNames[i]) return static_cast<Split>(i);
  throw ConfigError("unknown split '" + name + "' (expected train, holdout, val or test)");
}

std::vector<std::array<std::size_t, kSplitCount>> DatasetManifest::counts() const {
  std::vector<std::array<std::size_t, kSplitCount>> out(classes.size(), std::array<std::size_t, kSplitCount>{});
  for (const Sample& s : samples) ++out.at(static_cast<std::size_t>(s.label))[static_cast<std::size_t>(s.split)];
  return out;
}

std::vector<std::size_t> DatasetManifest::class_counts(Split split) const {
  std::vector<std::size_t> out(classes.size(), 0);
  for (const Sample& s : samples)
    if (s.split == split) ++out.at(static_cast<std::size_t>(s.label));
  return out;
}

std::vector<Sample> DatasetManifest::select(Split split) const {
  std::vector<Sample> out;
  for (const Sample& s : samples)
    if (s.split == split) out.push_back(s);
  return out;
}

void DatasetManifest::validate() const {
  std::map<std::string, Split> seen;
  for (const Sample& s : samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes.size()) {
      throw ContractError("manifest: sample '" + s.path + "' has label " + std::to_string(s.label) + " outside [0, " +
                          std::to_string(classes.size()) + ")");
    }
    auto [it, inserted] = seen.emplace(s.path, s.split);
    if (!inserted && it->second != s.split) {
      throw ContractError("manifest: '" + s.path + "' appears in both " + to_string(it->second) + " and " +
                          to_string(s.split));
    }
  }
}

DatasetManifest load_manifest(const std::string& root, LoadReport* report) {
  LoadReport local;
  LoadReport& rep = report ? *report : local;
  if (!fs::is_directory(root)) throw IoError("dataset root '" + root + "' is not a directory");
  DatasetManifest m;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) rep.errors.push_back("dataset root '" + root + "' contains no class directories");
  for (const fs::path& dir : dirs) {
    const int label = static_cast<int>(m.classes.size());
    m.classes.push_back(dir.filename().string());
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    std::size_t kept = 0;
    for (const std::string& f : files) {
      try {
        read_image(f);
      } catch (const IoError& e) {
        rep.errors.push_back(e.what());
        continue;
      }
      m.samples.push_back({f, label, Split::train, "original"});
      ++kept;
    }
    if (kept == 0) rep.warnings.push_back("class directory '" + dir.string() + "' has no readable images");
  }
  std::sort(m.samples.begin(), m.samples.end(), [](const Sample& a, const Sample& b) { return a.path < b.path; });
  return m;
}

std::string stats_sidecar_path(const std::string& csv_path) {
  return (fs::path(csv_path).parent_path() / "stats.json").string();
}

void save_manifest(const DatasetManifest& m, const std::string& csv_path) {
  m.validate();
  const fs::path parent = fs::path(csv_path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest '" + csv_path + "'");
    out << "path,label,split,origin\n";
    for (const Sample& s : m.samples) {
      out << csv_field(s.path) << ',' << csv_field(m.classes[static_cast<std::size_t>(s.label)]) << ','
          << to_string(s.split) << ',' << csv_field(s.origin) << '\n';
    }
    if (!out) throw IoError("failed writing manifest '" + csv_path + "'");
  }
  nlohmann::json side = {{"classes", m.classes}};
  if (m.stats) {
    side["mean"] = m.stats->mean;
    side["std"] = m.stats->stddev;
    side["image_size"] = m.stats->image_size;
  }
  const std::string side_path = stats_sidecar_path(csv_path);
  std::ofstream out(side_path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + side_path + "'");
  out << side.dump(2) << '\n';
}

DatasetManifest load_manifest_csv(const std::string& csv_path) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest '" + csv_path + "'");
  DatasetManifest m;
  const std::string side_path = stats_sidecar_path(csv_path);
  bool have_classes = false;
  if (fs::exists(side_path)) {
    std::ifstream side_in(side_path, std::ios::binary);
    try {
      const nlohmann::json side = nlohmann::json::parse(side_in);
      m.classes = side.at("classes").get<std::vector<std::string>>();
      have_classes = true;
      if (side.contains("mean")) {
        NormStats st;
        st.mean = side.at("mean").get<std::array<double, 3>>();
        st.stddev = side.at("std").get<std::array<double, 3>>();
        st.image_size = side.at("image_size").get<std::size_t>();
        m.stats = st;
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed '" + side_path + "': " + e.what());
    }
  }
  std::vector<std::string> fields;
  if (!read_csv_record(in, fields) || fields != std::vector<std::string>{"path", "label", "split", "origin"}) {
    throw FormatError("manifest '" + csv_path + "' must start with the header path,label,split,origin");
  }
  std::vector<std::array<std::string, 3>> rows;
  std::size_t line = 1;
  while (read_csv_record(in, fields)) {
    ++line;
    if (fields.size() == 1 && fields[0].empty()) continue;
    if (fields.size() != 4) {
      throw FormatError("manifest '" + csv_path + "' line " + std::to_string(line) + ": expected 4 fields");
    }
    rows.push_back({fields[1], fields[2], fields[3]});
    m.samples.push_back({fields[0], 0, Split::train, fields[3]});
    try {
      m.samples.back().split = parse_split(fields[2]);
    } catch (const ConfigError& e) {
      throw FormatError("manifest '" + csv_path + "' line " + std::to_string(line) + ": " + e.what());
    }
  }
  if (!have_classes) {
    std::set<std::string> names;
    for (const auto& r : rows) names.insert(r[0]);
    m.classes.assign(names.begin(), names.end());
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto it = std::find(m.classes.begin(), m.classes.end(), rows[i][0]);
    if (it == m.classes.end()) {
      throw FormatError("manifest '" + csv_path + "': unknown class '" + rows[i][0] + "'");
    }
    m.samples[i].label = static_cast<int>(it - m.classes.begin());
  }
  try {
    m.validate();
  } catch (const ContractError& e) {
    throw FormatError("manifest '" + csv_path + "': " + e.what());
  }
  return m;
}

std::vector<std::size_t> allocate_counts(std::size_t n, const std::vector<double>& ratios) {
  if (ratios.empty()) throw ConfigError("split: at least one ratio is required");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw ConfigError("split: ratios must be positive");
    total += r;
  }
  std::vector<std::size_t> out(ratios.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double quota = static_cast<double>(n) * ratios[i] / total;
    out[i] = static_cast<std::size_t>(std::floor(quota));
    assigned += out[i];
    remainders.emplace_back(quota - std::floor(quota), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++out[remainders[k % remainders.size()].second];
  return out;
}

DatasetManifest stratified_split(const DatasetManifest& m, const std::vector<double>& ratios, std::uint64_t seed,
                                 std::vector<std::string>* warnings) {
  static const std::vector<std::vector<Split>> kLayouts = {
      {Split::train}, {Split::train, Split::test}, {Split::train, Split::val, Split::test}};
  if (ratios.empty() || ratios.size() > 3) throw ConfigError("split: expected 1 to 3 ratios");
  const auto& layout = kLayouts[ratios.size() - 1];
  DatasetManifest out = m;
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    std::vector<std::size_t> idx = class_indices(m, static_cast<int>(c), std::nullopt);
    if (idx.size() < layout.size()) {
      for (std::size_t i : idx) out.samples[i].split = Split::train;
      if (warnings && layout.size() > 1) {
        warnings->push_back("class '" + m.classes[c] + "' has " + std::to_string(idx.size()) +
                            " samples, fewer than the number of splits; all assigned to train");
      }
      continue;
    }
    Rng rng = derive_rng(seed, c);
    seeded_shuffle(idx.begin(), idx.end(), rng);
    const auto sizes = allocate_counts(idx.size(), ratios);
    std::size_t pos = 0;
    for (std::size_t s = 0; s < sizes.size(); ++s)
      for (std::size_t k = 0; k < sizes[s]; ++k) out.samples[idx[pos++]].split = layout[s];
  }
  return out;
}

DatasetManifest partition_holdout(const DatasetManifest& m, double fraction, std::uint64_t seed,
                                  std::vector<std::string>* warnings) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("holdout fraction must be in (0, 1)");
  DatasetManifest out = m;
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    std::vector<std::size_t> idx = class_indices(m, static_cast<int>(c), Split::train);
    if (idx.empty()) continue;
    Rng rng = derive_rng(seed, c, 1);
    seeded_shuffle(idx.begin(), idx.end(), rng);
    const auto sizes = allocate_counts(idx.size(), {1.0 - fraction, fraction});
    for (std::size_t k = sizes[0]; k < idx.size(); ++k) out.samples[idx[k]].split = Split::holdout;
    if (sizes[1] == 0 && warnings) warnings->push_back("class '" + m.classes[c] + "' has an empty holdout");
  }
  return out;
}

std::vector<std::size_t> plan_balance(const std::vector<std::size_t>& counts, const std::vector<std::size_t>& targets,
                                      const std::vector<std::string>& class_names) {
  if (counts.size() != targets.size()) throw ConfigError("balance: one target per class is required");
  std::vector<std::size_t> plan(counts.size(), 0);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (targets[c] <= counts[c]) continue;
    if (counts[c] == 0) {
      throw ConfigError("balance: class " + class_name(class_names, c) + " has no originals but a target of " +
                        std::to_string(targets[c]));
    }
    plan[c] = targets[c] - counts[c];
  }
  return plan;
}

std::vector<std::size_t> parse_targets(const std::string& spec, const std::vector<std::string>& classes,
                                       const std::vector<std::size_t>& counts) {
  auto parse_count = [&spec](const std::string& s) {
    std::size_t used = 0;
    long long v = -1;
    try {
      v = std::stoll(s, &used);
    } catch (const std::exception&) {
    }
    if (v < 0 || used != s.size()) throw ConfigError("balance: bad count '" + s + "' in targets '" + spec + "'");
    return static_cast<std::size_t>(v);
  };
  std::vector<std::size_t> targets = counts;
  if (spec.find('=') == std::string::npos) {
    const std::size_t floor_target = parse_count(spec);
    for (std::size_t& t : targets) t = std::max(t, floor_target);
    return targets;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("balance: expected name=count in '" + item + "'");
    const std::string name = item.substr(0, eq);
    auto it = std::find(classes.begin(), classes.end(), name);
    if (it == classes.end()) throw ConfigError("balance: unknown class '" + name + "' in targets");
    targets[static_cast<std::size_t>(it - classes.begin())] = parse_count(item.substr(eq + 1));
  }
  return targets;
}

DatasetManifest balance_dataset(const DatasetManifest& m, const std::vector<std::size_t>& targets,
                                const AugmentParams& params, std::uint64_t seed, const std::string& out_dir) {
  validate(params);
  const auto plan = plan_balance(m.class_counts(Split::train), targets, m.classes);
  struct Job {
    std::size_t cls, copy;
  };
  std::vector<Job> jobs;
  std::vector<std::vector<std::size_t>> sources(m.classes.size());
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    if (plan[c] == 0) continue;
    for (std::size_t i : class_indices(m, static_cast<int>(c), Split::train))
      if (m.samples[i].origin == "original") sources[c].push_back(i);
    if (sources[c].empty()) {
      throw ConfigError("balance: class '" + m.classes[c] + "' has no original train images to augment");
    }
    fs::create_directories(fs::path(out_dir) / m.classes[c]);
    for (std::size_t k = 0; k < plan[c]; ++k) jobs.push_back({c, k});
  }
  std::vector<Sample> made(jobs.size());
  std::vector<std::string> failures(jobs.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const Job& job = jobs[j];
    Rng rng = derive_rng(seed, job.cls, job.copy);
    const Sample& src = m.samples[sources[job.cls][uniform_index(rng, sources[job.cls].size())]];
    try {
      const Image aug = augment_image(read_image(src.path), params, rng);
      char suffix[32];
      std::snprintf(suffix, sizeof suffix, "__aug%05zu.png", job.copy);
      const fs::path dst = fs::path(out_dir) / m.classes[job.cls] / (fs::path(src.path).stem().string() + suffix);
      write_png(dst.string(), aug);
      made[j] = {dst.string(), static_cast<int>(job.cls), Split::train, src.path};
    } catch (const std::exception& e) {
      failures[j] = e.what();
    }
  }
  for (const std::string& f : failures)
    if (!f.empty()) throw IoError("balance: " + f);
  DatasetManifest out = m;
  out.samples.insert(out.samples.end(), made.begin(), made.end());
  return out;
}

std::vector<double> compute_class_weights(const std::vector<std::size_t>& counts,
                                          const std::vector<std::string>& class_names) {
  if (counts.empty()) throw ContractError("class weights: no classes");
  std::size_t total = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw ContractError("class weights: class " + class_name(class_names, c) + " has no samples");
    total += counts[c];
  }
  std::vector<double> w(counts.size());
  const double k = static_cast<double>(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    w[c] = static_cast<double>(total) / (k * static_cast<double>(counts[c]));
  }
  return w;
}

Image resize_bilinear(const Image& img, std::size_t width, std::size_t height) {
  if (img.width == 0 || img.height == 0 || width == 0 || height == 0) throw ShapeError("resize: empty image");
  if (img.width == width && img.height == height) return img;
  Image out(width, height);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = img.at(x0, y0, c) + wx * (img.at(x1, y0, c) - img.at(x0, y0, c));
        const double bot = img.at(x0, y1, c) + wx * (img.at(x1, y1, c) - img.at(x0, y1, c));
        out.at(x, y, c) = top + wy * (bot - top);
      }
    }
  }
  return out;
}

NormStats compute_norm_stats(const DatasetManifest& m, std::size_t image_size) {
  std::array<double, 3> sum{}, sq{};
  std::size_t pixels = 0;
  for (const Sample& s : m.samples) {
    if (s.split != Split::train) continue;
    const Image img = resize_bilinear(read_image(s.path), image_size, image_size);
    for (std::size_t i = 0; i < img.width * img.height; ++i)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = img.data[3 * i + c];
        sum[c] += v;
        sq[c] += v * v;
      }
    pixels += img.width * img.height;
  }
  if (pixels == 0) throw ContractError("normalization statistics need a non-empty train split");
  NormStats st;
  st.image_size = image_size;
  for (std::size_t c = 0; c < 3; ++c) {
    st.mean[c] = sum[c] / static_cast<double>(pixels);
    st.stddev[c] = std::sqrt(std::max(0.0, sq[c] / static_cast<double>(pixels) - st.mean[c] * st.mean[c]));
  }
  return st;
}

Tensor preprocess(const Image& img, std::size_t size, const NormStats& stats) {
  const Image r = resize_bilinear(img, size, size);
  std::vector<double> out(3 * size * size);
  for (std::size_t c = 0; c < 3; ++c) {
    const double inv = 1.0 / std::max(stats.stddev[c], 1e-12);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) out[(c * size + y) * size + x] = (r.at(x, y, c) - stats.mean[c]) * inv;
  }
  return Tensor::from({3, size, size}, std::move(out));
}

Tensor preprocess_batch(const std::vector<Image>& images, std::size_t size, const NormStats& stats) {
  const std::size_t per = 3 * size * size;
  std::vector<double> out(images.size() * per);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor t = preprocess(images[i], size, stats);
    std::copy(t.data().begin(), t.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor::from({images.size(), 3, size, size}, std::move(out));
}

}  // namespace ssmcyto
