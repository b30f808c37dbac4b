// SPDX-License-Identifier: Apache-2.0
#include "flans/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>

#include "flans/fts.hpp"

namespace flans {

namespace {

using json = nlohmann::json;

constexpr double kBase = 64.0;

struct Landmark {
  double cx, cy, rx, ry, intensity;
};

// Unlabelled anatomy drawn under the organs.
const Landmark kBody{31.5, 31.5, 29.0, 27.0, 0.15};
const Landmark kSpine{31.5, 52.0, 4.0, 4.0, 0.95};
const Landmark kAorta{35.5, 43.0, 2.5, 2.5, 0.70};

std::string dir_name(const std::string& class_name) {
  std::string s = class_name;
  std::replace(s.begin(), s.end(), ' ', '_');
  return s;
}

struct Placed {
  ShapeFamily family;
  double cx, cy, rx, ry;
};

bool inside(const Placed& p, double x, double y) {
  const double dx = x - p.cx, dy = y - p.cy;
  switch (p.family) {
    case ShapeFamily::Ellipse:
      return (dx * dx) / (p.rx * p.rx) + (dy * dy) / (p.ry * p.ry) <= 1.0;
    case ShapeFamily::RoundedRect: {
      const double r = std::min({4.0, p.rx, p.ry});
      const double ex = std::max(std::abs(dx) - (p.rx - r), 0.0);
      const double ey = std::max(std::abs(dy) - (p.ry - r), 0.0);
      return std::abs(dx) <= p.rx && std::abs(dy) <= p.ry && ex * ex + ey * ey <= r * r;
    }
    case ShapeFamily::Crescent: {
      // Disk with a bite taken out towards the midline.
      const double r = p.rx;
      const double bx = dx + 0.6 * r;
      return dx * dx + dy * dy <= r * r && bx * bx + dy * dy > r * r;
    }
  }
  return false;
}

bool in_disk(const Landmark& l, double x, double y) {
  const double dx = (x - l.cx) / l.rx, dy = (y - l.cy) / l.ry;
  return dx * dx + dy * dy <= 1.0;
}

json transform_json(const std::optional<GroupElement>& g) {
  if (!g) return nullptr;
  return json{{"index", g->index()}, {"rotation", g->rotation}, {"reflected", g->reflected}, {"order", g->order}};
}

std::optional<GroupElement> transform_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return GroupElement::from_index(j.at("index").get<std::size_t>(), j.at("order").get<int>());
}

std::vector<int> present_classes(const std::vector<Mask>& masks) {
  std::vector<int> out;
  for (std::size_t c = 0; c < masks.size(); ++c) {
    const auto& v = masks[c].values();
    if (std::any_of(v.begin(), v.end(), [](std::uint8_t x) { return x != 0; })) out.push_back(static_cast<int>(c));
  }
  return out;
}

}  // namespace

std::vector<PhantomClass> default_phantom_classes() {
  return {
      {"liver", ShapeFamily::RoundedRect, 17.0, 19.0, 10.0, 12.0, 7.0, 9.0, 0.55, 0.65},
      {"spleen", ShapeFamily::Crescent, 50.0, 22.0, 6.0, 7.0, 6.0, 7.0, 0.42, 0.52},
      {"right kidney", ShapeFamily::Ellipse, 17.0, 46.0, 5.0, 6.0, 7.0, 8.0, 0.78, 0.86},
      {"left kidney", ShapeFamily::Ellipse, 46.0, 41.0, 5.0, 6.0, 7.0, 8.0, 0.78, 0.86},
  };
}

std::vector<PhantomClass> PhantomSpec::classes() const {
  auto all = default_phantom_classes();
  all.resize(class_count);
  return all;
}

void PhantomSpec::validate() const {
  if (class_count < 1 || class_count > default_phantom_classes().size()) {
    throw Error(ErrorCode::InvalidArgument, "phantoms support 1 to 4 classes");
  }
  if (image_size < 32) throw Error(ErrorCode::InvalidArgument, "phantom images need at least 32 pixels a side");
  if (noise_sigma < 0.0 || presence_probability < 0.0 || presence_probability > 1.0 || jitter < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "invalid phantom noise, presence or jitter");
  }
}

Sample generate_phantom(const PhantomSpec& spec, std::mt19937_64& rng, std::string id) {
  spec.validate();
  const auto classes = spec.classes();
  const std::size_t n = spec.image_size;
  const double scale = kBase / static_cast<double>(n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  std::vector<bool> present(classes.size());
  std::vector<Placed> placed(classes.size());
  std::vector<double> intensity(classes.size());
  bool any = false;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto& k = classes[c];
    present[c] = unit(rng) < spec.presence_probability;
    any = any || present[c];
    const double rx = uniform(k.rx_min, k.rx_max);
    const double ry = k.family == ShapeFamily::Crescent ? rx : uniform(k.ry_min, k.ry_max);
    placed[c] = Placed{k.family, k.cx + uniform(-spec.jitter, spec.jitter), k.cy + uniform(-spec.jitter, spec.jitter),
                       rx, ry};
    intensity[c] = uniform(k.intensity_min, k.intensity_max);
  }
  if (!any) {
    std::uniform_int_distribution<std::size_t> pick(0, classes.size() - 1);
    present[pick(rng)] = true;
  }

  Sample s;
  s.id = std::move(id);
  s.image = Tensor<float>(Shape{n, n});
  s.masks.assign(classes.size(), Mask(Shape{n, n}));
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double x = (static_cast<double>(j) + 0.5) * scale - 0.5;
      const double y = (static_cast<double>(i) + 0.5) * scale - 0.5;
      double v = 0.0;
      if (in_disk(kBody, x, y)) v = kBody.intensity;
      if (in_disk(kSpine, x, y)) v = kSpine.intensity;
      if (in_disk(kAorta, x, y)) v = kAorta.intensity;
      for (std::size_t c = 0; c < classes.size(); ++c) {
        if (present[c] && inside(placed[c], x, y)) {
          v = intensity[c];
          s.masks[c].at(i, j) = 1;
          break;  // placement regions never overlap; first claim wins regardless
        }
      }
      if (spec.noise_sigma > 0.0) v += noise(rng);
      s.image.at(i, j) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  s.present = present_classes(s.masks);
  return s;
}

std::string Manifest::to_json() const {
  json j;
  j["name"] = name;
  j["class_names"] = class_names;
  j["image_size"] = image_size;
  j["canonical"] = canonical;
  j["group_order"] = group_order;
  j["samples"] = json::array();
  for (const auto& s : samples) {
    j["samples"].push_back(json{{"id", s.id},
                                {"image", s.image},
                                {"masks", s.masks},
                                {"present", s.present},
                                {"transform", transform_json(s.transform)}});
  }
  return j.dump(1);
}

Manifest Manifest::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    Manifest m;
    m.name = j.at("name").get<std::string>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.image_size = j.at("image_size").get<std::size_t>();
    m.canonical = j.at("canonical").get<bool>();
    m.group_order = j.value("group_order", 4);
    for (const auto& e : j.at("samples")) {
      SampleEntry s;
      s.id = e.at("id").get<std::string>();
      s.image = e.at("image").get<std::string>();
      s.masks = e.at("masks").get<std::vector<std::string>>();
      s.present = e.at("present").get<std::vector<int>>();
      s.transform = transform_from(e.value("transform", json(nullptr)));
      m.samples.push_back(std::move(s));
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, std::string("malformed manifest: ") + e.what());
  }
}

Dataset generate_samples(const PhantomSpec& spec, std::size_t n, const std::string& name) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  Dataset d;
  d.manifest.name = name;
  for (const auto& c : spec.classes()) d.manifest.class_names.push_back(c.name);
  d.manifest.image_size = spec.image_size;
  d.manifest.canonical = true;
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "_%04zu", i);
    d.samples.push_back(generate_phantom(spec, rng, name + buf));
  }
  return d;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  Manifest m = dataset.manifest;
  m.samples.clear();
  for (const auto& s : dataset.samples) {
    SampleEntry e;
    e.id = s.id;
    e.image = "images/" + s.id + ".fts";
    write_fts(dir / e.image, s.image);
    for (std::size_t c = 0; c < s.masks.size(); ++c) {
      e.masks.push_back("masks/" + dir_name(m.class_names.at(c)) + "/" + s.id + ".fts");
      write_fts(dir / e.masks.back(), s.masks[c]);
    }
    e.present = s.present;
    e.transform = s.transform;
    m.samples.push_back(std::move(e));
  }
  write_file(dir / "manifest.json", m.to_json());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.manifest = Manifest::from_json(read_file(dir / "manifest.json"));
  const auto& m = d.manifest;
  const std::size_t n = m.image_size;
  for (const auto& e : m.samples) {
    auto fail = [&](const std::string& why) { throw Error(ErrorCode::IoError, "sample " + e.id + ": " + why); };
    Sample s;
    s.id = e.id;
    s.transform = e.transform;
    try {
      s.image = read_fts<float>(dir / e.image);
      if (e.masks.size() != m.class_names.size()) fail("mask count differs from class count");
      for (const auto& p : e.masks) s.masks.push_back(read_fts<std::uint8_t>(dir / p));
    } catch (const Error& err) {
      if (err.code() == ErrorCode::IoError) throw;
      fail(err.what());
    }
    if (s.image.shape() != Shape{n, n}) fail("image shape " + to_string(s.image.shape()));
    for (const auto& mask : s.masks) {
      if (mask.shape() != Shape{n, n}) fail("mask shape " + to_string(mask.shape()));
      for (auto v : mask.values())
        if (v > 1) fail("mask values must be 0 or 1");
    }
    for (float v : s.image.values())
      if (v < 0.0f || v > 1.0f) fail("image values outside [0, 1]");
    for (int c : e.present)
      if (c < 0 || static_cast<std::size_t>(c) >= m.class_names.size()) fail("class index out of range");
    s.present = present_classes(s.masks);
    if (s.present != e.present) fail("present classes disagree with masks");
    d.samples.push_back(std::move(s));
  }
  return d;
}

Manifest generate_dataset(const PhantomSpec& spec, std::size_t n, const std::filesystem::path& out_dir,
                          const std::string& name) {
  Dataset d = generate_samples(spec, n, name);
  write_dataset(d, out_dir);
  return load_dataset(out_dir).manifest;
}

Dataset transform_dataset(const Dataset& source, const std::vector<GroupElement>& group, std::uint64_t seed) {
  if (group.empty()) throw Error(ErrorCode::InvalidArgument, "transform group is empty");
  const int order = group.front().order;
  const GroupAction action(order);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, group.size() - 1);
  Dataset out;
  out.manifest = source.manifest;
  out.manifest.canonical = false;
  out.manifest.group_order = order;
  for (const auto& s : source.samples) {
    const GroupElement g = group[pick(rng)];
    Sample t;
    t.id = s.id;
    t.image = action.act(g, s.image);
    for (const auto& m : s.masks) t.masks.push_back(action.act_mask(g, m));
    t.present = present_classes(t.masks);
    t.transform = s.transform ? compose(g, *s.transform) : g;
    out.samples.push_back(std::move(t));
  }
  return out;
}

Manifest apply_dataset_transforms(const std::filesystem::path& source_dir, const std::vector<GroupElement>& group,
                                  std::uint64_t seed, const std::filesystem::path& out_dir) {
  Dataset t = transform_dataset(load_dataset(source_dir), group, seed);
  write_dataset(t, out_dir);
  return load_dataset(out_dir).manifest;
}

}  // namespace flans
