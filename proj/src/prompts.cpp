// SPDX-License-Identifier: Apache-2.0
#include "flans/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <random>
#include <set>

#include "flans/fts.hpp"

namespace flans {

namespace {

using json = nlohmann::json;

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

template <typename V>
const V& pick(const std::vector<V>& v, std::mt19937_64& rng) {
  return v[static_cast<std::size_t>(rng() % v.size())];
}

std::mt19937_64 prompt_rng(std::uint64_t seed, std::uint64_t salt) {
  return std::mt19937_64(seed ^ (0x9E3779B97F4A7C15ull * (salt + 1)));
}

const std::vector<std::string>& informed_patterns() {
  static const std::vector<std::string> v = {
      "segment the {organ} in this {modality}",
      "please outline the {organ}",
      "highlight the {organ} on the {modality}",
      "where is the {organ} in this image",
      "mark the {organ}, the patient reports {symptom}",
      "patient with {symptom}, show me the {organ}",
      "delineate the {organ} on this {modality}",
      "find the {organ} for follow up of {symptom}",
      "can you segment the {organ} please",
      "label every pixel that belongs to the {organ}",
      "extract the {organ} from the {modality}",
      "I need a mask of the {organ} because of {symptom}",
  };
  return v;
}

const std::vector<std::string>& agnostic_patterns() {
  static const std::vector<std::string> v = {
      "segment the {target} in this scan",
      "show me the {target}",
      "outline the {target} in the image",
      "please mark the {target}",
      "which one is the {target}? segment it",
      "highlight the {target} on this slice",
      "give me a mask of the {target}",
      "delineate the {target}",
      "find the {target} and segment it",
      "I want the {target} segmented",
  };
  return v;
}

std::map<SpatialCategory, std::vector<std::string>> default_category_terms() {
  return {
      {SpatialCategory::Largest, {"largest region", "biggest region", "biggest structure", "most extensive area"}},
      {SpatialCategory::Smallest, {"smallest region", "tiniest structure", "smallest object", "least extensive area"}},
      {SpatialCategory::LeftMost,
       {"left-most region", "leftmost structure", "region furthest to the left", "object closest to the left edge"}},
      {SpatialCategory::RightMost,
       {"right-most region", "rightmost structure", "region furthest to the right", "object closest to the right edge"}},
      {SpatialCategory::Upmost, {"upmost region", "topmost structure", "highest object", "region nearest the top"}},
      {SpatialCategory::Bottom,
       {"bottom region", "lowest structure", "bottom-most object", "region nearest the bottom"}},
  };
}

}  // namespace

const char* to_string(SpatialCategory c) noexcept {
  switch (c) {
    case SpatialCategory::Largest: return "largest";
    case SpatialCategory::Smallest: return "smallest";
    case SpatialCategory::LeftMost: return "left_most";
    case SpatialCategory::RightMost: return "right_most";
    case SpatialCategory::Upmost: return "upmost";
    case SpatialCategory::Bottom: return "bottom";
  }
  return "?";
}

SpatialCategory parse_category(const std::string& s) {
  for (auto c : kAllCategories)
    if (s == to_string(c)) return c;
  throw Error(ErrorCode::InvalidArgument, "unknown spatial category '" + s + "'");
}

const char* to_string(PromptKind k) noexcept {
  return k == PromptKind::AnatomyInformed ? "anatomy_informed" : "anatomy_agnostic";
}

const char* to_string(PromptSource s) noexcept {
  return s == PromptSource::Template ? "template" : "external_provider";
}

void Prompt::validate() const {
  if (kind == PromptKind::AnatomyInformed && (!target_class || spatial_category)) {
    throw Error(ErrorCode::InvalidArgument, "informed prompts need a target class and no category");
  }
  if (kind == PromptKind::AnatomyAgnostic && !spatial_category) {
    throw Error(ErrorCode::InvalidArgument, "agnostic prompts need a spatial category");
  }
}

std::map<SpatialCategory, int> extract_spatial_categories(const std::vector<Mask>& masks) {
  if (masks.empty()) throw Error(ErrorCode::EmptyMaskSet, "no masks given");
  const Shape& shape = masks.front().shape();
  if (shape.size() < 2) throw Error(ErrorCode::ShapeMismatch, "masks need two spatial dims");
  const std::size_t w = shape.back();
  struct Stats {
    std::size_t count = 0, left = 0, right = 0, top = 0, bottom = 0;
  };
  std::vector<std::pair<int, Stats>> found;
  for (std::size_t c = 0; c < masks.size(); ++c) {
    if (masks[c].shape() != shape) {
      throw Error(ErrorCode::ShapeMismatch, "mask " + std::to_string(c) + " has shape " +
                                                to_string(masks[c].shape()) + ", expected " + to_string(shape));
    }
    Stats s;
    s.left = s.top = std::numeric_limits<std::size_t>::max();
    const auto& v = masks[c].values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i]) continue;
      const std::size_t row = (i / w) % shape[shape.size() - 2], col = i % w;
      ++s.count;
      s.left = std::min(s.left, col);
      s.right = std::max(s.right, col);
      s.top = std::min(s.top, row);
      s.bottom = std::max(s.bottom, row);
    }
    if (s.count) found.emplace_back(static_cast<int>(c), s);
  }
  if (found.empty()) throw Error(ErrorCode::EmptyMaskSet, "every mask is empty");
  std::map<SpatialCategory, int> out;
  auto best = [&](SpatialCategory cat, auto better) {
    std::size_t k = 0;
    for (std::size_t i = 1; i < found.size(); ++i)
      if (better(found[i].second, found[k].second)) k = i;
    out[cat] = found[k].first;
  };
  best(SpatialCategory::Largest, [](const Stats& a, const Stats& b) { return a.count > b.count; });
  best(SpatialCategory::Smallest, [](const Stats& a, const Stats& b) { return a.count < b.count; });
  best(SpatialCategory::LeftMost, [](const Stats& a, const Stats& b) { return a.left < b.left; });
  best(SpatialCategory::RightMost, [](const Stats& a, const Stats& b) { return a.right > b.right; });
  best(SpatialCategory::Upmost, [](const Stats& a, const Stats& b) { return a.top < b.top; });
  best(SpatialCategory::Bottom, [](const Stats& a, const Stats& b) { return a.bottom > b.bottom; });
  return out;
}

const std::vector<OrganTerms>& default_organ_table() {
  static const std::vector<OrganTerms> table = {
      {"liver", {"liver", "hepatic region", "hepatic parenchyma", "cirrhosis-related region"},
       {"cirrhosis", "jaundice", "elevated liver enzymes"}},
      {"kidney", {"kidney", "renal parenchyma", "renal organ"}, {"flank pain", "hematuria", "elevated creatinine"}},
      {"spleen", {"spleen", "splenic region", "splenic parenchyma"},
       {"splenomegaly", "left upper quadrant pain", "anemia"}},
      {"pancreas", {"pancreas", "pancreatic gland", "pancreatic parenchyma"},
       {"pancreatitis", "epigastric pain", "elevated lipase"}},
      {"colon", {"colon", "large bowel", "colonic segment"}, {"constipation", "rectal bleeding", "colitis"}},
      {"intestine", {"intestine", "small bowel", "intestinal loops"}, {"obstruction", "cramping", "malabsorption"}},
      {"stomach", {"stomach", "gastric region", "gastric wall"}, {"dyspepsia", "gastritis", "nausea"}},
      {"right kidney", {"right kidney", "right renal region", "right renal parenchyma"},
       {"flank pain", "hematuria", "elevated creatinine"}},
      {"left kidney", {"left kidney", "left renal region", "left renal parenchyma"},
       {"flank pain", "hematuria", "elevated creatinine"}},
      {"aorta", {"aorta", "aortic lumen", "abdominal aorta"}, {"aneurysm", "pulsatile mass", "back pain"}},
      {"esophagus", {"esophagus", "oesophagus", "esophageal tube"}, {"dysphagia", "reflux", "heartburn"}},
      {"inferior vena cava", {"inferior vena cava", "IVC", "caval vein"}, {"leg swelling", "thrombosis", "edema"}},
      {"duodenum", {"duodenum", "duodenal bulb", "duodenal loop"}, {"ulcer", "postprandial pain", "melena"}},
      {"right adrenal gland", {"right adrenal gland", "right suprarenal gland", "right adrenal"},
       {"hypertension", "cortisol excess", "incidentaloma"}},
      {"left adrenal gland", {"left adrenal gland", "left suprarenal gland", "left adrenal"},
       {"hypertension", "cortisol excess", "incidentaloma"}},
      {"left head of femur", {"left head of femur", "left femoral head", "left hip ball"},
       {"hip pain", "avascular necrosis", "limping"}},
      {"right head of femur", {"right head of femur", "right femoral head", "right hip ball"},
       {"hip pain", "avascular necrosis", "limping"}},
      {"bladder", {"bladder", "urinary bladder", "vesical region"}, {"dysuria", "urinary retention", "frequency"}},
      {"rectum", {"rectum", "rectal ampulla", "rectal segment"}, {"tenesmus", "rectal bleeding", "proctitis"}},
      {"gallbladder", {"gallbladder", "biliary sac", "cholecystic region"},
       {"biliary colic", "cholecystitis", "gallstones"}},
      {"portal vein and splenic vein", {"portal vein and splenic vein", "portal venous system", "splenoportal axis"},
       {"portal hypertension", "varices", "ascites"}},
      {"prostate", {"prostate", "prostatic gland", "prostate gland"}, {"urinary hesitancy", "raised PSA", "nocturia"}},
      {"seminal vesicles", {"seminal vesicles", "vesicular glands", "seminal glands"},
       {"hematospermia", "pelvic pain", "infertility"}},
      {"lung", {"lung", "pulmonary region", "lung base"}, {"cough", "dyspnea", "pleural effusion"}},
  };
  return table;
}

TemplateBank::TemplateBank(std::vector<OrganTerms> classes, std::vector<std::string> informed_templates,
                           std::map<SpatialCategory, std::vector<std::string>> agnostic_templates,
                           std::map<SpatialCategory, std::vector<std::string>> category_terms,
                           std::vector<std::string> modalities)
    : classes_(std::move(classes)),
      informed_(std::move(informed_templates)),
      agnostic_(std::move(agnostic_templates)),
      terms_(std::move(category_terms)),
      modalities_(std::move(modalities)) {
  if (classes_.empty() || informed_.empty() || modalities_.empty()) {
    throw Error(ErrorCode::InvalidArgument, "template bank needs classes, templates and modalities");
  }
  for (const auto& t : informed_) {
    if (t.find("{organ}") == std::string::npos) {
      throw Error(ErrorCode::InvalidArgument, "informed template without {organ}: " + t);
    }
  }
  for (const auto& o : classes_) {
    if (o.synonyms.empty() || o.symptoms.empty()) {
      throw Error(ErrorCode::InvalidArgument, "organ " + o.name + " needs synonyms and symptoms");
    }
  }
  for (auto c : kAllCategories) {
    if (agnostic_[c].empty() || terms_[c].empty()) {
      throw Error(ErrorCode::InvalidArgument, std::string("no templates for category ") + to_string(c));
    }
  }
}

TemplateBank TemplateBank::for_classes(const std::vector<std::string>& class_names) {
  std::vector<OrganTerms> chosen;
  for (const auto& name : class_names) {
    const auto& table = default_organ_table();
    auto it = std::find_if(table.begin(), table.end(), [&](const OrganTerms& o) { return o.name == name; });
    if (it == table.end()) throw Error(ErrorCode::UnknownClass, "no vocabulary for class '" + name + "'");
    chosen.push_back(*it);
  }
  std::map<SpatialCategory, std::vector<std::string>> agnostic;
  for (auto c : kAllCategories) agnostic[c] = agnostic_patterns();
  return TemplateBank(std::move(chosen), informed_patterns(), std::move(agnostic), default_category_terms(),
                      {"scan", "CT scan", "abdominal CT", "slice", "image"});
}

TemplateBank TemplateBank::default_bank() {
  std::vector<std::string> names;
  for (const auto& o : default_organ_table()) names.push_back(o.name);
  return for_classes(names);
}

const OrganTerms& TemplateBank::organ(int class_id) const {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= classes_.size()) {
    throw Error(ErrorCode::UnknownClass, "class " + std::to_string(class_id) + " not in bank");
  }
  return classes_[static_cast<std::size_t>(class_id)];
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> TemplateBank::corpus() const {
  std::set<std::string> all;
  auto add = [&](const std::string& s) {
    for (auto& w : split_words(s)) all.insert(w);
  };
  for (const auto& t : informed_) add(t);
  for (const auto& m : modalities_) add(m);
  for (const auto& o : classes_) {
    for (const auto& s : o.synonyms) add(s);
    for (const auto& s : o.symptoms) add(s);
  }
  for (const auto& [c, ts] : agnostic_)
    for (const auto& t : ts) add(t);
  for (const auto& [c, ts] : terms_)
    for (const auto& t : ts) add(t);
  // Slot markers are not words.
  all.erase("organ");
  all.erase("symptom");
  all.erase("modality");
  all.erase("target");
  return {all.begin(), all.end()};
}

Prompt generate_informed(int class_id, const TemplateBank& bank, std::uint64_t seed) {
  const OrganTerms& organ = bank.organ(class_id);
  auto rng = prompt_rng(seed, static_cast<std::uint64_t>(class_id));
  std::string text = pick(bank.informed_, rng);
  text = replace_all(text, "{organ}", pick(organ.synonyms, rng));
  text = replace_all(text, "{symptom}", pick(organ.symptoms, rng));
  text = replace_all(text, "{modality}", pick(bank.modalities_, rng));
  Prompt p;
  p.text = std::move(text);
  p.kind = PromptKind::AnatomyInformed;
  p.target_class = class_id;
  p.seed = seed;
  return p;
}

Prompt generate_agnostic(SpatialCategory category, const TemplateBank& bank, std::uint64_t seed) {
  auto rng = prompt_rng(seed, 1000 + static_cast<std::uint64_t>(category));
  std::string text = pick(bank.agnostic_.at(category), rng);
  text = replace_all(text, "{target}", pick(bank.terms_.at(category), rng));
  Prompt p;
  p.text = std::move(text);
  p.kind = PromptKind::AnatomyAgnostic;
  p.spatial_category = category;
  p.seed = seed;
  return p;
}

bool contains_phrase(const std::string& text, const std::string& phrase) {
  const auto t = split_words(text), p = split_words(phrase);
  if (p.empty() || p.size() > t.size()) return false;
  for (std::size_t i = 0; i + p.size() <= t.size(); ++i) {
    if (std::equal(p.begin(), p.end(), t.begin() + static_cast<std::ptrdiff_t>(i))) return true;
  }
  return false;
}

bool mentions_organ(const std::string& text, const std::vector<OrganTerms>& organs) {
  for (const auto& o : organs)
    for (const auto& s : o.synonyms)
      if (contains_phrase(text, s)) return true;
  return false;
}

std::string prompt_to_json(const Prompt& p) {
  json j;
  j["text"] = p.text;
  j["kind"] = to_string(p.kind);
  j["target_class"] = p.target_class ? json(*p.target_class) : json(nullptr);
  j["spatial_category"] = p.spatial_category ? json(to_string(*p.spatial_category)) : json(nullptr);
  j["sample_id"] = p.sample_id.empty() ? json(nullptr) : json(p.sample_id);
  j["seed"] = p.seed;
  j["source"] = to_string(p.source);
  return j.dump();
}

Prompt prompt_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    Prompt p;
    p.text = j.at("text").get<std::string>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "anatomy_informed") {
      p.kind = PromptKind::AnatomyInformed;
    } else if (kind == "anatomy_agnostic") {
      p.kind = PromptKind::AnatomyAgnostic;
    } else {
      throw Error(ErrorCode::InvalidArgument, "unknown prompt kind '" + kind + "'");
    }
    if (!j.at("target_class").is_null()) p.target_class = j["target_class"].get<int>();
    if (!j.at("spatial_category").is_null()) p.spatial_category = parse_category(j["spatial_category"].get<std::string>());
    if (j.contains("sample_id") && !j["sample_id"].is_null()) p.sample_id = j["sample_id"].get<std::string>();
    p.seed = j.value("seed", std::uint64_t{0});
    if (j.value("source", std::string("template")) == "external_provider") p.source = PromptSource::ExternalProvider;
    p.validate();
    return p;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoError, std::string("malformed prompt line: ") + e.what());
  }
}

void write_prompts_jsonl(const std::filesystem::path& path, const std::vector<Prompt>& prompts) {
  std::string out;
  for (const auto& p : prompts) {
    out += prompt_to_json(p);
    out.push_back('\n');
  }
  write_file(path, out);
}

std::vector<Prompt> read_prompts_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<Prompt> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(prompt_from_json(line));
  }
  return out;
}

}  // namespace flans
