// SPDX-License-Identifier: Apache-2.0
//
// Deterministic prompt generation: anatomy-informed queries rendered from
// per-class synonym and symptom tables, and anatomy-agnostic queries keyed
// by a spatial category read off the masks.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flans/tensor.hpp"

namespace flans {

enum class SpatialCategory { Largest, Smallest, LeftMost, RightMost, Upmost, Bottom };

inline constexpr std::array<SpatialCategory, 6> kAllCategories = {
    SpatialCategory::Largest,  SpatialCategory::Smallest, SpatialCategory::LeftMost,
    SpatialCategory::RightMost, SpatialCategory::Upmost,  SpatialCategory::Bottom};

const char* to_string(SpatialCategory c) noexcept;
SpatialCategory parse_category(const std::string& s);

enum class PromptKind { AnatomyInformed, AnatomyAgnostic };
enum class PromptSource { Template, ExternalProvider };

const char* to_string(PromptKind k) noexcept;
const char* to_string(PromptSource s) noexcept;

struct Prompt {
  std::string text;
  PromptKind kind = PromptKind::AnatomyInformed;
  std::optional<int> target_class;
  std::optional<SpatialCategory> spatial_category;
  PromptSource source = PromptSource::Template;
  std::string sample_id;
  std::uint64_t seed = 0;

  // Informed prompts carry a class and no category; agnostic ones carry a
  // category. Throws InvalidArgument.
  void validate() const;
};

// Winner per category over the non-empty masks (origin top-left, y down).
// Size is pixel count; position uses bounding-box edges. Ties go to the
// lower class id. Throws EmptyMaskSet, ShapeMismatch.
std::map<SpatialCategory, int> extract_spatial_categories(const std::vector<Mask>& masks);

struct OrganTerms {
  std::string name;
  std::vector<std::string> synonyms;  // includes the name itself
  std::vector<std::string> symptoms;
};

// The 24-organ vocabulary used as the default informed bank.
const std::vector<OrganTerms>& default_organ_table();

class TemplateBank {
 public:
  // Classes are looked up by name in the default organ table.
  static TemplateBank for_classes(const std::vector<std::string>& class_names);
  static TemplateBank default_bank();

  TemplateBank(std::vector<OrganTerms> classes, std::vector<std::string> informed_templates,
               std::map<SpatialCategory, std::vector<std::string>> agnostic_templates,
               std::map<SpatialCategory, std::vector<std::string>> category_terms,
               std::vector<std::string> modalities);

  std::size_t class_count() const noexcept { return classes_.size(); }
  const OrganTerms& organ(int class_id) const;
  const std::vector<OrganTerms>& organs() const noexcept { return classes_; }
  const std::vector<std::string>& informed_templates() const noexcept { return informed_; }
  const std::vector<std::string>& agnostic_templates(SpatialCategory c) const { return agnostic_.at(c); }
  const std::vector<std::string>& category_terms(SpatialCategory c) const { return terms_.at(c); }

  // Every word the bank can emit, for vocabulary construction.
  std::vector<std::string> corpus() const;

 private:
  std::vector<OrganTerms> classes_;
  std::vector<std::string> informed_;
  std::map<SpatialCategory, std::vector<std::string>> agnostic_;
  std::map<SpatialCategory, std::vector<std::string>> terms_;
  std::vector<std::string> modalities_;

  friend Prompt generate_informed(int, const TemplateBank&, std::uint64_t);
  friend Prompt generate_agnostic(SpatialCategory, const TemplateBank&, std::uint64_t);
};

// Throws UnknownClass.
Prompt generate_informed(int class_id, const TemplateBank& bank, std::uint64_t seed);
Prompt generate_agnostic(SpatialCategory category, const TemplateBank& bank, std::uint64_t seed);

// Lowercased alphanumeric runs; everything else separates.
std::vector<std::string> split_words(const std::string& text);

// Whole-word, case-insensitive phrase search.
bool contains_phrase(const std::string& text, const std::string& phrase);
// True when text mentions any synonym of any organ in the table.
bool mentions_organ(const std::string& text, const std::vector<OrganTerms>& organs);

struct EndpointConfig {
  std::string url;    // http(s)://host[:port]/path
  std::string token;  // bearer token, may be empty
  int timeout_seconds = 10;

  // Reads FLANS_PARAPHRASE_URL and FLANS_PARAPHRASE_TOKEN.
  static EndpointConfig from_env();
};

struct ParaphraseResult {
  Prompt prompt;
  std::optional<std::string> warning;
};

// POST {"text": ...} -> {"text": ...}. Any failure returns the input prompt
// unchanged together with a warning.
ParaphraseResult paraphrase_external(const Prompt& prompt, const EndpointConfig& endpoint);

std::string prompt_to_json(const Prompt& p);
Prompt prompt_from_json(const std::string& line);
void write_prompts_jsonl(const std::filesystem::path& path, const std::vector<Prompt>& prompts);
std::vector<Prompt> read_prompts_jsonl(const std::filesystem::path& path);

}  // namespace flans
