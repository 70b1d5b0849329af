#pragma once

// Registry of every model, loss, transform and check the toolbox knows,
// with the anchor string each report carries.

#include <string>
#include <string_view>
#include <vector>

namespace equichk {

struct CatalogEntry {
  std::string_view category;  // model | loss | transform | check
  std::string_view name;
  std::string_view paper_anchor;
  std::string_view summary;
};

const std::vector<CatalogEntry>& catalog_entries();

/// Checks that exercise a catalog transform; empty for unknown names.
std::vector<std::string> related_checks(std::string_view transform);

/// Anchor for a check/model/transform name; empty when unknown.
std::string paper_anchor(std::string_view name);

}  // namespace equichk
