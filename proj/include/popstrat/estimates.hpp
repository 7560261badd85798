#pragma once

#include <string>
#include <vector>

#include "popstrat/cells.hpp"
#include "popstrat/common.hpp"

namespace popstrat {

// One reported estimate: a (group, method) pair with a point estimate,
// standard error and a 95% interval.
struct EstimateSummary {
  std::string group;
  std::string method;
  double estimate = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

inline EstimateSummary wald_summary(std::string group, std::string method, double est, double se) {
  EstimateSummary s;
  s.group = std::move(group);
  s.method = std::move(method);
  s.estimate = est;
  s.se = se;
  s.ci_low = est - kZ975 * se;
  s.ci_high = est + kZ975 * se;
  return s;
}

// Reporting groups over cells: the overall population plus optional
// single-variable level subgroups.
struct Grouping {
  struct Group {
    std::string label;
    int var = -1;    // -1: all cells
    int level = -1;  // level index when var >= 0
  };

  std::vector<Group> groups;

  static Grouping overall() {
    Grouping g;
    g.groups.push_back({"overall", -1, -1});
    return g;
  }

  // overall + one group per level of `var_name`.
  static Grouping overall_and_levels(const CovariateSchema& schema, std::string_view var_name) {
    Grouping g = overall();
    const auto v = schema.require_var(var_name);
    for (std::size_t l = 0; l < schema.variables[v].levels.size(); ++l) {
      Group grp;
      grp.label = schema.variables[v].name + "=" + schema.variables[v].levels[l];
      grp.var = static_cast<int>(v);
      grp.level = static_cast<int>(l);
      g.groups.push_back(std::move(grp));
    }
    return g;
  }

  static bool contains(const Group& g, const CellKey& key) {
    if (g.var < 0) return true;
    return key.levels[static_cast<std::size_t>(g.var)] == g.level;
  }
};

}  // namespace popstrat
