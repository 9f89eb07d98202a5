#pragma once

#include "setseg/losses.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace setseg {

/// Finite-difference verification of every differentiable path used in
/// training, grouped in named blocks under three scopes:
///   losses:    focal, dice, l2_embedding, box, mask, set_loss
///   attention: self_attention, multi_head_attention, dynamic_attention, encoder
///   heads:     heads, box_update, query_boxes
/// Each block draws `points` random points away from clamp and min/max kinks.
struct GradSuiteOptions {
  int points = 50;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  GradCheckOptions fd;
  // Negative control: perturbs one analytic component per point.
  bool corrupt = false;
};

struct GradBlockResult {
  std::string scope;
  std::string name;
  int points = 0;
  long coordinates = 0;  // total coordinates compared
  double max_rel_error = 0.0;
  bool passed = false;
};

std::vector<std::string> grad_scopes();

/// `scope` is one of grad_scopes() or "all". Throws std::invalid_argument
/// for unknown scopes.
std::vector<GradBlockResult> run_grad_suite(const std::string& scope, const GradSuiteOptions& opt = {});

}  // namespace setseg
