#pragma once

// Architecture genome: a DAG of typed blocks with column annotations and a
// two-column classification head.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vqi/blocks.hpp"
#include "vqi/kernels.hpp"

namespace vqi {

enum class BlockKind {
  Input,
  Conv3x3,
  ConvDepthwise,
  Conv1x1,
  VAC,
  AADSDown,
  MaxPool,
  GAP,
  Concat,
  Add,
  FCHead,
  Aggregate,
};

std::string_view to_string(BlockKind kind);
BlockKind block_kind_from_string(std::string_view name);

/// One node of the architecture graph. Which fields matter depends on `kind`:
///   Input          channels, height, width, standardize (per-sample zero mean, unit variance)
///   Conv3x3/1x1    out_channels, stride, groups, relu
///   ConvDepthwise  stride, relu (channel multiplier 1)
///   VAC            condense_stride, embed_channels, embed_groups
///   AADSDown       out_channels (0 = keep), conv_kernel (0 = identity), groups
///   MaxPool        pool_kernel, stride, pool_padding
///   FCHead         out_channels (class count)
struct BlockSpec {
  BlockKind kind = BlockKind::Input;
  std::vector<int> inputs;
  int column = 0;

  int channels = 1;
  int height = 224;
  int width = 224;
  bool standardize = false;

  int out_channels = 0;
  int stride = 1;
  int groups = 1;
  bool relu = true;

  int condense_stride = 2;
  int embed_channels = 0;
  int embed_groups = 1;

  int conv_kernel = 0;

  int pool_kernel = 2;
  int pool_padding = 0;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// Output extent of a node: NCHW feature map, or a flat (N, channels) vector.
struct NodeShape {
  int channels = 0;
  int height = 0;
  int width = 0;
  bool flat = false;

  friend bool operator==(const NodeShape&, const NodeShape&) = default;
};

class ArchGraph {
 public:
  std::string version;
  std::vector<BlockSpec> nodes;

  int add(BlockSpec spec);
  int size() const { return static_cast<int>(nodes.size()); }
  const BlockSpec& node(int id) const { return nodes.at(static_cast<std::size_t>(id)); }

  /// Structural problems (cycles, arity, head layout, shape conflicts); empty when valid.
  std::vector<std::string> validate() const;
  bool is_valid() const { return validate().empty(); }
  /// Throws std::invalid_argument listing every problem.
  void require_valid() const;

  /// Per-node output shapes for an input of the given extent. Throws ShapeError
  /// naming the first node that cannot accept its inputs.
  std::vector<NodeShape> infer_shapes(int height, int width) const;
  std::vector<NodeShape> infer_shapes() const;

  int input_height() const;
  int input_width() const;
  int input_channels() const;

  /// Ids of the two FCHead nodes in aggregation order, and of the aggregate.
  std::vector<int> head_ids() const;
  int aggregate_id() const;
  std::vector<std::vector<int>> consumers() const;

  /// Stable 64-bit FNV-1a hash of the canonical JSON text.
  std::uint64_t hash() const;

  friend bool operator==(const ArchGraph&, const ArchGraph&) = default;
};

// Per-kind spec helpers; `in` is the shape feeding the node.
ConvSpec conv_spec_for(const BlockSpec& b, const NodeShape& in);
VacSpec vac_spec_for(const BlockSpec& b, const NodeShape& in);
AadsSpec aads_spec_for(const BlockSpec& b, const NodeShape& in);

/// Learnable tensor shapes of every node (empty list for parameter-free nodes).
std::vector<std::vector<Shape>> param_shapes(const ArchGraph& graph);

std::int64_t count_params(const ArchGraph& graph);

struct FlopCount {
  std::int64_t total = 0;      // the figure reported as FLOPs
  std::int64_t bias_adds = 0;  // informational; folded into the 2-per-MAC convention, not in total
};

/// Analytic forward FLOPs at the given input extent:
///   conv      2 * Ho * Wo * Cout * (Cin/groups) * kh * kw   (+1 per output for ReLU)
///   FC        2 * in * out
///   blur      counted as a 3x3 depthwise conv at the output sites
///   ReLU, sigmoid, gating multiply, Add      1 per element
///   input standardization                    4 per input element
///   max pool  k*k per output element; GAP 1 per input element; aggregate 2 per output
/// Concat, upsampling and softmax are free.
FlopCount flop_count(const ArchGraph& graph, int height, int width);
std::int64_t count_flops(const ArchGraph& graph, int height, int width);

/// The shipped reference configuration (version string "ldn-ref-1.0").
ArchGraph build_reference_config();

/// Human-readable JSON document (node list with edges and per-kind fields).
std::string graph_to_json(const ArchGraph& graph, int indent = 2);
ArchGraph graph_from_json(std::string_view text);
void save_graph(const ArchGraph& graph, const std::string& path);
ArchGraph load_graph(const std::string& path);

}  // namespace vqi
