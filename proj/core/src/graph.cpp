#include "vqi/graph.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>
#include <utility>

#include "json.hpp"

namespace vqi {

namespace {

constexpr std::array<std::pair<BlockKind, std::string_view>, 12> kKindNames = {{
    {BlockKind::Input, "Input"},
    {BlockKind::Conv3x3, "Conv3x3"},
    {BlockKind::ConvDepthwise, "ConvDepthwise"},
    {BlockKind::Conv1x1, "Conv1x1"},
    {BlockKind::VAC, "VAC"},
    {BlockKind::AADSDown, "AADSDown"},
    {BlockKind::MaxPool, "MaxPool"},
    {BlockKind::GAP, "GAP"},
    {BlockKind::Concat, "Concat"},
    {BlockKind::Add, "Add"},
    {BlockKind::FCHead, "FCHead"},
    {BlockKind::Aggregate, "Aggregate"},
}};

std::string node_label(int id, const BlockSpec& b) {
  return "node " + std::to_string(id) + " (" + std::string(to_string(b.kind)) + ")";
}

bool is_conv(BlockKind k) {
  return k == BlockKind::Conv3x3 || k == BlockKind::ConvDepthwise || k == BlockKind::Conv1x1;
}

}  // namespace

std::string_view to_string(BlockKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "?";
}

BlockKind block_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  throw std::invalid_argument("unknown block kind '" + std::string(name) + "'");
}

int ArchGraph::add(BlockSpec spec) {
  nodes.push_back(std::move(spec));
  return size() - 1;
}

ConvSpec conv_spec_for(const BlockSpec& b, const NodeShape& in) {
  switch (b.kind) {
    case BlockKind::Conv3x3:
      return {in.channels, b.out_channels, 3, 3, b.stride, 1, b.groups};
    case BlockKind::ConvDepthwise:
      return {in.channels, in.channels, 3, 3, b.stride, 1, in.channels};
    case BlockKind::Conv1x1:
      return {in.channels, b.out_channels, 1, 1, b.stride, 0, b.groups};
    default:
      throw std::invalid_argument("conv_spec_for: " + std::string(to_string(b.kind)) + " is not a convolution");
  }
}

VacSpec vac_spec_for(const BlockSpec& b, const NodeShape& in) {
  return {in.channels, b.condense_stride, b.embed_groups, b.embed_channels};
}

AadsSpec aads_spec_for(const BlockSpec& b, const NodeShape& in) {
  const int out = b.out_channels > 0 ? b.out_channels : in.channels;
  return {in.channels, out, b.conv_kernel, b.groups};
}

int ArchGraph::input_height() const {
  if (nodes.empty() || nodes[0].kind != BlockKind::Input) throw std::invalid_argument("graph has no input node");
  return nodes[0].height;
}

int ArchGraph::input_width() const {
  if (nodes.empty() || nodes[0].kind != BlockKind::Input) throw std::invalid_argument("graph has no input node");
  return nodes[0].width;
}

int ArchGraph::input_channels() const {
  if (nodes.empty() || nodes[0].kind != BlockKind::Input) throw std::invalid_argument("graph has no input node");
  return nodes[0].channels;
}

std::vector<std::vector<int>> ArchGraph::consumers() const {
  std::vector<std::vector<int>> out(nodes.size());
  for (int i = 0; i < size(); ++i)
    for (int src : nodes[i].inputs)
      if (src >= 0 && src < size()) out[src].push_back(i);
  return out;
}

int ArchGraph::aggregate_id() const {
  for (int i = 0; i < size(); ++i)
    if (nodes[i].kind == BlockKind::Aggregate) return i;
  return -1;
}

std::vector<int> ArchGraph::head_ids() const {
  const int agg = aggregate_id();
  if (agg >= 0) return nodes[agg].inputs;
  std::vector<int> ids;
  for (int i = 0; i < size(); ++i)
    if (nodes[i].kind == BlockKind::FCHead) ids.push_back(i);
  return ids;
}

std::vector<NodeShape> ArchGraph::infer_shapes() const {
  return infer_shapes(input_height(), input_width());
}

std::vector<NodeShape> ArchGraph::infer_shapes(int height, int width) const {
  std::vector<NodeShape> shapes(nodes.size());
  for (int id = 0; id < size(); ++id) {
    const BlockSpec& b = nodes[id];
    auto fail = [&](const std::string& msg) -> void { throw ShapeError(node_label(id, b) + ": " + msg); };
    std::vector<NodeShape> ins;
    for (int src : b.inputs) {
      if (src < 0 || src >= id) fail("input " + std::to_string(src) + " does not precede the node");
      ins.push_back(shapes[src]);
    }
    auto need_map = [&](const NodeShape& s) {
      if (s.flat) fail("expects a spatial feature map, got a flat vector");
    };
    auto need_arity = [&](std::size_t n) {
      if (ins.size() != n) fail("expects " + std::to_string(n) + " input(s), has " + std::to_string(ins.size()));
    };
    NodeShape out;
    try {
      switch (b.kind) {
        case BlockKind::Input:
          if (!b.inputs.empty()) fail("input node cannot have producers");
          if (b.channels < 1 || height < 1 || width < 1) fail("input extents must be positive");
          out = {b.channels, height, width, false};
          break;
        case BlockKind::Conv3x3:
        case BlockKind::ConvDepthwise:
        case BlockKind::Conv1x1: {
          need_arity(1);
          need_map(ins[0]);
          const ConvSpec cs = conv_spec_for(b, ins[0]);
          cs.validate();
          if (ins[0].height + 2 * cs.padding < cs.kernel_h || ins[0].width + 2 * cs.padding < cs.kernel_w)
            fail("input smaller than kernel");
          out = {cs.out_channels, static_cast<int>(cs.out_extent_h(ins[0].height)),
                 static_cast<int>(cs.out_extent_w(ins[0].width)), false};
          break;
        }
        case BlockKind::VAC: {
          need_arity(1);
          need_map(ins[0]);
          const VacSpec vs = vac_spec_for(b, ins[0]);
          vs.validate();
          if (ins[0].height % vs.condense_stride || ins[0].width % vs.condense_stride)
            fail("spatial extent " + std::to_string(ins[0].height) + "x" + std::to_string(ins[0].width) +
                 " not divisible by condense_stride " + std::to_string(vs.condense_stride));
          out = ins[0];
          break;
        }
        case BlockKind::AADSDown: {
          need_arity(1);
          need_map(ins[0]);
          const AadsSpec as = aads_spec_for(b, ins[0]);
          as.validate();
          if (ins[0].height < 2 || ins[0].width < 2) fail("spatial extent below 2");
          out = {as.out_channels, (ins[0].height + 1) / 2, (ins[0].width + 1) / 2, false};
          break;
        }
        case BlockKind::MaxPool: {
          need_arity(1);
          need_map(ins[0]);
          if (b.pool_kernel < 1 || b.stride < 1 || b.pool_padding < 0 || b.pool_padding >= b.pool_kernel)
            fail("invalid pool geometry");
          if (ins[0].height + 2 * b.pool_padding < b.pool_kernel ||
              ins[0].width + 2 * b.pool_padding < b.pool_kernel)
            fail("input smaller than pool window");
          out = {ins[0].channels, (ins[0].height + 2 * b.pool_padding - b.pool_kernel) / b.stride + 1,
                 (ins[0].width + 2 * b.pool_padding - b.pool_kernel) / b.stride + 1, false};
          break;
        }
        case BlockKind::GAP:
          need_arity(1);
          need_map(ins[0]);
          out = {ins[0].channels, 1, 1, true};
          break;
        case BlockKind::Concat: {
          if (ins.size() < 2) fail("concat needs at least two inputs");
          out = ins[0];
          out.channels = 0;
          for (const auto& s : ins) {
            need_map(s);
            if (s.height != ins[0].height || s.width != ins[0].width)
              fail("concat inputs disagree on spatial extent");
            out.channels += s.channels;
          }
          break;
        }
        case BlockKind::Add:
          if (ins.size() < 2) fail("add needs at least two inputs");
          for (const auto& s : ins)
            if (!(s == ins[0])) fail("add inputs disagree in shape");
          out = ins[0];
          break;
        case BlockKind::FCHead:
          need_arity(1);
          if (!ins[0].flat) fail("expects flat (GAP) features");
          if (b.out_channels < 1) fail("class count must be positive");
          out = {b.out_channels, 1, 1, true};
          break;
        case BlockKind::Aggregate:
          need_arity(2);
          if (!ins[0].flat || !(ins[0] == ins[1])) fail("aggregated heads must be flat and equal in shape");
          out = ins[0];
          break;
      }
    } catch (const ShapeError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ShapeError(node_label(id, b) + ": " + e.what());
    }
    shapes[id] = out;
  }
  return shapes;
}

std::vector<std::string> ArchGraph::validate() const {
  std::vector<std::string> problems;
  if (nodes.empty()) return {"graph is empty"};
  if (nodes[0].kind != BlockKind::Input) problems.push_back("node 0 must be the Input node");
  int heads = 0, aggs = 0;
  for (int id = 0; id < size(); ++id) {
    const BlockSpec& b = nodes[id];
    if (id > 0 && b.kind == BlockKind::Input) problems.push_back(node_label(id, b) + ": second input node");
    if (id > 0 && b.inputs.empty()) problems.push_back(node_label(id, b) + ": has no producers");
    for (int src : b.inputs)
      if (src < 0 || src >= id)
        problems.push_back(node_label(id, b) + ": edge from " + std::to_string(src) + " breaks topological order");
    if (b.kind == BlockKind::FCHead) ++heads;
    if (b.kind == BlockKind::Aggregate) ++aggs;
  }
  if (heads != 2) problems.push_back("expected exactly 2 FCHead nodes, found " + std::to_string(heads));
  if (aggs != 1) problems.push_back("expected exactly 1 Aggregate node, found " + std::to_string(aggs));
  if (!problems.empty()) return problems;

  const int agg = aggregate_id();
  const auto& agg_in = nodes[agg].inputs;
  if (agg_in.size() != 2 || agg_in[0] == agg_in[1] || nodes[agg_in[0]].kind != BlockKind::FCHead ||
      nodes[agg_in[1]].kind != BlockKind::FCHead) {
    problems.push_back("Aggregate must consume the two FCHead nodes");
  }
  const auto cons = consumers();
  for (int id = 0; id < size(); ++id) {
    const BlockSpec& b = nodes[id];
    if (id == agg) {
      if (!cons[id].empty()) problems.push_back("Aggregate must be the single output");
      continue;
    }
    if (cons[id].empty()) problems.push_back(node_label(id, b) + ": output is never consumed");
    if (b.kind == BlockKind::FCHead && (cons[id].size() != 1 || cons[id][0] != agg))
      problems.push_back(node_label(id, b) + ": head must feed only the Aggregate");
  }
  if (!problems.empty()) return problems;

  try {
    const auto shapes = infer_shapes();
    if (shapes[agg].channels != 2) problems.push_back("aggregated output must have 2 classes");
  } catch (const std::exception& e) {
    problems.emplace_back(e.what());
  }
  return problems;
}

void ArchGraph::require_valid() const {
  const auto problems = validate();
  if (problems.empty()) return;
  std::string msg = "invalid architecture graph:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw std::invalid_argument(msg);
}

std::uint64_t ArchGraph::hash() const {
  const std::string text = graph_to_json(*this, -1);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::vector<Shape>> param_shapes(const ArchGraph& graph) {
  const auto shapes = graph.infer_shapes();
  std::vector<std::vector<Shape>> out(graph.nodes.size());
  for (int id = 0; id < graph.size(); ++id) {
    const BlockSpec& b = graph.nodes[id];
    if (b.inputs.empty()) continue;
    const NodeShape& in = shapes[b.inputs[0]];
    if (is_conv(b.kind)) {
      const ConvSpec cs = conv_spec_for(b, in);
      out[id] = {cs.weight_shape(), {std::size_t(cs.out_channels)}};
    } else if (b.kind == BlockKind::VAC) {
      const VacSpec vs = vac_spec_for(b, in);
      const auto e = std::size_t(vs.embed_channels), c = std::size_t(vs.channels);
      out[id] = {vs.embed1().weight_shape(), {e}, vs.embed2().weight_shape(), {e}, vs.projection().weight_shape(), {c}};
    } else if (b.kind == BlockKind::AADSDown) {
      const AadsSpec as = aads_spec_for(b, in);
      if (as.has_conv()) out[id] = {as.conv().weight_shape(), {std::size_t(as.out_channels)}};
    } else if (b.kind == BlockKind::FCHead) {
      out[id] = {{std::size_t(b.out_channels), std::size_t(in.channels)}, {std::size_t(b.out_channels)}};
    }
  }
  return out;
}

std::int64_t count_params(const ArchGraph& graph) {
  if (graph.nodes.empty()) return 0;
  std::int64_t total = 0;
  for (const auto& node : param_shapes(graph))
    for (const auto& s : node) total += static_cast<std::int64_t>(shape_numel(s));
  return total;
}

FlopCount flop_count(const ArchGraph& graph, int height, int width) {
  FlopCount fc;
  if (graph.nodes.empty()) return fc;
  const auto shapes = graph.infer_shapes(height, width);
  auto conv_cost = [&](const ConvSpec& cs, std::int64_t ho, std::int64_t wo, bool with_relu) {
    const std::int64_t outputs = ho * wo * cs.out_channels;
    fc.total += 2 * outputs * (cs.in_channels / cs.groups) * cs.kernel_h * cs.kernel_w;
    fc.bias_adds += outputs;
    if (with_relu) fc.total += outputs;
  };
  for (int id = 0; id < graph.size(); ++id) {
    const BlockSpec& b = graph.nodes[id];
    const NodeShape& out = shapes[id];
    const std::int64_t out_elems = std::int64_t(out.channels) * out.height * out.width;
    if (b.kind == BlockKind::Input && b.standardize) fc.total += 4 * out_elems;
    if (b.inputs.empty()) continue;
    const NodeShape& in = shapes[b.inputs[0]];
    const std::int64_t in_elems = std::int64_t(in.channels) * in.height * in.width;
    switch (b.kind) {
      case BlockKind::Conv3x3:
      case BlockKind::ConvDepthwise:
      case BlockKind::Conv1x1:
        conv_cost(conv_spec_for(b, in), out.height, out.width, b.relu);
        break;
      case BlockKind::VAC: {
        const VacSpec vs = vac_spec_for(b, in);
        const std::int64_t sh = in.height / vs.condense_stride, sw = in.width / vs.condense_stride;
        const std::int64_t k2 = std::int64_t(vs.condense_stride) * vs.condense_stride;
        fc.total += k2 * sh * sw * vs.channels;  // condensation
        conv_cost(vs.embed1(), sh, sw, true);
        conv_cost(vs.embed2(), sh, sw, true);
        conv_cost(vs.projection(), sh, sw, false);
        fc.total += 2 * in_elems;  // sigmoid + gating multiply
        break;
      }
      case BlockKind::AADSDown: {
        const AadsSpec as = aads_spec_for(b, in);
        if (as.has_conv()) conv_cost(as.conv(), in.height, in.width, true);
        fc.total += 2 * out_elems * 9;
        break;
      }
      case BlockKind::MaxPool:
        fc.total += out_elems * b.pool_kernel * b.pool_kernel;
        break;
      case BlockKind::GAP:
        fc.total += in_elems;
        break;
      case BlockKind::Add:
        fc.total += out_elems * static_cast<std::int64_t>(b.inputs.size() - 1);
        break;
      case BlockKind::FCHead:
        fc.total += 2 * std::int64_t(in.channels) * b.out_channels;
        fc.bias_adds += b.out_channels;
        break;
      case BlockKind::Aggregate:
        fc.total += 2 * out.channels;
        break;
      case BlockKind::Input:
      case BlockKind::Concat:
        break;
    }
  }
  return fc;
}

std::int64_t count_flops(const ArchGraph& graph, int height, int width) {
  return flop_count(graph, height, width).total;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

nlohmann::ordered_json node_to_json(int id, const BlockSpec& b) {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["kind"] = std::string(to_string(b.kind));
  j["inputs"] = b.inputs;
  j["column"] = b.column;
  switch (b.kind) {
    case BlockKind::Input:
      j["channels"] = b.channels;
      j["height"] = b.height;
      j["width"] = b.width;
      j["standardize"] = b.standardize;
      break;
    case BlockKind::Conv3x3:
    case BlockKind::Conv1x1:
      j["out_channels"] = b.out_channels;
      j["stride"] = b.stride;
      j["groups"] = b.groups;
      j["relu"] = b.relu;
      break;
    case BlockKind::ConvDepthwise:
      j["stride"] = b.stride;
      j["relu"] = b.relu;
      break;
    case BlockKind::VAC:
      j["condense_stride"] = b.condense_stride;
      j["embed_channels"] = b.embed_channels;
      j["embed_groups"] = b.embed_groups;
      break;
    case BlockKind::AADSDown:
      j["out_channels"] = b.out_channels;
      j["conv_kernel"] = b.conv_kernel;
      j["groups"] = b.groups;
      break;
    case BlockKind::MaxPool:
      j["pool_kernel"] = b.pool_kernel;
      j["stride"] = b.stride;
      j["pool_padding"] = b.pool_padding;
      break;
    case BlockKind::FCHead:
      j["out_channels"] = b.out_channels;
      break;
    case BlockKind::GAP:
    case BlockKind::Concat:
    case BlockKind::Add:
    case BlockKind::Aggregate:
      break;
  }
  return j;
}

}  // namespace

std::string graph_to_json(const ArchGraph& graph, int indent) {
  nlohmann::ordered_json doc;
  doc["format"] = "vqi-arch-graph";
  doc["version"] = graph.version;
  auto& arr = doc["nodes"] = nlohmann::ordered_json::array();
  for (int id = 0; id < graph.size(); ++id) arr.push_back(node_to_json(id, graph.nodes[id]));
  return doc.dump(indent);
}

ArchGraph graph_from_json(std::string_view text) {
  const auto doc = nlohmann::json::parse(text);
  if (doc.value("format", "") != "vqi-arch-graph") throw std::invalid_argument("not a vqi-arch-graph document");
  ArchGraph g;
  g.version = doc.value("version", "");
  int expected = 0;
  for (const auto& j : doc.at("nodes")) {
    if (j.value("id", expected) != expected) {
      throw std::invalid_argument("graph nodes must be listed in id order (expected id " + std::to_string(expected) + ")");
    }
    ++expected;
    BlockSpec b;
    b.kind = block_kind_from_string(j.at("kind").get<std::string>());
    b.inputs = j.value("inputs", std::vector<int>{});
    b.column = j.value("column", 0);
    b.channels = j.value("channels", b.channels);
    b.height = j.value("height", b.height);
    b.width = j.value("width", b.width);
    b.standardize = j.value("standardize", b.standardize);
    b.out_channels = j.value("out_channels", b.out_channels);
    b.stride = j.value("stride", b.stride);
    b.groups = j.value("groups", b.groups);
    b.relu = j.value("relu", b.relu);
    b.condense_stride = j.value("condense_stride", b.condense_stride);
    b.embed_channels = j.value("embed_channels", b.embed_channels);
    b.embed_groups = j.value("embed_groups", b.embed_groups);
    b.conv_kernel = j.value("conv_kernel", b.conv_kernel);
    b.pool_kernel = j.value("pool_kernel", b.pool_kernel);
    b.pool_padding = j.value("pool_padding", b.pool_padding);
    g.nodes.push_back(std::move(b));
  }
  return g;
}

void save_graph(const ArchGraph& graph, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << graph_to_json(graph) << '\n';
}

ArchGraph load_graph(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return graph_from_json(ss.str());
}

}  // namespace vqi
