#include "vqi/graph.hpp"

namespace vqi {

namespace {

class Builder {
 public:
  explicit Builder(ArchGraph& g) : g_(g) {}

  int input(int channels, int h, int w) {
    BlockSpec b;
    b.kind = BlockKind::Input;
    b.channels = channels;
    b.height = h;
    b.width = w;
    b.standardize = true;
    return g_.add(b);
  }
  int conv3(int src, int col, int out, int groups = 1, int stride = 1) {
    return conv(BlockKind::Conv3x3, src, col, out, groups, stride);
  }
  int conv1(int src, int col, int out, int groups = 1) { return conv(BlockKind::Conv1x1, src, col, out, groups, 1); }
  int dw(int src, int col) { return conv(BlockKind::ConvDepthwise, src, col, 0, 1, 1); }
  int vac(int src, int col, int condense, int embed, int groups) {
    BlockSpec b;
    b.kind = BlockKind::VAC;
    b.inputs = {src};
    b.column = col;
    b.condense_stride = condense;
    b.embed_channels = embed;
    b.embed_groups = groups;
    return g_.add(b);
  }
  int down(int src, int col, int out = 0, int kernel = 0, int groups = 1) {
    BlockSpec b;
    b.kind = BlockKind::AADSDown;
    b.inputs = {src};
    b.column = col;
    b.out_channels = out;
    b.conv_kernel = kernel;
    b.groups = groups;
    return g_.add(b);
  }
  int merge(std::vector<int> srcs, int col, BlockKind kind = BlockKind::Concat) {
    BlockSpec b;
    b.kind = kind;
    b.inputs = std::move(srcs);
    b.column = col;
    return g_.add(b);
  }
  int heads(int src, int col) {
    BlockSpec gap;
    gap.kind = BlockKind::GAP;
    gap.inputs = {src};
    gap.column = col;
    const int f = g_.add(gap);
    BlockSpec fc;
    fc.kind = BlockKind::FCHead;
    fc.inputs = {f};
    fc.out_channels = 2;
    fc.column = col;
    const int h1 = g_.add(fc);
    fc.column = col + 1;
    const int h2 = g_.add(fc);
    BlockSpec agg;
    agg.kind = BlockKind::Aggregate;
    agg.inputs = {h1, h2};
    agg.column = col;
    return g_.add(agg);
  }

 private:
  int conv(BlockKind kind, int src, int col, int out, int groups, int stride) {
    BlockSpec b;
    b.kind = kind;
    b.inputs = {src};
    b.column = col;
    b.out_channels = out;
    b.groups = groups;
    b.stride = stride;
    return g_.add(b);
  }

  ArchGraph& g_;
};

}  // namespace

// Layout (spatial extent per stage at 224x224 input):
//   112  strided stem + early attention condenser
//    56  three independent columns (grouped conv / separable / attention)
//    28  columns A and B merge once, C stays independent
//    14  all columns merge into one trunk
//     7  two-path block, merged
//     4  wide residual trunk, GAP, two FC heads
ArchGraph build_reference_config() {
  ArchGraph g;
  g.version = "ldn-ref-1.0";
  Builder b(g);

  const int in = b.input(1, 224, 224);
  int x = b.conv3(in, 0, 16, 1, 2);
  x = b.vac(x, 0, 4, 16, 4);
  x = b.down(x, 0);

  // 56x56: three columns
  int a = b.conv3(x, 1, 24, 4);
  a = b.vac(a, 1, 4, 24, 4);
  int bb = b.dw(x, 2);
  bb = b.conv1(bb, 2, 24);
  int c = b.vac(x, 3, 4, 16, 4);
  c = b.conv1(c, 3, 24);
  a = b.down(a, 1);
  bb = b.down(bb, 2);
  c = b.down(c, 3);

  // 28x28: one sparse merge (A+B)
  a = b.conv3(a, 1, 48, 4);
  bb = b.conv3(bb, 2, 48, 4);
  c = b.vac(c, 3, 2, 24, 4);
  c = b.conv1(c, 3, 48);
  int ab = b.merge({a, bb}, 1);
  ab = b.conv1(ab, 1, 48);
  ab = b.down(ab, 1);
  c = b.down(c, 3);

  // 14x14: dense merge into the trunk
  ab = b.conv3(ab, 1, 96, 2);
  c = b.conv3(c, 3, 96, 4);
  int t = b.merge({ab, c}, 0);
  t = b.conv1(t, 0, 128);
  t = b.down(t, 0);

  // 7x7: two paths, concatenated and fused
  int p = b.conv3(t, 1, 128, 2);
  int q = b.conv1(t, 2, 128);
  t = b.merge({p, q}, 0);
  t = b.conv1(t, 0, 192);
  t = b.down(t, 0);

  // 4x4: wide trunk with a residual connection
  int w = b.conv3(t, 0, 272);
  int r = b.conv1(w, 0, 272);
  t = b.merge({w, r}, 0, BlockKind::Add);
  b.heads(t, 0);
  return g;
}

}  // namespace vqi
