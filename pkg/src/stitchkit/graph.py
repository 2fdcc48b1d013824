"""Operator-DAG representation of networks.

Nodes are operators (plus input/output and, after combining, stitch/switch
nodes); edges carry the argument position at the consumer. The canonical
topological ordering is ascending insertion_index, which is kept a valid
topological order at all times.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T

GRAPH_FORMAT_VERSION = 1

NODE_KINDS = set(T.OPERATOR_KINDS) | {"input", "output", "stitch", "switch"}


class GraphError(ValueError):
    pass


@dataclass
class GraphNode:
    id: int
    kind: str
    scale: int = 0
    insertion_index: int = 0
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)     # name -> Tensor
    buffers: dict = field(default_factory=dict)    # name -> ndarray


@dataclass
class ArchitectureConfig:
    depth: int = 3
    base_channels: int = 4
    in_channels: int = 1
    num_classes: int = 1
    image_size: int = 64
    kernel_size: int = 3
    negative_slope: float = 0.01

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class NetworkGraph:
    def __init__(self, meta=None):
        self.nodes = {}
        self.edges = []          # (producer, consumer, arg position)
        self.input_id = None
        self.output_id = None
        self.meta = dict(meta or {})
        self._next_id = 0

    # -- construction -------------------------------------------------------

    def add_node(self, kind, inputs=(), scale=0, attrs=None, params=None,
                 buffers=None, node_id=None):
        if kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind {kind!r}")
        nid = self._next_id if node_id is None else node_id
        if nid in self.nodes:
            raise GraphError(f"duplicate node id {nid}")
        self._next_id = max(self._next_id, nid + 1)
        node = GraphNode(
            id=nid, kind=kind, scale=scale,
            insertion_index=len(self.nodes),
            attrs=dict(attrs or {}), params=dict(params or {}),
            buffers=dict(buffers or {}),
        )
        self.nodes[nid] = node
        for pos, src in enumerate(inputs):
            if src not in self.nodes:
                raise GraphError(f"edge from unknown node {src}")
            self.edges.append((src, nid, pos))
        if kind == "input":
            self.input_id = nid
        if kind == "output":
            self.output_id = nid
        return nid

    def producers_of(self, nid):
        """Producer ids of nid ordered by argument position."""
        ins = sorted(((p, s) for s, d, p in self.edges if d == nid))
        return [s for _, s in ins]

    def consumers_of(self, nid):
        return [(d, p) for s, d, p in self.edges if s == nid]

    def ordered_nodes(self):
        return sorted(self.nodes.values(), key=lambda n: n.insertion_index)

    def validate(self):
        ids = [n.id for n in self.nodes.values()]
        if len(set(ids)) != len(ids):
            raise GraphError("duplicate node ids")
        indeg = {nid: 0 for nid in self.nodes}
        for s, d, p in self.edges:
            if s not in self.nodes or d not in self.nodes:
                raise GraphError("edge references missing node")
            indeg[d] += 1
        for nid in self.nodes:
            positions = sorted(p for s, d, p in self.edges if d == nid)
            if positions != list(range(len(positions))):
                raise GraphError(f"argument positions of node {nid} not dense: {positions}")
        if self.input_id is not None and indeg[self.input_id] != 0:
            raise GraphError("input node has incoming edges")
        if self.output_id is not None and self.consumers_of(self.output_id):
            raise GraphError("output node has outgoing edges")
        # insertion order must be a valid topological order
        order = {n.id: n.insertion_index for n in self.nodes.values()}
        for s, d, p in self.edges:
            if order[s] >= order[d]:
                raise GraphError(f"insertion order violates edge {s}->{d}")
        return True

    def normalize_insertion_order(self):
        """Reassign insertion indices via a deterministic Kahn sort (smallest
        current index first). Raises on cycles."""
        indeg = {nid: 0 for nid in self.nodes}
        for s, d, p in self.edges:
            indeg[d] += 1
        import heapq

        ready = [(self.nodes[n].insertion_index, n) for n in self.nodes if indeg[n] == 0]
        heapq.heapify(ready)
        out = {}
        k = 0
        succs = {}
        for s, d, p in self.edges:
            succs.setdefault(s, []).append(d)
        while ready:
            _, nid = heapq.heappop(ready)
            out[nid] = k
            k += 1
            for d in succs.get(nid, []):
                indeg[d] -= 1
                if indeg[d] == 0:
                    heapq.heappush(ready, (self.nodes[d].insertion_index, d))
        if k != len(self.nodes):
            raise GraphError("graph contains a cycle")
        for nid, idx in out.items():
            self.nodes[nid].insertion_index = idx

    def clone(self, requires_grad=None):
        g = NetworkGraph(meta=dict(self.meta))
        g.edges = list(self.edges)
        g.input_id = self.input_id
        g.output_id = self.output_id
        g._next_id = self._next_id
        for nid, n in self.nodes.items():
            params = {}
            for k, p in n.params.items():
                rg = p.requires_grad if requires_grad is None else requires_grad
                params[k] = T.Tensor(p.data.copy(), requires_grad=rg, name=p.name)
            g.nodes[nid] = GraphNode(
                id=n.id, kind=n.kind, scale=n.scale,
                insertion_index=n.insertion_index,
                attrs=dict(n.attrs), params=params,
                buffers={k: b.copy() for k, b in n.buffers.items()},
            )
        return g

    def named_parameters(self, trainable_only=False):
        out = {}
        for n in self.ordered_nodes():
            for k, p in n.params.items():
                if trainable_only and not p.requires_grad:
                    continue
                out[f"n{n.id}:{k}"] = p
        return out

    def named_buffers(self):
        out = {}
        for n in self.ordered_nodes():
            for k, b in n.buffers.items():
                out[f"n{n.id}:buf:{k}"] = b
        return out

    def state_snapshot(self):
        """Copies of every parameter and buffer, for freeze checks."""
        snap = {k: p.data.copy() for k, p in self.named_parameters().items()}
        snap.update({k: b.copy() for k, b in self.named_buffers().items()})
        return snap


# ---------------------------------------------------------------------------
# progress annotation

@dataclass
class ProgressInfo:
    d_from_input: int
    d_to_output: int
    progress: float


def annotate_progress(g):
    """Longest-path edge counts from the input / to the output, and the
    relative progress d_in / (d_in + d_out) per node."""
    g.validate()
    if g.input_id is None or g.output_id is None:
        raise GraphError("progress needs designated input and output nodes")
    order = g.ordered_nodes()
    d_in = {n.id: None for n in order}
    d_in[g.input_id] = 0
    preds = {}
    succs = {}
    for s, d, p in g.edges:
        preds.setdefault(d, []).append(s)
        succs.setdefault(s, []).append(d)
    for n in order:
        if n.id == g.input_id:
            continue
        best = None
        for s in preds.get(n.id, []):
            if d_in[s] is not None:
                cand = d_in[s] + 1
                best = cand if best is None or cand > best else best
        d_in[n.id] = best
    d_out = {n.id: None for n in order}
    d_out[g.output_id] = 0
    for n in reversed(order):
        if n.id == g.output_id:
            continue
        best = None
        for d in succs.get(n.id, []):
            if d_out[d] is not None:
                cand = d_out[d] + 1
                best = cand if best is None or cand > best else best
        d_out[n.id] = best
    out = {}
    for n in order:
        if d_in[n.id] is None:
            raise GraphError(f"node {n.id} unreachable from input")
        if d_out[n.id] is None:
            raise GraphError(f"node {n.id} does not reach output")
        out[n.id] = ProgressInfo(
            d_from_input=d_in[n.id],
            d_to_output=d_out[n.id],
            progress=d_in[n.id] / (d_in[n.id] + d_out[n.id]) if d_in[n.id] + d_out[n.id] else 0.0,
        )
    return out


# ---------------------------------------------------------------------------
# execution

SWITCH_MODES = ("original", "stitched", "average")


def required_nodes(g, targets, switch_table=None):
    """Ids of nodes needed to evaluate `targets`, honoring switch modes so
    dead branches are skipped. Without a switch table, switches keep both
    inputs alive."""
    preds = {}
    for s, d, p in g.edges:
        preds.setdefault(d, {})[p] = s
    needed = set()
    stack = list(targets)
    while stack:
        nid = stack.pop()
        if nid in needed:
            continue
        needed.add(nid)
        node = g.nodes[nid]
        ins = preds.get(nid, {})
        if node.kind == "switch" and switch_table is not None:
            mode = switch_table.get(nid)
            if mode is None:
                raise GraphError(f"switch {nid} missing from switch table")
            if mode == "original":
                use = [ins[0]]
            elif mode == "stitched":
                use = [ins[1]]
            else:
                use = [ins[0], ins[1]]
        else:
            use = [ins[p] for p in sorted(ins)]
        stack.extend(use)
    return needed


def execute(g, x, mode="eval", switch_table=None, switch_hook=None,
            capture=None, targets=None, prune=True):
    """Evaluate the graph on input x (ndarray or Tensor); returns the Tensor
    produced by the output node (or the last target).

    switch_table: node id -> mode for plain execution of switch nodes.
    switch_hook: callable(node, original, stitched) -> Tensor, overriding the
    table (used by stitch training).
    capture: optional dict filled with node id -> output Tensor.
    """
    if mode not in ("train", "eval"):
        raise GraphError(f"unknown mode {mode!r}")
    if not isinstance(x, T.Tensor):
        x = T.Tensor(np.asarray(x, dtype=np.float32))
    size = g.meta.get("image_size")
    cin = g.meta.get("in_channels")
    if cin is not None and x.shape[1] != cin:
        raise GraphError(f"input channels {x.shape[1]} != {cin}")
    if size is not None and x.shape[2:] != (size, size):
        raise GraphError(f"input spatial {x.shape[2:]} != ({size}, {size})")

    if targets is None:
        if g.output_id is None:
            raise GraphError("graph has no output node")
        targets = [g.output_id]
    if prune:
        needed = required_nodes(g, targets, switch_table if switch_hook is None else None)
    else:
        needed = set(g.nodes)

    preds = {}
    for s, d, p in g.edges:
        preds.setdefault(d, {})[p] = s

    values = {}
    for node in g.ordered_nodes():
        if node.id not in needed:
            continue
        ins_map = preds.get(node.id, {})
        if node.kind == "input":
            out = x
        elif node.kind == "output":
            out = values[ins_map[0]]
        elif node.kind == "switch":
            if switch_hook is not None:
                out = switch_hook(
                    node,
                    values[ins_map[0]],
                    values[ins_map[1]],
                )
            else:
                if switch_table is None or node.id not in switch_table:
                    raise GraphError(f"switch {node.id} has no configured mode")
                sw = switch_table[node.id]
                if sw == "original":
                    out = values[ins_map[0]]
                elif sw == "stitched":
                    out = values[ins_map[1]]
                elif sw == "average":
                    out = T.elementwise_mean([values[ins_map[0]], values[ins_map[1]]])
                else:
                    raise GraphError(f"unknown switch mode {sw!r}")
        elif node.kind == "stitch":
            src = values[ins_map[0]]
            if node.attrs.get("transform", "conv_1x1") == "linear":
                out = T.linear(src, node.params["weight"], node.params["bias"])
            else:
                out = T.conv2d(src, node.params["weight"], node.params["bias"])
        else:
            inputs = [values[ins_map[p]] for p in sorted(ins_map)]
            out = T.forward_op(node.kind, inputs, params=node.params,
                               attrs=node.attrs, buffers=node.buffers, mode=mode)
        values[node.id] = out
        if capture is not None:
            capture[node.id] = out
    return values[targets[-1]]


# ---------------------------------------------------------------------------
# U-Net template

def _conv_init(rng, c_out, c_in, k, negative_slope):
    gain = np.sqrt(2.0 / (1.0 + negative_slope ** 2))
    std = gain / np.sqrt(c_in * k * k)
    w = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)
    b = np.zeros(c_out, dtype=np.float32)
    return w, b


def build_unet_template(config, seed):
    """Encoder-decoder graph with skip connections; scale annotation is
    maintained constructively (pool +1, upsample -1)."""
    if config.depth < 1 or config.base_channels < 1:
        raise GraphError(f"invalid architecture config {config}")
    if config.image_size % (2 ** (config.depth - 1)):
        raise GraphError("image size not divisible by the pooling factor")
    rng = np.random.default_rng(seed)
    g = NetworkGraph(meta={
        "image_size": config.image_size,
        "in_channels": config.in_channels,
        "num_classes": config.num_classes,
        "arch": config.to_dict(),
    })

    def conv_block(src, c_in, c_out, scale, k=None):
        k = config.kernel_size if k is None else k
        w, b = _conv_init(rng, c_out, c_in, k, config.negative_slope)
        spatial = config.image_size // (2 ** scale)
        conv = g.add_node(
            "conv2d" if k > 1 else "conv2d_1x1", [src], scale=scale,
            attrs={"out_channels": c_out, "rank": 4, "spatial": spatial},
            params={"weight": T.Tensor(w, requires_grad=True),
                    "bias": T.Tensor(b, requires_grad=True)},
        )
        norm = g.add_node(
            "instance_norm", [conv], scale=scale,
            attrs={"out_channels": c_out, "rank": 4, "spatial": spatial,
                   "eps": 1e-5, "momentum": 0.1},
            params={"weight": T.Tensor(np.ones(c_out, dtype=np.float32), requires_grad=True),
                    "bias": T.Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)},
            buffers={"running_mean": np.zeros(c_out, dtype=np.float32),
                     "running_var": np.ones(c_out, dtype=np.float32)},
        )
        act = g.add_node(
            "leaky_relu", [norm], scale=scale,
            attrs={"out_channels": c_out, "rank": 4, "spatial": spatial,
                   "negative_slope": config.negative_slope},
        )
        return act

    inp = g.add_node("input", scale=0, attrs={
        "out_channels": config.in_channels, "rank": 4,
        "spatial": config.image_size})

    chans = [config.base_channels * (2 ** i) for i in range(config.depth)]
    skips = []
    cur = inp
    cur_c = config.in_channels
    for level in range(config.depth):
        cur = conv_block(cur, cur_c, chans[level], level)
        cur = conv_block(cur, chans[level], chans[level], level)
        cur_c = chans[level]
        if level < config.depth - 1:
            skips.append(cur)
            spatial = config.image_size // (2 ** (level + 1))
            cur = g.add_node(
                "max_pool", [cur], scale=level + 1,
                attrs={"out_channels": cur_c, "rank": 4, "spatial": spatial},
            )

    for level in range(config.depth - 2, -1, -1):
        spatial = config.image_size // (2 ** level)
        up = g.add_node(
            "nearest_upsample", [cur], scale=level,
            attrs={"out_channels": cur_c, "rank": 4, "spatial": spatial},
        )
        cat = g.add_node(
            "channel_concat", [skips[level], up], scale=level,
            attrs={"out_channels": chans[level] + cur_c, "rank": 4,
                   "spatial": spatial},
        )
        cur = conv_block(cat, chans[level] + cur_c, chans[level], level)
        cur = conv_block(cur, chans[level], chans[level], level)
        cur_c = chans[level]

    # segmentation head: 1x1 conv + sigmoid/softmax, no norm
    w, b = _conv_init(rng, config.num_classes, cur_c, 1, config.negative_slope)
    logits = g.add_node(
        "conv2d_1x1", [cur], scale=0,
        attrs={"out_channels": config.num_classes, "rank": 4,
               "spatial": config.image_size},
        params={"weight": T.Tensor(w, requires_grad=True),
                "bias": T.Tensor(b, requires_grad=True)},
    )
    prob_kind = "sigmoid" if config.num_classes == 1 else "softmax"
    probs = g.add_node(
        prob_kind, [logits], scale=0,
        attrs={"out_channels": config.num_classes, "rank": 4,
               "spatial": config.image_size},
    )
    g.add_node("output", [probs], scale=0, attrs={
        "out_channels": config.num_classes, "rank": 4,
        "spatial": config.image_size})
    g.meta["logits_id"] = logits
    g.meta["head_id"] = probs
    g.validate()
    return g


# ---------------------------------------------------------------------------
# serialization

def serialize(g):
    doc = {
        "format_version": GRAPH_FORMAT_VERSION,
        "meta": g.meta,
        "input_id": g.input_id,
        "output_id": g.output_id,
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "scale": n.scale,
                "insertion_index": n.insertion_index,
                "attrs": n.attrs,
            }
            for n in g.ordered_nodes()
        ],
        "edges": [[s, d, p] for s, d, p in g.edges],
    }
    return doc


def _param_entries(g):
    for n in g.ordered_nodes():
        for k, p in n.params.items():
            yield f"n{n.id}:{k}", p.data, p.requires_grad
        for k, b in n.buffers.items():
            yield f"n{n.id}:buf:{k}", b, False


def save_graph(g, directory, name="graph"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = serialize(g)
    doc["params_ref"] = f"{name}.params"
    with open(directory / f"{name}.json", "w") as f:
        json.dump(doc, f, indent=1)
    checkpoint.save_params(_param_entries(g), directory / f"{name}.params")


def deserialize(doc, params=None):
    if doc.get("format_version") != GRAPH_FORMAT_VERSION:
        raise GraphError(f"unsupported graph format version {doc.get('format_version')}")
    g = NetworkGraph(meta=doc.get("meta", {}))
    for nd in sorted(doc["nodes"], key=lambda n: n["insertion_index"]):
        node = GraphNode(
            id=nd["id"], kind=nd["kind"], scale=nd["scale"],
            insertion_index=nd["insertion_index"], attrs=dict(nd["attrs"]),
        )
        if node.kind not in NODE_KINDS:
            raise GraphError(f"unknown node kind {node.kind!r}")
        if nd["id"] in g.nodes:
            raise GraphError(f"duplicate node id {nd['id']}")
        g.nodes[nd["id"]] = node
        g._next_id = max(g._next_id, nd["id"] + 1)
        if node.kind == "input":
            g.input_id = node.id
        if node.kind == "output":
            g.output_id = node.id
    g.edges = [tuple(e) for e in doc["edges"]]
    if params:
        for name, (arr, trainable) in params.items():
            node_part, _, pname = name.partition(":")
            nid = int(node_part[1:])
            if nid not in g.nodes:
                raise GraphError(f"parameter {name} references unknown node")
            if pname.startswith("buf:"):
                g.nodes[nid].buffers[pname[4:]] = arr
            else:
                g.nodes[nid].params[pname] = T.Tensor(arr, requires_grad=trainable)
    g.validate()
    return g


def load_graph(directory, name="graph"):
    directory = Path(directory)
    with open(directory / f"{name}.json") as f:
        doc = json.load(f)
    params = checkpoint.load_params(directory / doc.get("params_ref", f"{name}.params"))
    return deserialize(doc, params)


def structural_equal(g1, g2, check_params=True):
    if serialize(g1) != serialize(g2):
        return False
    if check_params:
        p1 = g1.named_parameters()
        p2 = g2.named_parameters()
        if p1.keys() != p2.keys():
            return False
        for k in p1:
            if not np.array_equal(p1[k].data, p2[k].data):
                return False
        b1, b2 = g1.named_buffers(), g2.named_buffers()
        if b1.keys() != b2.keys():
            return False
        for k in b1:
            if not np.array_equal(b1[k], b2[k]):
                return False
    return True
