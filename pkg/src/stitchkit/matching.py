"""Layer-pair similarity and acyclic matching between two network graphs.

Similarity scores position-compatible layer pairs by how close their
relative progress through the network is; an optional bonus rewards pairs
with matching fan-in/fan-out (block boundaries). The matcher aligns the
two canonical topological orderings with a linear-space (Hirschberg-style)
dynamic program: skipping a node costs nothing and a pair is only taken
when its similarity is positive.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import GraphError, annotate_progress

NEVER_MATCHED_KINDS = {"input", "output", "switch", "stitch"}


@dataclass
class MatchingConfig:
    c: float = 1.0
    require_same_scale: bool = True
    cardinality_bonus: bool = False

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError(f"c must be in [0, 1], got {self.c}")


@dataclass
class SimilarityMatrix:
    row_ids: list        # node ids of network A, canonical order
    col_ids: list        # node ids of network B, canonical order
    values: np.ndarray   # (len(rows), len(cols)), incompatible pairs = -1
    row_progress: dict = field(default_factory=dict)
    col_progress: dict = field(default_factory=dict)


@dataclass
class MatchingResult:
    pairs: list          # [(a_id, b_id)] increasing in both canonical orders
    score: float
    pair_scores: list = field(default_factory=list)


def compatibility(v_a, v_b, cfg):
    """True iff a 1x1-conv (rank 4) or linear (rank 2) stitch can translate
    v_a's output into v_b's feature space."""
    if v_a.kind in NEVER_MATCHED_KINDS or v_b.kind in NEVER_MATCHED_KINDS:
        return False
    ra = v_a.attrs.get("rank")
    rb = v_b.attrs.get("rank")
    if ra is None or rb is None or ra != rb:
        return False
    if ra not in (2, 4):
        return False
    if cfg.require_same_scale and v_a.scale != v_b.scale:
        return False
    if ra == 4 and v_a.attrs.get("spatial") != v_b.attrs.get("spatial"):
        return False
    return True


def similarity_matrix(a, b, cfg):
    prog_a = annotate_progress(a)
    prog_b = annotate_progress(b)
    rows = [n for n in a.ordered_nodes()]
    cols = [n for n in b.ordered_nodes()]
    deg_in_a = {nid: len(a.producers_of(nid)) for nid in a.nodes}
    deg_out_a = {nid: len(a.consumers_of(nid)) for nid in a.nodes}
    deg_in_b = {nid: len(b.producers_of(nid)) for nid in b.nodes}
    deg_out_b = {nid: len(b.consumers_of(nid)) for nid in b.nodes}
    values = np.full((len(rows), len(cols)), -1.0)
    for i, na in enumerate(rows):
        pa = prog_a[na.id].progress
        for j, nb in enumerate(cols):
            if not compatibility(na, nb, cfg):
                continue
            pb = prog_b[nb.id].progress
            s = 1.0 - cfg.c * (pa - pb) ** 2
            if cfg.cardinality_bonus:
                s += deg_in_a[na.id] * deg_in_b[nb.id]
                s += deg_out_a[na.id] * deg_out_b[nb.id]
            values[i, j] = s
    return SimilarityMatrix(
        row_ids=[n.id for n in rows],
        col_ids=[n.id for n in cols],
        values=values,
        row_progress={n.id: prog_a[n.id].progress for n in rows},
        col_progress={n.id: prog_b[n.id].progress for n in cols},
    )


# ---------------------------------------------------------------------------
# alignment DP

def _forward_scores(values):
    """Last row of the alignment DP over the given (sub)matrix; O(cols) memory."""
    n, m = values.shape
    prev = np.zeros(m + 1)
    for i in range(n):
        cur = np.empty(m + 1)
        cur[0] = 0.0
        row = values[i]
        for j in range(1, m + 1):
            best = max(prev[j], cur[j - 1])
            s = row[j - 1]
            if s > 0.0:
                best = max(best, prev[j - 1] + s)
            cur[j] = best
        prev = cur
    return prev


def _align_small(values, row_off, col_off, out_pairs):
    """Direct quadratic-space DP with traceback, used on small blocks."""
    n, m = values.shape
    if n == 0 or m == 0:
        return
    dp = np.zeros((n + 1, m + 1))
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = max(dp[i - 1][j], dp[i][j - 1])
            s = values[i - 1, j - 1]
            if s > 0.0 and dp[i - 1][j - 1] + s > best:
                best = dp[i - 1][j - 1] + s
            dp[i][j] = best
    # traceback preferring pairs with the smallest row index, then column
    i, j = n, m
    rev = []
    while i > 0 and j > 0:
        s = values[i - 1, j - 1]
        if dp[i][j] == dp[i - 1][j]:
            i -= 1
        elif dp[i][j] == dp[i][j - 1]:
            j -= 1
        else:
            assert s > 0.0 and dp[i][j] == dp[i - 1][j - 1] + s
            rev.append((row_off + i - 1, col_off + j - 1))
            i -= 1
            j -= 1
    out_pairs.extend(reversed(rev))


def _hirschberg(values, row_off, col_off, out_pairs):
    n, m = values.shape
    if n == 0 or m == 0:
        return
    if n <= 2 or m <= 2:
        _align_small(values, row_off, col_off, out_pairs)
        return
    mid = n // 2
    f = _forward_scores(values[:mid])
    g = _forward_scores(values[mid:][::-1, ::-1])[::-1]
    split = int(np.argmax(f + g))  # first maximizer: deterministic
    _hirschberg(values[:mid, :split], row_off, col_off, out_pairs)
    _hirschberg(values[mid:, split:], row_off + mid, col_off + split, out_pairs)


def hirschberg_match(s):
    """Non-crossing matching maximizing total similarity; linear memory in
    the scoring passes. Pairs with non-positive similarity are never taken."""
    if s.values.size == 0:
        raise ValueError("empty similarity matrix")
    idx_pairs = []
    _hirschberg(s.values, 0, 0, idx_pairs)
    pairs = [(s.row_ids[i], s.col_ids[j]) for i, j in idx_pairs]
    pair_scores = [float(s.values[i, j]) for i, j in idx_pairs]
    return MatchingResult(pairs=pairs, score=float(sum(pair_scores)),
                          pair_scores=pair_scores)


def full_dp_score(values):
    """Quadratic-space oracle for the optimal alignment score."""
    return float(_forward_scores(values)[-1])


def validate_acyclic(a, b, m):
    """Check that stitching every matched pair bidirectionally leaves the
    combined graph acyclic. Stitches forward v_A's output to v_B's
    consumers and vice versa, which is what combine() builds."""
    for a_id, b_id in m.pairs:
        if a_id not in a.nodes or b_id not in b.nodes:
            raise GraphError(f"matching references unknown nodes ({a_id}, {b_id})")
    succ = {}

    def key(side, nid):
        return (side, nid)

    for s, d, p in a.edges:
        succ.setdefault(key(0, s), set()).add(key(0, d))
    for s, d, p in b.edges:
        succ.setdefault(key(1, s), set()).add(key(1, d))
    for a_id, b_id in m.pairs:
        # stitched activation of v_A feeds every consumer of v_B, and vice versa
        for d, p in b.consumers_of(b_id):
            succ.setdefault(key(0, a_id), set()).add(key(1, d))
        for d, p in a.consumers_of(a_id):
            succ.setdefault(key(1, b_id), set()).add(key(0, d))

    nodes = [key(0, nid) for nid in a.nodes] + [key(1, nid) for nid in b.nodes]
    indeg = {n: 0 for n in nodes}
    for s, ds in succ.items():
        for d in ds:
            indeg[d] += 1
    stack = [n for n in nodes if indeg[n] == 0]
    seen = 0
    while stack:
        n = stack.pop()
        seen += 1
        for d in succ.get(n, ()):
            indeg[d] -= 1
            if indeg[d] == 0:
                stack.append(d)
    return seen == len(nodes)


def export_matching_report(s, m, path):
    """Write pairs, similarities and progress values as a JSON report."""
    doc = {
        "total_score": m.score,
        "pairs": [
            {
                "a_node": a_id,
                "b_node": b_id,
                "similarity": score,
                "a_progress": s.row_progress.get(a_id),
                "b_progress": s.col_progress.get(b_id),
            }
            for (a_id, b_id), score in zip(m.pairs, m.pair_scores)
        ],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
    return doc
