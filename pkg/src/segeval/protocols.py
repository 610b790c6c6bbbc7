"""Category matching (image-level co-occurrence + Hungarian) and k-NN distance matching."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .formats import IGNORE
from .labelgen import resize_nearest
from .tensor import normalize_rows, pixels

DEFAULT_K = 10


def build_matching_matrix(pred_sets, gt_sets, n_categories) -> np.ndarray:
    """``S[i-1, j-1]`` = number of images whose predicted set holds ``i`` and gt set holds ``j``."""
    if len(pred_sets) != len(gt_sets):
        raise ValueError("need one predicted set per gt set")
    s = np.zeros((n_categories, n_categories), dtype=np.int64)
    for k, (p, g) in enumerate(zip(pred_sets, gt_sets)):
        p = np.array(sorted(p), dtype=np.int64)
        g = np.array(sorted(g), dtype=np.int64)
        for ids in (p, g):
            if ids.size and (ids.min() < 1 or ids.max() > n_categories):
                raise ValueError(f"image {k}: category id outside 1..{n_categories}")
        if p.size and g.size:
            s[np.ix_(p - 1, g - 1)] += 1
    return s


def _dual_potentials(cost: np.ndarray, row_to_col: np.ndarray):
    """Potentials ``u, v`` with ``cost - u[:, None] - v >= 0``, tight on an optimal assignment.

    ``v`` is the shortest-path distance over columns with edge ``f(i) -> j``
    weighted ``cost[i, j] - cost[i, f(i)]``; optimality rules out negative
    cycles, so Bellman-Ford settles within ``n`` rounds. Integer arithmetic
    keeps the tight set exact.
    """
    n = cost.shape[0]
    own = cost[np.arange(n), row_to_col]
    step = cost - own[:, None]
    v = np.zeros(n, dtype=np.int64)
    for _ in range(n + 1):
        nv = np.minimum(v, (step + v[row_to_col][:, None]).min(axis=0))
        if np.array_equal(nv, v):
            break
        v = nv
    else:
        raise ValueError("assignment is not optimal: negative cycle in the residual graph")
    u = own - v[row_to_col]
    return u, v


def _lexicographic_refine(tight: np.ndarray, row_to_col: np.ndarray) -> np.ndarray:
    """Smallest-first perfect matching inside the tight-edge graph.

    Every optimal assignment uses only tight edges of an optimal dual, so
    fixing rows in order to their smallest feasible tight column yields the
    lexicographically smallest optimal assignment.
    """
    n = tight.shape[0]
    match_row = row_to_col.copy()
    match_col = np.empty(n, dtype=np.int64)
    match_col[match_row] = np.arange(n)
    fixed_row = np.zeros(n, dtype=bool)
    fixed_col = np.zeros(n, dtype=bool)
    neighbours = [np.flatnonzero(tight[i]) for i in range(n)]

    for i in range(n):
        fixed_row[i] = True
        for j in neighbours[i]:
            if fixed_col[j]:
                continue
            if match_row[i] == j:
                break
            # Give j to i; its current owner must reach i's old column along
            # an alternating path through unfixed rows and columns.
            target = match_row[i]
            start = match_col[j]
            parent = {start: -1}
            via = {}
            queue = [start]
            found = None
            while queue and found is None:
                nxt = []
                for r in queue:
                    for k in neighbours[r]:
                        if fixed_col[k] or k == j:
                            continue
                        if k == target:
                            found = r
                            break
                        owner = match_col[k]
                        if owner in parent or fixed_row[owner]:
                            continue
                        parent[owner] = r
                        via[owner] = k
                        nxt.append(owner)
                    if found is not None:
                        break
                queue = nxt
            if found is None:
                continue
            col, r = target, found
            while r != -1:
                prev_col = via.get(r)
                match_row[r] = col
                match_col[col] = r
                col = prev_col
                r = parent[r]
            match_row[i] = j
            match_col[j] = i
            break
        fixed_col[match_row[i]] = True
    return match_row


@dataclass
class CategoryBijection:
    """Maps generated ids 1..C onto ground-truth ids 1..C; 0 and ignore map to themselves."""

    mapping: np.ndarray  # mapping[i - 1] = gt id of generated id i
    total: int = 0

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        n = m.size
        if sorted(m.tolist()) != list(range(1, n + 1)):
            raise ValueError("mapping is not a permutation of 1..C")
        self.mapping = m

    @property
    def n_categories(self) -> int:
        return int(self.mapping.size)

    def __call__(self, gen_id: int) -> int:
        if gen_id in (0, IGNORE):
            return gen_id
        return int(self.mapping[gen_id - 1])

    def is_identity(self) -> bool:
        return bool(np.all(self.mapping == np.arange(1, self.mapping.size + 1)))

    def to_text(self) -> str:
        return "".join(f"{i} -> {j}\n" for i, j in enumerate(self.mapping.tolist(), start=1))

    @classmethod
    def from_text(cls, text: str) -> "CategoryBijection":
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                a, b = (int(x) for x in line.split("->"))
            except ValueError:
                raise ValueError(f"line {lineno}: expected 'gen_id -> gt_id'") from None
            if a in pairs:
                raise ValueError(f"line {lineno}: generated id {a} mapped twice")
            pairs[a] = b
        n = len(pairs)
        if sorted(pairs) != list(range(1, n + 1)):
            raise ValueError("mapping must cover generated ids 1..C")
        return cls(np.array([pairs[i] for i in range(1, n + 1)]))


def hungarian_max(s) -> CategoryBijection:
    """Bijection maximising ``sum_i S[i, f(i)]``; ties go to the lexicographically smallest f."""
    s = np.asarray(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] == 0:
        raise ValueError(f"matching matrix must be square and non-empty, got {s.shape}")
    if not np.issubdtype(s.dtype, np.integer):
        if not np.all(s == np.round(s)):
            raise ValueError("matching matrix must hold integer counts")
    s = s.astype(np.int64)
    cost = s.max() - s
    _, row_to_col = linear_sum_assignment(cost)
    u, v = _dual_potentials(cost, row_to_col)
    tight = (cost - u[:, None] - v[None, :]) == 0
    best = _lexicographic_refine(tight, row_to_col)
    total = int(s[np.arange(s.shape[0]), best].sum())
    return CategoryBijection(best + 1, total)


def relabel_mask(pred, f: CategoryBijection) -> np.ndarray:
    pred = np.asarray(pred)
    lut = np.full(IGNORE + 1, -1, dtype=np.int64)
    lut[0] = 0
    lut[IGNORE] = IGNORE
    lut[1:f.n_categories + 1] = f.mapping
    out = lut[pred.astype(np.int64)]
    if np.any(out < 0):
        bad = int(pred[out < 0].max())
        raise ValueError(f"generated id {bad} has no mapping")
    return out.astype(np.uint16)


def predicted_categories(pred, n_categories=None) -> set:
    ids = {int(k) for k in np.unique(np.asarray(pred))}
    ids -= {0, IGNORE}
    return ids


# -- distance matching ------------------------------------------------------

@dataclass
class EmbeddingBank:
    vectors: np.ndarray
    labels: np.ndarray
    image_ids: list = field(default_factory=list)
    dim: int = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.dim is None:
            self.dim = self.vectors.shape[1] if self.vectors.ndim == 2 else 0
        if self.vectors.size == 0:
            self.vectors = self.vectors.reshape(0, self.dim)
        if len(self.labels) != len(self.vectors) or len(self.image_ids) != len(self.vectors):
            raise ValueError("bank columns have different lengths")

    def __len__(self):
        return len(self.labels)


def build_bank(train, image_ids=None) -> EmbeddingBank:
    """One mean embedding per (image, category present), ``other`` included.

    ``train`` yields ``(embedding L x H x W, mask)`` pairs; masks are resized
    to the embedding grid by nearest neighbour first.
    """
    vectors, labels, ids = [], [], []
    dim = None
    for k, (z, mask) in enumerate(train):
        z = np.asarray(z, dtype=np.float64)
        dim = z.shape[0]
        grid = resize_nearest(mask, z.shape[2], z.shape[1]).ravel()
        feats = pixels(z)
        for c in np.unique(grid):
            if c == IGNORE:
                continue
            vectors.append(feats[grid == c].mean(axis=0))
            labels.append(int(c))
            ids.append(image_ids[k] if image_ids is not None else str(k))
    if not vectors:
        return EmbeddingBank(np.zeros((0, dim or 0)), np.zeros(0, dtype=np.int64), [], dim=dim or 0)
    return EmbeddingBank(np.vstack(vectors), np.array(labels), ids)


def knn_assign(query, bank: EmbeddingBank, k=DEFAULT_K, chunk=1024) -> np.ndarray:
    """Label every pixel by majority vote over its top-k cosine neighbours in the bank.

    Vote ties go to the larger summed similarity, then the smaller label.
    """
    if len(bank) == 0:
        raise ValueError("embedding bank is empty")
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > len(bank):
        warnings.warn(f"k={k} exceeds bank size {len(bank)}; clamping", stacklevel=2)
        k = len(bank)
    z = np.asarray(query, dtype=np.float64)
    if z.shape[0] != bank.dim:
        raise ValueError(f"query has {z.shape[0]} channels, bank has {bank.dim}")
    _, h, w = z.shape
    q = normalize_rows(pixels(z))
    b = normalize_rows(bank.vectors)
    classes, bank_cls = np.unique(bank.labels, return_inverse=True)
    out = np.empty(q.shape[0], dtype=np.int64)
    for lo in range(0, q.shape[0], chunk):
        sims = q[lo:lo + chunk] @ b.T
        top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        top_sims = np.take_along_axis(sims, top, axis=1)
        top_cls = bank_cls[top]
        n = top.shape[0]
        counts = np.zeros((n, classes.size), dtype=np.int64)
        simsum = np.zeros((n, classes.size))
        rows = np.repeat(np.arange(n), k)
        np.add.at(counts, (rows, top_cls.ravel()), 1)
        np.add.at(simsum, (rows, top_cls.ravel()), top_sims.ravel())
        cand = counts == counts.max(axis=1, keepdims=True)
        ss = np.where(cand, simsum, -np.inf)
        cand &= ss == ss.max(axis=1, keepdims=True)
        out[lo:lo + chunk] = classes[np.argmax(cand, axis=1)]
    return out.reshape(h, w).astype(np.uint16)
