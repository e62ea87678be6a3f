"""Probability volume -> point cloud -> DBSCAN -> largest cluster -> orthogonal union."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter1d
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

NOISE = -1
_UNSET = 2 ** 62  # exactly representable as float, so safe as a filter fill value
PAIR_CHUNK = 4_000_000


class NoClusterWarning(UserWarning):
    pass


@dataclass
class PointCloud:
    """Suprathreshold voxels, kept sorted by (il, xl, t) with unique triples."""

    il: np.ndarray
    xl: np.ndarray
    t: np.ndarray
    prob: np.ndarray
    dims: tuple[int, int, int]
    source: str = "inline"

    def __post_init__(self):
        self.il = np.asarray(self.il, dtype=np.int64).reshape(-1)
        self.xl = np.asarray(self.xl, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.prob = np.asarray(self.prob, dtype=np.float64).reshape(-1)
        self.dims = tuple(int(d) for d in self.dims)
        n = len(self.il)
        if not (len(self.xl) == len(self.t) == len(self.prob) == n):
            raise ValueError("point cloud columns differ in length")
        if n:
            for arr, d, name in ((self.il, self.dims[0], "il"), (self.xl, self.dims[1], "xl"),
                                 (self.t, self.dims[2], "t_index")):
                if arr.min() < 0 or arr.max() >= d:
                    raise ValueError(f"{name} outside volume extent {d}")
            order = np.lexsort((self.t, self.xl, self.il))
            self.il, self.xl, self.t, self.prob = self.il[order], self.xl[order], self.t[order], self.prob[order]
            key = self.keys()
            if np.any(key[1:] == key[:-1]):
                raise ValueError("duplicate (il, xl, t_index) triples in point cloud")

    def __len__(self) -> int:
        return len(self.il)

    def keys(self) -> np.ndarray:
        """Linear voxel index of each point (monotone in canonical order)."""
        return np.ravel_multi_index((self.il, self.xl, self.t), self.dims)

    def coords(self) -> np.ndarray:
        return np.stack([self.il, self.xl, self.t], axis=1)

    def subset(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(self.il[mask], self.xl[mask], self.t[mask], self.prob[mask], self.dims, self.source)

    @classmethod
    def empty(cls, dims, source="merged") -> "PointCloud":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, np.zeros(0), dims, source)


@dataclass(frozen=True)
class DbscanParams:
    epsilon: float = 6.0
    min_pts: int = 25
    z_factor: float = 3.0
    tau: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0 or self.min_pts < 1 or self.z_factor <= 0 or not 0 < self.tau < 1:
            raise ValueError(f"invalid DBSCAN parameters {self}")


@dataclass
class ClusterLabeling:
    labels: np.ndarray  # cluster id per point, NOISE for noise
    core: np.ndarray  # bool per point

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0


def extract_point_cloud(prob: np.ndarray, tau: float = DbscanParams.tau, source: str = "inline") -> PointCloud:
    """Every voxel with probability strictly above ``tau``."""
    prob = np.asarray(prob)
    il, xl, t = np.nonzero(prob > tau)
    return PointCloud(il, xl, t, prob[il, xl, t].astype(np.float64), prob.shape, source)


def scaled_coords(cloud: PointCloud, z_factor: float) -> np.ndarray:
    return np.stack([cloud.il.astype(np.float64), cloud.xl.astype(np.float64), cloud.t / z_factor], axis=1)


def squared_distance(d_il, d_xl, d_t, z_factor: float):
    """Squared clustering distance from integer offsets; every DBSCAN path uses this exact formula."""
    d_il, d_xl, d_t = (np.asarray(v, dtype=np.int64) for v in (d_il, d_xl, d_t))
    return (d_il * d_il + d_xl * d_xl).astype(np.float64) + (d_t / z_factor) ** 2


def _neighbor_pairs(cloud: PointCloud, eps: float, z_factor: float):
    """Yield chunks (i, j) of all ordered pairs within ``eps``, self-pairs included.

    Points are binned on a grid of cell size ``eps`` in scaled coordinates;
    only the 27 surrounding cells are searched.
    """
    n = len(cloud)
    if n == 0:
        return
    pts = scaled_coords(cloud, z_factor)
    cell = np.floor(pts / eps).astype(np.int64)
    cell -= cell.min(axis=0)
    ext = cell.max(axis=0) + 3
    code = ((cell[:, 0] + 1) * ext[1] + (cell[:, 1] + 1)) * ext[2] + (cell[:, 2] + 1)
    order = np.argsort(code, kind="stable")
    sorted_code = code[order]
    ucode, start, count = np.unique(sorted_code, return_index=True, return_counts=True)
    eps2 = eps * eps
    for d0 in (-1, 0, 1):
        for d1 in (-1, 0, 1):
            for d2 in (-1, 0, 1):
                off = (d0 * ext[1] + d1) * ext[2] + d2
                target = ucode + off
                pos = np.searchsorted(ucode, target)
                pos = np.minimum(pos, len(ucode) - 1)
                hit = ucode[pos] == target
                a_cells = np.nonzero(hit)[0]
                b_cells = pos[hit]
                if not len(a_cells):
                    continue
                na, nb = count[a_cells], count[b_cells]
                sizes = na * nb
                # process cell pairs in groups bounded by PAIR_CHUNK pairs
                bounds = np.cumsum(sizes)
                lo = 0
                while lo < len(a_cells):
                    base = bounds[lo - 1] if lo else 0
                    hi = int(np.searchsorted(bounds, base + PAIR_CHUNK, side="right"))
                    hi = max(hi, lo + 1)
                    sa, sb = start[a_cells[lo:hi]], start[b_cells[lo:hi]]
                    ca, cb = na[lo:hi], nb[lo:hi]
                    sz = ca * cb
                    tot = int(sz.sum())
                    grp = np.repeat(np.arange(hi - lo), sz)
                    within = np.arange(tot) - np.repeat(np.cumsum(sz) - sz, sz)
                    ia = sa[grp] + within // cb[grp]
                    ib = sb[grp] + within % cb[grp]
                    i, j = order[ia], order[ib]
                    d2 = squared_distance(cloud.il[i] - cloud.il[j], cloud.xl[i] - cloud.xl[j],
                                          cloud.t[i] - cloud.t[j], z_factor)
                    keep = d2 <= eps2
                    yield i[keep], j[keep]
                    lo = hi


def ball_columns(eps: float, z_factor: float) -> list[tuple[int, int, int]]:
    """(d_il, d_xl, h): the eps-ball as vertical runs |d_t| <= h over each (d_il, d_xl) offset."""
    r = int(np.floor(eps))
    cols = []
    for a in range(-r, r + 1):
        for b in range(-r, r + 1):
            if squared_distance(a, b, 0, z_factor) > eps * eps:
                continue
            h = int(np.floor(z_factor * np.sqrt(max(eps * eps - a * a - b * b, 0.0))))
            while squared_distance(a, b, h + 1, z_factor) <= eps * eps:
                h += 1
            while h > 0 and squared_distance(a, b, h, z_factor) > eps * eps:
                h -= 1
            cols.append((a, b, h))
    return cols


def _shift_slices(n: int, d: int) -> tuple[slice, slice]:
    """Destination/source slices so that dst[i] pairs with src[i + d]."""
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def _ball_reduce(grid: np.ndarray, cols, kind: str) -> np.ndarray:
    """Sum or minimum of ``grid`` over the eps-ball around every voxel (outside counts as empty)."""
    nx, ny, nt = grid.shape
    cache = {}
    if kind == "sum":
        cum = np.zeros((nx, ny, nt + 1), dtype=np.int64)
        np.cumsum(grid, axis=2, out=cum[:, :, 1:])
        t = np.arange(nt)
    big = _UNSET

    def run(h):
        if h not in cache:
            if kind == "sum":
                cache[h] = cum[:, :, np.minimum(t + h + 1, nt)] - cum[:, :, np.maximum(t - h, 0)]
            else:
                cache[h] = minimum_filter1d(grid, 2 * h + 1, axis=2, mode="constant", cval=big)
        return cache[h]

    out = np.zeros(grid.shape, dtype=np.int64) if kind == "sum" else np.full(grid.shape, big, dtype=np.int64)
    for a, b, h in cols:
        if abs(a) >= nx or abs(b) >= ny:
            continue
        (dx, sx), (dy, sy) = _shift_slices(nx, a), _shift_slices(ny, b)
        src = run(h)[sx, sy]
        if kind == "sum":
            out[dx, dy] += src
        else:
            np.minimum(out[dx, dy], src, out=out[dx, dy])
    return out


def _dbscan_grid(cloud: PointCloud, params: DbscanParams) -> tuple[np.ndarray, np.ndarray]:
    """Voxel-grid DBSCAN: ball sums give core counts, ball minima propagate component labels.

    Exact for integer coordinates; cost scales with the bounding box rather
    than with the number of neighbour pairs, which wins on dense clouds.
    """
    lo = np.array([cloud.il.min(), cloud.xl.min(), cloud.t.min()])
    shape = tuple(int(v) for v in np.array([cloud.il.max(), cloud.xl.max(), cloud.t.max()]) - lo + 1)
    flat = np.ravel_multi_index((cloud.il - lo[0], cloud.xl - lo[1], cloud.t - lo[2]), shape)
    cols = ball_columns(params.epsilon, params.z_factor)
    occ = np.zeros(int(np.prod(shape)), dtype=np.int64)
    occ[flat] = 1
    counts = _ball_reduce(occ.reshape(shape), cols, "sum").reshape(-1)[flat]
    core = counts >= params.min_pts
    big = _UNSET

    is_core = np.zeros(occ.size, dtype=bool)
    is_core[flat[core]] = True
    lab = np.full(occ.size, big, dtype=np.int64)
    lab[flat[core]] = flat[core]
    # lowest core voxel in reach; voxel order equals point order
    anchor = _ball_reduce(lab.reshape(shape), cols, "min").reshape(-1)
    comp = np.where(is_core, anchor, big)
    while True:
        # pointer jumping, then one more ball pass to see whether anything changes
        while True:
            nxt = comp.copy()
            nxt[is_core] = np.minimum(comp[is_core], comp[comp[is_core]])
            if np.array_equal(nxt, comp):
                break
            comp = nxt
        nxt = np.where(is_core, _ball_reduce(comp.reshape(shape), cols, "min").reshape(-1), big)
        if np.array_equal(nxt, comp):
            break
        comp = nxt

    labels = np.full(len(cloud), NOISE, dtype=np.int64)
    labels[core] = comp[flat[core]]
    border = ~core & (anchor[flat] != big)
    labels[border] = comp[anchor[flat[border]]]
    return labels, core


def _dbscan_pairs(cloud: PointCloud, params: DbscanParams) -> tuple[np.ndarray, np.ndarray]:
    n = len(cloud)
    counts = np.zeros(n, dtype=np.int64)
    for i, _ in _neighbor_pairs(cloud, params.epsilon, params.z_factor):
        counts += np.bincount(i, minlength=n)
    core = counts >= params.min_pts

    comp = np.arange(n)  # component representative per point (cores only meaningful)
    big = np.iinfo(np.int64).max
    border_anchor = np.full(n, big, dtype=np.int64)
    for i, j in _neighbor_pairs(cloud, params.epsilon, params.z_factor):
        cc = core[i] & core[j] & (i < j)
        if cc.any():
            a, b = comp[i[cc]], comp[j[cc]]
            diff = a != b
            if diff.any():
                comp = _merge(comp, a[diff], b[diff])
        bc = ~core[i] & core[j]
        if bc.any():
            np.minimum.at(border_anchor, i[bc], j[bc])

    labels = np.full(n, NOISE, dtype=np.int64)
    labels[core] = comp[core]
    border = ~core & (border_anchor != big)
    labels[border] = comp[border_anchor[border]]
    return labels, core


def _prefer_grid(cloud: PointCloud, params: DbscanParams) -> bool:
    n = len(cloud)
    box = float(np.prod([np.ptp(cloud.il) + 1, np.ptp(cloud.xl) + 1, np.ptp(cloud.t) + 1]))
    cols = ball_columns(params.epsilon, params.z_factor)
    ball = sum(2 * h + 1 for _, _, h in cols)
    # expected pair count vs. voxel work of roughly ten ball passes
    return n * n * ball / box > 10.0 * len(cols) * box


def dbscan(cloud: PointCloud, params: DbscanParams = DbscanParams(), method: str = "auto") -> ClusterLabeling:
    """DBSCAN on (il, xl, t / z_factor) with a closed eps-ball.

    A point is core when its ball holds at least ``min_pts`` points, itself
    included. A border point joins the cluster of the lowest-index core point
    within reach. Cluster ids are numbered by each cluster's lowest point index.
    ``method`` picks pair enumeration ("pairs"), the voxel grid ("grid"), or
    whichever is cheaper for the cloud's density ("auto"); all give identical labels.
    """
    if len(cloud) == 0:
        return ClusterLabeling(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool))
    if method == "auto":
        method = "grid" if _prefer_grid(cloud, params) else "pairs"
    if method == "grid":
        labels, core = _dbscan_grid(cloud, params)
    elif method == "pairs":
        labels, core = _dbscan_pairs(cloud, params)
    else:
        raise ValueError(f"unknown DBSCAN method {method!r}")
    return ClusterLabeling(_canonical(labels), core)


def _merge(comp: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Union the components containing each (a, b) pair; representatives become the min index."""
    n = len(comp)
    edges_r = np.concatenate([a, np.arange(n)])
    edges_c = np.concatenate([b, comp])
    g = coo_matrix((np.ones(len(edges_r), dtype=np.int8), (edges_r, edges_c)), shape=(n, n))
    _, lab = connected_components(g, directed=False)
    rep = np.full(lab.max() + 1, n, dtype=np.int64)
    np.minimum.at(rep, lab, np.arange(n))
    return rep[lab]


def _canonical(labels: np.ndarray) -> np.ndarray:
    out = np.full_like(labels, NOISE)
    member = labels != NOISE
    if not member.any():
        return out
    ids, first = np.unique(labels[member], return_index=True)
    # first occurrence in point order == lowest member index
    idx_of_member = np.nonzero(member)[0]
    rank = np.argsort(np.argsort(idx_of_member[first]))
    out[member] = rank[np.searchsorted(ids, labels[member])]
    return out


def dbscan_reference(cloud: PointCloud, params: DbscanParams = DbscanParams()) -> ClusterLabeling:
    """O(n^2) DBSCAN used as an oracle: dense distance matrix plus BFS over core points."""
    n = len(cloud)
    if n == 0:
        return ClusterLabeling(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool))
    c = cloud.coords()
    diff = c[:, None, :] - c[None, :, :]
    adj = squared_distance(diff[..., 0], diff[..., 1], diff[..., 2], params.z_factor) <= params.epsilon ** 2
    core = adj.sum(1) >= params.min_pts
    labels = np.full(n, NOISE, dtype=np.int64)
    next_id = 0
    for s in range(n):
        if not core[s] or labels[s] != NOISE:
            continue
        labels[s] = next_id
        stack = [s]
        while stack:
            p = stack.pop()
            for q in np.nonzero(adj[p] & core)[0]:
                if labels[q] == NOISE:
                    labels[q] = next_id
                    stack.append(q)
        next_id += 1
    for p in np.nonzero(~core)[0]:
        reach = np.nonzero(adj[p] & core)[0]
        if len(reach):
            labels[p] = labels[reach.min()]
    return ClusterLabeling(_canonical(labels), core)


def retain_largest_cluster(cloud: PointCloud, labeling: ClusterLabeling) -> PointCloud:
    """Points of the most populous cluster; ties go to the lower cluster id."""
    if len(labeling.labels) != len(cloud):
        raise ValueError("labeling does not cover the cloud")
    if labeling.n_clusters == 0:
        warnings.warn("DBSCAN found no clusters; returning an empty cloud", NoClusterWarning, stacklevel=2)
        return cloud.subset(np.zeros(len(cloud), dtype=bool))
    sizes = np.bincount(labeling.labels[labeling.labels >= 0], minlength=labeling.n_clusters)
    best = int(np.argmax(sizes))
    return cloud.subset(labeling.labels == best)


def filter_cloud(cloud: PointCloud, params: DbscanParams = DbscanParams()) -> tuple[PointCloud, ClusterLabeling]:
    labeling = dbscan(cloud, params)
    return retain_largest_cluster(cloud, labeling), labeling


def fuse_orthogonal(p_inline: PointCloud, p_xline: PointCloud) -> PointCloud:
    """Set union on (il, xl, t); a voxel present in both keeps the larger probability."""
    if p_inline.dims != p_xline.dims:
        raise ValueError(f"cannot fuse clouds over {p_inline.dims} and {p_xline.dims}")
    keys = np.concatenate([p_inline.keys(), p_xline.keys()])
    prob = np.concatenate([p_inline.prob, p_xline.prob])
    order = np.lexsort((-prob, keys))
    keys, prob = keys[order], prob[order]
    first = np.ones(len(keys), dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    il, xl, t = np.unravel_index(keys[first], p_inline.dims)
    return PointCloud(il, xl, t, prob[first], p_inline.dims, "merged")
