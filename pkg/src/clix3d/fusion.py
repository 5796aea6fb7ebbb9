"""Voxelization, multi-stage voxel-to-pixel correspondence, patch pooling and feature fusion.

Stage ``i`` voxels are the stage-1 voxels pooled by integer stride ``2**(i-1)``.
Correspondences are computed from voxel mean coordinates after mapping them
back through the augmentation ledger, so augmented and clean views of the
same points land on the same image patches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .augment import AugLedger, reverse_coords


# --- voxelization ---------------------------------------------------------------------

def grid_extents(voxel_size, pc_range) -> np.ndarray:
    size = np.asarray(voxel_size, dtype=np.float64)
    r = np.asarray(pc_range, dtype=np.float64)
    return np.round((r[3:] - r[:3]) / size).astype(np.int64)


@dataclass
class VoxelGrid:
    voxel_size: np.ndarray
    pc_range: np.ndarray
    extents: np.ndarray
    coords: np.ndarray          # (M, 3) integer indices, sorted by linear index
    means: np.ndarray           # (M, 3) mean point coordinate
    counts: np.ndarray          # (M,)
    intensity: np.ndarray       # (M,) mean intensity
    pasted: np.ndarray          # (M,) any member point was pasted
    point_voxel: np.ndarray     # (N,) voxel of each input point, -1 when dropped

    def __len__(self):
        return len(self.coords)

    def centers(self) -> np.ndarray:
        """Geometric cell centers (not point means)."""
        return self.pc_range[:3] + (self.coords + 0.5) * self.voxel_size


def voxelize(points, voxel_size, pc_range, pasted=None) -> VoxelGrid:
    """Bucket points by ``floor((p - min) / voxel_size)``; out-of-range points are dropped."""
    size = np.asarray(voxel_size, dtype=np.float64)
    if size.shape != (3,) or np.any(size <= 0):
        raise ValueError("voxel_size must be 3 positive numbers")
    r = np.asarray(pc_range, dtype=np.float64)
    ext = grid_extents(size, r)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, np.shape(points)[-1] if np.ndim(points) == 2 else 4)
    n = len(pts)
    pasted = np.zeros(n, dtype=bool) if pasted is None else np.asarray(pasted, dtype=bool)
    idx = np.floor((pts[:, :3] - r[:3]) / size).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < ext), axis=1)
    lin = (idx[:, 0] * ext[1] + idx[:, 1]) * ext[2] + idx[:, 2]
    point_voxel = np.full(n, -1, dtype=np.int64)
    if not ok.any():
        z3 = np.zeros((0, 3))
        return VoxelGrid(size, r, ext, np.zeros((0, 3), np.int64), z3, np.zeros(0, np.int64),
                         np.zeros(0), np.zeros(0, bool), point_voxel)
    keys, inv = np.unique(lin[ok], return_inverse=True)
    point_voxel[ok] = inv
    m = len(keys)
    counts = np.bincount(inv, minlength=m)
    means = np.stack([np.bincount(inv, weights=pts[ok, d], minlength=m) for d in range(3)], axis=1)
    means /= counts[:, None]
    inten = np.bincount(inv, weights=pts[ok, 3], minlength=m) / counts if pts.shape[1] > 3 else np.zeros(m)
    pst = np.bincount(inv, weights=pasted[ok].astype(np.float64), minlength=m) > 0
    coords = np.stack([keys // (ext[1] * ext[2]), (keys // ext[2]) % ext[1], keys % ext[2]], axis=1)
    return VoxelGrid(size, r, ext, coords, means, counts, inten, pst, point_voxel)


# --- stage hierarchy --------------------------------------------------------------------

@dataclass
class StagePlan:
    dims: tuple = (16, 32, 64, 128)
    strides: tuple = (1, 2, 4, 8)
    patch_k: int = 3
    fuse_mask: tuple = (True, True, True, True)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.strides = tuple(int(s) for s in self.strides)
        self.fuse_mask = tuple(bool(f) for f in self.fuse_mask)
        n = len(self.dims)
        if n == 0 or len(self.strides) != n or len(self.fuse_mask) != n:
            raise ValueError("stage plan: dims, strides and fuse_mask need equal, non-zero length")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ValueError("stage plan: dims must be ascending")
        if self.strides[0] != 1 or any(b != 2 * a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError("stage plan: strides must be 1, 2, 4, ...")
        if self.patch_k < 1 or self.patch_k % 2 == 0:
            raise ValueError("stage plan: patch_k must be odd and >= 1")

    @property
    def n_stages(self) -> int:
        return len(self.dims)

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "strides": list(self.strides), "patch_k": self.patch_k,
                "fuse_mask": list(self.fuse_mask)}

    @classmethod
    def from_json(cls, d: dict) -> "StagePlan":
        base = cls()
        return cls(tuple(d.get("dims", base.dims)), tuple(d.get("strides", base.strides)),
                   int(d.get("patch_k", base.patch_k)), tuple(d.get("fuse_mask", base.fuse_mask)))


@dataclass
class StageVoxels:
    coords: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    pasted: np.ndarray
    child_parent: np.ndarray | None   # previous-stage voxel -> this-stage voxel


def _pool_stage(prev: StageVoxels) -> StageVoxels:
    coarse = prev.coords // 2
    if len(coarse) == 0:
        return StageVoxels(coarse, prev.means.copy(), prev.counts.copy(), prev.pasted.copy(),
                           np.zeros(0, np.int64))
    uniq, inv = np.unique(coarse, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inv, weights=prev.counts, minlength=m)
    means = np.stack([np.bincount(inv, weights=prev.means[:, d] * prev.counts, minlength=m)
                      for d in range(3)], axis=1) / counts[:, None]
    pasted = np.bincount(inv, weights=prev.pasted.astype(np.float64), minlength=m) > 0
    return StageVoxels(uniq, means, counts.astype(np.int64), pasted, inv)


def stage_hierarchy(grid: VoxelGrid, n_stages: int, means=None) -> list[StageVoxels]:
    """Stage voxel sets; ``means`` overrides the stage-1 mean coordinates."""
    m0 = grid.means if means is None else np.asarray(means, dtype=np.float64)
    stages = [StageVoxels(grid.coords, m0, grid.counts, grid.pasted, None)]
    for _ in range(1, n_stages):
        stages.append(_pool_stage(stages[-1]))
    return stages


# --- projection -------------------------------------------------------------------------

def scale_intrinsics(P, factor: float) -> np.ndarray:
    if not factor > 0:
        raise ValueError("scale factor must be > 0")
    out = np.array(P, dtype=np.float64, copy=True).reshape(3, 4)
    out[:2] *= factor
    return out


def feature_map_dims(image_dims, stride: int) -> tuple[int, int]:
    """Spatial size after repeated stride-2 convolutions with padding 1."""
    h, w = image_dims
    s = 1
    while s < stride:
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        s *= 2
    return h, w


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


@dataclass
class StageCorrespondence:
    center: np.ndarray   # (M, 2) (u, v) feature-map pixel
    lo: np.ndarray       # (M, 2) patch top-left, inclusive
    hi: np.ndarray       # (M, 2) patch bottom-right, exclusive
    valid: np.ndarray    # (M,)
    map_dims: tuple      # (H', W')

    def patch_sizes(self) -> np.ndarray:
        return np.where(self.valid, np.prod(np.maximum(self.hi - self.lo, 0), axis=1), 0)

    def same_as(self, other: "StageCorrespondence") -> bool:
        v = self.valid
        return (self.map_dims == other.map_dims and np.array_equal(v, other.valid)
                and np.array_equal(self.lo[v], other.lo[v]) and np.array_equal(self.hi[v], other.hi[v]))


@dataclass
class CorrespondenceMap:
    stages: list = field(default_factory=list)

    def same_as(self, other: "CorrespondenceMap") -> bool:
        return len(self.stages) == len(other.stages) and all(
            a.same_as(b) for a, b in zip(self.stages, other.stages))


def project_points_to_patches(xyz, P, map_dims, k: int, pasted=None) -> StageCorrespondence:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    H, W = map_dims
    uvw = xyz @ P[:, :3].T + P[:, 3]
    depth = uvw[:, 2]
    pos = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(pos, uvw[:, 0] / np.where(pos, depth, 1.0), -1e9)
        v = np.where(pos, uvw[:, 1] / np.where(pos, depth, 1.0), -1e9)
    u = np.clip(u, -1e9, 1e9)
    v = np.clip(v, -1e9, 1e9)
    center = np.stack([round_half_up(u), round_half_up(v)], axis=1)
    valid = pos & (center[:, 0] >= 0) & (center[:, 0] < W) & (center[:, 1] >= 0) & (center[:, 1] < H)
    if pasted is not None:
        valid &= ~np.asarray(pasted, dtype=bool)
    r = k // 2
    lo = np.maximum(center - r, 0)
    hi = np.minimum(center + r + 1, np.array([W, H]))
    return StageCorrespondence(center, lo, hi, valid, (H, W))


def project_voxels(grid: VoxelGrid, calib, image_dims, plan: StagePlan,
                   ledger: AugLedger | None = None) -> CorrespondenceMap:
    """Per-stage k x k patch assignment for every stage voxel.

    Stage-1 mean coordinates are reversed through ``ledger`` once; coarser
    stages use count-weighted means of their reversed children.
    """
    P = calib.P if hasattr(calib, "P") else np.asarray(calib, dtype=np.float64).reshape(3, 4)
    means = grid.means if ledger is None or not len(ledger) else reverse_coords(grid.means, ledger)
    stages = stage_hierarchy(grid, plan.n_stages, means)
    out = []
    for st, stride in zip(stages, plan.strides):
        dims = feature_map_dims(image_dims, stride)
        out.append(project_points_to_patches(st.means, scale_intrinsics(P, 1.0 / stride), dims,
                                             plan.patch_k, st.pasted))
    return CorrespondenceMap(out)


# --- pooling and fusion ---------------------------------------------------------------

def patch_pool(feature_map, lo, hi) -> np.ndarray:
    """Mean feature over the patch ``[lo, hi)`` given as (u, v) pairs."""
    fm = np.asarray(feature_map, dtype=np.float64)
    (u0, v0), (u1, v1) = lo, hi
    patch = fm[v0:v1, u0:u1]
    if patch.size == 0:
        raise ValueError("empty patch")
    return patch.reshape(-1, fm.shape[-1]).mean(axis=0)


def pooling_matrix(corr: StageCorrespondence) -> sp.csr_matrix:
    """Sparse ``(M, H' * W')`` averaging operator; invalid rows are all zero."""
    H, W = corr.map_dims
    m = len(corr.valid)
    rows = np.flatnonzero(corr.valid)
    if len(rows) == 0:
        return sp.csr_matrix((m, H * W))
    lo, hi = corr.lo[rows], corr.hi[rows]
    kmax = int(np.max(hi - lo)) if len(rows) else 1
    offs = np.arange(kmax)
    du, dv = np.meshgrid(offs, offs, indexing="xy")
    du, dv = du.ravel(), dv.ravel()
    pu = lo[:, 0:1] + du[None]
    pv = lo[:, 1:2] + dv[None]
    inside = (pu < hi[:, 0:1]) & (pv < hi[:, 1:2])
    cnt = inside.sum(axis=1)
    rr = np.broadcast_to(rows[:, None], inside.shape)[inside]
    cc = (pv * W + pu)[inside]
    vals = np.broadcast_to((1.0 / cnt)[:, None], inside.shape)[inside]
    return sp.csr_matrix((vals, (rr, cc)), shape=(m, H * W))


def pool_image_features(fmap: ad.Tensor, corr: StageCorrespondence) -> ad.Tensor:
    """Differentiable patch pooling of a ``(H', W', C)`` or ``(1, H', W', C)`` map."""
    H, W = corr.map_dims
    C = fmap.shape[-1]
    if fmap.shape[-3:-1] != (H, W):
        raise ValueError(f"feature map {fmap.shape} does not match correspondence dims {(H, W)}")
    return ad.sparse_matmul(pooling_matrix(corr), ad.reshape(fmap, (H * W, C)))


def fuse_features(voxel_feats: ad.Tensor, pooled_image_feats: ad.Tensor, valid,
                  W: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Project ``[voxel | image]`` rows back to the voxel width; invalid rows drop the image part."""
    n, cv = voxel_feats.shape
    if pooled_image_feats.shape[0] != n:
        raise ValueError("voxel and image feature counts differ")
    ci = pooled_image_feats.shape[1]
    if W.shape != (cv + ci, cv):
        raise ValueError(f"projection weight {W.shape} does not map {cv + ci} -> {cv}")
    mask = np.asarray(valid, dtype=np.float64).reshape(n, 1)
    img = ad.scale(pooled_image_feats, np.broadcast_to(mask, (n, ci)))
    return ad.linear(ad.concat([voxel_feats, img], axis=1), W, b)


# --- image encoder ----------------------------------------------------------------------

def init_image_encoder(plan: StagePlan, rng, in_channels: int = 3) -> dict:
    params = {}
    cin = in_channels
    for i, cout in enumerate(plan.dims):
        std = np.sqrt(2.0 / (9 * cin))
        params[f"img{i}.W"] = ad.parameter(rng.normal(0.0, std, (9 * cin, cout)), f"img{i}.W")
        params[f"img{i}.b"] = ad.parameter(np.zeros(cout), f"img{i}.b")
        cin = cout
    return params


def encode_image(image, params: dict, plan: StagePlan) -> list:
    """Per-stage ``(1, H', W', C_i)`` maps; stage 1 keeps full resolution, later stages halve it."""
    x = image if isinstance(image, ad.Tensor) else ad.constant(np.asarray(image)[None])
    maps = []
    for i in range(plan.n_stages):
        stride = 1 if i == 0 else 2
        x = ad.relu(ad.conv2d(x, params[f"img{i}.W"], params[f"img{i}.b"], stride=stride))
        maps.append(x)
    return maps
