"""Occupancy grids, exact signed distance fields and world-to-map projection.

Map coordinates are (u, v) = (column, row) in cell units with cell centres on
integer coordinates. ``homography`` maps homogeneous map coordinates to the
world plane; projection applies its inverse.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_FAR = 1e20


class ProjectionError(ValueError):
    pass


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Squared distance transform of a sampled function (lower envelope of parabolas)."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    z[0], z[1] = -np.inf, np.inf
    for q in range(1, n):
        fq = f[q] + q * q
        vk = v[k]
        s = (fq - (f[vk] + vk * vk)) / (2.0 * (q - vk))
        while s <= z[k]:  # z[0] = -inf stops the scan
            k -= 1
            vk = v[k]
            s = (fq - (f[vk] + vk * vk)) / (2.0 * (q - vk))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        dq = q - v[k]
        d[q] = dq * dq + f[v[k]]
    return d


def squared_edt(features: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance from every cell to the nearest True cell."""
    f = np.where(features, 0.0, _FAR)
    rows = np.stack([_edt_1d(r) for r in f])
    return np.stack([_edt_1d(c) for c in rows.T]).T


def compute_sdf(occupancy) -> np.ndarray:
    """Signed distance in cells: positive in free space, negative inside obstacles.

    Free cells get the distance to the nearest obstacle centre, obstacle cells minus
    the distance to the nearest free centre. A grid without obstacles (or without
    free cells) is filled with +/- max(H, W) * 2.
    """
    occ = np.asarray(occupancy).astype(bool)
    if occ.ndim != 2 or occ.size == 0:
        raise ValueError("occupancy must be a non-empty 2-D grid")
    cap = 2.0 * max(occ.shape)
    sdf = np.empty(occ.shape)
    if not occ.any():
        sdf.fill(cap)
        return sdf
    if occ.all():
        sdf.fill(-cap)
        return sdf
    d_out = np.sqrt(squared_edt(occ))
    d_in = np.sqrt(squared_edt(~occ))
    sdf[~occ] = d_out[~occ]
    sdf[occ] = -d_in[occ]
    return sdf


@dataclass(frozen=True, eq=False)
class SceneMap:
    occupancy: np.ndarray
    sdf: np.ndarray
    homography: np.ndarray
    rotation: np.ndarray
    cell_size: float = 1.0

    def __post_init__(self):
        for name in ("occupancy", "sdf", "homography", "rotation"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.occupancy.shape != self.sdf.shape or self.occupancy.ndim != 2:
            raise ValueError("occupancy and sdf must be equally shaped 2-D grids")
        if self.homography.shape != (3, 3) or abs(np.linalg.det(self.homography)) <= 1e-12:
            raise ValueError("homography must be an invertible 3x3 matrix")
        r = self.rotation
        if r.shape != (2, 2) or np.abs(r @ r.T - np.eye(2)).max() > 1e-9:
            raise ValueError("rotation must be a 2x2 orthonormal matrix")
        object.__setattr__(self, "_h_inv", np.linalg.inv(self.homography))
        object.__setattr__(self, "_r_inv", self.rotation.T.copy())

    @classmethod
    def from_occupancy(cls, occupancy, homography=None, rotation=None, cell_size: float = 1.0) -> "SceneMap":
        occ = (np.asarray(occupancy) > 0).astype(np.float64)
        return cls(occ, compute_sdf(occ),
                   np.eye(3) if homography is None else homography,
                   np.eye(2) if rotation is None else rotation, cell_size)

    @property
    def shape(self) -> tuple:
        return self.sdf.shape


def grid_homography(x_min: float, y_min: float, cell_size: float) -> np.ndarray:
    """Map->world homography for an axis-aligned grid whose cell (0, 0) starts at (x_min, y_min)."""
    return np.array([[cell_size, 0.0, x_min + 0.5 * cell_size],
                     [0.0, cell_size, y_min + 0.5 * cell_size],
                     [0.0, 0.0, 1.0]])


def project_world_to_map(points, scene: SceneMap) -> np.ndarray:
    """World points (..., 2) -> map coordinates (..., 2)."""
    p = np.asarray(points, dtype=np.float64)
    if not np.isfinite(p).all():
        raise ValueError("non-finite world point")
    q = p @ scene._r_inv.T
    hom = np.concatenate([q, np.ones(q.shape[:-1] + (1,))], axis=-1) @ scene._h_inv.T
    w = hom[..., 2:3]
    if np.any(np.abs(w) < 1e-12):
        raise ProjectionError("projective degeneracy: homogeneous coordinate near zero")
    return hom[..., :2] / w


def map_to_world(points, scene: SceneMap) -> np.ndarray:
    m = np.asarray(points, dtype=np.float64)
    hom = np.concatenate([m, np.ones(m.shape[:-1] + (1,))], axis=-1) @ scene.homography.T
    q = hom[..., :2] / hom[..., 2:3]
    return q @ scene.rotation.T


def sample_sdf(scene: SceneMap, map_points) -> np.ndarray:
    """Bilinear SDF lookup at map coordinates (u=column, v=row); clamps to the border."""
    m = np.asarray(map_points, dtype=np.float64)
    h, w = scene.sdf.shape
    u = np.clip(m[..., 0], 0.0, w - 1.0)
    v = np.clip(m[..., 1], 0.0, h - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    s = scene.sdf
    top = s[v0, u0] * (1.0 - fu) + s[v0, u1] * fu
    bot = s[v1, u0] * (1.0 - fu) + s[v1, u1] * fu
    return top * (1.0 - fv) + bot * fv


def clearance(scene: SceneMap, world_points) -> np.ndarray:
    """SDF value (cells) at world points, via projection then bilinear sampling."""
    return sample_sdf(scene, project_world_to_map(world_points, scene))


# --- file formats -----------------------------------------------------------

def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a P2/P5 PGM file")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    width, height, maxval = (int(t) for t in tokens)
    if magic == b"P5":
        pos += 1  # single whitespace before raster
        dtype = np.uint8 if maxval < 256 else ">u2"
        img = np.frombuffer(data[pos:], dtype=dtype, count=width * height)
    else:
        img = np.array(data[pos:].split()[:width * height], dtype=np.int64)
    if img.size != width * height:
        raise ValueError(f"{path}: truncated raster")
    return img.reshape(height, width).astype(np.int64)


def write_pgm(path: str | Path, occupancy) -> None:
    occ = (np.asarray(occupancy) > 0).astype(np.uint8) * 255
    h, w = occ.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + occ.tobytes())


def save_scene_map(pgm_path: str | Path, scene: SceneMap) -> Path:
    pgm_path = Path(pgm_path)
    write_pgm(pgm_path, scene.occupancy)
    side = pgm_path.with_suffix(".json")
    side.write_text(json.dumps({
        "homography": [float(x) for x in scene.homography.ravel()],
        "rotation": [float(x) for x in scene.rotation.ravel()],
        "cell_size": float(scene.cell_size),
    }, indent=1))
    return side


def load_scene_map(pgm_path: str | Path, sidecar: str | Path | None = None) -> SceneMap:
    pgm_path = Path(pgm_path)
    occ = read_pgm(pgm_path) >= 128
    side = json.loads(Path(sidecar or pgm_path.with_suffix(".json")).read_text())
    unknown = set(side) - {"homography", "rotation", "cell_size"}
    if unknown:
        raise ValueError(f"unknown map sidecar keys: {sorted(unknown)}")
    hom = np.array(side["homography"], dtype=np.float64).reshape(3, 3)
    rot = np.array(side.get("rotation", [1, 0, 0, 1]), dtype=np.float64).reshape(2, 2)
    return SceneMap.from_occupancy(occ, hom, rot, float(side.get("cell_size", 1.0)))
