"""Synthetic coat patterns from the Gray-Scott reaction-diffusion model.

Each identity owns one 128x128 pattern grown from a seeded initial state.
Instances are augmented views of that pattern: a quarter-turn plus small
rotation jitter, a random crop, a downsample to 64x64, a brightness change
and pixel noise. The simulation uses periodic boundaries, so rotations and
crops sample the torus and never expose an artificial edge.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, InstabilityError, ValidationError
from .linalg import child_seed, make_rng

PATTERN_SIZE = 128
INSTANCE_SIZE = 64
SOURCES = ("A", "B", "C")


@dataclass(frozen=True)
class GrayScottParams:
    Du: float = 0.16
    Dv: float = 0.08
    F: float = 0.060
    k: float = 0.062
    steps: int = 5000
    dt: float = 1.0

    def __post_init__(self):
        for name in ("Du", "Dv", "F", "k", "dt"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"GrayScottParams.{name} must be positive")
        if int(self.steps) < 1:
            raise ConfigurationError("GrayScottParams.steps must be >= 1")


@dataclass
class CoatPattern:
    grid: np.ndarray
    identity_id: int
    seed: int


@dataclass
class Instance:
    grid: np.ndarray
    identity_id: int
    source_tag: str
    augmentation_seed: int
    pattern_seed: int = 0
    index: int = 0  # position within the herd; used as the instance id


@dataclass(frozen=True)
class AugmentParams:
    """Ranges sampled by :func:`augment`. ``fixed()`` gives the identity map."""

    jitter_deg: float = 10.0
    min_crop_area: float = 0.85
    brightness: tuple = (0.8, 1.2)
    noise_sigma: float = 0.02
    quarter_turns: bool = True

    @classmethod
    def fixed(cls):
        return cls(jitter_deg=0.0, min_crop_area=1.0, brightness=(1.0, 1.0),
                   noise_sigma=0.0, quarter_turns=False)


def laplacian(a: np.ndarray) -> np.ndarray:
    """Five-point Laplacian with periodic boundaries."""
    return (np.roll(a, 1, 0) + np.roll(a, -1, 0) + np.roll(a, 1, 1)
            + np.roll(a, -1, 1) - 4.0 * a)


def initial_state(rng: np.random.Generator, size: int = PATTERN_SIZE, *,
                  num_seeds: int = 24, perturb: bool = True):
    """Trivial state u=1, v=0 with random square patches of the v species."""
    u = np.ones((size, size))
    v = np.zeros((size, size))
    if not perturb:
        return u, v
    half = max(size // 32, 2)
    centres = rng.integers(0, size, size=(num_seeds, 2))
    for cy, cx in centres:
        ys = np.arange(cy - half, cy + half) % size
        xs = np.arange(cx - half, cx + half) % size
        u[np.ix_(ys, xs)] = 0.5
        v[np.ix_(ys, xs)] = 0.25
    u += rng.uniform(-0.01, 0.01, u.shape)
    v += rng.uniform(-0.01, 0.01, v.shape)
    return u, v


def simulate_fields(params: GrayScottParams, u: np.ndarray, v: np.ndarray):
    """Advance (u, v) by ``params.steps`` explicit Euler steps."""
    u, v = u.copy(), v.copy()
    Du, Dv, F, k, dt = params.Du, params.Dv, params.F, params.k, params.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, int(params.steps) + 1):
            uvv = u * v * v
            u += dt * (Du * laplacian(u) - uvv + F * (1.0 - u))
            v += dt * (Dv * laplacian(v) + uvv - (F + k) * v)
            if step % 50 == 0 or step == params.steps:
                if not (np.abs(u).max() <= 10 and np.abs(v).max() <= 10):
                    raise InstabilityError(f"Gray-Scott diverged at step {step}")
    return u, v


def normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.ones_like(a) if hi >= 1 else np.clip(a, 0.0, 1.0)
    return (a - lo) / (hi - lo)


def gray_scott_simulate(params: GrayScottParams, rng: np.random.Generator, *,
                        identity_id: int = 0, seed: int = 0,
                        perturb: bool = True) -> CoatPattern:
    u, v = initial_state(rng, perturb=perturb)
    u, _ = simulate_fields(params, u, v)
    return CoatPattern(grid=normalize(u), identity_id=identity_id, seed=seed)


def pattern_for_identity(identity_id: int, master_seed: int,
                         params: GrayScottParams | None = None) -> CoatPattern:
    seed = child_seed(master_seed, 0, identity_id)
    return gray_scott_simulate(params or GrayScottParams(), make_rng(seed),
                               identity_id=identity_id, seed=seed)


def area_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging ``n_in`` samples into ``n_out`` bins by overlap."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
        m[i] /= m[i].sum()
    return m


def downsample(grid: np.ndarray, size: int = INSTANCE_SIZE) -> np.ndarray:
    h, w = grid.shape
    return area_resize_matrix(h, size) @ grid @ area_resize_matrix(w, size).T


def rotate_periodic(grid: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the grid centre with bilinear resampling on the torus."""
    if angle_deg % 360 == 0:
        return grid.copy()
    h, w = grid.shape
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = yy - cy, xx - cx
    src_y = cy + c * dy + s * dx
    src_x = cx - s * dy + c * dx
    return ndimage.map_coordinates(grid, [src_y, src_x], order=1, mode="grid-wrap")


def augment(pattern: CoatPattern, rng: np.random.Generator, *,
            params: AugmentParams = AugmentParams(), source_tag: str = "A",
            augmentation_seed: int = 0) -> Instance:
    quarter = int(rng.integers(0, 4)) if params.quarter_turns else 0
    jitter = rng.uniform(-params.jitter_deg, params.jitter_deg)
    area = rng.uniform(params.min_crop_area, 1.0)
    brightness = rng.uniform(*params.brightness)
    noise = rng.standard_normal((INSTANCE_SIZE, INSTANCE_SIZE))

    g = np.rot90(pattern.grid, quarter)
    g = rotate_periodic(g, jitter)
    h, w = g.shape
    side = min(h, max(1, int(round(h * math.sqrt(area)))))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    g = downsample(g[y0:y0 + side, x0:x0 + side])
    g = np.clip(g * brightness, 0.0, 1.0)
    if params.noise_sigma > 0:
        g = np.clip(g + params.noise_sigma * noise, 0.0, 1.0)
    return Instance(grid=g, identity_id=pattern.identity_id, source_tag=source_tag,
                    augmentation_seed=augmentation_seed, pattern_seed=pattern.seed)


def generate_identity(identity_id: int, instances_per_identity: int, master_seed: int,
                      params: GrayScottParams | None = None):
    pattern = pattern_for_identity(identity_id, master_seed, params)
    tag = SOURCES[identity_id % len(SOURCES)]
    out = []
    for j in range(instances_per_identity):
        aseed = child_seed(master_seed, 1, identity_id, j)
        out.append(augment(pattern, make_rng(aseed), source_tag=tag,
                           augmentation_seed=aseed))
    return out


def generate_herd(num_identities: int, instances_per_identity: int, master_seed: int,
                  params: GrayScottParams | None = None, workers: int = 1):
    if num_identities < 2:
        raise ConfigurationError("num_identities must be >= 2 (no negatives otherwise)")
    if instances_per_identity < 20:
        raise ConfigurationError("instances_per_identity must be >= 20")
    ids = range(num_identities)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            groups = list(pool.map(generate_identity, ids,
                                   [instances_per_identity] * num_identities,
                                   [master_seed] * num_identities,
                                   [params] * num_identities))
    else:
        groups = [generate_identity(i, instances_per_identity, master_seed, params) for i in ids]
    herd = [inst for group in groups for inst in group]
    for i, inst in enumerate(herd):
        inst.index = i
    return herd


# -- on-disk herd: binary PGM images plus a JSON manifest --------------------

def write_pgm(path, grid: np.ndarray):
    """8-bit binary PGM (P5); pixel = round(255 * cell)."""
    g = np.asarray(grid, dtype=np.float64)
    data = np.rint(np.clip(g, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm`; returns values in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def save_herd(herd, out_dir, *, num_identities, instances_per_identity, master_seed,
              params: GrayScottParams | None = None):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for inst in herd:
        rel = f"images/id{inst.identity_id:03d}_{inst.index:05d}.pgm"
        write_pgm(out / rel, inst.grid)
        entries.append({"index": inst.index, "identity_id": inst.identity_id,
                        "source_tag": inst.source_tag, "pattern_seed": inst.pattern_seed,
                        "augmentation_seed": inst.augmentation_seed, "path": rel})
    p = params or GrayScottParams()
    manifest = {"format": "herdmetric-herd-v1", "num_identities": num_identities,
                "instances_per_identity": instances_per_identity, "master_seed": master_seed,
                "gray_scott": {"Du": p.Du, "Dv": p.Dv, "F": p.F, "k": p.k,
                               "steps": p.steps, "dt": p.dt},
                "instances": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_herd(herd_dir):
    """Load a herd saved by :func:`save_herd` (grids come back 8-bit quantised)."""
    root = Path(herd_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    herd = []
    for e in manifest["instances"]:
        herd.append(Instance(grid=read_pgm(root / e["path"]), identity_id=int(e["identity_id"]),
                             source_tag=e["source_tag"],
                             augmentation_seed=int(e["augmentation_seed"]),
                             pattern_seed=int(e["pattern_seed"]), index=int(e["index"])))
    herd.sort(key=lambda x: x.index)
    return herd, manifest
