"""Procedural animated scenes and a vectorized unidirectional path tracer.

Scenes are analytic primitives (sphere / cube / cylinder on a finite ground
disk) so intersections are exact and the renderer stays small enough to
test against closed-form physics (furnace, linearity, occlusion).

Light transport: next-event estimation at every path vertex using a
luminance-CDF sample of the environment, plus BRDF-sampled continuation
rays for indirect light. Bounce rays that escape to the environment
contribute nothing (direct light is owned by NEE), which keeps the
estimator unbiased without multiple importance sampling. For NEE the
environment is treated as piecewise-constant texel lights: a texel is drawn
from the CDF, the direction is jittered uniformly in the texel's solid
angle, and the radiance is that texel's value, so the pdf matches the
integrand model exactly.

Path depth counts segments including the final shadow/background
connection: depth 1 shows only the background, depth 2 adds direct
lighting, depth 3 (default) adds one indirect bounce.

Determinism: all randomness is drawn from per-frame generators seeded by
(cfg.seed, frame) in a fixed order, so results are bit-identical however
frames or scenes are distributed over workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .envlight import EnvironmentMap, sample_env

_EPS = 1e-4
_UP = np.array([0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# scene description


@dataclass
class Material:
    base_color: tuple  # rgb in [0,1]^3; this is the albedo label, bit-exact
    roughness: float = 0.8  # in [0.03, 1]
    metallic: float = 0.0  # in [0, 1]

    def __post_init__(self):
        self.base_color = tuple(float(c) for c in self.base_color)
        if not all(0.0 <= c <= 1.0 for c in self.base_color):
            raise ValueError(f"base_color out of [0,1]: {self.base_color}")
        if not 0.03 <= self.roughness <= 1.0:
            raise ValueError(f"roughness out of [0.03, 1]: {self.roughness}")
        if not 0.0 <= self.metallic <= 1.0:
            raise ValueError(f"metallic out of [0, 1]: {self.metallic}")


@dataclass
class CheckerMaterial:
    """Ground-plane checker; both base colors define the albedo AOV."""

    color_a: tuple = (0.725, 0.71, 0.68)
    color_b: tuple = (0.25, 0.25, 0.25)
    cell: float = 1.0
    roughness: float = 0.9
    metallic: float = 0.0


SHAPES = ("sphere", "cube", "cylinder")


@dataclass
class SceneObject:
    shape: str  # sphere | cube | cylinder
    scale: tuple  # sphere: (r,_,_); cube: half extents; cylinder: (r, half_h, _)
    position: tuple
    yaw: float
    material: Material
    velocity: tuple = (0.0, 0.0, 0.0)
    yaw_velocity: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")


@dataclass
class CameraPath:
    """Orbit around the scene center with optional azimuth oscillation."""

    radius: float = 4.0
    height: float = 2.2
    angular_speed: float = 0.05  # radians / frame
    osc_amp: float = 0.0
    osc_freq: float = 0.1  # cycles / frame
    azimuth0: float = 0.0
    fov_deg: float = 50.0
    target: tuple = (0.0, 0.5, 0.0)

    def azimuth(self, k):
        return self.azimuth0 + k * self.angular_speed + self.osc_amp * math.sin(
            2.0 * math.pi * self.osc_freq * k
        )


@dataclass
class SceneDescription:
    objects: list
    camera: CameraPath
    plane: object = None  # Material | CheckerMaterial | None
    plane_radius: float = 8.0
    light_yaw_speed: float = 0.0  # radians / frame
    seed: int = 0


@dataclass
class RenderConfig:
    width: int = 32
    height: int = 32
    frames: int = 8
    spp: int = 128
    max_depth: int = 3
    seed: int = 0
    firefly_clamp: float = 1e4

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.spp < 1:
            raise ValueError("spp must be >= 1")


@dataclass
class RenderOutput:
    hdr: np.ndarray  # (L, H, W, 3) linear radiance
    albedo_aov: np.ndarray  # (L, H, W, 3); first-hit base color, 0 on background
    coverage: np.ndarray  # (L, H, W) 1 where geometry is hit


# --- JSON round trip (reproducible test scenes) ----------------------------


def scene_to_dict(scene: SceneDescription) -> dict:
    d = asdict(scene)
    if isinstance(scene.plane, Material):
        d["plane"] = {"kind": "material", **asdict(scene.plane)}
    elif isinstance(scene.plane, CheckerMaterial):
        d["plane"] = {"kind": "checker", **asdict(scene.plane)}
    return d


def scene_from_dict(d: dict) -> SceneDescription:
    plane = d.get("plane")
    if plane is not None:
        kind = plane.pop("kind", "material")
        plane = CheckerMaterial(**plane) if kind == "checker" else Material(**plane)
    objects = [
        SceneObject(**{**o, "material": Material(**o["material"])}) for o in d["objects"]
    ]
    return SceneDescription(
        objects=objects,
        camera=CameraPath(**d["camera"]),
        plane=plane,
        plane_radius=d.get("plane_radius", 8.0),
        light_yaw_speed=d.get("light_yaw_speed", 0.0),
        seed=d.get("seed", 0),
    )


# ---------------------------------------------------------------------------
# procedural generation


@dataclass
class SceneLimits:
    min_objects: int = 1
    max_objects: int = 6  # paper-style: up to 3 shaped + 3 primitive, merged
    placement_radius: float = 2.2
    scale_range: tuple = (0.3, 0.9)
    metallic_prob: float = 0.25
    roughness_range: tuple = (0.3, 1.0)
    checker_prob: float = 0.5
    lambertian_only: bool = False  # ToySet preset: metallic forced to 0
    plane_radius: float = 8.0
    camera_radius_range: tuple = (3.2, 4.6)
    camera_height_range: tuple = (1.6, 3.2)


def _bounding_volume(obj: SceneObject):
    """('sphere', c, r) or ('aabb', lo, hi); cube AABB is yaw-expanded."""
    p = np.asarray(obj.position)
    s = np.asarray(obj.scale)
    if obj.shape == "sphere":
        return ("sphere", p, s[0])
    if obj.shape == "cylinder":
        half = np.array([s[0], s[1], s[0]])
        return ("aabb", p - half, p + half)
    c, sn = abs(math.cos(obj.yaw)), abs(math.sin(obj.yaw))
    hx = c * s[0] + sn * s[2]
    hz = sn * s[0] + c * s[2]
    half = np.array([hx, s[1], hz])
    return ("aabb", p - half, p + half)


def volumes_overlap(va, vb) -> bool:
    if va[0] == "sphere" and vb[0] == "sphere":
        return np.linalg.norm(va[1] - vb[1]) < va[2] + vb[2]
    if va[0] == "aabb" and vb[0] == "aabb":
        return bool((va[1] < vb[2]).all() and (vb[1] < va[2]).all())
    if va[0] == "aabb":
        va, vb = vb, va
    closest = np.clip(va[1], vb[1], vb[2])
    return np.linalg.norm(closest - va[1]) < va[2]


def _random_material(rng, limits: SceneLimits) -> Material:
    base = tuple(rng.uniform(0.05, 0.95, size=3))
    rough = float(rng.uniform(*limits.roughness_range))
    metallic = 0.0
    if not limits.lambertian_only and rng.random() < limits.metallic_prob:
        metallic = float(rng.uniform(0.5, 1.0))
    return Material(base_color=base, roughness=max(rough, 0.03), metallic=metallic)


def generate_scene(seed, limits: SceneLimits = None) -> SceneDescription:
    """Deterministic-in-seed scene with collision-free placement.

    Placement uses rejection sampling, at most 1000 attempts per object;
    an object that cannot be placed is skipped, so over-constrained limits
    degrade to fewer objects rather than failing.
    """
    limits = limits or SceneLimits()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE4E]))
    if rng.random() < limits.checker_prob:
        plane = CheckerMaterial(
            color_a=tuple(rng.uniform(0.3, 0.95, size=3)),
            color_b=tuple(rng.uniform(0.05, 0.5, size=3)),
            cell=float(rng.uniform(0.6, 1.4)),
            roughness=float(rng.uniform(0.6, 1.0)),
        )
    else:
        m = _random_material(rng, limits)
        plane = Material(base_color=m.base_color, roughness=max(m.roughness, 0.5), metallic=0.0)

    n_target = int(rng.integers(limits.min_objects, limits.max_objects + 1))
    objects = []
    volumes = []
    for _ in range(n_target):
        shape = SHAPES[rng.integers(0, len(SHAPES))]
        placed = False
        for _attempt in range(1000):
            s0 = rng.uniform(*limits.scale_range)
            if shape == "sphere":
                scale = (s0 * 0.5, s0 * 0.5, s0 * 0.5)
                y = scale[0]
            elif shape == "cube":
                scale = tuple(rng.uniform(0.5, 1.0, size=3) * s0 * 0.5)
                y = scale[1]
            else:
                scale = (s0 * 0.35, s0 * 0.5, s0 * 0.35)
                y = scale[1]
            r_place = rng.uniform(0.0, limits.placement_radius)
            ang = rng.uniform(0.0, 2 * math.pi)
            pos = (r_place * math.cos(ang), y, r_place * math.sin(ang))
            cand = SceneObject(
                shape=shape,
                scale=scale,
                position=pos,
                yaw=float(rng.uniform(0, 2 * math.pi)),
                material=_random_material(rng, limits),
                velocity=tuple(rng.uniform(-0.015, 0.015, size=3) * np.array([1, 0, 1])),
                yaw_velocity=float(rng.uniform(-0.06, 0.06)),
            )
            vol = _bounding_volume(cand)
            if not any(volumes_overlap(vol, v) for v in volumes):
                objects.append(cand)
                volumes.append(vol)
                placed = True
                break
        if not placed:
            continue

    camera = CameraPath(
        radius=float(rng.uniform(*limits.camera_radius_range)),
        height=float(rng.uniform(*limits.camera_height_range)),
        angular_speed=float(rng.uniform(-0.1, 0.1)),
        osc_amp=float(rng.uniform(0.0, 0.15)),
        osc_freq=float(rng.uniform(0.05, 0.25)),
        azimuth0=float(rng.uniform(0.0, 2 * math.pi)),
    )
    return SceneDescription(
        objects=objects,
        camera=camera,
        plane=plane,
        plane_radius=limits.plane_radius,
        light_yaw_speed=float(rng.uniform(-0.1, 0.1)),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# animation


@dataclass
class PosedScene:
    """Flat arrays for vectorized intersection at one frame."""

    kinds: np.ndarray  # (M,) 0 sphere, 1 cube, 2 cylinder
    centers: np.ndarray  # (M, 3)
    scales: np.ndarray  # (M, 3)
    yaw_cos: np.ndarray
    yaw_sin: np.ndarray
    base_colors: np.ndarray  # (M, 3)
    roughness: np.ndarray
    metallic: np.ndarray
    plane: object
    plane_radius: float
    cam_pos: np.ndarray
    cam_right: np.ndarray
    cam_up: np.ndarray
    cam_fwd: np.ndarray
    cam_azimuth: float
    tan_half_fov: float
    light_yaw: float


_KIND = {"sphere": 0, "cube": 1, "cylinder": 2}


def animate(scene: SceneDescription, k) -> PosedScene:
    """Pose the scene at frame k: orbit camera, advance objects and light."""
    n = len(scene.objects)
    kinds = np.empty(n, dtype=np.int64)
    centers = np.empty((n, 3))
    scales = np.empty((n, 3))
    yaws = np.empty(n)
    base = np.empty((n, 3))
    rough = np.empty(n)
    metal = np.empty(n)
    for i, o in enumerate(scene.objects):
        kinds[i] = _KIND[o.shape]
        centers[i] = np.asarray(o.position) + k * np.asarray(o.velocity)
        scales[i] = o.scale
        yaws[i] = o.yaw + k * o.yaw_velocity
        base[i] = o.material.base_color
        rough[i] = o.material.roughness
        metal[i] = o.material.metallic

    az = scene.camera.azimuth(k)
    pos = np.array(
        [
            scene.camera.radius * math.sin(az),
            scene.camera.height,
            scene.camera.radius * math.cos(az),
        ]
    )
    fwd = np.asarray(scene.camera.target) - pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, _UP)
    right = right / np.linalg.norm(right)
    up = np.cross(right, fwd)
    return PosedScene(
        kinds=kinds,
        centers=centers,
        scales=scales,
        yaw_cos=np.cos(yaws),
        yaw_sin=np.sin(yaws),
        base_colors=base,
        roughness=rough,
        metallic=metal,
        plane=scene.plane,
        plane_radius=scene.plane_radius,
        cam_pos=pos,
        cam_right=right,
        cam_up=up,
        cam_fwd=fwd,
        cam_azimuth=az,
        tan_half_fov=math.tan(math.radians(scene.camera.fov_deg) * 0.5),
        light_yaw=k * scene.light_yaw_speed,
    )


# ---------------------------------------------------------------------------
# intersections (vectorized over rays, python loop over the few objects)


def _isect_sphere(o, d, c, r):
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - cc
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > _EPS, t0, t1)
    return np.where(hit & (t > _EPS), t, np.inf)


def _to_local(o, d, c, cy, sy):
    # rotate world->object by -yaw about y (object stored with +yaw)
    ox = o[:, 0] - c[0]
    oz = o[:, 2] - c[2]
    lo = np.stack([cy * ox - sy * oz, o[:, 1] - c[1], sy * ox + cy * oz], axis=1)
    ld = np.stack([cy * d[:, 0] - sy * d[:, 2], d[:, 1], sy * d[:, 0] + cy * d[:, 2]], axis=1)
    return lo, ld


def _from_local_dir(v, cy, sy):
    return np.stack([cy * v[:, 0] + sy * v[:, 2], v[:, 1], -sy * v[:, 0] + cy * v[:, 2]], axis=1)


def _isect_box(o, d, c, half, cy, sy):
    lo, ld = _to_local(o, d, c, cy, sy)
    inv = 1.0 / np.where(np.abs(ld) < 1e-12, np.where(ld >= 0, 1e-12, -1e-12), ld)
    t1 = (-half - lo) * inv
    t2 = (half - lo) * inv
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax > np.maximum(tmin, _EPS))
    t = np.where(tmin > _EPS, tmin, tmax)
    return np.where(hit & (t > _EPS), t, np.inf)


def _isect_cylinder(o, d, c, r, hh):
    # vertical axis; yaw is irrelevant for the circular side
    ox = o[:, 0] - c[0]
    oy = o[:, 1] - c[1]
    oz = o[:, 2] - c[2]
    a = d[:, 0] ** 2 + d[:, 2] ** 2
    b = ox * d[:, 0] + oz * d[:, 2]
    cc = ox * ox + oz * oz - r * r
    disc = b * b - a * cc
    t_side = np.full(len(o), np.inf)
    ok = (disc > 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    for sign in (-1.0, 1.0):
        t = np.where(ok, (-b + sign * sq) / np.where(a > 1e-12, a, 1.0), np.inf)
        y = oy + t * d[:, 1]
        good = ok & (t > _EPS) & (np.abs(y) <= hh) & (t < t_side)
        t_side = np.where(good, t, t_side)
    # caps
    t_cap = np.full(len(o), np.inf)
    dy = np.where(np.abs(d[:, 1]) < 1e-12, 1e-12, d[:, 1])
    for y_cap in (-hh, hh):
        t = (y_cap - oy) / dy
        px = ox + t * d[:, 0]
        pz = oz + t * d[:, 2]
        good = (t > _EPS) & (px * px + pz * pz <= r * r) & (t < t_cap)
        t_cap = np.where(good, t, t_cap)
    return np.minimum(t_side, t_cap)


def intersect(posed: PosedScene, o, d, t_max=np.inf):
    """Closest hit: (t, index) with index = -1 miss, M = plane, i = object i."""
    n = len(o)
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    for i in range(len(posed.kinds)):
        kind = posed.kinds[i]
        if kind == 0:
            t = _isect_sphere(o, d, posed.centers[i], posed.scales[i][0])
        elif kind == 1:
            t = _isect_box(
                o, d, posed.centers[i], posed.scales[i], posed.yaw_cos[i], posed.yaw_sin[i]
            )
        else:
            t = _isect_cylinder(o, d, posed.centers[i], posed.scales[i][0], posed.scales[i][1])
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    if posed.plane is not None:
        dy = np.where(np.abs(d[:, 1]) < 1e-12, 1e-12, d[:, 1])
        t = -o[:, 1] / dy
        px = o[:, 0] + t * d[:, 0]
        pz = o[:, 2] + t * d[:, 2]
        good = (t > _EPS) & (px * px + pz * pz <= posed.plane_radius**2)
        t = np.where(good, t, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, len(posed.kinds), best_i)
    hit = best_t < t_max
    return np.where(hit, best_t, np.inf), np.where(hit, best_i, -1)


def occluded(posed: PosedScene, o, d):
    t, idx = intersect(posed, o, d)
    return idx >= 0


def _surface_attributes(posed: PosedScene, o, d, t, idx):
    """Normals and material arrays at hit points (idx >= 0)."""
    n_rays = len(o)
    p = o + t[:, None] * d
    normal = np.zeros((n_rays, 3))
    base = np.zeros((n_rays, 3))
    rough = np.full(n_rays, 1.0)
    metal = np.zeros(n_rays)
    m = len(posed.kinds)
    for i in range(m):
        sel = idx == i
        if not sel.any():
            continue
        ps = p[sel]
        c = posed.centers[i]
        s = posed.scales[i]
        if posed.kinds[i] == 0:
            nrm = (ps - c) / s[0]
        elif posed.kinds[i] == 1:
            lo = ps - c
            cy, sy = posed.yaw_cos[i], posed.yaw_sin[i]
            lx = cy * lo[:, 0] - sy * lo[:, 2]
            lz = sy * lo[:, 0] + cy * lo[:, 2]
            loc = np.stack([lx, lo[:, 1], lz], axis=1)
            rel = np.abs(loc) / s
            axis = rel.argmax(axis=1)
            nrm_loc = np.zeros_like(loc)
            rows = np.arange(len(loc))
            nrm_loc[rows, axis] = np.sign(loc[rows, axis])
            nrm = _from_local_dir(nrm_loc, cy, sy)
        else:
            lo = ps - c
            on_cap = np.abs(np.abs(lo[:, 1]) - s[1]) < 1e-3 * (1 + s[1])
            side = lo.copy()
            side[:, 1] = 0.0
            lens = np.linalg.norm(side, axis=1, keepdims=True)
            side = side / np.maximum(lens, 1e-12)
            cap = np.zeros_like(side)
            cap[:, 1] = np.sign(lo[:, 1])
            nrm = np.where(on_cap[:, None], cap, side)
        normal[sel] = nrm
        base[sel] = posed.base_colors[i]
        rough[sel] = posed.roughness[i]
        metal[sel] = posed.metallic[i]
    sel = idx == m
    if sel.any() and posed.plane is not None:
        normal[sel] = _UP
        pl = posed.plane
        if isinstance(pl, CheckerMaterial):
            ps = p[sel]
            cx = np.floor(ps[:, 0] / pl.cell).astype(np.int64)
            cz = np.floor(ps[:, 2] / pl.cell).astype(np.int64)
            odd = ((cx + cz) & 1).astype(bool)
            base[sel] = np.where(odd[:, None], np.asarray(pl.color_b), np.asarray(pl.color_a))
            rough[sel] = pl.roughness
            metal[sel] = pl.metallic
        else:
            base[sel] = pl.base_color
            rough[sel] = pl.roughness
            metal[sel] = pl.metallic
    # face normals toward the incoming ray
    flip = np.einsum("ij,ij->i", normal, d) > 0
    normal[flip] *= -1.0
    return p, normal, base, rough, metal


# ---------------------------------------------------------------------------
# environment sampling (piecewise-constant texel lights)


class EnvSampler:
    def __init__(self, env: EnvironmentMap):
        self.pixels = env.pixels.astype(np.float64)
        self.base_yaw = env.yaw_offset
        h, w = self.pixels.shape[:2]
        self.h, self.w = h, w
        edges = np.cos(np.pi * np.arange(h + 1) / h)
        self.cos_top = edges[:-1]
        self.cos_bot = edges[1:]
        domega_row = (2.0 * np.pi / w) * (self.cos_top - self.cos_bot)  # per-texel
        lum = self.pixels @ np.array([0.2126, 0.7152, 0.0722])
        weights = (lum * domega_row[:, None]).reshape(-1)
        total = weights.sum()
        if total <= 0:
            weights = np.repeat(domega_row, w)
            total = weights.sum()
        self.prob = weights / total
        self.cdf = np.cumsum(self.prob)
        self.cdf[-1] = 1.0
        self.domega = np.repeat(domega_row, w).reshape(h, w)

    def sample(self, u, light_yaw):
        """u: (N, 3) uniforms -> (directions, radiance, pdf) in solid angle."""
        flat = np.searchsorted(self.cdf, u[:, 0], side="right")
        flat = np.clip(flat, 0, self.h * self.w - 1)
        row, col = np.divmod(flat, self.w)
        u_tex = (col + u[:, 1]) / self.w
        cos_t = self.cos_top[row] + u[:, 2] * (self.cos_bot[row] - self.cos_top[row])
        sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, 1.0))
        # texel at azimuth a represents world azimuth a - yaw (see sample_env)
        phi = 2.0 * np.pi * (u_tex - 0.5) - (self.base_yaw + light_yaw)
        d = np.stack([sin_t * np.sin(phi), cos_t, -sin_t * np.cos(phi)], axis=1)
        radiance = self.pixels[row, col]
        pdf = self.prob[flat] / self.domega[row, col]
        return d, radiance, pdf


# ---------------------------------------------------------------------------
# BRDF: (1-m) Lambert + m GGX(F0 = base), Fresnel-Schlick
# (no constant dielectric specular, so metallic=0 is exactly Lambertian)


def _brdf_eval(normal, wo, wi, base, rough, metal):
    nol = np.einsum("ij,ij->i", normal, wi)
    nov = np.einsum("ij,ij->i", normal, wo)
    valid = (nol > 1e-7) & (nov > 1e-7)
    diffuse = (1.0 - metal)[:, None] * base / np.pi
    f = diffuse.copy()
    spec_sel = valid & (metal > 0)
    if spec_sel.any():
        h = wo[spec_sel] + wi[spec_sel]
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        noh = np.clip(np.einsum("ij,ij->i", normal[spec_sel], h), 0.0, 1.0)
        voh = np.clip(np.einsum("ij,ij->i", wo[spec_sel], h), 1e-7, 1.0)
        alpha = rough[spec_sel] ** 2
        a2 = alpha**2
        denom = noh**2 * (a2 - 1.0) + 1.0
        dist = a2 / np.maximum(np.pi * denom**2, 1e-12)
        nv = np.clip(nov[spec_sel], 1e-7, 1.0)
        nl = np.clip(nol[spec_sel], 1e-7, 1.0)
        g1v = 2 * nv / (nv + np.sqrt(a2 + (1 - a2) * nv**2))
        g1l = 2 * nl / (nl + np.sqrt(a2 + (1 - a2) * nl**2))
        f0 = base[spec_sel]
        fres = f0 + (1.0 - f0) * (1.0 - voh[:, None]) ** 5
        spec = (metal[spec_sel] * dist * g1v * g1l / (4.0 * nv * nl))[:, None] * fres
        f[spec_sel] += spec
    return np.where(valid[:, None], f, 0.0)


def _ortho_frame(n):
    """Tangent frame per normal (branchless Duff et al. construction)."""
    sign = np.where(n[:, 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], axis=1)
    bt = np.stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]], axis=1)
    return t, bt


def _sample_bounce(normal, wo, base, rough, metal, u):
    """BRDF-sampled continuation: (wi, throughput_multiplier)."""
    n_rays = len(normal)
    t, bt = _ortho_frame(normal)
    pick_spec = u[:, 0] < metal
    # cosine hemisphere
    r = np.sqrt(u[:, 1])
    ang = 2 * np.pi * u[:, 2]
    lx = r * np.cos(ang)
    lz = r * np.sin(ang)
    ly = np.sqrt(np.clip(1 - u[:, 1], 0.0, 1.0))
    wi_diff = lx[:, None] * t + ly[:, None] * normal + lz[:, None] * bt
    # GGX half-vector
    alpha = rough**2
    a2 = alpha**2
    cos_h = np.sqrt(np.clip((1.0 - u[:, 1]) / (1.0 + (a2 - 1.0) * u[:, 1]), 0.0, 1.0))
    sin_h = np.sqrt(np.clip(1 - cos_h**2, 0.0, 1.0))
    hx = sin_h * np.cos(ang)
    hz = sin_h * np.sin(ang)
    h = hx[:, None] * t + cos_h[:, None] * normal + hz[:, None] * bt
    voh = np.einsum("ij,ij->i", wo, h)
    wi_spec = 2.0 * voh[:, None] * h - wo
    wi = np.where(pick_spec[:, None], wi_spec, wi_diff)
    nol = np.einsum("ij,ij->i", normal, wi)
    ok = nol > 1e-7

    # mixture pdf for the chosen direction
    pdf_cos = np.clip(nol, 0.0, None) / np.pi
    hh = wo + wi
    hh_len = np.linalg.norm(hh, axis=1, keepdims=True)
    hh = hh / np.maximum(hh_len, 1e-12)
    noh = np.clip(np.einsum("ij,ij->i", normal, hh), 0.0, 1.0)
    voh2 = np.clip(np.einsum("ij,ij->i", wo, hh), 1e-7, 1.0)
    denom = noh**2 * (a2 - 1.0) + 1.0
    dist = a2 / np.maximum(np.pi * denom**2, 1e-12)
    pdf_ggx = dist * noh / (4.0 * voh2)
    pdf = (1.0 - metal) * pdf_cos + metal * pdf_ggx
    ok &= pdf > 1e-12
    f = _brdf_eval(normal, wo, wi, base, rough, metal)
    mult = np.where(
        ok[:, None], f * nol[:, None] / np.maximum(pdf, 1e-12)[:, None], 0.0
    )
    return wi, mult


# ---------------------------------------------------------------------------
# the tracer


def _primary_rays(posed: PosedScene, w, h, jitter):
    """jitter: (N, 2) in [0,1); N = h*w*spp-chunk laid out (spp, h, w)."""
    spp = jitter.shape[0] // (w * h)
    jj = jitter.reshape(spp, h, w, 2)
    xs = (np.arange(w) + jj[..., 0]) / w * 2.0 - 1.0
    ys = 1.0 - (np.arange(h)[:, None] + jj[..., 1]) / h * 2.0
    aspect = w / h
    px = xs * posed.tan_half_fov * aspect
    py = ys * posed.tan_half_fov
    d = (
        px[..., None] * posed.cam_right
        + py[..., None] * posed.cam_up
        + posed.cam_fwd
    )
    d = d.reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(posed.cam_pos, d.shape).copy()
    return o, d


def _render_frame(posed, env, sampler, cfg, rng):
    h, w = cfg.height, cfg.width
    n_pix = h * w
    accum = np.zeros((n_pix, 3))
    chunk = max(1, min(cfg.spp, 16))
    done = 0
    while done < cfg.spp:
        spp_c = min(chunk, cfg.spp - done)
        n = n_pix * spp_c
        jitter = rng.random((n, 2))
        o, d = _primary_rays(posed, w, h, jitter)
        radiance = np.zeros((n, 3))
        throughput = np.ones((n, 3))
        alive = np.ones(n, dtype=bool)
        for seg in range(1, cfg.max_depth + 1):
            if not alive.any():
                break
            t, idx = intersect(posed, o[alive], d[alive])
            miss = idx < 0
            if seg == 1 and miss.any():
                bg = sample_env(
                    EnvironmentMap(env.pixels, env.yaw_offset + posed.light_yaw),
                    d[alive][miss],
                )
                rows = np.flatnonzero(alive)[miss]
                radiance[rows] += bg
            hit = ~miss
            rows_hit = np.flatnonzero(alive)[hit]
            new_alive = np.zeros(n, dtype=bool)
            new_alive[rows_hit] = True
            if not new_alive.any():
                alive = new_alive
                break
            p, normal, base, rough, metal = _surface_attributes(
                posed, o[alive][hit], d[alive][hit], t[hit], idx[hit]
            )
            wo = -d[alive][hit]
            # next-event estimation (uses one more segment)
            if seg + 1 <= cfg.max_depth:
                u = rng.random((len(p), 3))
                wi, lrad, pdf = sampler.sample(u, posed.light_yaw)
                nol = np.einsum("ij,ij->i", normal, wi)
                front = nol > 1e-7
                if front.any():
                    orig = p[front] + normal[front] * _EPS
                    vis = ~occluded(posed, orig, wi[front])
                    if vis.any():
                        f = _brdf_eval(
                            normal[front][vis],
                            wo[front][vis],
                            wi[front][vis],
                            base[front][vis],
                            rough[front][vis],
                            metal[front][vis],
                        )
                        contrib = (
                            f
                            * lrad[front][vis]
                            * (nol[front][vis] / pdf[front][vis])[:, None]
                        )
                        tgt = rows_hit[front][vis]
                        radiance[tgt] += throughput[tgt] * contrib
            # bounce (the continued path needs NEE at the next vertex)
            if seg + 2 <= cfg.max_depth:
                u = rng.random((len(p), 3))
                wi, mult = _sample_bounce(normal, wo, base, rough, metal, u)
                throughput[rows_hit] *= mult
                o_new = o.copy()
                d_new = d.copy()
                o_new[rows_hit] = p + normal * _EPS
                d_new[rows_hit] = wi
                o, d = o_new, d_new
                dead = rows_hit[(mult <= 0).all(axis=1)]
                new_alive[dead] = False
                alive = new_alive
            else:
                alive = np.zeros(n, dtype=bool)
        radiance = np.minimum(radiance, cfg.firefly_clamp)
        accum += radiance.reshape(spp_c, n_pix, 3).sum(axis=0)
        done += spp_c
    return (accum / cfg.spp).reshape(h, w, 3)


def _center_pass(posed, cfg):
    """Albedo AOV and coverage from unjittered pixel-center rays."""
    h, w = cfg.height, cfg.width
    jitter = np.full((h * w, 2), 0.5)
    o, d = _primary_rays(posed, w, h, jitter)
    t, idx = intersect(posed, o, d)
    hit = idx >= 0
    albedo = np.zeros((h * w, 3))
    if hit.any():
        _, _, base, _, _ = _surface_attributes(posed, o[hit], d[hit], t[hit], idx[hit])
        albedo[hit] = base
    return albedo.reshape(h, w, 3), hit.reshape(h, w).astype(np.float32)


def render(scene: SceneDescription, env: EnvironmentMap, cfg: RenderConfig, poses=None):
    """Path-trace the animated scene under the (rotating) environment."""
    if poses is None:
        poses = [animate(scene, k) for k in range(cfg.frames)]
    sampler = EnvSampler(env)
    hdr = np.empty((cfg.frames, cfg.height, cfg.width, 3), dtype=np.float32)
    albedo = np.empty_like(hdr)
    coverage = np.empty((cfg.frames, cfg.height, cfg.width), dtype=np.float32)
    for k, posed in enumerate(poses):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, k, 0x7ACE]))
        hdr[k] = _render_frame(posed, env, sampler, cfg, rng)
        albedo[k], coverage[k] = _center_pass(posed, cfg)
    return RenderOutput(hdr=hdr, albedo_aov=albedo, coverage=coverage)


def render_pair(scene: SceneDescription, env_a: EnvironmentMap, env_b: EnvironmentMap, cfg):
    """Render the same motion under two illuminations.

    Identical per-frame RNG streams are used for both renders, so
    env_a == env_b gives bit-identical videos. The returned per-frame yaw
    lists are camera-relative: yaw[k] = light_yaw(k) - camera_azimuth(k),
    which is what the lighting encoder consumes.
    """
    poses = [animate(scene, k) for k in range(cfg.frames)]
    out_a = render(scene, env_a, cfg, poses=poses)
    out_b = render(scene, env_b, cfg, poses=poses)
    yaws = np.array([p.light_yaw - p.cam_azimuth for p in poses])
    return {
        "input": out_a.hdr,
        "relit": out_b.hdr,
        "albedo": out_a.albedo_aov,
        "coverage": out_a.coverage,
        "env_a": env_a,
        "env_b": env_b,
        "yaw_a": yaws.copy(),
        "yaw_b": yaws.copy(),
        "cam_azimuth": np.array([p.cam_azimuth for p in poses]),
        "light_yaw": np.array([p.light_yaw for p in poses]),
    }
