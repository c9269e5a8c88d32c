"""Synthetic dish scenes with exact ground truth.

World frame: the table is the z = 0 plane, +z points up toward the
cameras, units are millimeters. A scene is an elliptical plate (flat rim
ring at ``rim_height``, flat interior bottom at ``bottom_height``) with
food items standing on the bottom, plus a textured reference card lying
on the table. Food surfaces are analytic (sphere caps, boxes), so renders
carry exact per-pixel depth and labels, and item volumes have an
independent numeric-integration oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpec
from .geometry import CameraIntrinsics, RelativePose
from .image import ImageGray

MAX_CAMERA_TILT_DEG = 45.0
CARD_WIDTH_MM = 85.6
CARD_HEIGHT_MM = 54.0


# --- procedural texture -------------------------------------------------------

class ValueNoise2D:
    """Seeded multi-octave value noise over world millimeters."""

    def __init__(self, seed: int, cell_mm: float = 16.0, octaves: int = 4,
                 persistence: float = 0.55):
        rng = np.random.default_rng(seed)
        self.lattice = rng.uniform(0.0, 1.0, size=(256, 256))
        self.cell_mm = cell_mm
        self.octaves = octaves
        self.persistence = persistence

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        total = np.zeros_like(x)
        amp = 1.0
        norm = 0.0
        cell = self.cell_mm
        for _ in range(self.octaves):
            u = x / cell
            v = y / cell
            iu = np.floor(u).astype(int)
            iv = np.floor(v).astype(int)
            fu = u - iu
            fv = v - iv
            fu = fu * fu * (3 - 2 * fu)
            fv = fv * fv * (3 - 2 * fv)
            i0 = iu % 256
            i1 = (iu + 1) % 256
            j0 = iv % 256
            j1 = (iv + 1) % 256
            g00 = self.lattice[j0, i0]
            g01 = self.lattice[j0, i1]
            g10 = self.lattice[j1, i0]
            g11 = self.lattice[j1, i1]
            total += amp * ((1 - fv) * ((1 - fu) * g00 + fu * g01)
                            + fv * ((1 - fu) * g10 + fu * g11))
            norm += amp
            amp *= self.persistence
            cell /= 2.0
        return total / norm


def make_card_pattern(seed: int = 7, px_per_mm: float = 2.0) -> ImageGray:
    """High-texture fiducial artwork for the reference card.

    Scattered high-contrast discs and rings of mixed size give the
    detector strong, well-localized blobs with stable orientations at
    scales resolvable both in the asset and in captures taken at arm's
    length. A low-amplitude noise floor keeps the space between marks
    textured.
    """
    rng = np.random.default_rng(seed)
    w = int(round(CARD_WIDTH_MM * px_per_mm))
    h = int(round(CARD_HEIGHT_MM * px_per_mm))
    xs = (np.arange(w) + 0.5) / px_per_mm
    ys = (np.arange(h) + 0.5) / px_per_mm
    xx, yy = np.meshgrid(xs, ys)

    noise = ValueNoise2D(seed, cell_mm=7.0, octaves=2, persistence=0.7)
    img = 128.0 + 34.0 * (noise(xx + 500.0, yy + 500.0) - 0.5)

    # random field of smooth blobs: band-limited marks survive viewpoint
    # resampling, and each salient point sees a unique constellation of
    # neighbors inside its descriptor window
    n_blobs = 130
    cx = rng.uniform(2.0, CARD_WIDTH_MM - 2.0, n_blobs)
    cy = rng.uniform(2.0, CARD_HEIGHT_MM - 2.0, n_blobs)
    sigma = rng.uniform(1.0, 2.4, n_blobs)
    amp = rng.uniform(55.0, 115.0, n_blobs) * rng.choice([-1.0, 1.0], n_blobs)
    for k in range(n_blobs):
        d2 = (xx - cx[k]) ** 2 + (yy - cy[k]) ** 2
        img += amp[k] * np.exp(-d2 / (2.0 * sigma[k] ** 2))
    return ImageGray(np.clip(np.round(img), 0, 255).astype(np.uint8))


# --- scene specification --------------------------------------------------------

@dataclass
class CameraPose:
    position: tuple
    look_at: tuple = (0.0, 0.0, 0.0)


@dataclass
class PlateSpec:
    semi_axes: tuple = (110.0, 95.0)
    rim_height: float = 24.0
    bottom_height: float = 10.0
    rim_inner_fraction: float = 0.82


@dataclass
class CardSpec:
    center: tuple = (158.0, -58.0)
    angle_deg: float = 15.0
    width: float = CARD_WIDTH_MM
    height: float = CARD_HEIGHT_MM
    pattern_seed: int = 7


@dataclass
class HemisphereItem:
    center: tuple
    radius: float

    kind = "hemisphere"

    def height(self, x, y):
        r2 = (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2
        return np.sqrt(np.maximum(self.radius ** 2 - r2, 0.0))

    def bbox(self):
        cx, cy = self.center
        r = self.radius
        return (cx - r, cy - r, cx + r, cy + r)

    def to_json(self):
        return {"type": "hemisphere", "center": list(self.center),
                "radius": self.radius}


@dataclass
class BoxItem:
    center: tuple
    size: tuple  # (sx, sy, height)

    kind = "box"

    def height(self, x, y):
        sx, sy, h = self.size
        inside = ((np.abs(x - self.center[0]) <= sx / 2)
                  & (np.abs(y - self.center[1]) <= sy / 2))
        return np.where(inside, h, 0.0)

    def bbox(self):
        cx, cy = self.center
        sx, sy, _ = self.size
        return (cx - sx / 2, cy - sy / 2, cx + sx / 2, cy + sy / 2)

    def to_json(self):
        return {"type": "box", "center": list(self.center),
                "size": list(self.size)}


def item_from_json(d: dict):
    if d["type"] == "hemisphere":
        return HemisphereItem(tuple(d["center"]), float(d["radius"]))
    if d["type"] == "box":
        return BoxItem(tuple(d["center"]), tuple(d["size"]))
    raise InvalidSpec(f"unknown item type {d['type']!r}")


@dataclass
class SceneSpec:
    items: list
    cameras: list
    plate: PlateSpec = field(default_factory=PlateSpec)
    card: CardSpec = field(default_factory=CardSpec)
    texture_seed: int = 1
    texture_contrast: float = 60.0
    specular: bool = False

    def validate(self) -> None:
        if not self.items:
            raise InvalidSpec("scene needs at least one food item")
        if len(self.cameras) < 1:
            raise InvalidSpec("scene needs at least one camera")
        if self.texture_contrast < 40.0:
            raise InvalidSpec("texture contrast must be at least 40 levels")
        a, b = self.plate.semi_axes
        inner = self.plate.rim_inner_fraction
        boxes = []
        for item in self.items:
            x0, y0, x1, y1 = item.bbox()
            for cx, cy in ((x0, y0), (x0, y1), (x1, y0), (x1, y1)):
                if (cx / (a * inner)) ** 2 + (cy / (b * inner)) ** 2 > 1.0:
                    raise InvalidSpec("food item extends outside the plate")
            boxes.append((x0, y0, x1, y1))
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                ax0, ay0, ax1, ay1 = boxes[i]
                bx0, by0, bx1, by1 = boxes[j]
                if ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1:
                    raise InvalidSpec("food items overlap")
        for cam in self.cameras:
            pos = np.asarray(cam.position, dtype=float)
            look = np.asarray(cam.look_at, dtype=float)
            fwd = look - pos
            n = np.linalg.norm(fwd)
            if n < 1e-9 or pos[2] <= look[2]:
                raise InvalidSpec("camera must sit above its target")
            tilt = math.degrees(math.acos(min(1.0, -fwd[2] / n)))
            if tilt > MAX_CAMERA_TILT_DEG:
                raise InvalidSpec(
                    f"camera tilt {tilt:.1f} deg exceeds "
                    f"{MAX_CAMERA_TILT_DEG:.0f} deg from vertical")

    def to_json_dict(self) -> dict:
        return {
            "items": [it.to_json() for it in self.items],
            "cameras": [{"position": list(c.position),
                         "look_at": list(c.look_at)} for c in self.cameras],
            "plate": {"semi_axes": list(self.plate.semi_axes),
                      "rim_height": self.plate.rim_height,
                      "bottom_height": self.plate.bottom_height,
                      "rim_inner_fraction": self.plate.rim_inner_fraction},
            "card": {"center": list(self.card.center),
                     "angle_deg": self.card.angle_deg,
                     "width": self.card.width, "height": self.card.height,
                     "pattern_seed": self.card.pattern_seed},
            "texture_seed": self.texture_seed,
            "texture_contrast": self.texture_contrast,
            "specular": self.specular,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "SceneSpec":
        plate = PlateSpec(tuple(d["plate"]["semi_axes"]),
                          d["plate"]["rim_height"],
                          d["plate"]["bottom_height"],
                          d["plate"].get("rim_inner_fraction", 0.82))
        card = CardSpec(tuple(d["card"]["center"]), d["card"]["angle_deg"],
                        d["card"].get("width", CARD_WIDTH_MM),
                        d["card"].get("height", CARD_HEIGHT_MM),
                        d["card"].get("pattern_seed", 7))
        return SceneSpec(
            items=[item_from_json(it) for it in d["items"]],
            cameras=[CameraPose(tuple(c["position"]), tuple(c["look_at"]))
                     for c in d["cameras"]],
            plate=plate, card=card,
            texture_seed=int(d.get("texture_seed", 1)),
            texture_contrast=float(d.get("texture_contrast", 60.0)),
            specular=bool(d.get("specular", False)),
        )


# --- camera math -----------------------------------------------------------------

def camera_rotation(position, look_at) -> np.ndarray:
    """World-to-camera rotation (rows are the camera axes in world coords)."""
    pos = np.asarray(position, dtype=float)
    look = np.asarray(look_at, dtype=float)
    z = look - pos
    z /= np.linalg.norm(z)
    ref = np.array([0.0, 1.0, 0.0])
    x = np.cross(ref, z)
    n = np.linalg.norm(x)
    if n < 1e-9:
        ref = np.array([1.0, 0.0, 0.0])
        x = np.cross(ref, z)
        n = np.linalg.norm(x)
    x /= n
    y = np.cross(z, x)
    return np.stack([x, y, z])


def true_relative_pose(spec: SceneSpec, i: int = 0, j: int = 1) -> RelativePose:
    """Ground-truth pose between two scene cameras; metric scale included."""
    ci = np.asarray(spec.cameras[i].position, dtype=float)
    cj = np.asarray(spec.cameras[j].position, dtype=float)
    Ri = camera_rotation(ci, spec.cameras[i].look_at)
    Rj = camera_rotation(cj, spec.cameras[j].look_at)
    R = Rj @ Ri.T
    t_metric = Rj @ (ci - cj)
    scale = float(np.linalg.norm(t_metric))
    if scale < 1e-9:
        return RelativePose(R, np.zeros(3), 1.0)
    return RelativePose(R, t_metric / scale, scale)


def relative_angle_deg(spec: SceneSpec, i: int = 0, j: int = 1) -> float:
    """Angle between the two cameras' viewing directions."""
    fi = (np.asarray(spec.cameras[i].look_at, float)
          - np.asarray(spec.cameras[i].position, float))
    fj = (np.asarray(spec.cameras[j].look_at, float)
          - np.asarray(spec.cameras[j].position, float))
    c = fi @ fj / (np.linalg.norm(fi) * np.linalg.norm(fj))
    return math.degrees(math.acos(np.clip(c, -1.0, 1.0)))


# --- scene and renderer -------------------------------------------------------------

class Scene:
    """Validated scene with texture and geometry closures."""

    def __init__(self, spec: SceneSpec):
        spec.validate()
        self.spec = spec
        self.noise = ValueNoise2D(spec.texture_seed, cell_mm=18.0, octaves=5)
        self.card_pattern = make_card_pattern(spec.card.pattern_seed)
        self._card_cos = math.cos(math.radians(spec.card.angle_deg))
        self._card_sin = math.sin(math.radians(spec.card.angle_deg))

    # -- appearance

    def albedo(self, x, y, z, labels):
        """Intensity in [0, 255] at world surface points."""
        spec = self.spec
        # shear the 2-D noise with height so vertical faces carry texture
        tex = self.noise(x + 0.37 * z, y + 0.23 * z)
        base = np.full_like(x, 128.0)
        base += np.where(labels == 1, 18.0, 0.0)      # plate a bit brighter
        base += np.where(labels >= 2, -10.0 * (labels - 1), 0.0)
        out = base + (tex - 0.5) * 2.0 * spec.texture_contrast

        # card artwork overrides the table texture inside the card rectangle
        on_table = (labels == 0) & (np.abs(z) < 1e-6)
        cx, cy = spec.card.center
        lx = (x - cx) * self._card_cos + (y - cy) * self._card_sin
        ly = -(x - cx) * self._card_sin + (y - cy) * self._card_cos
        in_card = (on_table & (np.abs(lx) <= spec.card.width / 2)
                   & (np.abs(ly) <= spec.card.height / 2))
        if np.any(in_card):
            pat = self.card_pattern.pixels.astype(float)
            ph, pw = pat.shape
            # pixel-area convention (physical width spans pw pixels), and
            # ly is negated so a top-down view shows the pattern rotated,
            # not mirrored (as a printed card laid face-up would appear)
            u = (lx[in_card] / spec.card.width + 0.5) * pw - 0.5
            v = (-ly[in_card] / spec.card.height + 0.5) * ph - 0.5
            u = np.clip(u, 0.0, pw - 1.0)
            v = np.clip(v, 0.0, ph - 1.0)
            u0 = np.clip(np.floor(u).astype(int), 0, pw - 2)
            v0 = np.clip(np.floor(v).astype(int), 0, ph - 2)
            fu = u - u0
            fv = v - v0
            vals = ((1 - fv) * ((1 - fu) * pat[v0, u0] + fu * pat[v0, u0 + 1])
                    + fv * ((1 - fu) * pat[v0 + 1, u0] + fu * pat[v0 + 1, u0 + 1]))
            out[in_card] = vals
        return out

    # -- geometry

    def _plane_hits(self, origin, dirs, z_level, region):
        dz = dirs[:, 2]
        ok = dz < -1e-12
        t = np.where(ok, (z_level - origin[2]) / np.where(ok, dz, -1.0), np.inf)
        px = origin[0] + t * dirs[:, 0]
        py = origin[1] + t * dirs[:, 1]
        inside = region(px, py) & ok & (t > 1e-9)
        return np.where(inside, t, np.inf)

    def _rho2(self, x, y, frac=1.0):
        a, b = self.spec.plate.semi_axes
        return (x / (a * frac)) ** 2 + (y / (b * frac)) ** 2

    def _hemisphere_hits(self, origin, dirs, item):
        z0 = self.spec.plate.bottom_height
        center = np.array([item.center[0], item.center[1], z0])
        oc = origin - center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - item.radius ** 2
        disc = b * b - 4 * a * c
        hit = disc > 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        z1 = origin[2] + t1 * dirs[:, 2]
        z2 = origin[2] + t2 * dirs[:, 2]
        ok1 = hit & (t1 > 1e-9) & (z1 >= z0 - 1e-9)
        ok2 = hit & (t2 > 1e-9) & (z2 >= z0 - 1e-9)
        t = np.where(ok1, t1, np.where(ok2, t2, np.inf))
        return t

    def _box_hits(self, origin, dirs, item):
        z0 = self.spec.plate.bottom_height
        sx, sy, h = item.size
        lo = np.array([item.center[0] - sx / 2, item.center[1] - sy / 2, z0])
        hi = np.array([item.center[0] + sx / 2, item.center[1] + sy / 2, z0 + h])
        inv = np.where(np.abs(dirs) > 1e-12, 1.0 / np.where(
            np.abs(dirs) > 1e-12, dirs, 1.0), np.inf * np.sign(dirs + 1e-300))
        t_lo = (lo[None, :] - origin[None, :]) * inv
        t_hi = (hi[None, :] - origin[None, :]) * inv
        t_near = np.minimum(t_lo, t_hi).max(axis=1)
        t_far = np.maximum(t_lo, t_hi).min(axis=1)
        ok = (t_near <= t_far) & (t_far > 0) & (t_near > 1e-9)
        return np.where(ok, t_near, np.inf)

    def render(self, camera_index: int, K: CameraIntrinsics):
        """Rasterize one camera: (ImageGray, depth mm, labels).

        Depth is the exact distance along the camera axis; zero marks
        pixels whose ray escapes the scene. Labels: 0 background (table
        and card), 1 plate, 2.. food items.
        """
        cam = self.spec.cameras[camera_index]
        C = np.asarray(cam.position, dtype=float)
        R = camera_rotation(C, cam.look_at)
        H, W = K.height, K.width
        us, vs = np.meshgrid(np.arange(W, dtype=float),
                             np.arange(H, dtype=float))
        d_cam = np.stack([(us.ravel() - K.cx) / K.fx,
                          (vs.ravel() - K.cy) / K.fy,
                          np.ones(H * W)], axis=1)
        dirs = d_cam @ R  # rows: world direction per pixel, unit z in cam

        plate = self.spec.plate
        inner = plate.rim_inner_fraction
        hits = [
            (0, self._plane_hits(C, dirs, 0.0,
                                 lambda x, y: self._rho2(x, y) > 1.0)),
            (1, self._plane_hits(C, dirs, plate.rim_height,
                                 lambda x, y: (self._rho2(x, y) <= 1.0)
                                 & (self._rho2(x, y, inner) >= 1.0))),
            (1, self._plane_hits(C, dirs, plate.bottom_height,
                                 lambda x, y: self._rho2(x, y, inner) < 1.0)),
        ]
        for k, item in enumerate(self.spec.items):
            if item.kind == "hemisphere":
                t = self._hemisphere_hits(C, dirs, item)
            else:
                t = self._box_hits(C, dirs, item)
            hits.append((2 + k, t))

        all_t = np.stack([t for _, t in hits])
        label_of = np.array([lab for lab, _ in hits], dtype=np.uint8)
        pick = np.argmin(all_t, axis=0)
        t_best = all_t[pick, np.arange(all_t.shape[1])]
        valid = np.isfinite(t_best)
        labels = np.where(valid, label_of[pick], 0).astype(np.uint8)

        pts = C[None, :] + t_best[:, None] * dirs
        x = np.where(valid, pts[:, 0], 0.0)
        y = np.where(valid, pts[:, 1], 0.0)
        z = np.where(valid, pts[:, 2], 0.0)
        intensity = self.albedo(x, y, z, labels)

        if self.spec.specular:
            for k, item in enumerate(self.spec.items):
                cx, cy = item.center
                # highlight drifts with the viewpoint
                sx = cx + 0.08 * (C[0] - cx)
                sy = cy + 0.08 * (C[1] - cy)
                d2 = (x - sx) ** 2 + (y - sy) ** 2
                intensity += np.where(labels == 2 + k,
                                      90.0 * np.exp(-d2 / (2 * 6.0 ** 2)), 0.0)

        img = np.clip(np.round(intensity), 0, 255).astype(np.uint8)
        depth = np.where(valid, t_best, 0.0)
        return (ImageGray(img.reshape(H, W)),
                depth.reshape(H, W),
                labels.reshape(H, W))


def make_scene(spec: SceneSpec) -> Scene:
    """Validate a spec and build the deterministic scene for it."""
    return Scene(spec)


# --- volume oracle ---------------------------------------------------------------

def analytic_volume(spec: SceneSpec, pitch_mm: float = 0.25) -> dict:
    """Numeric integration of each item's height field over its footprint.

    Returns {label: milliliters} with labels matching the renderer
    (first item is label 2).
    """
    out = {}
    for k, item in enumerate(spec.items):
        x0, y0, x1, y1 = item.bbox()
        nx = max(2, int(math.ceil((x1 - x0) / pitch_mm)))
        ny = max(2, int(math.ceil((y1 - y0) / pitch_mm)))
        xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
        ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
        xx, yy = np.meshgrid(xs, ys)
        h = item.height(xx, yy)
        cell = ((x1 - x0) / nx) * ((y1 - y0) / ny)
        out[2 + k] = float(h.sum() * cell / 1000.0)
    return out


def total_volume(spec: SceneSpec, pitch_mm: float = 0.25) -> float:
    return float(sum(analytic_volume(spec, pitch_mm).values()))


# --- scene presets ----------------------------------------------------------------

def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=1000.0, fy=1000.0, cx=511.5, cy=383.5,
                            width=1024, height=768)


def make_camera_pair(distance_mm: float, relative_angle_deg_target: float,
                     azimuth_deg: float = 0.0,
                     look_at=(0.0, 0.0, 0.0)) -> list:
    """Two cameras at the same distance whose view directions differ by
    the requested angle, tilted symmetrically about the vertical."""
    half = math.radians(relative_angle_deg_target / 2.0)
    az = math.radians(azimuth_deg)
    cams = []
    for sign in (-1.0, 1.0):
        tilt = sign * half
        # position on the tilt circle, rotated by the azimuth
        local = np.array([math.sin(tilt), 0.0, math.cos(tilt)]) * distance_mm
        rot = np.array([[math.cos(az), -math.sin(az), 0.0],
                        [math.sin(az), math.cos(az), 0.0],
                        [0.0, 0.0, 1.0]])
        pos = rot @ local + np.asarray(look_at, dtype=float)
        cams.append(CameraPose(tuple(pos), tuple(look_at)))
    return cams


def make_test_scenes(count: int, master_seed: int = 0) -> list:
    """Deterministic batch of (name, SceneSpec) acceptance scenes."""
    rng = np.random.default_rng(master_seed)
    scenes = []
    kinds = ["hemisphere", "box", "two_items"]
    for i in range(count):
        kind = kinds[i % len(kinds)]
        angle = float(rng.uniform(15.0, 25.0))
        dist = float(rng.uniform(420.0, 560.0))
        azim = float(rng.uniform(0.0, 360.0))
        cameras = make_camera_pair(dist, angle, azim)
        if kind == "hemisphere":
            # portion-sized items: a main-course heap is 150-450 mL
            items = [HemisphereItem((float(rng.uniform(-12, 12)),
                                     float(rng.uniform(-10, 10))),
                                    float(rng.uniform(36, 48)))]
        elif kind == "box":
            items = [BoxItem((float(rng.uniform(-10, 10)),
                              float(rng.uniform(-8, 8))),
                             (float(rng.uniform(62, 88)),
                              float(rng.uniform(56, 74)),
                              float(rng.uniform(24, 38))))]
        else:
            items = [
                HemisphereItem((-36.0 + float(rng.uniform(-4, 4)),
                                8.0 + float(rng.uniform(-4, 4))),
                               float(rng.uniform(25, 31))),
                BoxItem((38.0 + float(rng.uniform(-4, 4)),
                         -10.0 + float(rng.uniform(-4, 4))),
                        (float(rng.uniform(44, 54)),
                         float(rng.uniform(40, 50)),
                         float(rng.uniform(22, 32)))),
            ]
        spec = SceneSpec(items=items, cameras=cameras,
                         texture_seed=int(rng.integers(1, 2 ** 31)))
        spec.validate()
        scenes.append((f"scene_{i:03d}_{kind}_{angle:.0f}deg", spec))
    return scenes


# --- scene directory I/O -----------------------------------------------------------

def write_scene_dir(spec: SceneSpec, out_dir, K: CameraIntrinsics | None = None,
                    camera_indices=(0, 1)) -> Path:
    """Render a scene into the directory layout the pipeline consumes.

    Writes img1.png, img2.png, seg1.png (indexed), card_pattern.png,
    intrinsics.json, scene.json, and ground_truth.json.
    """
    from .image import save_indexed_png

    K = K or default_intrinsics()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = make_scene(spec)
    i, j = camera_indices
    img1, depth1, seg1 = scene.render(i, K)
    img2, _, _ = scene.render(j, K)
    img1.save(out / "img1.png")
    img2.save(out / "img2.png")
    save_indexed_png(seg1, out / "seg1.png")
    scene.card_pattern.save(out / "card_pattern.png")
    (out / "intrinsics.json").write_text(json.dumps(K.to_json_dict(), indent=2))
    (out / "scene.json").write_text(json.dumps(spec.to_json_dict(), indent=2))
    pose = true_relative_pose(spec, i, j)
    truth = {
        "volumes_ml": {str(k): v for k, v in analytic_volume(spec).items()},
        "relative_angle_deg": relative_angle_deg(spec, i, j),
        "scale_mm_per_unit": pose.scale,
        "rotation": pose.rotation.tolist(),
        "translation": pose.translation.tolist(),
        "bottom_height_mm": spec.plate.bottom_height,
        "card_width_mm": spec.card.width,
    }
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2))
    return out
