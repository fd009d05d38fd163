"""Synthetic layered light fields with known disparity.

Scenes are stacks of textured planar layers, each with a constant disparity.
Textures are evaluated analytically at every sample position, so views need
no resampling. A view at angular offset du shows each layer at ``x - d * du``;
at every pixel the covering layer with the largest disparity is visible (ties go
to the earlier layer in the list).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, Field

from lfsynth.errors import ArgumentError, ConfigError, FormatError
from lfsynth.lfops import AppearanceFlowField
from lfsynth.lightfield.field import LightField, offset_grid
from lfsynth.lightfield.io import load_array, save_array

logger = logging.getLogger(__name__)

DEFAULT_DISPARITY_RANGE = (-1.5, 1.5)
# Random scenes keep their finest detail coarse enough that bilinear
# resampling stays near-exact.
NOISE_PERIOD_RANGE = (32.0, 48.0)
CHECKER_PERIOD_RANGE = (48.0, 64.0)
CHECKER_SHARPNESS = 0.75
MANIFEST_NAME = "manifest.json"


class TextureSpec(BaseModel):
    """Procedural texture evaluated in center-view pixel coordinates.

    ``noise``: sum of random sinusoids over octaves; ``checker``: smooth
    checkerboard; ``gradient``: linear ramp across the frame.
    """

    kind: Literal["noise", "checker", "gradient"] = "noise"
    seed: int = 0
    period: float = Field(default=16.0, gt=2.0, description="Base period in pixels")
    octaves: int = Field(default=2, ge=1, le=6)
    contrast: float = Field(default=1.0, gt=0.0, le=1.0)
    sharpness: float = Field(default=2.0, gt=0.0, description="Checker edge steepness")
    angle: float = Field(default=0.0, description="Ramp/checker orientation in radians")


class MaskSpec(BaseModel):
    """Layer coverage in the layer's own (center-view) coordinates."""

    kind: Literal["full", "disk", "rect"] = "full"
    cx: float = 0.0
    cy: float = 0.0
    radius: float = Field(default=8.0, gt=0.0)
    half_width: float = Field(default=8.0, gt=0.0)
    half_height: float = Field(default=8.0, gt=0.0)


class LayerSpec(BaseModel):
    disparity: float = Field(allow_inf_nan=False)
    mask: MaskSpec = Field(default_factory=MaskSpec)
    texture: TextureSpec = Field(default_factory=TextureSpec)


class SceneSpec(BaseModel):
    """Layers ordered front to back; the back layer must cover the frame."""

    layers: list[LayerSpec] = Field(min_length=1)
    hw: tuple[int, int] = (64, 64)
    angular: int = Field(default=5, ge=1)
    seed: int = 0

    def check(self) -> None:
        h, w = self.hw
        if h < 1 or w < 1:
            raise ConfigError(f"scene extent must be positive, got {self.hw}")
        if self.layers[-1].mask.kind != "full":
            raise ConfigError("the back layer must have full coverage (mask kind 'full')")
        reach = self.angular // 2
        for i, layer in enumerate(self.layers):
            if abs(layer.disparity) * reach > w / 4:
                raise ConfigError(
                    f"layer {i}: |disparity| {abs(layer.disparity)} x {reach} views exceeds "
                    f"W/4 = {w / 4}"
                )

    @property
    def disparities(self) -> list[float]:
        return [layer.disparity for layer in self.layers]


def _texture_values(
    texture: TextureSpec, x: np.ndarray, y: np.ndarray, hw: tuple[int, int]
) -> np.ndarray:
    rng = np.random.default_rng(texture.seed)
    amplitude = 0.45 * texture.contrast
    if texture.kind == "gradient":
        h, w = hw
        direction = np.array([np.cos(texture.angle), np.sin(texture.angle)])
        span = abs(direction[0]) * w + abs(direction[1]) * h
        centered = (x - (w - 1) / 2.0) * direction[0] + (y - (h - 1) / 2.0) * direction[1]
        return 0.5 + amplitude * np.clip(centered / span * 2.0, -1.0, 1.0)
    if texture.kind == "checker":
        c, s = np.cos(texture.angle), np.sin(texture.angle)
        xr, yr = c * x + s * y, -s * x + c * y
        k = 2.0 * np.pi / texture.period
        sharp = texture.sharpness
        pattern = np.tanh(sharp * np.sin(k * xr)) * np.tanh(sharp * np.sin(k * yr))
        return 0.5 + amplitude * pattern / np.tanh(sharp) ** 2
    total = np.zeros_like(x)
    norm = 0.0
    for octave in range(texture.octaves):
        weight = 0.5**octave
        freq = 2.0 * np.pi * 2**octave / texture.period
        for _ in range(3):
            theta = rng.uniform(0.0, np.pi)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            total = total + weight * np.sin(freq * (np.cos(theta) * x + np.sin(theta) * y) + phase)
            norm += weight
    return 0.5 + amplitude * total / norm


def _coverage(mask: MaskSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if mask.kind == "full":
        return np.ones(x.shape, dtype=bool)
    if mask.kind == "disk":
        return (x - mask.cx) ** 2 + (y - mask.cy) ** 2 <= mask.radius**2
    return (np.abs(x - mask.cx) <= mask.half_width) & (np.abs(y - mask.cy) <= mask.half_height)


def _visible_layer(
    spec: SceneSpec, x: np.ndarray, y: np.ndarray, dx: float, dy: float
) -> np.ndarray:
    """Index of the visible layer at view positions (x, y) for view offset (dx, dy)."""
    best = np.full(x.shape, -1, dtype=np.int64)
    best_d = np.full(x.shape, -np.inf)
    for i, layer in enumerate(spec.layers):
        d = layer.disparity
        covered = _coverage(layer.mask, x - d * dx, y - d * dy)
        take = covered & (d > best_d)
        best[take] = i
        best_d[take] = d
    return best


def _sample_grid(hw: tuple[int, int], scale: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = hw
    ys = (np.arange(h * scale) + 0.5) / scale - 0.5
    xs = (np.arange(w * scale) + 0.5) / scale - 0.5
    y, x = np.meshgrid(ys, xs, indexing="ij")
    return x, y


def render(spec: SceneSpec, scale: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Render views [U, U, sH, sW, 1] and their visible disparity [U, U, sH, sW].

    Sample i at scale s sits at center-view coordinate (i + 0.5) / s - 0.5.
    """
    spec.check()
    if scale < 1:
        raise ArgumentError(f"render scale must be >= 1, got {scale}")
    x, y = _sample_grid(spec.hw, scale)
    offsets = offset_grid(spec.angular)
    views = np.empty((spec.angular, spec.angular, *x.shape, 1))
    disparity = np.empty((spec.angular, spec.angular, *x.shape))
    for v in range(spec.angular):
        for u in range(spec.angular):
            dv, dh = offsets[v, u]
            visible = _visible_layer(spec, x, y, dh, dv)
            image = np.zeros(x.shape)
            disp = np.zeros(x.shape)
            for i, layer in enumerate(spec.layers):
                sel = visible == i
                if not sel.any():
                    continue
                d = layer.disparity
                image[sel] = _texture_values(
                    layer.texture, x[sel] - d * dh, y[sel] - d * dv, spec.hw
                )
                disp[sel] = d
            views[v, u, ..., 0] = image
            disparity[v, u] = disp
    return views, disparity


def box_downsample(views: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks over the two spatial axes of [U,U,H,W,C]."""
    if factor < 1:
        raise ArgumentError(f"box_downsample factor must be >= 1, got {factor}")
    u_v, u_h, h, w, c = views.shape
    if h % factor or w % factor:
        raise ArgumentError(f"extent {(h, w)} not divisible by factor {factor}")
    blocks = views.reshape(u_v, u_h, h // factor, factor, w // factor, factor, c)
    return blocks.mean(axis=(3, 5))


@dataclass(frozen=True)
class GroundTruth:
    """Rendered field with its geometry."""

    spec: SceneSpec
    lf: LightField
    lf_hr: LightField
    view_disparity: np.ndarray
    occlusion: np.ndarray

    @property
    def disparity_map(self) -> np.ndarray:
        """Visible disparity at the center view [H, W]."""
        c = self.lf.center_index
        return self.view_disparity[c[0], c[1]]

    def ideal_flow(self, eta: float) -> AppearanceFlowField:
        """Per-view flow (eta - d(x)) * du that completes the eta shift."""
        offsets = offset_grid(self.spec.angular)
        xy = offsets[:, :, None, None, ::-1]
        flows = (eta - self.view_disparity)[..., None] * xy
        return AppearanceFlowField.from_array(flows)


def _occlusion(spec: SceneSpec, view_disparity: np.ndarray) -> np.ndarray:
    """True where the center view does not show the surface a view sees at that pixel."""
    x, y = _sample_grid(spec.hw, 1)
    offsets = offset_grid(spec.angular)
    occluded = np.zeros(view_disparity.shape, dtype=bool)
    for v in range(spec.angular):
        for u in range(spec.angular):
            dv, dh = offsets[v, u]
            seen = _visible_layer(spec, x, y, dh, dv)
            d = view_disparity[v, u]
            at_center = _visible_layer(spec, x - d * dh, y - d * dv, 0.0, 0.0)
            occluded[v, u] = seen != at_center
    return occluded


def generate(spec: SceneSpec) -> GroundTruth:
    """Render the field at 2x, box-filter it to the working resolution, and derive geometry."""
    spec.check()
    hr_views, _ = render(spec, scale=2)
    lr_views = box_downsample(hr_views, 2)
    _, view_disparity = render(spec, scale=1)
    return GroundTruth(
        spec=spec,
        lf=LightField.from_array(lr_views),
        lf_hr=LightField.from_array(hr_views),
        view_disparity=view_disparity,
        occlusion=_occlusion(spec, view_disparity),
    )


def random_scene(
    rng: np.random.Generator,
    hw: tuple[int, int],
    angular: int,
    disparity_range: tuple[float, float] = DEFAULT_DISPARITY_RANGE,
    seed: int = 0,
) -> SceneSpec:
    """A back plane plus up to two foreground shapes, disparities drawn from the range.

    The back plane takes the smallest disparity so every foreground shape sits
    in front of it, and each shape keeps its center pixel unoccluded in the
    center view.
    """
    h, w = hw
    reach = max(angular // 2, 1)
    limit = w / (4 * reach)
    low, high = max(disparity_range[0], -limit), min(disparity_range[1], limit)
    if low > high:
        raise ConfigError(f"disparity range {disparity_range} is empty after the W/4 limit")

    def texture() -> TextureSpec:
        kind = str(rng.choice(["noise", "noise", "checker"]))
        period_range = CHECKER_PERIOD_RANGE if kind == "checker" else NOISE_PERIOD_RANGE
        return TextureSpec(
            kind=kind,
            seed=int(rng.integers(0, 2**31 - 1)),
            period=float(rng.uniform(*period_range)),
            sharpness=CHECKER_SHARPNESS,
            contrast=float(rng.uniform(0.6, 1.0)),
            angle=float(rng.uniform(0.0, np.pi)),
        )

    def mask() -> MaskSpec:
        cx = float(rng.uniform(0.25, 0.75) * w)
        cy = float(rng.uniform(0.25, 0.75) * h)
        if rng.random() < 0.5:
            return MaskSpec(
                kind="disk", cx=cx, cy=cy, radius=float(rng.uniform(0.1, 0.25) * min(h, w))
            )
        return MaskSpec(
            kind="rect",
            cx=cx,
            cy=cy,
            half_width=float(rng.uniform(0.1, 0.25) * w),
            half_height=float(rng.uniform(0.1, 0.25) * h),
        )

    def anchor(candidate: MaskSpec) -> tuple[np.ndarray, np.ndarray]:
        px = np.array([float(np.clip(round(candidate.cx), 0, w - 1))])
        py = np.array([float(np.clip(round(candidate.cy), 0, h - 1))])
        return px, py

    count = 1 + int(rng.integers(0, 3))
    disparities = sorted((float(rng.uniform(low, high)) for _ in range(count)), reverse=True)
    back_disparity = disparities.pop()
    front: list[LayerSpec] = []
    for disparity in disparities:
        for _ in range(8):
            candidate = mask()
            px, py = anchor(candidate)
            hidden = any(_coverage(layer.mask, px, py)[0] for layer in front)
            if _coverage(candidate, px, py)[0] and not hidden:
                front.append(LayerSpec(disparity=disparity, mask=candidate, texture=texture()))
                break
    back = LayerSpec(disparity=back_disparity, texture=texture())
    return SceneSpec(layers=[*front, back], hw=hw, angular=angular, seed=seed)


def make_dataset(
    n_scenes: int,
    hw: tuple[int, int],
    angular: int,
    seed: int,
    out_dir: str | Path,
    disparity_range: tuple[float, float] = DEFAULT_DISPARITY_RANGE,
    eta: float = 0.8,
) -> dict[str, Any]:
    """Write a corpus of LR/HR fields plus disparity, flow and occlusion sidecars.

    Returns the manifest, which is also written to ``out_dir/manifest.json``.
    """
    if n_scenes < 1:
        raise ArgumentError(f"n_scenes must be >= 1, got {n_scenes}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes: list[dict[str, Any]] = []
    all_disparities: list[float] = []
    for i in range(n_scenes):
        scene_seed = int(np.random.default_rng([seed, i]).integers(0, 2**31 - 1))
        spec = random_scene(
            np.random.default_rng(scene_seed), hw, angular, disparity_range, seed=scene_seed
        )
        truth = generate(spec)
        stem = f"scene_{i:03d}"
        files = {
            "lr": f"{stem}.lf4",
            "hr": f"{stem}.hr.lf4",
            "disparity": f"{stem}.disp.gt.lf4",
            "flow": f"{stem}.flow.gt.lf4",
            "occlusion": f"{stem}.mask.gt.lf4",
        }
        save_array(truth.lf.views.data, out / files["lr"])
        save_array(truth.lf_hr.views.data, out / files["hr"])
        save_array(truth.view_disparity[..., None], out / files["disparity"])
        save_array(truth.ideal_flow(eta).flows.data, out / files["flow"])
        save_array(truth.occlusion[..., None].astype(np.float64), out / files["occlusion"])
        all_disparities.extend(spec.disparities)
        scenes.append({"id": stem, "seed": scene_seed, "files": files, "spec": spec.model_dump()})
        logger.debug(f"Rendered {stem} with disparities {spec.disparities}")

    manifest = {
        "version": 1,
        "angular": angular,
        "hw": list(hw),
        "seed": seed,
        "eta": eta,
        "disparity_range": [min(all_disparities), max(all_disparities)],
        "scenes": scenes,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"Wrote {n_scenes} scenes to {out}")
    return manifest


@dataclass(frozen=True)
class Sample:
    """One training/evaluation example: input view, LR and HR truth, optional geometry."""

    center: np.ndarray
    lr: np.ndarray
    hr: np.ndarray
    scene_id: str = ""
    view_disparity: np.ndarray | None = None
    occlusion: np.ndarray | None = None

    @classmethod
    def from_truth(cls, truth: GroundTruth, scene_id: str = "") -> Sample:
        c = truth.lf.center_index
        lr = truth.lf.views.data
        return cls(
            center=lr[c[0], c[1]].copy(),
            lr=lr.copy(),
            hr=truth.lf_hr.views.data.copy(),
            scene_id=scene_id,
            view_disparity=truth.view_disparity,
            occlusion=truth.occlusion,
        )


def load_corpus(manifest_path: str | Path) -> list[Sample]:
    """Read every scene listed in a corpus manifest."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FormatError(f"Corpus manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
        scenes = manifest["scenes"]
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: invalid manifest ({e})") from e
    root = path.parent
    samples = []
    for scene in scenes:
        files = scene["files"]
        lr = load_array(root / files["lr"])
        c = (lr.shape[0] + 1) // 2 - 1
        samples.append(
            Sample(
                center=lr[c, c].copy(),
                lr=lr,
                hr=load_array(root / files["hr"]),
                scene_id=scene["id"],
                view_disparity=load_array(root / files["disparity"])[..., 0],
                occlusion=load_array(root / files["occlusion"])[..., 0] > 0.5,
            )
        )
    logger.info(f"Loaded {len(samples)} scenes from {path}")
    return samples
