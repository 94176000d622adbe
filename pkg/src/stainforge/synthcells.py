"""Procedural two-domain synthetic cytology corpus with paired ground truth.

Every scene is rasterized once from a deterministic geometric spec and then
re-rendered under each domain's style, so the two domains share pixel-exact
geometry and differ only through the style map. That pairing is the oracle
the evaluation module uses to measure normalization error directly.

Label construction: a scene is positive iff it contains at least one cell
with a large nucleus (nucleus_ratio > 0.55) AND red-ward (eosinophilic)
cytoplasm. The red and blue cytoplasm tints are built to have identical
luma, so part of the label signal lives purely in hue and is destroyed by
grayscale conversion. Negative scenes may contain large-nucleus blue cells
("hard negatives"), which are indistinguishable from positives in
grayscale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import BasisNotFittedError, ConfigError, DataError, IoError
from .imagecore import hsv_to_rgb, rgb_to_hsv, read_png, write_png

POSITIVE = 1
NEGATIVE = 0

EOSINOPHILIC = "eosinophilic"
CYANOPHILIC = "cyanophilic"

NUCLEUS_RATIO_THRESHOLD = 0.55

# Unit tint directions; scaled per cell so both classes land on the exact
# same luma (the hue-only chroma cue).
_EOS_BASE = np.array([1.00, 0.44, 0.61])
_CYAN_BASE = np.array([0.52, 0.62, 1.00])
_NUCLEUS_BASE = np.array([0.36, 0.22, 0.48])
_LUMA = np.array([0.299, 0.587, 0.114])


def _at_luma(base: np.ndarray, luma: float) -> np.ndarray:
    """Scale a tint direction so its luma-weighted sum equals `luma`."""
    return base * (luma / float(base @ _LUMA))


@dataclass(frozen=True)
class CellSpec:
    center: tuple[float, float]  # (x, y) pixels
    axes: tuple[float, float]  # semi-axes, pixels
    rotation: float  # radians
    nucleus_ratio: float  # nucleus/cytoplasm size, in (0, 1)
    irregularity: float  # boundary wobble amplitude, in [0, 1]
    cytoplasm_class: str  # EOSINOPHILIC or CYANOPHILIC
    nucleus_darkness: float  # in [0, 1]
    luma: float  # cytoplasm tint luma, shared across classes


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    background_tint: tuple[float, float, float]
    cells: tuple[CellSpec, ...]
    label: int

    def __post_init__(self):
        if self.label != scene_label_from_cells(self.cells):
            raise ValueError("label inconsistent with cell composition")


def scene_label_from_cells(cells: Iterable[CellSpec]) -> int:
    """Positive iff some cell is both large-nucleus and eosinophilic."""
    for cell in cells:
        if (
            cell.nucleus_ratio > NUCLEUS_RATIO_THRESHOLD
            and cell.cytoplasm_class == EOSINOPHILIC
        ):
            return POSITIVE
    return NEGATIVE


@dataclass(frozen=True)
class DomainStyle:
    """Per-channel affine -> HSV saturation/hue adjustment -> gamma -> clamp."""

    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    saturation: float = 1.0
    hue_turns: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.gain) <= 0 or self.gamma <= 0:
            raise ConfigError("style gains and gamma must be positive")

    @classmethod
    def identity(cls) -> "DomainStyle":
        return cls()

    def apply(self, img: np.ndarray) -> np.ndarray:
        x = np.clip(img * np.asarray(self.gain) + np.asarray(self.bias), 0.0, 1.0)
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = (hsv[..., 0] + self.hue_turns) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * self.saturation, 0.0, 1.0)
        x = hsv_to_rgb(hsv)
        x = np.power(x, self.gamma)
        return np.clip(x, 0.0, 1.0).astype(np.float32)

    def to_dict(self) -> dict:
        return {
            "gain": list(self.gain),
            "bias": list(self.bias),
            "saturation": self.saturation,
            "hue_turns": self.hue_turns,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainStyle":
        return cls(
            gain=tuple(d["gain"]),
            bias=tuple(d["bias"]),
            saturation=d["saturation"],
            hue_turns=d["hue_turns"],
            gamma=d["gamma"],
        )


# Shipped defaults: a warm, saturated, bright source domain and a cool,
# desaturated, dark target domain. Both preserve the red-dominance ordering
# of eosinophilic cytoplasm so the color-encoding mask stays meaningful in
# either domain.
SOURCE_STYLE = DomainStyle(
    gain=(1.02, 1.00, 0.97),
    bias=(0.01, 0.0, 0.0),
    saturation=1.25,
    hue_turns=0.01,
    gamma=0.88,
)
TARGET_STYLE = DomainStyle(
    gain=(0.90, 0.97, 1.06),
    bias=(-0.02, 0.0, 0.02),
    saturation=0.55,
    hue_turns=-0.035,
    gamma=1.55,
)

DEFAULT_STYLES = {"S": SOURCE_STYLE, "T": TARGET_STYLE}


def sample_scene(
    rng: np.random.Generator,
    label: int,
    size: int = 64,
    hard_negative_rate: float = 0.5,
) -> SceneSpec:
    """Draw a scene spec of the requested class from `rng`.

    Negative scenes become "hard negatives" (large-nucleus blue cell, which
    matches positives in grayscale) at `hard_negative_rate`.
    """
    bg_r = rng.uniform(0.76, 0.82)
    bg = (bg_r, bg_r + rng.uniform(0.0, 0.02), bg_r + rng.uniform(0.08, 0.13))

    n_cells = int(rng.integers(1, 4))
    roles = []
    if label == POSITIVE:
        roles.append(("big", EOSINOPHILIC))
    elif rng.random() < hard_negative_rate:
        roles.append(("big", CYANOPHILIC))
    safe = [("small", EOSINOPHILIC), ("small", CYANOPHILIC), ("big", CYANOPHILIC)]
    while len(roles) < n_cells:
        roles.append(safe[int(rng.integers(0, len(safe)))])
    order = rng.permutation(len(roles))

    cells = []
    for i in order:
        nucleus_size, cls = roles[i]
        a = size * rng.uniform(0.14, 0.25)
        b = a * rng.uniform(0.65, 0.95)
        margin = min(a + 3.0, size / 2.0)
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        ratio = (
            rng.uniform(0.60, 0.85) if nucleus_size == "big" else rng.uniform(0.28, 0.50)
        )
        cells.append(
            CellSpec(
                center=(cx, cy),
                axes=(a, b),
                rotation=rng.uniform(0.0, np.pi),
                nucleus_ratio=ratio,
                irregularity=rng.uniform(0.0, 0.35),
                cytoplasm_class=cls,
                nucleus_darkness=rng.uniform(0.35, 0.75),
                luma=rng.uniform(0.45, 0.62),
            )
        )
    spec = SceneSpec(
        scene_id=-1, background_tint=bg, cells=tuple(cells), label=label
    )
    return spec


def _ellipse_coverage(
    size: int, cell: CellSpec, scale: float, wobble: bool
) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of a (possibly wobbled) ellipse."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx = xs - cell.center[0]
    dy = ys - cell.center[1]
    c, s = np.cos(cell.rotation), np.sin(cell.rotation)
    u = (c * dx + s * dy) / (cell.axes[0] * scale)
    v = (-s * dx + c * dy) / (cell.axes[1] * scale)
    r = np.sqrt(u * u + v * v)
    boundary = 1.0
    if wobble and cell.irregularity > 0:
        phi = np.arctan2(v, u)
        boundary = 1.0 + 0.22 * cell.irregularity * np.sin(5.0 * phi + 3.0 * cell.rotation)
    # ~1px soft edge, expressed in normalized radius units
    edge = 1.2 / (min(cell.axes) * scale)
    return np.clip((boundary - r) / edge + 0.5, 0.0, 1.0)


def rasterize_scene(spec: SceneSpec, size: int = 64) -> np.ndarray:
    """Deterministic pre-style render: background, cytoplasm, nucleus."""
    img = np.ones((size, size, 3), dtype=np.float64) * np.asarray(spec.background_tint)
    for cell in spec.cells:
        base = _EOS_BASE if cell.cytoplasm_class == EOSINOPHILIC else _CYAN_BASE
        cyto_color = _at_luma(base, cell.luma)
        alpha = _ellipse_coverage(size, cell, scale=1.0, wobble=True)[..., None]
        img = alpha * cyto_color + (1.0 - alpha) * img
        nucleus_luma = 0.30 - 0.17 * cell.nucleus_darkness
        nuc_color = _at_luma(_NUCLEUS_BASE, nucleus_luma)
        # factor 0.92 keeps the nucleus inside the wobbled cytoplasm boundary
        alpha = _ellipse_coverage(
            size, cell, scale=cell.nucleus_ratio * 0.92, wobble=False
        )[..., None]
        img = alpha * nuc_color + (1.0 - alpha) * img
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_scene(spec: SceneSpec, style: DomainStyle, size: int = 64) -> np.ndarray:
    return style.apply(rasterize_scene(spec, size))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    scene_id: int
    domain: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    seed: int
    size: int
    styles: dict[str, DomainStyle]
    hard_negative_rate: float
    entries: list[ManifestEntry] = field(default_factory=list)

    def save(self, path: Path) -> None:
        header = {
            "record": "header",
            "seed": self.seed,
            "size": self.size,
            "hard_negative_rate": self.hard_negative_rate,
            "styles": {k: v.to_dict() for k, v in self.styles.items()},
        }
        lines = [json.dumps(header, sort_keys=True)]
        for e in self.entries:
            lines.append(
                json.dumps(
                    {
                        "record": "entry",
                        "path": e.path,
                        "scene_id": e.scene_id,
                        "domain": e.domain,
                        "label": e.label,
                        "split": e.split,
                    },
                    sort_keys=True,
                )
            )
        try:
            path.write_text("\n".join(lines) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise IoError(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise DataError(f"empty manifest {path}")
        header = json.loads(lines[0])
        manifest = cls(
            seed=header["seed"],
            size=header["size"],
            styles={
                k: DomainStyle.from_dict(v) for k, v in header["styles"].items()
            },
            hard_negative_rate=header["hard_negative_rate"],
        )
        for line in lines[1:]:
            rec = json.loads(line)
            manifest.entries.append(
                ManifestEntry(
                    path=rec["path"],
                    scene_id=rec["scene_id"],
                    domain=rec["domain"],
                    label=rec["label"],
                    split=rec["split"],
                )
            )
        return manifest


def scene_rng(master_seed: int, scene_id: int) -> np.random.Generator:
    """Independent per-scene substream; serial and parallel generation agree."""
    return np.random.default_rng([master_seed, scene_id])


def generate_dataset(
    out_dir: str | Path,
    seed: int,
    train_scenes: int = 2000,
    test_scenes: int = 500,
    size: int = 64,
    styles: dict[str, DomainStyle] | None = None,
    hard_negative_rate: float = 0.5,
) -> DatasetManifest:
    """Render the paired corpus to disk and write its manifest.

    Scene ids alternate negative/positive, so each split is exactly class
    balanced; scene counts must be even. Every scene id is rendered once per
    domain, byte-identically reproducible from `seed`.
    """
    if train_scenes % 2 or test_scenes % 2:
        raise ConfigError("train_scenes and test_scenes must be even for 1:1 balance")
    if train_scenes <= 0:
        raise ConfigError("train_scenes must be positive")
    styles = dict(styles or DEFAULT_STYLES)
    out_dir = Path(out_dir)
    manifest = DatasetManifest(
        seed=seed, size=size, styles=styles, hard_negative_rate=hard_negative_rate
    )
    splits = [("train", 0, train_scenes), ("test", train_scenes, test_scenes)]
    for split, id0, count in splits:
        for scene_id in range(id0, id0 + count):
            label = scene_id % 2
            rng = scene_rng(seed, scene_id)
            spec = sample_scene(
                rng, label, size=size, hard_negative_rate=hard_negative_rate
            )
            spec = replace(spec, scene_id=scene_id)
            raster = rasterize_scene(spec, size)
            for domain, style in styles.items():
                rel = f"{domain}/{split}/scene_{scene_id:06d}.png"
                write_png(out_dir / rel, style.apply(raster))
                manifest.entries.append(
                    ManifestEntry(
                        path=rel,
                        scene_id=scene_id,
                        domain=domain,
                        label=label,
                        split=split,
                    )
                )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


@dataclass
class PatchSet:
    """In-memory stack of labeled patches from one (domain, split)."""

    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    scene_ids: np.ndarray  # (N,) int64
    domain: str

    def __len__(self) -> int:
        return len(self.labels)


def load_patches(data_dir: str | Path, domain: str, split: str) -> PatchSet:
    """Load every patch of one domain/split, ordered by scene id."""
    data_dir = Path(data_dir)
    manifest = DatasetManifest.load(data_dir / "manifest.jsonl")
    entries = sorted(
        (e for e in manifest.entries if e.domain == domain and e.split == split),
        key=lambda e: e.scene_id,
    )
    if not entries:
        raise DataError(f"no entries for domain={domain} split={split}")
    images = np.stack([read_png(data_dir / e.path) for e in entries])
    return PatchSet(
        images=images,
        labels=np.array([e.label for e in entries], dtype=np.int64),
        scene_ids=np.array([e.scene_id for e in entries], dtype=np.int64),
        domain=domain,
    )


@dataclass(frozen=True)
class HsvJitterRanges:
    hue: tuple[float, float] = (-0.08, 0.08)
    saturation: tuple[float, float] = (0.60, 1.40)
    value: tuple[float, float] = (0.80, 1.25)


def hsv_jitter_augment(
    img: np.ndarray, rng: np.random.Generator, ranges: HsvJitterRanges
) -> np.ndarray:
    """Random hue shift plus saturation/value scaling, all drawn uniformly."""
    dh = rng.uniform(*ranges.hue)
    s = rng.uniform(*ranges.saturation)
    v = rng.uniform(*ranges.value)
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * s, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * v, 0.0, 1.0)
    return hsv_to_rgb(hsv).astype(np.float32)


@dataclass(frozen=True)
class PcaBasis:
    """Eigendecomposition of the corpus-wide 3x3 RGB pixel covariance."""

    eigenvalues: np.ndarray  # (3,)
    eigenvectors: np.ndarray  # (3, 3), columns are eigenvectors


def fit_pca_basis(images: Iterable[np.ndarray]) -> PcaBasis:
    pixels = [img.reshape(-1, 3).astype(np.float64) for img in images]
    if not pixels:
        raise DataError("fit_pca_basis needs at least one image")
    stacked = np.concatenate(pixels, axis=0)
    cov = np.cov(stacked, rowvar=False)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    return PcaBasis(eigenvalues=eigenvalues, eigenvectors=eigenvectors)


def pca_color_augment(
    img: np.ndarray,
    rng: np.random.Generator,
    magnitude: float,
    basis: PcaBasis | None,
) -> np.ndarray:
    """Shift every pixel along the corpus color principal axes."""
    if basis is None:
        raise BasisNotFittedError("PCA basis not fitted; call fit_pca_basis first")
    alphas = rng.normal(0.0, magnitude, size=3)
    shift = basis.eigenvectors @ (alphas * basis.eigenvalues)
    return np.clip(img + shift, 0.0, 1.0).astype(np.float32)
