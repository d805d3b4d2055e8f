"""Synthetic CT-like volumes with ground-truth lung masks and paired reports.

Each phantom is a body ellipsoid (+40 HU) over a -1000 HU background with
two lung ellipsoids (default -850 HU plus Gaussian noise, sigma 20 HU).
Diseased studies add a subpleural band: the shell of each lung ellipsoid at
normalized radius rho >= rho0, textured with a 2-voxel checkerboard plus
uniform noise, with HU = -420 - amplitude * u for u in [0.25, 1). The band
stays strictly below -400 HU so threshold segmentation still recovers the
full lung; rho0 is set from the requested band volume fraction
(fraction = 1 - rho0^3).

Study sets write .hvol volumes, ground-truth masks, sectioned report texts,
and a JSONL manifest with stratified 80/10/10 pretrain/val/test splits.
All randomness derives from numpy SeedSequence([master_seed, study_index]).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import HU_MAX, HU_MIN, HuVolume, save_mask, save_volume

DEFAULT_DIMS = (96, 128, 128)
BACKGROUND_HU = -1000.0
BODY_HU = 40.0
LUNG_HU = -850.0
NOISE_SIGMA = 20.0
BAND_CEILING_HU = -420.0
SPLIT_WEIGHTS = (8, 1, 1)  # pretrain : val : test
SPLITS = ("pretrain", "val", "test")


@dataclass(frozen=True)
class PhantomSpec:
    """Complete recipe for one volume; all geometry in voxel units."""

    seed: int
    dims: tuple[int, int, int] = DEFAULT_DIMS
    ild: bool = False
    amplitude: float = 200.0
    band_fraction: float = 0.25
    lung_hu: float = LUNG_HU
    noise_sigma: float = NOISE_SIGMA
    # fractions of the volume extent; None derives canonical geometry
    body_semi: tuple[float, float, float] | None = None
    lung_semi: tuple[float, float, float] | None = None
    lung_offset_x: float | None = None

    def __post_init__(self) -> None:
        nz, ny, nx = self.dims
        if ny < 64 or nx < 64:
            raise ValueError(f"in-plane dims must be >= 64, got {self.dims}")
        if nz < 8:
            raise ValueError(f"axial dim must be >= 8, got {self.dims}")
        if self.ild and self.amplitude <= 0:
            raise ValueError("amplitude must be > 0 for diseased phantoms")
        if self.ild and not 0.05 <= self.band_fraction <= 0.5:
            raise ValueError(f"band_fraction out of range: {self.band_fraction}")


def _ellipsoid_rho2(dims: tuple[int, int, int], center: tuple[float, float, float],
                    semi: tuple[float, float, float]) -> np.ndarray:
    """Squared normalized radius of every voxel w.r.t. one ellipsoid."""
    nz, ny, nx = dims
    z = (np.arange(nz, dtype=np.float64) - center[0]) / semi[0]
    y = (np.arange(ny, dtype=np.float64) - center[1]) / semi[1]
    x = (np.arange(nx, dtype=np.float64) - center[2]) / semi[2]
    return z[:, None, None] ** 2 + y[None, :, None] ** 2 + x[None, None, :] ** 2


def _geometry(spec: PhantomSpec):
    nz, ny, nx = spec.dims
    body_f = spec.body_semi if spec.body_semi is not None else (0.46, 0.40, 0.46)
    lung_f = spec.lung_semi if spec.lung_semi is not None else (0.30, 0.28, 0.20)
    off_f = spec.lung_offset_x if spec.lung_offset_x is not None else 0.2125
    center = ((nz - 1) / 2.0, (ny - 1) / 2.0, (nx - 1) / 2.0)
    body_semi = (body_f[0] * nz, body_f[1] * ny, body_f[2] * nx)
    lung_semi = (lung_f[0] * nz, lung_f[1] * ny, lung_f[2] * nx)
    offset = off_f * nx
    # lungs must stay inside the body and clear of the volume boundary
    if offset + lung_semi[2] >= body_semi[2] or lung_semi[1] >= body_semi[1] \
            or lung_semi[0] >= body_semi[0]:
        raise ValueError("lung ellipsoids extend outside the body")
    if center[1] + body_semi[1] >= ny - 1 or center[2] + body_semi[2] >= nx - 1:
        raise ValueError("body ellipsoid touches the in-plane boundary")
    if 2.0 * (offset - lung_semi[2]) < 2.0:
        raise ValueError("lung ellipsoids touch each other")
    left = (center[0], center[1], center[2] - offset)
    right = (center[0], center[1], center[2] + offset)
    return center, body_semi, lung_semi, left, right


def generate_volume(spec: PhantomSpec) -> tuple[HuVolume, np.ndarray, int]:
    """Build one phantom; returns (volume, ground-truth lung mask, label)."""
    center, body_semi, lung_semi, left, right = _geometry(spec)
    rho2_l = _ellipsoid_rho2(spec.dims, left, lung_semi)
    rho2_r = _ellipsoid_rho2(spec.dims, right, lung_semi)
    rho2 = np.minimum(rho2_l, rho2_r)
    lung = rho2 <= 1.0
    body = _ellipsoid_rho2(spec.dims, center, body_semi) <= 1.0

    hu = np.full(spec.dims, BACKGROUND_HU, dtype=np.float64)
    hu[body] = BODY_HU
    hu[lung] = spec.lung_hu

    rng = np.random.default_rng([spec.seed])
    n_lung = int(lung.sum())
    hu[lung] += rng.normal(0.0, spec.noise_sigma, size=n_lung)

    if spec.ild:
        rho0 = (1.0 - spec.band_fraction) ** (1.0 / 3.0)
        band = lung & (rho2 >= rho0 * rho0)
        nz, ny, nx = spec.dims
        zz, yy, xx = np.meshgrid(np.arange(nz) // 2, np.arange(ny) // 2,
                                 np.arange(nx) // 2, indexing="ij")
        checker = ((zz + yy + xx) % 2).astype(np.float64)
        u = 0.25 + 0.25 * checker[band] + 0.5 * rng.random(int(band.sum()))
        hu[band] = BAND_CEILING_HU - spec.amplitude * u

    voxels = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    vol = HuVolume(voxels=voxels, spacing=(1.0, 1.0, 1.0))
    return vol, lung.astype(np.uint8), int(spec.ild)


# Graded descriptors: reports mention extent/texture (positives) or
# aeration/texture (negatives) so text carries image-correlated detail
# beyond the class label. Negative wording keeps "no" confined to the
# canonical negation phrase.
_EXTENT = ("mild", "moderate", "extensive")
_TEXTURE = ("fine", "coarse", "dense")
_AERATION = ("hyperlucent", "well aerated", "normally aerated")
_SMOOTHNESS = ("smooth", "mildly heterogeneous", "heterogeneous")

_POS_IMPRESSIONS = (
    "Findings consistent with {extent} interstitial lung disease, {texture} reticular pattern.",
    "{Extent} fibrosing interstitial lung disease with {texture} reticulation.",
    "Changes of {extent} interstitial lung disease; {texture} reticulation predominates.",
)
_POS_PARENCHYMA = (
    "{Extent} peripheral subpleural reticulation with {texture} architectural distortion.",
    "{Extent} {texture} reticular opacities with early honeycombing in both lower lobes.",
    "{Extent} fibrous interstitial changes, {texture} in character, with traction bronchiectasis.",
    "{Extent} subpleural interstitial reticulation and {texture} ground glass opacity.",
)
_NEG_IMPRESSIONS = (
    "No evidence of interstitial lung disease.",
    "Normal study. No evidence of interstitial lung disease.",
    "No evidence of interstitial lung disease or other abnormality.",
)
_NEG_PARENCHYMA = (
    "Lungs are clear and {aeration}, with {smooth} background attenuation.",
    "{Aeration} lungs of {smooth} attenuation throughout.",
    "Clear, {aeration} lungs bilaterally; {smooth} parenchymal texture.",
    "Lung volumes preserved; {aeration} parenchyma with {smooth} attenuation.",
)
_AIRWAYS = (
    "Airways are patent to the subsegmental level.",
    "Central airways are patent.",
    "Trachea and mainstem bronchi are unremarkable.",
)
_PLEURA = (
    "Smooth pleural surfaces without effusion.",
    "Pleural spaces are clear.",
    "Intact pleural surfaces bilaterally.",
)


def synth_report(ild: bool, rng: np.random.Generator,
                 extent: int | None = None, texture: int | None = None,
                 aeration: int | None = None) -> str:
    """Sectioned report text; positives carry ILD wording, negatives negate it.

    Level arguments index the graded descriptor tables (0..2); unset levels
    are drawn from the generator, keeping standalone calls deterministic.
    """
    draw = lambda: int(rng.integers(3))
    extent = draw() if extent is None else int(extent)
    texture = draw() if texture is None else int(texture)
    aeration = draw() if aeration is None else int(aeration)
    if ild:
        words = {"extent": _EXTENT[extent], "Extent": _EXTENT[extent].capitalize(),
                 "texture": _TEXTURE[texture]}
    else:
        words = {"aeration": _AERATION[aeration],
                 "Aeration": _AERATION[aeration].capitalize(),
                 "smooth": _SMOOTHNESS[texture]}
    imp = _POS_IMPRESSIONS if ild else _NEG_IMPRESSIONS
    par = _POS_PARENCHYMA if ild else _NEG_PARENCHYMA
    pick = lambda options: options[int(rng.integers(len(options)))].format(**words)
    lines = [
        "IMPRESSION:",
        pick(imp),
        "",
        "Lung parenchyma:",
        pick(par),
        "",
        "Airways:",
        pick(_AIRWAYS),
        "",
        "Pleura:",
        pick(_PLEURA),
        "",
    ]
    return "\n".join(lines)


@dataclass(frozen=True)
class StudySetConfig:
    """Base geometry plus nuisance-variation ranges for a generated set."""

    dims: tuple[int, int, int] = DEFAULT_DIMS
    amplitude_range: tuple[float, float] = (100.0, 240.0)
    band_fraction_range: tuple[float, float] = (0.17, 0.33)
    lung_hu_range: tuple[float, float] = (-895.0, -845.0)
    noise_sigma_range: tuple[float, float] = (15.0, 25.0)
    body_scale_range: tuple[float, float] = (0.92, 1.0)
    lung_scale_range: tuple[float, float] = (0.88, 1.0)
    body_semi_base: tuple[float, float, float] = (0.46, 0.40, 0.46)
    lung_semi_base: tuple[float, float, float] = (0.30, 0.28, 0.20)
    lung_offset_base: float = 0.2125


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    volume_path: str
    mask_path: str
    report_path: str
    label: int | None
    split: str


@dataclass(frozen=True)
class StudyManifest:
    records: list[StudyRecord] = field(default_factory=list)

    def by_split(self, split: str) -> list[StudyRecord]:
        return [r for r in self.records if r.split == split]

    def to_jsonl(self) -> str:
        rows = [json.dumps(vars(r), sort_keys=True) for r in self.records]
        return "\n".join(rows) + "\n"


def load_manifest(path: str | Path) -> StudyManifest:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        records.append(StudyRecord(**row))
    return StudyManifest(records=records)


def _tercile(x: float, lo: float, hi: float) -> int:
    """0/1/2 by position of x within [lo, hi]."""
    if hi <= lo:
        return 1
    t = (x - lo) / (hi - lo)
    return 0 if t < 1 / 3 else (1 if t < 2 / 3 else 2)


def _study_spec(config: StudySetConfig, master_seed: int, index: int, ild: bool) -> PhantomSpec:
    """Per-study nuisance draw; the spec fully determines the volume."""
    rng = np.random.default_rng([master_seed, index])
    lo, hi = config.amplitude_range
    amplitude = float(rng.uniform(lo, hi))
    frac = float(rng.uniform(*config.band_fraction_range))
    lung_hu = float(rng.uniform(*config.lung_hu_range))
    sigma = float(rng.uniform(*config.noise_sigma_range))
    body_s = float(rng.uniform(*config.body_scale_range))
    lung_s = float(rng.uniform(*config.lung_scale_range))
    bz, by, bx = config.body_semi_base
    lz, ly, lx = config.lung_semi_base
    body = (bz * body_s, by * body_s, bx * body_s)
    lung = (lz * lung_s * body_s, ly * lung_s * body_s, lx * lung_s * body_s)
    noise_seed = int(rng.integers(0, 2 ** 31 - 1))
    return PhantomSpec(
        seed=noise_seed, dims=config.dims, ild=ild, amplitude=amplitude,
        band_fraction=frac, lung_hu=lung_hu, noise_sigma=sigma,
        body_semi=body, lung_semi=lung,
        lung_offset_x=config.lung_offset_base * body_s,
    )


def _assign_splits(n: int, rng: np.random.Generator) -> list[str]:
    """80/10/10 assignment for one class; val/test get at least one study each
    once the class has >= 3 members."""
    if n == 0:
        return []
    n_val = max(1, round(n * 0.1)) if n >= 3 else 0
    n_test = max(1, round(n * 0.1)) if n >= 3 else 0
    order = rng.permutation(n)
    out = ["pretrain"] * n
    for i in order[:n_val]:
        out[i] = "val"
    for i in order[n_val:n_val + n_test]:
        out[i] = "test"
    return out


def generate_study_set(out_dir: str | Path, seed: int, n_pos: int, n_neg: int,
                       config: StudySetConfig | None = None) -> StudyManifest:
    """Write volumes, masks, reports, and a manifest under out_dir."""
    if n_pos + n_neg < 4:
        raise ValueError("need at least 4 studies")
    config = config or StudySetConfig()
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)

    labels = [1] * n_pos + [0] * n_neg
    split_rng_pos = np.random.default_rng([seed, 10_001])
    split_rng_neg = np.random.default_rng([seed, 10_002])
    splits_pos = _assign_splits(n_pos, split_rng_pos)
    splits_neg = _assign_splits(n_neg, split_rng_neg)
    splits = splits_pos + splits_neg

    records = []
    for index, (label, split) in enumerate(zip(labels, splits)):
        sid = f"s{index:04d}"
        spec = _study_spec(config, seed, index, ild=bool(label))
        vol, mask, _ = generate_volume(spec)
        vol_path = out / "volumes" / f"{sid}.hvol"
        mask_path = out / "masks" / f"{sid}.hvol"
        report_path = out / "reports" / f"{sid}.txt"
        save_volume(vol, vol_path)
        save_mask(mask, mask_path, vol.spacing)
        report_rng = np.random.default_rng([seed, index, 7])
        report = synth_report(
            bool(label), report_rng,
            extent=_tercile(spec.band_fraction, *config.band_fraction_range),
            texture=(_tercile(spec.amplitude, *config.amplitude_range) if label
                     else _tercile(spec.noise_sigma, *config.noise_sigma_range)),
            aeration=_tercile(spec.lung_hu, *config.lung_hu_range),
        )
        report_path.write_text(report, encoding="utf-8")
        records.append(StudyRecord(
            study_id=sid, volume_path=str(vol_path), mask_path=str(mask_path),
            report_path=str(report_path), label=label, split=split,
        ))
    manifest = StudyManifest(records=records)
    (out / "manifest.jsonl").write_text(manifest.to_jsonl(), encoding="utf-8")
    return manifest
