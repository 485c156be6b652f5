"""Procedural multi-domain face-like corpus with parametric spoof artifacts.

Every image is a pure function of its seeds.  A "face" is a smooth elliptical
foreground made of identity-parameterised Gaussian blobs; domains apply
blur, gain, colour bias and sensor noise on top.  Spoofs add a known trace
inside the foreground only, so ``fake - real`` is available exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

IMAGE_SIZE = 32
ID_DIM = 8
N_BLOBS = 6
LABELS = ("real", "fake")
ATTACK_TYPES = ("none", "print", "replay", "mask3d")
SEEN_ATTACKS = ("print", "replay")

# extra-real pool samples share one pseudo-domain id for the adversarial loss
EXTRA_DOMAIN_ID = 99
# subject seeds of the extra pool never overlap corpus subjects
EXTRA_SUBJECT_OFFSET = 1_000_000

_PROJ_SEED = 20240917


@dataclass(frozen=True)
class IdentityVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        n = np.linalg.norm(v)
        if v.ndim != 1 or not np.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise ValueError("identity vector must be a unit-norm 1-D array")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_seed(cls, subject_seed: int, dim: int = ID_DIM) -> "IdentityVector":
        rng = np.random.default_rng([_PROJ_SEED, int(subject_seed)])
        v = rng.standard_normal(dim)
        return cls(v / np.linalg.norm(v))

    def __eq__(self, other):
        return isinstance(other, IdentityVector) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


@dataclass(frozen=True)
class DomainConfig:
    domain_id: int
    illumination_gain: float = 1.0
    color_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    blur_radius: float = 0.0

    def __post_init__(self):
        if self.illumination_gain <= 0:
            raise ValueError("illumination_gain must be positive")
        bias = tuple(float(b) for b in self.color_bias)
        if len(bias) != 3 or any(abs(b) > 0.2 for b in bias):
            raise ValueError("color_bias must be a 3-vector in [-0.2, 0.2]")
        object.__setattr__(self, "color_bias", bias)
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise_sigma and blur_radius must be non-negative")

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "illumination_gain": self.illumination_gain,
            "color_bias": list(self.color_bias),
            "noise_sigma": self.noise_sigma,
            "blur_radius": self.blur_radius,
        }


def default_domains() -> list[DomainConfig]:
    """Four source domains with distinct capture conditions."""
    return [
        DomainConfig(0, 1.00, (0.00, 0.00, 0.00), 0.010, 0.0),
        DomainConfig(1, 0.75, (0.08, 0.02, -0.06), 0.020, 0.6),
        DomainConfig(2, 1.20, (-0.06, 0.00, 0.10), 0.005, 0.9),
        DomainConfig(3, 0.90, (0.10, -0.08, 0.00), 0.030, 0.3),
    ]


@dataclass
class SyntheticSample:
    image: np.ndarray
    label: str
    domain_id: int
    attack_type: str
    identity: IdentityVector
    bg_mask: np.ndarray
    subject_id: int = 0
    seed: int = 0
    strength: float = 0.0
    source_id: str = ""

    def __post_init__(self):
        if self.label not in LABELS or self.attack_type not in ATTACK_TYPES:
            raise ValueError(f"bad label/attack: {self.label}/{self.attack_type}")
        if (self.label == "real") != (self.attack_type == "none"):
            raise ValueError("label is real iff attack_type is none")

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"


# --------------------------------------------------------------------------
# rendering

def _identity_params(identity: IdentityVector) -> dict:
    """Map an identity vector to face geometry through a fixed projection."""
    proj = np.random.default_rng(_PROJ_SEED).standard_normal((4 * N_BLOBS + 5, identity.values.size))
    h = np.tanh(proj @ identity.values * 0.9)
    blobs = h[: 4 * N_BLOBS].reshape(N_BLOBS, 4)
    tail = h[4 * N_BLOBS:]
    return {
        "blob_xy": blobs[:, :2] * 0.55,
        "blob_amp": 0.45 * blobs[:, 2],
        "blob_width": 2.2 + 0.9 * blobs[:, 3],
        "axes": (9.0 + 1.2 * tail[0], 11.5 + 1.2 * tail[1]),
        "skin": np.array([0.58, 0.46, 0.40]) + 0.08 * tail[2:5],
    }


def _ellipse(size: int, cx: float, cy: float, ax: float, ay: float):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rr = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    return xx, yy, rr


def render_real(identity: IdentityVector, domain: DomainConfig, rng_seed: int,
                size: int = IMAGE_SIZE, subject_id: int = 0) -> SyntheticSample:
    rng = np.random.default_rng([int(rng_seed), 7])
    p = _identity_params(identity)
    cx = size / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    cy = size / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    ax, ay = p["axes"]
    scale = size / 32.0
    xx, yy, rr = _ellipse(size, cx, cy, ax * scale, ay * scale)
    fg = rr <= 1.0

    # soft-edged skin region with identity blobs
    face = np.clip(4.0 * (1.0 - rr), 0.0, 1.0)[..., None] * p["skin"]
    shading = np.zeros((size, size))
    for (bx, by), amp, w in zip(p["blob_xy"], p["blob_amp"], p["blob_width"]):
        px, py = cx + bx * ax * scale, cy + by * ay * scale
        shading += amp * np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * (w * scale) ** 2))
    face = face * (1.0 + shading[..., None] * fg[..., None])

    bg_color = 0.22 + 0.10 * rng.uniform(size=3)
    ramp = 0.06 * (yy / size)[..., None]
    image = np.where(fg[..., None], face, bg_color + ramp)

    if domain.blur_radius > 0:
        image = gaussian_filter(image, sigma=(domain.blur_radius, domain.blur_radius, 0))
    image = image * domain.illumination_gain + np.asarray(domain.color_bias)
    if domain.noise_sigma > 0:
        image = image + rng.standard_normal(image.shape) * domain.noise_sigma
    image = np.clip(image, 0.0, 1.0)
    return SyntheticSample(image=image, label="real", domain_id=domain.domain_id,
                           attack_type="none", identity=identity, bg_mask=~fg,
                           subject_id=subject_id, seed=int(rng_seed))


def spoof_trace(shape: Sequence[int], bg_mask: np.ndarray, attack_type: str,
                rng_seed: int) -> np.ndarray:
    """Unit-strength additive artifact for ``attack_type``, zero on the background."""
    h, w, c = shape
    rng = np.random.default_rng([int(rng_seed), 11])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if attack_type == "print":
        ph = rng.uniform(0, 2 * np.pi, 2)
        grid = 0.5 * (np.cos(2 * np.pi * xx / 4 + ph[0]) + np.cos(2 * np.pi * yy / 4 + ph[1]))
        tint = np.array([0.9, 1.0, 1.1])
        trace = 0.28 * grid[..., None] * tint
    elif attack_type == "replay":
        ph = rng.uniform(0, 2 * np.pi)
        lines = np.sin(2 * np.pi * yy / 6 + ph)
        trace = (0.22 * lines + 0.07)[..., None] * np.array([0.95, 1.0, 1.1])
    elif attack_type == "mask3d":
        trace = np.zeros((h, w))
        fg_idx = np.argwhere(~bg_mask)
        lo, hi = fg_idx.min(axis=0), fg_idx.max(axis=0)
        for _ in range(3):
            y0 = rng.integers(lo[0], max(lo[0] + 1, hi[0] - 6))
            x0 = rng.integers(lo[1], max(lo[1] + 1, hi[1] - 6))
            ph, pw = rng.integers(5, 10, 2)
            # mask material always differs from skin, brighter or darker
            level = rng.choice([-1.0, 1.0]) * rng.uniform(0.08, 0.16)
            patch = np.zeros((h, w))
            patch[y0:y0 + ph, x0:x0 + pw] = 1.0
            cy0, cx0 = y0 + ph / 2, x0 + pw / 2
            glint = 0.42 * np.exp(-((yy - cy0) ** 2 + (xx - cx0) ** 2) / 6.0)
            trace += patch * (level + glint)
        trace = trace[..., None] * np.ones(c)
    else:
        raise ValueError(f"unknown attack type {attack_type!r}")
    return trace * (~bg_mask)[..., None]


def apply_spoof(sample: SyntheticSample, attack_type: str, strength: float,
                rng_seed: int) -> SyntheticSample:
    if sample.is_fake:
        raise ValueError("sample is already fake")
    if attack_type not in ATTACK_TYPES[1:]:
        raise ValueError(f"unknown attack type {attack_type!r}")
    if not 0.0 < strength <= 1.0:
        raise ValueError("strength must be in (0, 1]")
    trace = spoof_trace(sample.image.shape, sample.bg_mask, attack_type, rng_seed)
    image = np.clip(sample.image + strength * trace, 0.0, 1.0)
    # clipping never touches background pixels, which are already in range
    image[sample.bg_mask] = sample.image[sample.bg_mask]
    return replace(sample, image=image, label="fake", attack_type=attack_type,
                   strength=float(strength), bg_mask=sample.bg_mask.copy())


# --------------------------------------------------------------------------
# corpora

def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def build_corpus(n_subjects: int, domains: Sequence[DomainConfig], attacks_per_real: int,
                 rng_seed: int, attack_types: Sequence[str] = SEEN_ATTACKS,
                 strength_range: tuple[float, float] = (0.3, 0.7),
                 size: int = IMAGE_SIZE, subject_offset: int = 0) -> list[SyntheticSample]:
    """One real plus ``attacks_per_real`` spoofs per (subject, domain).

    Each spoof is applied to its own capture of the subject (different pose and
    sensor noise), so fakes are never pixel-aligned with the corpus real.
    Subjects are numbered from ``subject_offset``.
    """
    if n_subjects < 1 or not domains:
        raise ValueError("need at least one subject and one domain")
    if subject_offset < 0 or subject_offset + n_subjects > EXTRA_SUBJECT_OFFSET:
        raise ValueError("corpus subject ids must stay below the extra-pool range")
    out = []
    for subj in range(subject_offset, subject_offset + n_subjects):
        identity = IdentityVector.from_seed(subj)
        for dom in domains:
            s = render_real(identity, dom, _seed(rng_seed, subj, dom.domain_id, 0), size, subj)
            s.source_id = f"s{subj}_d{dom.domain_id}_r"
            out.append(s)
            for k in range(attacks_per_real):
                seed = _seed(rng_seed, subj, dom.domain_id, k + 1)
                rng = np.random.default_rng(seed)
                attack = attack_types[(subj + dom.domain_id + k) % len(attack_types)]
                strength = float(rng.uniform(*strength_range))
                base = render_real(identity, dom, seed, size, subj)
                f = apply_spoof(base, attack, strength, seed)
                f.source_id = f"s{subj}_d{dom.domain_id}_f{k}"
                out.append(f)
    return out


def random_domain(rng: np.random.Generator, domain_id: int = EXTRA_DOMAIN_ID) -> DomainConfig:
    """Capture conditions drawn from a range covering all default domains."""
    return DomainConfig(
        domain_id=domain_id,
        illumination_gain=float(rng.uniform(0.7, 1.25)),
        color_bias=tuple(float(b) for b in rng.uniform(-0.12, 0.12, 3)),
        noise_sigma=float(rng.uniform(0.0, 0.03)),
        blur_radius=float(rng.uniform(0.0, 1.0)),
    )


def build_extra_real_pool(n: int, rng_seed: int, size: int = IMAGE_SIZE) -> list[SyntheticSample]:
    out = []
    for i in range(n):
        seed = _seed(rng_seed, EXTRA_SUBJECT_OFFSET + i)
        rng = np.random.default_rng(seed)
        subj = EXTRA_SUBJECT_OFFSET + seed % 1_000_000_000
        s = render_real(IdentityVector.from_seed(subj), random_domain(rng), seed, size, subj)
        s.source_id = f"x{rng_seed}_{i}"
        out.append(s)
    return out


def build_loo_split(corpus: Sequence[SyntheticSample], held_out_domain_id: int):
    if not any(s.domain_id == held_out_domain_id for s in corpus):
        raise ValueError(f"domain {held_out_domain_id} not present in corpus")
    train = [s for s in corpus if s.domain_id != held_out_domain_id]
    test = [s for s in corpus if s.domain_id == held_out_domain_id]
    return train, test


# --------------------------------------------------------------------------
# export

def export_corpus(samples: Iterable[SyntheticSample], out_dir: str | Path) -> Path:
    """Write 8-bit PNG images, 1-bit PNG masks and a JSON-lines index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / "metadata.jsonl"
    with index.open("w") as fh:
        for i, s in enumerate(samples):
            name = s.source_id or f"{i:06d}"
            img_path = f"{name}.png"
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(out_dir / img_path)
            Image.fromarray(s.bg_mask).convert("1").save(out_dir / f"{name}_mask.png")
            rec = {"path": img_path, "label": s.label, "domain_id": s.domain_id,
                   "attack_type": s.attack_type, "subject_id": s.subject_id, "seed": s.seed,
                   "source_id": s.source_id, "strength": s.strength}
            fh.write(json.dumps(rec) + "\n")
    return index


def load_exported(out_dir: str | Path) -> list[dict]:
    """Read an exported split back as records with ``image`` and ``bg_mask`` arrays."""
    out_dir = Path(out_dir)
    recs = []
    for line in (out_dir / "metadata.jsonl").read_text().splitlines():
        rec = json.loads(line)
        rec["image"] = np.asarray(Image.open(out_dir / rec["path"]), dtype=np.float64) / 255.0
        mask_path = out_dir / rec["path"].replace(".png", "_mask.png")
        rec["bg_mask"] = np.asarray(Image.open(mask_path), dtype=bool)
        recs.append(rec)
    return recs


def samples_from_records(records: Iterable[dict], id_dim: int = ID_DIM) -> list[SyntheticSample]:
    """Rebuild samples from ``load_exported`` records; identities are re-derived from subject ids."""
    out = []
    for r in records:
        out.append(SyntheticSample(
            image=r["image"], label=r["label"], domain_id=int(r["domain_id"]), attack_type=r["attack_type"],
            identity=IdentityVector.from_seed(int(r["subject_id"]), id_dim), bg_mask=r["bg_mask"],
            subject_id=int(r["subject_id"]), seed=int(r["seed"]), strength=float(r.get("strength", 0.0)),
            source_id=r.get("source_id") or Path(r["path"]).stem))
    return out
