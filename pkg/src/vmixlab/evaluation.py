"""Closed-form evaluation: attribute shifts, content alignment, and a toy
Fréchet distance over hand-crafted features. Every path is seed-driven and
reports the seeds used, so numbers are reproducible run to run."""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.ndimage import gaussian_filter

from .aesemb import AestheticAssignment
from .errors import ConfigError
from .numerics import Rng
from .synthdata import (
    COLORS,
    DIMENSIONS,
    HUE_DEG,
    SHAPES,
    all_content_specs,
    chroma_weight_map,
    measure,
    render,
)

# classifier constants, calibrated on clean renders (see tests)
MASK_LEVEL = 0.45       # subject mask threshold, relative to peak weight
FILL_SQUARE = 0.85      # bounding-box fill above this reads as a square
FILL_CIRCLE = 0.62      # ... above this as a circle, below as a triangle


def _rgb_to_hue(rgb) -> float:
    r, g, b = (float(v) for v in rgb)
    mx, mn = max(r, g, b), min(r, g, b)
    c = mx - mn
    if c < 1e-9:
        return 0.0
    if mx == r:
        h = ((g - b) / c) % 6.0
    elif mx == g:
        h = (b - r) / c + 2.0
    else:
        h = (r - g) / c + 4.0
    return 60.0 * h


def _hue_distance(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def classify_content(img: np.ndarray):
    """(color, shape) guess from dominant hue and bounding-box fill factor."""
    wmap = chroma_weight_map(img)
    peak = wmap.max()
    if peak < 1e-6:
        return COLORS[0], SHAPES[0]
    mask = wmap > MASK_LEVEL * peak
    weights = (wmap * mask)[..., None]
    rgb = (img * weights).sum(axis=(0, 1)) / (weights.sum() + 1e-9)
    hue = _rgb_to_hue(rgb)
    color = min(HUE_DEG, key=lambda c: _hue_distance(hue, HUE_DEG[c]))

    ys, xs = np.nonzero(mask)
    bbox = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = mask.sum() / bbox
    if fill > FILL_SQUARE:
        shape = "square"
    elif fill > FILL_CIRCLE:
        shape = "circle"
    else:
        shape = "triangle"
    return color, shape


def classifier_accuracy_on_renders(n: int, seed: int) -> float:
    """Sanity of the rule-based classifier on ground-truth renders."""
    rng = Rng(seed, "clf-sanity")
    specs = all_content_specs()
    hits = 0
    for i in range(n):
        content = specs[i % len(specs)]
        pol = np.where(rng.child(f"a{i}").uniform((4,)) < 0.5, 1, -1).astype(np.int8)
        img = render(content, AestheticAssignment(pol), seed=1_000_000 + i)
        color, shape = classify_content(img)
        hits += (color == content.color) and (shape == content.shape)
    return hits / n


# -- feature vector and toy Frechet distance -------------------------------


def content_features(img: np.ndarray) -> np.ndarray:
    """16-dim descriptor: 4 oracle scores, 8-bin saturation-weighted hue
    histogram, luminance mean/std, high-pass mean/std."""
    scores = measure(img)
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    sat = (mx - mn) / (mx + 1e-8)
    c = mx - mn
    hue = np.zeros_like(mx)
    nz = c > 1e-9
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    is_r = nz & (mx == r)
    is_g = nz & (mx == g) & ~is_r
    is_b = nz & ~is_r & ~is_g
    hue[is_r] = (((g - b) / np.where(c == 0, 1, c)) % 6.0)[is_r]
    hue[is_g] = ((b - r) / np.where(c == 0, 1, c) + 2.0)[is_g]
    hue[is_b] = ((r - g) / np.where(c == 0, 1, c) + 4.0)[is_b]
    hue *= 60.0
    hist, _ = np.histogram(hue, bins=8, range=(0.0, 360.0), weights=sat)
    hist = hist / (hist.sum() + 1e-9)
    lum = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    hp = lum - gaussian_filter(lum, 1.0, mode="nearest")
    return np.array([scores[d] for d in DIMENSIONS] + list(hist)
                    + [lum.mean(), lum.std(), np.abs(hp).mean(), np.abs(hp).std()],
                    dtype=np.float64)


def sqrtm_psd_eigh(m: np.ndarray) -> np.ndarray:
    """Eigendecomposition square root for symmetric PSD matrices (oracle route)."""
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T

def frechet_gaussian(mu_a, cov_a, mu_b, cov_b) -> float:
    """|mu_a-mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2))."""
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d2 = float(((mu_a - mu_b) ** 2).sum()
               + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    return max(d2, 0.0)


def toy_fid(set_a, set_b) -> float:
    """Frechet distance between Gaussians fit to content_features of two
    image sets (each at least 64 images)."""
    if len(set_a) < 64 or len(set_b) < 64:
        raise ConfigError("toy_fid needs at least 64 images per set")
    fa = np.stack([content_features(im) for im in set_a])
    fb = np.stack([content_features(im) for im in set_b])
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    reg = 1e-6 * np.eye(fa.shape[1])
    cov_a = np.cov(fa, rowvar=False) + reg
    cov_b = np.cov(fb, rowvar=False) + reg
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b)


# -- model-level metrics ----------------------------------------------------


def _random_specs(n, seed):
    specs = all_content_specs()
    idx = Rng(seed, "eval/specs").integers(0, len(specs), n)
    return [specs[i] for i in idx]


def attribute_shift(bundle, dimension: str, n: int, seed: int, sampler_cfg=None,
                    contrast: str = "single"):
    """Oracle-score shift for one dimension between opposing assignments.

    contrast="single": dimension +1 with the rest -1, versus all -1.
    contrast="all": all +1 versus all -1.
    Prompts and the init noise seed are shared between the two sets, so a
    model that ignores the assignment yields a difference of exactly zero.
    Returns (mean_pos, mean_neg, delta).
    """
    if dimension not in DIMENSIONS:
        raise ConfigError(f"unknown dimension {dimension!r}")
    k = DIMENSIONS.index(dimension)
    pos = -np.ones(4, dtype=np.int8)
    if contrast == "single":
        pos[k] = 1
    elif contrast == "all":
        pos[:] = 1
    else:
        raise ConfigError(f"unknown contrast {contrast!r}")
    neg = -np.ones(4, dtype=np.int8)
    specs = _random_specs(n, seed)
    prompts = [s.caption() for s in specs]
    imgs_pos = bundle.sample(prompts, AestheticAssignment(pos), seed=seed, sampler_cfg=sampler_cfg)
    imgs_neg = bundle.sample(prompts, AestheticAssignment(neg), seed=seed, sampler_cfg=sampler_cfg)
    mean_pos = float(np.mean([measure(im)[dimension] for im in imgs_pos]))
    mean_neg = float(np.mean([measure(im)[dimension] for im in imgs_neg]))
    return mean_pos, mean_neg, mean_pos - mean_neg


def alignment_score(bundle, n: int, seed: int, sampler_cfg=None,
                    assignment=None, baseline: bool = False) -> float:
    """Fraction of samples whose dominant color and shape match the prompt."""
    specs = _random_specs(n, seed)
    prompts = [s.caption() for s in specs]
    imgs = bundle.sample(prompts, assignment, seed=seed, sampler_cfg=sampler_cfg,
                         baseline=baseline)
    hits = 0
    for spec, img in zip(specs, imgs):
        color, shape = classify_content(img)
        hits += (color == spec.color) and (shape == spec.shape)
    return hits / n


def lambda_sweep(bundle, lambdas, n: int, seed: int, sampler_cfg=None):
    """Mean oracle scores and alignment at fixed seeds for each mixing value.

    Includes a 'baseline' row sampled with the aesthetic branch disabled;
    the lam=0 row must match it exactly.
    """
    from dataclasses import replace

    base_cfg = sampler_cfg if sampler_cfg is not None else bundle.default_sampler_cfg()
    rows = []
    specs = _random_specs(n, seed)
    prompts = [s.caption() for s in specs]

    def scored(imgs, label, lam):
        means = {d: float(np.mean([measure(im)[d] for im in imgs])) for d in DIMENSIONS}
        hits = sum((classify_content(im) == (s.color, s.shape))
                   for s, im in zip(specs, imgs))
        return {"row": label, "lam": lam, **means, "alignment": hits / n}

    imgs = bundle.sample(prompts, None, seed=seed, sampler_cfg=base_cfg, baseline=True)
    rows.append(scored(imgs, "baseline", None))
    for lam in lambdas:
        cfg = replace(base_cfg, lam=float(lam))
        imgs = bundle.sample(prompts, "all_positive", seed=seed, sampler_cfg=cfg)
        rows.append(scored(imgs, f"lam={lam:g}", float(lam)))
    return rows


# -- report -----------------------------------------------------------------


@dataclass
class EvalReport:
    seeds: dict
    shifts: dict = field(default_factory=dict)        # dimension -> (pos, neg, delta)
    fresh_shifts: dict = field(default_factory=dict)  # fresh-init control
    alignment: float | None = None
    alignment_baseline: float | None = None
    fid_vs_renders: float | None = None
    sweep: list = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["section\tkey\tvalue"]
        for k, v in self.seeds.items():
            lines.append(f"seed\t{k}\t{v}")
        for dim, (p, q, d) in self.shifts.items():
            lines.append(f"shift\t{dim}\t{p:.6f}/{q:.6f}/{d:+.6f}")
        for dim, (p, q, d) in self.fresh_shifts.items():
            lines.append(f"fresh_shift\t{dim}\t{p:.6f}/{q:.6f}/{d:+.6f}")
        if self.alignment is not None:
            lines.append(f"alignment\tmodel\t{self.alignment:.6f}")
        if self.alignment_baseline is not None:
            lines.append(f"alignment\tbaseline\t{self.alignment_baseline:.6f}")
        if self.fid_vs_renders is not None:
            lines.append(f"fid\tvs_renders\t{self.fid_vs_renders:.6f}")
        for row in self.sweep:
            vals = ",".join(f"{k}={row[k]:!s}" if isinstance(row[k], str) else f"{k}={row[k]}"
                            for k in row)
            lines.append(f"sweep\t{row['row']}\t{vals}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        out = ["evaluation summary", "=================="]
        out.append(f"seeds: {self.seeds}")
        for dim, (p, q, d) in self.shifts.items():
            out.append(f"  {dim:12s} pos {p:.3f}  neg {q:.3f}  delta {d:+.3f}")
        if self.fresh_shifts:
            out.append("fresh-init control (deltas must be 0):")
            for dim, (_, _, d) in self.fresh_shifts.items():
                out.append(f"  {dim:12s} delta {d:+.6f}")
        if self.alignment is not None:
            base = f" (baseline {self.alignment_baseline:.3f})" if self.alignment_baseline is not None else ""
            out.append(f"alignment: {self.alignment:.3f}{base}")
        if self.fid_vs_renders is not None:
            out.append(f"toy-FID vs held-out renders: {self.fid_vs_renders:.3f}")
        for row in self.sweep:
            out.append("  sweep " + " ".join(f"{k}={v}" for k, v in row.items()))
        return "\n".join(out) + "\n"
