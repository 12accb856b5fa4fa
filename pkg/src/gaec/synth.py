"""Deterministic synthetic corpus with cyclone-like vortices and river-like filaments.

Generative model, per frame t on an (H, W) grid:

* background: a few drifting low-wavenumber cosine modes (amplitude ~1);
* weather noise: white noise smoothed by a Gaussian of ``noise_scale`` cells,
  scaled to ``noise_amp``; present everywhere;
* vortices: ``n_tc`` tracks moving at constant velocity, each a Gaussian
  depression of width ``tc_sigma`` plus a tighter ring of small-scale texture;
* filaments: ``n_ar`` slowly translating bands of width ``ar_width`` along a
  straight segment; they carry moisture flux split into meridional (TVQ) and
  zonal (TUQ) parts, and IVT is derived from the two.

The ground-truth ROI mask marks the ``roi_coverage`` share of cells with the
highest feature intensity (max of vortex bumps and filament bands).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import Field, compute_ivt, write_field
from .roi import HeatmapParams, heatmap_series, write_mask, write_points


@dataclass(frozen=True)
class SynthParams:
    seed: int = 7
    shape: tuple[int, int, int] = (32, 256, 256)
    n_tc: int = 3
    n_ar: int = 1
    tc_sigma: float = 4.0
    tc_depth: float = 3.0
    ar_width: float = 3.0
    ar_strength: float = 4.0
    noise_amp: float = 0.05
    noise_scale: float = 2.0
    roi_coverage: float = 0.10


@dataclass
class Corpus:
    params: SynthParams
    fields: dict[str, Field]
    roi_mask: np.ndarray
    ar_mask: np.ndarray
    tc_points: list[tuple[int, float, float]] = field(default_factory=list)

    def write(self, out_dir: str | Path) -> dict[str, str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, f in self.fields.items():
            write_field(f, out / f"{name}.f32")
            files[name] = f"{name}.f32"
        write_mask(self.roi_mask, out / "roi_mask.bits")
        write_mask(self.ar_mask, out / "ar_mask.bits")
        write_points(self.tc_points, out / "tc_points.csv")
        heat = heatmap_series(self.tc_points, HeatmapParams(1.0, self.params.tc_sigma), self.params.shape)
        write_field(Field("tc_heatmap", heat), out / "tc_heatmap.f32")
        files.update(roi_mask="roi_mask.bits", ar_mask="ar_mask.bits", tc_points="tc_points.csv",
                     tc_heatmap="tc_heatmap.f32")
        desc = {"generator": "gaec.synth", "params": asdict(self.params), "files": files,
                "roi_ratio": float(self.roi_mask.mean())}
        (out / "corpus.json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
        return files


def _smooth_noise(rng, shape, scale):
    raw = rng.standard_normal(shape)
    if scale > 0:
        raw = gaussian_filter(raw, sigma=(0, scale, scale), mode="wrap")
    return raw / raw.std()


def generate(params: SynthParams = SynthParams()) -> Corpus:
    rng = np.random.default_rng(params.seed)
    t_n, h_n, w_n = params.shape
    tt = np.arange(t_n, dtype=np.float64)[:, None, None]
    uu = np.arange(h_n, dtype=np.float64)[None, :, None]
    vv = np.arange(w_n, dtype=np.float64)[None, None, :]

    background = np.zeros(params.shape)
    for _ in range(4):
        ku, kv = rng.uniform(0.5, 2.5, size=2) * 2 * np.pi / np.array([h_n, w_n])
        phase, speed = rng.uniform(0, 2 * np.pi), rng.uniform(0.02, 0.1)
        background += rng.uniform(0.3, 0.7) * np.cos(ku * uu + kv * vv + phase + speed * tt)
    noise = params.noise_amp * _smooth_noise(rng, params.shape, params.noise_scale)

    intensity = np.zeros(params.shape)
    psl = background + noise
    points = []
    margin = 3 * params.tc_sigma
    for _ in range(params.n_tc):
        u0 = rng.uniform(margin, h_n - margin)
        v0 = rng.uniform(margin, w_n - margin)
        du, dv = rng.uniform(-0.6, 0.6, size=2)
        cu = np.clip(u0 + du * tt, 0, h_n - 1)
        cv = np.clip(v0 + dv * tt, 0, w_n - 1)
        r2 = (uu - cu) ** 2 + (vv - cv) ** 2
        bump = np.exp(-r2 / (2 * params.tc_sigma ** 2))
        texture = 0.3 * np.cos(np.sqrt(r2) * 1.7) * np.exp(-r2 / (2 * (0.6 * params.tc_sigma) ** 2))
        psl = psl - params.tc_depth * bump + params.tc_depth * texture
        intensity = np.maximum(intensity, bump)
        points.extend((t, float(cu[t, 0, 0]), float(cv[t, 0, 0])) for t in range(t_n))

    tvq = 0.5 * background + noise
    tuq = 0.5 * np.roll(background, w_n // 3, axis=2) + np.roll(noise, h_n // 2, axis=1)
    for _ in range(params.n_ar):
        pu, pv = rng.uniform(0.25, 0.75) * h_n, rng.uniform(0.25, 0.75) * w_n
        theta = rng.uniform(0, np.pi)
        half_len = rng.uniform(0.3, 0.45) * max(h_n, w_n)
        drift = rng.uniform(-0.5, 0.5, size=2)
        cu = pu + drift[0] * tt
        cv = pv + drift[1] * tt
        along = (uu - cu) * np.cos(theta) + (vv - cv) * np.sin(theta)
        across = -(uu - cu) * np.sin(theta) + (vv - cv) * np.cos(theta)
        taper = np.clip(1 - (np.abs(along) / half_len) ** 4, 0, 1)
        band = np.exp(-across ** 2 / (2 * params.ar_width ** 2)) * taper
        tvq = tvq + params.ar_strength * band * np.cos(theta)
        tuq = tuq + params.ar_strength * band * np.sin(theta)
        intensity = np.maximum(intensity, band)

    cut = np.quantile(intensity, 1 - params.roi_coverage)
    roi_mask = intensity >= cut if cut > 0 else intensity > 0
    tvq_f, tuq_f = Field("tvq", tvq), Field("tuq", tuq)
    ivt = compute_ivt(tvq_f, tuq_f, name="ivt")
    ar_mask = ivt.data > 0.5 * params.ar_strength
    fields = {"psl": Field("psl", psl), "tvq": tvq_f, "tuq": tuq_f, "ivt": ivt}
    return Corpus(params, fields, roi_mask, ar_mask, points)
