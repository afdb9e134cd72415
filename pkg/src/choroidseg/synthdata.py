"""Synthetic layered-tissue image generator.

Produces grayscale cross-sections containing a single bright band between two
smooth boundary curves, with per-domain control over intensity, contrast and
noise so that a second "device" can be simulated by shifting those knobs.
Everything is a pure function of (spec.seed, index), so datasets regenerate
bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, SpecValidationError

NOISE_MODELS = ("gaussian", "speckle")


@dataclass(frozen=True)
class CurveParams:
    """Smooth boundary curve: mean row position plus a random sinusoid series.

    mean and amplitude are fractions of image height; the curve is a sum of
    `harmonics` sinusoids whose coefficients decay geometrically with
    `coeff_scale` and are normalized so the total deviation never exceeds
    `amplitude`.
    """

    mean: float
    amplitude: float = 0.0
    harmonics: int = 3
    coeff_scale: float = 0.5


@dataclass(frozen=True)
class DomainSpec:
    """Parameter set describing one imaging domain."""

    width: int
    height: int
    upper_curve: CurveParams
    lower_curve: CurveParams
    band_intensity: float = 0.75
    background_intensity: float = 0.25
    noise_model: str = "speckle"
    noise_strength: float = 0.0
    contrast_gamma: float = 1.0
    seed: int = 0


def validate_spec(spec: DomainSpec) -> None:
    """Raise SpecValidationError if `spec` violates any invariant."""
    if spec.width < 8 or spec.height < 8:
        raise SpecValidationError(f"image size {spec.width}x{spec.height} too small (min 8x8)")
    for name, curve in (("upper_curve", spec.upper_curve), ("lower_curve", spec.lower_curve)):
        if not 0.0 < curve.mean < 1.0:
            raise SpecValidationError(f"{name}.mean={curve.mean} must lie strictly inside (0, 1)")
        if curve.amplitude < 0.0:
            raise SpecValidationError(f"{name}.amplitude={curve.amplitude} must be >= 0")
        if curve.harmonics < 0:
            raise SpecValidationError(f"{name}.harmonics={curve.harmonics} must be >= 0")
        if curve.coeff_scale <= 0.0:
            raise SpecValidationError(f"{name}.coeff_scale={curve.coeff_scale} must be > 0")
    gap = spec.lower_curve.mean - spec.upper_curve.mean
    amp_sum = spec.upper_curve.amplitude + spec.lower_curve.amplitude
    if gap < amp_sum:
        raise SpecValidationError(
            "curves may cross: lower_curve.mean - upper_curve.mean = "
            f"{gap:.4f} < amplitude sum {amp_sum:.4f}"
        )
    for name, value in (
        ("band_intensity", spec.band_intensity),
        ("background_intensity", spec.background_intensity),
    ):
        if not 0.0 <= value <= 1.0:
            raise SpecValidationError(f"{name}={value} must lie in [0, 1]")
    if spec.contrast_gamma <= 0.0:
        raise SpecValidationError(f"contrast_gamma={spec.contrast_gamma} must be > 0")
    if spec.noise_strength < 0.0:
        raise SpecValidationError(f"noise_strength={spec.noise_strength} must be >= 0")
    if spec.noise_model not in NOISE_MODELS:
        raise SpecValidationError(
            f"noise_model={spec.noise_model!r} must be one of {NOISE_MODELS}"
        )


@dataclass
class ImageSample:
    """One grayscale image, its optional binary mask, and a domain tag."""

    image: np.ndarray  # HxW float64 in [0, 1]
    mask: Optional[np.ndarray]  # HxW uint8 in {0, 1}, or None when unlabeled
    domain: str
    id: str


def _curve_rows(curve: CurveParams, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Evaluate the boundary curve at each column, in fractional row units."""
    x = np.arange(width) / width
    deviation = np.zeros(width)
    if curve.harmonics > 0 and curve.amplitude > 0.0:
        k = np.arange(1, curve.harmonics + 1)
        coeffs = rng.uniform(-1.0, 1.0, size=curve.harmonics) * curve.coeff_scale ** (k - 1)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=curve.harmonics)
        total = np.abs(coeffs).sum()
        if total > 0.0:
            waves = np.sin(2.0 * np.pi * np.outer(k, x) + phases[:, None])
            # normalize so |deviation| <= amplitude regardless of draw
            deviation = curve.amplitude * height * (coeffs @ waves) / total
    return curve.mean * height + deviation


def generate_sample(spec: DomainSpec, index: int, domain: str = "source") -> ImageSample:
    """Generate sample `index` of the domain described by `spec`.

    Deterministic in (spec.seed, index); independent samples may be produced
    in parallel.
    """
    validate_spec(spec)
    ss = np.random.SeedSequence(spec.seed, spawn_key=(index,))
    rng_up, rng_low, rng_noise = (np.random.default_rng(c) for c in ss.spawn(3))

    b_up = _curve_rows(spec.upper_curve, spec.width, spec.height, rng_up)
    b_low = _curve_rows(spec.lower_curve, spec.width, spec.height, rng_low)

    rows = np.arange(spec.height)[:, None]
    mask = ((rows >= b_up[None, :]) & (rows < b_low[None, :])).astype(np.uint8)

    image = np.where(mask == 1, spec.band_intensity, spec.background_intensity)
    image = image ** spec.contrast_gamma
    if spec.noise_strength > 0.0:
        noise = rng_noise.standard_normal(image.shape)
        if spec.noise_model == "gaussian":
            image = image + spec.noise_strength * noise
        else:  # speckle: multiplicative, standard coherent-imaging model
            image = image * (1.0 + spec.noise_strength * noise)
    image = np.clip(image, 0.0, 1.0)

    return ImageSample(image=image, mask=mask, domain=domain, id=f"{domain}_{index:05d}")


def spec_to_dict(spec: DomainSpec) -> dict:
    return dataclasses.asdict(spec)


def spec_from_dict(data: dict) -> DomainSpec:
    """Build a DomainSpec from a plain dict, rejecting unknown keys."""
    data = dict(data)
    known = {f.name for f in dataclasses.fields(DomainSpec)}
    unknown = set(data) - known
    if unknown:
        raise SpecValidationError(f"unknown domain spec keys: {sorted(unknown)}")
    for curve_key in ("upper_curve", "lower_curve"):
        if curve_key not in data:
            raise SpecValidationError(f"domain spec missing {curve_key}")
        curve = data[curve_key]
        if isinstance(curve, dict):
            curve_known = {f.name for f in dataclasses.fields(CurveParams)}
            curve_unknown = set(curve) - curve_known
            if curve_unknown:
                raise SpecValidationError(
                    f"unknown {curve_key} keys: {sorted(curve_unknown)}"
                )
            data[curve_key] = CurveParams(**curve)
    try:
        spec = DomainSpec(**data)
    except TypeError as exc:
        raise SpecValidationError(f"invalid domain spec: {exc}") from exc
    validate_spec(spec)
    return spec


def load_spec(path: str | Path) -> DomainSpec:
    """Load a DomainSpec from a JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read domain spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SpecValidationError(f"domain spec {path} is not valid JSON: {exc}") from exc
    return spec_from_dict(data)


def generate_dataset(
    spec: DomainSpec,
    count: int,
    destination: str | Path,
    domain: str = "source",
) -> Path:
    """Write `count` samples to `destination` in the standard dataset layout.

    Returns the manifest path. Layout: images/<id>.png, masks/<id>.png and a
    manifest.txt whose header carries the serialized spec.
    """
    from . import dataio  # deferred: dataio imports ImageSample from here

    validate_spec(spec)
    if count < 1:
        raise SpecValidationError(f"count={count} must be >= 1")
    destination = Path(destination)
    try:
        (destination / "images").mkdir(parents=True, exist_ok=True)
        (destination / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directories under {destination}: {exc}") from exc

    lines = [
        "# choroidseg dataset manifest v1",
        f"# domain: {domain}",
        f"# spec: {json.dumps(spec_to_dict(spec), sort_keys=True)}",
        f"# count: {count}",
    ]
    for index in range(count):
        sample = generate_sample(spec, index, domain=domain)
        image_rel = f"images/{sample.id}.png"
        mask_rel = f"masks/{sample.id}.png"
        dataio.write_image_png(destination / image_rel, sample.image)
        dataio.write_mask_png(destination / mask_rel, sample.mask)
        lines.append(f"{sample.id}\t{image_rel}\t{mask_rel}\t{domain}")

    manifest = destination / dataio.MANIFEST_NAME
    try:
        manifest.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write manifest {manifest}: {exc}") from exc
    return manifest
