import dataclasses
from pathlib import Path

import pytest

from choroidseg import dataio, synthdata as sd, trainer


def band_spec(seed=0, size=64, noise=0.0, gamma=1.0, amplitude=0.05,
              noise_model="speckle", band=0.75, background=0.25):
    return sd.DomainSpec(
        width=size, height=size,
        upper_curve=sd.CurveParams(mean=0.40, amplitude=amplitude, harmonics=3),
        lower_curve=sd.CurveParams(mean=0.62, amplitude=amplitude, harmonics=3),
        band_intensity=band, background_intensity=background,
        noise_model=noise_model, noise_strength=noise, contrast_gamma=gamma, seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory) -> Path:
    """Small three-way dataset (clean source, shifted target, shifted val) at 64x64."""
    root = tmp_path_factory.mktemp("tiny_data")
    sd.generate_dataset(band_spec(seed=1), 10, root / "source", domain="source")
    sd.generate_dataset(band_spec(seed=2, noise=0.3, gamma=1.5), 8, root / "target", domain="target")
    sd.generate_dataset(band_spec(seed=3, noise=0.3, gamma=1.5), 6, root / "val", domain="target")
    return root


@pytest.fixture(scope="session")
def tiny_config(tiny_root):
    """Factory for fast 64x64 train configs over the session datasets."""

    def factory(mode="paaa", **overrides) -> trainer.TrainConfig:
        base = trainer.TrainConfig(
            mode=mode,
            source_dir=str(tiny_root / "source"),
            target_dir=str(tiny_root / "target"),
            val_dir=str(tiny_root / "val"),
            input_size=64,
            base_width=8,
            depth=3,
            extractor="fallback",
            steps=4,
            eval_every=2,
            batch_size=2,
            seed=0,
            num_threads=1,
            eval_batch_size=4,
        )
        return trainer.validate_config(dataclasses.replace(base, **overrides))

    return factory


@pytest.fixture(scope="session")
def trained_band_net(tiny_config, tmp_path_factory):
    """A segmenter briefly trained on clean bands; good enough to track shifts."""
    cfg = tiny_config(mode="source_only", steps=200, eval_every=200)
    run_dir = tmp_path_factory.mktemp("trained_band_net")
    result = trainer.train(cfg, run_dir)
    state, _, _ = trainer.load_checkpoint(result.last_checkpoint)
    return state.generator


@pytest.fixture(scope="session")
def source_dataset(tiny_root) -> dataio.Dataset:
    return dataio.load_dataset(tiny_root / "source", "source", labels_visible=True)
