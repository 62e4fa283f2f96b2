from __future__ import annotations

import numpy as np
import pytest

from cxrscreen.architecture import ArchSpec, LayerKind, LayerSpec, build_model, prpe_layer
from cxrscreen.manifest import DatasetManifest, Finding, ImageRecord
from cxrscreen.training import TrainConfig, fit_arrays

ACT = LayerSpec(LayerKind.ACTIVATION)
POOL = LayerSpec(LayerKind.POOL, kernel=2, stride=2, params={"op": "max"})


def toy_spec() -> ArchSpec:
    """Small blob-detector network used across training/explain tests."""
    return ArchSpec(
        name="toy-blob",
        input_shape=(1, 48, 48),
        layers=(
            LayerSpec(LayerKind.CONV_STANDARD, 1, 8, kernel=3, stride=2),  # 8 x 24 x 24
            ACT,
            prpe_layer(8, 16, project_ratio=0.5, replicas=2),  # 16 x 24 x 24
            POOL,  # 16 x 12 x 12
            LayerSpec(LayerKind.CONV_POINTWISE, 16, 16),
            ACT,
            LayerSpec(LayerKind.GLOBAL_POOL),
            LayerSpec(LayerKind.DENSE, 16, 8),
            ACT,
        ),
        long_range_edges=((1, 3),),
    )


def blob_image(rng: np.random.Generator, positive: bool, side: int = 48) -> np.ndarray:
    """Dim noise background; positives carry one bright gaussian blob."""
    img = rng.uniform(0.05, 0.25, (side, side))
    if positive:
        cy, cx = rng.integers(side // 5, side - side // 5, 2)
        yy, xx = np.mgrid[0:side, 0:side]
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (side / 8.0) ** 2)))
        img = np.clip(img + 0.7 * blob, 0.0, 1.0)
    return img.astype(np.float32)


def blob_dataset(seed: int = 42, n: int = 32, side: int = 48) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    x = np.stack([blob_image(rng, i % 2 == 1, side) for i in range(n)])
    y = np.array([i % 2 for i in range(n)], dtype=np.int64)
    return x, y


@pytest.fixture(name="toy_spec")
def _toy_spec_fixture() -> ArchSpec:
    return toy_spec()


@pytest.fixture(scope="session")
def blob_data() -> tuple[np.ndarray, np.ndarray]:
    return blob_dataset()


@pytest.fixture(scope="session")
def trained_toy(blob_data):
    """A toy model fitted to the blob fixture until it separates it fully."""
    x, y = blob_data
    model = build_model(toy_spec(), seed=0)
    cfg = TrainConfig(
        learning_rate=1e-3, batch_size=8, epochs=60, patience=60, seed=0, augment=None
    )
    model, history = fit_arrays(model, x, y, x, y, cfg)
    assert history.best_val_accuracy == 1.0, "toy fixture failed to converge"
    return model


def make_records(
    n_patients: int,
    seed: int = 0,
    images_per_patient: tuple[int, int] = (1, 4),
    mixed_every: int | None = None,
) -> list[ImageRecord]:
    """Synthetic single-source records cycling through the three findings.

    Every ``mixed_every``-th patient gets records with two different findings
    (and so can never satisfy an exact single-class test quota).
    """
    rng = np.random.default_rng(seed)
    records = []
    k = 0
    findings = [Finding.SARS2, Finding.NONE, Finding.PNEUMONIA_NON_SARS2]
    for p in range(n_patients):
        finding = findings[p % 3]
        count = int(rng.integers(images_per_patient[0], images_per_patient[1] + 1))
        age = int(rng.integers(5, 95))
        for j in range(count):
            f = finding
            if mixed_every and p % mixed_every == 0 and j == count - 1 and count > 1:
                f = findings[(p + 1) % 3]
            records.append(
                ImageRecord(
                    image_id=f"img{k:05d}",
                    patient_id=f"pat{p:04d}",
                    source="synth",
                    finding=f,
                    age=age,
                    file_path=f"images/img{k:05d}.png",
                )
            )
            k += 1
    return records


def make_manifest(n_patients: int = 60, seed: int = 0, **kwargs) -> DatasetManifest:
    return DatasetManifest(records=tuple(make_records(n_patients, seed, **kwargs)))
