from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from aligneval.dataset import (
    DatasetSplit,
    ElementAnnotation,
    SamplePair,
    export_dataset,
)


def _sample(
    sample_id="s-001",
    prompt="a red fox jumping over a wooden fence",
    prompt_type="real",
    split="train",
    total_score=4.0,
    elements=None,
    **overrides,
):
    kwargs = dict(
        sample_id=sample_id,
        prompt_id=f"p-{sample_id}",
        prompt=prompt,
        prompt_type=prompt_type,
        image_ref=f"images/{sample_id}.png",
        split=split,
        meaninglessness=0.05,
        split_confidence=0.9,
        attribute_confidence=0.85,
        total_score=total_score,
        elements=elements if elements is not None else [],
    )
    kwargs.update(overrides)
    return SamplePair(**kwargs)


@pytest.fixture
def make_sample():
    """Factory for a valid SamplePair with overridable fields."""
    return _sample


def _elements_for(rng: np.random.Generator, n: int) -> list[ElementAnnotation]:
    names = ["fox", "fence", "jumping", "red", "wooden", "meadow"]
    cats = ["animal", "object", "activity", "color", "attribute", "location"]
    return [
        ElementAnnotation(
            name=names[i],
            category=cats[i],
            score=round(float(rng.integers(0, 7)) / 6.0, 6),
        )
        for i in range(n)
    ]


@pytest.fixture
def make_split():
    """Factory for a labeled DatasetSplit with seeded synthetic annotations."""

    def _make(n_train=10, n_validation=0, n_test=0, n_elements=3, seed=7) -> DatasetSplit:
        rng = np.random.default_rng(seed)
        split = DatasetSplit()
        lists = (("train", split.train, n_train),
                 ("validation", split.validation, n_validation),
                 ("test", split.test, n_test))
        counter = 0
        for split_name, bucket, count in lists:
            for _ in range(count):
                counter += 1
                bucket.append(
                    _sample(
                        sample_id=f"s-{counter:03d}",
                        prompt=f"prompt number {counter} with a fox",
                        prompt_type="real" if counter % 2 else "synthetic",
                        split=split_name,
                        total_score=float(1 + 4 * rng.random()),
                        elements=_elements_for(rng, n_elements),
                    )
                )
        return split

    return _make


@pytest.fixture
def write_dataset(tmp_path):
    """Write a DatasetSplit to a JSONL file under tmp_path, returning its path."""

    def _write(split: DatasetSplit, name="dataset.jsonl") -> str:
        path = tmp_path / name
        export_dataset(split, str(path))
        return str(path)

    return _write


@pytest.fixture
def make_png(tmp_path):
    """Write a small RGB PNG; pixel (x, y) encodes its own coordinates."""

    def _write(relpath="images/img.png", width=64, height=64, value=None) -> str:
        path = tmp_path / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        if value is None:
            ys, xs = np.mgrid[0:height, 0:width]
            arr = np.stack([(xs + ys) % 256, xs % 256, ys % 256], axis=-1).astype(np.uint8)
        else:
            arr = np.full((height, width, 3), value, dtype=np.uint8)
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
        return str(path)

    return _write
