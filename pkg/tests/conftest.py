"""Shared fixtures: the default pretrained model is expensive, build it once."""

from __future__ import annotations

import pytest

from streamgate.stream import SourceSpec, TrainSpec, make_source_dataset, pretrain_source_model


@pytest.fixture(scope="session")
def source_spec() -> SourceSpec:
    return SourceSpec()


@pytest.fixture(scope="session")
def pretrained(source_spec):
    features, labels = make_source_dataset(source_spec)
    return pretrain_source_model(features, labels, TrainSpec())


@pytest.fixture(scope="session")
def mini_spec() -> SourceSpec:
    return SourceSpec(num_classes=4, dim=8, samples_per_class=100, seed=1)


@pytest.fixture(scope="session")
def mini_pretrained(mini_spec):
    features, labels = make_source_dataset(mini_spec)
    return pretrain_source_model(features, labels, TrainSpec(iterations=150))
