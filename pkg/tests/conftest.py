import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=60, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_TRAIN = dict(
    model=dict(
        encoder=dict(leads=2, kernels=[5, 3, 3, 3], strides=[2, 2, 2, 1], multipliers=[2, 4, 4, 8]),
        stages=dict(dim=8, heads=2, layers_per_stage=[1, 1, 1], mlp_ratio=2),
        dtype="float64",
    ),
    pipeline=dict(target_fs=100.0, segment_seconds=3.0, fir_taps=101),
    batch_size=4,
    epochs=3,
    seed=5,
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """16 two-lead synthetic recordings with folds; returns the manifest path."""
    from stageformer.signals import (
        SyntheticSpec, read_manifest, split_folds, synth_generate, write_dataset, write_manifest,
    )

    root = tmp_path_factory.mktemp("tiny")
    spec = SyntheticSpec(n_recordings=16, leads=2, duration=4.0, rng_seed=21)
    path = write_dataset(synth_generate(spec), spec.class_names, root / "data")
    write_manifest(split_folds(read_manifest(path), 4, 0), path)
    return path


@pytest.fixture
def tiny_train_config():
    import copy

    from stageformer.train import TrainConfig

    return TrainConfig.from_dict(copy.deepcopy(TINY_TRAIN))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
