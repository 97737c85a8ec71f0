"""Locations of the checkpoint and config that ship inside the package."""
from importlib import resources
from pathlib import Path

TRAIN_SEED = 42
DATA_SEED = 1


def _data(name: str) -> Path:
    return Path(str(resources.files("prospect_lab") / "data" / name))


def model_path() -> Path:
    return _data("model.psar")


def config_path() -> Path:
    return _data("default.cfg")
