import numpy as np
import pytest

from smearscreen.imagecore import FloatPlane, Tile
from smearscreen.dataset import LabeledTile


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_tile(values: np.ndarray, tile_id: str = "t0", label: str = "healthy") -> LabeledTile:
    size = values.shape[0]
    return LabeledTile(
        tile_id=tile_id,
        tile=Tile(size, (0, 0), FloatPlane(np.asarray(values, dtype=np.float64))),
        label=label,
    )


def constant_tile(value: float, size: int = 8, tile_id: str = "t0", label: str = "healthy") -> LabeledTile:
    return make_tile(np.full((size, size), value), tile_id, label)


def brightness_tiles(n_per_class: int, size: int = 71, seed: int = 0) -> list[LabeledTile]:
    """Linearly separable tiles: healthy dark, infected bright, plus noise."""
    rng = np.random.default_rng(seed)
    tiles = []
    for i in range(n_per_class):
        dark = 0.3 + rng.normal(0, 0.02, (size, size))
        tiles.append(make_tile(dark, f"h{i}", "healthy"))
        bright = 0.7 + rng.normal(0, 0.02, (size, size))
        tiles.append(make_tile(bright, f"i{i}", "infected"))
    return tiles
