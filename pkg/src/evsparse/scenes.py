"""Built-in glyphs and a seeded moving-glyph dataset builder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventStream, SyntheticSceneSpec, generate_scene

_ART = {
    "club": """
    ...###...
    ..#####..
    ..#####..
    ###.#.###
    #########
    ###.#.###
    ....#....
    ...###...
    ..#####..
    """,
    "diamond": """
    ....#....
    ...###...
    ..#####..
    .#######.
    #########
    .#######.
    ..#####..
    ...###...
    ....#....
    """,
    "heart": """
    .##...##.
    ####.####
    #########
    #########
    .#######.
    ..#####..
    ...###...
    ....#....
    .........
    """,
    "spade": """
    ....#....
    ...###...
    ..#####..
    .#######.
    #########
    #########
    .##.#.##.
    ....#....
    ...###...
    """,
}


def _parse(art: str) -> np.ndarray:
    rows = [r.strip() for r in art.strip().splitlines()]
    return np.array([[c == "#" for c in r] for r in rows], dtype=bool)


GLYPHS = {name: _parse(art) for name, art in _ART.items()}
CARD_SUITS = ("club", "diamond", "heart", "spade")


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple = CARD_SUITS
    n_train: int = 7
    n_test: int = 3
    width: int = 32
    height: int = 24
    duration_us: int = 20000
    travel_px: float = 12.0
    jitter_px: float = 2.0
    sample_rate: float = 0.01   # trajectory samples per microsecond
    noise_rate: float = 1.0     # events per pixel per second

    def __post_init__(self):
        unknown = [c for c in self.classes if c not in GLYPHS]
        if unknown:
            raise ValueError(f"unknown glyphs: {unknown}")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("example counts must be >= 0")


def example_scene(ds: DatasetSpec, label: str, seed: int) -> SyntheticSceneSpec:
    """One recording: the glyph sweeps left to right with random start,
    height and slant."""
    rng = np.random.default_rng(seed)
    mask = GLYPHS[label]
    mh, mw = mask.shape
    j = ds.jitter_px
    x0 = 1 + rng.uniform(0, j)
    y0 = (ds.height - mh) / 2 + rng.uniform(-j, j)
    dx = ds.travel_px
    dy = rng.uniform(-j, j) / 2
    if x0 + dx + mw > ds.width - 1:
        dx = ds.width - 1 - mw - x0
    traj = ((0, x0, y0), (ds.duration_us, x0 + dx, y0 + dy))
    return SyntheticSceneSpec(mask, traj, ds.sample_rate, ds.noise_rate, seed)


def build_dataset(ds: DatasetSpec, seed: int):
    """``(train, test)`` lists of ``(label, EventStream, name)``."""
    ss = np.random.SeedSequence(seed)
    splits = {"train": ds.n_train, "test": ds.n_test}
    out = {}
    child = iter(ss.spawn(len(ds.classes) * (ds.n_train + ds.n_test)))
    for split, count in splits.items():
        items = []
        for label in ds.classes:
            for k in range(count):
                s = int(next(child).generate_state(1)[0])
                stream = generate_scene(example_scene(ds, label, s), (ds.width, ds.height))
                items.append((label, stream, f"{split}/{label}_{k:03d}.evs"))
        out[split] = items
    return out["train"], out["test"]
