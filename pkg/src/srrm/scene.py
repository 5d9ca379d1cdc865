"""Scene bundle (coarse T_B plus fine covariates) and its on-disk layout.

A scene directory holds one FGRID file per layer and ``manifest.txt``, a
``key = value`` listing that maps layer names to files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .raster import LC_CLASSES, FractionStack, Grid, RasterError, read_fgrid, write_fgrid

DYNAMIC_COVARIATES = ("lst", "ndvi", "evi", "ppt")
SOIL_TEXTURE = ("sand", "clay", "silt")
MANIFEST = "manifest.txt"


@dataclass
class Scene:
    tb_coarse: Grid
    covariates_fine: dict[str, Grid]
    landcover: FractionStack
    soil: dict[str, Grid]
    factor: int
    name: str = "scene"
    extras: dict[str, Grid] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def fine_shape(self) -> tuple[int, int]:
        return self.tb_coarse.rows * self.factor, self.tb_coarse.cols * self.factor

    def fine_layers(self) -> list[Grid]:
        return ([self.covariates_fine[k] for k in DYNAMIC_COVARIATES]
                + self.landcover.grids() + [self.soil[k] for k in SOIL_TEXTURE])

    def validate(self) -> None:
        missing = [k for k in DYNAMIC_COVARIATES if k not in self.covariates_fine]
        missing += [k for k in SOIL_TEXTURE if k not in self.soil]
        if missing:
            raise RasterError(f"scene is missing layers: {missing}")
        if self.factor < 1:
            raise RasterError("scene factor must be >= 1")
        shape = self.fine_shape
        for g in self.fine_layers():
            if g.shape != shape:
                raise RasterError(f"fine layer {g.name!r} has shape {g.shape}, expected {shape}")
        expected_cell = self.tb_coarse.cell_size / self.factor
        for g in self.fine_layers():
            if not np.isclose(g.cell_size, expected_cell, rtol=1e-12):
                raise RasterError(f"fine layer {g.name!r} has cell size {g.cell_size}, "
                                  f"expected {expected_cell}")
        tex = np.stack([self.soil[k].values for k in SOIL_TEXTURE])
        ok = np.logical_and.reduce([self.soil[k].mask for k in SOIL_TEXTURE])
        if ok.any() and np.max(np.abs(tex[:, ok].sum(axis=0) - 1.0)) > 1e-6:
            raise RasterError("soil texture fractions do not sum to 1")


def write_scene(scene: Scene, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = [("name", scene.name), ("factor", str(scene.factor))]
    layers = {"tb_coarse": scene.tb_coarse}
    layers.update({k: scene.covariates_fine[k] for k in DYNAMIC_COVARIATES})
    layers.update({f"lc_{c}": g for c, g in zip(scene.landcover.class_names, scene.landcover.fractions)})
    layers.update({k: scene.soil[k] for k in SOIL_TEXTURE})
    layers.update(scene.extras)
    for key, grid in layers.items():
        fname = f"{key}.fgrid"
        write_fgrid(grid, d / fname)
        entries.append((key, fname))
    text = "# srrm scene manifest\n" + "".join(f"{k} = {v}\n" for k, v in entries)
    (d / MANIFEST).write_text(text)
    return d


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scene manifest not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise RasterError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = val.strip()
    return out


def read_scene(directory) -> Scene:
    d = Path(directory)
    man = read_manifest(d / MANIFEST)

    def load(key):
        if key not in man:
            raise RasterError(f"{d / MANIFEST}: missing layer {key!r}")
        return read_fgrid(d / man[key], name=key)

    known = {"name", "factor", "tb_coarse", *DYNAMIC_COVARIATES, *SOIL_TEXTURE,
             *(f"lc_{c}" for c in LC_CLASSES)}
    lc = FractionStack(LC_CLASSES, tuple(load(f"lc_{c}") for c in LC_CLASSES))
    extras = {k: read_fgrid(d / v, name=k) for k, v in man.items() if k not in known}
    return Scene(
        tb_coarse=load("tb_coarse"),
        covariates_fine={k: load(k) for k in DYNAMIC_COVARIATES},
        landcover=lc,
        soil={k: load(k) for k in SOIL_TEXTURE},
        factor=int(man.get("factor", "4")),
        name=man.get("name", d.name),
        extras=extras,
    )
