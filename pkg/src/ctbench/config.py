"""Plain-text key=value configuration with section headers.

Every key has a documented default; a config file only needs the keys it
changes.  `load_config` reads defaults, then the file, then explicit
overrides, and rejects unknown sections or keys so typos fail loudly.
The defaults describe the desk-scale corpus: 6 volumes of 9 slices at
64 x 64 / 1 mm, 90 views, 1e4 photons per ray, 4 train / 2 test.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .core import MU_WATER_DEFAULT, RoiSpec
from .fbp import FbpParams
from .mbir import MbirParams
from .metrics import NpsParams
from .nnet import NetSpec, TrainConfig
from .projector import Geometry

# section -> key -> (default string, docstring)
SCHEMA = {
    "geometry": {
        "grid": ("64", "image width and height in pixels"),
        "pixel_size_mm": ("1.0", "pixel pitch in mm"),
        "n_views": ("90", "projection angles over [0, pi)"),
        "i0": ("1e4", "incident photons per detector sample"),
    },
    "corpus": {
        "n_volumes": ("6", "total phantom volumes"),
        "n_slices": ("9", "axial slices per volume"),
        "n_train": ("4", "leading volumes used for training; the rest test"),
        "slice_spacing_mm": ("1.0", "axial spacing in mm"),
        "difficulty": ("standard", "phantom insert density: easy or standard"),
        "seed": ("0", "master seed for phantoms, counts and training"),
    },
    "physics": {
        "mu_water": ("0.02", "water attenuation in 1/mm for the HU scale"),
    },
    "fbp": {
        "window": ("hann", "ramp apodization: ramlak or hann"),
        "pad_factor": ("2", "power-of-two detector zero-padding multiplier"),
    },
    "mbir": {
        "p": ("2.0", "q-GGMRF shape exponent"),
        "q": ("1.2", "q-GGMRF low-contrast exponent"),
        "c_hu": ("10.0", "transition contrast in HU"),
        "beta": ("8e6", "prior strength"),
        "max_iters": ("40", "maximum full ICD passes"),
        "tol": ("1e-6", "relative objective-decrease stop threshold"),
        "init": ("fbp", "initial image: fbp or zero"),
    },
    "net": {
        "depth": ("3", "down/up levels"),
        "base_channels": ("16", "first-level feature count"),
        "kernel": ("3", "conv kernel size (odd)"),
        "residual": ("1", "1: output = center input slice + delta"),
    },
    "train": {
        "learning_rate": ("1e-3", "optimizer step size"),
        "epochs": ("60", "training epochs at desk scale"),
        "batch_size": ("4", "pairs per optimizer step"),
        "optimizer": ("adam", "adam or sgd"),
    },
    "evaluate": {
        "data_range_hu": ("2000", "fixed PSNR data range"),
        "roi_x0": ("8", "uniform ROI left edge, pixels"),
        "roi_y0": ("20", "uniform ROI top edge, pixels"),
        "roi_w": ("24", "uniform ROI width, pixels"),
        "roi_h": ("24", "uniform ROI height, pixels"),
        "nps_patch": ("16", "NPS patch size (power of two)"),
        "nps_stride": ("4", "NPS patch stride"),
        "nps_bins": ("8", "radial NPS bins"),
        "nps_detrend": ("mean", "patch detrend: mean or plane"),
        "profile_row": ("32", "image row for the line-profile figure"),
    },
}


@dataclass(eq=False)
class WorkbenchConfig:
    """Typed view over the merged configuration."""

    raw: dict

    def get(self, section, key):
        return self.raw[section][key]

    def getint(self, section, key):
        return int(self.raw[section][key])

    def getfloat(self, section, key):
        return float(self.raw[section][key])

    # geometry and physics -------------------------------------------------
    def grid(self):
        n = self.getint("geometry", "grid")
        return (n, n, self.getfloat("geometry", "pixel_size_mm"))

    def geometry(self):
        return Geometry.parallel(self.getint("geometry", "n_views"), self.grid())

    def i0(self):
        return self.getfloat("geometry", "i0")

    def mu_water(self):
        return self.getfloat("physics", "mu_water")

    # reconstruction -------------------------------------------------------
    def fbp_params(self):
        return FbpParams(
            window=self.get("fbp", "window"),
            pad_factor=self.getint("fbp", "pad_factor"),
        )

    def mbir_params(self):
        c = self.getfloat("mbir", "c_hu") * self.mu_water() / 1000.0
        return MbirParams(
            p=self.getfloat("mbir", "p"),
            q=self.getfloat("mbir", "q"),
            c=c,
            beta=self.getfloat("mbir", "beta"),
            max_iters=self.getint("mbir", "max_iters"),
            tol=self.getfloat("mbir", "tol"),
            init=self.get("mbir", "init"),
        )

    # network --------------------------------------------------------------
    def net_spec(self, z):
        return NetSpec(
            z_channels=z,
            depth=self.getint("net", "depth"),
            base_channels=self.getint("net", "base_channels"),
            kernel=self.getint("net", "kernel"),
            residual=bool(self.getint("net", "residual")),
        )

    def train_config(self, seed, epochs=None, learning_rate=None):
        return TrainConfig(
            learning_rate=(self.getfloat("train", "learning_rate")
                           if learning_rate is None else learning_rate),
            epochs=self.getint("train", "epochs") if epochs is None else epochs,
            batch_size=self.getint("train", "batch_size"),
            seed=seed,
            optimizer=self.get("train", "optimizer"),
        )

    # evaluation -----------------------------------------------------------
    def roi(self):
        return RoiSpec("rect", (
            self.getint("evaluate", "roi_x0"),
            self.getint("evaluate", "roi_y0"),
            self.getint("evaluate", "roi_w"),
            self.getint("evaluate", "roi_h"),
        ))

    def nps_params(self):
        return NpsParams(
            roi=self.roi(),
            patch_size=self.getint("evaluate", "nps_patch"),
            stride=self.getint("evaluate", "nps_stride"),
            detrend=self.get("evaluate", "nps_detrend"),
        )


def default_raw():
    return {s: {k: v for k, (v, _) in keys.items()} for s, keys in SCHEMA.items()}


def load_config(path=None, overrides=None):
    """Merge defaults <- file <- overrides; reject unknown keys.

    overrides is a mapping {(section, key): value} applied last.
    """
    raw = default_raw()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in SCHEMA:
                raise ValueError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ValueError(f"unknown config key {key!r} in [{section}]")
                raw[section][key] = value
    for (section, key), value in (overrides or {}).items():
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ValueError(f"unknown config override [{section}] {key!r}")
        raw[section][key] = str(value)
    cfg = WorkbenchConfig(raw)
    _sanity(cfg)
    return cfg


def _sanity(cfg):
    if cfg.getint("corpus", "n_volumes") < 2:
        raise ValueError("need at least 2 volumes (1 train + 1 test)")
    n_train = cfg.getint("corpus", "n_train")
    if not (1 <= n_train < cfg.getint("corpus", "n_volumes")):
        raise ValueError("n_train must leave at least one test volume")
    if cfg.get("corpus", "difficulty") not in ("easy", "standard"):
        raise ValueError("difficulty must be easy or standard")
    if cfg.getint("corpus", "n_slices") < 1:
        raise ValueError("n_slices must be >= 1")
    if not cfg.i0() > 0:
        raise ValueError("i0 must be > 0")
    if not cfg.mu_water() > 0:
        raise ValueError("mu_water must be > 0")
    # constructing the typed views validates their own invariants
    cfg.fbp_params()
    cfg.mbir_params()
    cfg.nps_params()


def write_default_config(path):
    """Emit a fully commented config file with every default value."""
    lines = ["# ctbench configuration: key = value under section headers.",
             "# Every key is optional; these are the defaults.", ""]
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (value, doc) in keys.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {value}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
