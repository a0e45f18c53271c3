"""Dataset synthesis: phantom volumes to paired FBP / MBIR stacks on disk.

Every volume goes through the same pipeline: render the phantom in HU,
convert to attenuation, forward project each slice, draw Poisson counts,
then reconstruct both FBP (network input) and MBIR (network target) from
the same counts.  All seeds derive from one master seed through named
SeedSequence branches, so a dataset is reproducible from (config, seed)
alone.  The manifest is a plain-text file recording the config echo, the
exact phantom specs, per-volume seeds and artifact paths.

Branch layout: (seed, 1, v) phantom spec for volume v; (seed, 2, v) the
volume counts seed, from which slice k draws (counts_seed, k); (seed, 3, v)
likewise for MBIR pixel visit orders; (seed, 4, z) training for a Z-slice
network.  The per-volume seeds are recorded in the manifest, so the noise
of any slice is reproducible from the manifest alone.
"""

from __future__ import annotations

import configparser
import os
import shutil
from dataclasses import dataclass

import numpy as np

from .core import SliceStack, hu_to_mu, mu_to_hu, read_container, write_container
from .fbp import fbp_reconstruct
from .mbir import mbir_reconstruct
from .nnet import SlicePairSet
from .phantom import EllipseSpec, PhantomSpec, random_spec, render_volume
from .projector import counts_to_line_integrals, forward_project, simulate_counts

MANIFEST_NAME = "manifest.txt"


class StageError(RuntimeError):
    """Pipeline failure wrapper naming the stage; the cause is chained."""

    def __init__(self, stage, message):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def _derive_seed(*path):
    """Single uint32 drawn from a named SeedSequence branch."""
    return int(np.random.SeedSequence(list(path)).generate_state(1)[0])


@dataclass(eq=False)
class VolumeEntry:
    index: int
    split: str
    spec: PhantomSpec
    counts_seed: int
    order_seed: int
    truth: str
    fbp: str
    mbir: str
    counts_dir: str


@dataclass(eq=False)
class DatasetManifest:
    root: str
    config_raw: dict
    volumes: list

    def split(self, name):
        return [v for v in self.volumes if v.split == name]

    def path(self, relative):
        return os.path.join(self.root, relative)


def _format_ellipse(e):
    return " ".join(repr(v) for v in
                    (e.center[0], e.center[1], e.semi_axes[0], e.semi_axes[1],
                     e.angle, e.delta_hu))


def _parse_ellipse(text):
    vals = [float(v) for v in text.split()]
    if len(vals) != 6:
        raise ValueError(f"ellipse line needs 6 numbers, got {len(vals)}")
    return EllipseSpec((vals[0], vals[1]), (vals[2], vals[3]), vals[4], vals[5])


def write_manifest(manifest, path=None):
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in manifest.config_raw.items():
        parser[f"config.{section}"] = dict(keys)
    for vol in manifest.volumes:
        sec = f"volume.{vol.index}"
        parser[sec] = {
            "split": vol.split,
            "counts_seed": str(vol.counts_seed),
            "order_seed": str(vol.order_seed),
            "truth": vol.truth,
            "fbp": vol.fbp,
            "mbir": vol.mbir,
            "counts_dir": vol.counts_dir,
            "n_slices": str(vol.spec.n_slices),
            "z_drift": repr(vol.spec.z_drift),
            "spec_seed": str(vol.spec.seed),
            "body": _format_ellipse(vol.spec.body),
        }
        for i, ins in enumerate(vol.spec.inserts):
            parser[sec][f"insert_{i}"] = _format_ellipse(ins)
    if path is None:
        path = os.path.join(manifest.root, MANIFEST_NAME)
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def read_manifest(path):
    parser = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ValueError(f"malformed manifest {path}: {exc}") from exc
    config_raw = {}
    volumes = []
    for section in parser.sections():
        if section.startswith("config."):
            config_raw[section[len("config."):]] = dict(parser.items(section))
            continue
        if not section.startswith("volume."):
            raise ValueError(f"unknown manifest section [{section}]")
        items = dict(parser.items(section))
        inserts = []
        i = 0
        while f"insert_{i}" in items:
            inserts.append(_parse_ellipse(items[f"insert_{i}"]))
            i += 1
        spec = PhantomSpec(
            body=_parse_ellipse(items["body"]),
            inserts=tuple(inserts),
            z_drift=float(items["z_drift"]),
            n_slices=int(items["n_slices"]),
            seed=int(items["spec_seed"]),
        )
        volumes.append(VolumeEntry(
            index=int(section.split(".", 1)[1]),
            split=items["split"],
            spec=spec,
            counts_seed=int(items["counts_seed"]),
            order_seed=int(items["order_seed"]),
            truth=items["truth"],
            fbp=items["fbp"],
            mbir=items["mbir"],
            counts_dir=items["counts_dir"],
        ))
    volumes.sort(key=lambda v: v.index)
    return DatasetManifest(root=os.path.dirname(os.path.abspath(path)),
                           config_raw=config_raw, volumes=volumes)


def validate_manifest(manifest):
    """Check file presence, container validity and split invariants."""
    splits = {v.split for v in manifest.volumes}
    if not splits <= {"train", "test"}:
        raise ValueError(f"unknown split labels {sorted(splits - {'train', 'test'})}")
    if not manifest.split("train") or not manifest.split("test"):
        raise ValueError("need at least one train and one test volume")
    ids = [v.index for v in manifest.volumes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate volume indices in manifest")
    for vol in manifest.volumes:
        for rel in (vol.truth, vol.fbp, vol.mbir):
            read_container(manifest.path(rel))
        for k in range(vol.spec.n_slices):
            read_container(manifest.path(_counts_name(vol.counts_dir, k)))
    return True


def _counts_name(counts_dir, k):
    return os.path.join(counts_dir, f"s{k:02d}.ctk")


def load_stack(manifest, relative):
    stack = read_container(manifest.path(relative))
    if not isinstance(stack, SliceStack):
        raise ValueError(f"{relative} is not a slice stack")
    return stack


def gen_dataset(cfg, out_dir):
    """Build the full corpus under out_dir and return the manifest.

    Any stage failure removes everything created under out_dir before the
    error propagates, wrapped in a StageError naming the stage.
    """
    seed = cfg.getint("corpus", "seed")
    n_volumes = cfg.getint("corpus", "n_volumes")
    n_train = cfg.getint("corpus", "n_train")
    n_slices = cfg.getint("corpus", "n_slices")
    difficulty = cfg.get("corpus", "difficulty")
    spacing = cfg.getfloat("corpus", "slice_spacing_mm")
    width, height, pixel = cfg.grid()
    geom = cfg.geometry()
    i0 = cfg.i0()
    mu_water = cfg.mu_water()
    fbp_params = cfg.fbp_params()
    mbir_params = cfg.mbir_params()

    created = not os.path.exists(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    made_paths = []
    volumes = []
    stage = "setup"
    try:
        for v in range(n_volumes):
            stage = f"phantom volume {v}"
            spec = random_spec(_derive_seed(seed, 1, v),
                               difficulty=difficulty, n_slices=n_slices)
            counts_seed = _derive_seed(seed, 2, v)
            order_seed = _derive_seed(seed, 3, v)
            stage = f"render volume {v}"
            truth = render_volume(spec, width, height, pixel, spacing)

            vol_dir = f"vol{v}"
            counts_dir = os.path.join(vol_dir, "counts")
            os.makedirs(os.path.join(out_dir, counts_dir), exist_ok=True)
            made_paths.append(os.path.join(out_dir, vol_dir))

            fbp_slices = []
            mbir_slices = []
            for k in range(n_slices):
                stage = f"project volume {v} slice {k}"
                mu_img = hu_to_mu(truth.slices[k], mu_water)
                clean = forward_project(mu_img, geom)
                stage = f"counts volume {v} slice {k}"
                counts = simulate_counts(clean, i0, _derive_seed(counts_seed, k))
                counts_path = os.path.join(out_dir, _counts_name(counts_dir, k))
                write_container(counts_path, counts)
                noisy, weights = counts_to_line_integrals(counts)
                stage = f"fbp volume {v} slice {k}"
                fbp_img = fbp_reconstruct(noisy, geom, fbp_params)
                fbp_slices.append(mu_to_hu(fbp_img, mu_water))
                stage = f"mbir volume {v} slice {k}"
                result = mbir_reconstruct(noisy, weights, geom, mbir_params,
                                          order_seed=_derive_seed(order_seed, k))
                mbir_slices.append(mu_to_hu(result.image, mu_water))

            stage = f"write volume {v}"
            entry = VolumeEntry(
                index=v,
                split="train" if v < n_train else "test",
                spec=spec,
                counts_seed=counts_seed,
                order_seed=order_seed,
                truth=os.path.join(vol_dir, "truth.ctk"),
                fbp=os.path.join(vol_dir, "fbp.ctk"),
                mbir=os.path.join(vol_dir, "mbir.ctk"),
                counts_dir=counts_dir,
            )
            write_container(os.path.join(out_dir, entry.truth), truth)
            write_container(os.path.join(out_dir, entry.fbp),
                            SliceStack(tuple(fbp_slices), spacing))
            write_container(os.path.join(out_dir, entry.mbir),
                            SliceStack(tuple(mbir_slices), spacing))
            volumes.append(entry)

        stage = "manifest"
        manifest = DatasetManifest(root=os.path.abspath(out_dir),
                                   config_raw=cfg.raw, volumes=volumes)
        write_manifest(manifest)
        validate_manifest(manifest)
        return manifest
    except Exception as exc:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        else:
            for path in made_paths:
                shutil.rmtree(path, ignore_errors=True)
            stray = os.path.join(out_dir, MANIFEST_NAME)
            if os.path.exists(stray):
                os.remove(stray)
        raise StageError(stage, str(exc)) from exc


def window_indices(n_slices, k, z):
    """Symmetric Z-window around slice k with edge replication."""
    half = z // 2
    return [min(max(k + off, 0), n_slices - 1) for off in range(-half, half + 1)]


def assemble_pairs(manifest, z, split="train"):
    """Z-window FBP inputs against single MBIR targets for one split, HU."""
    if z % 2 == 0 or z < 1:
        raise ValueError(f"z must be odd and >= 1, got {z}")
    inputs = []
    targets = []
    ids = []
    for vol in manifest.split(split):
        fbp_stack = load_stack(manifest, vol.fbp).to_array()
        mbir_stack = load_stack(manifest, vol.mbir).to_array()
        n = fbp_stack.shape[0]
        for k in range(n):
            idx = window_indices(n, k, z)
            inputs.append(fbp_stack[idx])
            targets.append(mbir_stack[k : k + 1])
            ids.append(f"vol{vol.index}/slice{k}")
    return SlicePairSet(np.stack(inputs).astype(np.float32),
                        np.stack(targets).astype(np.float32),
                        tuple(ids))
