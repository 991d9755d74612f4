"""On-disk synthetic datasets: one file per sample plus ``manifest.json``.

Layout::

    <dir>/manifest.json           generator version, kind, parameters, per-sample entries
    <dir>/config.ini              resolved run configuration (written by the CLI)
    <dir>/patch_00000.ctb         noisy counts (CTB1), patch datasets
    <dir>/img_00000.ctb           noisy counts (CTB1), composite datasets
    <dir>/img_00000_mask.png      1-pixel truth boundary mask, composite datasets

Each manifest entry records the sample's seed, index, photon level, the
SHA-256 of its files and the truth (junction parameters or shapes).  Clean
images are re-rendered from the truth on load, which is exact for both kinds.
JSON is written with sorted keys and ``repr`` floats, so regenerating with
the same configuration reproduces every byte.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import noise
from .exceptions import InputError
from .foj import JunctionParams, render_patch_color

MANIFEST = "manifest.json"


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _save_mask(path, mask):
    noise.save_image(path, mask.astype(np.float64))


def write_patch_dataset(out_dir, samples, params):
    out_dir = Path(out_dir)
    entries = []
    for s in samples:
        name = f"patch_{s.index:05d}.ctb"
        noise.write_ctb(out_dir / name, s.noisy)
        entries.append({"file": name, "sha256": sha256_file(out_dir / name), "seed": s.seed,
                        "index": s.index, "alpha": s.noisy.alpha,
                        "truth": {"vertex": s.truth.vertex.tolist(),
                                  "angles": s.truth.angles.tolist(),
                                  "colors": s.truth.colors.tolist()}})
    return _write_manifest(out_dir, "patches", params, entries)


def write_composite_dataset(out_dir, samples, params):
    out_dir = Path(out_dir)
    entries = []
    for s in samples:
        stem = f"img_{s.index:05d}"
        noise.write_ctb(out_dir / f"{stem}.ctb", s.noisy)
        _save_mask(out_dir / f"{stem}_mask.png", s.mask)
        entries.append({"file": f"{stem}.ctb", "mask": f"{stem}_mask.png",
                        "sha256": sha256_file(out_dir / f"{stem}.ctb"),
                        "mask_sha256": sha256_file(out_dir / f"{stem}_mask.png"),
                        "seed": s.seed, "index": s.index, "alpha": s.noisy.alpha,
                        "background": s.background.tolist(),
                        "shapes": [sh.to_dict() for sh in s.shapes]})
    return _write_manifest(out_dir, "composites", params, entries)


def _write_manifest(out_dir, kind, params, entries):
    manifest = {"generator": noise.GENERATOR_VERSION, "kind": kind, "params": params,
                "samples": entries}
    text = json.dumps(manifest, sort_keys=True, indent=1)
    (out_dir / MANIFEST).write_text(text + "\n")
    return manifest


def read_manifest(data_dir):
    path = Path(data_dir) / MANIFEST
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"{data_dir}: no readable {MANIFEST} ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed manifest ({exc})") from exc


def load_dataset(data_dir, expect=None):
    """``(kind, samples)``; samples are :class:`PatchSample` or :class:`CompositeSample`."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    kind = manifest.get("kind")
    if expect is not None and kind != expect:
        raise InputError(f"{data_dir}: expected a {expect} dataset, found {kind!r}")
    R = manifest["params"].get("patch_size", 21)
    samples = []
    for e in manifest["samples"]:
        noisy = noise.read_ctb(data_dir / e["file"])
        if kind == "patches":
            t = e["truth"]
            truth = JunctionParams(np.array(t["vertex"]), np.array(t["angles"]),
                                   np.array(t["colors"]))
            samples.append(noise.PatchSample(noisy, render_patch_color(truth, R), truth,
                                             e["seed"], e["index"]))
        elif kind == "composites":
            shapes = [noise.Shape.from_dict(d) for d in e["shapes"]]
            H, W = noisy.counts.shape[:2]
            clean, _, mask = noise.rasterize(shapes, np.array(e["background"]), H, W)
            samples.append(noise.CompositeSample(noisy, clean, mask, np.array(e["background"]),
                                                 shapes, e["seed"], e["index"]))
        else:
            raise InputError(f"{data_dir}: unknown dataset kind {kind!r}")
    return kind, samples


def sample_stem(entry):
    return Path(entry["file"]).stem
