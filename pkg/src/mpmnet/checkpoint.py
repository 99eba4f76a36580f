"""Checkpoint directories: ``manifest.txt`` + one raw array per tensor + ``head.txt``.

``manifest.txt`` has one line per tensor, ``<name> <dtype> <shape>`` with the
shape written as comma-separated extents (``-`` for a scalar). Each tensor is
stored in ``<name>.bin`` as little-endian raw bytes. ``head.txt`` holds
``key = value`` lines for the architecture, head kind and the frozen MPM
solution scalars.
"""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .errors import IntegrityError
from .mpm import ClassStats, MpmHead, MpmSolution
from .network import Model, build_arch
from .tensor import Tensor

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def _shape_str(shape) -> str:
    return ",".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "-":
        return ()
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError as exc:
        raise IntegrityError(f"bad shape field {text!r}") from exc


def _collect(model: Model) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in model.params.items()}
    if model.head is not None:
        arrays["head.a"] = model.head.a.data
    if model.solution is not None:
        arrays["solution.a_star"] = model.solution.a_star
    stats = model.meta.get("frozen_stats")
    if stats is not None:
        arrays["stats.mean_x"] = stats.mean_x.data
        arrays["stats.mean_y"] = stats.mean_y.data
        arrays["stats.cov_x"] = stats.cov_x.data
        arrays["stats.cov_y"] = stats.cov_y.data
    return arrays


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in _collect(model).items():
        dt = str(arr.dtype)
        if dt not in _DTYPES:
            raise IntegrityError(f"unsupported dtype {dt} for {name}")
        (path / f"{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes())
        lines.append(f"{name} {dt} {_shape_str(arr.shape)}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    head = {
        "dataset": model.arch.dataset,
        "head_kind": model.arch.head,
        "input_mean": repr(model.arch.input_mean),
        "input_std": repr(model.arch.input_std),
    }
    for key in ("positive_digit", "train_samples", "seed"):
        if key in model.meta:
            head[key] = str(model.meta[key])
    if model.head is not None:
        head["lambda"] = repr(float(model.head.lam))
    if model.solution is not None:
        head["b_star"] = repr(float(model.solution.b_star))
        head["alpha_star"] = repr(float(model.solution.alpha_star))
    if "frozen_stats" in model.meta:
        head["n_x"] = str(model.meta["frozen_stats"].n_x)
        head["n_y"] = str(model.meta["frozen_stats"].n_y)
    (path / "head.txt").write_text("".join(f"{k} = {v}\n" for k, v in head.items()))
    return path


def _read_kv(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise IntegrityError(f"{path.name}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(path: Union[str, Path]) -> Model:
    path = Path(path)
    manifest, head_file = path / "manifest.txt", path / "head.txt"
    if not manifest.is_file() or not head_file.is_file():
        raise IntegrityError(f"{path} is missing manifest.txt or head.txt")
    arrays: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise IntegrityError(f"manifest line {lineno} is malformed: {line!r}")
        name, dt, shape_s = parts
        if dt not in _DTYPES:
            raise IntegrityError(f"manifest line {lineno}: unsupported dtype {dt}")
        shape = _parse_shape(shape_s)
        f = path / f"{name}.bin"
        if not f.is_file():
            raise IntegrityError(f"array file for {name} is missing")
        raw = f.read_bytes()
        expected = int(np.prod(shape)) * np.dtype(_DTYPES[dt]).itemsize
        if len(raw) != expected:
            raise IntegrityError(f"{name}: {len(raw)} bytes on disk, manifest implies {expected}")
        arrays[name] = np.frombuffer(raw, dtype=_DTYPES[dt]).astype(dt).reshape(shape)
    meta = _read_kv(head_file)
    try:
        arch = build_arch(meta["dataset"], meta["head_kind"])
        arch.input_mean = float(meta.get("input_mean", 0.0))
        arch.input_std = float(meta.get("input_std", 1.0))
    except KeyError as exc:
        raise IntegrityError(f"head.txt lacks {exc}") from exc
    params = {}
    for name, shape in arch.param_shapes().items():
        if name not in arrays:
            raise IntegrityError(f"checkpoint has no tensor {name}")
        if arrays[name].shape != shape:
            raise IntegrityError(f"{name}: stored shape {arrays[name].shape}, architecture needs {shape}")
        params[name] = Tensor(arrays[name], requires_grad=True, name=name)
    model = Model(arch, params)
    for key in ("positive_digit", "train_samples", "seed"):
        if key in meta:
            model.meta[key] = int(meta[key])
    if arch.head == "mpm-1":
        if "head.a" in arrays:
            model.head = MpmHead(Tensor(arrays["head.a"], requires_grad=True), float(meta.get("lambda", 0.0)))
        if "solution.a_star" in arrays:
            try:
                model.solution = MpmSolution(arrays["solution.a_star"], float(meta["b_star"]),
                                             float(meta["alpha_star"]))
            except KeyError as exc:
                raise IntegrityError(f"head.txt lacks {exc}") from exc
        if "stats.mean_x" in arrays:
            model.meta["frozen_stats"] = ClassStats.from_arrays(
                arrays["stats.mean_x"], arrays["stats.mean_y"], arrays["stats.cov_x"], arrays["stats.cov_y"],
                int(meta.get("n_x", 2)), int(meta.get("n_y", 2)))
    return model
