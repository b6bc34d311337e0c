"""Two-arm spiral generation, standardisation, and on-disk formats.

Datasets go to CSV (``x1,x2,label`` with 17 significant digits, so round
trips are value-exact) with a JSON metadata sidecar. Model checkpoints go
to a single JSON file with base64-encoded little-endian float64 arrays;
loading one reproduces eval-mode predictions bitwise.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import BatchNormState, Tensor
from .depth import DepthPosterior, make_prior
from .network import LdnNetwork, NetworkConfig, ResidualBlock

CHECKPOINT_VERSION = 1


class ParseError(ValueError):
    """A dataset or checkpoint file could not be parsed."""


class VersionError(ValueError):
    """Checkpoint format version is not supported."""


class DegenerateDataError(ValueError):
    """Data unusable for the requested operation (e.g. zero-variance column)."""


@dataclass
class Dataset:
    x: np.ndarray  # [n, 2] float64
    y: np.ndarray  # [n] int64 labels in {0, 1}
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.x.shape[0]


SPIRAL_RADIUS = 1.0


def gen_spirals(n, rotation_deg, sigma, seed, radius=None):
    """Draw n points from a two-arm spiral with additive Gaussian noise.

    Per class c in {0, 1} and sample: t ~ U(0,1), phi = t * rotation + c*pi,
    point = radius * t * (sin phi, cos phi) + N(0, sigma^2) per coordinate.
    Half the samples per arm; deterministic for a given seed. ``radius``
    fixes the arm length relative to the absolute noise scale.
    """
    if n % 2 != 0:
        raise ValueError(f"n must be even (half per arm), got {n}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    radius = SPIRAL_RADIUS if radius is None else float(radius)
    rng = np.random.default_rng(seed)
    rotation = math.radians(rotation_deg)
    half = n // 2
    xs, ys = [], []
    for c in (0, 1):
        t = rng.uniform(0.0, 1.0, size=half)
        phi = t * rotation + c * math.pi
        base = (radius * t)[:, None] * np.stack([np.sin(phi), np.cos(phi)], axis=1)
        noise = rng.normal(0.0, sigma, size=(half, 2))
        xs.append(base + noise)
        ys.append(np.full(half, c, dtype=np.int64))
    meta = {
        "rotation_deg": float(rotation_deg),
        "sigma": float(sigma),
        "n": int(n),
        "seed": int(seed),
        "radius": radius,
        "standardized": False,
    }
    return Dataset(np.concatenate(xs), np.concatenate(ys), meta)


def standardize(train, others=()):
    """Shift/scale so train has per-coordinate mean 0 and std 1.

    The same affine map (train's constants) is applied to every dataset in
    ``others``. Returns (train', list-of-others', (mean, std)).
    """
    if train.n == 0:
        raise DegenerateDataError("cannot standardize an empty dataset")
    mean = train.x.mean(axis=0)
    std = train.x.std(axis=0)
    if np.any(std == 0.0):
        raise DegenerateDataError("zero-variance coordinate; cannot standardize")

    def apply(ds):
        meta = dict(ds.meta)
        meta["standardized"] = True
        meta["standardize_mean"] = mean.tolist()
        meta["standardize_std"] = std.tolist()
        return Dataset((ds.x - mean) / std, ds.y.copy(), meta)

    return apply(train), [apply(ds) for ds in others], (mean, std)


# -- dataset files ------------------------------------------------------


def _sidecar_path(path):
    return Path(str(path) + ".meta.json")


def save_dataset(dataset, path):
    path = Path(path)
    lines = ["x1,x2,label"]
    for (x1, x2), label in zip(dataset.x, dataset.y):
        lines.append(f"{x1:.17g},{x2:.17g},{int(label)}")
    path.write_text("\n".join(lines) + "\n")
    _sidecar_path(path).write_text(json.dumps(dataset.meta, indent=2) + "\n")


def load_dataset(path):
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "x1,x2,label":
        raise ParseError(f"{path}:1: expected header 'x1,x2,label'")
    xs, ys = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 comma-separated fields")
        try:
            xs.append((float(parts[0]), float(parts[1])))
            ys.append(int(parts[2]))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    meta = {}
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    return Dataset(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64), meta)


# -- checkpoints ---------------------------------------------------------


def _encode_array(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(obj, name):
    try:
        raw = base64.b64decode(obj["data"], validate=True)
        shape = tuple(obj["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"checkpoint array {name!r} is malformed: {exc}") from exc
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ParseError(
            f"checkpoint array {name!r} has {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


@dataclass
class Checkpoint:
    version: int
    net_config: NetworkConfig
    params: dict  # name -> ndarray, in network parameter order
    bn_stats: list  # per block: dict with running_mean/running_var/momentum/eps
    posterior_logits: np.ndarray
    gamma: float

    def build(self):
        """Reconstruct (network, posterior, prior) from the stored arrays."""
        cfg = self.net_config
        p = self.params
        blocks = []
        for i in range(cfg.max_depth):
            stats = self.bn_stats[i]
            blocks.append(
                ResidualBlock(
                    weight=Tensor(p[f"block{i}.weight"], requires_grad=True),
                    bias=Tensor(p[f"block{i}.bias"], requires_grad=True),
                    bn_scale=Tensor(p[f"block{i}.bn_scale"], requires_grad=True),
                    bn_shift=Tensor(p[f"block{i}.bn_shift"], requires_grad=True),
                    bn_state=BatchNormState(
                        stats["running_mean"].copy(),
                        stats["running_var"].copy(),
                        stats["momentum"],
                        stats["eps"],
                    ),
                )
            )
        net = LdnNetwork(
            cfg,
            Tensor(p["input.weight"], requires_grad=True),
            Tensor(p["input.bias"], requires_grad=True),
            blocks,
            Tensor(p["output.weight"], requires_grad=True),
            Tensor(p["output.bias"], requires_grad=True),
        )
        posterior = DepthPosterior(self.posterior_logits.copy())
        prior = make_prior(cfg.max_depth, self.gamma)
        return net, posterior, prior


def _named_params(net):
    names = ["input.weight", "input.bias"]
    for i in range(len(net.blocks)):
        names += [f"block{i}.weight", f"block{i}.bias", f"block{i}.bn_scale", f"block{i}.bn_shift"]
    names += ["output.weight", "output.bias"]
    return dict(zip(names, net.parameters()))


def save_checkpoint(path, net, posterior, gamma):
    cfg = net.config
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": {
            "max_depth": cfg.max_depth,
            "width": cfg.width,
            "input_dim": cfg.input_dim,
            "n_classes": cfg.n_classes,
        },
        "params": {name: _encode_array(p.data) for name, p in _named_params(net).items()},
        "bn_stats": [
            {
                "running_mean": _encode_array(blk.bn_state.running_mean),
                "running_var": _encode_array(blk.bn_state.running_var),
                "momentum": blk.bn_state.momentum,
                "eps": blk.bn_state.eps,
            }
            for blk in net.blocks
        ],
        "posterior_logits": _encode_array(posterior.logits),
        "gamma": gamma,
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: format version {version!r} unsupported (expected {CHECKPOINT_VERSION})"
        )
    try:
        cfg = NetworkConfig(**doc["net_config"])
        params = {name: _decode_array(obj, name) for name, obj in doc["params"].items()}
        bn_stats = [
            {
                "running_mean": _decode_array(s["running_mean"], f"block{i}.running_mean"),
                "running_var": _decode_array(s["running_var"], f"block{i}.running_var"),
                "momentum": float(s["momentum"]),
                "eps": float(s["eps"]),
            }
            for i, s in enumerate(doc["bn_stats"])
        ]
        logits = _decode_array(doc["posterior_logits"], "posterior_logits")
        gamma = float(doc["gamma"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: missing or malformed field ({exc})") from exc
    return Checkpoint(version, cfg, params, bn_stats, logits, gamma)
