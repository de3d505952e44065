"""Featurizer, linear classifier and contrastive projector.

Parameters live in a flat ``{name: ndarray}`` mapping so they can be fed to
the tape as named leaves.  Layer ``k`` of the featurizer is stored as
``phi.k.W`` / ``phi.k.b``; the classifier as ``w.W`` / ``w.b``; the projector
as ``proj.k.W`` / ``proj.k.b``.  Weights are ``(fan_in, fan_out)``.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .rng import stream

__all__ = [
    "ModelSpec",
    "ModelParams",
    "init_params",
    "featurize",
    "classify",
    "project",
    "save_checkpoint",
    "load_checkpoint",
    "synthetic_spec",
    "cmnist_spec",
]


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple = ()
    feature_dim: int = 32
    projector_dims: tuple = (32, 16)
    num_classes: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        object.__setattr__(self, "projector_dims", tuple(self.projector_dims))
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim,
                *self.projector_dims, self.num_classes)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all model dimensions must be >= 1, got {dims}")
        if len(self.projector_dims) not in (0, 2):
            raise ValueError("projector_dims must be empty or (hidden, out)")

    @property
    def featurizer_chain(self):
        return (self.input_dim, *self.hidden_dims, self.feature_dim)

    @property
    def binary(self):
        return self.num_classes == 1

    def layer_shapes(self):
        """Ordered ``(name, shape)`` pairs for every parameter."""
        shapes = []
        chain = self.featurizer_chain
        for k, (a, b) in enumerate(zip(chain[:-1], chain[1:])):
            shapes += [(f"phi.{k}.W", (a, b)), (f"phi.{k}.b", (b,))]
        shapes += [("w.W", (self.feature_dim, self.num_classes)),
                   ("w.b", (self.num_classes,))]
        if self.projector_dims:
            pchain = (self.feature_dim, *self.projector_dims)
            for k, (a, b) in enumerate(zip(pchain[:-1], pchain[1:])):
                shapes += [(f"proj.{k}.W", (a, b)), (f"proj.{k}.b", (b,))]
        return shapes

    def num_params(self):
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())


@dataclass
class ModelParams:
    spec: ModelSpec
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in self.spec.layer_shapes():
            if name not in self.values:
                raise ValueError(f"missing parameter {name}")
            if tuple(self.values[name].shape) != tuple(shape):
                raise ValueError(
                    f"{name}: expected shape {shape}, got {self.values[name].shape}")

    def __getitem__(self, name):
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def group(self, prefix):
        return {k: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def copy(self):
        return ModelParams(self.spec, {k: v.copy() for k, v in self.values.items()})

    def replace(self, values):
        return ModelParams(self.spec, dict(values))

    def featurizer_layers(self):
        n = len(self.spec.featurizer_chain) - 1
        return [(self.values[f"phi.{k}.W"], self.values[f"phi.{k}.b"]) for k in range(n)]


def init_params(spec, seed):
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero biases."""
    rng = stream(seed, "init")
    values = {}
    for name, shape in spec.layer_shapes():
        if name.endswith(".b"):
            values[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            values[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(spec, values)


def _get(params, name):
    return params[name] if not isinstance(params, ModelParams) else params.values[name]


def _linear(x, W, b):
    return ag.add(ag.matmul(x, W), b)


def _check_width(op, x, width):
    shape = ag.as_array(x).shape
    if len(shape) != 2 or shape[1] != width:
        raise ag.AutogradError(f"{op}: expected input of width {width}, got {shape}")


def featurize(params, x, spec=None):
    """Linear + ReLU for every featurizer layer, including the last.

    ``params`` is a ModelParams or a mapping of (possibly tape-bound) tensors.
    """
    spec = spec or params.spec
    _check_width("featurize", x, spec.input_dim)
    h = x
    for k in range(len(spec.featurizer_chain) - 1):
        h = ag.relu(_linear(h, _get(params, f"phi.{k}.W"), _get(params, f"phi.{k}.b")))
    return h


def classify(params, features, spec=None):
    spec = spec or params.spec
    _check_width("classify", features, spec.feature_dim)
    return _linear(features, _get(params, "w.W"), _get(params, "w.b"))


def project(params, features, spec=None):
    spec = spec or params.spec
    if not spec.projector_dims:
        raise ValueError("model has no projector")
    _check_width("project", features, spec.feature_dim)
    h = ag.relu(_linear(features, _get(params, "proj.0.W"), _get(params, "proj.0.b")))
    return _linear(h, _get(params, "proj.1.W"), _get(params, "proj.1.b"))


def synthetic_spec(input_dim=16, feature_dim=32, projector_dims=(32, 16)):
    """Two-layer featurizer used by the Gaussian environment experiments."""
    return ModelSpec(input_dim=input_dim, hidden_dims=(feature_dim,),
                     feature_dim=feature_dim, projector_dims=projector_dims)


def cmnist_spec(hidden=390, projector_dims=(128, 64)):
    """392 -> 390 -> 390 -> 1; the first two layers form the featurizer."""
    return ModelSpec(input_dim=2 * 14 * 14, hidden_dims=(hidden,),
                     feature_dim=hidden, projector_dims=projector_dims)


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + one little-endian float64 file per parameter


def save_checkpoint(path, params, seed, step):
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, _ in params.spec.layer_shapes():
        arr = np.ascontiguousarray(params.values[name], dtype="<f8")
        fname = f"{name}.f64"
        raw = arr.tobytes()
        with open(os.path.join(path, fname), "wb") as f:
            f.write(raw)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape),
                        "sha256": hashlib.sha256(raw).hexdigest()})
    manifest = {"spec": asdict(params.spec), "seed": int(seed), "step": int(step),
                "params": entries}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path):
    """Returns ``(params, seed, step)``."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    spec = ModelSpec(**manifest["spec"])
    values = {}
    for entry in manifest["params"]:
        with open(os.path.join(path, entry["file"]), "rb") as f:
            raw = f.read()
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {entry['name']}")
        values[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(
            entry["shape"]).astype(np.float64)
    return ModelParams(spec, values), manifest["seed"], manifest["step"]
