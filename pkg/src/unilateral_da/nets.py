"""Feature extractor, classifier and domain discriminator.

Parameters live in plain numpy arrays grouped by network; forward passes
register them on a :class:`~unilateral_da.grad.Graph` so one graph can carry
all three networks.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import grad as G

GROUPS = ("extractor", "classifier", "discriminator")


@dataclass(frozen=True)
class ArchitectureSpec:
    num_classes: int = 10
    input_length: int = 512
    conv_layers: int = 2
    conv_channels: int = 10
    dropout_rate: float = 0.5
    feature_dim: int = 256
    classifier_hidden: int = 256
    discriminator_hidden: tuple[int, int] = (256, 256)

    def __post_init__(self):
        object.__setattr__(self, "discriminator_hidden", tuple(self.discriminator_hidden))
        if self.input_length - 2 * self.conv_layers < 1:
            raise ValueError(f"input_length {self.input_length} too short for {self.conv_layers} valid convolutions")
        sizes = [self.num_classes, self.feature_dim, self.classifier_hidden, self.conv_channels,
                 *self.discriminator_hidden]
        if any(int(s) < 1 for s in sizes) or self.conv_layers < 1:
            raise ValueError("all layer sizes and the class count must be >= 1")
        if len(self.discriminator_hidden) != 2:
            raise ValueError("discriminator has exactly two hidden layers")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def flat_dim(self) -> int:
        return self.conv_channels * (self.input_length - 2 * self.conv_layers)

    def layer_shapes(self) -> dict[str, dict[str, tuple[int, ...]]]:
        ext: dict[str, tuple[int, ...]] = {}
        c_in = 1
        for i in range(self.conv_layers):
            ext[f"conv{i}.k"] = (self.conv_channels, c_in, 3)
            ext[f"conv{i}.b"] = (self.conv_channels,)
            c_in = self.conv_channels
        ext["fc.W"] = (self.flat_dim, self.feature_dim)
        ext["fc.b"] = (self.feature_dim,)
        clf = {
            "hidden.W": (self.feature_dim, self.classifier_hidden),
            "hidden.b": (self.classifier_hidden,),
            "out.W": (self.classifier_hidden, self.num_classes),
            "out.b": (self.num_classes,),
        }
        h1, h2 = self.discriminator_hidden
        disc = {
            "hidden1.W": (self.feature_dim, h1),
            "hidden1.b": (h1,),
            "hidden2.W": (h1, h2),
            "hidden2.b": (h2,),
            "out.W": (h2, 2),
            "out.b": (2,),
        }
        return {"extractor": ext, "classifier": clf, "discriminator": disc}

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for grp in self.layer_shapes().values() for s in grp.values())


@dataclass
class ModelParams:
    spec: ArchitectureSpec
    groups: dict[str, dict[str, np.ndarray]]
    frozen: set[str] = field(default_factory=set)

    def __getitem__(self, group: str) -> dict[str, np.ndarray]:
        return self.groups[group]

    def items(self):
        for group in GROUPS:
            for name, arr in self.groups.get(group, {}).items():
                yield (group, name), arr

    def count(self) -> int:
        return sum(a.size for _, a in self.items())

    def copy(self) -> "ModelParams":
        groups = {g: {n: a.copy() for n, a in d.items()} for g, d in self.groups.items()}
        return ModelParams(self.spec, groups, set(self.frozen))

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every parameter array."""
        a, b = dict(self.items()), dict(other.items())
        return a.keys() == b.keys() and all(
            a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], gain: float = 1.0) -> np.ndarray:
    if len(shape) == 3:  # conv kernel: C_out, C_in, width
        fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
    else:
        fan_in, fan_out = shape
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(spec: ArchitectureSpec, seed: int, gain: float = 1.0) -> ModelParams:
    """Glorot-uniform weights scaled by ``gain``, zero biases.

    ``gain=4`` is the usual sigmoid variant; with plain Glorot the signal through
    three stacked sigmoid layers is too weak for SGD to pick up.
    """
    if not isinstance(spec, ArchitectureSpec):
        raise TypeError("spec must be an ArchitectureSpec")
    rng = np.random.default_rng(seed)
    groups = {}
    for group, shapes in spec.layer_shapes().items():
        groups[group] = {
            name: (np.zeros(shape) if name.endswith(".b") else _glorot(rng, shape, gain))
            for name, shape in shapes.items()
        }
    return ModelParams(spec, groups)


def freeze(params: ModelParams) -> ModelParams:
    """Return a read-only copy; already-frozen input is returned unchanged."""
    if params.frozen >= set(params.groups):
        return params
    frozen = params.copy()
    for _, arr in frozen.items():
        arr.setflags(write=False)
    frozen.frozen = set(frozen.groups)
    return frozen


def _bind(graph: G.Graph, params: ModelParams, group: str, name: str) -> G.Tensor:
    trainable = group not in params.frozen
    return graph.param((id(params), group, name), params.groups[group][name], trainable=trainable)


def _as_tensor(graph: Optional[G.Graph], x) -> tuple[G.Graph, G.Tensor]:
    if isinstance(x, G.Tensor):
        return x.graph, x
    graph = graph or G.Graph()
    return graph, graph.constant(np.asarray(x, dtype=np.float64))


def feature_forward(params: ModelParams, x, train: bool = False,
                    rng: Optional[np.random.Generator] = None,
                    graph: Optional[G.Graph] = None) -> G.Tensor:
    """conv -> sigmoid -> dropout per conv layer, flatten, affine to K, sigmoid."""
    spec = params.spec
    graph, h = _as_tensor(graph, x)
    if h.data.ndim != 2 or h.shape[1] != spec.input_length:
        raise ValueError(f"expected input [B,{spec.input_length}], got {h.shape}")
    B = h.shape[0]
    h = G.reshape(h, (B, 1, spec.input_length))
    for i in range(spec.conv_layers):
        k = _bind(graph, params, "extractor", f"conv{i}.k")
        b = _bind(graph, params, "extractor", f"conv{i}.b")
        h = G.sigmoid(G.conv1d(h, k, b))
        h = G.dropout(h, spec.dropout_rate, train, rng)
    h = G.reshape(h, (B, spec.flat_dim))
    W = _bind(graph, params, "extractor", "fc.W")
    b = _bind(graph, params, "extractor", "fc.b")
    return G.sigmoid(G.affine(h, W, b))


def _check_features(params: ModelParams, f: G.Tensor):
    if f.data.ndim != 2 or f.shape[1] != params.spec.feature_dim:
        raise ValueError(f"expected features [B,{params.spec.feature_dim}], got {f.shape}")


def classify(params: ModelParams, features, graph: Optional[G.Graph] = None) -> G.Tensor:
    graph, f = _as_tensor(graph, features)
    _check_features(params, f)
    h = G.sigmoid(G.affine(f, _bind(graph, params, "classifier", "hidden.W"),
                           _bind(graph, params, "classifier", "hidden.b")))
    return G.affine(h, _bind(graph, params, "classifier", "out.W"),
                    _bind(graph, params, "classifier", "out.b"))


def discriminate(params: ModelParams, features, graph: Optional[G.Graph] = None) -> G.Tensor:
    """Domain logits; column 0 is source, column 1 is target."""
    graph, f = _as_tensor(graph, features)
    _check_features(params, f)
    h = f
    for layer in ("hidden1", "hidden2"):
        h = G.sigmoid(G.affine(h, _bind(graph, params, "discriminator", f"{layer}.W"),
                               _bind(graph, params, "discriminator", f"{layer}.b")))
    return G.affine(h, _bind(graph, params, "discriminator", "out.W"),
                    _bind(graph, params, "discriminator", "out.b"))


def param_gradients(graph: G.Graph, params: ModelParams, grads: dict[int, np.ndarray]):
    """Pick the gradients of ``params`` out of a backward() map, keyed by (group, name)."""
    out = {}
    for (pid, group, name), t in graph.params.items():
        if pid == id(params) and t.id in grads:
            out[(group, name)] = grads[t.id]
    return out


def predict(params: ModelParams, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class predictions."""
    preds = []
    for start in range(0, len(x), batch_size):
        logits = classify(params, feature_forward(params, x[start:start + batch_size]))
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def extract_features(params: ModelParams, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    chunks = [feature_forward(params, x[s:s + batch_size]).data for s in range(0, len(x), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, params.spec.feature_dim))


# --------------------------------------------------------------- checkpoints

def save_checkpoint(params: ModelParams, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 payload)."""
    path = Path(path)
    manifest_path, payload_path = path.with_suffix(".json"), path.with_suffix(".bin")
    layers, offset, chunks = [], 0, []
    for (group, name), arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        layers.append({"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset,
                       "nbytes": len(data)})
        offset += len(data)
        chunks.append(data)
    spec = asdict(params.spec)
    spec["discriminator_hidden"] = list(params.spec.discriminator_hidden)
    manifest = {"format": "unilateral-da-checkpoint/1", "spec": spec,
                "frozen": sorted(params.frozen), "payload": payload_path.name, "layers": layers}
    payload_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path, payload_path


def load_checkpoint(path) -> ModelParams:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    spec = ArchitectureSpec(**manifest["spec"])
    groups: dict[str, dict[str, np.ndarray]] = {}
    for layer in manifest["layers"]:
        group, name = layer["name"].split("/", 1)
        raw = payload[layer["offset"]:layer["offset"] + layer["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(layer["shape"])
        groups.setdefault(group, {})[name] = arr
    params = ModelParams(spec, groups)
    if manifest.get("frozen"):
        params = freeze(params)
    return params


def shares_backbone(a: ModelParams, b: ModelParams) -> bool:
    """True when extractor and classifier shapes agree, i.e. same backbone architecture."""
    for group in ("extractor", "classifier"):
        sa = {n: v.shape for n, v in a.groups[group].items()}
        sb = {n: v.shape for n, v in b.groups[group].items()}
        if sa != sb:
            return False
    return True


__all__ = [
    "ArchitectureSpec", "ModelParams", "init_params", "freeze",
    "feature_forward", "classify", "discriminate", "param_gradients", "predict",
    "extract_features", "save_checkpoint", "load_checkpoint", "shares_backbone",
]
