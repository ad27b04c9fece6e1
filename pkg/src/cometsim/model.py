"""Feature extractor, classifier and projection head, plus the mean-teacher pair.

Parameters live in flat ``dict[str, ndarray]`` sets with prefixes ``g.``,
``h.`` and ``proj.``. Forward functions are written against a mapping of
either arrays or :class:`~cometsim.numerics.Tensor` leaves so the same code
serves plain inference and differentiated adaptation.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import ParameterSet, Tensor

CHECKPOINT_FORMAT = "cometsim-checkpoint/1"


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    num_known_classes: int
    feature_dim: int = 32
    projection_dim: int = 16
    g_hidden: tuple[int, ...] = (64,)
    proj_hidden: int = 32

    def __post_init__(self):
        dims = [self.input_dim, self.num_known_classes, self.feature_dim, self.projection_dim, self.proj_hidden, *self.g_hidden]
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all network dimensions must be >= 1: {self}")
        object.__setattr__(self, "g_hidden", tuple(int(w) for w in self.g_hidden))

    @property
    def g_widths(self) -> list[int]:
        return [self.input_dim, *self.g_hidden, self.feature_dim]


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(config: NetworkConfig, rng: np.random.Generator) -> ParameterSet:
    """Fresh g and h weights; biases start at zero."""
    params: ParameterSet = {}
    widths = config.g_widths
    for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        params[f"g.w{k}"] = _uniform(rng, n_in, (n_in, n_out))
        params[f"g.b{k}"] = np.zeros(n_out)
    params["h.w"] = _uniform(rng, config.feature_dim, (config.feature_dim, config.num_known_classes))
    params["h.b"] = np.zeros(config.num_known_classes)
    return params


def init_projection(config: NetworkConfig, rng: np.random.Generator) -> ParameterSet:
    f, hid, out = config.feature_dim, config.proj_hidden, config.projection_dim
    return {
        "proj.w1": _uniform(rng, f, (f, hid)),
        "proj.b1": np.zeros(hid),
        "proj.w2": _uniform(rng, hid, (hid, out)),
        "proj.b2": np.zeros(out),
    }


def _check_width(primitive: str, x: Tensor, width: int) -> None:
    if x.data.ndim != 2 or x.shape[1] != width:
        raise nx.ShapeError(primitive, x.shape, (-1, width))


def forward_features(params: Mapping, x) -> Tensor:
    """g(x): every layer is affine followed by ReLU."""
    h = nx.as_tensor(x)
    n_layers = sum(1 for k in params if k.startswith("g.w"))
    _check_width("forward_features", h, np.shape(nx.as_tensor(params["g.w1"]).data)[0])
    for k in range(1, n_layers + 1):
        h = nx.relu(nx.add(nx.matmul(h, params[f"g.w{k}"]), params[f"g.b{k}"]))
    return h


def forward_logits(params: Mapping, features) -> Tensor:
    f = nx.as_tensor(features)
    _check_width("forward_logits", f, np.shape(nx.as_tensor(params["h.w"]).data)[0])
    return nx.add(nx.matmul(f, params["h.w"]), params["h.b"])


def forward_probs(params: Mapping, features) -> Tensor:
    return nx.softmax(forward_logits(params, features))


def forward_projection(params: Mapping, features) -> Tensor:
    """Proj(r): one hidden ReLU layer then linear. Output is not normalized."""
    f = nx.as_tensor(features)
    _check_width("forward_projection", f, np.shape(nx.as_tensor(params["proj.w1"]).data)[0])
    hidden = nx.relu(nx.add(nx.matmul(f, params["proj.w1"]), params["proj.b1"]))
    return nx.add(nx.matmul(hidden, params["proj.w2"]), params["proj.b2"])


@dataclass
class ComposedModel:
    config: NetworkConfig
    params: ParameterSet

    @classmethod
    def initialize(cls, config: NetworkConfig, rng: np.random.Generator, with_projection: bool = True):
        params = init_backbone(config, rng)
        if with_projection:
            params.update(init_projection(config, rng))
        return cls(config, params)

    def copy(self) -> "ComposedModel":
        return ComposedModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def features(self, x: np.ndarray) -> np.ndarray:
        return forward_features(self.params, x).data

    def logits(self, x: np.ndarray) -> np.ndarray:
        return forward_logits(self.params, self.features(x)).data

    def probs(self, x: np.ndarray) -> np.ndarray:
        return forward_probs(self.params, self.features(x)).data

    def projection(self, features: np.ndarray) -> np.ndarray:
        return forward_projection(self.params, features).data


@dataclass
class StudentTeacherPair:
    student: ComposedModel
    teacher: ComposedModel
    alpha: float = 0.999
    ema_steps: int = field(default=0)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not nx.same_structure(self.student.params, self.teacher.params):
            raise ValueError("student and teacher parameter sets differ in structure")

    @classmethod
    def from_model(cls, model: ComposedModel, alpha: float) -> "StudentTeacherPair":
        return cls(model.copy(), model.copy(), alpha)


def ema_update(pair: StudentTeacherPair) -> StudentTeacherPair:
    """teacher <- alpha * teacher + (1 - alpha) * student, for every parameter."""
    s, t = pair.student.params, pair.teacher.params
    if not nx.same_structure(s, t):
        raise ValueError("ema_update: student and teacher parameter sets differ in structure")
    a = pair.alpha
    for name in t:
        t[name] = a * t[name] + (1.0 - a) * s[name]
    pair.ema_steps += 1
    return pair


def atomic_write(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: ComposedModel, extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write config and parameters (plus optional named arrays) to an ``.npz`` file."""
    header = {"format": CHECKPOINT_FORMAT, "config": asdict(model.config)}
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, value in model.params.items():
        arrays[f"param/{name}"] = value
    for name, value in (extra or {}).items():
        arrays[f"extra/{name}"] = np.asarray(value)
    atomic_write(Path(path), lambda fh: _write_npz(fh, arrays))


def _write_npz(fh, arrays: Mapping[str, np.ndarray]) -> None:
    # Fixed zip timestamps keep checkpoints byte-identical across runs.
    with zipfile.ZipFile(fh, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, value in arrays.items():
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as member:
                np.lib.format.write_array(member, np.asarray(value), allow_pickle=False)


def load_checkpoint(path) -> tuple[ComposedModel, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        cfg = header["config"]
        cfg["g_hidden"] = tuple(cfg["g_hidden"])
        params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
        extra = {k[len("extra/"):]: data[k].copy() for k in data.files if k.startswith("extra/")}
    return ComposedModel(NetworkConfig(**cfg), params), extra
