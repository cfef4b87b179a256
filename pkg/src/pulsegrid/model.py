"""The HR network: 2D conv feature extractor, two FC layers, optional 1D filter stack."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .grid import GRID, HR_MAX, HR_MIN, N_CLASSES
from .layers import (BatchNorm, Conv1d, Conv2d, Dropout, Flatten, Layer, Linear,
                     ReLU, ShapeError, Unflatten)

INPUT_SHAPE = (1, 18, 64)
CONV_CHANNELS = 16
FC_HIDDEN = 60
DROPOUT_RATE = 0.5
CONV_KERNELS = [(5, 11)] * 4 + [(2, 11)]
FILTER_KERNEL = 3
FILTER_PAD = 3 * (FILTER_KERNEL - 1)

CHECKPOINT_FORMAT = "pulsegrid-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    task: str = "classification"
    with_filter: bool = False
    conv_channels: int = CONV_CHANNELS
    fc_hidden: int = FC_HIDDEN

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.with_filter and self.task != "classification":
            raise ValueError("the filtering stack only applies to the classification task")

    @property
    def fc_out(self) -> int:
        if self.task == "regression":
            return 1
        return N_CLASSES + FILTER_PAD if self.with_filter else N_CLASSES

    @property
    def n_outputs(self) -> int:
        return 1 if self.task == "regression" else N_CLASSES

    @classmethod
    def for_loss(cls, loss: str, with_filter: bool = False) -> "ModelSpec":
        task = "regression" if loss.lower() == "se" else "classification"
        return cls(task=task, with_filter=with_filter)


class Model:
    """An ordered list of named layers run front to back."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.seed = seed
        init_rng = np.random.default_rng([seed, 0])
        self._dropout_seed = seed
        self.rng = np.random.default_rng([seed, 1])
        self.layers: list[tuple[str, Layer]] = []
        self.trace: list[tuple[str, tuple[int, ...]]] = []

        c = spec.conv_channels
        cin = INPUT_SHAPE[0]
        for i, k in enumerate(CONV_KERNELS, start=1):
            self._add(f"conv{i}", Conv2d(cin, c, k, rng=init_rng, input_grad=i > 1))
            self._add(f"conv{i}_relu", ReLU())
            self._add(f"conv{i}_bn", BatchNorm(c))
            cin = c
        self._add("flatten", Flatten())
        h, w = INPUT_SHAPE[1:]
        for kh, kw in CONV_KERNELS:
            h, w = h - kh + 1, w - kw + 1
        self.flat_features = c * h * w

        self._add("fc1", Linear(self.flat_features, spec.fc_hidden, rng=init_rng))
        self._add("fc1_relu", ReLU())
        self._add("fc1_bn", BatchNorm(spec.fc_hidden))
        self._add("fc1_drop", Dropout(DROPOUT_RATE, rng=self.rng))
        self._add("fc2", Linear(spec.fc_hidden, spec.fc_out, rng=init_rng))
        if spec.with_filter:
            self._add("fc2_relu", ReLU())
            self._add("fc2_bn", BatchNorm(spec.fc_out))
            self._add("fc2_drop", Dropout(DROPOUT_RATE, rng=self.rng))
            self._add("unflatten", Unflatten())
            chans = [1, c, c, 1]
            for i in range(3):
                name = f"fconv{i + 1}"
                self._add(name, Conv1d(chans[i], chans[i + 1], FILTER_KERNEL, rng=init_rng))
                self._add(f"{name}_relu", ReLU())
                self._add(f"{name}_bn", BatchNorm(chans[i + 1]))
            self._add("flatten_out", Flatten())
        else:
            # no ReLU on the head: logits and bpm values must be free to go negative
            self._add("fc2_bn", BatchNorm(spec.fc_out))
            if spec.task == "regression":
                # start the bpm output mid-range; Adam moves beta by ~lr per
                # step and would need tens of thousands of steps to get there
                self["fc2_bn"].params["beta"][...] = (HR_MIN + HR_MAX) / 2
        self.astype(dtype)
        self.train()

    def _add(self, name, layer):
        self.layers.append((name, layer))

    def __getitem__(self, name) -> Layer:
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    @property
    def dtype(self):
        return self["conv1"].params["weight"].dtype

    def astype(self, dtype) -> "Model":
        for _, layer in self.layers:
            layer.astype(dtype)
        return self

    def train(self, mode: bool = True) -> "Model":
        for _, layer in self.layers:
            layer.train(mode)
        return self

    def eval(self) -> "Model":
        return self.train(False)

    @property
    def training(self) -> bool:
        return self.layers[0][1].training

    def reseed_dropout(self, seed) -> None:
        """Replace the dropout stream (used to freeze masks during gradient checks)."""
        self.rng = np.random.default_rng(seed)
        for _, layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = self.rng

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.buffers.items()}

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for _, layer in self.layers)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, layer in self.layers:
            for store in (layer.params, layer.buffers):
                for k in store:
                    key = f"{n}.{k}"
                    if key not in state:
                        raise KeyError(f"missing entry {key}")
                    if tuple(state[key].shape) != store[k].shape:
                        raise ShapeError(f"{key}: expected {store[k].shape}, got {state[key].shape}")
                    store[k][...] = state[key]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or tuple(x.shape[1:]) != INPUT_SHAPE:
            raise ShapeError(
                f"expected input (B, 1, 18, 64) feeding 14x54 -> 10x44 -> 6x34 -> 2x24 -> 1x14, "
                f"got {tuple(x.shape)}")
        x = x.astype(self.dtype, copy=False)
        self.trace = [("input", tuple(x.shape))]
        for name, layer in self.layers:
            x = layer.forward(x)
            self.trace.append((name, tuple(x.shape)))
        return x

    __call__ = forward

    def backward(self, dout: np.ndarray) -> np.ndarray | None:
        for _, layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return dout

    def shape_chain(self) -> list[tuple[int, ...]]:
        """Per-sample output shapes of every conv / FC layer of the last forward pass."""
        keep = [n for n, layer in self.layers if isinstance(layer, (Conv2d, Conv1d, Linear))]
        return [shape[1:] for name, shape in self.trace if name in keep]

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Class labels (classification) or bpm values (regression), in eval mode."""
        was_training = self.training
        self.eval()
        try:
            outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        finally:
            self.train(was_training)
        return decode_outputs(np.concatenate(outs), self.spec)

    def predict_bpm(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        pred = self.predict(x, batch_size)
        if self.spec.task == "classification":
            return GRID.hr_of(pred)
        return pred.astype(np.float64)


def decode_outputs(outputs: np.ndarray, spec: ModelSpec) -> np.ndarray:
    if spec.task == "classification":
        # np.argmax returns the first maximum, so ties go to the lowest label
        return np.argmax(outputs, axis=1)
    return outputs[:, 0].astype(np.float64)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> Model:
    return Model(spec, seed=seed, dtype=dtype)


def _array_entry(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in a.reshape(-1)]}


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    """Write a JSON checkpoint; keys are sorted so output is byte-stable."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "seed": model.seed,
        "dtype": np.dtype(model.dtype).name,
        "params": {k: _array_entry(v) for k, v in model.parameters().items()},
        "buffers": {k: _array_entry(v) for k, v in model.buffers().items()},
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n",
                          encoding="utf-8")


def load_checkpoint(path) -> tuple[Model, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    dtype = np.dtype(doc["dtype"])
    model = Model(ModelSpec(**doc["spec"]), seed=doc["seed"], dtype=dtype)
    state = {}
    for section in ("params", "buffers"):
        for k, e in doc[section].items():
            state[k] = np.asarray(e["values"], dtype=dtype).reshape(e["shape"])
    model.load_state_dict(state)
    return model, doc["meta"]
