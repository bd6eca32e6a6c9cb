"""Multi-column CNN assembled from a decoded genome.

Every column sees the same input batch. Each column ends in
``flatten -> FC(fc_width) -> ReLU -> dropout``; the column features are
concatenated and a shared FC head maps them to class logits.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .genome import ArchitectureSpec, Genome, NetworkTemplate, decode
from .nn import (
    BatchNorm2D,
    Conv2D,
    Dropout,
    Flatten,
    Linear,
    MaxPool2D,
    ReLU,
    check_finite,
    load_arrays,
    save_arrays,
    softmax,
)


class MultiColumnModel:
    def __init__(self, spec: ArchitectureSpec, rng=None, dtype=np.float64, dropout_rate=0.5):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.columns = []
        for col in spec.columns:
            layers = []
            for entry in col.layers:
                if entry.kind == "conv":
                    layers.append(Conv2D(entry.in_channels, entry.out_channels, entry.kernel,
                                         entry.stride, entry.pad, rng=rng, dtype=dtype))
                elif entry.kind == "pool":
                    layers.append(MaxPool2D())
                elif entry.kind == "bn":
                    layers.append(BatchNorm2D(entry.channels, dtype=dtype))
                elif entry.kind == "relu":
                    layers.append(ReLU())
                else:
                    raise ConfigError(f"unknown layer kind {entry.kind!r}")
            layers += [
                Flatten(),
                Linear(col.fc_in, col.fc_width, rng=rng, dtype=dtype),
                ReLU(),
                Dropout(dropout_rate, rng=np.random.default_rng(rng.integers(2**63))),
            ]
            self.columns.append(layers)
        self.head = Linear(spec.concat_width, spec.num_classes, rng=rng, dtype=dtype)
        self._widths = [col.fc_width for col in spec.columns]
        self.train_mode = False

    def named_layers(self):
        for c, layers in enumerate(self.columns):
            for i, layer in enumerate(layers):
                yield f"col{c}.{i}", layer
        yield "head", self.head

    def parameters(self) -> dict:
        return {f"{prefix}.{k}": v for prefix, layer in self.named_layers() for k, v in layer.params.items()}

    def gradients(self) -> dict:
        return {f"{prefix}.{k}": v for prefix, layer in self.named_layers() for k, v in layer.grads.items()}

    def state(self) -> list:
        """Ordered ``(name, array)`` pairs: parameters plus batch-norm running statistics."""
        return [(f"{prefix}.{k}", v) for prefix, layer in self.named_layers() for k, v in layer.state_arrays()]

    def load_state(self, arrays) -> None:
        targets = [(layer, k) for _, layer in self.named_layers() for k, _ in layer.state_arrays()]
        if len(arrays) != len(targets):
            raise ShapeError(f"state has {len(arrays)} arrays, model expects {len(targets)}")
        for (layer, k), a in zip(targets, arrays):
            store = layer.params if k in layer.params else layer.buffers
            if store[k].shape != a.shape:
                raise ShapeError(f"{k}: stored shape {a.shape} vs model {store[k].shape}")
            if k in layer.params:
                np.copyto(store[k], a)
            else:
                store[k] = a.astype(self.dtype, copy=True)

    def forward(self, x: np.ndarray, train: bool | None = None) -> np.ndarray:
        train = self.train_mode if train is None else train
        side = self.spec.input_side
        if x.ndim != 4 or x.shape[1:] != (1, side, side):
            raise ShapeError(f"expected input (N, 1, {side}, {side}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        feats = []
        for c, layers in enumerate(self.columns):
            h = x
            for layer in layers:
                h = layer.forward(h, train=train)
            feats.append(check_finite(h, f"column {c} features"))
        return check_finite(self.head.forward(np.concatenate(feats, axis=1), train=train), "logits")

    def backward(self, grad_logits: np.ndarray) -> None:
        g = self.head.backward(grad_logits)
        start = 0
        for layers, width in zip(self.columns, self._widths):
            h = g[:, start:start + width]
            start += width
            for layer in reversed(layers):
                h = layer.backward(h)

    def predict_proba(self, x, batch_size=500) -> np.ndarray:
        out = [softmax(self.forward(x[i:i + batch_size], train=False)) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def build_model(spec: ArchitectureSpec, template: NetworkTemplate | None = None, rng=None,
                dtype=np.float64, dropout_rate=0.5) -> MultiColumnModel:
    """Create a model with He-normal conv/FC weights, zero biases and identity batch norm."""
    if template is not None and spec.num_classes != template.num_classes:
        raise ConfigError("spec and template disagree on the number of classes")
    return MultiColumnModel(spec, rng=rng, dtype=dtype, dropout_rate=dropout_rate)


def forward(model: MultiColumnModel, batch: np.ndarray, train: bool = False) -> np.ndarray:
    return model.forward(batch, train=train)


def predict(model: MultiColumnModel, images: np.ndarray, batch_size=500) -> np.ndarray:
    # argmax breaks ties toward the lowest class index
    return np.concatenate([
        model.forward(images[i:i + batch_size], train=False).argmax(axis=1)
        for i in range(0, len(images), batch_size)
    ])


def evaluate_accuracy(model: MultiColumnModel, images: np.ndarray, labels: np.ndarray, batch_size=500) -> float:
    if len(images) == 0:
        raise ShapeError("cannot evaluate accuracy on an empty split")
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images vs {len(labels)} labels")
    return float(np.mean(predict(model, images, batch_size) == np.asarray(labels)))


def save_model(path, model: MultiColumnModel, template: NetworkTemplate, extra: dict | None = None) -> None:
    names, arrays = zip(*model.state())
    header = {
        "genome": str(model.spec.genome),
        "template_hash": template.fingerprint(),
        "dtype": model.dtype.name,
        "names": list(names),
        **(extra or {}),
    }
    save_arrays(path, list(arrays), header)


def load_model(path, template: NetworkTemplate, dropout_rate=0.5):
    """Rebuild a model from a checkpoint; returns ``(model, header)``."""
    arrays, header = load_arrays(path)
    if header.get("template_hash") != template.fingerprint():
        raise ConfigError(
            f"checkpoint template {header.get('template_hash')} does not match {template.fingerprint()}"
        )
    spec = decode(Genome.parse(header["genome"]), template)
    model = MultiColumnModel(spec, dtype=header.get("dtype", "float64"), dropout_rate=dropout_rate)
    model.load_state(arrays)
    return model, header
