"""JSON checkpoints: ``{format_version, model_spec, layers: [...]}``.

Matrices are nested row-major lists of float64 values. Python's float repr
round-trips exactly, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

from .adapters import AdaLoraLayer, Dense, LoraLayer
from .errors import CheckpointError
from .model import Model

FORMAT_VERSION = 1


def _mat(node) -> list:
    return node.value.tolist()


def _vec(node) -> list:
    return node.value.reshape(-1).tolist()


def layer_to_dict(layer) -> dict:
    if layer.kind == "dense":
        return {
            "kind": "dense",
            "n1": layer.n1,
            "n2": layer.n2,
            "trainable": layer.trainable,
            "W": _mat(layer.W),
            "b": _vec(layer.b),
        }
    d = {
        "kind": layer.kind,
        "n1": layer.n1,
        "n2": layer.n2,
        "r": layer.r,
        "scale": layer.scale,
        "W0": _mat(layer.W0),
        "b0": _vec(layer.b0),
    }
    if layer.kind == "lora":
        d.update(A=_mat(layer.A), B=_mat(layer.B))
    else:
        d.update(P=_mat(layer.P), Lambda=_vec(layer.Lambda), Q=_mat(layer.Q))
    return d


def layer_from_dict(d: dict, index: int):
    try:
        kind = d["kind"]
        if kind == "dense":
            layer = Dense(d["W"], d["b"], trainable=d.get("trainable", True))
        elif kind == "lora":
            layer = LoraLayer(d["W0"], d["A"], d["B"], b0=d["b0"], scale=d["scale"])
        elif kind == "adalora":
            layer = AdaLoraLayer(d["W0"], d["P"], d["Lambda"], d["Q"], b0=d["b0"], scale=d["scale"])
        else:
            raise CheckpointError(f"layer {index}: unknown kind {kind!r}")
    except KeyError as exc:
        raise CheckpointError(f"layer {index}: missing field {exc}") from None
    except (ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"layer {index}: {exc}") from None
    if (layer.n1, layer.n2) != (d.get("n1", layer.n1), d.get("n2", layer.n2)):
        raise CheckpointError(
            f"layer {index}: declared shape ({d['n1']}, {d['n2']}) disagrees with stored weights ({layer.n1}, {layer.n2})"
        )
    return layer


def model_to_dict(model: Model, model_spec: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_spec": model_spec or {},
        "layers": [layer_to_dict(layer) for layer in model.layers],
    }


def model_from_dict(d: dict) -> Model:
    if d.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {d.get('format_version')!r}")
    layers = [layer_from_dict(ld, i) for i, ld in enumerate(d.get("layers", []))]
    if not layers:
        raise CheckpointError("checkpoint has no layers")
    return Model(layers)


def dumps(model: Model, model_spec: dict | None = None) -> str:
    return json.dumps(model_to_dict(model, model_spec), sort_keys=True) + "\n"


def save_checkpoint(path, model: Model, model_spec: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(model, model_spec))
    return path


def load_checkpoint(path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from None
    return model_from_dict(d), d.get("model_spec", {})


def check_widths(model: Model, widths) -> None:
    """Raise :class:`CheckpointError` naming the first layer that does not fit ``widths``."""
    widths = list(widths)
    if len(model.layers) != len(widths) - 1:
        raise CheckpointError(
            f"checkpoint has {len(model.layers)} layers, configuration expects {len(widths) - 1}"
        )
    for i, layer in enumerate(model.layers):
        want = (widths[i + 1], widths[i])
        if (layer.n1, layer.n2) != want:
            raise CheckpointError(
                f"layer {i} ({layer.kind}) has shape ({layer.n1}, {layer.n2}), configuration expects {want}"
            )
