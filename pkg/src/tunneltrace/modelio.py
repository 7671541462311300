"""JSON serialization of node models and assembled tunnel models.

Matrices are stored row-major; floats keep full repr precision so a saved
model reproduces its input/output behavior bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .cascade import TunnelModel, build_tunnel_model
from .dataio import NodeChannelSpec, SensorLayout
from .errors import DataFormatError
from .sysid import NodeModel


def _node_to_dict(model: NodeModel) -> dict:
    spec = model.channel_spec
    return {
        "kind": model.kind,
        "node": model.node_index,
        "order": model.order,
        "a": model.a.ravel().tolist(),
        "b": model.b.ravel().tolist(),
        "c": model.c.ravel().tolist(),
        "d": model.d.ravel().tolist(),
        "input_channels": list(spec.input_channel_names) if spec else None,
        "output_channel": spec.output_channel_name if spec else None,
        "fire_node": spec.fire_node if spec else None,
        "sample_time": model.sample_time,
        "discretization": model.discretization,
        "stability_reflected": model.stability_reflected,
    }


def _node_from_dict(payload: dict) -> NodeModel:
    try:
        n = int(payload["order"])
        m = len(payload["b"]) // n
        spec = None
        if payload.get("input_channels"):
            spec = NodeChannelSpec(
                node_index=int(payload["node"]),
                kind=payload["kind"],
                fire_node=bool(payload["fire_node"]),
                input_channel_names=tuple(payload["input_channels"]),
                output_channel_name=payload["output_channel"],
            )
        return NodeModel(
            kind=payload["kind"],
            node_index=int(payload["node"]),
            order=n,
            a=np.array(payload["a"], dtype=float).reshape(n, n),
            b=np.array(payload["b"], dtype=float).reshape(n, m),
            c=np.array(payload["c"], dtype=float).reshape(1, n),
            d=np.array(payload["d"], dtype=float).reshape(1, m),
            sample_time=float(payload["sample_time"]),
            channel_spec=spec,
            discretization=payload.get("discretization", "zoh"),
            stability_reflected=bool(payload.get("stability_reflected", False)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"malformed node model record: {exc}") from None


def save_tunnel_model(model: TunnelModel, path: str | Path) -> None:
    payload = {
        "format": "tunneltrace-model-v1",
        "node_count": model.node_count,
        "fire_nodes": sorted(model.fire_nodes),
        "sensor_nodes": list(model.layout.sensor_nodes),
        "thermal": [_node_to_dict(nm) for nm in model.thermal_nodes],
        "smoke": [_node_to_dict(nm) for nm in model.smoke_nodes],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_tunnel_model(path: str | Path) -> TunnelModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from None
    if payload.get("format") != "tunneltrace-model-v1":
        raise DataFormatError(f"{path}: unknown model file format {payload.get('format')!r}")
    thermal = [_node_from_dict(rec) for rec in payload["thermal"]]
    smoke = [_node_from_dict(rec) for rec in payload["smoke"]]
    layout = SensorLayout(
        sensor_nodes=tuple(payload["sensor_nodes"]), node_count=int(payload["node_count"])
    )
    return build_tunnel_model(thermal, smoke, frozenset(payload["fire_nodes"]), layout)
