import numpy as np
import pytest

from hwbp.engine import Batch, ModelGraph
from hwbp.layers import LayerSpec


def rel_err(a, b) -> float:
    a, b = np.ravel(np.asarray(a, dtype=float)), np.ravel(np.asarray(b, dtype=float))
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def scalar_chain(J=(2.0, 3.0)):
    """Linear d=1 chain h_i = h_{i-1} + J_i h_{i-1}, so K_i = 1, with a unit
    cotangent at h_L (dot loss against 1, batch of one)."""
    spec = LayerSpec("plain", 1, activation="identity")
    params = {}
    for i, j in enumerate(J, start=1):
        params[f"layer{i}.W"] = np.array([[j]])
        params[f"layer{i}.b"] = np.zeros(1)
    model = ModelGraph([spec] * len(J), params, {len(J): "dot"})
    batch = Batch(np.array([[1.0]]), None, {len(J): np.array([[1.0]])})
    return model, batch


ALL_SPECS = {
    "plain": LayerSpec("plain", 3, ext_dim=2, hidden=4),
    "relu": LayerSpec("relu", 3, ext_dim=2, hidden=4),
    "gamma": LayerSpec("gamma", 3, ext_dim=2, gamma=0.2),
    "gru": LayerSpec("gru", 3, ext_dim=2),
    "lstm": LayerSpec("lstm", 4, ext_dim=2),
}


@pytest.fixture(params=sorted(ALL_SPECS))
def any_spec(request):
    return ALL_SPECS[request.param]
