"""A small explicit-backprop neural engine.

Inputs are column-major batches: ``X`` has shape ``(d, n)`` with one example
per column. Every adaptable projection is a :class:`LinearLayer`; an adapter
attached to a layer adds its low-rank path to the layer output, so

    h = W_residual x + b + delta_w(adapter) x

without ever materializing ``delta_w``. All derivatives are written out by
hand and checked against central finite differences in the test-suite.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericalError, RankError
from .linalg import as_matrix

ACTIVATIONS = ("identity", "relu", "tanh", "softmax")
LOSSES = ("mse", "cross_entropy")


@dataclass(eq=False)
class LinearLayer:
    weight: np.ndarray
    bias: np.ndarray | None = None
    adapter: object | None = None
    name: str = ""

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.weight.shape[0]:
                raise DimensionError(f"bias length {self.bias.shape[0]} != rows {self.weight.shape[0]}")
        if self.adapter is not None:
            self.attach(self.adapter)

    @property
    def shape(self):
        return self.weight.shape

    def attach(self, state):
        m, d = self.shape
        if tuple(state.shape) != (m, d):
            raise DimensionError(f"adapter shape {tuple(state.shape)} does not match layer {self.name!r} ({m}, {d})")
        if not 1 <= state.rank <= min(m, d):
            raise RankError(f"adapter rank {state.rank} outside [1, {min(m, d)}]")
        self.adapter = state
        return self

    def detach(self):
        state, self.adapter = self.adapter, None
        return state

    def effective_weight(self):
        """``W_residual + delta_w`` (the merged weight W')."""
        if self.adapter is None:
            return self.weight.copy()
        return self.weight + self.adapter.delta_w()


@dataclass(eq=False)
class Dense:
    layer: LinearLayer
    activation: str = "identity"

    @property
    def in_dim(self):
        return self.layer.shape[1]

    @property
    def out_dim(self):
        return self.layer.shape[0]

    def linear_layers(self):
        return [("", self.layer)]


@dataclass(eq=False)
class SelfAttention:
    """Single-head self-attention over ``seq_len`` tokens of width ``e``.

    An input column of length ``seq_len * e`` holds the tokens back to back;
    the output has the same layout. q/k/v/o are ``e x e`` adaptable layers.
    """

    q: LinearLayer
    k: LinearLayer
    v: LinearLayer
    o: LinearLayer
    seq_len: int
    activation: str = "identity"

    def __post_init__(self):
        e = self.q.shape[0]
        for tag, layer in self.linear_layers():
            if layer.shape != (e, e):
                raise DimensionError(f"attention projection {tag} has shape {layer.shape}, expected ({e}, {e})")

    @property
    def width(self):
        return self.q.shape[0]

    @property
    def in_dim(self):
        return self.seq_len * self.width

    out_dim = in_dim

    def linear_layers(self):
        return [("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o)]


@dataclass(eq=False)
class Model:
    blocks: list
    loss: str = "mse"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        for i, block in enumerate(self.blocks):
            if block.activation not in ACTIVATIONS:
                raise ValueError(f"block {i}: unknown activation {block.activation!r}")
            if block.activation == "softmax" and (i != len(self.blocks) - 1 or self.loss != "cross_entropy"):
                raise ValueError("softmax is only supported on the output block with cross-entropy loss")
            if i and block.in_dim != self.blocks[i - 1].out_dim:
                raise DimensionError(
                    f"block {i} expects input dim {block.in_dim}, block {i - 1} produces {self.blocks[i - 1].out_dim}"
                )
            for tag, layer in block.linear_layers():
                if not layer.name:
                    layer.name = f"{i}.{tag}" if tag else str(i)

    @property
    def in_dim(self):
        return self.blocks[0].in_dim

    @property
    def out_dim(self):
        return self.blocks[-1].out_dim

    def layers(self):
        """All linear layers in forward order as ``(name, layer)`` pairs."""
        return [(layer.name, layer) for block in self.blocks for _, layer in block.linear_layers()]

    def layer(self, name):
        for n, layer in self.layers():
            if n == name:
                return layer
        raise KeyError(name)

    def adapted_layers(self):
        return [(n, layer) for n, layer in self.layers() if layer.adapter is not None]


def mlp(sizes, activation="relu", loss="mse", output_activation=None, bias=True, seed=0, scale=None):
    """Randomly initialized MLP with layer widths ``sizes`` (input first)."""
    rng = np.random.default_rng(seed)
    blocks = []
    for i, (d, m) in enumerate(zip(sizes[:-1], sizes[1:])):
        s = scale if scale is not None else 1.0 / np.sqrt(d)
        W = rng.standard_normal((m, d)) * s
        b = rng.standard_normal(m) * 0.1 if bias else None
        last = i == len(sizes) - 2
        act = activation if not last else (output_activation or ("softmax" if loss == "cross_entropy" else "identity"))
        blocks.append(Dense(LinearLayer(W, b), act))
    return Model(blocks, loss)


def linear_model(weight, bias=None, loss="mse"):
    return Model([Dense(LinearLayer(np.array(weight, dtype=np.float64), bias))], loss)


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs, "inputs")
        if self.inputs.shape[1] < 1:
            raise DimensionError("a batch needs at least one example")
        t = np.asarray(self.targets)
        if t.ndim == 1 and np.issubdtype(t.dtype, np.integer):
            self.targets = t.astype(np.intp)
        else:
            self.targets = as_matrix(t, "targets")
        if self.targets.shape[-1] != self.inputs.shape[1]:
            raise DimensionError(
                f"{self.inputs.shape[1]} inputs but {self.targets.shape[-1]} targets"
            )

    @property
    def size(self):
        return self.inputs.shape[1]


@dataclass
class LayerGradients:
    """Per-layer gradients keyed by layer name.

    ``weight[name]`` is the gradient w.r.t. the layer's effective (merged)
    weight ``W'``; with no adapter, or at a function-preserving init, this is
    the full fine-tuning gradient of the pretrained weight.
    """

    weight: dict = field(default_factory=dict)
    bias: dict = field(default_factory=dict)
    adapter: dict = field(default_factory=dict)

    def trainable(self):
        """Flat ``{"<layer>.<param>": grad}`` for every adapter parameter."""
        return {f"{name}.{p}": g for name, grads in self.adapter.items() for p, g in grads.items()}


# --- single linear layer -------------------------------------------------


@dataclass
class _LinearCache:
    inputs: np.ndarray
    state: object = None
    z: np.ndarray | None = None
    v: np.ndarray | None = None


def _linear_forward(layer, X):
    if X.shape[0] != layer.shape[1]:
        raise DimensionError(f"layer {layer.name!r} expects input dim {layer.shape[1]}, got {X.shape[0]}")
    H = layer.weight @ X
    if layer.bias is not None:
        H += layer.bias[:, None]
    cache = _LinearCache(X, layer.adapter)
    state = layer.adapter
    if state is not None:
        z = state.A @ X
        if state.method == "lora":
            H += state.scaling * (state.B @ z)
            cache.z = z
        else:
            v = state.B @ (state.lam[:, None] * z)
            H += state.gamma[:, None] * v
            cache.z, cache.v = z, v
    return H, cache


def _vector_backward(state, dH, X, z, v):
    grad_gamma = np.einsum("ij,ij->i", dH, v)
    du = state.B.T @ (state.gamma[:, None] * dH)
    grad_lam = np.einsum("ij,ij->i", du, z)
    dX = state.A.T @ (state.lam[:, None] * du)
    return {"gamma": grad_gamma, "lam": grad_lam}, dX


def _lora_backward(state, dH, X, z):
    grad_B = state.scaling * (dH @ z.T)
    dz = state.scaling * (state.B.T @ dH)
    grad_A = dz @ X.T
    return {"A": grad_A, "B": grad_B}, state.A.T @ dz


def _linear_backward(layer, cache, dH, grads):
    if cache.state is not layer.adapter:
        raise ContractError(f"stale cache for layer {layer.name!r}: adapter changed since forward")
    X = cache.inputs
    grads.weight[layer.name] = dH @ X.T
    if layer.bias is not None:
        grads.bias[layer.name] = dH.sum(axis=1)
    dX = layer.weight.T @ dH
    state = layer.adapter
    if state is not None:
        if state.method == "lora":
            g, dXa = _lora_backward(state, dH, X, cache.z)
        else:
            g, dXa = _vector_backward(state, dH, X, cache.z, cache.v)
        grads.adapter[layer.name] = g
        dX += dXa
    return dX


def adapter_backward(layer, state, upstream, cached_input):
    """Gradients of the adapter's trainable parameters on ``layer``.

    ``upstream`` is dL/dh (m x n) and ``cached_input`` the layer input from the
    matching forward pass. Returns ``{"gamma", "lam"}`` for vector adapters
    (``grad_gamma_i = [G' A^T Lambda B^T]_ii``, ``grad_lam_j = [B^T Gamma G' A^T]_jj``
    with ``G' = upstream @ cached_input.T``) or ``{"A", "B"}`` for LoRA.
    """
    if cached_input is None:
        raise ContractError(f"no cached input for layer {layer.name!r}; run forward first")
    if state is None or layer.adapter is not state:
        raise ContractError(f"adapter state is not the one attached to layer {layer.name!r}")
    X = np.asarray(cached_input, dtype=np.float64)
    dH = np.asarray(upstream, dtype=np.float64)
    if X.shape != (layer.shape[1], dH.shape[1]) or dH.shape[0] != layer.shape[0]:
        raise ContractError(f"cache shape {X.shape} does not match upstream {dH.shape} for layer {layer.name!r}")
    z = state.A @ X
    if state.method == "lora":
        return _lora_backward(state, dH, X, z)[0]
    v = state.B @ (state.lam[:, None] * z)
    return _vector_backward(state, dH, X, z, v)[0]


# --- blocks ---------------------------------------------------------------


def _activate(kind, H):
    if kind == "identity":
        return H
    if kind == "relu":
        return np.maximum(H, 0.0)
    if kind == "tanh":
        return np.tanh(H)
    if kind == "softmax":
        shifted = H - H.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=0, keepdims=True)
    raise ValueError(kind)


def _activate_backward(kind, H, Y, dY):
    if kind == "identity":
        return dY
    if kind == "relu":
        return dY * (H > 0)
    if kind == "tanh":
        return dY * (1.0 - Y * Y)
    raise ValueError(f"no standalone backward for activation {kind!r}")


def _tokens(X, T, e):
    """(T*e, n) example columns -> (e, n*T) token columns, example-major."""
    n = X.shape[1]
    return X.reshape(T, e, n).transpose(1, 2, 0).reshape(e, n * T)


def _untokens(Z, T, e):
    n = Z.shape[1] // T
    return Z.reshape(e, n, T).transpose(2, 0, 1).reshape(T * e, n)


def _attention_forward(block, X):
    T, e = block.seq_len, block.width
    if X.shape[0] != T * e:
        raise DimensionError(f"attention expects input dim {T * e}, got {X.shape[0]}")
    n = X.shape[1]
    Z = _tokens(X, T, e)
    Q, cq = _linear_forward(block.q, Z)
    K, ck = _linear_forward(block.k, Z)
    V, cv = _linear_forward(block.v, Z)
    Q3, K3, V3 = (M.reshape(e, n, T) for M in (Q, K, V))
    S = np.einsum("ebi,ebj->bij", Q3, K3) / np.sqrt(e)
    S -= S.max(axis=2, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=2, keepdims=True)
    O3 = np.einsum("bij,ebj->ebi", P, V3)
    out, co = _linear_forward(block.o, O3.reshape(e, n * T))
    return _untokens(out, T, e), {"q": cq, "k": ck, "v": cv, "o": co, "P": P, "Q3": Q3, "K3": K3, "V3": V3}


def _attention_backward(block, cache, dOut, grads):
    T, e = block.seq_len, block.width
    dO = _linear_backward(block.o, cache["o"], _tokens(dOut, T, e), grads)
    n = dO.shape[1] // T
    dO3 = dO.reshape(e, n, T)
    P, Q3, K3, V3 = cache["P"], cache["Q3"], cache["K3"], cache["V3"]
    dP = np.einsum("ebi,ebj->bij", dO3, V3)
    dV3 = np.einsum("bij,ebi->ebj", P, dO3)
    dS = P * (dP - np.sum(dP * P, axis=2, keepdims=True)) / np.sqrt(e)
    dQ3 = np.einsum("bij,ebj->ebi", dS, K3)
    dK3 = np.einsum("bij,ebi->ebj", dS, Q3)
    dZ = _linear_backward(block.q, cache["q"], dQ3.reshape(e, n * T), grads)
    dZ += _linear_backward(block.k, cache["k"], dK3.reshape(e, n * T), grads)
    dZ += _linear_backward(block.v, cache["v"], dV3.reshape(e, n * T), grads)
    return _untokens(dZ, T, e)


# --- model ----------------------------------------------------------------


@dataclass
class ForwardCache:
    model: Model
    blocks: list


def forward(model, batch):
    """Run the model; returns ``(outputs, cache)`` (outputs are probabilities for softmax)."""
    X = batch.inputs if isinstance(batch, Batch) else as_matrix(batch, "inputs")
    if X.shape[0] != model.in_dim:
        raise DimensionError(f"layer {model.layers()[0][0]!r}: model expects input dim {model.in_dim}, got {X.shape[0]}")
    caches = []
    for i, block in enumerate(model.blocks):
        if isinstance(block, SelfAttention):
            H, c = _attention_forward(block, X)
        else:
            H, c = _linear_forward(block.layer, X)
        Y = _activate(block.activation, H)
        if not np.all(np.isfinite(Y)):
            raise NumericalError(f"non-finite activations produced by block {i} ({block.linear_layers()[0][1].name!r})")
        caches.append((c, H, Y))
        X = Y
    return X, ForwardCache(model, caches)


def loss_from_outputs(model, outputs, batch):
    """Mean-over-batch loss and dL/d(pre-activation of the output block)."""
    n = batch.size
    if model.loss == "mse":
        if batch.targets.shape != outputs.shape:
            raise DimensionError(f"targets {batch.targets.shape} vs outputs {outputs.shape}")
        R = outputs - batch.targets
        loss = 0.5 * float(np.sum(R * R)) / n
        return loss, R / n, False
    labels = batch.targets
    if labels.ndim != 1:
        raise DimensionError("cross-entropy needs an integer label vector")
    if model.blocks[-1].activation == "softmax":
        probs = outputs
        fused = True
    else:
        probs = _activate("softmax", outputs)
        fused = False
    cols = np.arange(n)
    loss = -float(np.mean(np.log(np.maximum(probs[labels, cols], np.finfo(float).tiny))))
    dlogits = probs.copy()
    dlogits[labels, cols] -= 1.0
    dlogits /= n
    return loss, dlogits, fused


def backward(model, cache, batch, outputs=None):
    """Loss and :class:`LayerGradients` for a completed forward pass."""
    if cache.model is not model or len(cache.blocks) != len(model.blocks):
        raise ContractError("forward cache belongs to a different model")
    if outputs is None:
        outputs = cache.blocks[-1][2]
    loss, dY, fused = loss_from_outputs(model, outputs, batch)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at output layer {model.layers()[-1][0]!r}")
    grads = LayerGradients()
    for i in range(len(model.blocks) - 1, -1, -1):
        block = model.blocks[i]
        c, H, Y = cache.blocks[i]
        if i == len(model.blocks) - 1 and (fused or block.activation == "identity"):
            dH = dY
        else:
            dH = _activate_backward(block.activation, H, Y, dY)
        if isinstance(block, SelfAttention):
            dY = _attention_backward(block, c, dH, grads)
        else:
            dY = _linear_backward(block.layer, c, dH, grads)
    return loss, grads


def loss_and_grads(model, batch):
    outputs, cache = forward(model, batch)
    return backward(model, cache, batch, outputs)


def loss_and_full_grad(model, batch):
    """Mean batch loss and per-layer ``dL/dW``.

    Must be called on the pretrained model (no adapters, or adapters at a
    function-preserving init) for ``grads.weight`` to be the first-step full
    fine-tuning gradient.
    """
    return loss_and_grads(model, batch)


def loss_value(model, batch):
    outputs, _ = forward(model, batch)
    return loss_from_outputs(model, outputs, batch)[0]


def trainable_parameters(model):
    """``{"<layer>.<param>": array}`` views into every attached adapter."""
    params = {}
    for name, layer in model.adapted_layers():
        for p, arr in layer.adapter.trainable().items():
            params[f"{name}.{p}"] = arr
    return params


def frozen_tensors(model):
    """Every tensor training must not modify: weights, biases, frozen bases."""
    out = {}
    for name, layer in model.layers():
        out[f"{name}.weight"] = layer.weight
        if layer.bias is not None:
            out[f"{name}.bias"] = layer.bias
        if layer.adapter is not None:
            for p, arr in layer.adapter.frozen().items():
                out[f"{name}.{p}"] = arr
    return out
