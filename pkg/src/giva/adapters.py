"""LoRA, VeRA, OSoRA and GiVA adapters: construction, merging, accounting.

Vector-based adapters share one parameterization,

    delta_w = diag(gamma) @ B @ diag(lam) @ A,

with frozen bases ``A`` (r x d) and ``B`` (m x r) and trainable vectors
``gamma`` (length m) and ``lam`` (length r). They differ only in how the
bases and vectors are initialized. LoRA trains ``A`` and ``B`` directly.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, RankError
from .gradprobe import STRATEGIES, giva_bases_from_gradient
from .linalg import as_matrix, svd_full, truncate_rank
from .nnmodel import Dense, LinearLayer, Model, SelfAttention

METHODS = ("giva", "vera", "osora", "lora")


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _as_frozen(x, name):
    # Already-frozen arrays are kept as-is so shared bases stay shared.
    if isinstance(x, np.ndarray) and x.dtype == np.float64 and x.ndim == 2 and not x.flags.writeable:
        return x
    return _frozen(as_matrix(x, name))


@dataclass(eq=False)
class VectorAdapterState:
    A: np.ndarray
    B: np.ndarray
    lam: np.ndarray
    gamma: np.ndarray
    method: str
    init: str | None = None

    def __post_init__(self):
        self.A = _as_frozen(self.A, "A")
        self.B = _as_frozen(self.B, "B")
        self.lam = np.array(self.lam, dtype=np.float64).reshape(-1)
        self.gamma = np.array(self.gamma, dtype=np.float64).reshape(-1)
        r, d = self.A.shape
        m = self.B.shape[0]
        if self.B.shape[1] != r or self.lam.shape != (r,) or self.gamma.shape != (m,):
            raise DimensionError(
                f"inconsistent adapter shapes A={self.A.shape} B={self.B.shape} "
                f"lam={self.lam.shape} gamma={self.gamma.shape}"
            )
        if r > min(m, d):
            raise RankError(f"rank {r} exceeds min(m, d) = {min(m, d)}")

    @property
    def shape(self):
        return self.B.shape[0], self.A.shape[1]

    @property
    def rank(self):
        return self.A.shape[0]

    def delta_w(self):
        return (self.gamma[:, None] * self.B * self.lam) @ self.A

    def trainable(self):
        return {"gamma": self.gamma, "lam": self.lam}

    def frozen(self):
        return {"A": self.A, "B": self.B}


@dataclass(eq=False)
class LoraState:
    A: np.ndarray
    B: np.ndarray
    alpha: float
    method: str = field(default="lora", init=False)

    def __post_init__(self):
        self.A = np.array(as_matrix(self.A, "A"))
        self.B = np.array(as_matrix(self.B, "B"))
        if self.B.shape[1] != self.A.shape[0]:
            raise DimensionError(f"LoRA factors do not compose: B {self.B.shape}, A {self.A.shape}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def shape(self):
        return self.B.shape[0], self.A.shape[1]

    @property
    def rank(self):
        return self.A.shape[0]

    @property
    def scaling(self):
        return self.alpha / self.rank

    def delta_w(self):
        return self.scaling * (self.B @ self.A)

    def trainable(self):
        return {"A": self.A, "B": self.B}

    def frozen(self):
        return {}


@dataclass
class AdapterConfig:
    method: str = "giva"
    rank: int = 8
    init: str = "v_r_u_r"
    seed: int = 0
    d_initial: float = 1.0
    alpha: float | None = None
    shared_bases: bool = True
    svd: str = "auto"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.rank < 1:
            raise RankError("rank must be >= 1")
        if self.method == "giva" and self.init not in STRATEGIES:
            raise ValueError(f"unknown GiVA init {self.init!r}")
        if not np.isfinite(self.d_initial):
            raise ValueError("d_initial must be finite")
        if self.alpha is None:
            self.alpha = 2.0 * self.rank
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


def _check_rank(shape, r):
    m, d = shape
    if not 1 <= r <= min(m, d):
        raise RankError(f"rank {r} outside [1, {min(m, d)}] for shape ({m}, {d})")


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class BasisPool:
    """Seeded registry of VeRA bases, one ``(A, B)`` pair per ``(m, d, r)``.

    Each pair is drawn from a generator seeded by ``(seed, m, d, r)`` so the
    values do not depend on the order in which layers request them.
    """

    def __init__(self, seed=0, shared=True):
        self.seed = seed
        self.shared = shared
        self._pairs = {}
        self._fresh = 0

    def _draw(self, m, d, r, index):
        rng = np.random.default_rng([self.seed, m, d, r, index])
        A = kaiming_uniform(rng, (r, d), fan_in=d)
        B = kaiming_uniform(rng, (m, r), fan_in=r)
        return _frozen(A), _frozen(B)

    def get(self, m, d, r):
        if not self.shared:
            self._fresh += 1
            return self._draw(m, d, r, self._fresh)
        key = (m, d, r)
        if key not in self._pairs:
            self._pairs[key] = self._draw(m, d, r, 0)
        return self._pairs[key]

    @property
    def materialized(self):
        return len(self._pairs) + self._fresh


def init_giva(layer, grad, cfg):
    """GiVA state from the first-step gradient ``grad`` of ``layer``.

    ``gamma = 0`` and ``lam = 1``, so the adapted layer computes exactly the
    pretrained function; the layer weight is left untouched.
    """
    grad = as_matrix(grad, "gradient")
    if grad.shape != layer.shape:
        raise DimensionError(f"gradient shape {grad.shape} != layer {layer.name!r} shape {layer.shape}")
    _check_rank(layer.shape, cfg.rank)
    A, B = giva_bases_from_gradient(grad, cfg.rank, cfg.init, seed=cfg.seed, svd=cfg.svd)
    m = layer.shape[0]
    return VectorAdapterState(A, B, np.ones(cfg.rank), np.zeros(m), "giva", cfg.init)


def init_vera(shape, cfg, pool=None):
    m, d = shape
    _check_rank(shape, cfg.rank)
    if pool is None:
        pool = BasisPool(cfg.seed, cfg.shared_bases)
    A, B = pool.get(m, d, cfg.rank)
    return VectorAdapterState(A, B, np.full(cfg.rank, float(cfg.d_initial)), np.zeros(m), "vera")


def init_osora(layer, cfg):
    """OSoRA state; replaces ``layer.weight`` with ``W_pt - U_r S_r V_r^T``."""
    r = cfg.rank
    _check_rank(layer.shape, r)
    f = svd_full(layer.weight)
    layer.weight = layer.weight - truncate_rank(f, r)
    m = layer.shape[0]
    return VectorAdapterState(f.V[:, :r].T, f.U[:, :r], f.S[:r].copy(), np.ones(m), "osora")


def init_lora(shape, cfg):
    m, d = shape
    _check_rank(shape, cfg.rank)
    rng = np.random.default_rng([cfg.seed, m, d, cfg.rank])
    A = kaiming_uniform(rng, (cfg.rank, d), fan_in=d)
    return LoraState(A, np.zeros((m, cfg.rank)), cfg.alpha)


def attach_adapters(model, cfg, gradients=None, layers=None, pool=None):
    """Create and attach one adapter per selected layer; returns ``{name: state}``.

    ``gradients`` maps layer names to first-step gradients (GiVA only).
    """
    if pool is None and cfg.method == "vera":
        pool = BasisPool(cfg.seed, cfg.shared_bases)
    states = {}
    for name, layer in model.layers():
        if layers is not None and name not in layers:
            continue
        if cfg.method == "giva":
            if gradients is None or name not in gradients:
                raise ValueError(f"GiVA needs a probe gradient for layer {name!r}")
            state = init_giva(layer, gradients[name], cfg)
        elif cfg.method == "vera":
            state = init_vera(layer.shape, cfg, pool)
        elif cfg.method == "osora":
            state = init_osora(layer, cfg)
        else:
            state = init_lora(layer.shape, cfg)
        layer.attach(state)
        states[name] = state
    return states


def delta_w(state):
    return state.delta_w()


def merge(layer, state=None):
    """New adapter-free layer whose weight is ``W_residual + delta_w``."""
    state = layer.adapter if state is None else state
    if state is None:
        return LinearLayer(layer.weight.copy(), None if layer.bias is None else layer.bias.copy(), name=layer.name)
    if tuple(state.shape) != layer.shape:
        raise DimensionError(f"adapter shape {tuple(state.shape)} != layer shape {layer.shape}")
    bias = None if layer.bias is None else layer.bias.copy()
    return LinearLayer(layer.weight + state.delta_w(), bias, name=layer.name)


def merge_model(model):
    """Copy of ``model`` with every adapter folded into its layer weight."""
    blocks = []
    for block in model.blocks:
        if isinstance(block, SelfAttention):
            blocks.append(SelfAttention(merge(block.q), merge(block.k), merge(block.v), merge(block.o),
                                        block.seq_len, block.activation))
        else:
            blocks.append(Dense(merge(block.layer), block.activation))
    return Model(blocks, model.loss)


def trainable_param_count(state):
    m, d = state.shape
    r = state.rank
    if state.method == "lora":
        return r * (m + d)
    return m + r
