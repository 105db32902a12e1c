"""First-step full fine-tuning gradient probe and GiVA basis construction."""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegeneracyError, NumericalError, RankError
from .linalg import as_matrix, frobenius_norm, qr_orthonormal, svd_full, svd_lowrank
from .nnmodel import loss_and_full_grad

STRATEGIES = ("v_r_u_r", "v_r_u_2r", "v_r_q")


def giva_bases_from_gradient(G, r, strategy="v_r_u_r", seed=0, svd="auto", lowrank_factor=4,
                             oversample=8, power_iters=4, factors=None):
    """Frozen bases ``(A, B)`` for a gradient ``G`` (m x d).

    ``A`` is the transpose of the top-``r`` right singular vectors of ``G``;
    ``B`` (m x r, orthonormal columns) is chosen by ``strategy``:

    * ``v_r_u_r``  -- left singular vectors 1..r
    * ``v_r_u_2r`` -- left singular vectors r+1..2r
    * ``v_r_q``    -- Q factor of a seeded standard-normal m x r matrix

    ``svd="auto"`` uses the randomized SVD when ``min(m, d) > lowrank_factor * r``.
    Precomputed ``factors`` of ``G`` (descending, at least ``2r`` wide when
    needed) skip the factorization.
    """
    G = as_matrix(G, "gradient")
    m, d = G.shape
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if not 1 <= r <= min(m, d):
        raise RankError(f"rank {r} outside [1, {min(m, d)}] for a {m}x{d} gradient")
    need = 2 * r if strategy == "v_r_u_2r" else r
    if need > min(m, d):
        raise RankError(f"strategy v_r_u_2r needs 2r = {need} <= min(m, d) = {min(m, d)}")
    if not np.any(G):
        raise DegeneracyError("gradient is identically zero; cannot derive bases")

    if factors is not None:
        f = factors
        if f.k < need:
            raise RankError(f"precomputed factors have {f.k} < {need} singular triplets")
    else:
        if svd == "auto":
            svd = "lowrank" if min(m, d) > lowrank_factor * r else "full"
        if svd == "lowrank":
            f = svd_lowrank(G, need, oversample=oversample, power_iters=power_iters, seed=seed)
        elif svd == "full":
            f = svd_full(G)
        else:
            raise ValueError(f"unknown svd mode {svd!r}")

    A = f.V[:, :r].T.copy()
    if strategy == "v_r_u_r":
        B = f.U[:, :r].copy()
    elif strategy == "v_r_u_2r":
        B = f.U[:, r:2 * r].copy()
    else:
        rng = np.random.default_rng(seed)
        B = qr_orthonormal(rng.standard_normal((m, r)))
    return A, B


@dataclass
class GradientProbeReport:
    gradients: dict
    num_batches: int
    total_examples: int
    seed: int
    norms: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.norms:
            self.norms = {name: frobenius_norm(G) for name, G in self.gradients.items()}

    def summary(self):
        return {
            "num_batches": self.num_batches,
            "total_examples": self.total_examples,
            "seed": self.seed,
            "norms": dict(self.norms),
            "shapes": {name: list(G.shape) for name, G in self.gradients.items()},
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def probe_batches(data, num_batches, batch_size, seed):
    """Seeded batches drawn without replacement (reshuffling when exhausted)."""
    n = data.size
    if n == 0:
        raise DataError("probe data source is empty")
    batch_size = min(batch_size, n)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    pos = 0
    batches = []
    for _ in range(num_batches):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        batches.append(data.batch(idx))
    return batches


def estimate_first_step_gradient(model, data, num_batches=1, batch_size=64, seed=0):
    """Average ``dL/dW`` over ``num_batches`` seeded batches for every layer.

    ``data`` is a :class:`giva.datasets.Dataset` or a list of :class:`Batch`
    objects (used in order). The model must be at its pretrained state.
    """
    if num_batches < 1:
        raise ValueError("num_batches must be >= 1")
    if isinstance(data, (list, tuple)):
        if not data:
            raise DataError("probe data source is empty")
        batches = [data[i % len(data)] for i in range(num_batches)]
    else:
        batches = probe_batches(data, num_batches, batch_size, seed)

    total = {}
    examples = 0
    for i, batch in enumerate(batches):
        _, grads = loss_and_full_grad(model, batch)
        for name, G in grads.weight.items():
            if not np.all(np.isfinite(G)):
                raise NumericalError(f"batch {i}: non-finite gradient for layer {name!r}")
            total[name] = G.copy() if name not in total else total[name] + G
        examples += batch.size
    mean = {name: G / len(batches) for name, G in total.items()}
    return GradientProbeReport(mean, len(batches), examples, seed)

