"""Sparse mixture of bottleneck adapters with a (domain-aware) Top-K router.

Each hooked MLP sublayer gets ``n`` adapter experts in parallel. A linear
router scores every token against every expert; the ``K`` best logits are
softmax-normalised and only those experts run on that token::

    y = h_o + sum_{i in TopK} softmax(TopK(x W + s))_i * Adapter_i(x)

In domain mode ``s = mean_j(prompt_j) @ W_d`` is one learned shift per
(branch, layer), shared by every token. In standard mode ``s = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .config import ConfigError, MoEConfig


@dataclass
class AdapterExpert:
    W_down: Parameter
    b_down: Parameter
    W_up: Parameter
    b_up: Parameter

    @property
    def m(self) -> int:
        return self.W_down.shape[1]

    def parameters(self) -> List[Parameter]:
        return [self.W_down, self.b_down, self.W_up, self.b_up]

    @classmethod
    def create(cls, prefix: str, d: int, m: int, rng: np.random.Generator,
               init_std: float = 0.02) -> "AdapterExpert":
        # zero up-projection: every expert starts as an exact no-op
        return cls(
            Parameter(f"{prefix}.W_down", Tensor(rng.normal(0.0, init_std, size=(d, m)))),
            Parameter(f"{prefix}.b_down", Tensor(np.zeros(m))),
            Parameter(f"{prefix}.W_up", Tensor(np.zeros((m, d)))),
            Parameter(f"{prefix}.b_up", Tensor(np.zeros(d))),
        )


def adapter_forward(x: Tensor, expert: AdapterExpert) -> Tensor:
    """``relu(x W_down + b_down) W_up + b_up``; the residual add is the caller's."""
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, -1))
    h = ad.relu(ad.add_bias(ad.matmul(x, expert.W_down.tensor), expert.b_down.tensor))
    out = ad.add_bias(ad.matmul(h, expert.W_up.tensor), expert.b_up.tensor)
    return ad.reshape(out, (-1,)) if squeeze else out


@dataclass
class DomainRouter:
    W: Parameter
    k: int
    n: int
    mode: str = "standard"
    W_d: Optional[Parameter] = None
    prompts: Optional[Parameter] = None

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"top_k={self.k} must lie in [1, n={self.n}]")
        if self.mode not in ("standard", "domain"):
            raise ConfigError(f"unknown router mode {self.mode!r}")
        if self.mode == "domain" and (self.W_d is None or self.prompts is None):
            raise ConfigError("domain router needs W_d and prompts")

    @classmethod
    def create(cls, prefix: str, d: int, n: int, k: int, mode: str, n_prompts: int,
               rng: np.random.Generator, init_std: float = 0.02) -> "DomainRouter":
        W = Parameter(f"{prefix}.W", Tensor(rng.normal(0.0, init_std, size=(d, n))))
        W_d = prompts = None
        if mode == "domain":
            W_d = Parameter(f"{prefix}.W_d", Tensor(rng.normal(0.0, init_std, size=(d, n))))
            prompts = Parameter(f"{prefix}.prompts",
                                Tensor(rng.normal(0.0, init_std, size=(n_prompts, d))))
        return cls(W, k, n, mode, W_d, prompts)

    def parameters(self) -> List[Parameter]:
        return [p for p in (self.W, self.W_d, self.prompts) if p is not None]

    def domain_shift(self) -> Optional[Tensor]:
        """The per-expert logit shift contributed by the prompts, shape (n,)."""
        if self.mode != "domain":
            return None
        pooled = ad.mean(self.prompts.tensor, axis=0, keepdims=True)
        return ad.reshape(ad.matmul_ordered(pooled, self.W_d.tensor), (self.n,))

    def logits(self, x: Tensor) -> Tensor:
        # fixed-order reduction keeps logits invariant to expert numbering
        out = ad.matmul_ordered(x, self.W.tensor)
        shift = self.domain_shift()
        return out if shift is None else ad.add_bias(out, shift)


@dataclass
class RoutingOutcome:
    """Routing of R tokens: selected ids (R, K), dense weights (R, n), aggregates."""

    indices: np.ndarray
    weights: Tensor
    f: np.ndarray
    p_avg: Tensor
    logits: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.weights.shape[1]


def routing_stats(weights, indices: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Tensor]:
    """Assignment fractions ``f`` (constant) and mean routing weights ``p_avg``.

    ``f_i`` counts tokens whose selected set contains expert ``i``, over T.
    Without ``indices`` the selected set is read off the nonzero weights.
    """
    weights = ad.as_tensor(weights)
    t, n = weights.shape
    if t < 1:
        raise ValueError("routing_stats needs at least one token")
    if indices is None:
        counts = (weights.data > 0).sum(axis=0)
    else:
        counts = np.bincount(np.asarray(indices).reshape(-1), minlength=n)
    return counts / t, ad.mean(weights, axis=0)


def gate(x, router: DomainRouter) -> RoutingOutcome:
    """Top-K softmax gating for a single token (d,) or a token batch (R, d)."""
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, -1))
    if router.k > router.n:
        raise ConfigError(f"top_k={router.k} exceeds n={router.n}")
    logits = router.logits(x)
    idx = ad.topk_rows(logits.data, router.k)
    # selection is a constant index set; gradient flows through the picked logits
    picked = ad.softmax(ad.take_along(logits, idx), axis=-1)
    weights = ad.scatter_cols(picked, idx, router.n)
    f, p_avg = routing_stats(weights, idx)
    return RoutingOutcome(idx, weights, f, p_avg, logits.data)


def _single_expert_outcome(r: int, dtype) -> RoutingOutcome:
    weights = Tensor(np.ones((r, 1), dtype=dtype))
    idx = np.zeros((r, 1), dtype=np.intp)
    return RoutingOutcome(idx, weights, np.ones(1), ad.mean(weights, axis=0))


def sma_forward(x: Tensor, h_o: Tensor, experts: Sequence[AdapterExpert],
                router: Optional[DomainRouter]):
    """Residual sparse mixture ``h_o + sum_k w_k Adapter_{i_k}(x)``.

    ``x`` and ``h_o`` are (..., d); routing is per token. Each expert runs only
    on the tokens that selected it. Contributions are summed slot by slot (best
    expert first) so the result does not depend on how experts are numbered.
    With ``router=None`` there must be exactly one expert, always weighted 1.
    """
    shape = h_o.shape
    d = shape[-1]
    xf = ad.reshape(x, (-1, d))
    r = xf.shape[0]
    if router is None:
        if len(experts) != 1:
            raise ConfigError("a router is required for more than one expert")
        outcome = _single_expert_outcome(r, xf.data.dtype)
    else:
        if len(experts) != router.n:
            raise ConfigError(f"{len(experts)} experts for a router over {router.n}")
        outcome = gate(xf, router)

    k = outcome.indices.shape[1]
    slots = [None] * k
    for i, expert in enumerate(experts):
        rows, slot = np.nonzero(outcome.indices == i)
        if rows.size == 0:
            continue
        contrib = adapter_forward(ad.take(xf, rows, axis=0, unique=True), expert)
        if router is not None:
            contrib = ad.mul_rows(contrib, ad.take_entries(outcome.weights, rows, i))
        for j in range(k):
            sel = np.nonzero(slot == j)[0]
            if sel.size == 0:
                continue
            part = ad.take(contrib, sel, axis=0, unique=True) if sel.size != rows.size else contrib
            if slots[j] is None:
                slots[j] = Tensor(np.zeros((r, d), dtype=xf.data.dtype))
            slots[j] = ad.index_add(slots[j], rows[sel], part, unique=True)

    y = ad.reshape(h_o, (-1, d))
    for s in slots:
        if s is not None:
            y = ad.add(y, s)
    return ad.reshape(y, shape), outcome


def load_balance_loss(outcome: RoutingOutcome) -> Tensor:
    """``sum_i f_i * p_avg_i``, unscaled; ``f`` is a constant count."""
    return ad.sum_(ad.mul(outcome.p_avg, Tensor(outcome.f.astype(outcome.p_avg.data.dtype))))


def usage_entropy(p_avg: np.ndarray) -> float:
    p = np.asarray(p_avg, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


class DMAdapterLayer:
    """Experts plus router attached to one MLP sublayer."""

    def __init__(self, prefix: str, d: int, cfg: MoEConfig, rng: np.random.Generator):
        m = d // cfg.reduction
        self.prefix = prefix
        self.experts = [AdapterExpert.create(f"{prefix}.experts.{i}", d, m, rng, cfg.init_std)
                        for i in range(cfg.n_experts)]
        self.router = None
        if cfg.n_experts > 1:
            self.router = DomainRouter.create(f"{prefix}.router", d, cfg.n_experts,
                                              cfg.top_k, cfg.router_mode, cfg.n_prompts,
                                              rng, cfg.init_std)

    def parameters(self) -> List[Parameter]:
        params = [p for e in self.experts for p in e.parameters()]
        if self.router is not None:
            params += self.router.parameters()
        return params

    def __call__(self, x: Tensor, h_o: Tensor):
        return sma_forward(x, h_o, self.experts, self.router)


class DMAdapter:
    """All adapter layers of both branches; owns every trainable parameter."""

    def __init__(self, cfg: MoEConfig, dims: Dict[str, int], layers: Dict[str, int], seed: int):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.layers: Dict[str, List[DMAdapterLayer]] = {
            branch: [DMAdapterLayer(f"dm_adapter.{branch}.layers.{l}", dims[branch], cfg, rng)
                     for l in range(layers[branch])]
            for branch in dims
        }

    def named_parameters(self) -> List[Parameter]:
        return [p for branch in self.layers.values() for layer in branch
                for p in layer.parameters()]

    def hooks(self, branch: str):
        return self.layers[branch]


# ----------------------------------------------------------------------
# counting


def count_trainable_params(cfg: MoEConfig, dims: Dict[str, int],
                           layers: Dict[str, int]) -> Dict[str, int]:
    """Closed-form trainable-parameter count with a per-component breakdown."""
    n = cfg.n_experts
    out = {"adapters": 0, "router": 0, "domain_router": 0, "prompts": 0}
    for branch, d in dims.items():
        m = d // cfg.reduction
        n_layers = layers[branch]
        out["adapters"] += n_layers * n * (d * m + m + m * d + d)
        if n > 1:
            out["router"] += n_layers * d * n
            if cfg.router_mode == "domain":
                out["domain_router"] += n_layers * d * n
                out["prompts"] += n_layers * cfg.n_prompts * d
    out["total"] = sum(out.values())
    return out


def flop_count_per_token(cfg: MoEConfig, d: int) -> Tuple[int, int]:
    """(expert flops, router flops) for one token at one layer.

    A multiply-add counts as 2. The domain term ``prompts @ W_d`` is computed
    once per layer, not per token, so it is left out.
    """
    m = d // cfg.reduction
    expert = cfg.top_k * (2 * d * m * 2)
    router = 2 * d * cfg.n_experts if cfg.n_experts > 1 else 0
    return expert, router
