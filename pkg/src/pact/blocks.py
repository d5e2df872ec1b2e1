"""Adaptive computation block executors and halting heads.

A block runs up to ``L`` iterations of a body ``u^l = body(l, u^{l-1}, a^l)``
where ``a^l`` is the active-positions multiplier (all ones at ``l = 1``).
Halting is decided independently per *position*: a row of a batch, a
spatial location, or a patch of locations.  Four execution modes share one
loop:

* ``discrete``    -- Bernoulli gates, output is ``u^z``.
* ``thresholded`` -- gate fires as soon as ``h^l > 0.5``; deterministic.
* ``relaxed``     -- RelaxedBernoulli gates, output ``sum_l z^l u^l``;
  positions stop once their remaining stick is ``<= clip``.
* ``act``         -- the Adaptive Computation Time weighting with ponder cost.

The final iteration never evaluates a head: ``h^L = 1``.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .stochastic import RngStream, bernoulli, relaxed_bernoulli_from_logits

MODES = ("discrete", "thresholded", "relaxed", "act")
HEAD_BIAS_INIT = -3.0


@dataclass(frozen=True)
class BlockConfig:
    max_iters: int
    mode: str = "relaxed"
    temperature: float = 2.0 / 3.0
    clip: float = 0.01
    act_eps: float = 0.01
    penalty: float = 0.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.clip < 1.0:
            raise ValueError(f"clip must lie in [0, 1), got {self.clip}")
        if not 0.0 < self.act_eps < 1.0:
            raise ValueError(f"act_eps must lie in (0, 1), got {self.act_eps}")

    def with_mode(self, mode: str) -> "BlockConfig":
        return dataclasses.replace(self, mode=mode)


@dataclass
class HaltingTrace:
    """What one block did, per position.

    ``expected`` is N: the analytic expected iteration count for
    discrete/thresholded/relaxed (relaxed truncates at the executed horizon
    and gives the tail mass to the last executed iteration), and the step
    count for ``act``.  ``executed`` counts body evaluations per position.
    """

    mode: str
    max_iters: int
    halting: list[Tensor] = field(default_factory=list)
    weights: list[Tensor] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    expected: Tensor | None = None
    executed: np.ndarray | None = None
    flops: float = 0.0
    invocations: int = 0
    log_q: Tensor | None = None
    ponder: Tensor | None = None

    @property
    def halted_at(self) -> np.ndarray:
        return self.executed

    def weight_matrix(self) -> np.ndarray:
        """Weights stacked on a trailing iteration axis, zero-padded to L."""
        cols = [np.broadcast_to(w.value, self.executed.shape) for w in self.weights]
        cols += [np.zeros(self.executed.shape)] * (self.max_iters - len(cols))
        return np.stack(cols, axis=-1)


def _default_broadcast(positions):
    def broadcast(w: Tensor, u: Tensor) -> Tensor:
        return ad.reshape(w, tuple(positions) + (1,) * (u.ndim - len(positions)))
    return broadcast


def run_block(body: Callable, head: Callable, cfg: BlockConfig, u0, rng: RngStream | None = None, *,
              positions: Sequence[int] | None = None, broadcast: Callable | None = None,
              unit_flops=0.0, head_flops: float = 0.0, full_horizon: bool = False):
    """Execute one adaptive computation block; returns ``(output, trace)``.

    ``head(l, u)`` returns halting logits shaped like ``positions`` (default:
    the leading axis of ``u0``).  ``unit_flops`` is the per-position cost of a
    body iteration (a number or a function of ``l``), ``head_flops`` the
    per-position cost of a head.  Only positions still active at ``l`` are
    charged.  With ``full_horizon`` a discrete block keeps evaluating heads
    after every position halted so that N uses all ``L`` probabilities;
    halted positions are not charged for those iterations.
    """
    mode, L = cfg.mode, cfg.max_iters
    if mode in ("discrete", "relaxed") and rng is None and L > 1:
        raise ValueError(f"{mode} mode needs an RngStream")
    u0 = ad.as_tensor(u0)
    positions = tuple(u0.shape[:1] if positions is None else positions)
    broadcast = broadcast or _default_broadcast(positions)
    cost = unit_flops if callable(unit_flops) else (lambda l: unit_flops)

    ones, zeros = np.ones(positions), np.zeros(positions)
    alive = np.ones(positions, dtype=bool)
    executed = np.zeros(positions, dtype=np.int64)
    trace = HaltingTrace(mode=mode, max_iters=L)
    active = Tensor(ones)
    out: Tensor | None = None
    stick_h = Tensor(ones)         # remaining stick of h, for N
    n_exp = Tensor(zeros)
    stick = Tensor(ones)           # remaining stick of the relaxed gates
    log_q = Tensor(zeros)
    cum = zeros.copy()             # ACT cumulative halting probability
    remainder = Tensor(ones)
    ponder = Tensor(zeros)
    last_l = 0
    u = u0

    for l in range(1, L + 1):
        if not alive.any() and not (full_horizon and mode == "discrete"):
            break
        trace.masks.append(np.broadcast_to(active.value, positions).copy())
        u = body(l, u, active)
        trace.invocations += 1
        n_alive = int(alive.sum())
        if n_alive:
            last_l = l
        executed += alive
        trace.flops += n_alive * (cost(l) + (head_flops if l < L else 0.0))
        if l < L:
            logits = head(l, u)
            h = ad.sigmoid(logits)
            trace.halting.append(h)
        else:
            logits, h = None, Tensor(ones)

        if mode in ("discrete", "thresholded"):
            if l == L:
                xi = ones
            elif mode == "discrete":
                xi = bernoulli(h.value, rng)
            else:
                xi = (h.value > 0.5).astype(np.float64)
            fire = alive & (xi == 1.0)
            if mode == "discrete" and l < L:
                step_logq = ad.where(xi == 1.0, ad.log_sigmoid(logits), ad.log_sigmoid(-logits))
                log_q = log_q + ad.where(alive, step_logq, 0.0)
            w = Tensor(fire.astype(np.float64))
            # one-hot weights: select u^z rather than accumulate a mixture
            sel = np.broadcast_to(broadcast(w, u).value, u.shape) > 0
            if out is None:
                out = u if sel.all() else ad.where(sel, u, 0.0)
            else:
                out = ad.where(sel, u, out)
            n_exp = n_exp + l * stick_h * h
            stick_h = stick_h * (1.0 - h)
            alive = alive & ~fire
            active = Tensor(alive.astype(np.float64))

        elif mode == "relaxed":
            if l < L:
                xi = relaxed_bernoulli_from_logits(logits, cfg.temperature, rng.uniform(positions))
            else:
                xi = Tensor(ones)
            new_stick = stick * (1.0 - xi)
            last = alive & ((l == L) | (new_stick.value <= cfg.clip))
            w = ad.where(last, stick, ad.where(alive, stick * xi, 0.0))
            contrib = broadcast(w, u) * u
            out = contrib if out is None else out + contrib
            n_exp = n_exp + ad.where(last, l * stick_h, ad.where(alive, l * stick_h * h, 0.0))
            stick_h = stick_h * (1.0 - h)
            stick = new_stick
            alive = alive & ~last
            active = ad.where(alive, new_stick, 0.0)

        else:  # act
            cum_new = cum + h.value
            halt = alive & ((cum_new >= 1.0 - cfg.act_eps) | (l == L))
            cont = alive & ~halt
            w = ad.where(halt, remainder, ad.where(cont, h, 0.0))
            contrib = broadcast(w, u) * u
            out = contrib if out is None else out + contrib
            ponder = ponder + ad.where(alive, 1.0 + ad.where(halt, remainder, 0.0), 0.0)
            remainder = ad.where(cont, remainder - h, remainder)
            cum = cum_new
            alive = cont
            active = Tensor(alive.astype(np.float64))

        trace.weights.append(w)

    if mode in ("discrete", "thresholded") and last_l < L and not full_horizon:
        # lazily stopped: the unevaluated tail goes to the last iteration
        n_exp = n_exp + last_l * stick_h
    if mode == "act":
        n_exp = Tensor(executed.astype(np.float64))
        trace.ponder = ponder
    if mode == "discrete":
        trace.log_q = log_q
    trace.expected = n_exp
    trace.executed = executed
    return out, trace


def run_discrete(body, head, cfg: BlockConfig, rng: RngStream, u0, **kw):
    return run_block(body, head, cfg.with_mode("discrete"), u0, rng, **kw)


def run_thresholded(body, head, cfg: BlockConfig, u0, **kw):
    return run_block(body, head, cfg.with_mode("thresholded"), u0, None, **kw)


def run_relaxed(body, head, cfg: BlockConfig, rng: RngStream, u0, **kw):
    return run_block(body, head, cfg.with_mode("relaxed"), u0, rng, **kw)


def run_act(body, head, cfg: BlockConfig, u0, **kw):
    return run_block(body, head, cfg.with_mode("act"), u0, None, **kw)


def active_mask(gates, clip: float = 0.0, relaxed: bool = False) -> np.ndarray:
    """Active-positions multiplier from the gates of earlier iterations.

    ``gates`` has the iteration axis last (possibly empty).  Discrete mode
    returns prod(1 - xi); relaxed mode returns r * [r > clip].
    """
    g = np.asarray(gates, dtype=np.float64)
    r = np.prod(1.0 - g, axis=-1) if g.shape[-1] else np.ones(g.shape[:-1])
    return np.where(r > clip, r, 0.0) if relaxed else r


def act_weights(h: Sequence[float], eps: float = 0.01):
    """ACT halting distribution for one position.

    Returns ``(weights, steps, remainder, ponder)``; the last entry of ``h``
    is treated as 1 whatever its value.
    """
    h = [float(x) for x in h]
    weights = np.zeros(len(h))
    cum, remainder = 0.0, 1.0
    for l, hl in enumerate(h, start=1):
        hl = 1.0 if l == len(h) else hl
        cum += hl
        if cum < 1.0 - eps:
            weights[l - 1] = hl
            remainder -= hl
        else:
            weights[l - 1] = remainder
            return weights, l, remainder, l + remainder
    raise AssertionError("unreachable: final iteration always halts")


def ponder_demo(tail: Sequence[float] = (1 / 3, 1 / 3, 1 / 3), points: int = 200, eps: float = 0.01):
    """Ponder cost as a function of h^1 on a uniform grid over [0, 1]."""
    if points < 2:
        raise ValueError("need at least 2 grid points")
    rows = []
    for h1 in np.linspace(0.0, 1.0, points):
        _, _, _, rho = act_weights([h1, *tail], eps)
        rows.append((float(h1), float(rho)))
    return rows


def write_ponder_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["h1", "rho"])
        for h1, rho in rows:
            w.writerow([repr(h1), repr(rho)])


# -- halting heads -------------------------------------------------------------


class DenseHaltingHead:
    """Affine halting logit per iteration: ``u . w^l + b^l``."""

    def __init__(self, width: int, max_iters: int, prefix: str = "head"):
        self.width = width
        self.params: dict[str, Tensor] = {}
        for l in range(1, max_iters):
            self.params[f"{prefix}{l}.w"] = ad.parameter(np.zeros(width))
            self.params[f"{prefix}{l}.b"] = ad.parameter(np.array(HEAD_BIAS_INIT))
        self.prefix = prefix

    @property
    def flops(self) -> float:
        return float(self.width)

    def __call__(self, l: int, u: Tensor) -> Tensor:
        w = self.params[f"{self.prefix}{l}.w"]
        b = self.params[f"{self.prefix}{l}.b"]
        if u.ndim == 1:
            return ad.reshape(ad.reshape(u, (1, -1)) @ ad.reshape(w, (-1, 1)), ()) + b
        return ad.reshape(u @ ad.reshape(w, (-1, 1)), (u.shape[0],)) + b


class GridHaltingHead:
    """Spatial halting logits: 3x3 local mixing plus a global-pool term.

    Logits are averaged over non-overlapping ``group x group`` patches, so
    positions are patches; ``group = 1`` keeps one latent per location.
    """

    def __init__(self, channels: int, max_iters: int, group: int = 1, prefix: str = "head"):
        self.channels = channels
        self.group = group
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        for l in range(1, max_iters):
            self.params[f"{prefix}{l}.local"] = ad.parameter(np.zeros((1, channels, 3, 3)))
            self.params[f"{prefix}{l}.global"] = ad.parameter(np.zeros((channels, 1)))
            self.params[f"{prefix}{l}.b"] = ad.parameter(np.array(HEAD_BIAS_INIT))

    @property
    def flops(self) -> float:
        """MACs per spatial location (local conv plus the global term)."""
        return float(10 * self.channels)

    def __call__(self, l: int, u: Tensor) -> Tensor:
        p = self.prefix
        n, _, h, w = u.shape
        local = ad.reshape(ad.conv3x3(u, self.params[f"{p}{l}.local"]), (n, h, w))
        glob = ad.reshape(ad.global_avg_pool(u) @ self.params[f"{p}{l}.global"], (n, 1, 1))
        return ad.avg_pool(local + glob + self.params[f"{p}{l}.b"], self.group)
