"""Toy architectures built from adaptive computation blocks.

Parameters live in one ordered store; every name is tagged ``theta`` (body
and emission) or ``phi`` (halting heads).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Union

import numpy as np
from pydantic import ConfigDict

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import BlockConfig, DenseHaltingHead, GridHaltingHead, HaltingTrace, run_block
from .stochastic import RngStream

_STRICT = ConfigDict(extra="forbid")


@dataclass
class ResidualStackSpec:
    __pydantic_config__ = _STRICT
    kind: Literal["residual"] = "residual"
    blocks: int = 2
    max_iters: int = 4
    width: int = 16
    input_dim: int = 8
    classes: int = 4
    task: Literal["mixture"] = "mixture"


@dataclass
class GridModelSpec:
    """Channels double and resolution halves after every block."""

    __pydantic_config__ = _STRICT
    kind: Literal["grid"] = "grid"
    blocks: int = 3
    max_iters: int = 3
    channels: int = 4
    height: int = 16
    width: int = 16
    in_channels: int = 1
    classes: int = 4
    grouping: int = 1
    task: Literal["texture"] = "texture"

    def block_shape(self, k: int) -> tuple[int, int, int]:
        """(channels, height, width) of block ``k`` (0-based)."""
        return self.channels * 2 ** k, self.height // 2 ** k, self.width // 2 ** k

    def group(self, k: int) -> int:
        _, h, w = self.block_shape(k)
        return min(self.grouping, h, w)

    def latents(self, k: int) -> tuple[int, int]:
        _, h, w = self.block_shape(k)
        g = self.group(k)
        return h // g, w // g

    @property
    def num_latents(self) -> int:
        return sum(a * b for a, b in (self.latents(k) for k in range(self.blocks)))


@dataclass
class AdaptiveRnnSpec:
    __pydantic_config__ = _STRICT
    kind: Literal["rnn"] = "rnn"
    hidden: int = 16
    embed: int = 4
    max_iters: int = 3
    classes: int = 2
    task: Literal["parity"] = "parity"


ModelSpec = Union[ResidualStackSpec, GridModelSpec, AdaptiveRnnSpec]


@dataclass
class ForwardResult:
    logp: Tensor | list[Tensor]
    traces: list[HaltingTrace] = field(default_factory=list)
    flops: float = 0.0  # per example

    @property
    def executed_iterations(self) -> float:
        """Mean number of body evaluations per latent variable."""
        if not self.traces:
            return 0.0
        return float(np.mean([t.executed.mean() for t in self.traces]))


def _per_example(t: Tensor, reduce: str) -> Tensor:
    if t.ndim <= 1:
        return t
    axes = tuple(range(1, t.ndim))
    return t.mean(axis=axes) if reduce == "mean" else t.sum(axis=axes)


class Model:
    """Shared plumbing: parameter store, tags, losses over traces."""

    spec: ModelSpec

    def __init__(self, spec, seed: int = 0):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.tags: dict[str, str] = {}
        self._build(RngStream(seed, 0xC0FFEE))

    def _add(self, name: str, value, tag: str = "theta") -> Tensor:
        t = ad.parameter(value, name=name)
        self.params[name] = t
        self.tags[name] = tag
        return t

    def _add_head(self, head) -> None:
        for name, t in head.params.items():
            t.name = name
            self.params[name] = t
            self.tags[name] = "phi"

    def _build(self, rng: RngStream):
        raise NotImplementedError

    def block_configs(self, mode: str, **kw) -> BlockConfig:
        return BlockConfig(self.spec.max_iters, mode, **kw)

    def param_count(self, tag: str | None = None) -> int:
        return sum(t.size for n, t in self.params.items() if tag is None or self.tags[n] == tag)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def grad_vector(self, tag: str | None = None) -> np.ndarray:
        return np.concatenate([t.adjoint.ravel() for n, t in self.params.items()
                               if tag is None or self.tags[n] == tag])

    # per-example reductions over traces
    def expected_cost(self, traces: list[HaltingTrace], field_name: str = "expected") -> Tensor:
        """sum over blocks of the mean over that block's latents; shape (batch,)."""
        total = None
        for tr in traces:
            v = _per_example(getattr(tr, field_name), "mean")
            total = v if total is None else total + v
        return total

    def log_q(self, traces: list[HaltingTrace]) -> Tensor:
        total = None
        for tr in traces:
            v = _per_example(tr.log_q, "sum")
            total = v if total is None else total + v
        return total

    def log_likelihood(self, result: ForwardResult, y) -> Tensor:
        return -ad.softmax_cross_entropy(result.logp, y)

    def correct(self, result: ForwardResult, y) -> np.ndarray:
        return (result.logp.value.argmax(axis=1) == np.asarray(y)).astype(np.float64)


def _fanin(rng: RngStream, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(shape) * math.sqrt(gain / fan_in)


class ResidualStack(Model):
    """K blocks of residual units u + W2 tanh(W1 u + b1) + b2 on vectors."""

    def _build(self, rng):
        s = self.spec
        d, f, c = s.input_dim, s.width, s.classes
        self._add("stem.w", _fanin(rng, (d, f), d))
        self._add("stem.b", np.zeros(f))
        self.heads = []
        for k in range(1, s.blocks + 1):
            for l in range(1, s.max_iters + 1):
                self._add(f"b{k}.u{l}.w1", _fanin(rng, (f, f), f))
                self._add(f"b{k}.u{l}.b1", np.zeros(f))
                self._add(f"b{k}.u{l}.w2", _fanin(rng, (f, f), f, 0.5))
                self._add(f"b{k}.u{l}.b2", np.zeros(f))
            head = DenseHaltingHead(f, s.max_iters, prefix=f"b{k}.head")
            self._add_head(head)
            self.heads.append(head)
        self._add("cls.w", _fanin(rng, (f, c), f))
        self._add("cls.b", np.zeros(c))

    def analytic_param_count(self) -> int:
        s = self.spec
        f, L = s.width, s.max_iters
        per_block = L * (2 * f * f + 2 * f) + (L - 1) * (f + 1)
        return s.input_dim * f + f + s.blocks * per_block + f * s.classes + s.classes

    @property
    def unit_flops(self) -> float:
        return 2.0 * self.spec.width ** 2

    def fixed_flops(self) -> float:
        s = self.spec
        return float(s.input_dim * s.width + s.width * s.classes)

    def _unit(self, k: int, l: int, u: Tensor) -> Tensor:
        p = self.params
        pre = f"b{k}.u{l}."
        return u + ad.tanh(u @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]

    def forward(self, x, mode: str = "relaxed", rng: RngStream | None = None, *,
                adaptive: bool = True, full_horizon: bool = False, **block_kw) -> ForwardResult:
        s, p = self.spec, self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != s.input_dim:
            raise ad.ShapeError(f"residual stack: expected input (batch, {s.input_dim}), got {x.shape}")
        u = ad.Tensor(x) @ p["stem.w"] + p["stem.b"]
        traces = []
        flops = x.shape[0] * self.fixed_flops()
        for k in range(1, s.blocks + 1):
            if not adaptive:
                for l in range(1, s.max_iters + 1):
                    u = self._unit(k, l, u)
                flops += x.shape[0] * s.max_iters * self.unit_flops
                continue
            body = (lambda kk: lambda l, prev, active: self._unit(kk, l, prev))(k)
            cfg = self.block_configs(mode, **block_kw)
            u, tr = run_block(body, self.heads[k - 1], cfg, u, rng.child(k) if rng else None,
                              unit_flops=self.unit_flops, head_flops=self.heads[k - 1].flops,
                              full_horizon=full_horizon)
            traces.append(tr)
            flops += tr.flops
        logp = ad.log_softmax(u @ p["cls.w"] + p["cls.b"])
        return ForwardResult(logp, traces, flops / x.shape[0])


class GridModel(Model):
    """Pre-activation residual CNN with one latent per location (or patch).

    Units are ``u + f(u) * a`` with ``a``
    the active-positions mask; the first unit of blocks 2+ downsamples with
    stride 2 and a 1x1 projection shortcut.
    """

    def _build(self, rng):
        s = self.spec
        c0 = s.channels
        self._add("stem.w", _fanin(rng, (c0, s.in_channels, 3, 3), 9 * s.in_channels, 2.0))
        self.heads = []
        for k in range(s.blocks):
            ck = s.block_shape(k)[0]
            for l in range(1, s.max_iters + 1):
                cin = s.block_shape(k - 1)[0] if (k > 0 and l == 1) else ck
                self._add(f"b{k + 1}.u{l}.w1", _fanin(rng, (ck, cin, 3, 3), 9 * cin, 2.0))
                self._add(f"b{k + 1}.u{l}.w2", _fanin(rng, (ck, ck, 3, 3), 9 * ck, 0.5))
                if cin != ck:
                    self._add(f"b{k + 1}.u{l}.proj", _fanin(rng, (ck, cin), cin))
            head = GridHaltingHead(ck, s.max_iters, s.group(k), prefix=f"b{k + 1}.head")
            self._add_head(head)
            self.heads.append(head)
        c_last = s.block_shape(s.blocks - 1)[0]
        self._add("cls.w", _fanin(rng, (c_last, s.classes), c_last))
        self._add("cls.b", np.zeros(s.classes))

    def analytic_param_count(self) -> int:
        s = self.spec
        c0, L = s.channels, s.max_iters
        total = 9 * s.in_channels * c0
        for k in range(s.blocks):
            ck = c0 * 2 ** k
            cin = ck // 2 if k > 0 else ck
            total += 9 * ck * cin + 9 * ck * ck + (ck * cin if k > 0 else 0)   # first unit
            total += (L - 1) * 18 * ck * ck                                    # other units
            total += (L - 1) * (9 * ck + ck + 1)                               # heads
        c_last = c0 * 2 ** (s.blocks - 1)
        return total + c_last * s.classes + s.classes

    def unit_flops(self, k: int, l: int) -> float:
        """MACs per output location of unit ``l`` in block ``k`` (0-based k)."""
        s = self.spec
        ck = s.block_shape(k)[0]
        if k > 0 and l == 1:
            cin = s.block_shape(k - 1)[0]
            return 9.0 * cin * ck + 9.0 * ck * ck + cin * ck
        return 18.0 * ck * ck

    def fixed_flops(self) -> float:
        s = self.spec
        c_last = s.block_shape(s.blocks - 1)[0]
        return float(9 * s.in_channels * s.channels * s.height * s.width + c_last * s.classes)

    def _unit(self, k: int, l: int, u: Tensor, mask: Tensor | None) -> Tensor:
        p = self.params
        pre = f"b{k + 1}.u{l}."
        stride = 2 if (k > 0 and l == 1) else 1
        y = ad.relu(u)
        f = ad.conv3x3(ad.relu(ad.conv3x3(y, p[pre + "w1"], stride)), p[pre + "w2"])
        shortcut = ad.conv1x1(y, p[pre + "proj"], stride) if pre + "proj" in p else u
        return shortcut + (f if mask is None else f * mask)

    def _broadcast(self, k: int):
        g = self.spec.group(k)

        def broadcast(w: Tensor, u: Tensor) -> Tensor:
            up = ad.upsample(w, g)
            return ad.reshape(up, (up.shape[0], 1) + up.shape[1:])
        return broadcast

    def forward(self, x, mode: str = "relaxed", rng: RngStream | None = None, *,
                adaptive: bool = True, full_horizon: bool = False, **block_kw) -> ForwardResult:
        s, p = self.spec, self.params
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != (s.in_channels, s.height, s.width):
            raise ad.ShapeError(f"grid model: expected input (batch, {s.in_channels}, {s.height}, {s.width}), "
                                f"got {x.shape}")
        n = x.shape[0]
        u = ad.conv3x3(ad.Tensor(x), p["stem.w"])
        traces = []
        flops = n * self.fixed_flops()
        for k in range(s.blocks):
            _, hk, wk = s.block_shape(k)
            if not adaptive:
                for l in range(1, s.max_iters + 1):
                    u = self._unit(k, l, u, None)
                    flops += n * hk * wk * self.unit_flops(k, l)
                continue
            g = s.group(k)
            bc = self._broadcast(k)
            body = (lambda kk, bcast: lambda l, prev, active: self._unit(
                kk, l, prev, None if l == 1 else bcast(active, prev)))(k, bc)
            cfg = self.block_configs(mode, **block_kw)
            u, tr = run_block(body, self.heads[k], cfg, u, rng.child(k + 1) if rng else None,
                              positions=(n,) + s.latents(k), broadcast=bc,
                              unit_flops=(lambda kk: lambda l: g * g * self.unit_flops(kk, l))(k),
                              head_flops=g * g * self.heads[k].flops, full_horizon=full_horizon)
            traces.append(tr)
            flops += tr.flops
        feat = ad.global_avg_pool(ad.relu(u))
        logp = ad.log_softmax(feat @ p["cls.w"] + p["cls.b"])
        return ForwardResult(logp, traces, flops / n)


class AdaptiveRNN(Model):
    """Tanh RNN with an adaptive block per timestep.

    Transition: ``u^l = tanh(E[x] Wx + [l = 1] wf + u^{l-1} Wh + b)``; one
    halting head shared by all iterations and timesteps.
    """

    def _build(self, rng):
        s = self.spec
        e, hd = s.embed, s.hidden
        self._add("emb", rng.normal((2, e)))
        self._add("wx", _fanin(rng, (e, hd), e))
        self._add("wf", np.zeros(hd))
        self._add("wh", _fanin(rng, (hd, hd), hd))
        self._add("b", np.zeros(hd))
        self.head = DenseHaltingHead(hd, 2 if s.max_iters > 1 else 1, prefix="head")
        self._add_head(self.head)
        self._add("out.w", _fanin(rng, (hd, s.classes), hd))
        self._add("out.b", np.zeros(s.classes))

    def analytic_param_count(self) -> int:
        s = self.spec
        hd = s.hidden
        heads = hd + 1 if s.max_iters > 1 else 0
        return 2 * s.embed + s.embed * hd + hd + hd * hd + hd + heads + hd * s.classes + s.classes

    @property
    def unit_flops(self) -> float:
        return float(self.spec.embed * self.spec.hidden + self.spec.hidden ** 2)

    def _transition(self, xe: Tensor, l: int, u: Tensor) -> Tensor:
        p = self.params
        pre = xe + u @ p["wh"] + p["b"]
        return ad.tanh(pre + p["wf"] if l == 1 else pre)

    def forward(self, x, mode: str = "relaxed", rng: RngStream | None = None, *,
                adaptive: bool = True, full_horizon: bool = False, **block_kw) -> ForwardResult:
        s, p = self.spec, self.params
        x = np.asarray(x, dtype=np.int64)
        if x.ndim != 2 or x.shape[1] == 0:
            raise ad.ShapeError(f"rnn: expected nonempty (batch, time) sequence, got {x.shape}")
        n, steps = x.shape
        u = ad.Tensor(np.zeros((n, s.hidden)))
        shared = lambda l, v: self.head(1, v)
        traces, outs = [], []
        flops = 0.0
        for t in range(steps):
            xe = p["emb"][x[:, t]] @ p["wx"]
            if adaptive:
                body = (lambda xe_t: lambda l, prev, active: self._transition(xe_t, l, prev))(xe)
                u, tr = run_block(body, shared, self.block_configs(mode, **block_kw), u,
                                  rng.child(t) if rng else None, unit_flops=self.unit_flops,
                                  head_flops=self.head.flops, full_horizon=full_horizon)
                traces.append(tr)
                flops += tr.flops
            else:
                for l in range(1, s.max_iters + 1):
                    u = self._transition(xe, l, u)
                flops += n * s.max_iters * self.unit_flops
            outs.append(ad.log_softmax(u @ p["out.w"] + p["out.b"]))
            flops += n * s.hidden * s.classes
        return ForwardResult(outs, traces, flops / n)

    def log_likelihood(self, result: ForwardResult, y) -> Tensor:
        y = np.asarray(y)
        total = None
        for t, lp in enumerate(result.logp):
            v = -ad.softmax_cross_entropy(lp, y[:, t])
            total = v if total is None else total + v
        return total

    def correct(self, result: ForwardResult, y) -> np.ndarray:
        y = np.asarray(y)
        hits = [(lp.value.argmax(axis=1) == y[:, t]) for t, lp in enumerate(result.logp)]
        return np.mean(hits, axis=0)


MODEL_TYPES = {"residual": ResidualStack, "grid": GridModel, "rnn": AdaptiveRNN}
SPEC_TYPES = {"residual": ResidualStackSpec, "grid": GridModelSpec, "rnn": AdaptiveRnnSpec}


def build_model(spec, seed: int = 0) -> Model:
    return MODEL_TYPES[spec.kind](spec, seed)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = "PACT-CHECKPOINT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, meta: dict | None = None) -> None:
    """Header line, JSON manifest line, then little-endian float64 arrays."""
    arrays = [{"name": n, "shape": list(t.shape), "tag": model.tags[n]} for n, t in model.params.items()]
    header = {"model": asdict(model.spec), "meta": meta or {}, "arrays": arrays}
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for t in model.params.values():
            f.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as f:
        first = f.readline().decode(errors="replace").split()
        if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        if int(first[1]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {first[1]}")
        header = json.loads(f.readline())
        payload = f.read()
    spec_d = dict(header["model"])
    spec = SPEC_TYPES[spec_d["kind"]](**spec_d)
    model = build_model(spec)
    offset = 0
    for entry in header["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in model.params or model.params[name].shape != shape:
            raise CheckpointError(f"{path}: array {name} {shape} does not fit the model")
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(payload):
            raise CheckpointError(f"{path}: truncated at array {name}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape)
        model.params[name].value = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    return model, header["meta"]
