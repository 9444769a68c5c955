"""Two-layer answer policy over the four option slots.

``pi(option | image, question)`` is an exact categorical distribution:
features -> tanh hidden layer -> 4 logits -> softmax(logits / T).
Parameters live in one flat float64 vector with named slices so that
frozen snapshots (reference / old policy) are plain array copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autodiff import Tensor
from .chartdsl import TEMPLATES, TREND_LABELS, ChartSpec, Question, parse_number
from .render import Image, ShapeError

N_OPTIONS = 4


class NonFiniteError(FloatingPointError):
    pass


# -- features ---------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureConfig:
    width: int = 64
    height: int = 64
    pool: int = 2
    max_rows: int = 2
    max_cols: int = 2
    max_slots: int = 3
    max_series_refs: int = 2
    max_panel_refs: int = 2
    count_scale: int = 8

    @property
    def pixel_dim(self) -> int:
        return (self.width // self.pool) * (self.height // self.pool)

    @property
    def anchor_dim(self) -> int:
        return self.max_rows * self.max_cols * self.max_slots

    @property
    def question_dim(self) -> int:
        cells = self.max_rows * self.max_cols
        return (
            len(TEMPLATES)
            + self.max_series_refs * self.anchor_dim
            + self.max_panel_refs * cells
            + 2
            + N_OPTIONS
        )

    @property
    def dim(self) -> int:
        return self.pixel_dim + self.question_dim


_TREND_CODE = {"increasing": 1.0, "decreasing": -1.0, "flat": 0.0, "mixed": 0.5}
assert set(_TREND_CODE) == set(TREND_LABELS)


def pixel_block(img: Image, cfg: FeatureConfig) -> np.ndarray:
    if (img.width, img.height) != (cfg.width, cfg.height):
        raise ShapeError(f"image is {img.width}x{img.height}, expected {cfg.width}x{cfg.height}")
    if cfg.width % cfg.pool or cfg.height % cfg.pool:
        raise ShapeError("pool size must divide the image")
    a = img.to_array().astype(np.float64) / 255.0
    p = cfg.pool
    a = a.reshape(cfg.height // p, p, cfg.width // p, p).mean(axis=(1, 3))
    return a.ravel()


def question_block(q: Question, chart: ChartSpec, cfg: FeatureConfig) -> np.ndarray:
    """Template one-hot, visual anchors of referenced elements, x and options.

    Anchors use the chart layout only (cell and legend slot), which is
    identical across the original and both edited views.
    """
    out = np.zeros(cfg.question_dim)
    out[TEMPLATES.index(q.template)] = 1.0
    pos = len(TEMPLATES)
    panel_of = chart.panel_of_series()
    cells = cfg.max_rows * cfg.max_cols
    for k in range(cfg.max_series_refs):
        if k < len(q.series_ids):
            panel = panel_of[q.series_ids[k]]
            slot = [s.id for s in panel.series].index(q.series_ids[k])
            cell = panel.row * cfg.max_cols + panel.col
            out[pos + cell * cfg.max_slots + min(slot, cfg.max_slots - 1)] = 1.0
        pos += cfg.anchor_dim
    panels = chart.panel_by_id()
    for k in range(cfg.max_panel_refs):
        if k < len(q.panel_ids):
            p = panels[q.panel_ids[k]]
            out[pos + p.row * cfg.max_cols + p.col] = 1.0
        pos += cells
    ref_panel = (
        panel_of[q.series_ids[0]] if q.series_ids else panels[q.panel_ids[0]] if q.panel_ids else chart.panels[0]
    )
    if q.x is not None:
        lo, hi = ref_panel.xrange
        out[pos] = float(_signed_unit((Fraction(q.x) - lo) / (hi - lo)))
        out[pos + 1] = 1.0
    pos += 2
    ylo, yhi = ref_panel.yrange
    for i, opt in enumerate(q.options[:N_OPTIONS]):
        if q.template == "trend_sign":
            out[pos + i] = _TREND_CODE.get(opt, 0.0)
        elif q.template == "count_crossings":
            out[pos + i] = float(_signed_unit(Fraction(min(int(opt), cfg.count_scale), cfg.count_scale)))
        else:
            out[pos + i] = float(_signed_unit((parse_number(opt) - ylo) / (yhi - ylo)))
    return out


def _signed_unit(u: Fraction) -> Fraction:
    u = min(max(u, Fraction(0)), Fraction(1))
    return 2 * u - 1


def featurize(img: Image, q: Question, cfg: FeatureConfig, chart: ChartSpec) -> np.ndarray:
    """``pixels/255`` (average-pooled) followed by the question segment."""
    return np.concatenate([pixel_block(img, cfg), question_block(q, chart, cfg)])


# -- parameters -------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyShape:
    input_dim: int
    hidden: int = 64

    @property
    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        d, h, o = self.input_dim, self.hidden, N_OPTIONS
        spans = (("w1", (d, h)), ("b1", (h,)), ("w2", (h, o)), ("b2", (o,)))
        out, start = {}, 0
        for name, shape in spans:
            n = int(np.prod(shape))
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    @property
    def size(self) -> int:
        return self.input_dim * self.hidden + self.hidden + self.hidden * N_OPTIONS + N_OPTIONS


@dataclass
class PolicyParams:
    shape: PolicyShape
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.shape.size,):
            raise ShapeError(f"expected {self.shape.size} parameters, got {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise NonFiniteError("non-finite parameter")

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shp = self.shape.slices[name]
        return self.theta[sl].reshape(shp)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.shape, self.theta.copy())

    @classmethod
    def zeros(cls, shape: PolicyShape) -> "PolicyParams":
        return cls(shape, np.zeros(shape.size))

    @classmethod
    def init(cls, shape: PolicyShape, seed: int) -> "PolicyParams":
        """Symmetric uniform init scaled by fan-in; biases start at zero."""
        rng = np.random.default_rng(seed)
        theta = np.zeros(shape.size)
        for name, fan_in in (("w1", shape.input_dim), ("w2", shape.hidden)):
            sl, _ = shape.slices[name]
            bound = 1.0 / math.sqrt(fan_in)
            theta[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
        return cls(shape, theta)


def logits_graph(theta: Tensor, features, shape: PolicyShape) -> Tensor:
    """Differentiable (N, 4) logits for a batch of feature rows."""
    x = Tensor.lift(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    sl = shape.slices
    w1 = theta[sl["w1"][0]].reshape(*sl["w1"][1])
    b1 = theta[sl["b1"][0]]
    w2 = theta[sl["w2"][0]].reshape(*sl["w2"][1])
    b2 = theta[sl["b2"][0]]
    hidden = (x @ w1 + b1).tanh()
    return hidden @ w2 + b2


def logits(params: PolicyParams, features) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    h = np.tanh(x @ params["w1"] + params["b1"])
    return h @ params["w2"] + params["b2"]


def log_softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- distributions ----------------------------------------------------------------


@dataclass(frozen=True)
class AnswerDistribution:
    probs: tuple[float, ...]
    logprobs: tuple[float, ...]
    temperature: float = 1.0

    @classmethod
    def from_logits(cls, z, temperature: float = 1.0) -> "AnswerDistribution":
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError("non-finite logits")
        lp = log_softmax(z, temperature)
        return cls(tuple(np.exp(lp).tolist()), tuple(lp.tolist()), temperature)

    @classmethod
    def from_probs(cls, probs, temperature: float = 1.0) -> "AnswerDistribution":
        """Explicit distribution; zero entries are allowed for stub policies."""
        p = np.asarray(probs, dtype=np.float64)
        if p.shape != (N_OPTIONS,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a distribution over {N_OPTIONS} options: {probs}")
        with np.errstate(divide="ignore"):
            lp = np.log(p)
        return cls(tuple(p.tolist()), tuple(lp.tolist()), temperature)

    @classmethod
    def uniform(cls) -> "AnswerDistribution":
        return cls.from_probs([1.0 / N_OPTIONS] * N_OPTIONS)


def forward(params: PolicyParams, features, temperature: float = 1.0) -> AnswerDistribution:
    z = logits(params, features)[0]
    return AnswerDistribution.from_logits(z, temperature)


def sample_answer(dist: AnswerDistribution, rng: np.random.Generator) -> tuple[int, float]:
    """Inverse-CDF draw; returns ``(index, logprob)``."""
    u = rng.random()
    acc = 0.0
    last = max(i for i, p in enumerate(dist.probs) if p > 0)
    for i, p in enumerate(dist.probs):
        acc += p
        if u < acc and p > 0:
            return i, dist.logprobs[i]
    return last, dist.logprobs[last]


def entropy(dist: AnswerDistribution) -> float:
    return -sum(p * lp for p, lp in zip(dist.probs, dist.logprobs) if p > 0)


class MLPPolicy:
    """Callable answer policy: ``policy(image, question, chart, temperature)``."""

    def __init__(self, params: PolicyParams, features: FeatureConfig = FeatureConfig()):
        self.params = params
        self.features = features

    def __call__(self, img: Image, q: Question, chart: ChartSpec, temperature: float = 1.0) -> AnswerDistribution:
        return forward(self.params, featurize(img, q, self.features, chart), temperature)


# -- optimizer --------------------------------------------------------------------


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamWState":
        return AdamWState(self.m.copy(), self.v.copy(), self.step)


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_update(
    params: PolicyParams, grads: np.ndarray, state: AdamWState, cfg: AdamWConfig | None = None
) -> tuple[PolicyParams, AdamWState]:
    """One decoupled-weight-decay Adam step; inputs are not mutated."""
    cfg = cfg or AdamWConfig()
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.theta.shape or state.m.shape != g.shape:
        raise ShapeError("gradient / optimizer state shape mismatch")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    t = state.step + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * g * g
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    theta = params.theta * (1 - cfg.lr * cfg.weight_decay)
    theta = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return PolicyParams(params.shape, theta), AdamWState(m, v, t)
