"""Rollout collection, the two-stage curriculum and its ablations,
evaluation, coefficient sweeps and bit-exact checkpoints.

Every random draw is keyed by ``(seed, stage index, epoch)`` or
``(seed, stage index, step)``, never by a running generator, so a run
resumed from any checkpoint replays the remaining batches exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Tensor
from .policy import (
    N_OPTIONS,
    AdamWConfig,
    AdamWState,
    AnswerDistribution,
    FeatureConfig,
    PolicyParams,
    PolicyShape,
    adamw_update,
    featurize,
    log_softmax,
    logits,
    sample_answer,
)
from .render import Image, mask_patches
from .shaping import (
    LossReport,
    RolloutGroup,
    TrainConfig,
    compose,
    consistency_term,
    grpo_term,
    kl_divergence,
    separation_term,
    stage_objective,
    uses_terms,
)
from .viewgen import QAItem, derive_seed

MODES = ("bips", "grpo_only", "joint", "reversed", "random_mask")
METRIC_FIELDS = (
    "step", "stage", "l_grpo", "l_cons", "l_sep", "l_total",
    "kl_to_ref", "kl_to_pres", "kl_to_abl", "clip_fraction", "accuracy",
)


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- encoded datasets -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSet:
    """Feature matrices for every item and view, aligned by row."""

    ids: tuple[str, ...]
    x: np.ndarray
    x_pres: np.ndarray
    x_abl: np.ndarray
    has_pres: np.ndarray
    answers: np.ndarray
    templates: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def rows(self, which: str) -> np.ndarray:
        if which == "full":
            return np.arange(len(self))
        if which == "pres":
            return np.flatnonzero(self.has_pres)
        raise ConfigError(f"unknown dataset selector {which!r}")


def masked_views(item: QAItem, cfg: TrainConfig) -> tuple[Image, Image]:
    """Random-patch stand-ins for both counterpart views, built from ``I`` only."""
    a = mask_patches(item.image, cfg.mask_fraction, cfg.mask_patch, derive_seed(item.seed, 101))
    b = mask_patches(item.image, cfg.mask_fraction, cfg.mask_patch, derive_seed(item.seed, 102))
    return a, b


def encode_items(items: Sequence[QAItem], fcfg: FeatureConfig = FeatureConfig(),
                 cfg: TrainConfig | None = None, random_mask: bool = False) -> TrainSet:
    if not items:
        raise DataError("empty dataset")
    cfg = cfg or TrainConfig()
    xs, xp, xa, has = [], [], [], []
    for it in items:
        if it.image is None:
            raise DataError(f"{it.id}: original view missing")
        x = featurize(it.image, it.question, fcfg, it.chart)
        if random_mask:
            pres_img, abl_img = masked_views(it, cfg)
        else:
            if it.abl_image is None:
                raise DataError(f"{it.id}: ablated view missing")
            pres_img, abl_img = it.pres_image, it.abl_image
        has_pres = it.pres is not None
        xs.append(x)
        xa.append(featurize(abl_img, it.question, fcfg, it.chart))
        if has_pres:
            if pres_img is None:
                raise DataError(f"{it.id}: preserving view not loaded")
            xp.append(featurize(pres_img, it.question, fcfg, it.chart))
        else:
            xp.append(x)
        has.append(has_pres)
    return TrainSet(
        ids=tuple(it.id for it in items),
        x=np.array(xs),
        x_pres=np.array(xp),
        x_abl=np.array(xa),
        has_pres=np.array(has, dtype=bool),
        answers=np.array([it.question.answer_index for it in items], dtype=np.int64),
        templates=tuple(it.question.template for it in items),
    )


# -- rollouts ----------------------------------------------------------------------------


def collect_group(item_id: str, features, answer_index: int, old: PolicyParams,
                  cfg: TrainConfig, rng: np.random.Generator) -> RolloutGroup:
    """``G`` answers sampled from the frozen snapshot at the rollout temperature."""
    dist = AnswerDistribution.from_logits(logits(old, features)[0], cfg.temperature)
    draws = [sample_answer(dist, rng) for _ in range(cfg.group_size)]
    return RolloutGroup.build(item_id, [a for a, _ in draws], [lp for _, lp in draws], answer_index)


def collect_groups(data: TrainSet, rows: np.ndarray, old: PolicyParams, cfg: TrainConfig,
                   rng: np.random.Generator) -> list[RolloutGroup]:
    """Batched :func:`collect_group`; consumes the generator in the same order."""
    lp = log_softmax(logits(old, data.x[rows]), cfg.temperature)
    probs = np.exp(lp)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((len(rows), cfg.group_size))
    picks = np.minimum((u[:, :, None] >= cdf[:, None, :]).sum(axis=2), N_OPTIONS - 1)
    groups = []
    for k, row in enumerate(rows):
        acts = picks[k]
        groups.append(RolloutGroup.build(data.ids[row], acts, lp[k, acts], int(data.answers[row])))
    return groups


# -- plans and checkpoints ------------------------------------------------------------------


@dataclass(frozen=True)
class StageEntry:
    tag: str
    data: str
    epochs: int


@dataclass(frozen=True)
class StagePlan:
    entries: tuple[StageEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("empty stage plan")
        for e in self.entries:
            uses_terms(e.tag)
            if e.data not in ("pres", "full"):
                raise ConfigError(f"unknown dataset selector {e.data!r}")
            if e.epochs < 1:
                raise ConfigError("epochs must be >= 1")


def plan_for(mode: str, cfg: TrainConfig, n_pres: int = 0, n_full: int = 1) -> StagePlan:
    s1 = StageEntry("stage1", "pres", cfg.stage1_epochs)
    s2 = StageEntry("stage2", "full", cfg.stage2_epochs)
    if mode in ("bips", "grpo_only", "random_mask"):
        return StagePlan((s1, s2))
    if mode == "reversed":
        return StagePlan((s2, s1))
    if mode == "joint":
        # same number of per-item updates as the two-stage schedule
        epochs = max(1, round((cfg.stage1_epochs * n_pres + cfg.stage2_epochs * n_full) / n_full))
        return StagePlan((StageEntry("joint", "full", epochs),))
    raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


def mode_config(mode: str, cfg: TrainConfig) -> TrainConfig:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    return replace(cfg, alpha=0.0, beta=0.0) if mode == "grpo_only" else cfg


@dataclass
class Checkpoint:
    params: PolicyParams
    opt: AdamWState
    ref: np.ndarray
    cfg: TrainConfig
    plan: StagePlan
    seed: int
    stage_index: int = 0
    stage_step: int = 0
    global_step: int = 0

    @property
    def stage(self) -> str:
        if self.stage_index >= len(self.plan.entries):
            return "done"
        return self.plan.entries[self.stage_index].tag

    @property
    def finished(self) -> bool:
        return self.stage_index >= len(self.plan.entries)


MAGIC = b"CSCKPT"
VERSION = 1


def save_checkpoint(ck: Checkpoint, path: str | os.PathLike) -> None:
    header = {
        "cfg": asdict(ck.cfg),
        "plan": [asdict(e) for e in ck.plan.entries],
        "seed": ck.seed,
        "stage_index": ck.stage_index,
        "stage_step": ck.stage_step,
        "global_step": ck.global_step,
        "opt_step": ck.opt.step,
        "input_dim": ck.params.shape.input_dim,
        "hidden": ck.params.shape.hidden,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)) + blob)
        for arr in (ck.params.theta, ck.opt.m, ck.opt.v, ck.ref):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    version, n = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + n])
    shape = PolicyShape(header["input_dim"], header["hidden"])
    body = np.frombuffer(data[start + n :], dtype="<f8")
    if body.size != 4 * shape.size:
        raise CheckpointError(f"{path}: truncated parameter blocks")
    theta, m, v, ref = (body[i * shape.size : (i + 1) * shape.size].astype(np.float64) for i in range(4))
    cfg_fields = {k: tuple(v_) if isinstance(v_, list) else v_ for k, v_ in header["cfg"].items()}
    return Checkpoint(
        params=PolicyParams(shape, theta),
        opt=AdamWState(m, v, header["opt_step"]),
        ref=ref,
        cfg=TrainConfig(**cfg_fields),
        plan=StagePlan(tuple(StageEntry(**e) for e in header["plan"])),
        seed=header["seed"],
        stage_index=header["stage_index"],
        stage_step=header["stage_step"],
        global_step=header["global_step"],
    )


def start_checkpoint(cfg: TrainConfig, plan: StagePlan, input_dim: int, seed: int,
                     params: PolicyParams | None = None) -> Checkpoint:
    shape = PolicyShape(input_dim, cfg.hidden)
    params = params or PolicyParams.init(shape, derive_seed(seed, cfg.init_seed))
    return Checkpoint(params, AdamWState.zeros(shape.size), params.theta.copy(), cfg, plan, seed)


# -- training ------------------------------------------------------------------------------------


def _batches(data: TrainSet, entry: StageEntry, seed: int, stage_index: int, batch: int):
    rows = data.rows(entry.data)
    if rows.size == 0:
        raise DataError(f"{entry.tag} needs items with view {entry.data!r}; none present")
    for epoch in range(entry.epochs):
        order = np.random.default_rng([seed, stage_index, epoch, 7]).permutation(rows)
        for k in range(0, order.size, batch):
            yield order[k : k + batch]


def stage_steps(data: TrainSet, entry: StageEntry, batch: int) -> int:
    n = data.rows(entry.data).size
    return entry.epochs * -(-n // batch)


def train_step(ck: Checkpoint, data: TrainSet, rows: np.ndarray, tag: str) -> tuple[Checkpoint, LossReport, float]:
    cfg = ck.cfg
    rng = np.random.default_rng([ck.seed, ck.stage_index, ck.stage_step, 11])
    groups = collect_groups(data, rows, ck.params, cfg, rng)
    actions = np.stack([g.actions for g in groups])
    old_lp = np.stack([g.old_logprobs for g in groups])
    adv = np.array([g.advantages for g in groups])
    correct = np.stack([g.correct for g in groups])
    shape = ck.params.shape
    theta = Tensor(ck.params.theta, requires_grad=True)
    x = data.x[rows]
    grpo = grpo_term(theta, shape, x, actions, old_lp, adv, ck.ref, cfg)
    use_cons, use_sep = uses_terms(tag)
    cons = consistency_term(theta, shape, x, data.x_pres[rows], correct, data.has_pres[rows], cfg) if use_cons else None
    sep = separation_term(theta, shape, x, data.x_abl[rows], cfg) if use_sep else None
    total = compose(tag, grpo.loss, cons and cons.loss, sep and sep.loss, cfg)
    total.backward()
    frags = {
        "l_grpo": grpo.loss.item(),
        "l_cons": cons.loss.item() if cons else None,
        "l_sep": sep.loss.item() if sep else None,
        **grpo.stats,
        **(cons.stats if cons else {}),
        **(sep.stats if sep else {}),
    }
    report = stage_objective(tag, frags, cfg)
    params, opt = adamw_update(ck.params, theta.grad, ck.opt, AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay))
    nxt = replace(ck, params=params, opt=opt, stage_step=ck.stage_step + 1, global_step=ck.global_step + 1)
    return nxt, report, float(correct.mean())


MetricRow = dict


def _row(step: int, report: LossReport, accuracy: float) -> MetricRow:
    out = {"step": step, **{k: v for k, v in asdict(report).items()}, "accuracy": accuracy}
    return {k: out[k] for k in METRIC_FIELDS}


def run_plan(ck: Checkpoint, data: TrainSet, *, stop_after: int | None = None,
             on_stage_end: Callable[[Checkpoint], None] | None = None) -> tuple[Checkpoint, list[MetricRow]]:
    """Advance ``ck`` through its remaining plan; ``stop_after`` caps total steps."""
    rows_out: list[MetricRow] = []
    if data.dim != ck.params.shape.input_dim:
        raise DataError(f"feature width {data.dim} != policy input {ck.params.shape.input_dim}")
    while not ck.finished:
        entry = ck.plan.entries[ck.stage_index]
        if ck.stage_step == 0:
            ck = replace(ck, ref=ck.params.theta.copy(), opt=AdamWState.zeros(ck.params.shape.size))
        for k, rows in enumerate(_batches(data, entry, ck.seed, ck.stage_index, ck.cfg.batch)):
            if k < ck.stage_step:
                continue
            if stop_after is not None and ck.global_step >= stop_after:
                return ck, rows_out
            ck, report, acc = train_step(ck, data, rows, entry.tag)
            rows_out.append(_row(ck.global_step, report, acc))
        ck = replace(ck, stage_index=ck.stage_index + 1, stage_step=0)
        if on_stage_end is not None:
            on_stage_end(ck)
    return ck, rows_out


def metrics_csv(rows: Iterable[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in METRIC_FIELDS])
    return buf.getvalue()


# -- evaluation ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    n: int
    accuracy: float
    kl_pres: float
    kl_abl: float
    shortcut: float
    per_template: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def evaluate(params: PolicyParams, data: TrainSet) -> EvalReport:
    """Greedy accuracy plus view KLs at temperature 1 (read-only)."""
    lp = log_softmax(logits(params, data.x), 1.0)
    lp_pres = log_softmax(logits(params, data.x_pres), 1.0)
    lp_abl = log_softmax(logits(params, data.x_abl), 1.0)
    pred = lp.argmax(axis=1)
    hit = pred == data.answers
    kl_abl = [kl_divergence(np.exp(a), np.exp(b)) for a, b in zip(lp, lp_abl)]
    kl_pres = [kl_divergence(np.exp(a), np.exp(b)) for a, b, h in zip(lp, lp_pres, data.has_pres) if h]
    per: dict[str, list[bool]] = {}
    for t, h in zip(data.templates, hit):
        per.setdefault(t, []).append(bool(h))
    return EvalReport(
        n=len(data),
        accuracy=float(hit.mean()),
        kl_pres=float(np.mean(kl_pres)) if kl_pres else 0.0,
        kl_abl=float(np.mean(kl_abl)),
        shortcut=float((lp_abl.argmax(axis=1) == data.answers).mean()),
        per_template={t: float(np.mean(v)) for t, v in sorted(per.items())},
    )


# -- curriculum -------------------------------------------------------------------------------------


@dataclass
class RunResult:
    mode: str
    checkpoint: Checkpoint
    metrics: list[MetricRow]
    stage_reports: list[tuple[str, EvalReport]]
    final: EvalReport


def run_curriculum(cfg: TrainConfig, mode: str, train: Sequence[QAItem] | TrainSet,
                   heldout: Sequence[QAItem] | TrainSet, seed: int,
                   out_dir: str | os.PathLike | None = None,
                   fcfg: FeatureConfig = FeatureConfig()) -> RunResult:
    """Train one mode from a fresh policy and evaluate after every stage."""
    run_cfg = mode_config(mode, cfg)
    if not isinstance(train, TrainSet):
        train = encode_items(train, fcfg, run_cfg, random_mask=mode == "random_mask")
    if not isinstance(heldout, TrainSet):
        heldout = encode_items(heldout, fcfg, run_cfg)
    if set(train.ids) & set(heldout.ids):
        raise DataError("held-out ids overlap the training set")
    plan = plan_for(mode, run_cfg, int(train.has_pres.sum()), len(train))
    ck = start_checkpoint(run_cfg, plan, train.dim, seed)
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reports: list[tuple[str, EvalReport]] = []

    def stage_end(c: Checkpoint) -> None:
        tag = c.plan.entries[c.stage_index - 1].tag
        reports.append((tag, evaluate(c.params, heldout)))
        if out is not None:
            save_checkpoint(c, out / f"stage{c.stage_index}_{tag}.ckpt")

    ck, rows = run_plan(ck, train, on_stage_end=stage_end)
    final = reports[-1][1]
    if out is not None:
        (out / "metrics.csv").write_text(metrics_csv(rows), encoding="utf-8")
        (out / "eval.json").write_text(final.to_json() + "\n", encoding="utf-8")
    return RunResult(mode, ck, rows, reports, final)


def sweep_coefficients(cfg: TrainConfig, coef: str, grid: Sequence[float],
                       train: Sequence[QAItem] | TrainSet, heldout: Sequence[QAItem] | TrainSet,
                       seed: int, fcfg: FeatureConfig = FeatureConfig()) -> list[tuple[float, EvalReport]]:
    """One bips run per grid value, the other coefficient pinned to 0."""
    if coef not in ("alpha", "beta"):
        raise ConfigError(f"can only sweep alpha or beta, not {coef!r}")
    if not isinstance(train, TrainSet):
        train = encode_items(train, fcfg, cfg)
    if not isinstance(heldout, TrainSet):
        heldout = encode_items(heldout, fcfg, cfg)
    other = "beta" if coef == "alpha" else "alpha"
    out = []
    for value in grid:
        point = replace(cfg, **{coef: float(value), other: 0.0})
        out.append((float(value), run_curriculum(point, "bips", train, heldout, seed).final))
    return out


def sweep_csv(coef: str, results: Sequence[tuple[float, EvalReport]]) -> str:
    lines = [f"{coef},accuracy,kl_abl,shortcut"]
    lines += [f"{v!r},{r.accuracy!r},{r.kl_abl!r},{r.shortcut!r}" for v, r in results]
    return "\n".join(lines) + "\n"
