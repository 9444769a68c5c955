"""Verifiable multiple-choice items with evidence-preserving and
evidence-ablated counterpart views.

Pipeline per item: sample a chart -> template question (oracle-checked)
-> difficulty filter against a base policy -> code-level edits -> render.
Every item gets its own sub-seed derived from ``(master seed, index)``, so
serial and parallel generation agree record for record.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from .chartdsl import (
    TEMPLATES,
    TREND_LABELS,
    Annotation,
    ChartSpec,
    Determined,
    ElementSelector,
    Panel,
    Question,
    Series,
    edit_remove_elements,
    format_number,
    oracle_answer,
    parse_chart,
    parse_number,
    serialize_chart,
    true_answer,
)
from .chartdsl.oracle import panel_peak
from .config import load_config
from .policy import (
    AnswerDistribution,
    FeatureConfig,
    MLPPolicy,
    PolicyParams,
    PolicyShape,
    sample_answer,
)
from .render import Image, RenderConfig, rasterize, read_pgm, write_pgm

N_OPTIONS = 4


class NoViableQuestion(ValueError):
    pass


class InsufficientYield(RuntimeError):
    pass


class ViewError(RuntimeError):
    """An edited view broke its oracle postcondition."""


class PolicyError(RuntimeError):
    pass


def derive_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([master, *path]).generate_state(1, dtype=np.uint64)[0])


# -- chart sampling ---------------------------------------------------------------

GRIDS = ((1, 1), (1, 2), (2, 1), (2, 2))
GRID_WEIGHTS = (3, 2, 2, 3)


def _walk(rng: random.Random, n: int, lo: int, hi: int) -> list[int]:
    style = rng.random()
    if style < 0.06:
        v = rng.randint(lo + 1, hi - 1)
        return [v] * n
    if style < 0.24:
        ys = sorted(rng.sample(range(lo, hi + 1), n))
        return ys if rng.random() < 0.5 else ys[::-1]
    ys = [rng.randint(lo + 1, hi - 1)]
    for _ in range(n - 1):
        ys.append(min(hi, max(lo, ys[-1] + rng.randint(-3, 3))))
    return ys


def random_chart(rng: random.Random) -> ChartSpec:
    """Sample a 1-4 panel chart with up to three series per panel."""
    rows, cols = rng.choices(GRIDS, weights=GRID_WEIGHTS)[0]
    n = rng.randint(5, 8)
    ylo, yhi = 0, 10
    panels = []
    sid = aid = 0
    for k in range(rows * cols):
        r, c = divmod(k, cols)
        series = []
        for _ in range(rng.randint(1, 3)):
            sid += 1
            kind = rng.choices(("line", "bar", "scatter"), weights=(7, 1.5, 1.5))[0]
            ys = _walk(rng, n, ylo, yhi)
            pts = tuple((Fraction(x), Fraction(y)) for x, y in enumerate(ys))
            series.append(Series(id=f"s{sid}", kind=kind, points=pts))
        notes = ()
        if rng.random() < 0.25:
            aid += 1
            # Corner tag; carries no data.
            notes = (Annotation(id=f"n{aid}", text=f"panel {k + 1}", x=Fraction(0), y=Fraction(yhi)),)
        panels.append(
            Panel(
                id=f"p{k + 1}",
                row=r,
                col=c,
                xrange=(Fraction(0), Fraction(n - 1)),
                yrange=(Fraction(ylo), Fraction(yhi)),
                series=tuple(series),
                annotations=notes,
            )
        )
    return ChartSpec(grid_rows=rows, grid_cols=cols, panels=tuple(panels), title="chart")


# -- question templates -----------------------------------------------------------


def _visible(spec: ChartSpec) -> list[tuple[Panel, Series]]:
    return [(p, s) for p, s in spec.iter_series() if s.visible and s.points]


def _candidates(spec: ChartSpec, template: str) -> list[tuple]:
    vis = _visible(spec)
    if template == "value_lookup":
        return [(s.id, x) for _, s in vis for x, _ in s.points]
    if template == "series_max":
        return [(s.id,) for _, s in vis]
    if template == "trend_sign":
        return [(s.id,) for _, s in vis if len(s.points) >= 2]
    if template == "compare_at_x":
        out = []
        for i, (_, a) in enumerate(vis):
            for _, b in vis[i + 1 :]:
                xs = sorted({x for x, _ in a.points} & {x for x, _ in b.points})
                out.extend((a.id, b.id, x) for x in xs)
        return out
    if template == "count_crossings":
        out = []
        for p in spec.panels:
            lines = [s for s in p.visible_series() if s.kind == "line" and len(s.points) >= 2]
            out.extend((a.id, b.id) for i, a in enumerate(lines) for b in lines[i + 1 :])
        return out
    if template == "panel_compare":
        live = [p.id for p in spec.panels if any(s.points for s in p.visible_series())]
        return [(a, b) for i, a in enumerate(live) for b in live[i + 1 :]]
    raise ValueError(template)


def _question_text(template: str, series: tuple[str, ...], panels: tuple[str, ...], x) -> str:
    xs = None if x is None else format_number(x)
    return {
        "value_lookup": lambda: f"What is the value of series {series[0]} at x = {xs}?",
        "compare_at_x": lambda: f"At x = {xs}, what is the larger of the values of series {series[0]} and {series[1]}?",
        "series_max": lambda: f"What is the maximum value of series {series[0]}?",
        "count_crossings": lambda: f"How many times do series {series[0]} and {series[1]} cross?",
        "trend_sign": lambda: f"What is the overall trend of series {series[0]}?",
        "panel_compare": lambda: f"What is the higher of the peak values of panels {panels[0]} and {panels[1]}?",
    }[template]()


def _chart_values(spec: ChartSpec) -> list[Fraction]:
    return sorted({y for _, s in _visible(spec) for _, y in s.points})


def _numeric_distractors(answer, first: Iterable, pool: Iterable, rng: random.Random) -> list | None:
    picked: list = []
    for tier in (list(first), list(pool)):
        tier = sorted(set(tier))
        rng.shuffle(tier)
        for v in tier:
            if v != answer and v not in picked:
                picked.append(v)
            if len(picked) == N_OPTIONS - 1:
                return picked
    return None


def _count_distractors(c: int) -> list[int]:
    near = ([c - 1] if c >= 1 else []) + [c + 1, c + 2, c + 3]
    return near[: N_OPTIONS - 1]


def _build(spec: ChartSpec, template: str, refs: tuple, rng: random.Random) -> Question | None:
    series: tuple[str, ...] = ()
    panels: tuple[str, ...] = ()
    x = None
    if template in ("value_lookup",):
        series, x = (refs[0],), refs[1]
    elif template == "compare_at_x":
        pair = [refs[0], refs[1]]
        rng.shuffle(pair)
        series, x = tuple(pair), refs[2]
    elif template in ("series_max", "trend_sign"):
        series = (refs[0],)
    elif template == "count_crossings":
        pair = [refs[0], refs[1]]
        rng.shuffle(pair)
        series = tuple(pair)
    else:
        pair = [refs[0], refs[1]]
        rng.shuffle(pair)
        panels = tuple(pair)
    probe = Question(template, series, panels, x)
    answer = true_answer(spec, probe)
    if answer is None:
        return None
    if template == "trend_sign":
        values = [answer] + [t for t in TREND_LABELS if t != answer]
    elif template == "count_crossings":
        values = [answer] + _count_distractors(answer)
    else:
        first: list = []
        table = spec.series_by_id()
        if template == "compare_at_x":
            first = [table[sid].value_at(x) for sid in series]
        elif template == "panel_compare":
            first = [panel_peak(spec, pid) for pid in panels]
        distractors = _numeric_distractors(answer, first, _chart_values(spec), rng)
        if distractors is None:
            return None
        values = [answer] + distractors
    order = list(range(N_OPTIONS))
    rng.shuffle(order)
    options = [None] * N_OPTIONS
    for slot, k in zip(order, range(N_OPTIONS)):
        options[slot] = values[k]
    texts = tuple(v if isinstance(v, str) else str(v) if isinstance(v, int) else format_number(v) for v in options)
    q = replace(
        probe,
        text=_question_text(template, series, panels, x),
        options=texts,
        answer_index=order[0],
    )
    if len(set(texts)) != N_OPTIONS or oracle_answer(spec, q) != Determined(q.answer_index):
        return None
    return q


def generate_questions(spec: ChartSpec, rng_seed: int, max_q: int = 1) -> list[Question]:
    """Oracle-verified questions, templates drawn uniformly among viable ones."""
    if not _visible(spec):
        raise NoViableQuestion("chart has no visible series")
    rng = random.Random(rng_seed)
    pools = {t: _candidates(spec, t) for t in TEMPLATES}
    for t in TEMPLATES:
        rng.shuffle(pools[t])
    out: list[Question] = []
    while len(out) < max_q:
        live = [t for t in TEMPLATES if pools[t]]
        if not live:
            break
        t = rng.choice(live)
        q = _build(spec, t, pools[t].pop(), rng)
        if q is None:
            continue
        out.append(q)
    if not out:
        raise NoViableQuestion("no template yields a unique answer with distinct options")
    return out


# -- evidence and views ---------------------------------------------------------------


def evidence_set(spec: ChartSpec, q: Question) -> ElementSelector:
    """Elements whose removal makes ``q`` unanswerable (all compared candidates)."""
    if q.template == "panel_compare":
        panels = spec.panel_by_id()
        series = [s.id for pid in q.panel_ids for s in panels[pid].visible_series()]
        return ElementSelector.of(panels=q.panel_ids, series=series)
    return ElementSelector.of(series=q.series_ids)


def make_preserving_view(spec: ChartSpec, q: Question) -> ChartSpec:
    view = edit_remove_elements(spec, evidence_set(spec, q), "preserve_selected")
    if oracle_answer(view, q) != Determined(q.answer_index):
        raise ViewError(f"preserving view lost the answer for {q.text!r}")
    return view


def make_ablated_view(spec: ChartSpec, q: Question) -> ChartSpec:
    view = edit_remove_elements(spec, evidence_set(spec, q), "ablate_selected")
    if oracle_answer(view, q).determined:
        raise ViewError(f"ablated view still answers {q.text!r}")
    return view


# -- difficulty filtering ---------------------------------------------------------------


class AnswerPolicy(Protocol):
    def __call__(self, img: Image, q: Question, chart: ChartSpec, temperature: float) -> AnswerDistribution: ...


@dataclass(frozen=True)
class FilterResult:
    keep: bool
    passes: int
    answers: tuple[int, ...] = ()


def difficulty_filter(
    item: "QAItem",
    policy: AnswerPolicy,
    k: int = 8,
    temperature: float = 0.85,
    rng_seed: int = 0,
) -> FilterResult:
    """Sample ``k`` answers on the original view; discard iff all are correct."""
    if item.image is None:
        raise ValueError(f"{item.id}: original image not rendered")
    question = item.question
    try:
        dist = policy(item.image, question, item.chart, temperature)
    except Exception as exc:  # noqa: BLE001 - surfaced as a policy failure
        raise PolicyError(str(exc)) from exc
    rng = np.random.default_rng(rng_seed)
    answers = tuple(sample_answer(dist, rng)[0] for _ in range(k))
    passes = sum(a == question.answer_index for a in answers)
    return FilterResult(keep=passes < k, passes=passes, answers=answers)


def perfect_policy(img: Image, q: Question, chart: ChartSpec, temperature: float = 1.0) -> AnswerDistribution:
    probs = [0.0] * N_OPTIONS
    probs[q.answer_index] = 1.0
    return AnswerDistribution.from_probs(probs, temperature)


def uniform_policy(img: Image, q: Question, chart: ChartSpec, temperature: float = 1.0) -> AnswerDistribution:
    return AnswerDistribution.uniform()


# -- dataset ------------------------------------------------------------------------------


@dataclass(frozen=True)
class GenConfig:
    target: int = 500
    pres_ratio: float = 0.54
    k: int = 8
    temperature: float = 0.85
    max_attempts_factor: int = 20
    base_policy: str = "init"
    policy_seed: int = 0
    hidden: int = 64
    width: int = 64
    height: int = 64
    margin: int = 4
    id_prefix: str = "item"

    @classmethod
    def from_file(cls, path, **overrides) -> "GenConfig":
        return load_config(cls, path, **overrides)

    @property
    def render(self) -> RenderConfig:
        return RenderConfig(width=self.width, height=self.height, margin=self.margin)

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(width=self.width, height=self.height)


@dataclass
class QAItem:
    id: str
    chart: ChartSpec
    question: Question
    abl: ChartSpec
    pres: ChartSpec | None = None
    image: Image | None = None
    abl_image: Image | None = None
    pres_image: Image | None = None
    difficulty: int = 0
    seed: int = 0


@dataclass
class Manifest:
    records: list[QAItem]
    counters: dict[str, int] = field(default_factory=dict)


STAGES = ("generated", "validated", "filtered", "edited")


def base_policy(cfg: GenConfig) -> AnswerPolicy:
    if cfg.base_policy == "uniform":
        return uniform_policy
    shape = PolicyShape(cfg.features.dim, cfg.hidden)
    if cfg.base_policy == "zero":
        return MLPPolicy(PolicyParams.zeros(shape), cfg.features)
    if cfg.base_policy == "init":
        return MLPPolicy(PolicyParams.init(shape, cfg.policy_seed), cfg.features)
    raise ValueError(f"unknown base policy {cfg.base_policy!r}")


def make_item(index: int, cfg: GenConfig, master_seed: int, policy: AnswerPolicy,
              counters: dict[str, int] | None = None) -> QAItem | None:
    """Run one item through the funnel; ``None`` when a stage rejects it."""
    counters = {} if counters is None else counters
    seed = derive_seed(master_seed, index)
    chart = random_chart(random.Random(seed))
    counters["generated"] = counters.get("generated", 0) + 1
    try:
        (q,) = generate_questions(chart, seed, 1)
    except NoViableQuestion:
        return None
    counters["validated"] = counters.get("validated", 0) + 1
    rcfg = cfg.render
    item = QAItem(id=f"{cfg.id_prefix}{index:05d}", chart=chart, question=q, abl=chart,
                  image=rasterize(chart, rcfg), seed=seed)
    verdict = difficulty_filter(item, policy, cfg.k, cfg.temperature, derive_seed(seed, 2))
    if not verdict.keep:
        return None
    counters["filtered"] = counters.get("filtered", 0) + 1
    item.difficulty = verdict.passes
    item.abl = make_ablated_view(chart, q)
    item.abl_image = rasterize(item.abl, rcfg)
    if item.abl_image == item.image:
        # Evidence left no visible ink, so the original view was not answerable either.
        return None
    counters["edited"] = counters.get("edited", 0) + 1
    if random.Random(derive_seed(seed, 1)).random() < cfg.pres_ratio:
        item.pres = make_preserving_view(chart, q)
        item.pres_image = rasterize(item.pres, rcfg)
        counters["with_pres"] = counters.get("with_pres", 0) + 1
    return item


def build_dataset(cfg: GenConfig, rng_seed: int, policy: AnswerPolicy | None = None) -> Manifest:
    policy = policy or base_policy(cfg)
    counters = {name: 0 for name in (*STAGES, "with_pres")}
    records: list[QAItem] = []
    limit = cfg.target * cfg.max_attempts_factor
    index = 0
    while len(records) < cfg.target:
        if index >= limit:
            raise InsufficientYield(
                f"only {len(records)} of {cfg.target} items after {index} attempts"
            )
        item = make_item(index, cfg, rng_seed, policy, counters)
        if item is not None:
            records.append(item)
        index += 1
    return Manifest(records, counters)


# -- manifest I/O --------------------------------------------------------------------------


def question_to_json(q: Question) -> dict:
    return {"template": q.template, **q.params(), "text": q.text}


def question_from_json(obj: dict, options, answer_index: int) -> Question:
    return Question(
        template=obj["template"],
        series_ids=tuple(obj["series"]),
        panel_ids=tuple(obj["panels"]),
        x=None if obj["x"] is None else parse_number(obj["x"]),
        text=obj["text"],
        options=tuple(options),
        answer_index=int(answer_index),
    )


def record_json(item: QAItem) -> dict:
    base = f"{item.id}"
    return {
        "id": item.id,
        "dsl_path": f"charts/{base}.dsl",
        "question": question_to_json(item.question),
        "options": list(item.question.options),
        "answer_index": item.question.answer_index,
        "image": f"images/{base}.pgm",
        "pres_image": None if item.pres is None else f"images/{base}_pres.pgm",
        "abl_image": f"images/{base}_abl.pgm",
        "difficulty": item.difficulty,
        "seed": item.seed,
    }


def write_manifest(manifest: Manifest, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    (out / "charts").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for item in manifest.records:
        rec = record_json(item)
        (out / rec["dsl_path"]).write_text(serialize_chart(item.chart), encoding="utf-8")
        write_pgm(item.image, out / rec["image"])
        write_pgm(item.abl_image, out / rec["abl_image"])
        if rec["pres_image"] is not None:
            write_pgm(item.pres_image, out / rec["pres_image"])
        lines.append(json.dumps(rec, separators=(",", ":")))
    path = out / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "counters.json").write_text(json.dumps(manifest.counters, indent=1) + "\n", encoding="utf-8")
    return path


def load_manifest(
    path: str | os.PathLike,
    views: Iterable[str] = ("image", "pres", "abl"),
    reader: Callable[[Path], Image] = read_pgm,
) -> Manifest:
    """Read a manifest; only the requested image views touch the disk."""
    path = Path(path)
    root = path.parent
    views = set(views)
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        chart = parse_chart((root / rec["dsl_path"]).read_text(encoding="utf-8"))
        q = question_from_json(rec["question"], rec["options"], rec["answer_index"])
        has_pres = rec["pres_image"] is not None
        records.append(
            QAItem(
                id=rec["id"],
                chart=chart,
                question=q,
                abl=make_ablated_view(chart, q),
                pres=make_preserving_view(chart, q) if has_pres else None,
                image=reader(root / rec["image"]) if "image" in views else None,
                abl_image=reader(root / rec["abl_image"]) if "abl" in views else None,
                pres_image=reader(root / rec["pres_image"]) if "pres" in views and has_pres else None,
                difficulty=rec["difficulty"],
                seed=rec["seed"],
            )
        )
    counters_path = root / "counters.json"
    counters = json.loads(counters_path.read_text()) if counters_path.exists() else {}
    return Manifest(records, counters)
