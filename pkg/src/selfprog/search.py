"""The greedy episode loop: train refiner, propose, evaluate, adopt."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dsl import CnnSpec, ModelSpec, TransformerSpec, design_params, initial_cnn_spec, initial_transformer_spec, parse, render
from .harness import CandidateReport, ClassifierTask, EvalConfig, Evaluator
from .nn.network import cnn_param_count
from .nn.seq2seq import CharVocab, TokenPairs, build_seq2seq, seq2seq_param_count
from .nn.training import TrainConfig, train
from .refiners import ExternalRefiner, LearnedRefiner, OracleRefiner

log = logging.getLogger(__name__)

KEEP_ORIGINAL = -1
DEFAULT_EPISODES = {"selfprog": 10, "classifier": 5}
BACKENDS = ("oracle", "learned", "external")


def select_best(original_metric: Optional[float], metrics: Sequence[Optional[float]], mode: str = "min") -> int:
    """Index of the adopted candidate, or ``KEEP_ORIGINAL``.

    Missing or non-finite metrics are invalid.  The best valid candidate
    (lowest index on ties) is adopted unless it is strictly worse than the
    original.
    """
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be 'min' or 'max', not {mode!r}")
    sign = 1.0 if mode == "min" else -1.0
    best, best_val = KEEP_ORIGINAL, math.inf
    for i, m in enumerate(metrics):
        if m is None or not math.isfinite(m):
            continue
        if sign * m < best_val:
            best, best_val = i, sign * m
    if best == KEEP_ORIGINAL:
        return KEEP_ORIGINAL
    if original_metric is not None and math.isfinite(original_metric) and best_val > sign * original_metric:
        return KEEP_ORIGINAL
    return best


@dataclass
class LoopConfig:
    track: str = "selfprog"
    n_candidates: int = 8
    n_episodes: Optional[int] = None
    refiner: str = "oracle"
    refiner_url: str = ""
    refiner_timeout: float = 30.0
    refiner_epochs: int = 1
    refiner_pairs: Optional[int] = None
    temperature: float = 1.0
    top_k: int = 16
    seed: int = 0
    resample_eval: bool = False
    workers: int = 1
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.n_episodes is None:
            self.n_episodes = DEFAULT_EPISODES[self.track]
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be at least 1")
        if self.n_episodes < 0:
            raise ValueError("n_episodes must be non-negative")
        if self.refiner not in BACKENDS:
            raise ValueError(f"unknown refiner backend {self.refiner!r}")
        if self.refiner == "external" and not self.refiner_url:
            raise ValueError("the external refiner needs a URL")
        if self.eval.track != self.track:
            raise ValueError("evaluation track does not match loop track")

    @property
    def mode(self) -> str:
        return "min" if self.track == "selfprog" else "max"


@dataclass
class EpisodeLog:
    episode: int
    seed: int
    source_spec: str
    original: dict
    reports: list[dict]
    adopted_index: int
    adopted_spec: str
    adopted_metric: Optional[float]
    adopted_loss_curve: list[float]
    design_params: dict
    param_count: int
    refiner: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeLog":
        return cls(**json.loads(line))


@dataclass
class SearchResult:
    final_spec: ModelSpec
    logs: list[EpisodeLog]
    timings: list[dict] = field(default_factory=list)


def episode_seed(run_seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([run_seed, episode]).generate_state(1)[0])


def spec_param_count(spec: ModelSpec, vocab_size: int = CharVocab().size) -> int:
    if isinstance(spec, TransformerSpec):
        return seq2seq_param_count(spec, vocab_size)
    return cnn_param_count(spec)


def write_logs(logs: Sequence[EpisodeLog], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for entry in logs:
            f.write(entry.to_json() + "\n")


def read_logs(path) -> list[EpisodeLog]:
    with open(path, encoding="utf-8") as f:
        return [EpisodeLog.from_json(line) for line in f if line.strip()]


def train_learned_refiner(
    spec: TransformerSpec,
    pairs: TokenPairs,
    *,
    epochs: int,
    seed: int,
    max_len: int,
    temperature: float = 1.0,
    top_k: int = 16,
    **parse_context,
) -> tuple[LearnedRefiner, list[float]]:
    """Fresh seq2seq for ``spec`` trained on ``pairs``; returns refiner and step losses."""
    vocab = CharVocab()
    model = build_seq2seq(spec, vocab.size, max_len, seed=seed)
    report = train(model, pairs, TrainConfig(epochs=epochs, seed=seed))
    return LearnedRefiner(model, vocab, temperature, top_k, **parse_context), report.step_losses


def train_cnn_refiner(config: LoopConfig, pairs: Optional[TokenPairs], **context) -> tuple[LearnedRefiner, list[float]]:
    """The classifier track's refiner: the initial transformer trained on CNN pairs."""
    if pairs is None:
        raise ValueError("the learned refiner needs refinement pairs")
    return train_learned_refiner(
        initial_transformer_spec(config.eval.d_model), pairs, epochs=config.refiner_epochs, seed=config.seed,
        max_len=config.eval.max_len, temperature=config.temperature, top_k=config.top_k, **context,
    )


def _refiner_summary(backend: str, losses: Sequence[float], extra: Optional[dict] = None) -> dict:
    out = {"backend": backend}
    if losses:
        tail = losses[-min(50, len(losses)):]
        out.update(
            steps=len(losses),
            first_loss=float(losses[0]),
            final_loss=math.fsum(tail) / len(tail),
            losses=[float(v) for v in losses],
        )
    if extra:
        out.update(extra)
    return out


def _static_refiner(config: LoopConfig, **context):
    if config.refiner == "external":
        return ExternalRefiner(config.refiner_url, config.refiner_timeout, config.temperature)
    return OracleRefiner(**context)


def _loop(
    config: LoopConfig,
    initial: ModelSpec,
    evaluator: Evaluator,
    refiner_for_episode: Callable[[ModelSpec, int], tuple[object, dict]],
    payload_for_episode: Callable[[int], object],
    context: dict,
    on_episode: Optional[Callable[[EpisodeLog], None]] = None,
) -> SearchResult:
    current = initial
    logs: list[EpisodeLog] = []
    for ep in range(config.n_episodes):
        seed = episode_seed(config.seed, ep)
        ev = evaluator if not config.resample_eval else evaluator.with_payload(payload_for_episode(seed))
        source = render(current)
        refiner, refiner_info = refiner_for_episode(current, seed)
        texts = refiner.refine(source, config.n_candidates, seed)
        if len(texts) != config.n_candidates:
            raise RuntimeError(f"refiner returned {len(texts)} candidates, expected {config.n_candidates}")
        original = ev.evaluate([source])[0]
        reports = ev.evaluate(texts)
        idx = select_best(original.metric(config.track), [r.metric(config.track) for r in reports], config.mode)
        chosen: CandidateReport = original if idx == KEEP_ORIGINAL else reports[idx]
        if idx != KEEP_ORIGINAL:
            current = parse(chosen.candidate_text, **context)
        entry = EpisodeLog(
            episode=ep,
            seed=seed,
            source_spec=source,
            original=original.to_dict(),
            reports=[r.to_dict() for r in reports],
            adopted_index=idx,
            adopted_spec=render(current),
            adopted_metric=chosen.metric(config.track),
            adopted_loss_curve=list(chosen.loss_curve),
            design_params=design_params(current),
            param_count=spec_param_count(current),
            refiner=refiner_info,
        )
        log.info(
            "episode %d: adopted %s metric=%s valid=%d/%d",
            ep, "original" if idx == KEEP_ORIGINAL else f"candidate {idx}",
            entry.adopted_metric, sum(r.valid for r in reports), len(reports),
        )
        logs.append(entry)
        if on_episode is not None:
            on_episode(entry)
    return SearchResult(current, logs, evaluator.timings)


def run_selfprog(
    config: LoopConfig,
    pairs: TokenPairs,
    initial: Optional[TransformerSpec] = None,
    on_episode: Optional[Callable[[EpisodeLog], None]] = None,
) -> SearchResult:
    """Self-programming: the refiner is the network the current spec defines."""
    ev_cfg = config.eval
    context = {"d_model": ev_cfg.d_model}
    initial = initial or initial_transformer_spec(ev_cfg.d_model)
    train_pairs = pairs if config.refiner_pairs is None else pairs.head(config.refiner_pairs)

    def payload_for_episode(seed):
        order = np.random.default_rng(seed).permutation(len(pairs))[: ev_cfg.subset_size]
        return pairs.take(np.sort(order))

    def refiner_for_episode(spec, seed):
        if config.refiner != "learned":
            refiner = _static_refiner(config, **context)
            return refiner, _refiner_summary(config.refiner, [])
        refiner, losses = train_learned_refiner(
            spec, train_pairs, epochs=config.refiner_epochs, seed=seed, max_len=ev_cfg.max_len,
            temperature=config.temperature, top_k=config.top_k, **context,
        )
        return refiner, _refiner_summary("learned", losses)

    evaluator = Evaluator(pairs, ev_cfg, config.workers)
    return _loop(config, initial, evaluator, refiner_for_episode, payload_for_episode, context, on_episode)


def run_classifier_search(
    config: LoopConfig,
    task: ClassifierTask,
    refiner_pairs: Optional[TokenPairs] = None,
    initial: Optional[CnnSpec] = None,
    evaluator: Optional[Evaluator] = None,
    on_episode: Optional[Callable[[EpisodeLog], None]] = None,
    refiner: Optional[LearnedRefiner] = None,
) -> SearchResult:
    """Program another network: evolve a CNN classifier by held-out accuracy.

    The learned refiner is trained once per run on ``refiner_pairs``
    unless a trained ``refiner`` is passed in.
    """
    context = {"input_shape": task.input_shape, "num_classes": task.num_classes}
    initial = initial or initial_cnn_spec(task.input_shape, task.num_classes)
    if config.refiner == "learned" and refiner is not None:
        summary = _refiner_summary("learned", [], {"pretrained": True})
    elif config.refiner == "learned":
        refiner, losses = train_cnn_refiner(config, refiner_pairs, **context)
        summary = _refiner_summary("learned", losses)
    else:
        refiner = _static_refiner(config, **context)
        summary = _refiner_summary(config.refiner, [])

    def payload_for_episode(seed):
        pool = np.concatenate([task.train_idx, task.eval_idx])
        order = np.random.default_rng(seed).permutation(pool)
        n_train = len(task.train_idx)
        return ClassifierTask(task.x, task.y, task.num_classes, np.sort(order[:n_train]), np.sort(order[n_train:]))

    evaluator = evaluator or Evaluator(task, config.eval, config.workers)
    # the refiner is trained once, so only the first episode carries its curve
    first = {"done": False}

    def refiner_for_episode(spec, seed):
        if first["done"]:
            return refiner, {"backend": summary["backend"]}
        first["done"] = True
        return refiner, summary

    return _loop(config, initial, evaluator, refiner_for_episode, payload_for_episode, context, on_episode)


SWEEP_CANDIDATES = (2, 4, 8, 16)
SWEEP_EPISODES = (2, 4, 8)


@dataclass(frozen=True)
class SweepRow:
    n_candidates: int
    n_episodes: int
    total_candidates: int
    seed: int
    accuracy: Optional[float]
    param_count: int


def run_sweep(
    config: LoopConfig,
    task: ClassifierTask,
    candidates: Sequence[int] = SWEEP_CANDIDATES,
    episodes: Sequence[int] = SWEEP_EPISODES,
    seeds: Sequence[int] = (0,),
    refiner_pairs: Optional[TokenPairs] = None,
    refiner: Optional[LearnedRefiner] = None,
) -> list[SweepRow]:
    """Adopted accuracy over a candidates x episodes grid.

    Episode seeds do not depend on the episode budget, so a run of E
    episodes is a prefix of a longer run; one run per (n, seed) with
    ``max(episodes)`` episodes yields every cell of its row.  A learned
    refiner is trained once and shared by every cell.
    """
    if config.track != "classifier":
        raise ValueError("the sweep runs the classifier track")
    if config.refiner == "learned" and refiner is None:
        context = {"input_shape": task.input_shape, "num_classes": task.num_classes}
        refiner, _ = train_cnn_refiner(config, refiner_pairs, **context)
    evaluator = Evaluator(task, config.eval, config.workers)
    rows = []
    for seed in seeds:
        for n in candidates:
            cfg = LoopConfig(**{**_shallow(config), "n_candidates": n, "n_episodes": max(episodes), "seed": seed})
            result = run_classifier_search(
                cfg, task, evaluator=evaluator if not cfg.resample_eval else None, refiner=refiner,
            )
            for e in episodes:
                entry = result.logs[e - 1]
                rows.append(SweepRow(n, e, n * e, seed, entry.adopted_metric, entry.param_count))
    return rows


def _shallow(config: LoopConfig) -> dict:
    return {f: getattr(config, f) for f in config.__dataclass_fields__}
