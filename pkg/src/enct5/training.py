"""Span-corruption pretraining, fine-tuning of the three variants, and evaluation."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .adafactor import AdafactorState, adafactor_step
from .checkpoint import Checkpoint, SurgeryReport, save, surgery_1dect5, surgery_enct5
from .metrics import compute_metrics, task_score
from .model import ModelConfig, ParameterStore, decoder_forward, encoder_forward, forward, init_params, predict_class
from .packing import PackedBatch, Segment, collate, pack
from .tasks import TaskData, TaskError, TaskSpec, topic_words
from .tensor import Rng, Tensor
from .tokenizer import EOS_ID, Tokenizer

log = logging.getLogger(__name__)

SCORE_GRID = tuple(f"{k / 5:.1f}" for k in range(26))


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_input_len: int = 64
    max_target_len: int = 8
    learning_rate: float = 1e-3
    steps: int = 2000
    seed: int = 0
    packing_enabled: bool = True
    eval_every: int = 100
    checkpoint_every: int = 500
    selection: str = "best"
    corruption_rate: float = 0.15
    mean_span_len: float = 3.0
    num_slots: int = 0
    eval_batch_size: int = 64
    dtype: str = "float64"

    def __post_init__(self) -> None:
        for name in ("batch_size", "max_input_len", "max_target_len", "steps", "eval_every",
                     "checkpoint_every", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.selection not in ("best", "last"):
            raise ValueError("selection must be 'best' or 'last'")
        if not 0.0 < self.corruption_rate < 1.0:
            raise ValueError("corruption_rate must lie in (0, 1)")
        if self.mean_span_len < 1:
            raise ValueError("mean_span_len must be >= 1")
        if self.num_slots < 0:
            raise ValueError("num_slots must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PRESETS = {
    # the published fine-tuning setup; not runnable at desk scale
    "published": TrainConfig(batch_size=2048, max_input_len=512, max_target_len=62, learning_rate=1e-3,
                         steps=50_000, eval_every=1000, checkpoint_every=5000),
    "desk": TrainConfig(batch_size=32, max_input_len=64, max_target_len=8, learning_rate=1e-3, steps=2000),
}


def default_tokenizer() -> Tokenizer:
    return Tokenizer(topic_words() + ["majority:", "match:", "score:"])


@contextlib.contextmanager
def precision(dtype: str) -> Iterator[None]:
    prev = T.get_default_dtype()
    T.set_default_dtype(np.dtype(dtype))
    try:
        yield
    finally:
        T.set_default_dtype(prev)


def cast_params(params: ParameterStore, dtype: str) -> ParameterStore:
    if all(t.dtype == np.dtype(dtype) for t in params.values()):
        return params
    return ParameterStore({k: T.parameter(v.data.astype(dtype), name=k) for k, v in params.items()})


# -- span corruption -----------------------------------------------------------

def random_spans_noise_mask(length: int, rng: Rng, corruption_rate: float, mean_span_len: float,
                            max_spans: int | None = None) -> np.ndarray:
    """Boolean noise mask made of alternating clean/noise runs, clean first."""
    num_noise = int(round(length * corruption_rate))
    num_noise = min(num_noise, length - 1)
    if num_noise <= 0:
        return np.zeros(length, dtype=bool)
    num_spans = max(1, int(round(num_noise / mean_span_len)))
    num_spans = min(num_spans, num_noise, length - num_noise)
    if max_spans is not None:
        num_spans = min(num_spans, max_spans)

    def split(total: int, parts: int) -> np.ndarray:
        # random composition of `total` into `parts` positive integers
        cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False)) if parts > 1 else []
        return np.diff(np.concatenate([[0], cuts, [total]])).astype(int)

    noise_lens = split(num_noise, num_spans)
    clean_lens = split(length - num_noise, num_spans)
    mask = np.zeros(length, dtype=bool)
    at = 0
    for c, n in zip(clean_lens, noise_lens):
        at += c
        mask[at:at + n] = True
        at += n
    return mask


def apply_noise_mask(tokens: Sequence[int], mask: Sequence[bool], sentinel: Callable[[int], int],
                     eos: int = EOS_ID) -> tuple[list[int], list[int]]:
    """Replace each noise run by one sentinel; the target lists sentinel + run, then ``eos``."""
    inputs: list[int] = []
    targets: list[int] = []
    k = 0
    prev = False
    for tok, m in zip(tokens, mask):
        if m:
            if not prev:
                inputs.append(sentinel(k))
                targets.append(sentinel(k))
                k += 1
            targets.append(int(tok))
        else:
            inputs.append(int(tok))
        prev = bool(m)
    targets.append(eos)
    return inputs, targets


def span_corrupt(tokens: Sequence[int], rng: Rng, tokenizer: Tokenizer, corruption_rate: float = 0.15,
                 mean_span_len: float = 3.0) -> tuple[list[int], list[int]]:
    tokens = [int(t) for t in tokens]
    if len(tokens) < 2:
        return tokens, [EOS_ID]
    mask = random_spans_noise_mask(len(tokens), rng, corruption_rate, mean_span_len, tokenizer.num_sentinels)
    return apply_noise_mask(tokens, mask, tokenizer.sentinel)


def reconstruct(inputs: Sequence[int], targets: Sequence[int], tokenizer: Tokenizer) -> list[int]:
    """Undo :func:`span_corrupt` by splicing target spans back at their sentinels."""
    spans: dict[int, list[int]] = {}
    current = None
    for t in targets:
        if t == EOS_ID:
            break
        if tokenizer.is_sentinel(t):
            current = t
            spans[t] = []
        elif current is not None:
            spans[current].append(t)
    out: list[int] = []
    for t in inputs:
        out.extend(spans[t] if tokenizer.is_sentinel(t) else [t])
    return out


# -- batching ------------------------------------------------------------------

@dataclass
class Encoded:
    inputs: list[int]
    targets: list[int] | None = None
    label: float | None = None


class ExampleStream:
    """Endless stream over a dataset, reshuffled every epoch from one seed."""

    def __init__(self, items: Sequence, seed: int, transform: Callable | None = None) -> None:
        if not items:
            raise ValueError("empty dataset")
        self.items = items
        self.rng = Rng([seed, 7])
        self.transform = transform
        self._order: list[int] = []
        self._pending = None
        self.epoch = 0

    def peek(self):
        if self._pending is None:
            if not self._order:
                self._order = [int(i) for i in self.rng.permutation(len(self.items))][::-1]
                self.epoch += 1
            item = self.items[self._order.pop()]
            self._pending = self.transform(item, self.rng) if self.transform else item
        return self._pending

    def pop(self):
        item = self.peek()
        self._pending = None
        return item


def plan_rows_from_stream(stream: ExampleStream, cfg: TrainConfig, packing: bool,
                          use_targets: bool, max_segments: int | None = None) -> list[list]:
    """Fill ``batch_size`` rows first-fit from the stream; returns rows of items."""
    rows: list[list] = []
    used = used_t = 0
    while True:
        item = stream.peek()
        n = len(item.inputs)
        nt = len(item.targets) if use_targets else 0
        if n > cfg.max_input_len or nt > cfg.max_target_len:
            raise ValueError(f"example longer than configured limits ({n}, {nt})")
        fits = (packing and rows and used + n <= cfg.max_input_len and used_t + nt <= cfg.max_target_len
                and (max_segments is None or len(rows[-1]) < max_segments))
        if fits:
            rows[-1].append(stream.pop())
            used += n
            used_t += nt
        elif len(rows) < cfg.batch_size:
            rows.append([stream.pop()])
            used, used_t = n, nt
        else:
            return rows


def layout(config: ModelConfig, rows: Sequence[Sequence[Encoded]], cfg: TrainConfig,
           weights: Sequence[Sequence[int]] | None = None) -> PackedBatch:
    """Turn planned rows into arrays for ``config``'s variant."""
    def w(b, s):
        return 1 if weights is None else weights[b][s]

    if config.variant == "enct5":
        segs = [[Segment(e.inputs, label=e.label, weight=w(b, s)) for s, e in enumerate(r)]
                for b, r in enumerate(rows)]
        return collate(segs, cfg.max_input_len, num_slots=cfg.num_slots or None,
                       regression=config.task_kind == "regression")
    segs = [[Segment(e.inputs, targets=e.targets, weight=w(b, s)) for s, e in enumerate(r)]
            for b, r in enumerate(rows)]
    return collate(segs, cfg.max_input_len, max_target_len=cfg.max_target_len)


def compute_loss(config: ModelConfig, params, batch: PackedBatch) -> Tensor:
    logits = forward(config, params, batch)
    if config.variant == "enct5":
        if config.task_kind == "regression":
            return T.mse_masked(logits[..., 1], batch.labels, batch.label_weights)
        return T.cross_entropy_masked(logits, batch.labels, batch.label_weights)
    return T.cross_entropy_masked(logits, batch.decoder_target_ids, batch.decoder_weights)


def gradients(config: ModelConfig, params: ParameterStore, batch: PackedBatch) -> tuple[float, dict[str, np.ndarray]]:
    params.zero_grad()
    loss = compute_loss(config, params, batch)
    T.backward(loss)
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    params.zero_grad()
    return float(loss.data), grads


def train_step(config: ModelConfig, params: ParameterStore, batch: PackedBatch, state: AdafactorState,
               lr: float) -> float:
    loss, grads = gradients(config, params, batch)
    if not math.isfinite(loss):
        raise DivergenceError(f"loss is {loss} at step {state.step + 1}")
    adafactor_step(params, grads, state, lr)
    return loss


def _summary(times: list[float]) -> dict:
    if not times:
        return {"steps": 0}
    a = np.asarray(times)
    return {"steps": len(times), "mean_s": float(a.mean()), "median_s": float(np.median(a)),
            "total_s": float(a.sum())}


# -- pretraining ---------------------------------------------------------------

@dataclass
class PretrainResult:
    config: ModelConfig
    params: ParameterStore
    losses: list[tuple[int, float]]
    checkpoints: list[Path] = field(default_factory=list)
    step_times: list[float] = field(default_factory=list)
    examples_seen: int = 0


def pretrain(cfg: TrainConfig, model_config: ModelConfig, corpus: Sequence[Sequence[int]],
             tokenizer: Tokenizer, out_dir: str | Path | None = None,
             params: ParameterStore | None = None) -> PretrainResult:
    """Train the full encoder-decoder on span-corrupted corpus lines."""
    if model_config.variant != "t5":
        raise ValueError("pretraining uses the t5 variant")
    limit = cfg.max_input_len - 1
    lines = [list(map(int, s[:limit])) for s in corpus if len(s) > 0]

    def corrupt(tokens, rng):
        inp, tgt = span_corrupt(tokens, rng, tokenizer, cfg.corruption_rate, cfg.mean_span_len)
        return Encoded(inp + [EOS_ID], tgt[:cfg.max_target_len - 1] + [EOS_ID] if len(tgt) > cfg.max_target_len else tgt)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    with precision(cfg.dtype):
        params = cast_params(params if params is not None else init_params(model_config, cfg.seed), cfg.dtype)
        stream = ExampleStream(lines, cfg.seed, corrupt)
        state = AdafactorState()
        result = PretrainResult(model_config, params, [])
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            rows = plan_rows_from_stream(stream, cfg, cfg.packing_enabled, use_targets=True)
            batch = layout(model_config, rows, cfg)
            loss = train_step(model_config, params, batch, state, cfg.learning_rate)
            result.step_times.append(time.perf_counter() - t0)
            result.examples_seen += sum(len(r) for r in rows)
            result.losses.append((step, loss))
            if step % cfg.eval_every == 0:
                log.info("pretrain step %d loss %.4f", step, loss)
            if out is not None and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
                path = out / f"ckpt_{step:06d}.bin"
                save(path, params, model_config, cfg.seed)
                result.checkpoints.append(path)
    return result


# -- fine-tuning ---------------------------------------------------------------

def format_score(y: float) -> str:
    """Regression targets as text for the encoder-decoder variants (0.2 grid on [0, 5])."""
    return f"{min(max(round(float(y) * 5) / 5, 0.0), 5.0):.1f}"


def target_text(spec: TaskSpec, label) -> str:
    return format_score(label) if spec.kind == "regression" else str(label)


def encode_examples(spec: TaskSpec, examples, tokenizer: Tokenizer, variant: str,
                    max_input_len: int) -> list[Encoded]:
    out = []
    for ex in examples:
        ids = tokenizer.encode(spec.render(ex))
        if len(ids) > max_input_len:
            ids = ids[:max_input_len - 1] + [EOS_ID]
        if variant == "enct5":
            label = float(ex.label) if spec.kind == "regression" else spec.class_id(ex.label)
            out.append(Encoded(ids, label=label))
        else:
            if spec.kind == "classification":
                spec.class_id(ex.label)
            out.append(Encoded(ids, targets=tokenizer.encode(target_text(spec, ex.label))))
    return out


def prepare_model(variant: str, init: Checkpoint | None, spec: TaskSpec,
                  model_config: ModelConfig | None, seed: int) -> tuple[ModelConfig, ParameterStore, SurgeryReport | None]:
    """Build the fine-tuning start point: surgery on a T5 checkpoint, or random init."""
    if init is None:
        if model_config is None:
            raise ValueError("random initialisation needs a model config")
        cfg = model_config.replace(variant=variant)
        if variant == "1dect5":
            cfg = cfg.replace(num_decoder_layers=1)
        if variant == "enct5":
            cfg = cfg.replace(num_classes=max(spec.num_classes, 1), task_kind=spec.kind)
        return cfg, init_params(cfg, seed), None
    src = init.config.variant
    if variant == src and variant != "enct5":
        return init.config, init.params.copy(), None
    if variant == "enct5":
        if src == "enct5":
            return init.config, init.params.copy(), None
        ckpt, report = surgery_enct5(init, max(spec.num_classes, 1), spec.kind, seed)
        return ckpt.config, ckpt.params, report
    if variant == "1dect5" and src == "t5":
        ckpt, report = surgery_1dect5(init)
        return ckpt.config, ckpt.params, report
    raise ValueError(f"cannot start a {variant} run from a {src} checkpoint")


@dataclass
class FinetuneResult:
    config: ModelConfig
    params: ParameterStore
    history: list[dict]
    best_step: int
    best_score: float | None
    report: SurgeryReport | None = None
    step_times: list[float] = field(default_factory=list)
    final_params: ParameterStore | None = None

    def timing(self) -> dict:
        return _summary(self.step_times)


def finetune(cfg: TrainConfig, variant: str, init: Checkpoint | None, task: TaskData, tokenizer: Tokenizer,
             model_config: ModelConfig | None = None, eval_split: str = "validation",
             on_step: Callable[[int, float], None] | None = None) -> FinetuneResult:
    """Fine-tune every trainable weight of ``variant`` on ``task``; keep the best validation checkpoint."""
    spec = task.spec
    with precision(cfg.dtype):
        config, params, report = prepare_model(variant, init, spec, model_config, cfg.seed)
        params = cast_params(params, cfg.dtype)
        train = encode_examples(spec, task["train"], tokenizer, variant, cfg.max_input_len)
        stream = ExampleStream(train, cfg.seed)
        state = AdafactorState()
        history: list[dict] = []
        best_score, best_step, best_params = None, 0, None
        times: list[float] = []
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            rows = plan_rows_from_stream(stream, cfg, cfg.packing_enabled, use_targets=variant != "enct5",
                                         max_segments=config.max_segments)
            batch = layout(config, rows, cfg)
            loss = train_step(config, params, batch, state, cfg.learning_rate)
            times.append(time.perf_counter() - t0)
            if on_step is not None:
                on_step(step, loss)
            row = {"step": step, "loss": loss}
            if step % cfg.eval_every == 0 or step == cfg.steps:
                bundle = evaluate(config, params, task, eval_split, tokenizer, cfg.max_input_len, cfg.eval_batch_size)
                row.update({k: v for k, v in bundle.items() if isinstance(v, float)})
                if best_score is None or bundle["score"] > best_score:
                    best_score, best_step = bundle["score"], step
                    best_params = params.copy()
                log.info("%s step %d loss %.4f %s %.4f", variant, step, loss, eval_split, bundle["score"])
            history.append(row)
        final = params
        chosen = best_params if cfg.selection == "best" and best_params is not None else params
        if cfg.selection == "last":
            best_step = cfg.steps
    return FinetuneResult(config, chosen, history, best_step, best_score, report, times, final)


def write_history_csv(path: str | Path, rows: Sequence[dict]) -> None:
    keys = ["step", "loss"]
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


# -- evaluation ----------------------------------------------------------------

def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def rank_scores(config: ModelConfig, params, inputs: Sequence[Sequence[int]],
                candidates: Sequence[Sequence[int]], max_input_len: int, batch_size: int = 64) -> np.ndarray:
    """Teacher-forced log-likelihood of every candidate target for every input: [N, C]."""
    C = len(candidates)
    tlen = max(len(c) for c in candidates)
    out = np.zeros((len(inputs), C))
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            chunk = inputs[start:start + batch_size]
            enc_batch = collate([[Segment(x)] for x in chunk], max_input_len)
            enc = encoder_forward(config, params, enc_batch)
            dec_batch = collate([[Segment(x, targets=c)] for x in chunk for c in candidates], max_input_len,
                                max_target_len=tlen)
            enc_rep = Tensor(np.repeat(enc.data, C, axis=0))
            logits = decoder_forward(config, params, enc_rep, dec_batch).data
            logp = _log_softmax(logits)
            tok = np.take_along_axis(logp, dec_batch.decoder_target_ids[..., None], axis=-1)[..., 0]
            scores = (tok * dec_batch.decoder_weights).sum(axis=1)
            out[start:start + len(chunk)] = scores.reshape(len(chunk), C)
    return out


def enct5_outputs(config: ModelConfig, params, inputs: Sequence[Sequence[int]], max_input_len: int,
                  batch_size: int = 64) -> np.ndarray:
    """Head logits [N, n+1] for every input, packing for throughput."""
    outs = []
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            chunk = inputs[start:start + batch_size]
            batch = pack(chunk, max_input_len)
            logits = forward(config, params, batch).data
            outs.extend(logits[r, s - 1] for r, s in batch.assignment)
    return np.asarray(outs)


def predict(config: ModelConfig, params, spec: TaskSpec, examples, tokenizer: Tokenizer, max_input_len: int,
            batch_size: int = 64) -> np.ndarray:
    """Class ids in 1..n (classification) or floats (regression)."""
    enc = encode_examples(spec, examples, tokenizer, config.variant, max_input_len)
    inputs = [e.inputs for e in enc]
    if config.variant == "enct5":
        logits = enct5_outputs(config, params, inputs, max_input_len, batch_size)
        if spec.kind == "regression":
            return logits[:, 1]
        return np.array([predict_class(row) for row in logits])
    if spec.kind == "regression":
        cands = [tokenizer.encode(s) for s in SCORE_GRID]
        scores = rank_scores(config, params, inputs, cands, max_input_len, batch_size)
        return np.array([float(SCORE_GRID[i]) for i in scores.argmax(axis=1)])
    cands = [tokenizer.encode(s) for s in spec.label_strings]
    scores = rank_scores(config, params, inputs, cands, max_input_len, batch_size)
    return scores.argmax(axis=1) + 1


def evaluate(config: ModelConfig, params, task: TaskData, split: str, tokenizer: Tokenizer,
             max_input_len: int = 64, batch_size: int = 64) -> dict:
    """Metric bundle for ``split`` plus ``score`` (the within-task mean) and ``n``."""
    spec = task.spec
    examples = task[split]
    if not examples:
        raise TaskError(f"split {split!r} is empty")
    preds = predict(config, params, spec, examples, tokenizer, max_input_len, batch_size)
    if spec.kind == "regression":
        golds = np.array([float(e.label) for e in examples])
        bundle = compute_metrics(spec.metrics, preds, golds)
    else:
        golds = np.array([spec.class_id(e.label) for e in examples])
        bundle = compute_metrics(spec.metrics, preds, golds, positive_class=spec.positive_class())
    bundle["score"] = task_score(bundle, spec.metrics)
    bundle["n"] = len(examples)
    return bundle
