"""Task definitions, TSV/JSONL ingestion and the synthetic stand-in tasks.

TSV files have a header row naming ``text_a``, optionally ``text_b``, and
``label``. JSONL files hold one object per line with the same keys.

Two-segment inputs are rendered with ``TaskSpec.template``; the default is
``"{prefix} {text_a} </s> {text_b}"`` (the single-segment form drops the
separator and ``text_b``).
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import METRICS
from .tensor import Rng

TOPIC_CLASSES = ("a", "b", "c", "d")
WORDS_PER_CLASS = 256
MAJORITY_LABELS = ("alpha", "beta", "gamma", "delta")
MAJORITY_SHARE = 0.7
MATCH_LABELS = ("mismatch", "match")
GENERATORS = ("majority", "match", "score")
SPLITS = ("train", "validation", "test")

DEFAULT_TEMPLATE = "{prefix} {text_a} </s> {text_b}"


class TaskError(ValueError):
    pass


class UnknownLabelError(TaskError):
    def __init__(self, label: str, line: int, path: str = "") -> None:
        super().__init__(f"{path}:{line}: unknown label {label!r}")
        self.line = line


class MalformedRowError(TaskError):
    def __init__(self, message: str, line: int, path: str = "") -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def topic_words() -> list[str]:
    return [f"{c}{j:02d}" for c in TOPIC_CLASSES for j in range(WORDS_PER_CLASS)]


def word_class(word: str) -> int:
    return TOPIC_CLASSES.index(word[0])


@dataclass(frozen=True)
class Example:
    text_a: str
    label: str | float
    text_b: str | None = None


@dataclass
class TaskSpec:
    name: str
    kind: str = "classification"
    label_strings: tuple[str, ...] = ()
    metrics: tuple[str, ...] = ("accuracy",)
    source: str = ""
    seed: int = 0
    size: int = 1000
    validation_size: int | None = None
    test_size: int | None = None
    prefix: str = ""
    template: str = DEFAULT_TEMPLATE
    positive_label: str | None = None
    files: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("classification", "regression"):
            raise TaskError(f"unknown task kind {self.kind!r}")
        self.label_strings = tuple(self.label_strings)
        self.metrics = tuple(self.metrics)
        if self.kind == "classification" and len(self.label_strings) < 2:
            raise TaskError("classification tasks need at least two labels")
        if not self.metrics:
            raise TaskError("metric list is empty")
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise TaskError(f"unknown metrics {bad}")

    @property
    def num_classes(self) -> int:
        return len(self.label_strings)

    def class_id(self, label: str) -> int:
        """Class index 1..n; 0 is reserved for the padding class."""
        try:
            return self.label_strings.index(label) + 1
        except ValueError:
            raise TaskError(f"label {label!r} not in task label set {self.label_strings}") from None

    def positive_class(self) -> int:
        return self.class_id(self.positive_label or self.label_strings[-1])

    def render(self, ex: Example) -> str:
        if ex.text_b is None:
            return f"{self.prefix} {ex.text_a}".strip()
        return self.template.format(prefix=self.prefix, text_a=ex.text_a, text_b=ex.text_b).strip()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TaskData:
    spec: TaskSpec
    splits: dict[str, list[Example]]

    def __getitem__(self, split: str) -> list[Example]:
        if split not in self.splits:
            raise TaskError(f"task {self.spec.name!r} has no split {split!r}")
        return self.splits[split]


# -- file ingestion ------------------------------------------------------------

def _check_label(spec: TaskSpec, raw, line: int, path: str) -> str | float:
    if spec.kind == "regression":
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise MalformedRowError(f"label {raw!r} is not a number", line, path) from None
    if raw not in spec.label_strings:
        raise UnknownLabelError(str(raw), line, path)
    return raw


def read_tsv(path: str | Path, spec: TaskSpec) -> list[Example]:
    path = str(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or "text_a" not in header or "label" not in header:
            raise MalformedRowError("header must name text_a and label", 1, path)
        ia, il = header.index("text_a"), header.index("label")
        ib = header.index("text_b") if "text_b" in header else None
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRowError(f"expected {len(header)} fields, got {len(row)}", line, path)
            text_b = row[ib] if ib is not None and row[ib] != "" else None
            out.append(Example(row[ia], _check_label(spec, row[il], line, path), text_b))
    return out


def read_jsonl(path: str | Path, spec: TaskSpec) -> list[Example]:
    path = str(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as err:
                raise MalformedRowError(f"invalid JSON ({err.msg})", line, path) from None
            if not isinstance(obj, dict) or "text_a" not in obj or "label" not in obj:
                raise MalformedRowError("object needs text_a and label", line, path)
            label = obj["label"] if spec.kind == "regression" else str(obj["label"])
            out.append(Example(str(obj["text_a"]), _check_label(spec, label, line, path), obj.get("text_b")))
    return out


def load_task(spec: TaskSpec) -> TaskData:
    """Load every split named in ``spec.files`` or generate a synthetic task."""
    if spec.source.startswith("synthetic:"):
        return synth_task(spec.source.split(":", 1)[1], spec.seed, spec.size,
                          spec.validation_size, spec.test_size, spec=spec)
    if not spec.files:
        raise TaskError(f"task {spec.name!r} names no data files")
    splits = {}
    for split, path in spec.files.items():
        reader = read_jsonl if str(path).endswith((".jsonl", ".json")) else read_tsv
        splits[split] = reader(path, spec)
    return TaskData(spec, splits)


# -- synthetic tasks -----------------------------------------------------------

def synthetic_spec(generator: str, seed: int = 0, size: int = 1000, validation_size: int | None = None,
                   test_size: int | None = None) -> TaskSpec:
    common = dict(source=f"synthetic:{generator}", seed=seed, size=size, validation_size=validation_size,
                  test_size=test_size)
    if generator == "majority":
        return TaskSpec("majority", "classification", MAJORITY_LABELS, ("accuracy", "matthews"),
                        prefix="majority:", **common)
    if generator == "match":
        return TaskSpec("match", "classification", MATCH_LABELS, ("f1", "accuracy"), prefix="match:",
                        positive_label="match", **common)
    if generator == "score":
        return TaskSpec("score", "regression", (), ("pearson", "spearman"), prefix="score:", **common)
    raise TaskError(f"unknown synthetic generator {generator!r}; choose from {GENERATORS}")


def _majority_example(rng: Rng, words: list[str], label: int) -> Example:
    K = len(TOPIC_CLASSES)
    probs = np.full(K, (1.0 - MAJORITY_SHARE) / (K - 1))
    probs[label] = MAJORITY_SHARE
    while True:
        n = int(rng.integers(8, 17))
        classes = rng.choice(K, size=n, p=probs)
        counts = np.bincount(classes, minlength=K)
        others = np.delete(counts, label)
        if counts[label] > others.max():
            break
    toks = [words[c * WORDS_PER_CLASS + int(rng.integers(WORDS_PER_CLASS))] for c in classes]
    return Example(" ".join(toks), MAJORITY_LABELS[label])


def _match_example(rng: Rng, words: list[str], label: int) -> Example:
    n = int(rng.integers(4, 8))
    a = [words[int(i)] for i in rng.integers(len(words), size=n)]
    if label == 1:
        b = [a[int(i)] for i in rng.permutation(n)]
    else:
        b = [words[int(i)] for i in rng.integers(len(words), size=n)]
    return Example(" ".join(a), MATCH_LABELS[label], " ".join(b))


def _score_example(rng: Rng, words: list[str]) -> Example:
    n = int(rng.integers(8, 17))
    toks = [words[int(i)] for i in rng.integers(len(words), size=n)]
    counts = np.bincount([word_class(w) for w in toks], minlength=len(TOPIC_CLASSES))
    y = 2.5 + 0.5 * (counts[0] - counts[1]) + 0.25 * (counts[2] - counts[3]) + rng.normal(0.0, 0.2)
    return Example(" ".join(toks), float(np.clip(round(y, 3), 0.0, 5.0)))


def synth_task(generator: str, seed: int = 0, size: int = 1000, validation_size: int | None = None,
               test_size: int | None = None, spec: TaskSpec | None = None) -> TaskData:
    """Deterministic synthetic task with balanced labels and disjoint splits.

    ``size`` is the training split size; validation and test default to a
    quarter of it each.
    """
    spec = spec or synthetic_spec(generator, seed, size, validation_size, test_size)
    sizes = {"train": size,
             "validation": validation_size if validation_size is not None else max(size // 4, 2),
             "test": test_size if test_size is not None else max(size // 4, 2)}
    rng = Rng([seed, GENERATORS.index(generator) if generator in GENERATORS else 99])
    words = topic_words()
    seen: set[tuple] = set()
    splits: dict[str, list[Example]] = {}
    for split in SPLITS:
        n = sizes[split]
        examples: list[Example] = []
        k = 0
        while len(examples) < n:
            if generator == "majority":
                ex = _majority_example(rng, words, k % len(MAJORITY_LABELS))
            elif generator == "match":
                ex = _match_example(rng, words, k % 2)
            elif generator == "score":
                ex = _score_example(rng, words)
            else:
                raise TaskError(f"unknown synthetic generator {generator!r}")
            key = (ex.text_a, ex.text_b)
            if key in seen:
                continue
            seen.add(key)
            examples.append(ex)
            k += 1
        order = rng.permutation(len(examples))
        splits[split] = [examples[int(i)] for i in order]
    return TaskData(spec, splits)


def topic_corpus(seed: int, size: int, min_len: int = 12, max_len: int = 24) -> list[str]:
    """Pretraining text from a small topic grammar.

    Each line has a dominant word class; a word is followed by its within-class
    successor with probability 0.45, by another word of the topic with 0.35,
    and by any word otherwise.
    """
    rng = Rng([seed, 1000])
    words = topic_words()
    K = len(TOPIC_CLASSES)
    lines = []
    for _ in range(size):
        topic = int(rng.integers(K))
        n = int(rng.integers(min_len, max_len + 1))
        cur = topic * WORDS_PER_CLASS + int(rng.integers(WORDS_PER_CLASS))
        toks = [cur]
        for _ in range(n - 1):
            u = rng.random()
            if u < 0.45:
                c, j = divmod(cur, WORDS_PER_CLASS)
                cur = c * WORDS_PER_CLASS + (j + 1) % WORDS_PER_CLASS
            elif u < 0.80:
                cur = topic * WORDS_PER_CLASS + int(rng.integers(WORDS_PER_CLASS))
            else:
                cur = int(rng.integers(len(words)))
            toks.append(cur)
        lines.append(" ".join(words[t] for t in toks))
    return lines
