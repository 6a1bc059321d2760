"""Example packing and the segment-isolation attention masks.

Segment ids number the examples inside a row starting at 1; 0 marks padding.
Positions restart at 0 for every segment, which lets relative position biases
in a packed row reproduce those of the unpacked example exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import get_default_dtype, mask_value

__all__ = [
    "Segment",
    "PackedBatch",
    "PackingError",
    "plan_rows",
    "collate",
    "pack",
    "pack_pairs",
    "pack_labeled",
    "unpack",
    "self_attention_mask",
    "cross_attention_mask",
    "packing_stats",
    "render_mask",
]


class PackingError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    """One example placed in a packed row.

    ``targets`` feeds the encoder-decoder variants, ``label`` the EncT5 head.
    ``weight`` 0 keeps the segment in the row but out of the loss.
    """

    inputs: Sequence[int]
    targets: Sequence[int] | None = None
    label: float | None = None
    weight: int = 1


@dataclass
class PackedBatch:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    positions: np.ndarray
    num_segments: np.ndarray
    decoder_input_ids: np.ndarray | None = None
    decoder_target_ids: np.ndarray | None = None
    decoder_segment_ids: np.ndarray | None = None
    decoder_positions: np.ndarray | None = None
    decoder_weights: np.ndarray | None = None
    labels: np.ndarray | None = None
    label_weights: np.ndarray | None = None
    assignment: list[tuple[int, int]] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def num_slots(self) -> int:
        return 0 if self.labels is None else self.labels.shape[1]


def plan_rows(lengths: Sequence[int], max_len: int, target_lengths: Sequence[int] | None = None,
              max_target_len: int | None = None) -> list[list[int]]:
    """First-fit sequential packing: extend the open row or start a new one."""
    rows: list[list[int]] = []
    used = used_t = 0
    for i, n in enumerate(lengths):
        nt = 0 if target_lengths is None else target_lengths[i]
        if n > max_len:
            raise PackingError(f"example {i} has length {n} > max_len {max_len}")
        if max_target_len is not None and nt > max_target_len:
            raise PackingError(f"example {i} has target length {nt} > max_target_len {max_target_len}")
        fits = rows and used + n <= max_len and (max_target_len is None or used_t + nt <= max_target_len)
        if fits:
            rows[-1].append(i)
            used += n
            used_t += nt
        else:
            rows.append([i])
            used, used_t = n, nt
    return rows


def _fill(seqs: Sequence[Sequence[int]], width: int) -> tuple[np.ndarray, ...]:
    ids = np.zeros(width, dtype=np.int64)
    seg = np.zeros(width, dtype=np.int64)
    pos = np.zeros(width, dtype=np.int64)
    at = 0
    for s, seq in enumerate(seqs, start=1):
        n = len(seq)
        if at + n > width:
            raise PackingError(f"row content {at + n} exceeds length {width}")
        if n and min(seq) <= 0:
            raise PackingError("token id 0 is reserved for padding")
        ids[at:at + n] = seq
        seg[at:at + n] = s
        pos[at:at + n] = np.arange(n)
        at += n
    return ids, seg, pos


def collate(rows: Sequence[Sequence[Segment]], max_len: int, max_target_len: int | None = None,
            num_slots: int | None = None, regression: bool = False) -> PackedBatch:
    """Lay out rows of segments into fixed-shape arrays."""
    B = len(rows)
    if B == 0:
        raise PackingError("no rows to collate")
    enc = [_fill([s.inputs for s in row], max_len) for row in rows]
    batch = PackedBatch(
        token_ids=np.stack([e[0] for e in enc]),
        segment_ids=np.stack([e[1] for e in enc]),
        positions=np.stack([e[2] for e in enc]),
        num_segments=np.array([len(r) for r in rows], dtype=np.int64),
    )
    if max_target_len is not None:
        tgt_ids = np.zeros((B, max_target_len), dtype=np.int64)
        dec_in = np.zeros_like(tgt_ids)
        dec_seg = np.zeros_like(tgt_ids)
        dec_pos = np.zeros_like(tgt_ids)
        weights = np.zeros(tgt_ids.shape, dtype=get_default_dtype())
        for b, row in enumerate(rows):
            if any(s.targets is None for s in row):
                raise PackingError("decoder layout needs targets on every segment")
            ids, seg, pos = _fill([s.targets for s in row], max_target_len)
            tgt_ids[b], dec_seg[b], dec_pos[b] = ids, seg, pos
            # shift right inside each segment, start token is the pad id
            shifted = np.zeros_like(ids)
            shifted[1:] = ids[:-1]
            shifted[pos == 0] = 0
            dec_in[b] = shifted
            for s, segm in enumerate(row, start=1):
                weights[b][seg == s] = float(segm.weight)
        batch.decoder_input_ids = dec_in
        batch.decoder_target_ids = tgt_ids
        batch.decoder_segment_ids = dec_seg
        batch.decoder_positions = dec_pos
        batch.decoder_weights = weights
    if any(s.label is not None for row in rows for s in row):
        S = num_slots if num_slots is not None else int(batch.num_segments.max())
        if batch.num_segments.max() > S:
            raise PackingError(f"row has {batch.num_segments.max()} segments > {S} slots")
        dtype = get_default_dtype() if regression else np.int64
        labels = np.zeros((B, S), dtype=dtype)
        lw = np.zeros((B, S), dtype=get_default_dtype())
        for b, row in enumerate(rows):
            for s, segm in enumerate(row):
                if segm.label is None:
                    raise PackingError("label layout needs a label on every segment")
                if segm.weight:
                    labels[b, s] = segm.label
                    lw[b, s] = 1.0
        batch.labels = labels
        batch.label_weights = lw
    return batch


def _assign(groups: list[list[int]]) -> list[tuple[int, int]]:
    n = sum(len(g) for g in groups)
    out: list[tuple[int, int]] = [(-1, -1)] * n
    for r, g in enumerate(groups):
        for s, i in enumerate(g, start=1):
            out[i] = (r, s)
    return out


def pack(examples: Sequence[Sequence[int]], max_len: int, enabled: bool = True) -> PackedBatch:
    """Pack token sequences into rows of ``max_len``; ``assignment[i] = (row, segment)``."""
    groups = plan_rows([len(e) for e in examples], max_len) if enabled else [[i] for i in range(len(examples))]
    for e in examples:
        if len(e) > max_len:
            raise PackingError(f"example of length {len(e)} > max_len {max_len}")
    batch = collate([[Segment(examples[i]) for i in g] for g in groups], max_len)
    batch.assignment = _assign(groups)
    return batch


def pack_pairs(inputs: Sequence[Sequence[int]], targets: Sequence[Sequence[int]], max_len: int,
               max_target_len: int, enabled: bool = True) -> PackedBatch:
    """Pack encoder-decoder examples; a row must fit both the input and the target."""
    if enabled:
        groups = plan_rows([len(x) for x in inputs], max_len, [len(t) for t in targets], max_target_len)
    else:
        groups = [[i] for i in range(len(inputs))]
    rows = [[Segment(inputs[i], targets=targets[i]) for i in g] for g in groups]
    batch = collate(rows, max_len, max_target_len=max_target_len)
    batch.assignment = _assign(groups)
    return batch


def pack_labeled(inputs: Sequence[Sequence[int]], labels: Sequence[float], max_len: int,
                 enabled: bool = True, num_slots: int | None = None,
                 regression: bool = False) -> PackedBatch:
    """Pack examples carrying one EncT5 label each (class id in 1..n or a float)."""
    groups = plan_rows([len(x) for x in inputs], max_len) if enabled else [[i] for i in range(len(inputs))]
    rows = [[Segment(inputs[i], label=labels[i]) for i in g] for g in groups]
    batch = collate(rows, max_len, num_slots=num_slots, regression=regression)
    batch.assignment = _assign(groups)
    return batch


def unpack(batch: PackedBatch) -> list[list[int]]:
    """Recover the input token sequences in original example order."""
    out = []
    for r, s in batch.assignment:
        sel = batch.segment_ids[r] == s
        out.append(batch.token_ids[r][sel].tolist())
    return out


def self_attention_mask(segment_ids: np.ndarray, causal: bool = False, dtype=None) -> np.ndarray:
    """Additive mask: ``i`` may attend ``j`` iff both share a nonzero segment (and ``j <= i`` if causal)."""
    seg = np.asarray(segment_ids)
    allowed = (seg[..., :, None] == seg[..., None, :]) & (seg[..., :, None] != 0)
    if causal:
        L = seg.shape[-1]
        allowed &= np.tril(np.ones((L, L), dtype=bool))
    dtype = dtype or get_default_dtype()
    return np.where(allowed, 0.0, mask_value(dtype)).astype(dtype)


def cross_attention_mask(query_segment_ids: np.ndarray, key_segment_ids: np.ndarray, dtype=None) -> np.ndarray:
    q = np.asarray(query_segment_ids)
    k = np.asarray(key_segment_ids)
    allowed = (q[..., :, None] == k[..., None, :]) & (q[..., :, None] != 0)
    dtype = dtype or get_default_dtype()
    return np.where(allowed, 0.0, mask_value(dtype)).astype(dtype)


def packing_stats(batch: PackedBatch) -> dict:
    filled = int((batch.segment_ids != 0).sum())
    return {
        "rows": int(batch.batch_size),
        "examples": int(batch.num_segments.sum()),
        "fill_ratio": filled / batch.segment_ids.size,
        "segments_per_row": float(batch.num_segments.mean()),
        "max_segments_per_row": int(batch.num_segments.max()),
    }


def render_mask(segment_ids: Sequence[int], causal: bool = False) -> str:
    """Text picture of a row's self-attention mask: ``#`` allowed, ``.`` blocked."""
    m = self_attention_mask(np.asarray(segment_ids), causal=causal)
    return "\n".join("".join("#" if v == 0.0 else "." for v in row) for row in m)
