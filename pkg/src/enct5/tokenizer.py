"""Toy tokenizer: whole-word vocabulary with character-pair / character fallback.

Id layout::

    0 <pad>   1 </s>   2 <unk>
    3 ..      word vocabulary (in the order given)
    ..        lowercase letter pairs "aa".."zz"
    ..        printable ASCII characters
    top k     sentinels; <extra_id_0> is the highest id (T5 convention)

A word outside the vocabulary is cut into two-character chunks; a chunk that
is a lowercase letter pair becomes one token, anything else is spelled out
character by character.
"""

from __future__ import annotations

import re
import string
from typing import Iterable, Sequence

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2

_SPECIALS = ("<pad>", "</s>", "<unk>")
_PAIRS = tuple(a + b for a in string.ascii_lowercase for b in string.ascii_lowercase)
_CHARS = tuple(chr(c) for c in range(32, 127))
_SENTINEL_RE = re.compile(r"^<extra_id_(\d+)>$")


class Tokenizer:
    def __init__(self, words: Iterable[str] = (), num_sentinels: int = 16) -> None:
        self.words = tuple(dict.fromkeys(w for w in words if w not in _SPECIALS))
        self.num_sentinels = num_sentinels
        pieces = list(_SPECIALS) + list(self.words)
        self._word_end = len(pieces)
        pieces += [f"##{p}" for p in _PAIRS]
        pieces += [f"#{c}" for c in _CHARS]
        self._base = len(pieces)
        self.vocab_size = self._base + num_sentinels
        self._pieces = pieces
        self._ids = {p: i for i, p in enumerate(pieces)}

    def sentinel(self, i: int) -> int:
        if not 0 <= i < self.num_sentinels:
            raise ValueError(f"sentinel {i} out of range")
        return self.vocab_size - 1 - i

    def is_sentinel(self, token_id: int) -> bool:
        return token_id >= self._base

    def _encode_word(self, word: str) -> list[int]:
        if word in self._ids and self._ids[word] < self._word_end:
            return [self._ids[word]]
        m = _SENTINEL_RE.match(word)
        if m:
            return [self.sentinel(int(m.group(1)))]
        out = []
        for k in range(0, len(word), 2):
            chunk = word[k:k + 2]
            if f"##{chunk}" in self._ids:
                out.append(self._ids[f"##{chunk}"])
            else:
                out.extend(self._ids.get(f"#{ch}", UNK_ID) for ch in chunk)
        return out

    def encode(self, text: str, add_eos: bool = True) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            ids.extend(self._encode_word(word))
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        words: list[str] = []
        glue = False
        for i in ids:
            i = int(i)
            if i == PAD_ID:
                continue
            if i >= self._base:
                words.append(f"<extra_id_{self.vocab_size - 1 - i}>")
                glue = False
                continue
            piece = self._pieces[i]
            if piece.startswith("#") and len(piece) > 1:
                text = piece.lstrip("#") if piece.startswith("##") else piece[1:]
                if glue:
                    words[-1] += text
                else:
                    words.append(text)
                glue = True
            else:
                words.append(piece)
                glue = False
        return " ".join(words)
