"""Tokenizers for the two backbone flavours.

Both produce fixed-length id sequences laid out as

    [<start>] [slot tokens x n_slots] [word tokens ...] [<end>] [pad ...]

The slot tokens are placeholders whose embeddings get overwritten by the
learnable prompt blocks; only their count matters. The <end> token carries
the largest id in the vocabulary so the end-of-sequence position can be
recovered with ``argmax`` over ids, the usual dual-encoder convention.
"""

from __future__ import annotations

import gzip
import unicodedata
from pathlib import Path

import torch

from .errors import TokenizerError


class WordTokenizer:
    """Whitespace tokenizer over a closed vocabulary, for the tiny backbone.

    Ids: 0 pad, 1 start, 2 slot placeholder, 3.. sorted words, last end.
    """

    def __init__(self, words, context_length: int = 32):
        self.context_length = context_length
        uniq = sorted({w.lower() for phrase in words for w in phrase.split()})
        self._word_to_id = {w: 3 + i for i, w in enumerate(uniq)}
        self.pad_id = 0
        self.start_id = 1
        self.slot_id = 2
        self.end_id = 3 + len(uniq)
        self.vocab_size = self.end_id + 1

    def _word_ids(self, text: str):
        ids = []
        for w in text.lower().split():
            if w not in self._word_to_id:
                raise TokenizerError(
                    f"unknown token {w!r} in {text!r}; the tiny backbone vocabulary "
                    "is built from the configured class and state words"
                )
            ids.append(self._word_to_id[w])
        return ids

    def tokenize(self, texts, n_slots: int = 0) -> torch.Tensor:
        """Encode a batch of phrases into (B, context_length) long ids."""
        rows = []
        for text in texts:
            ids = [self.start_id] + [self.slot_id] * n_slots + self._word_ids(text) + [self.end_id]
            if len(ids) > self.context_length:
                raise TokenizerError(
                    f"sequence for {text!r} needs {len(ids)} positions with {n_slots} "
                    f"prompt slots but context_length is {self.context_length}"
                )
            rows.append(ids + [self.pad_id] * (self.context_length - len(ids)))
        return torch.tensor(rows, dtype=torch.long)


def _bytes_to_unicode():
    bs = list(range(33, 127)) + list(range(161, 173)) + list(range(174, 256))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


def _pairs(word):
    return {(word[i], word[i + 1]) for i in range(len(word) - 1)}


class ByteBPETokenizer:
    """Byte-level BPE compatible with standard CLIP merges files.

    Needs the usual ``bpe_simple_vocab_16e6.txt.gz`` (or an uncompressed
    copy); 49408-entry vocabulary with <start>=49406 and <end>=49407.
    Text cleaning is NFC-normalize + lowercase + whitespace collapse, which
    is exact for the plain ASCII templates this package produces.
    """

    def __init__(self, merges_path, context_length: int = 77):
        self.context_length = context_length
        path = Path(merges_path)
        if not path.exists():
            raise TokenizerError(f"BPE merges file not found: {path}")
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "rt", encoding="utf-8") as fh:
            merges = fh.read().split("\n")
        merges = [tuple(m.split()) for m in merges[1 : 49152 - 256 - 2 + 1] if m.strip()]

        self.byte_encoder = _bytes_to_unicode()
        vocab = list(self.byte_encoder.values())
        vocab.extend(v + "</w>" for v in list(vocab))
        vocab.extend("".join(m) for m in merges)
        vocab.extend(["<|startoftext|>", "<|endoftext|>"])
        self.encoder = {tok: i for i, tok in enumerate(vocab)}
        self.bpe_ranks = {m: i for i, m in enumerate(merges)}
        self.start_id = self.encoder["<|startoftext|>"]
        self.end_id = self.encoder["<|endoftext|>"]
        self.pad_id = 0
        self.vocab_size = len(vocab)
        self._cache: dict[str, list[int]] = {}
        # "x" encodes to a single token; used as the prompt-slot placeholder
        self.slot_id = self._word_ids("x")[0]

    def _bpe(self, token: str) -> list[str]:
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _pairs(word)
        if not pairs:
            return [token + "</w>"]
        while True:
            bigram = min(pairs, key=lambda p: self.bpe_ranks.get(p, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            new_word = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    new_word.extend(word[i:])
                    break
                new_word.extend(word[i:j])
                i = j
                if i < len(word) - 1 and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
            pairs = _pairs(word)
        return list(word)

    def _word_ids(self, text: str) -> list[int]:
        text = unicodedata.normalize("NFC", text).lower()
        ids: list[int] = []
        for word in text.split():
            if word in self._cache:
                ids.extend(self._cache[word])
                continue
            token = "".join(self.byte_encoder[b] for b in word.encode("utf-8"))
            try:
                word_ids = [self.encoder[t] for t in self._bpe(token)]
            except KeyError as exc:  # pragma: no cover - full byte coverage
                raise TokenizerError(f"cannot BPE-encode {word!r}: missing {exc}") from exc
            self._cache[word] = word_ids
            ids.extend(word_ids)
        return ids

    def tokenize(self, texts, n_slots: int = 0) -> torch.Tensor:
        rows = []
        for text in texts:
            ids = [self.start_id] + [self.slot_id] * n_slots + self._word_ids(text) + [self.end_id]
            if len(ids) > self.context_length:
                raise TokenizerError(
                    f"sequence for {text!r} needs {len(ids)} positions with {n_slots} "
                    f"prompt slots but context_length is {self.context_length}"
                )
            rows.append(ids + [self.pad_id] * (self.context_length - len(ids)))
        return torch.tensor(rows, dtype=torch.long)
