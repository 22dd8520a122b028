"""Lowercase word-level vocabulary shared by the encoders and the reader."""

from __future__ import annotations

import json
import re
from pathlib import Path

PAD, CLS, SEP, BOS, EOS, UNK = 0, 1, 2, 3, 4, 5
SPECIALS = ["<pad>", "<cls>", "<sep>", "<bos>", "<eos>", "<unk>"]

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; punctuation marks become standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: list[str]):
        self.id_to_token = SPECIALS + tokens
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: list[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def decode(self, ids) -> str:
        words = [self.id_to_token[i] for i in ids if i not in (PAD, CLS, SEP, BOS, EOS)]
        return " ".join(words)

    @classmethod
    def build(cls, texts) -> "Vocab":
        seen: set[str] = set()
        for text in texts:
            seen.update(tokenize(text))
        return cls(sorted(seen))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"tokens": self.id_to_token[len(SPECIALS):]}, fh)

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh)["tokens"])
