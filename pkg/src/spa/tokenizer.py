"""Byte-level tokenizer: 256 byte values plus PAD/BOS/EOS. Vocab size 259."""

from __future__ import annotations

PAD = 256
BOS = 257
EOS = 258
VOCAB_SIZE = 259


class ByteTokenizer:
    """Encodes text as UTF-8 bytes; round-trips any string exactly."""

    vocab_size = VOCAB_SIZE
    pad = PAD
    bos = BOS
    eos = EOS

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        raw = bytes(i for i in ids if 0 <= i < 256)
        return raw.decode("utf-8", errors="replace")

    def encode_document(self, text: str) -> list[int]:
        """BOS + bytes + EOS, the shape every training/eval sequence uses."""
        return [BOS, *self.encode(text), EOS]
