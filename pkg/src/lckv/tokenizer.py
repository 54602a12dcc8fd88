"""Byte-level tokenizer: 256 byte values plus BOS/EOS specials.

Corpus-agnostic by construction; decode(encode(x)) == x for any byte
string, and every id is below vocab_size (258).
"""

import numpy as np

BOS = 256
EOS = 257
VOCAB_SIZE = 258


class ByteTokenizer:
    vocab_size = VOCAB_SIZE
    bos_id = BOS
    eos_id = EOS

    def encode(self, text: str | bytes, add_bos: bool = False, add_eos: bool = False) -> np.ndarray:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = list(data)
        if add_bos:
            ids.insert(0, BOS)
        if add_eos:
            ids.append(EOS)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> bytes:
        return bytes(int(i) for i in np.asarray(ids).reshape(-1) if int(i) < 256)
