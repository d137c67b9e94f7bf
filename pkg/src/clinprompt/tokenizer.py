"""Reversible text/token mapping: byte-level BPE (default) or word-level.

Byte-level BPE starts from the 256 single-byte tokens, so any byte string is
encodable and decode(encode(x)) == x exactly. Special tokens hold reserved
ids 0..3 and are never produced by merges; the codec layer, not the
tokenizer, decides where to inject them.
"""

from __future__ import annotations

from collections import Counter

from .errors import ContractError, SchemaError

MODE_BPE = "bytelevel_bpe"
MODE_WORD = "wordlevel"

BOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = (b"<bos>", b"<eos>", b"<pad>", b"<unk>")
_N_SPECIALS = 4
_BYTE_BASE = _N_SPECIALS  # byte b maps to id _BYTE_BASE + b in BPE mode


def _escape(token: bytes) -> str:
    out = []
    for b in token:
        if 0x21 <= b <= 0x7E and b != 0x25:
            out.append(chr(b))
        else:
            out.append(f"%{b:02X}")
    return "".join(out)


def _unescape(text: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "%":
            digits = text[i + 1:i + 3]
            if len(digits) != 2:
                raise SchemaError(f"bad escape in token {text!r}")
            try:
                out.append(int(digits, 16))
            except ValueError as exc:
                raise SchemaError(f"bad escape in token {text!r}") from exc
            i += 3
        else:
            out.append(ord(ch))
            i += 1
    return bytes(out)


def _merge_ids(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    # left-to-right, non-overlapping
    out: list[int] = []
    i = 0
    n = len(ids)
    left, right = pair
    while i < n:
        if i + 1 < n and ids[i] == left and ids[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


class TokenizerModel:
    def __init__(self, mode: str, vocab: dict[int, bytes], merges: list[tuple[int, int]]):
        self.mode = mode
        self.vocab = vocab
        self.merges = merges
        self._token_to_id: dict[bytes, int] = {}
        for token_id in sorted(vocab):
            self._token_to_id.setdefault(vocab[token_id], token_id)
        self._merge_new_ids = [self._merged_id(k) for k in range(len(merges))]

    def _merged_id(self, merge_index: int) -> int:
        return _N_SPECIALS + 256 + merge_index if self.mode == MODE_BPE else -1

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        if self.mode == MODE_BPE:
            return self.encode_bytes(text.encode("utf-8"))
        ids = []
        for word in text.split():
            ids.append(self._token_to_id.get(word.encode("utf-8"), UNK_ID))
        return ids

    def encode_bytes(self, raw: bytes) -> list[int]:
        if self.mode != MODE_BPE:
            raise ContractError("encode_bytes is only defined for byte-level BPE")
        ids = [_BYTE_BASE + b for b in raw]
        for pair, new_id in zip(self.merges, self._merge_new_ids):
            ids = _merge_ids(ids, pair, new_id)
        return ids

    def decode_bytes(self, ids: list[int]) -> bytes:
        out = bytearray()
        for i in ids:
            if not (0 <= i < len(self.vocab)):
                raise ContractError(f"unknown token id {i}")
            if i < _N_SPECIALS:
                continue
            out += self.vocab[i]
        return bytes(out)

    def decode(self, ids: list[int]) -> str:
        """Inverse of encode; special ids decode to nothing.

        Word-level pieces are joined by single spaces, which is the declared
        whitespace normalization for that mode.
        """
        if self.mode == MODE_BPE:
            return self.decode_bytes(ids).decode("utf-8", errors="replace")
        pieces = []
        for i in ids:
            if not (0 <= i < len(self.vocab)):
                raise ContractError(f"unknown token id {i}")
            if i < _N_SPECIALS:
                continue
            pieces.append(self.vocab[i].decode("utf-8"))
        return " ".join(pieces)

    def save(self, path) -> None:
        lines = [f"{self.mode}\t{self.vocab_size}"]
        for token_id in range(self.vocab_size):
            lines.append(f"{token_id}\t{_escape(self.vocab[token_id])}")
        for left, right in self.merges:
            lines.append(f"{_escape(self.vocab[left])}\t{_escape(self.vocab[right])}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise SchemaError(f"{path}: empty tokenizer file")
        header = lines[0].split("\t")
        if len(header) != 2 or header[0] not in (MODE_BPE, MODE_WORD):
            raise SchemaError(f"{path}: line 1: bad header {lines[0]!r}")
        mode, size = header[0], int(header[1])
        if len(lines) < 1 + size:
            raise SchemaError(f"{path}: expected {size} vocabulary lines")
        vocab: dict[int, bytes] = {}
        for offset in range(size):
            line = lines[1 + offset]
            parts = line.split("\t")
            if len(parts) != 2:
                raise SchemaError(f"{path}: line {offset + 2}: bad vocabulary entry {line!r}")
            token_id = int(parts[0])
            if token_id != offset:
                raise SchemaError(f"{path}: line {offset + 2}: ids must be dense and ordered")
            vocab[token_id] = _unescape(parts[1])
        token_to_id: dict[bytes, int] = {}
        for token_id in sorted(vocab):
            # duplicate byte strings resolve to the lowest id
            token_to_id.setdefault(vocab[token_id], token_id)
        merges: list[tuple[int, int]] = []
        for number, line in enumerate(lines[1 + size:], start=2 + size):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise SchemaError(f"{path}: line {number}: bad merge entry {line!r}")
            left, right = _unescape(parts[0]), _unescape(parts[1])
            if left not in token_to_id or right not in token_to_id:
                raise SchemaError(f"{path}: line {number}: merge references unknown token")
            merges.append((token_to_id[left], token_to_id[right]))
        return cls(mode, vocab, merges)


def _base_vocab_bpe() -> dict[int, bytes]:
    vocab = {i: tok for i, tok in enumerate(SPECIAL_TOKENS)}
    for b in range(256):
        vocab[_BYTE_BASE + b] = bytes([b])
    return vocab


def train_tokenizer(corpus: str, vocab_size: int, mode: str = MODE_BPE) -> TokenizerModel:
    """Learn a vocabulary from raw text.

    BPE repeatedly merges the highest-frequency adjacent token pair (ties to
    the lexicographically smaller pair by byte string) until the vocabulary is
    full or no pair occurs twice. Word-level takes the most frequent
    whitespace-separated tokens.
    """
    if not corpus:
        raise ContractError("tokenizer corpus is empty")
    if mode == MODE_BPE:
        floor = _N_SPECIALS + 256
        if vocab_size <= floor:
            raise ContractError(f"BPE vocab size must exceed {floor} (specials plus byte tokens)")
        vocab = _base_vocab_bpe()
        ids = [_BYTE_BASE + b for b in corpus.encode("utf-8")]
        merges: list[tuple[int, int]] = []
        while len(vocab) < vocab_size:
            counts = Counter(zip(ids, ids[1:]))
            if not counts:
                break
            best_count = max(counts.values())
            if best_count < 2:
                break
            best = min((pair for pair, c in counts.items() if c == best_count),
                       key=lambda pair: (vocab[pair[0]], vocab[pair[1]]))
            new_id = len(vocab)
            vocab[new_id] = vocab[best[0]] + vocab[best[1]]
            merges.append(best)
            ids = _merge_ids(ids, best, new_id)
        return TokenizerModel(MODE_BPE, vocab, merges)
    if mode == MODE_WORD:
        if vocab_size <= _N_SPECIALS:
            raise ContractError(f"word vocab size must exceed {_N_SPECIALS} special tokens")
        counts = Counter(corpus.split())
        vocab = {i: tok for i, tok in enumerate(SPECIAL_TOKENS)}
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        for word, _ in ranked[:vocab_size - _N_SPECIALS]:
            vocab[len(vocab)] = word.encode("utf-8")
        return TokenizerModel(MODE_WORD, vocab, [])
    raise ContractError(f"unknown tokenizer mode {mode!r}")
