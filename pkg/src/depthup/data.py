"""Synthetic corpora: a toy text language and a text-to-speech-token codebook.

The text source is an order-2 Markov chain.  For every previous token ``b``
there is a fixed candidate list of successors; the token before it, ``a``,
selects the weights over that list.  A bigram model therefore already has a
small branching factor and a trigram model does better still.

The last three text ids are reserved: ``PAD = V_t - 3``, ``SEP = V_t - 2``
and ``EOS = V_t - 1``.  The generator never emits them.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

N_SPECIAL = 3


def special_ids(vocab_text: int) -> tuple[int, int, int]:
    """``(pad, sep, eos)``."""
    return vocab_text - 3, vocab_text - 2, vocab_text - 1


@dataclass(frozen=True)
class SyntheticTextSpec:
    vocab_text: int = 256
    branching: int = 8
    concentration: float = 0.5
    min_len: int = 8
    max_len: int = 32
    seed: int = 0  # fixes the transition table, i.e. the language itself

    def __post_init__(self):
        if self.vocab_text <= N_SPECIAL + 1:
            raise ValueError(f"vocab_text must exceed {N_SPECIAL + 1}")
        if not 1 <= self.branching <= self.n_content:
            raise ValueError(f"branching must be in 1..{self.n_content}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")

    @property
    def n_content(self) -> int:
        return self.vocab_text - N_SPECIAL


class MarkovSource:
    """Seeded order-2 Markov chain over the content ids of a text vocabulary."""

    def __init__(self, spec: SyntheticTextSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        n, k = spec.n_content, spec.branching
        # Zipf-like start distribution
        ranks = rng.permutation(n) + 1
        self.start = (1.0 / ranks) / (1.0 / ranks).sum()
        self.candidates = np.stack([rng.choice(n, size=k, replace=False) for _ in range(n)])
        weights = rng.dirichlet(np.full(k, spec.concentration), size=(n, n))
        self.cumulative = np.cumsum(weights, axis=-1)
        self.cumulative[..., -1] = 1.0

    def sample(self, length: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty(length, dtype=np.int64)
        out[0] = rng.choice(self.spec.n_content, p=self.start)
        if length > 1:
            out[1] = self.candidates[out[0], rng.integers(self.spec.branching)]
        draws = rng.random(length)
        for i in range(2, length):
            a, b = out[i - 2], out[i - 1]
            j = int(np.searchsorted(self.cumulative[a, b], draws[i], side="right"))
            out[i] = self.candidates[b, min(j, self.spec.branching - 1)]
        return out


def gen_text_corpus(spec: SyntheticTextSpec, count: int, seed: int) -> list[np.ndarray]:
    """``count`` sequences of content ids, lengths uniform in ``[min_len, max_len]``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    source = MarkovSource(spec)
    rng = np.random.default_rng(seed)
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=count)
    return [source.sample(int(n), rng) for n in lengths]


# --------------------------------------------------------------------------
# speech codebook
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SpeechCodebookSpec:
    vocab_text: int = 256
    vocab_speech: int = 512
    expansion: int = 3  # speech tokens per text token
    noise: float = 0.05  # per-symbol substitution probability
    seed: int = 0
    table: str = "random"  # "random" or "identity"

    def __post_init__(self):
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must be in [0, 1)")
        if self.vocab_speech < 2:
            raise ValueError("vocab_speech must be >= 2")
        if self.table == "identity":
            if self.expansion != 1 or self.vocab_speech < self.vocab_text:
                raise ValueError("identity table needs expansion 1 and vocab_speech >= vocab_text")
        elif self.table != "random":
            raise ValueError(f"unknown table kind {self.table!r}")
        elif self.vocab_speech**self.expansion < self.vocab_text:
            raise ValueError("codebook too small to give every text id a distinct code")

    def build_table(self) -> np.ndarray:
        """``(V_t, k)`` array of speech ids; rows are pairwise distinct."""
        if self.table == "identity":
            return (np.arange(self.vocab_text) + self.vocab_text)[:, None]
        rng = np.random.default_rng(self.seed)
        rows: list[tuple[int, ...]] = []
        seen: set[tuple[int, ...]] = set()
        while len(rows) < self.vocab_text:
            row = tuple(int(c) for c in rng.integers(0, self.vocab_speech, size=self.expansion))
            if row not in seen:
                seen.add(row)
                rows.append(row)
        return np.asarray(rows, dtype=np.int64) + self.vocab_text


@dataclass
class AsrPair:
    speech: np.ndarray
    text: np.ndarray


def encode_speech(text: np.ndarray, table: np.ndarray, codebook: SpeechCodebookSpec, rng: np.random.Generator) -> np.ndarray:
    text = np.asarray(text, dtype=np.int64)
    if text.size and (text.min() < 0 or text.max() >= table.shape[0]):
        raise ValueError(f"text id outside the code table (0..{table.shape[0] - 1})")
    codes = table[text].reshape(-1)
    if codebook.noise > 0:
        hit = rng.random(codes.size) < codebook.noise
        # shift by 1..V_s-1 so a substitution never reproduces the original code
        shift = rng.integers(1, codebook.vocab_speech, size=codes.size)
        local = codes - codebook.vocab_text
        codes = np.where(hit, (local + shift) % codebook.vocab_speech + codebook.vocab_text, codes)
    return codes


def gen_asr_pairs(text_sequences: list[np.ndarray], codebook: SpeechCodebookSpec, seed: int) -> list[AsrPair]:
    table = codebook.build_table()
    rng = np.random.default_rng(seed)
    return [AsrPair(encode_speech(t, table, codebook, rng), np.asarray(t, dtype=np.int64)) for t in text_sequences]


def decode_by_table(speech: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Invert a noise-free encoding by chunked table lookup; unknown chunks give -1."""
    k = table.shape[1]
    lookup = {tuple(row): i for i, row in enumerate(table.tolist())}
    chunks = np.asarray(speech).reshape(-1, k)
    return np.asarray([lookup.get(tuple(c), -1) for c in chunks.tolist()], dtype=np.int64)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # (B, T)
    speech_mask: np.ndarray  # token-type mask, True on speech positions
    loss_mask: np.ndarray  # True on positions whose token is a training target
    positions: np.ndarray  # (B, T)
    valid: np.ndarray  # False on padding
    dropped: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape


def make_batch(
    pairs: list[AsrPair],
    max_context: int,
    vocab_text: int,
    pad_id: int | None = None,
    loss_on_speech: bool = False,
) -> Batch:
    """Lay out ``[speech..., SEP, text..., EOS, PAD...]`` rows.

    Pairs that do not fit ``max_context`` are dropped and counted.  The loss
    mask covers the transcript and EOS, plus the speech span when
    ``loss_on_speech`` is set.
    """
    default_pad, sep, eos = special_ids(vocab_text)
    pad = default_pad if pad_id is None else pad_id
    if pad in (sep, eos):
        raise ValueError(f"pad id {pad} collides with SEP/EOS")
    rows = []
    dropped = 0
    for p in pairs:
        if (p.text == pad).any() or (p.speech == pad).any():
            raise ValueError(f"pad id {pad} collides with a token id in the data")
        seq = np.concatenate([p.speech, [sep], p.text, [eos]])
        if seq.size > max_context:
            dropped += 1
            continue
        rows.append((seq, p.speech.size))
    if dropped:
        log.warning("dropped %d of %d pairs longer than max_context=%d", dropped, len(pairs), max_context)
    if not rows:
        raise ValueError("no pair fits max_context")
    width = max(seq.size for seq, _ in rows)
    bsz = len(rows)
    ids = np.full((bsz, width), pad, dtype=np.int64)
    speech_mask = np.zeros((bsz, width), dtype=bool)
    loss_mask = np.zeros((bsz, width), dtype=bool)
    valid = np.zeros((bsz, width), dtype=bool)
    for r, (seq, n_speech) in enumerate(rows):
        ids[r, : seq.size] = seq
        valid[r, : seq.size] = True
        speech_mask[r, :n_speech] = True
        loss_mask[r, n_speech + 1 : seq.size] = True
        if loss_on_speech:
            loss_mask[r, 1:n_speech] = True
    positions = np.broadcast_to(np.arange(width), (bsz, width)).copy()
    return Batch(ids, speech_mask, loss_mask, positions, valid, dropped)


def make_text_batch(sequences: list[np.ndarray], vocab_text: int, max_context: int | None = None) -> Batch:
    """Rows ``[text..., EOS, PAD...]`` with loss on every token after the first."""
    pad, _, eos = special_ids(vocab_text)
    seqs = [np.concatenate([np.asarray(s, np.int64), [eos]]) for s in sequences]
    if max_context is not None:
        seqs = [s[:max_context] for s in seqs]
    width = max(s.size for s in seqs)
    bsz = len(seqs)
    ids = np.full((bsz, width), pad, dtype=np.int64)
    valid = np.zeros((bsz, width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : s.size] = s
        valid[r, : s.size] = True
    loss_mask = valid.copy()
    loss_mask[:, 0] = False
    positions = np.broadcast_to(np.arange(width), (bsz, width)).copy()
    return Batch(ids, np.zeros_like(valid), loss_mask, positions, valid)


# --------------------------------------------------------------------------
# corpus files
# --------------------------------------------------------------------------
#
# Layout: one UTF-8 JSON header line terminated by "\n", then for each record
# and each of its ``fields`` arrays: a little-endian uint32 length followed by
# that many little-endian int32 ids.

CORPUS_VERSION = 1


@dataclass
class CorpusHeader:
    vocab_text: int
    vocab_speech: int
    seed: int
    fields: list[str] = field(default_factory=lambda: ["text"])
    count: int = 0
    version: int = CORPUS_VERSION


def save_corpus(path: str | Path, records: list[list[np.ndarray]], header: CorpusHeader) -> None:
    header.count = len(records)
    with open(path, "wb") as fh:
        fh.write(json.dumps(asdict(header), sort_keys=True).encode() + b"\n")
        for rec in records:
            if len(rec) != len(header.fields):
                raise ValueError(f"record has {len(rec)} arrays, header declares {len(header.fields)}")
            for arr in rec:
                arr = np.asarray(arr)
                fh.write(struct.pack("<I", arr.size))
                fh.write(arr.astype("<i4").tobytes())


def load_corpus(path: str | Path) -> tuple[CorpusHeader, list[list[np.ndarray]]]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    meta = json.loads(raw[:nl])
    if meta.get("version") != CORPUS_VERSION:
        raise ValueError(f"unsupported corpus version {meta.get('version')}")
    header = CorpusHeader(**meta)
    pos = nl + 1
    records = []
    for _ in range(header.count):
        rec = []
        for _ in header.fields:
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            rec.append(np.frombuffer(raw, dtype="<i4", count=n, offset=pos).astype(np.int64))
            pos += 4 * n
        records.append(rec)
    if pos != len(raw):
        raise ValueError("trailing bytes after the last corpus record")
    return header, records


def save_pairs(path: str | Path, pairs: list[AsrPair], vocab_text: int, vocab_speech: int, seed: int) -> None:
    save_corpus(path, [[p.speech, p.text] for p in pairs], CorpusHeader(vocab_text, vocab_speech, seed, ["speech", "text"]))


def load_pairs(path: str | Path) -> list[AsrPair]:
    header, records = load_corpus(path)
    if header.fields != ["speech", "text"]:
        raise ValueError(f"{path} is not an ASR pair corpus (fields {header.fields})")
    return [AsrPair(s, t) for s, t in records]
