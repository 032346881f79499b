"""Text perplexity, greedy transcription, token error rate, and the
preservation / recovery checks."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from depthup.data import make_text_batch, special_ids
from depthup.model import Model
from depthup.surgery import FreezeManifest, SurgeryError, drop_added_layers
from depthup.tensor import log_softmax


@dataclass
class EvalReport:
    method: str = ""
    strategy: str = ""
    kind: str = ""
    trainable_count: int = 0
    speech_token_error_rate: float = float("nan")
    text_ppl_base: float = float("nan")
    text_ppl_adapted_kept: float = float("nan")
    text_ppl_adapted_dropped: float = float("nan")
    preservation_max_abs_diff: float = float("nan")
    recovery_exact: bool = False

    @property
    def delta_ppl_kept(self) -> float:
        """Perplexity increase over the base model; 0.0 means no degradation."""
        return self.text_ppl_adapted_kept - self.text_ppl_base

    @property
    def delta_ppl_dropped(self) -> float:
        return self.text_ppl_adapted_dropped - self.text_ppl_base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delta_ppl_kept"] = self.delta_ppl_kept
        d["delta_ppl_dropped"] = self.delta_ppl_dropped
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writerow(csv_record(self))
        return buf.getvalue()


CSV_COLUMNS = [
    "run",
    "method",
    "strategy",
    "kind",
    "trainable",
    "speech_ter",
    "text_ppl_base",
    "text_ppl_kept",
    "text_ppl_dropped",
    "delta_ppl_kept",
    "delta_ppl_dropped",
]


def csv_record(report: EvalReport, run: str = "") -> dict:
    return {
        "run": run,
        "method": report.method,
        "strategy": report.strategy,
        "kind": report.kind,
        "trainable": report.trainable_count,
        "speech_ter": f"{report.speech_token_error_rate:.4f}",
        "text_ppl_base": f"{report.text_ppl_base:.6f}",
        "text_ppl_kept": f"{report.text_ppl_adapted_kept:.6f}",
        "text_ppl_dropped": f"{report.text_ppl_adapted_dropped:.6f}",
        "delta_ppl_kept": f"{report.delta_ppl_kept:.6f}",
        "delta_ppl_dropped": f"{report.delta_ppl_dropped:.6f}",
    }


# --------------------------------------------------------------------------
# text perplexity
# --------------------------------------------------------------------------


def sequence_nll(
    model: Model, sequences: list[np.ndarray], restrict_to_text_vocab: bool = True, batch_size: int = 64
) -> tuple[float, int]:
    """Summed next-token NLL (float64) and the number of scored tokens."""
    if not sequences:
        raise ValueError("perplexity needs at least one sequence")
    vt = model.config.vocab_text
    total, count = 0.0, 0
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        for s in chunk:
            if np.asarray(s).max() >= vt:
                raise ValueError("perplexity input must use text-vocabulary ids only")
        batch = make_text_batch(chunk, vt)
        logits = model(batch.ids[:, :-1], batch.speech_mask[:, :-1]).data
        if restrict_to_text_vocab:
            logits = logits[..., :vt]
        logp = log_softmax(logits.astype(np.float64))
        targets = batch.ids[:, 1:]
        mask = batch.loss_mask[:, 1:]
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        total -= float(picked[mask].sum())
        count += int(mask.sum())
    return total, count


def perplexity(model: Model, sequences: list[np.ndarray], restrict_to_text_vocab: bool = True) -> float:
    """``exp`` of the mean next-token NLL over text sequences (EOS included)."""
    total, count = sequence_nll(model, sequences, restrict_to_text_vocab)
    return math.exp(total / count)


# --------------------------------------------------------------------------
# transcription
# --------------------------------------------------------------------------


def greedy_transcribe_batch(model: Model, speech: list[np.ndarray], max_len: int) -> list[np.ndarray]:
    """Greedy decoding of ``[speech..., SEP]`` prompts until EOS or ``max_len``.

    Prompts of different lengths share one padded forward per step; causal
    attention keeps the right padding from affecting real positions.
    """
    vt = model.config.vocab_text
    pad, sep, eos = special_ids(vt)
    bsz = len(speech)
    if bsz == 0 or max_len <= 0:
        return [np.zeros(0, np.int64) for _ in range(bsz)]
    prompt_len = np.array([s.size + 1 for s in speech])
    width = int(prompt_len.max()) + max_len
    ids = np.full((bsz, width), pad, dtype=np.int64)
    speech_mask = np.zeros((bsz, width), dtype=bool)
    for r, s in enumerate(speech):
        if s.size and s.min() < vt:
            raise ValueError("speech prompt contains text-vocabulary ids")
        ids[r, : s.size] = s
        ids[r, s.size] = sep
        speech_mask[r, : s.size] = True
    cursor = prompt_len.copy()
    out: list[list[int]] = [[] for _ in range(bsz)]
    done = np.zeros(bsz, dtype=bool)
    rows = np.arange(bsz)
    for _ in range(max_len):
        upto = int(cursor.max())
        logits = model(ids[:, :upto], speech_mask[:, :upto]).data
        nxt = logits[rows, cursor - 1].argmax(axis=-1)
        for r in range(bsz):
            if done[r]:
                continue
            tok = int(nxt[r])
            if tok == eos:
                done[r] = True
                continue
            out[r].append(tok)
            ids[r, cursor[r]] = tok
            cursor[r] += 1
        if done.all():
            break
    return [np.asarray(o, dtype=np.int64) for o in out]


def greedy_transcribe(model: Model, speech_ids: np.ndarray, max_len: int) -> np.ndarray:
    return greedy_transcribe_batch(model, [np.asarray(speech_ids, np.int64)], max_len)[0]


@dataclass
class TranscriptionResult:
    hypothesis: np.ndarray
    reference: np.ndarray
    substitutions: int
    insertions: int
    deletions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def error_rate(self) -> float:
        return 100.0 * self.errors / len(self.reference)


def align(hyp, ref) -> TranscriptionResult:
    """Unit-cost Levenshtein alignment with an S/I/D breakdown."""
    hyp = list(np.asarray(hyp).tolist())
    ref = list(np.asarray(ref).tolist())
    if not ref:
        raise ValueError("reference must be non-empty")
    n, m = len(ref), len(hyp)
    # cost[i][j] = (total, subs, ins, dels) aligning ref[:i] with hyp[:j]
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            d = prev[j - 1]
            diag = (d[0] + (not same), d[1] + (not same), d[2], d[3])
            u = prev[j]
            up = (u[0] + 1, u[1], u[2], u[3] + 1)
            lft = cur[j - 1]
            left = (lft[0] + 1, lft[1], lft[2] + 1, lft[3])
            cur.append(min(diag, up, left, key=lambda c: c[0]))
        prev = cur
    total, s, i_, d_ = prev[m]
    return TranscriptionResult(np.asarray(hyp), np.asarray(ref), s, i_, d_)


def token_error_rate(hyp, ref) -> float:
    """``(S + I + D) / len(ref) * 100``."""
    return align(hyp, ref).error_rate


def corpus_error_rate(model: Model, pairs, max_extra: int = 4, batch_size: int = 64) -> float:
    """Pooled token error rate (total edits / total reference tokens) in percent."""
    edits, ref_len = 0, 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        max_len = max(p.text.size for p in chunk) + max_extra
        hyps = greedy_transcribe_batch(model, [p.speech for p in chunk], max_len)
        for h, p in zip(hyps, chunk):
            edits += align(h, p.text).errors
            ref_len += p.text.size
    return 100.0 * edits / ref_len


# --------------------------------------------------------------------------
# structural checks
# --------------------------------------------------------------------------


def check_function_preservation(base: Model, adapted: Model, trials: int = 10, T: int = 16, seed: int = 0) -> float:
    """Max |logit difference| over shared columns on random mixed inputs."""
    rng = np.random.default_rng(seed)
    shared_vocab = min(base.config.vocab_size, adapted.config.vocab_size)
    worst = 0.0
    for _ in range(trials):
        ids = rng.integers(0, shared_vocab, size=(1, T))
        a = base(ids).data[..., :shared_vocab]
        b = adapted(ids).data[..., :shared_vocab]
        worst = max(worst, float(np.abs(a.astype(np.float64) - b).max()))
    return worst


def check_recovery(base: Model, trained: Model, manifest: FreezeManifest, trials: int = 10, T: int = 16, seed: int = 0) -> bool:
    """True iff dropping the added capacity gives bit-identical base
    parameters and bit-identical text logits."""
    dropped = drop_added_layers(trained, manifest)
    if len(dropped.layers) != len(base.layers):
        raise SurgeryError(f"dropped model has {len(dropped.layers)} layers, base has {len(base.layers)}")
    ours = dropped.named_parameters()
    theirs = base.named_parameters()
    for name, t in theirs.items():
        if name == "embed.speech":
            continue
        if name not in ours:
            raise SurgeryError(f"parameter {name} missing after drop")
        if t.shape != ours[name].shape or t.data.tobytes() != ours[name].data.tobytes():
            return False
    rng = np.random.default_rng(seed)
    vt = base.config.vocab_text
    for _ in range(trials):
        ids = rng.integers(0, vt, size=(1, T))
        a = base(ids).data[..., :vt]
        b = dropped(ids).data[..., :vt]
        if a.tobytes() != b.tobytes():
            return False
    return True
