"""End-to-end experiment steps shared by the CLI and the acceptance tests.

Everything is regenerated from an :class:`ExperimentConfig` and its seeds:
corpora, initial weights, surgery randomness and batch order.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace

import numpy as np

from depthup import data as D
from depthup import evaluation as E
from depthup import surgery as S
from depthup.config import ExperimentConfig
from depthup.model import Model
from depthup.training import AdamW, TrainConfig, TrainingLog, run_training

log = logging.getLogger(__name__)

MODES = ("depth", "full_ft", "lora")


@dataclass
class Datasets:
    text_train: list[np.ndarray]
    text_eval: list[np.ndarray]
    asr_train: list[D.AsrPair]
    asr_eval: list[D.AsrPair]


def build_datasets(cfg: ExperimentConfig) -> Datasets:
    d = cfg.data
    s = d.seed * 1000
    text_train = D.gen_text_corpus(d.text, d.n_text_train, seed=s + 1)
    text_eval = D.gen_text_corpus(d.text, d.n_text_eval, seed=s + 2)
    asr_train = D.gen_asr_pairs(D.gen_text_corpus(d.asr_text, d.n_asr_train, seed=s + 3), d.codebook, seed=s + 4)
    asr_eval = D.gen_asr_pairs(D.gen_text_corpus(d.asr_text, d.n_asr_eval, seed=s + 5), d.codebook, seed=s + 6)
    return Datasets(text_train, text_eval, asr_train, asr_eval)


def pretrain(cfg: ExperimentConfig, datasets: Datasets | None = None) -> tuple[Model, TrainingLog]:
    """Train the toy base LM on synthetic text, every parameter trainable."""
    datasets = datasets or build_datasets(cfg)
    model = Model.init(cfg.model, seed=cfg.seed)
    manifest = S.manifest_for(model, full_finetune=True)
    vt = cfg.model.vocab_text
    texts = datasets.text_train
    train_log, _ = run_training(
        model,
        manifest,
        lambda idx: D.make_text_batch([texts[i] for i in idx], vt, cfg.pretrain.max_context),
        len(texts),
        cfg.pretrain,
    )
    for t in model.named_parameters().values():
        t.requires_grad = False
    return model, train_log


def upscale(base: Model, cfg: ExperimentConfig) -> tuple[Model, S.FreezeManifest, S.UpscalePlan]:
    """Grow the vocabulary, then insert layers per ``cfg.surgery``."""
    sg = cfg.surgery
    plan = S.compute_placement(len(base.layers), sg.m, sg.strategy, sg.kind)
    grown = base
    if sg.v_speech:
        grown, _ = S.expand_vocabulary(base, sg.v_speech, seed=sg.seed)
    model, manifest = S.upscale(grown, plan, seed=sg.seed + 1)
    return model, manifest, plan


def lora_rank(cfg: ExperimentConfig, base_cfg=None) -> int:
    base_cfg = base_cfg or cfg.model
    if cfg.lora.rank != "auto":
        return int(cfg.lora.rank)
    sg = cfg.surgery
    target = S.depth_trainable_count(base_cfg, sg.m, sg.kind, sg.v_speech)
    return S.match_lora_rank(base_cfg, target, v_new=sg.v_speech)


def prepare(model: Model, cfg: ExperimentConfig, mode: str) -> tuple[Model, S.FreezeManifest]:
    """Model and manifest for an adaptation ``mode``.

    ``depth`` expects an up-scaled model.  ``full_ft`` and ``lora`` expect a
    model without added layers and grow its vocabulary if needed.  For
    ``full_ft`` the weights are copied first, so ``model`` is never mutated.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    has_added = any(layer.origin == S.ADDED for layer in model.layers)
    if mode == "depth":
        if not has_added:
            raise S.SurgeryError("depth mode needs an up-scaled checkpoint (run upscale first)")
        return model, S.manifest_for(model)
    if has_added:
        raise S.SurgeryError(f"{mode} mode needs a checkpoint without added layers")
    if model.config.vocab_speech == 0 and cfg.surgery.v_speech:
        model, _ = S.expand_vocabulary(model, cfg.surgery.v_speech, seed=cfg.surgery.seed)
    if mode == "full_ft":
        model = copy.deepcopy(model)
        return model, S.manifest_for(model, full_finetune=True)
    rank = lora_rank(cfg, replace(model.config, vocab_speech=0))
    alpha = cfg.lora.alpha
    return S.apply_lora(model, S.LoRAConfig(rank, alpha), seed=cfg.lora.seed)


def adapt(
    model: Model,
    manifest: S.FreezeManifest,
    cfg: ExperimentConfig,
    datasets: Datasets,
    train_cfg: TrainConfig | None = None,
    eval_hooks=None,
    on_checkpoint=None,
    opt: AdamW | None = None,
) -> tuple[TrainingLog, AdamW]:
    """Speech continual pre-training on the synthetic ASR pairs."""
    tc = train_cfg or cfg.adapt
    vt = cfg.model.vocab_text
    pairs = datasets.asr_train

    def make(idx):
        return D.make_batch([pairs[i] for i in idx], tc.max_context, vt, loss_on_speech=tc.loss_on_speech)

    return run_training(model, manifest, make, len(pairs), tc, eval_hooks, on_checkpoint, opt)


def evaluate(
    base: Model,
    model: Model,
    manifest: S.FreezeManifest,
    datasets: Datasets,
    method: str,
    strategy: str = "",
    kind: str = "",
    preservation: float = float("nan"),
) -> E.EvalReport:
    ppl_base = E.perplexity(base, datasets.text_eval)
    kept = E.perplexity(model, datasets.text_eval, restrict_to_text_vocab=True)
    dropped_model = S.drop_added_layers(model, manifest)
    dropped = E.perplexity(dropped_model, datasets.text_eval, restrict_to_text_vocab=True)
    return E.EvalReport(
        method=method,
        strategy=strategy,
        kind=kind,
        trainable_count=S.count_trainable(manifest),
        speech_token_error_rate=E.corpus_error_rate(model, datasets.asr_eval),
        text_ppl_base=ppl_base,
        text_ppl_adapted_kept=kept,
        text_ppl_adapted_dropped=dropped,
        preservation_max_abs_diff=preservation,
        recovery_exact=E.check_recovery(base, model, manifest),
    )
