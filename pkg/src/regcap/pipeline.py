"""Run-level entry points: train, evaluate, caption and ablate from a resolved RunConfig."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_module, save_module
from .config import RunConfig, parse_arms
from .data import SPLITS, assign_splits, clean_entries, load_manifest
from .errors import ConfigError, ContractError, DataError
from .heatmap import write_alpha
from .imaging import preprocess_image, read_pnm
from .inference import caption_images, eval_pairs
from .metrics import EvalPair, StaticEmbeddings, aggregate, evaluate, load_synonyms, paired_test, per_item_scores
from .model import CaptionModel
from .tensor import Rng
from .tokenizer import Vocab
from .train import JsonlLogger, make_samples, train_loop

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    vocab: Vocab
    splits: dict  # split name -> list of CaptionSample
    audit: dict


def load_corpus(cfg: RunConfig) -> Corpus:
    """Vocab, cleaned manifest, article-level splits (audited) and tokenized samples."""
    if not cfg["data.vocab"]:
        raise ConfigError("data.vocab is not set")
    if not cfg["data.manifest"]:
        raise ConfigError("data.manifest is not set")
    vocab_path = Path(cfg["data.vocab"])
    if not vocab_path.exists():
        raise DataError(f"vocab file not found: {vocab_path}")
    vocab = Vocab.load(vocab_path)
    entries = clean_entries(load_manifest(cfg["data.manifest"]).entries)
    entries, audit = assign_splits(entries, cfg["data.split_ratios"], cfg["data.split_seed"])
    max_len = cfg["train.max_len"]
    splits = {s: make_samples([e for e in entries if e.split == s], vocab, max_len) for s in SPLITS}
    return Corpus(vocab, splits, audit)


def build_model(cfg: RunConfig, vocab: Vocab, seed: int, mode: str | None = None, tokens: int | None = None):
    values = dict(cfg.values)
    if mode is not None:
        values["regional.mode"] = mode
    if tokens is not None:
        values["regional.tokens"] = tokens
    model_cfg = RunConfig(values, cfg.out_dir).model_config(len(vocab))
    model_cfg.pad_id = vocab.pad_id
    return CaptionModel(model_cfg, seed=seed)


def _dump_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _alpha_snapshotter(out_dir: Path, samples, count: int):
    """Callback writing region weights for the first ``count`` validation images after each epoch."""
    chosen = samples[:count]

    def snap(epoch, model, record):
        if not chosen:
            return
        size = model.cfg.encoder.image_size
        images = np.stack([preprocess_image(s.image, size) for s in chosen])
        was_training = model.training
        model.eval()
        with T.no_grad():
            grid, reg = model.encode(images)
        if was_training:
            model.train()
        write_alpha(out_dir / f"alpha_epoch{epoch:03d}.json", reg.alpha.data, grid.height, grid.width,
                    [s.id for s in chosen])

    return snap


def train_arm(cfg: RunConfig, corpus: Corpus, out_dir: Path, mode: str | None = None, tokens: int | None = None):
    """Train one model per seed under ``out_dir``; returns (records, models, aggregate)."""
    tcfg = cfg.train_config()
    aug = cfg.augment_config()
    size = cfg["encoder.image_size"]
    logger = JsonlLogger(out_dir / "train_log.jsonl")
    records, models = [], []
    for seed in tcfg.seeds:
        model = build_model(cfg, corpus.vocab, seed, mode, tokens)
        seed_dir = out_dir / f"seed-{seed}"
        rec = train_loop(model, corpus.splits["train"], corpus.splits["val"], tcfg, seed, size, aug, logger,
                         _alpha_snapshotter(seed_dir, corpus.splits["val"], cfg["run.alpha_snapshots"]),
                         unfreeze_after=cfg["decoder.unfreeze_after"])
        ckpt = seed_dir / "best.ckpt"
        save_module(ckpt, model, {"seed": seed, "best_epoch": rec.best_epoch, "stream_hash": rec.stream_hash})
        rec.best_checkpoint = str(ckpt)
        _dump_json(seed_dir / "record.json", rec.to_dict())
        records.append(rec)
        models.append(model)
    summary = aggregate([r.best_val_loss for r in records])
    return records, models, summary


def run_train(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    cfg.write()
    corpus = load_corpus(cfg)
    _dump_json(out / "split_audit.json", corpus.audit)
    if not corpus.splits["train"] or not corpus.splits["val"]:
        raise DataError("train and val splits must both be non-empty")
    records, _, summary = train_arm(cfg, corpus, out)
    result = {"records": [r.to_dict() for r in records], "best_val_loss": summary}
    _dump_json(out / "aggregate.json", result)
    return result


def _default_checkpoint(cfg: RunConfig) -> Path:
    if cfg["eval.checkpoint"]:
        return Path(cfg["eval.checkpoint"])
    return Path(cfg.out_dir) / f"seed-{cfg['train.seeds'][0]}" / "best.ckpt"


def load_trained(cfg: RunConfig, vocab: Vocab, checkpoint: Path | None = None) -> CaptionModel:
    path = checkpoint or _default_checkpoint(cfg)
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    model = build_model(cfg, vocab, cfg["train.seeds"][0])
    load_module(path, model)
    model.eval()
    return model


def model_embeddings(model: CaptionModel, vocab: Vocab) -> StaticEmbeddings:
    """Whole-word rows of the decoder's token table, for embedding F1 when no file is configured."""
    matrix = model.decoder.embedding.matrix.data
    return StaticEmbeddings({p: matrix[i] for i, p in enumerate(vocab.pieces) if not p.startswith(("[", "##"))})


def _eval_extras(cfg: RunConfig, model: CaptionModel, vocab: Vocab):
    if cfg["eval.embeddings"]:
        emb = StaticEmbeddings.load(cfg["eval.embeddings"])
    else:
        emb = model_embeddings(model, vocab)
    syn = load_synonyms(cfg["eval.synonyms"]) if cfg["eval.synonyms"] else None
    return emb, syn


def run_eval(cfg: RunConfig, split: str | None = None) -> dict:
    """Decode a split with the configured DecodeConfig and score it.

    Every seed checkpoint of the run is evaluated (or just ``eval.checkpoint``
    when set); the first one gives the main report, the rest feed the per-seed
    aggregate. ``eval.compare`` checkpoints are paired-tested against it.
    With ``eval.pairs`` set, a JSONL file of hypothesis/reference pairs is
    scored directly and no model is loaded.
    """
    cfg = RunConfig({**cfg.values, "run.split": split or cfg["run.split"]}, cfg.out_dir)
    split = cfg["run.split"]
    out = Path(cfg.out_dir)
    cfg.write("eval_config.resolved")
    if cfg["eval.pairs"]:
        return score_pairs_file(cfg)
    corpus = load_corpus(cfg)
    samples = corpus.splits[split]
    if not samples:
        raise DataError(f"split {split!r} is empty")
    dcfg = cfg.decode_config(corpus.vocab)
    if cfg["eval.checkpoint"]:
        checkpoints = [Path(cfg["eval.checkpoint"])]
    else:
        checkpoints = [out / f"seed-{seed}" / "best.ckpt" for seed in cfg["train.seeds"]]
    models = [load_trained(cfg, corpus.vocab, c) for c in checkpoints]
    emb, syn = _eval_extras(cfg, models[0], corpus.vocab)
    pairs, caps = eval_pairs(models[0], samples, corpus.vocab, dcfg)
    report = evaluate(pairs, emb, syn)
    if len(models) > 1:
        seed_scores = [report.scores] + [evaluate(eval_pairs(m, samples, corpus.vocab, dcfg)[0], emb, syn).scores
                                         for m in models[1:]]
        report.seeds = {metric: aggregate([s[metric] for s in seed_scores]) for metric in report.scores}
    base_items = per_item_scores(pairs, emb, syn)
    for i, other in enumerate(cfg["eval.compare"]):
        other_pairs, _ = eval_pairs(load_trained(cfg, corpus.vocab, Path(other)), samples, corpus.vocab, dcfg)
        other_items = per_item_scores(other_pairs, emb, syn)
        for metric in base_items:
            res = paired_test(base_items[metric], other_items[metric], cfg["eval.test"], cfg["eval.iters"],
                              Rng(cfg["train.seeds"][0]).child(f"paired-{i}-{metric}"))
            report.significance[f"{metric} vs {other}"] = vars(res)
    _write_captions(out / f"captions_{split}.jsonl", samples, caps)
    _dump_json(out / f"eval_{split}.json", {**report.to_dict(), "decode": vars(dcfg)})
    (out / f"eval_{split}.txt").write_text(report.to_table(), encoding="utf-8")
    return {"report": report, "decode": vars(dcfg), "pairs": pairs}


def read_pairs(path) -> list:
    """JSONL rows ``{id, hypothesis, reference, modality}`` as EvalPairs."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"pairs file not found: {path}")
    pairs = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            pairs.append(EvalPair.from_text(row["hypothesis"], row["reference"], row.get("modality", "OTHER"),
                                            str(row.get("id", n))))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{n}: bad pair row ({exc})") from None
    if not pairs:
        raise DataError(f"{path}: no pairs")
    return pairs


def score_pairs_file(cfg: RunConfig) -> dict:
    pairs = read_pairs(cfg["eval.pairs"])
    emb = StaticEmbeddings.load(cfg["eval.embeddings"]) if cfg["eval.embeddings"] else None
    syn = load_synonyms(cfg["eval.synonyms"]) if cfg["eval.synonyms"] else None
    report = evaluate(pairs, emb, syn)
    out = Path(cfg.out_dir)
    _dump_json(out / "eval_pairs.json", report.to_dict())
    (out / "eval_pairs.txt").write_text(report.to_table(), encoding="utf-8")
    return {"report": report, "decode": None, "pairs": pairs}


def _write_captions(path, samples, caps):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s, c in zip(samples, caps):
            fh.write(json.dumps({"id": s.id, "hypothesis": c.text, "reference": s.caption,
                                 "modality": s.modality, "score": c.score}) + "\n")


def run_caption(cfg: RunConfig, image_paths) -> list:
    """Caption each image; writes ``captions.jsonl`` and ``alpha.json`` under the output directory."""
    if not cfg["data.vocab"]:
        raise ConfigError("data.vocab is not set")
    vocab_path = Path(cfg["data.vocab"])
    if not vocab_path.exists():
        raise DataError(f"vocab file not found: {vocab_path}")
    vocab = Vocab.load(vocab_path)
    model = load_trained(cfg, vocab)
    images = [read_pnm(p) for p in image_paths]
    caps = caption_images(model, images, vocab, cfg.decode_config(vocab))
    out = Path(cfg.out_dir)
    cfg.write("caption_config.resolved")
    g = model.cfg.encoder.final_grid
    write_alpha(out / "alpha.json", np.stack([c.alpha for c in caps]), g, g, [str(p) for p in image_paths])
    with open(out / "captions.jsonl", "w", encoding="utf-8") as fh:
        for p, c in zip(image_paths, caps):
            fh.write(json.dumps({"image": str(p), "caption": c.text, "score": c.score}) + "\n")
    return caps


def run_ablation(cfg: RunConfig) -> dict:
    """Train and evaluate each (mode, K) arm on identical data and seeds; pairwise tests between arms."""
    n = cfg.model_config().encoder.num_regions
    arms, dupes = parse_arms(cfg["ablate.arms"], n)
    for k in cfg["ablate.k_sweep"]:
        arm = ("reweight", int(k))
        (dupes if arm in arms else arms).append(arm)
    if dupes:
        log.warning("duplicate ablation arms dropped: %s", dupes)
    if len(arms) < 2:
        raise ConfigError("an ablation needs at least two distinct arms")
    out = Path(cfg.out_dir)
    cfg.write()
    corpus = load_corpus(cfg)
    split = cfg["run.split"]
    samples = corpus.splits[split]
    if not samples:
        raise DataError(f"split {split!r} is empty")
    dcfg = cfg.decode_config(corpus.vocab)
    rows, items, hashes = [], {}, {}
    emb = syn = None
    for mode, k in arms:
        name = f"{mode}:K={k}"
        records, models, _ = train_arm(cfg, corpus, out / f"{mode}-K{k}", mode, k)
        hashes[name] = [r.stream_hash for r in records]
        per_seed, per_seed_items = [], []
        if emb is None:
            # one shared table so every arm is scored against the same embeddings
            emb, syn = _eval_extras(cfg, models[0], corpus.vocab)
        for model in models:
            pairs, _ = eval_pairs(model, samples, corpus.vocab, dcfg)
            per_seed.append(evaluate(pairs, emb, syn).scores)
            per_seed_items.append(per_item_scores(pairs, emb, syn))
        metrics = list(per_seed[0])
        items[name] = {m: np.mean([s[m] for s in per_seed_items], axis=0) for m in per_seed_items[0]}
        rows.append({"arm": name, "mode": mode, "K": k,
                     "scores": {m: aggregate([s[m] for s in per_seed]) for m in metrics}})
    reference = next(iter(hashes.values()))
    for name, h in hashes.items():
        if h != reference:
            raise ContractError(f"arm {name} consumed a different batch stream")
    tests = {}
    for (i, a), (j, b) in itertools.combinations(enumerate(items), 2):
        for metric in items[a]:
            res = paired_test(items[a][metric], items[b][metric], cfg["eval.test"], cfg["eval.iters"],
                              Rng(cfg["train.seeds"][0]).child(f"ablate-{i}-{j}-{metric}"))
            tests[f"{a} vs {b}: {metric}"] = vars(res)
    k_rows = [r for r in rows if r["mode"] == "reweight"]
    report = {"arms": rows, "paired_tests": tests, "stream_hashes": hashes, "duplicates_dropped": dupes,
              "k_sweep": [{"K": r["K"], **{m: r["scores"][m]["mean"] for m in r["scores"]}} for r in k_rows],
              "decode": vars(dcfg), "split": split}
    _dump_json(out / "ablation.json", report)
    (out / "ablation.txt").write_text(ablation_table(report), encoding="utf-8")
    return report


def ablation_table(report: dict) -> str:
    metrics = list(report["arms"][0]["scores"])
    lines = ["arm".ljust(18) + "".join(m.rjust(12) for m in metrics)]
    for row in report["arms"]:
        lines.append(row["arm"].ljust(18) + "".join(f"{row['scores'][m]['mean']:12.4f}" for m in metrics))
    for name, res in report["paired_tests"].items():
        lines.append(f"{name}: p={res['p_value']:.4g} (diff {res['observed_diff']:+.4f})")
    return "\n".join(lines) + "\n"
