"""End-to-end stage drivers shared by the CLI and the acceptance suite.

Each driver consumes a resolved RunConfig, runs one pipeline stage, and
writes its artifacts (manifests, checkpoints, JSONL logs, JSON reports, CSV
tables, PNG figures) under the output directory.
"""

from __future__ import annotations

import copy
import csv
import json
import os

from . import figures
from .adversary import Toggles, finetune
from .checkpoint import checkpoint_id, model_from_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import (
    SplitSpec,
    generate_synthetic_corpus,
    load_manifest,
    save_manifest,
    split_dataset,
)
from .encoders import DualEncoder
from .errors import ConfigError
from .evaluation import evaluate, transfer_eval
from .geotags import analyze_tags
from .pretrain import pretrain
from .seeding import stream_seed

MANIFEST_SOURCE = "manifest_source.jsonl"
MANIFEST_TARGET = "manifest_target.jsonl"
CKPT_PRETRAINED = "checkpoint_pretrained.bin"
CKPT_ADAPTED = "checkpoint_adapted.bin"


def write_jsonl(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def write_json(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def pretrain_split(records, seed: int):
    """The 7:1:2 split the pretraining stage uses, recomputable anywhere."""
    spec = SplitSpec(0.7, 0.1, 0.2, seed=stream_seed(seed, "pretrain.split"))
    return split_dataset(records, spec)


def _prepared(config: RunConfig) -> RunConfig:
    config = copy.deepcopy(config)
    config.resolve_seeds()
    config.ensure_vocab_covers_corpus()
    return config


# --- stage drivers ----------------------------------------------------------

def run_gen_data(config: RunConfig, out_dir: str) -> dict:
    config = _prepared(config)
    os.makedirs(out_dir, exist_ok=True)
    records_a, records_b = generate_synthetic_corpus(config.corpus)
    source_path = os.path.join(out_dir, MANIFEST_SOURCE)
    target_path = os.path.join(out_dir, MANIFEST_TARGET)
    save_manifest(records_a, source_path)
    save_manifest(records_b, target_path)
    return {"source_manifest": source_path, "target_manifest": target_path,
            "n_source": len(records_a), "n_target": len(records_b)}


def _load_domains(config: RunConfig, out_dir: str):
    source_path = os.path.join(out_dir, MANIFEST_SOURCE)
    target_path = os.path.join(out_dir, MANIFEST_TARGET)
    if not os.path.exists(source_path) or not os.path.exists(target_path):
        run_gen_data(config, out_dir)
    return load_manifest(source_path), load_manifest(target_path)


def run_pretrain(config: RunConfig, out_dir: str) -> dict:
    config = _prepared(config)
    os.makedirs(out_dir, exist_ok=True)
    records_a, _ = _load_domains(config, out_dir)
    model = DualEncoder(config.encoder)
    result = pretrain(model, records_a, config.pretrain, config.seed,
                      filter_config=config.filter)
    ckpt_path = os.path.join(out_dir, CKPT_PRETRAINED)
    save_checkpoint(result.model, ckpt_path)
    log_path = os.path.join(out_dir, "log_pretrain.jsonl")
    write_jsonl(result.log, log_path)

    report = evaluate(result.model, result.splits[2]).to_dict()
    report.update({
        "n_queries": len(result.splits[2]),
        "checkpoint_id": checkpoint_id(ckpt_path),
        "manifest_path": os.path.join(out_dir, MANIFEST_SOURCE),
        "best_epoch": result.best_epoch,
        "best_val_mean_recall": result.best_val_mean_recall,
    })
    write_json(report, os.path.join(out_dir, "report_pretrain.json"))
    figures.plot_pretrain_log(result.log, os.path.join(out_dir, "fig_pretrain_loss.png"))
    return {"checkpoint": ckpt_path, "log": log_path, "report": report}


def run_adapt(config: RunConfig, out_dir: str,
              toggles: Toggles | None = None) -> dict:
    config = _prepared(config)
    os.makedirs(out_dir, exist_ok=True)
    toggles = toggles if toggles is not None else config.toggles
    ckpt_path = os.path.join(out_dir, CKPT_PRETRAINED)
    if not os.path.exists(ckpt_path):
        raise ConfigError("adapt", f"missing pretrained checkpoint {ckpt_path}")
    pretrained = model_from_checkpoint(ckpt_path)
    records_a, records_b = _load_domains(config, out_dir)
    source_train = pretrain_split(records_a, config.seed)[0]

    result = finetune(pretrained, source_train, records_b, config.adapt,
                      toggles, config.seed, triplet=config.triplet,
                      curriculum_mode=config.curriculum.mode,
                      curriculum_increment=config.curriculum.increment)
    adapted_path = os.path.join(out_dir, CKPT_ADAPTED)
    save_checkpoint(result.model, adapted_path)
    log_path = os.path.join(out_dir, "log_finetune.jsonl")
    write_jsonl(result.log, log_path)

    comparison = transfer_eval(pretrained, result.model, result.target_splits[2])
    report = {
        "direct": comparison["direct"].to_dict(),
        "adapted": comparison["adapted"].to_dict(),
        "delta_mean_recall": comparison["delta_mean_recall"],
        "n_queries": len(result.target_splits[2]),
        "toggles": {"ss": toggles.ss, "cl": toggles.cl, "at": toggles.at},
        "checkpoint_id_pretrained": checkpoint_id(ckpt_path),
        "checkpoint_id_adapted": checkpoint_id(adapted_path),
        "manifest_path": os.path.join(out_dir, MANIFEST_TARGET),
    }
    write_json(report, os.path.join(out_dir, "report_transfer.json"))
    figures.plot_finetune_log(result.log, os.path.join(out_dir, "fig_finetune_loss.png"))
    return {"checkpoint": adapted_path, "log": log_path, "report": report}


def run_eval(config: RunConfig, out_dir: str,
             checkpoint: str | None = None, manifest: str | None = None) -> dict:
    config = _prepared(config)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = checkpoint or config.eval.checkpoint \
        or os.path.join(out_dir, CKPT_PRETRAINED)
    manifest_path = manifest or config.eval.manifest \
        or os.path.join(out_dir, MANIFEST_TARGET)
    if not os.path.exists(ckpt_path):
        raise ConfigError("eval.checkpoint", f"not found: {ckpt_path}")
    if not os.path.exists(manifest_path):
        raise ConfigError("eval.manifest", f"not found: {manifest_path}")
    model = model_from_checkpoint(ckpt_path)
    records = load_manifest(manifest_path)
    report = evaluate(model, records).to_dict()
    report.update({
        "n_queries": len(records),
        "checkpoint_id": checkpoint_id(ckpt_path),
        "manifest_path": manifest_path,
    })
    write_json(report, os.path.join(out_dir, "report_eval.json"))
    return {"report": report}


def shift_experiment(config: RunConfig, seed: int,
                     toggle_sets: dict[str, Toggles]) -> dict:
    """One synthetic-shift run: pretrain once, fine-tune per toggle set.

    Returns direct-transfer MeanR and adapted MeanR per configuration, all
    evaluated on the identical target test split.
    """
    config = copy.deepcopy(config)
    config.seed = seed
    config = _prepared(config)
    records_a, records_b = generate_synthetic_corpus(config.corpus)
    model = DualEncoder(config.encoder)
    pre = pretrain(model, records_a, config.pretrain, seed,
                   filter_config=config.filter)
    source_train = pre.splits[0]

    out: dict = {"seed": seed, "configs": {}}
    direct = None
    for name, toggles in toggle_sets.items():
        result = finetune(pre.model, source_train, records_b, config.adapt,
                          toggles, seed, triplet=config.triplet,
                          curriculum_mode=config.curriculum.mode,
                          curriculum_increment=config.curriculum.increment)
        if direct is None:
            direct = evaluate(pre.model, result.target_splits[2]).mean_recall
        adapted = evaluate(result.model, result.target_splits[2]).mean_recall
        out["configs"][name] = adapted
    out["direct"] = direct
    return out


ABLATION_SETS = {
    "full": Toggles(ss=True, cl=True, at=True),
    "no_ss": Toggles(ss=False, cl=True, at=True),
    "no_cl": Toggles(ss=True, cl=False, at=True),
    "no_at": Toggles(ss=True, cl=True, at=False),
}


def run_ablate(config: RunConfig, out_dir: str) -> dict:
    """The four toggle configurations across the configured seeds."""
    config = _prepared(config)
    os.makedirs(out_dir, exist_ok=True)
    seeds = config.ablate.seeds
    per_config: dict[str, list[float]] = {name: [] for name in ABLATION_SETS}
    direct: list[float] = []
    for seed in seeds:
        run = shift_experiment(config, seed, ABLATION_SETS)
        direct.append(run["direct"])
        for name in ABLATION_SETS:
            per_config[name].append(run["configs"][name])

    report = {
        "seeds": list(seeds),
        "direct": {"per_seed": direct, "mean": sum(direct) / len(direct)},
        "direct_mean": sum(direct) / len(direct),
        "configs": {
            name: {"per_seed": values, "mean": sum(values) / len(values)}
            for name, values in per_config.items()
        },
    }
    wins = 0
    for i in range(len(seeds)):
        full = per_config["full"][i]
        if all(full >= per_config[name][i] for name in ("no_ss", "no_cl", "no_at")):
            wins += 1
    report["full_config_wins"] = wins
    write_json(report, os.path.join(out_dir, "report_ablation.json"))

    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "seed", "mean_recall"])
        for name, values in per_config.items():
            for seed, value in zip(seeds, values):
                writer.writerow([name, seed, f"{value:.6f}"])
        for seed, value in zip(seeds, direct):
            writer.writerow(["direct", seed, f"{value:.6f}"])
    figures.plot_ablation(report, os.path.join(out_dir, "fig_ablation.png"))
    return {"report": report}


def run_analyze_tags(config: RunConfig, out_dir: str,
                     manifest: str | None = None) -> dict:
    config = _prepared(config)
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = manifest or config.eval.manifest \
        or os.path.join(out_dir, MANIFEST_TARGET)
    if not os.path.exists(manifest_path):
        raise ConfigError("analyze-tags", f"manifest not found: {manifest_path}")
    records = load_manifest(manifest_path)
    report = analyze_tags(records, config.analysis.k_clusters, config.seed)
    report["manifest_path"] = manifest_path
    write_json(report, os.path.join(out_dir, "report_tags.json"))

    with open(os.path.join(out_dir, "tag_frequency.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tag", "count"])
        for tag, count in report["frequencies"].items():
            writer.writerow([tag, count])
    if "projections" in report:
        figures.plot_tag_clusters(
            report["projections"], report["cluster_labels"], report["tags"],
            report["explained_variance"],
            os.path.join(out_dir, "fig_tag_clusters.png"))
    return {"report": report}
