"""Experiment orchestration: declarative config, stage caching, reports.

`run_pipeline` executes synth -> train-embedder -> extract -> train-diffusion
-> intervene -> sample -> evaluate -> segment-train/eval -> report. Stage
outputs land in directories keyed by a hash of everything that feeds them,
so re-running an unchanged config touches nothing and every emitted file is
reproducible byte for byte from (config, seed).
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .checkpoint import (
    load_byol,
    load_cascade,
    save_byol,
    save_cascade,
    save_segmenter,
)
from .diffusion import (
    CascadeConfig,
    DiffusionCascade,
    channels_from_pair,
    conditioning_batch,
    init_cascade,
    sample_cascade,
    train_stage,
)
from .downstream import SegmenterConfig, predict_mask, train_segmenter
from .embed import (
    ByolConfig,
    FeatureConfig,
    byol_embed,
    byol_train,
    make_embedder,
    mask_object,
    node_features,
)
from .errors import ConfigError, MissingArtifactError
from .graphcond import EncoderConfig
from .imageio import read_ppm, write_pgm16, write_ppm
from .interventions import InterventionSpec, apply_intervention
from .maskgraph import TissueGraph, build_graph, load_graph, save_graph
from .metrics import MetricsReport, aji, dice, fid, gaussian_stats, improved_precision_recall
from .synthdata import (
    LabeledMask,
    SynthConfig,
    build_dataset,
    config_hash,
    load_manifest,
    load_record,
)


@dataclass
class EvalConfig:
    knn_k: int = 3
    n_gen: int = 64


@dataclass
class DownstreamConfig:
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    n_pairs: int = 64
    n_eval: int = 32


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train: int = 64
    n_test: int = 16
    dataset: SynthConfig = field(default_factory=SynthConfig)
    embedder: ByolConfig = field(default_factory=ByolConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    diffusion: CascadeConfig = field(default_factory=CascadeConfig)
    interventions: list[InterventionSpec] = field(default_factory=list)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        cfg = cls()
        simple = {"seed": int, "n_train": int, "n_test": int}
        for key, cast in simple.items():
            if key in doc:
                setattr(cfg, key, cast(doc.pop(key)))
        if "dataset" in doc:
            d = doc.pop("dataset")
            d["counts"] = [tuple(x) for x in d.get("counts", [])] or None
            if d["counts"] is None:
                d.pop("counts")
            if "radii" in d:
                d["radii"] = [tuple(x) for x in d["radii"]]
            if "colors" in d:
                d["colors"] = [tuple(x) for x in d["colors"]]
            if "background" in d:
                d["background"] = tuple(d["background"])
            cfg.dataset = SynthConfig(**d)
        if "embedder" in doc:
            cfg.embedder = ByolConfig(**doc.pop("embedder"))
        if "features" in doc:
            cfg.features = FeatureConfig(**doc.pop("features"))
        if "encoder" in doc:
            cfg.encoder = EncoderConfig(**doc.pop("encoder"))
        if "diffusion" in doc:
            d = doc.pop("diffusion")
            for key in ("resolutions", "hidden", "blocks", "train_steps", "batch"):
                if key in d:
                    d[key] = tuple(d[key])
            cfg.diffusion = CascadeConfig(**d)
        if "interventions" in doc:
            cfg.interventions = [InterventionSpec(**s) for s in doc.pop("interventions")]
        if "evaluation" in doc:
            cfg.evaluation = EvalConfig(**doc.pop("evaluation"))
        if "downstream" in doc:
            d = doc.pop("downstream")
            if "segmenter" in d:
                d["segmenter"] = SegmenterConfig(**d["segmenter"])
            cfg.downstream = DownstreamConfig(**d)
        if doc:
            raise ConfigError(f"unknown config keys: {sorted(doc)}")
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        return cls.from_dict(doc)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _stage_dir(root: Path, name: str, key: str) -> Path:
    return root / f"{name}-{key[:12]}"


def _done(path: Path) -> Path:
    return path / ".done"


def _json_bytes(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("ascii")


# -- stage implementations -----------------------------------------------------


def stage_synth(cfg: ExperimentConfig, root: Path) -> Path:
    key = config_hash({"dataset": cfg.dataset.to_dict(), "seed": cfg.seed,
                       "n_train": cfg.n_train, "n_test": cfg.n_test})
    out = _stage_dir(root, "data", key)
    if _done(out).exists():
        _log(f"cache hit: synth ({key[:12]})")
        return out
    _log(f"synth -> {out.name}")
    build_dataset(cfg.dataset, cfg.n_train, cfg.n_test, cfg.seed, out)
    _done(out).write_bytes(key.encode())
    return out


def collect_crops(data_dir: Path, split: str = "train") -> np.ndarray:
    manifest = load_manifest(data_dir)
    crops = []
    for rec in manifest["records"]:
        if rec["split"] != split:
            continue
        image, mask = load_record(data_dir, rec)
        for inst in mask.instance_ids():
            crops.append(mask_object(image, mask, inst))
    if not crops:
        raise MissingArtifactError(f"no {split} crops in {data_dir}; run synth")
    return np.stack(crops)


def stage_embedder(cfg: ExperimentConfig, root: Path, data_dir: Path) -> Path:
    key = config_hash({"embedder": dataclasses.asdict(cfg.embedder),
                       "data": data_dir.name, "seed": cfg.seed})
    out = root / f"embedder-{key[:12]}.ckpt"
    if out.exists():
        _log(f"cache hit: train-embedder ({key[:12]})")
        return out
    _log(f"train-embedder -> {out.name}")
    crops = collect_crops(data_dir)
    params, history = byol_train(crops, cfg.embedder, rngmod.derive_key(cfg.seed, "byol"))
    save_byol(out, params)
    (root / f"embedder-{key[:12]}.loss.json").write_bytes(_json_bytes(history))
    return out


def extract_graphs(
    data_dir: Path,
    mode: str,
    byol_path: Path | None,
    out_dir: Path,
    d_object: int = 16,
    n_max: int = 16,
) -> list[str]:
    """Graph JSON per dataset record; returns the record ids."""
    manifest = load_manifest(data_dir)
    byol = load_byol(byol_path) if (mode == "extracted" and byol_path) else None
    if mode == "extracted" and byol is None:
        raise MissingArtifactError("extracted mode needs an embedder checkpoint")
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for rec in manifest["records"]:
        image, mask = load_record(data_dir, rec)
        embedder = make_embedder(mode, image, mask, byol, d_object)
        graph = build_graph(mask, embedder, embed_dim=d_object, n_max=n_max)
        save_graph(graph, out_dir / f"{rec['id']}.graph.json")
        ids.append(rec["id"])
    (out_dir / "split.json").write_bytes(
        _json_bytes({rec["id"]: rec["split"] for rec in manifest["records"]})
    )
    return ids


def stage_extract(cfg: ExperimentConfig, root: Path, data_dir: Path, byol_path: Path) -> Path:
    key = config_hash({"mode": cfg.features.mode, "data": data_dir.name,
                       "embedder": byol_path.name, "n_max": cfg.features.n_max})
    out = _stage_dir(root, "graphs", key)
    if _done(out).exists():
        _log(f"cache hit: extract ({key[:12]})")
        return out
    _log(f"extract -> {out.name}")
    extract_graphs(data_dir, cfg.features.mode, byol_path, out,
                   cfg.features.d_object, cfg.features.n_max)
    _done(out).write_bytes(key.encode())
    return out


def load_graph_split(graph_dir: Path) -> tuple[list[TissueGraph], list[TissueGraph]]:
    split_file = graph_dir / "split.json"
    if not split_file.exists():
        raise MissingArtifactError(f"{graph_dir} has no split.json; run extract")
    split = json.loads(split_file.read_text())
    train, test = [], []
    for sample_id in sorted(split):
        g = load_graph(graph_dir / f"{sample_id}.graph.json")
        (train if split[sample_id] == "train" else test).append(g)
    return train, test


def _training_arrays(cfg: ExperimentConfig, data_dir: Path, graph_dir: Path):
    manifest = load_manifest(data_dir)
    split = json.loads((graph_dir / "split.json").read_text())
    stacks, graphs = [], []
    for rec in manifest["records"]:
        if split.get(rec["id"]) != "train":
            continue
        image, mask = load_record(data_dir, rec)
        stacks.append(channels_from_pair(image, mask, cfg.dataset.n_classes))
        graphs.append(load_graph(graph_dir / f"{rec['id']}.graph.json"))
    feats = [node_features(g, cfg.features, cfg.diffusion.image_size) for g in graphs]
    cond = conditioning_batch(graphs, feats, cfg.encoder)
    return np.stack(stacks), graphs, cond


def stage_train_diffusion(
    cfg: ExperimentConfig, root: Path, data_dir: Path, graph_dir: Path
) -> Path:
    key = config_hash({"diffusion": dataclasses.asdict(cfg.diffusion),
                       "encoder": dataclasses.asdict(cfg.encoder),
                       "graphs": graph_dir.name, "seed": cfg.seed})
    out = root / f"cascade-{key[:12]}.ckpt"
    if out.exists():
        _log(f"cache hit: train-diffusion ({key[:12]})")
        return out
    stacks, graphs, cond = _training_arrays(cfg, data_dir, graph_dir)
    cascade = init_cascade(cfg.diffusion, cfg.encoder, cfg.features,
                           rngmod.derive_key(cfg.seed, "cascade-init"))
    losses = {}
    for stage_idx in range(len(cfg.diffusion.resolutions)):
        _log(f"train-diffusion stage {stage_idx} -> {out.name}")
        losses[str(stage_idx)] = train_stage(
            cascade, stage_idx, stacks, cond, rngmod.derive_key(cfg.seed, "train", stage_idx)
        )
    save_cascade(out, cascade)
    (root / f"cascade-{key[:12]}.loss.json").write_bytes(_json_bytes(losses))
    return out


def run_interventions(
    graphs: list[TissueGraph],
    specs: list[InterventionSpec],
    seed: int,
    out_dir: Path,
    n_max: int = 16,
    image_size: int = 32,
    n_classes: int = 3,
) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s_idx, spec in enumerate(specs):
        for k in range(spec.count):
            g = apply_intervention(
                graphs, spec, index=k, seed=rngmod.derive_key(seed, "iv", s_idx),
                n_max=n_max, image_size=image_size, n_classes=n_classes,
            )
            path = out_dir / f"{spec.kind}_{s_idx:02d}_{k:04d}.graph.json"
            save_graph(g, path)
            paths.append(path)
    return paths


def stage_intervene(cfg: ExperimentConfig, root: Path, graph_dir: Path) -> Path | None:
    if not cfg.interventions:
        return None
    key = config_hash({"interventions": [dataclasses.asdict(s) for s in cfg.interventions],
                       "graphs": graph_dir.name, "seed": cfg.seed})
    out = _stage_dir(root, "intervened", key)
    if _done(out).exists():
        _log(f"cache hit: intervene ({key[:12]})")
        return out
    _log(f"intervene -> {out.name}")
    train_graphs, _ = load_graph_split(graph_dir)
    run_interventions(train_graphs, cfg.interventions, cfg.seed, out,
                      cfg.features.n_max, cfg.diffusion.image_size,
                      cfg.dataset.n_classes)
    _done(out).write_bytes(key.encode())
    return out


def write_samples(
    outputs: list[tuple[np.ndarray, LabeledMask]], out_dir: Path, prefix: str = "g"
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (image, mask) in enumerate(outputs):
        name = f"{prefix}{i:05d}"
        write_ppm(out_dir / f"{name}.ppm", image)
        write_pgm16(out_dir / f"{name}.pgm", mask.grid)
        (out_dir / f"{name}.classes.json").write_bytes(
            _json_bytes({str(k): v for k, v in sorted(mask.classes.items())})
        )


def sample_graphs_to_dir(
    cascade: DiffusionCascade,
    graphs: list[TissueGraph],
    out_dir: Path,
    seed: int,
    gamma: float | None = None,
    steps: int | None = None,
    batch: int = 64,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    done = 0
    while done < len(graphs):
        chunk = graphs[done : done + batch]
        outs = sample_cascade(
            chunk, cascade, gamma=gamma, steps=steps,
            seed=rngmod.derive_key(seed, "chunk", done),
        )
        for i, (image, mask) in enumerate(outs):
            name = f"g{done + i:05d}"
            write_ppm(out_dir / f"{name}.ppm", image)
            write_pgm16(out_dir / f"{name}.pgm", mask.grid)
            (out_dir / f"{name}.classes.json").write_bytes(
                _json_bytes({str(k): v for k, v in sorted(mask.classes.items())})
            )
        done += len(chunk)


def stage_sample(cfg: ExperimentConfig, root: Path, ckpt: Path, graph_dir: Path,
                 intervened_dir: Path | None) -> Path:
    key = config_hash({"ckpt": ckpt.name, "graphs": graph_dir.name,
                       "intervened": intervened_dir.name if intervened_dir else None,
                       "n_gen": cfg.evaluation.n_gen, "seed": cfg.seed,
                       "steps": cfg.diffusion.sample_steps, "gamma": cfg.diffusion.gamma})
    out = _stage_dir(root, "samples", key)
    if _done(out).exists():
        _log(f"cache hit: sample ({key[:12]})")
        return out
    _log(f"sample -> {out.name}")
    cascade = load_cascade(ckpt)
    _, test_graphs = load_graph_split(graph_dir)
    pool = list(test_graphs)
    if intervened_dir is not None:
        pool += [load_graph(p) for p in sorted(intervened_dir.glob("*.graph.json"))]
    if not pool:
        raise MissingArtifactError("no graphs to sample from; run extract")
    picks = [pool[i % len(pool)] for i in range(cfg.evaluation.n_gen)]
    sample_graphs_to_dir(cascade, picks, out, rngmod.derive_key(cfg.seed, "sample"))
    _done(out).write_bytes(key.encode())
    return out


def _load_dir_images(path: Path) -> list[np.ndarray]:
    files = sorted(path.glob("*.ppm"))
    if not files:
        raise MissingArtifactError(f"no .ppm images under {path}")
    return [read_ppm(f) for f in files]


def _load_dir_pairs(path: Path) -> list[tuple[np.ndarray, LabeledMask]]:
    from .synthdata import load_mask

    pairs = []
    for f in sorted(path.glob("*.ppm")):
        mask_path = f.with_suffix(".pgm")
        if not mask_path.exists():
            raise MissingArtifactError(f"missing mask for {f}")
        pairs.append((read_ppm(f), load_mask(mask_path)))
    if not pairs:
        raise MissingArtifactError(f"no image/mask pairs under {path}")
    return pairs


def evaluate_dirs(real_dir: Path, gen_dir: Path, byol_path: Path, k: int = 3) -> MetricsReport:
    """IP/IR/FID between two image directories using embedder features."""
    byol = load_byol(byol_path)
    real = np.stack(_load_dir_images(real_dir))
    gen = np.stack(_load_dir_images(gen_dir))
    feats_r = byol_embed(byol, real)
    feats_g = byol_embed(byol, gen)
    ip, ir = improved_precision_recall(feats_r, feats_g, k=k)
    mu_r, cov_r = gaussian_stats(feats_r)
    mu_g, cov_g = gaussian_stats(feats_g)
    report = MetricsReport(ip=ip, ir=ir, fid=fid(mu_r, cov_r, mu_g, cov_g))
    report.validate()
    return report


def segment_eval(model, pairs) -> MetricsReport:
    dices, ajis = [], []
    for image, mask in pairs:
        pred = predict_mask(image, model)
        dices.append(dice(pred, mask))
        ajis.append(aji(pred, mask))
    report = MetricsReport(dice=float(np.mean(dices)), aji=float(np.mean(ajis)))
    report.validate()
    return report


def _test_real_dir(cfg: ExperimentConfig, root: Path, data_dir: Path) -> Path:
    """Materialize the test-split images as a flat directory for evaluate."""
    out = data_dir / "test-flat"
    if _done(out).exists():
        return out
    manifest = load_manifest(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in manifest["records"]:
        if rec["split"] != "test":
            continue
        image, mask = load_record(data_dir, rec)
        write_ppm(out / f"{rec['id']}.ppm", image)
        write_pgm16(out / f"{rec['id']}.pgm", mask.grid)
        (out / f"{rec['id']}.classes.json").write_bytes(
            _json_bytes({str(k): v for k, v in sorted(mask.classes.items())})
        )
    _done(out).write_bytes(b"test-flat")
    return out


def run_pipeline(cfg: ExperimentConfig, out_root: str | Path) -> dict:
    """Execute every requested stage; returns the combined report document."""
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    data_dir = stage_synth(cfg, root)
    byol_path = stage_embedder(cfg, root, data_dir)
    graph_dir = stage_extract(cfg, root, data_dir, byol_path)
    ckpt = stage_train_diffusion(cfg, root, data_dir, graph_dir)
    intervened = stage_intervene(cfg, root, graph_dir)
    samples_dir = stage_sample(cfg, root, ckpt, graph_dir, intervened)
    real_dir = _test_real_dir(cfg, root, data_dir)

    eval_key = config_hash({"eval": dataclasses.asdict(cfg.evaluation),
                            "samples": samples_dir.name, "embedder": byol_path.name})
    eval_path = root / f"fidelity-{eval_key[:12]}.json"
    if eval_path.exists():
        _log(f"cache hit: evaluate ({eval_key[:12]})")
        doc = json.loads(eval_path.read_text())
        gen_report = MetricsReport(ip=doc.get("ip"), ir=doc.get("ir"), fid=doc.get("fid"))
    else:
        _log(f"evaluate -> {eval_path.name}")
        gen_report = evaluate_dirs(real_dir, samples_dir, byol_path, cfg.evaluation.knn_k)
        eval_path.write_bytes(_json_bytes(gen_report.to_dict()))

    # downstream: train on generated pairs, evaluate on held-out real pairs
    key = config_hash({"downstream": dataclasses.asdict(cfg.downstream),
                       "samples": samples_dir.name, "seed": cfg.seed})
    seg_path = root / f"segmenter-{key[:12]}.ckpt"
    seg_metrics_path = root / f"segmetrics-{key[:12]}.json"
    if seg_metrics_path.exists():
        _log(f"cache hit: segment-train/eval ({key[:12]})")
        doc = json.loads(seg_metrics_path.read_text())
        seg_report = MetricsReport(dice=doc.get("dice"), aji=doc.get("aji"))
    else:
        _log(f"segment-train/eval -> {seg_metrics_path.name}")
        gen_pairs = _load_dir_pairs(samples_dir)[: cfg.downstream.n_pairs]
        seg_cfg = dataclasses.replace(cfg.downstream.segmenter,
                                      n_classes=cfg.dataset.n_classes)
        model, _ = train_segmenter(gen_pairs, seg_cfg, rngmod.derive_key(cfg.seed, "seg"))
        save_segmenter(seg_path, model)
        test_pairs = _load_dir_pairs(real_dir)[: cfg.downstream.n_eval]
        seg_report = segment_eval(model, test_pairs)
        seg_metrics_path.write_bytes(_json_bytes(seg_report.to_dict()))

    combined = MetricsReport(
        ip=gen_report.ip, ir=gen_report.ir, fid=gen_report.fid,
        dice=seg_report.dice, aji=seg_report.aji,
    )
    method = f"real+{cfg.features.mode}"
    if cfg.interventions:
        method = "+".join(s.kind for s in cfg.interventions) + f"+{cfg.features.mode}"
    table = {
        "schema": "gcdlab-table-1",
        "config_hash": cfg.hash(),
        "rows": [dict(method=method, **{k: v for k, v in combined.to_dict().items()
                                        if k != "schema"})],
    }
    report_path = root / "report.json"
    report_path.write_bytes(_json_bytes(table))
    (root / "metrics.json").write_bytes(_json_bytes(combined.to_dict()))
    _log(f"report -> {report_path}")
    return table


def combine_reports(paths: list[Path], out_path: Path) -> dict:
    """Merge per-method metric reports into one ablation-style table."""
    rows = []
    for p in sorted(paths):
        doc = json.loads(Path(p).read_text())
        if "rows" in doc:
            rows.extend(doc["rows"])
        else:
            method = doc.get("method", Path(p).stem)
            rows.append({"method": method,
                         **{k: doc[k] for k in ("ip", "ir", "fid", "dice", "aji")
                            if k in doc}})
    table = {"schema": "gcdlab-table-1", "rows": rows}
    Path(out_path).write_bytes(_json_bytes(table))
    return table
