"""End-to-end stages: sample -> quantize -> train -> generate -> stats/bench -> report.

A run directory holds every artifact plus ``manifest.json``, which records the
merged configuration, the generator names and the sha256 of every artifact each
stage read or wrote.  A stage refuses to run when an input no longer matches the
hash recorded by the stage that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .encoding import ComputationGraphSet, read_cgs, sample_computation_graphs, write_cgs
from .gnn import AGGREGATORS, AccuracyRecord, GnnConfig, read_bench_report, train_eval, write_bench_report
from .graph import Graph, SplitSpec, add_noisy_edges, biased_split, load_graph, uniform_split
from .metrics import (UNDEFINED, correlation_suite, duplicate_counts, stat_summary, write_stats_csv,
                      write_summary, zero_counts)
from .model import CgtConfig, TrainConfig, generate, load_model, save_model, train, write_loss_trace
from .privacy import DpSgdConfig
from .quantizer import (QuantizerModel, TokenSet, dequantize_set, fit_dp_kmeans, fit_kmeans_min_size,
                        quantize_set, read_quantizer, read_tokens, write_quantizer, write_tokens)
from .rng import GENERATOR_NAMES, derive_seed

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SCENARIOS = ("base", "noisy-edges", "sampling-number", "distribution-shift")


class MissingArtifactError(FileNotFoundError):
    pass


class StaleArtifactError(ValueError):
    pass


class RunLockedError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    """Knobs of the quantize/train/generate chain."""

    s: int = 5
    L: int = 2
    k: int = 30
    m: int | None = None
    privacy: str = "k_anonymous"
    eps: float = math.inf
    delta: float = 0.01
    clip: float = 1.0
    n_fit: int | None = None
    kmeans_iters: int = 20
    dim: int = 64
    heads: int = 4
    layers: int = 3
    variant: str = "full_sequence"
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    dp_sigma: float | None = None
    dp_clip: float = 1.0
    dp_delta: float = 0.1
    temperature: float = 1.0

    def num_clusters(self, n: int) -> int:
        if self.m is not None:
            return int(self.m)
        if self.privacy == "k_anonymous":
            return max(1, n // self.k)
        return max(1, n // max(self.k, 1))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def graph_hash(path) -> str:
    h = hashlib.sha256()
    for name in ("edges.tsv", "features.csv", "labels.tsv"):
        h.update(sha256_file(Path(path) / name).encode())
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


class RunDir:
    """A run directory owned by one process through a lock file."""

    def __init__(self, path):
        self.path = Path(path)
        self._locked = False

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path / ".lock", os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"{self.path} is locked by another process (remove .lock if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self._locked = True
        return self

    def __exit__(self, *exc):
        if self._locked:
            (self.path / ".lock").unlink(missing_ok=True)
            self._locked = False

    def file(self, name) -> Path:
        return self.path / name

    def require(self, name) -> Path:
        p = self.file(name)
        if not p.exists():
            raise MissingArtifactError(f"missing artifact {p}; run the upstream stage first")
        return p

    def manifest(self) -> dict:
        p = self.file(MANIFEST)
        if p.exists():
            return json.loads(p.read_text())
        return {"tool_version": __version__, "prng": dict(GENERATOR_NAMES), "config": {}, "stages": {}}

    def write_manifest(self, man: dict) -> None:
        tmp = self.file(MANIFEST + ".tmp")
        tmp.write_text(json.dumps(_jsonable(man), indent=2, sort_keys=True) + "\n")
        tmp.replace(self.file(MANIFEST))

    def check_inputs(self, names) -> dict:
        """Hashes of ``names``; error if a producing stage recorded a different hash."""
        man = self.manifest()
        produced = {}
        for stage in man["stages"].values():
            produced.update(stage.get("outputs", {}))
        out = {}
        for name in names:
            digest = sha256_file(self.require(name))
            if name in produced and produced[name] != digest:
                raise StaleArtifactError(f"{name} changed since it was produced; re-run its stage")
            out[name] = digest
        return out

    def record(self, stage: str, config: dict, inputs: dict, outputs, extra: dict | None = None) -> dict:
        man = self.manifest()
        man["tool_version"] = __version__
        man["prng"] = dict(GENERATOR_NAMES)
        man["config"].update(_jsonable(config))
        entry = {"config": _jsonable(config), "inputs": inputs,
                 "outputs": {name: sha256_file(self.file(name)) for name in outputs}}
        if extra:
            entry.update(_jsonable(extra))
        man["stages"][stage] = entry
        self.write_manifest(man)
        return man


def fit_quantizer(X: np.ndarray, sc: SynthConfig, seed: int) -> QuantizerModel:
    m = sc.num_clusters(len(X))
    s = derive_seed(seed, "quantize")
    if sc.privacy == "dp":
        return fit_dp_kmeans(X, m, sc.eps, sc.delta, iters=sc.kmeans_iters, seed=s, clip=sc.clip)
    k_min = sc.k if sc.privacy == "k_anonymous" else 1
    return fit_kmeans_min_size(X, m, k_min, n_fit=sc.n_fit, iters=sc.kmeans_iters, seed=s)


def cgt_config(sc: SynthConfig, q: QuantizerModel, num_classes: int) -> CgtConfig:
    return CgtConfig(vocab=q.vocab, labels=num_classes, s=sc.s, L=sc.L, dim=sc.dim, heads=sc.heads,
                     layers=sc.layers, variant=sc.variant)


def dp_config(sc: SynthConfig) -> DpSgdConfig | None:
    if sc.dp_sigma is None:
        return None
    return DpSgdConfig(clip_norm=sc.dp_clip, noise_multiplier=sc.dp_sigma, delta=sc.dp_delta)


def synthesize(trees: ComputationGraphSet, q: QuantizerModel, sc: SynthConfig, num_classes: int,
               count: int, seed: int) -> ComputationGraphSet:
    """Train a CGT on the quantized ``trees`` and return ``count`` generated trees."""
    tokens = quantize_set(trees, q)
    cfg = cgt_config(sc, q, num_classes)
    tc = TrainConfig(steps=sc.steps, lr=sc.lr, batch_size=sc.batch_size)
    result = train(tokens, cfg, tc, dp_config(sc), seed=derive_seed(seed, "train"))
    label_dist = np.bincount(tokens.labels, minlength=num_classes).astype(np.float64)
    gen = generate(result.params, cfg, count, label_dist, sc.temperature, seed=derive_seed(seed, "generate"))
    return dequantize_set(gen, q, trees.shape)


def _evaluate(trees_train, trees_valid, trees_test, gnn_cfgs, num_classes, dataset, scenario):
    out = []
    for gc in gnn_cfgs:
        out.append(train_eval(gc, trees_train, trees_test, trees_valid, num_classes, dataset, scenario))
    return out


def benchmark_pair(g: Graph, split: SplitSpec, sc: SynthConfig, gnn_cfgs, seed: int, scenario: str,
                   shifted: bool = False) -> list[AccuracyRecord]:
    """GNN accuracies on the original trees of ``g`` and on a generated substitute.

    With ``shifted`` the train part and the valid/test part are synthesized by
    separate models so the generated data keeps the train/test shift.
    """
    trees = sample_computation_graphs(g, None, sc.s, sc.L, derive_seed(seed, "sample"))
    q = fit_quantizer(g.features, sc, seed)
    C = g.num_classes
    records = _evaluate(trees.subset(split.train), trees.subset(split.valid), trees.subset(split.test),
                        gnn_cfgs, C, "original", scenario)
    if shifted:
        rest = np.concatenate([split.valid, split.test])
        gen_train = synthesize(trees.subset(split.train), q, sc, C, len(split.train), derive_seed(seed, "A"))
        gen_rest = synthesize(trees.subset(rest), q, sc, C, len(rest), derive_seed(seed, "B"))
        nv = len(split.valid)
        gtrain, gvalid, gtest = gen_train, gen_rest.subset(np.arange(nv)), gen_rest.subset(np.arange(nv, len(rest)))
    else:
        gen = synthesize(trees, q, sc, C, g.n, seed)
        gs = uniform_split(g.n, derive_seed(seed, "generated-split"),
                           (len(split.train) / g.n, len(split.valid) / g.n, len(split.test) / g.n))
        gtrain, gvalid, gtest = gen.subset(gs.train), gen.subset(gs.valid), gen.subset(gs.test)
    records += _evaluate(gtrain, gvalid, gtest, gnn_cfgs, C, "generated", scenario)
    return records


def scenario_grid(g: Graph, scenario: str, values, sc: SynthConfig, seed: int):
    """Yield ``(tag, graph, split, synth_config, shifted)`` for each grid point."""
    if scenario == "base":
        yield "base", g, uniform_split(g.n, derive_seed(seed, "split")), sc, False
    elif scenario == "noisy-edges":
        for ne in values:
            g2 = add_noisy_edges(g, int(ne), derive_seed(seed, "noisy-edges", int(ne)))
            yield f"ne={int(ne)}", g2, uniform_split(g.n, derive_seed(seed, "split")), sc, False
    elif scenario == "sampling-number":
        for s in values:
            yield f"s={int(s)}", g, uniform_split(g.n, derive_seed(seed, "split")), \
                dataclasses.replace(sc, s=int(s)), False
    elif scenario == "distribution-shift":
        for a in values:
            alpha = "iid" if str(a) == "iid" else float(a)
            yield f"alpha={a}", g, biased_split(g, alpha, 0.5, derive_seed(seed, "split")), sc, alpha != "iid"
    else:
        raise ValueError(f"unknown scenario {scenario!r}")


def run_bench(g: Graph, scenario: str, values, sc: SynthConfig, gnn_cfgs, seed: int) -> list[AccuracyRecord]:
    records = []
    for tag, g2, split, sc2, shifted in scenario_grid(g, scenario, values, sc, seed):
        logger.info("bench %s %s", scenario, tag)
        records += benchmark_pair(g2, split, sc2, gnn_cfgs, derive_seed(seed, scenario, tag), tag, shifted)
    return records


def accuracy_pairs(records) -> tuple[list[tuple[str, str]], np.ndarray, np.ndarray]:
    orig = {(r.scenario, r.model): r.accuracy for r in records if r.dataset == "original"}
    gen = {(r.scenario, r.model): r.accuracy for r in records if r.dataset == "generated"}
    keys = [k for k in orig if k in gen]
    return keys, np.array([orig[k] for k in keys]), np.array([gen[k] for k in keys])


# -- stages over a run directory ---------------------------------------------


def stage_sample(run: RunDir, graph_path, s: int, L: int, seed: int) -> ComputationGraphSet:
    g = load_graph(graph_path)
    trees = sample_computation_graphs(g, None, s, L, derive_seed(seed, "sample"))
    write_cgs(run.file("cgs.bin"), trees)
    np.save(run.file("cg_ids.npy"), trees.ids)
    cfg = {"graph": str(graph_path), "graph_sha256": graph_hash(graph_path), "s": s, "L": L, "seed": seed,
           "n": g.n, "num_classes": g.num_classes}
    run.record("sample", cfg, {}, ["cgs.bin", "cg_ids.npy"])
    return trees


def _load_trees(run: RunDir) -> ComputationGraphSet:
    trees = read_cgs(run.file("cgs.bin"))
    if run.file("cg_ids.npy").exists():
        trees.ids = np.load(run.file("cg_ids.npy"))
    return trees


def stage_quantize(run: RunDir, sc: SynthConfig, seed: int) -> QuantizerModel:
    inputs = run.check_inputs(["cgs.bin"])
    man = run.manifest()
    g = load_graph(man["config"]["graph"])
    if graph_hash(man["config"]["graph"]) != man["config"]["graph_sha256"]:
        raise StaleArtifactError("input graph changed since sampling")
    q = fit_quantizer(g.features, sc, seed)
    tokens = quantize_set(_load_trees(run), q)
    write_quantizer(run.file("quantizer.bin"), q)
    write_tokens(run.file("tokens.tsv"), tokens)
    cfg = {k: getattr(sc, k) for k in ("k", "m", "privacy", "eps", "delta", "clip", "n_fit", "kmeans_iters")}
    cfg["m_effective"] = q.m
    run.record("quantize", cfg, inputs, ["quantizer.bin", "tokens.tsv"], {"privacy": q.privacy})
    return q


def stage_train(run: RunDir, sc: SynthConfig, seed: int):
    inputs = run.check_inputs(["quantizer.bin", "tokens.tsv"])
    man = run.manifest()
    q = read_quantizer(run.file("quantizer.bin"))
    tokens = read_tokens(run.file("tokens.tsv"))
    sc = dataclasses.replace(sc, s=man["config"]["s"], L=man["config"]["L"])
    cfg = cgt_config(sc, q, man["config"]["num_classes"])
    tc = TrainConfig(steps=sc.steps, lr=sc.lr, batch_size=sc.batch_size)
    dp = dp_config(sc)
    result = train(tokens, cfg, tc, dp, seed=derive_seed(seed, "train"))
    save_model(run.file("model.cgt"), result.params, cfg)
    write_loss_trace(run.file("loss.csv"), result.trace)
    privacy = result.privacy or {"mode": "none"}
    rec = {k: getattr(sc, k) for k in ("dim", "heads", "layers", "variant", "steps", "batch_size", "lr",
                                      "dp_sigma", "dp_clip", "dp_delta")}
    run.record("train", rec, inputs, ["model.cgt", "loss.csv"], {"privacy": privacy})
    return result


def stage_generate(run: RunDir, count: int | None, temperature: float, seed: int) -> ComputationGraphSet:
    inputs = run.check_inputs(["model.cgt", "quantizer.bin", "tokens.tsv"])
    params, cfg = load_model(run.file("model.cgt"))
    q = read_quantizer(run.file("quantizer.bin"))
    tokens = read_tokens(run.file("tokens.tsv"))
    count = len(tokens) if count is None else count
    label_dist = np.bincount(tokens.labels, minlength=cfg.labels).astype(np.float64)
    gen = generate(params, cfg, count, label_dist, temperature, seed=derive_seed(seed, "generate"))
    write_tokens(run.file("generated_tokens.tsv"), gen)
    trees = dequantize_set(gen, q, cfg.shape)
    write_cgs(run.file("generated_cgs.bin"), trees)
    run.record("generate", {"count": count, "temperature": temperature}, inputs,
               ["generated_tokens.tsv", "generated_cgs.bin"],
               {"label_distribution": (label_dist / label_dist.sum()).tolist()})
    return trees


def stage_stats(run: RunDir) -> dict:
    names = ["cgs.bin"] + (["generated_cgs.bin"] if run.file("generated_cgs.bin").exists() else [])
    inputs = run.check_inputs(names)
    ref = read_cgs(run.file("cgs.bin"))
    write_stats_csv(run.file("stats.csv"), zero_counts(ref), duplicate_counts(ref))
    outputs = ["stats.csv", "summary.json"]
    summary = {"count": len(ref), "zero_mean": float(zero_counts(ref).mean()),
               "dup_mean": float(duplicate_counts(ref).mean())}
    if "generated_cgs.bin" in names:
        gen = read_cgs(run.file("generated_cgs.bin"))
        write_stats_csv(run.file("stats_generated.csv"), zero_counts(gen), duplicate_counts(gen))
        summary.update(stat_summary(ref, gen))
        outputs.insert(1, "stats_generated.csv")
    write_summary(run.file("summary.json"), summary)
    run.record("stats", {}, inputs, outputs)
    return summary


def stage_bench(run: RunDir, graph_path, scenario: str, values, sc: SynthConfig, gnn_cfgs, seed: int):
    g = load_graph(graph_path)
    records = run_bench(g, scenario, values, sc, gnn_cfgs, seed)
    write_bench_report(run.file("bench_report.csv"), records)
    cfg = {"bench_graph": str(graph_path), "bench_graph_sha256": graph_hash(graph_path), "scenario": scenario,
           "values": [str(v) for v in values], "gnn": [dataclasses.asdict(c) for c in gnn_cfgs],
           "bench_synth": dataclasses.asdict(sc), "bench_seed": seed}
    run.record("bench", cfg, {}, ["bench_report.csv"])
    return records


def _fmt(v) -> str:
    if v is UNDEFINED:
        return "undefined"
    if isinstance(v, str):
        return v
    return f"{v:.4f}"


def build_report(records, manifest: dict) -> tuple[str, list[list[str]]]:
    """Plain-text report plus CSV rows of per-scenario and overall agreement."""
    rows = [["scope", "pairs", "mse", "pearson", "spearman"]]
    lines = ["Benchmark agreement between original and generated data", ""]
    models = sorted({r.model for r in records})
    scenarios = list(dict.fromkeys(r.scenario for r in records))
    acc = {(r.dataset, r.scenario, r.model): r for r in records}
    lines.append(f"{'scenario':<18}{'model':<8}{'original':>10}{'generated':>11}")
    for sc in scenarios:
        for m in models:
            o, gn = acc.get(("original", sc, m)), acc.get(("generated", sc, m))
            lines.append(f"{sc:<18}{m:<8}{_fmt(o.accuracy) if o else 'missing':>10}"
                         f"{_fmt(gn.accuracy) if gn else 'missing':>11}")
    lines.append("")
    keys, a, b = accuracy_pairs(records)

    def scope(name, sel):
        if len(sel) < 2:
            rows.append([name, str(len(sel)), _fmt(float(((a[sel] - b[sel]) ** 2).mean())) if len(sel) else "",
                         "undefined (n<2)", "undefined (n<2)"])
            return
        c = correlation_suite(a[sel], b[sel])
        rows.append([name, str(len(sel)), _fmt(c.mse), _fmt(c.pearson), _fmt(c.spearman)])

    for sc in scenarios:
        scope(f"scenario {sc}", np.array([i for i, k in enumerate(keys) if k[0] == sc], dtype=np.int64))
    for m in models:
        scope(f"model {m}", np.array([i for i, k in enumerate(keys) if k[1] == m], dtype=np.int64))
    scope("all", np.arange(len(keys)))
    lines.append(f"{'scope':<22}{'pairs':>6}{'mse':>9}{'pearson':>18}{'spearman':>18}")
    for r in rows[1:]:
        lines.append(f"{r[0]:<22}{r[1]:>6}{r[2]:>9}{r[3]:>18}{r[4]:>18}")
    expected = len(scenarios) * len(models)
    if len(keys) < expected:
        lines.append(f"note: {expected - len(keys)} grid cells lack an original/generated pair")
    lines.append("")
    privacy = {name: st["privacy"] for name, st in manifest.get("stages", {}).items() if "privacy" in st}
    lines.append("privacy: " + (json.dumps(_jsonable(privacy), sort_keys=True) if privacy else "none recorded"))
    return "\n".join(lines) + "\n", rows


def stage_report(run: RunDir) -> str:
    inputs = run.check_inputs(["bench_report.csv"])
    records = read_bench_report(run.file("bench_report.csv"))
    man = run.manifest()
    text, rows = build_report(records, man)
    summary_path = run.file("summary.json")
    if summary_path.exists():
        summ = json.loads(summary_path.read_text())
        text += "statistics: " + ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                          for k, v in sorted(summ.items())) + "\n"
    run.file("report.txt").write_text(text)
    with open(run.file("report.csv"), "w") as fh:
        for r in rows:
            fh.write(",".join(r) + "\n")
    run.record("report", {}, inputs, ["report.txt", "report.csv"])
    return text


def default_gnn_configs(L: int, models=None, **kw) -> list[GnnConfig]:
    models = list(AGGREGATORS) if models is None else models
    return [GnnConfig(aggregator=m, layers=L, **kw) for m in models]
