"""Meta-test protocol: calibration, episode evaluation, reports, ablation and kappa sweep."""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses
from .autodiff import Graph, backward, grads_by_name
from .config import RunConfig
from .domains import (
    Benchmark,
    Episode,
    SampleTable,
    domain_stats,
    emd,
    make_benchmark,
    make_pseudo_unseen,
    sample_emd,
    sample_episode,
    synth_dataset,
)
from .nets import ParamSet, difficulty_score, domain_head, encode_np, prototype_classifier
from .optim import sgd_step
from .rng import derive_seed
from .training import TrainedModel, fused_features, inner_adapt, pretrain, run_meta_training

log = logging.getLogger(__name__)

TASK_FIELDS = ("task_id", "seed", "accuracy", "mean_rho", "mean_rho_fused", "emd")
REGIMES = ("supervised", "ssl", "mixed")


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class CalibratedModel:
    encoder: ParamSet
    domain: ParamSet
    mapper: ParamSet
    classifier: ParamSet
    rho_off: bool = False


def calibrate(
    model: TrainedModel,
    support_x: np.ndarray,
    support_y: np.ndarray,
    way: int,
    cfg: RunConfig,
    seed: int,
    rho_off: bool = False,
) -> CalibratedModel:
    """One calibration pass on the target support set, then a fresh episode classifier.

    The support features play the visible role and a pure-noise pseudo-unseen
    draw (mixing ratio 0, so its domain label is 1) the unseen role. The
    domain classifier descends the discriminator loss and the mapping layer
    descends the generator loss; the encoder is frozen.
    """
    if isinstance(model, CalibratedModel):
        raise ProtocolError("model is already calibrated; the protocol allows a single calibration")
    if len(support_x) == 0:
        raise ValueError("empty support set")
    tc = cfg.train
    domain, mapper = model.domain, model.mapper
    z_s = encode_np(model.encoder, support_x)
    noise_x = make_pseudo_unseen(support_x, 0.0, domain_stats(support_x), seed)
    z_n = encode_np(model.encoder, noise_x)
    for _ in range(tc.calibration_steps):
        g = Graph()
        fd, mp = g.bind(domain), g.bind(mapper)
        rho_s = difficulty_score(g, fd, mp, g.constant(z_s))
        rho_n = difficulty_score(g, fd, mp, g.constant(z_n))
        l_d = losses.discriminator_loss(g, rho_s, rho_n, 1.0)
        l_g = losses.generator_loss(g, rho_n, 1.0)
        fd_grads = grads_by_name(g, backward(g, l_d), fd)
        mp_grads = grads_by_name(g, backward(g, l_g), mp)
        domain = sgd_step(domain, fd_grads, tc.calibration_lr)
        mapper = sgd_step(mapper, mp_grads, tc.calibration_lr)
    tuned = replace(model, domain=domain, mapper=mapper)
    _, _, c_s = fused_features(tuned, support_x, rho_off=rho_off)
    init = prototype_classifier(c_s, support_y, way)
    clf = inner_adapt(init, c_s, support_y, tc.inner_lr, tc.inner_steps)
    return CalibratedModel(model.encoder, domain, mapper, clf, rho_off)


def evaluate_episode(cal: CalibratedModel, query_x: np.ndarray, query_y: np.ndarray) -> dict:
    """Accuracy of the calibrated episode classifier on fused query features."""
    _, rho, c = fused_features(cal, query_x, rho_off=cal.rho_off)
    logits = c @ cal.classifier["w0"] + cal.classifier["b0"]
    # the domain classifier applied to fused features; logged, never used to predict
    g = Graph()
    p_fused = domain_head(g, g.bind(cal.domain), g.constant(c)).value
    return {
        "accuracy": float((logits.argmax(axis=1) == query_y).mean()),
        "mean_rho": float(rho.mean()),
        "mean_rho_fused": float(p_fused.mean()),
    }


@dataclass
class EvalReport:
    rows: list[dict]
    emd_source_target: float
    config_hash: str
    seed: int
    target: str = ""
    rho_off: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r["accuracy"] for r in self.rows])

    @property
    def n_tasks(self) -> int:
        return len(self.rows)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        return ci_halfwidth(self.accuracies)

    @property
    def mean_rho(self) -> float:
        return float(np.mean([r["mean_rho"] for r in self.rows]))

    def summary(self) -> dict:
        return {
            "target": self.target,
            "tasks": self.n_tasks,
            "mean_accuracy": self.mean,
            "ci95": self.ci95,
            "mean_rho": self.mean_rho,
            "mean_rho_fused": float(np.mean([r["mean_rho_fused"] for r in self.rows])),
            "emd_source_target": self.emd_source_target,
            "rho_off": self.rho_off,
            "config_hash": self.config_hash,
            "seed": self.seed,
            **self.meta,
        }

    def rows_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TASK_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in TASK_FIELDS})
        return buf.getvalue()

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        stem.with_suffix(".csv").write_text(self.rows_csv())


def ci_halfwidth(acc) -> float:
    """Normal-approximation 95% halfwidth over per-task accuracies."""
    acc = np.asarray(acc, dtype=np.float64)
    if acc.size < 2 or np.ptp(acc) == 0:
        return 0.0
    return float(1.96 * acc.std(ddof=1) / np.sqrt(acc.size))


# data --------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkData:
    bench: Benchmark
    source: SampleTable
    heldout: SampleTable
    targets: dict[str, SampleTable]

    @property
    def source_stats(self):
        return domain_stats(self.source.x)


def build_data(cfg: RunConfig) -> BenchmarkData:
    """Benchmark tables are a function of the master seed only."""
    bc = cfg.benchmark
    bench = make_benchmark(
        derive_seed(cfg.seed, "benchmark"),
        in_dim=bc.in_dim,
        n_train=bc.n_train,
        n_heldout=bc.n_heldout,
        n_target=bc.n_target,
        sigma_class=bc.sigma_class,
        signal_dims=bc.signal_dims,
        targets=bc.shifts(),
    )
    full = synth_dataset(bench.source, bc.per_class_source, derive_seed(cfg.seed, "source-samples"))
    targets = {
        name: synth_dataset(spec, bc.per_class_target, derive_seed(cfg.seed, "target-samples", k))
        for k, (name, spec) in enumerate(bench.targets.items())
    }
    return BenchmarkData(
        bench,
        full.subset(bench.source_train_classes),
        full.subset(bench.source_heldout_classes),
        targets,
    )


# meta-test ---------------------------------------------------------------------

def _task_row(model, cfg: RunConfig, table: SampleTable, source_x: np.ndarray, seed: int,
              task_id: int, rho_off: bool) -> dict:
    pc = cfg.protocol
    s = derive_seed(seed, "meta-test-task", task_id)
    ep = sample_episode(table, pc.way, pc.shot, pc.query, s)
    cal = calibrate(model, ep.support_x, ep.support_y, pc.way, cfg, derive_seed(s, "calibrate"), rho_off)
    res = evaluate_episode(cal, ep.query_x, ep.query_y)
    task_x = np.concatenate([ep.support_x, ep.query_x])
    a, b = source_x, task_x
    if cfg.benchmark.emd_space == "feature":
        a, b = encode_np(model.encoder, a), encode_np(model.encoder, b)
    return {
        "task_id": task_id,
        "seed": s,
        "accuracy": res["accuracy"],
        "mean_rho": res["mean_rho"],
        "mean_rho_fused": res["mean_rho_fused"],
        "emd": sample_emd(a, b, 32, derive_seed(s, "emd")),
    }


def _task_chunk(args) -> list[dict]:
    model, cfg, table, source_x, seed, ids, rho_off = args
    return [_task_row(model, cfg, table, source_x, seed, i, rho_off) for i in ids]


def run_meta_test(
    model: TrainedModel,
    target: SampleTable,
    cfg: RunConfig,
    seed: int,
    source_x: np.ndarray,
    tasks: int | None = None,
    rho_off: bool = False,
    parallel: int = 1,
    target_name: str = "",
) -> EvalReport:
    """Sample, calibrate and evaluate ``tasks`` independent target episodes."""
    tasks = cfg.protocol.tasks if tasks is None else tasks
    if tasks < 1:
        raise ValueError("task count must be at least 1")
    ids = list(range(tasks))
    if parallel > 1:
        chunks = [ids[k::parallel] for k in range(parallel)]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            parts = pool.map(_task_chunk, [(model, cfg, target, source_x, seed, c, rho_off) for c in chunks])
            rows = sorted((r for part in parts for r in part), key=lambda r: r["task_id"])
    else:
        rows = _task_chunk((model, cfg, target, source_x, seed, ids, rho_off))
    report_emd = sample_emd(source_x, target.x, 64, derive_seed(seed, "report-emd"))
    return EvalReport(rows, report_emd, cfg.digest(), seed, target_name, rho_off)


# full pipeline, ablation, sweep --------------------------------------------------

def pipeline(
    cfg: RunConfig,
    data: BenchmarkData | None = None,
    regime: str | None = None,
    targets: list[str] | None = None,
    rho_modes: tuple[bool, ...] = (False,),
) -> dict[tuple[str, bool], EvalReport]:
    """Pretrain, meta-train and meta-test; reports keyed by (target, rho_off)."""
    data = data or build_data(cfg)
    model, _ = pretrain(cfg, data.source, data.heldout, derive_seed(cfg.seed, "pretrain"), regime=regime)
    model, _ = run_meta_training(model, cfg, data.source, data.source_stats, derive_seed(cfg.seed, "metatrain"))
    out = {}
    for name in targets or [cfg.benchmark.eval_target]:
        for rho_off in rho_modes:
            out[(name, rho_off)] = run_meta_test(
                model, data.targets[name], cfg, derive_seed(cfg.seed, "metatest", 0),
                data.source.x, rho_off=rho_off, target_name=name,
            )
    return out


def run_ablation(cfg: RunConfig, targets: list[str] | None = None,
                 data: BenchmarkData | None = None) -> dict[str, dict[str, EvalReport]]:
    """The three pretraining regimes with identical meta-train and meta-test seeds."""
    data = data or build_data(cfg)
    targets = targets or [t.name for t in cfg.benchmark.targets]
    results = {}
    for regime in REGIMES:
        reports = pipeline(cfg, data, regime=regime, targets=targets)
        results[regime] = {name: reports[(name, False)] for name in targets}
    return results


def ablation_table(results: dict[str, dict[str, EvalReport]]) -> str:
    targets = list(next(iter(results.values())))
    lines = ["regime," + ",".join(targets)]
    for regime, reps in results.items():
        lines.append(regime + "," + ",".join(repr(reps[t].mean) for t in targets))
    return "\n".join(lines) + "\n"


def kappa_grid(stop: float = 10.0, step: float = 0.2) -> list[float]:
    n = int(round(stop / step))
    return [round(i * step, 10) for i in range(n + 1)]


def sweep_kappa(cfg: RunConfig, grid: list[float] | None = None,
                data: BenchmarkData | None = None) -> list[dict]:
    """Full mixed-regime pipeline per kappa on shared seeds."""
    data = data or build_data(cfg)
    rows = []
    for kappa in grid if grid is not None else kappa_grid():
        rep = pipeline(cfg.with_(**{"train.kappa": float(kappa)}), data, regime="mixed")
        rep = rep[(cfg.benchmark.eval_target, False)]
        rows.append({"kappa": float(kappa), "mean_accuracy": rep.mean, "ci95": rep.ci95})
        log.info("kappa %.2f -> %.4f", kappa, rep.mean)
    return rows


def sweep_csv(rows: list[dict]) -> str:
    lines = ["kappa,mean_accuracy,ci95"]
    lines += [f"{r['kappa']!r},{r['mean_accuracy']!r},{r['ci95']!r}" for r in rows]
    return "\n".join(lines) + "\n"
