"""Mixed-supervision pretraining and episodic meta-training with domain mapping.

Update routing in a meta-training step:

* encoder       <- query classification loss on fused visible features
                   (plus the generator loss when ``generator_updates_encoder``)
* domain clf    <- discriminator loss
* mapping layer <- generator loss
* episode clf   <- support cross-entropy (inner loop), discarded after the episode

Outer updates are first-order: nothing differentiates through the inner loop.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import losses
from .autodiff import Graph, NumericError, backward, grads_by_name
from .config import RunConfig, TrainConfig
from .domains import DomainStats, Episode, SampleTable, make_pseudo_unseen, sample_episode
from .nets import (
    Arch,
    ParamSet,
    classify,
    domain_head,
    encode,
    encode_np,
    fuse,
    init_mlp,
    map_features,
    prototype_classifier,
)
from .optim import AdamState, Optimizer
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

COMPONENTS = ("encoder", "classifier", "domain", "mapper")


class TrainingDiverged(NumericError):
    def __init__(self, phase: str, index: int, detail: str = "") -> None:
        super().__init__(f"{phase} diverged at index {index}: {detail or 'non-finite loss'}")
        self.phase = phase
        self.index = index


@dataclass(frozen=True)
class TrainedModel:
    encoder: ParamSet
    classifier: ParamSet
    domain: ParamSet
    mapper: ParamSet
    phase: str = "init"
    provenance: Mapping[str, object] = field(default_factory=dict)

    def groups(self) -> dict[str, ParamSet]:
        return {name: getattr(self, name) for name in COMPONENTS}

    def equals(self, other: "TrainedModel") -> bool:
        return all(getattr(self, c).equals(getattr(other, c)) for c in COMPONENTS)


def init_model(arch: Arch, n_classes: int, seed: int) -> TrainedModel:
    return TrainedModel(
        encoder=init_mlp(arch.encoder_sizes(), derive_seed(seed, "init", 0)),
        classifier=init_mlp(arch.classifier_sizes(n_classes), derive_seed(seed, "init", 1)),
        domain=init_mlp(arch.domain_sizes(), derive_seed(seed, "init", 2)),
        mapper=init_mlp(arch.mapper_sizes(), derive_seed(seed, "init", 3)),
        provenance={"seed": seed},
    )


def _finite(value: float, phase: str, index: int) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(phase, index)
    return value


# pretraining ---------------------------------------------------------------------

def novel_bank(encoder: ParamSet, heldout: SampleTable | None, per_class: int) -> np.ndarray | None:
    """Features of the first ``per_class`` samples of every held-out class."""
    if heldout is None or per_class == 0 or len(heldout) == 0:
        return None
    rows = np.concatenate([np.flatnonzero(heldout.y == c)[:per_class] for c in heldout.classes])
    return encode_np(encoder, heldout.x[rows])


def pretrain_batch_loss(
    g: Graph,
    enc,
    clf,
    x: np.ndarray,
    labels: np.ndarray,
    view1: np.ndarray,
    view2: np.ndarray,
    bank: np.ndarray | None,
    regime: str,
    t: float,
    sched: losses.Schedule,
    tau: float,
):
    """Returns (objective, ce, ssl) nodes for one minibatch."""
    ce = losses.cross_entropy(g, classify(g, clf, encode(g, enc, g.constant(x))), labels)
    z1 = encode(g, enc, g.constant(view1))
    z2 = encode(g, enc, g.constant(view2))
    ssl = losses.info_nce_class_aware(g, z1, z2, labels, bank, tau)
    if regime == "supervised":
        objective = ce
    elif regime == "ssl":
        objective = ssl
    else:
        objective = losses.pretrain_loss(g, ce, ssl, t, sched)
    return objective, ce, ssl


def pretrain(
    cfg: RunConfig,
    source: SampleTable,
    heldout: SampleTable | None,
    seed: int,
    regime: str | None = None,
    model: TrainedModel | None = None,
) -> tuple[TrainedModel, list[dict]]:
    """Minibatch pretraining of encoder and base classifier; one trace row per epoch."""
    tc = cfg.train
    regime = regime or cfg.regime
    classes = source.classes
    labels_all = np.searchsorted(classes, source.y)
    if model is None:
        model = init_model(cfg.model_arch(), len(classes), seed)
    if model.classifier["w0"].shape[1] != len(classes):
        raise ValueError("classifier width does not match the number of source classes")
    sched = losses.Schedule(tc.kappa, tc.pretrain_epochs)
    opt = Optimizer(tc.optimizer)
    enc_p, clf_p = model.encoder, model.classifier
    enc_s, clf_s = opt.init(enc_p), opt.init(clf_p)
    view_scale = tc.view_noise * cfg.benchmark.sigma_class
    n = len(source)
    trace = []
    for epoch in range(tc.pretrain_epochs):
        t = epoch + 1
        rng = make_rng(derive_seed(seed, "pretrain-epoch", epoch))
        order = rng.permutation(n)
        bank = novel_bank(enc_p, heldout, tc.novel_bank_per_class)
        sums = np.zeros(3)
        n_batches = 0
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            if idx.size < 2:
                continue
            x, y = source.x[idx], labels_all[idx]
            vrng = make_rng(derive_seed(seed, "pretrain-views", epoch, b))
            v1 = x + view_scale * vrng.standard_normal(x.shape)
            v2 = x + view_scale * vrng.standard_normal(x.shape)
            g = Graph()
            enc, clf = g.bind(enc_p), g.bind(clf_p)
            try:
                obj, ce, ssl = pretrain_batch_loss(g, enc, clf, x, y, v1, v2, bank, regime, t, sched, tc.tau)
            except TrainingDiverged:
                raise
            except NumericError as exc:
                raise TrainingDiverged("pretrain", epoch, str(exc)) from exc
            _finite(obj.item(), "pretrain", epoch)
            grads = backward(g, obj)
            enc_p, enc_s = opt.step(enc_p, grads_by_name(g, grads, enc), enc_s, tc.pretrain_lr)
            if regime != "ssl":
                clf_p, clf_s = opt.step(clf_p, grads_by_name(g, grads, clf), clf_s, tc.pretrain_lr)
            sums += (obj.item(), ce.item(), ssl.item())
            n_batches += 1
        loss, ce_mean, ssl_mean = sums / max(n_batches, 1)
        trace.append({
            "epoch": epoch,
            "alpha": losses.alpha(t, sched),
            "loss": loss,
            "ce": ce_mean,
            "ssl": ssl_mean,
        })
        log.debug("pretrain epoch %d loss %.4f ce %.4f ssl %.4f", epoch, loss, ce_mean, ssl_mean)
    new = replace(
        model,
        encoder=enc_p,
        classifier=clf_p,
        phase="pretrain",
        provenance={**model.provenance, "regime": regime, "pretrain_seed": seed},
    )
    return new, trace


# meta-training --------------------------------------------------------------------

def inner_adapt(
    clf: ParamSet, features: np.ndarray, labels: np.ndarray, lr: float, steps: int
) -> ParamSet:
    """``steps`` SGD steps on support cross-entropy; returns a new ParamSet."""
    if features.shape[0] != len(labels):
        raise ValueError("features and labels are not aligned")
    for _ in range(steps):
        if lr == 0:
            break
        g = Graph()
        p = g.bind(clf)
        loss = losses.cross_entropy(g, classify(g, p, g.constant(features)), labels)
        grads = grads_by_name(g, backward(g, loss), p)
        clf = clf.replace({k: clf[k] - lr * grads[k] for k in clf})
    return clf


def fused_features(model, x: np.ndarray, rho_off: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(z, rho, c) for raw inputs under the model's encoder, domain clf and mapper."""
    g = Graph()
    enc, fd, mp = g.bind(model.encoder), g.bind(model.domain), g.bind(model.mapper)
    z = encode(g, enc, g.constant(x))
    mapped = map_features(g, mp, z)
    rho = domain_head(g, fd, mapped)
    if rho_off:
        return z.value, np.zeros_like(rho.value), z.value
    c = fuse(g, z, g.constant(rho.value), mp, mapped=mapped)
    return z.value, rho.value, c.value


@dataclass(frozen=True)
class MetaState:
    model: TrainedModel
    encoder_opt: AdamState = field(default_factory=AdamState)
    domain_opt: AdamState = field(default_factory=AdamState)
    mapper_opt: AdamState = field(default_factory=AdamState)


@dataclass(frozen=True)
class StepGradients:
    encoder: dict
    domain: dict
    mapper: dict
    episode_classifier: dict
    adapted: ParamSet
    metrics: dict


def meta_step_graph(g: Graph, enc, fd, mp, clf, visible: Episode, unseen: Episode, d_u: float,
                    rho_pin: np.ndarray | None = None) -> dict:
    """Build the three meta-training losses on ``g`` from bound parameter nodes.

    The difficulty score enters the fusion as a constant. ``rho_pin`` fixes
    that constant explicitly, which lets a finite-difference probe hold it
    still while the parameters move.
    """
    z_v = encode(g, enc, g.constant(visible.query_x))
    z_u = encode(g, enc, g.constant(unseen.query_x))
    m_v = map_features(g, mp, z_v)
    m_u = map_features(g, mp, z_u)
    rho_v = domain_head(g, fd, m_v)
    rho_u = domain_head(g, fd, m_u)
    # rho enters the fusion as a constant so classification never reaches f_d
    pinned = rho_v.value if rho_pin is None else rho_pin
    c_v = fuse(g, z_v, g.constant(pinned), mp, mapped=m_v)
    logits = classify(g, clf, c_v)
    return {
        "l_cls": losses.cross_entropy(g, logits, visible.query_y),
        "l_d": losses.discriminator_loss(g, rho_v, rho_u, d_u),
        "l_g": losses.generator_loss(g, rho_u, d_u),
        "logits": logits,
        "rho_v": rho_v,
        "rho_u": rho_u,
    }


def step_gradients(
    model: TrainedModel,
    visible: Episode,
    unseen: Episode,
    lam: float,
    tc: TrainConfig,
    weights: Mapping[str, float] | None = None,
) -> StepGradients:
    """Per-component gradients of one meta-training step (no parameter change).

    ``weights`` scales the three losses (keys ``cls``, ``d``, ``g``) and only
    exists so routing can be probed; training always uses unit weights.
    """
    if not np.array_equal(visible.support_y, unseen.support_y) or not np.array_equal(
        visible.query_y, unseen.query_y
    ):
        raise ValueError("visible and pseudo-unseen tasks must share labels")
    w = {"cls": 1.0, "d": 1.0, "g": 1.0, **(weights or {})}
    d_u = 1.0 - lam
    way = visible.way

    # inner loop on fused visible support features (first-order: plain values)
    _, _, c_support = fused_features(model, visible.support_x)
    init = prototype_classifier(c_support, visible.support_y, way)
    adapted = inner_adapt(init, c_support, visible.support_y, tc.inner_lr, tc.inner_steps)

    g = Graph()
    enc = g.bind(model.encoder, "encoder/")
    fd = g.bind(model.domain, "domain/")
    mp = g.bind(model.mapper, "mapper/")
    clf = g.bind(adapted, "episode/")
    out = meta_step_graph(g, enc, fd, mp, clf, visible, unseen, d_u)
    l_cls, l_d, l_g, logits = out["l_cls"], out["l_d"], out["l_g"], out["logits"]
    rho_v, rho_u = out["rho_v"], out["rho_u"]

    def grads_of(loss, scale, nodes):
        if scale == 0.0:
            return {k: np.zeros_like(n.value) for k, n in nodes.items()}
        got = grads_by_name(g, backward(g, loss), nodes)
        return {k: scale * v for k, v in got.items()}

    enc_grads = grads_of(l_cls, w["cls"], enc)
    if tc.generator_updates_encoder:
        extra = grads_of(l_g, w["g"], enc)
        enc_grads = {k: enc_grads[k] + extra[k] for k in enc_grads}
    clf_grads = grads_of(l_cls, w["cls"], clf)
    fd_grads = grads_of(l_d, w["d"], fd)
    mp_grads = grads_of(l_g, w["g"], mp)

    pred = logits.value.argmax(axis=1)
    metrics = {
        "lambda": lam,
        "l_cls": l_cls.item(),
        "l_d": l_d.item(),
        "l_g": l_g.item(),
        "acc": float((pred == visible.query_y).mean()),
        "rho_v": float(rho_v.value.mean()),
        "rho_u": float(rho_u.value.mean()),
    }
    return StepGradients(enc_grads, fd_grads, mp_grads, clf_grads, adapted, metrics)


def meta_train_step(
    state: MetaState, visible: Episode, unseen: Episode, lam: float, tc: TrainConfig, index: int = 0
) -> tuple[MetaState, dict]:
    try:
        sg = step_gradients(state.model, visible, unseen, lam, tc)
    except TrainingDiverged:
        raise
    except NumericError as exc:
        raise TrainingDiverged("meta-train", index, str(exc)) from exc
    for key in ("l_cls", "l_d", "l_g"):
        _finite(sg.metrics[key], "meta-train", index)
    opt = Optimizer(tc.optimizer)
    m = state.model
    enc, enc_s = opt.step(m.encoder, sg.encoder, state.encoder_opt, tc.outer_lr)
    fd, fd_s = opt.step(m.domain, sg.domain, state.domain_opt, tc.meta_lr)
    mp, mp_s = opt.step(m.mapper, sg.mapper, state.mapper_opt, tc.meta_lr)
    model = replace(m, encoder=enc, domain=fd, mapper=mp, phase="metatrain")
    return MetaState(model, enc_s, fd_s, mp_s), sg.metrics


def pseudo_unseen_episode(ep: Episode, lam: float, stats: DomainStats, seed: int) -> Episode:
    return replace(
        ep,
        support_x=make_pseudo_unseen(ep.support_x, lam, stats, derive_seed(seed, "mix", 0)),
        query_x=make_pseudo_unseen(ep.query_x, lam, stats, derive_seed(seed, "mix", 1)),
        domain="pseudo-unseen",
    )


def run_meta_training(
    model: TrainedModel,
    cfg: RunConfig,
    source: SampleTable,
    stats: DomainStats,
    seed: int,
    episodes: int | None = None,
    fixed_lambda: float | None = None,
    on_checkpoint: Callable[[int, TrainedModel], None] | None = None,
) -> tuple[TrainedModel, list[dict]]:
    """Meta-train over sampled (visible, pseudo-unseen) task pairs.

    ``stats`` are the per-dimension statistics of the visible (source)
    domain; each task draws its own mixing ratio from ``lambda_range``.
    """
    tc, pc = cfg.train, cfg.protocol
    episodes = tc.meta_episodes if episodes is None else episodes
    lo, hi = tc.lambda_range
    state = MetaState(model)
    trace = []
    for e in range(episodes):
        ep_seed = derive_seed(seed, "meta-episode", e)
        visible = sample_episode(source, pc.way, pc.shot, pc.query, ep_seed, domain="visible")
        if fixed_lambda is None:
            lam = float(make_rng(derive_seed(seed, "meta-lambda", e)).uniform(lo, hi))
        else:
            lam = fixed_lambda
        unseen = pseudo_unseen_episode(visible, lam, stats, ep_seed)
        state, metrics = meta_train_step(state, visible, unseen, lam, tc, index=e)
        trace.append({"episode": e, **metrics})
        if on_checkpoint and tc.checkpoint_every and (e + 1) % tc.checkpoint_every == 0:
            on_checkpoint(e + 1, state.model)
    if episodes == 0:
        return model, trace
    out = replace(state.model, provenance={**model.provenance, "meta_seed": seed, "episodes": episodes})
    return out, trace
