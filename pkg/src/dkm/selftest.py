"""Invariant suite behind ``dkm selftest``.

Each check returns ``(ok, detail)``. The gradient builders are shared with
the test suite so both exercise the same closures.
"""
from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable

import numpy as np

from . import losses
from .autodiff import FDResult, Graph, backward, fd_check
from .config import RunConfig
from .domains import (
    DomainSpec,
    DomainStats,
    emd,
    emd_brute_force,
    make_pseudo_unseen,
    sample_episode,
    synth_dataset,
)
from .evaluation import calibrate, evaluate_episode
from .nets import Arch, classify, encode, init_mlp, prototype_classifier
from .rng import derive_seed, make_rng
from .training import (
    fused_features,
    init_model,
    inner_adapt,
    meta_step_graph,
    pseudo_unseen_episode,
    run_meta_training,
    step_gradients,
)

TINY = Arch(in_dim=4, hidden=(6,), feature_dim=5, mapper_hidden=4, domain_hidden=4)


def _split(nodes: dict) -> dict[str, dict]:
    groups: dict[str, dict] = {}
    for key, node in nodes.items():
        group, name = key.split("/", 1)
        groups.setdefault(group, {})[name] = node
    return groups


def _flat(**groups) -> dict[str, np.ndarray]:
    return {f"{g}/{k}": np.array(v) for g, p in groups.items() for k, v in p.items()}


def tiny_table(seed: int, n_classes: int = 6, per_class: int = 6, dim: int = 4):
    rng = make_rng(derive_seed(seed, "tiny-protos"))
    spec = DomainSpec(
        prototypes=rng.standard_normal((n_classes, dim)) * 1.5,
        sigma_class=0.5,
        rotation=np.eye(dim),
        scale=np.ones(dim),
        shift=np.zeros(dim),
    )
    return synth_dataset(spec, per_class, derive_seed(seed, "tiny-samples"))


def jitter_biases(params, seed: int, scale: float = 0.1):
    """Nonzero biases keep probes off ReLU kinks that zero-initialised biases sit on."""
    rng = make_rng(derive_seed(seed, "bias-jitter"))
    return params.replace({k: v + scale * rng.standard_normal(v.shape) for k, v in params.items() if k.startswith("b")})


def tiny_meta_task(seed: int):
    """A tiny model plus one (visible, pseudo-unseen) task pair and its adapted episode classifier."""
    table = tiny_table(seed)
    model = init_model(TINY, len(table.classes), derive_seed(seed, "tiny-model"))
    model = replace(model, **{name: jitter_biases(p, derive_seed(seed, name)) for name, p in model.groups().items()})
    visible = sample_episode(table, 3, 2, 2, derive_seed(seed, "tiny-episode"))
    lam = float(make_rng(derive_seed(seed, "tiny-lambda")).uniform(0.3, 0.7))
    stats = DomainStats(table.x.mean(axis=0), table.x.std(axis=0))
    unseen = pseudo_unseen_episode(visible, lam, stats, seed)
    _, _, c_s = fused_features(model, visible.support_x)
    clf = inner_adapt(prototype_classifier(c_s, visible.support_y, 3), c_s, visible.support_y, 0.01, 2)
    return model, visible, unseen, lam, clf


def loss_closures(seed: int) -> dict[str, tuple[Callable, dict]]:
    """Named ``(closure, params)`` pairs covering every training objective."""
    rng = make_rng(derive_seed(seed, "fd-probe"))
    n, d, c = 6, 5, 3
    labels = np.array([0, 0, 1, 1, 2, 2])
    x = rng.uniform(-2, 2, (n, 4))
    bank = rng.uniform(-1, 1, (2, d))
    enc = init_mlp_params(seed, [4, 6, d])
    head = init_mlp_params(seed + 1, [d, c])
    sched = losses.Schedule(0.1, 10)
    t = float(rng.integers(0, 11))
    v1 = x + 0.1 * rng.standard_normal(x.shape)
    v2 = x + 0.1 * rng.standard_normal(x.shape)

    def ce(g, p):
        s = _split(p)
        return losses.cross_entropy(g, classify(g, s["clf"], encode(g, s["enc"], g.constant(x))), labels)

    def nce(g, p):
        s = _split(p)
        return losses.info_nce(g, encode(g, s["enc"], g.constant(v1)), encode(g, s["enc"], g.constant(v2)), 0.5)

    def nce_aware(g, p):
        s = _split(p)
        z1 = encode(g, s["enc"], g.constant(v1))
        z2 = encode(g, s["enc"], g.constant(v2))
        return losses.info_nce_class_aware(g, z1, z2, labels, bank, 0.5)

    def mixed(g, p):
        return losses.pretrain_loss(g, ce(g, p), nce_aware(g, p), t, sched)

    rho = {"rho/v": rng.uniform(0.05, 0.95, (n, 1)), "rho/u": rng.uniform(0.05, 0.45, (n, 1))}
    d_u = float(rng.uniform(0.5, 0.7))

    def disc(g, p):
        return losses.discriminator_loss(g, p["rho/v"], p["rho/u"], d_u)

    def gen(g, p):
        return losses.generator_loss(g, p["rho/u"], d_u)

    pre = _flat(enc=enc, clf=head)
    return {
        "cross_entropy": (ce, pre),
        "info_nce": (nce, _flat(enc=enc)),
        "info_nce_class_aware": (nce_aware, _flat(enc=enc)),
        "pretrain_mixed": (mixed, pre),
        "discriminator": (disc, rho),
        "generator": (gen, rho),
        "meta_step": meta_step_closure(seed),
    }


def init_mlp_params(seed: int, sizes: list[int]) -> dict[str, np.ndarray]:
    return dict(jitter_biases(init_mlp(sizes, derive_seed(seed, "fd-mlp")), seed))


def meta_step_closure(seed: int) -> tuple[Callable, dict]:
    """Weighted sum of the three meta-step losses over every parameter group, with rho pinned.

    Unequal weights matter: the unseen terms of the discriminator and
    generator losses cancel in a plain sum.
    """
    model, visible, unseen, lam, clf = tiny_meta_task(seed)
    g0 = Graph()
    pinned = meta_step_graph(
        g0, g0.bind(model.encoder), g0.bind(model.domain), g0.bind(model.mapper), g0.bind(clf),
        visible, unseen, 1.0 - lam,
    )["rho_v"].value

    def closure(g, p):
        s = _split(p)
        out = meta_step_graph(g, s["enc"], s["fd"], s["mp"], s["clf"], visible, unseen, 1.0 - lam, pinned)
        return g.add(g.add(out["l_cls"], g.scalar_mul(out["l_d"], 0.7)), g.scalar_mul(out["l_g"], 1.3))

    return closure, _flat(enc=model.encoder, fd=model.domain, mp=model.mapper, clf=clf)


# checks -------------------------------------------------------------------------------

def check_gradients(seeds: int = 20, tol: float = 1e-4) -> tuple[bool, str]:
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for name, (closure, params) in loss_closures(seed).items():
            res: FDResult = fd_check(closure, params)
            if not res.ok:
                return False, f"{name} seed {seed}: {res.failure}"
            worst[name] = max(worst.get(name, 0.0), res.max_rel_error)
    top = max(worst, key=worst.get)
    return all(v < tol for v in worst.values()), f"worst {top} {worst[top]:.2e} over {seeds} seeds"


def check_schedule() -> tuple[bool, str]:
    s = losses.Schedule(0.1, 50)
    ok = losses.alpha(0, s) == 0.0 and abs(losses.alpha(50, s) - 0.1) <= 1e-15
    ok = ok and abs(losses.alpha(25, s) - 0.05) <= 1e-15
    return ok, "alpha(0), alpha(T/2), alpha(T)"


def check_mixing(n: int = 10_000) -> tuple[bool, str]:
    rng = make_rng(derive_seed(0, "selftest-mix"))
    d = 4
    x_v = rng.standard_normal(d)
    stats = DomainStats(rng.standard_normal(d), rng.uniform(0.5, 2.0, d))
    lam = 0.4
    draws = make_pseudo_unseen(np.tile(x_v, (n, 1)), lam, stats, derive_seed(0, "selftest-mix-draw"))
    want_mu = lam * x_v + (1 - lam) * stats.mu
    want_sd = (1 - lam) * stats.sigma
    mean_ok = np.all(np.abs(draws.mean(axis=0) - want_mu) <= 4 * want_sd / np.sqrt(n))
    sd_ok = np.all(np.abs(draws.std(axis=0) - want_sd) <= 0.05 * want_sd)
    ident = make_pseudo_unseen(np.tile(x_v, (3, 1)), 1.0, stats, 1)
    return bool(mean_ok and sd_ok and ident.tobytes() == np.tile(x_v, (3, 1)).tobytes()), f"{n} draws"


def check_emd(instances: int = 200) -> tuple[bool, str]:
    rng = make_rng(derive_seed(0, "selftest-emd"))
    worst = 0.0
    for _ in range(instances):
        k = int(rng.integers(1, 7))
        a, b = rng.standard_normal((k, 3)), rng.standard_normal((k, 3))
        worst = max(worst, abs(emd(a, b) - emd_brute_force(a, b)), abs(emd(a, b) - emd(b, a)))
        if emd(a, a) != 0.0:
            return False, "emd(A, A) != 0"
    return worst <= 1e-9, f"max deviation {worst:.1e}"


def check_calibration() -> tuple[bool, str]:
    model, visible, _, _, _ = tiny_meta_task(3)
    cfg = RunConfig().with_(**{"protocol.way": 3})
    cal = calibrate(model, visible.support_x, visible.support_y, 3, cfg, 11)
    frozen = cal.encoder.equals(model.encoder)
    off = calibrate(model, visible.support_x, visible.support_y, 3, cfg, 11, rho_off=True)
    # the rho-off path must equal a classifier built directly on plain features
    z_s = fused_features(model, visible.support_x)[0]
    plain = inner_adapt(prototype_classifier(z_s, visible.support_y, 3), z_s, visible.support_y,
                        cfg.train.inner_lr, cfg.train.inner_steps)
    same = off.classifier.equals(plain)
    g = Graph()
    z_q = encode(g, g.bind(model.encoder), g.constant(visible.query_x)).value
    want = float(((z_q @ plain["w0"] + plain["b0"]).argmax(axis=1) == visible.query_y).mean())
    same = same and evaluate_episode(off, visible.query_x, visible.query_y)["accuracy"] == want
    return frozen and same, "encoder bit-identical; rho-off equals plain path"


def check_routing() -> tuple[bool, str]:
    model, visible, unseen, lam, _ = tiny_meta_task(5)
    tc = RunConfig().train
    base = step_gradients(model, visible, unseen, lam, tc)
    no_cls = step_gradients(model, visible, unseen, lam, tc, weights={"cls": 0.0})
    no_d = step_gradients(model, visible, unseen, lam, tc, weights={"d": 0.0})
    no_g = step_gradients(model, visible, unseen, lam, tc, weights={"g": 0.0})
    zero = lambda grads: all(not np.any(v) for v in grads.values())  # noqa: E731
    same = lambda a, b: all(np.array_equal(a[k], b[k]) for k in a)  # noqa: E731
    ok = zero(no_cls.encoder) and zero(no_d.domain) and zero(no_g.mapper)
    ok = ok and same(no_d.encoder, base.encoder) and same(no_g.encoder, base.encoder)
    ok = ok and same(no_cls.domain, base.domain) and same(no_g.domain, base.domain)
    ok = ok and same(no_cls.mapper, base.mapper) and same(no_d.mapper, base.mapper)
    return ok, "encoder<-cls, domain<-d, mapper<-g"


def check_grad_reverse() -> tuple[bool, str]:
    rng = make_rng(7)
    x = rng.standard_normal((3, 2))
    g = Graph()
    a = g.leaf(x)
    loss = g.sum(g.mul(g.grad_reverse(a, 0.5), g.constant(x)))
    got = backward(g, loss)[a.id]
    return np.allclose(got, -0.5 * x, rtol=0, atol=1e-15) and np.array_equal(loss.value, [np.sum(x * x)]), \
        "identity forward, -scale backward"


def check_determinism() -> tuple[bool, str]:
    table = tiny_table(2, per_class=8)
    cfg = RunConfig().with_(**{"protocol.way": 3, "protocol.shot": 2, "protocol.query": 2})
    cfg = replace(cfg, arch=replace(cfg.arch, hidden=(6,), feature_dim=5, mapper_hidden=4, domain_hidden=4))
    model = init_model(TINY, len(table.classes), 1)
    stats = DomainStats(table.x.mean(axis=0), table.x.std(axis=0))
    a, ta = run_meta_training(model, cfg, table, stats, 9, episodes=5)
    b, tb = run_meta_training(model, cfg, table, stats, 9, episodes=5)
    return a.equals(b) and ta == tb, "two 5-episode runs identical"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradients": lambda: check_gradients(20),
    "schedule": check_schedule,
    "mixing": check_mixing,
    "emd": check_emd,
    "calibration": check_calibration,
    "routing": check_routing,
    "grad_reverse": check_grad_reverse,
    "determinism": check_determinism,
}
QUICK = {"gradients": lambda: check_gradients(3)}


def run_selftest(quick: bool = False) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        fn = QUICK.get(name, fn) if quick else fn
        start = time.time()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<13} {detail} ({time.time() - start:.1f}s)")
    return all_ok

