"""Built-in gradient-check suites behind the gradcheck CLI subcommand."""

from __future__ import annotations

import numpy as np

from . import ops
from .backbone import BackboneConfig, SegNet
from .errors import ConfigurationError
from .gating import DomainRegistry
from .gradcheck import GradCheckReport, grad_check
from .harmony import HarmonyParams, InstanceStats, affine, harmonize, restore
from .losses import cross_entropy, soft_dice_loss, softmax_channels
from .tensor import Tensor, active_tape

SCOPES = ("ops", "uharmony", "end2end", "all")


def _corrupt(fn, factor: float):
    """Deliberate-bug fixture: scales the last recorded backward map."""

    def wrapper(*args, **kw):
        out = fn(*args, **kw)
        tape = active_tape()
        if tape is not None and len(tape):
            entry = tape._entries[-1]
            orig = entry.backward

            def bad(*gs):
                res = orig(*gs)
                if not isinstance(res, tuple):
                    res = (res,)
                return tuple(None if g is None else g * factor for g in res)

            entry.backward = bad
        return out

    return wrapper


def _rng(i=0):
    return np.random.default_rng([0xC0FFEE, i])


def _vol(rng, *shape, scale=1.0, off=0.0):
    return Tensor(rng.standard_normal(shape) * scale + off)


def _away_from_zero(t, margin=0.05):
    d = t.data
    t.data = np.where(np.abs(d) < margin, margin * np.sign(d + 1e-12), d)
    return t


def ops_cases():
    r = _rng(1)
    yield "add", ops.add, [_vol(r, 3, 4), _vol(r, 3, 4)], 1e-6
    yield "mul", ops.mul, [_vol(r, 3, 4), _vol(r, 3, 4)], 1e-6
    yield "scale", lambda a: ops.scale(a, 2.5), [_vol(r, 6)], 1e-6
    yield "add_bias", ops.add_bias, [_vol(r, 2, 3, 2, 2, 2), _vol(r, 3)], 1e-6
    yield "pow_int", lambda a: ops.pow_int(a, 3), [_vol(r, 8)], 1e-6
    yield "matmul", ops.matmul, [_vol(r, 3, 4), _vol(r, 4, 2)], 1e-6
    yield "linear", ops.linear, [_vol(r, 3, 5), _vol(r, 2, 5), _vol(r, 2)], 1e-6
    yield "leaky_relu", ops.leaky_relu, [_away_from_zero(_vol(r, 12))], 1e-6
    yield "softplus", ops.softplus, [_vol(r, 10)], 1e-6
    yield "conv3d", ops.conv3d, [_vol(r, 1, 2, 4, 4, 4), _vol(r, 3, 2, 3, 3, 3)], 1e-6
    yield (
        "conv3d_s2p1",
        lambda x, k: ops.conv3d(x, k, stride=2, padding=1),
        [_vol(r, 1, 2, 5, 5, 5), _vol(r, 2, 2, 3, 3, 3)],
        1e-6,
    )
    yield "downsample2", ops.downsample2, [_vol(r, 1, 2, 4, 4, 4)], 1e-6
    yield "upsample2", ops.upsample2, [_vol(r, 1, 2, 3, 3, 3)], 1e-6
    yield "concat_channels", ops.concat_channels, [_vol(r, 1, 2, 3, 3, 3), _vol(r, 1, 1, 3, 3, 3)], 1e-6
    yield "slice_channels", lambda x: ops.slice_channels(x, [0, 2]), [_vol(r, 1, 4, 2, 2, 2)], 1e-6
    yield "global_avg_pool", ops.global_avg_pool, [_vol(r, 2, 3, 3, 3, 3)], 1e-6
    yield "reduce_mean", lambda x: ops.reduce_spatial(x, "mean"), [_vol(r, 2, 2, 3, 3, 3)], 1e-6
    yield "reduce_var", lambda x: ops.reduce_spatial(x, "var"), [_vol(r, 2, 2, 3, 3, 3)], 1e-6
    yield "softmax", ops.softmax, [_vol(r, 8)], 1e-6
    yield "adapt_modalities", lambda x: ops.adapt_modalities(x, 3), [_vol(r, 1, 2, 3, 3, 3)], 1e-6

    targets = _rng(2).integers(0, 3, (2, 2, 2, 2))
    yield "cross_entropy", lambda t: cross_entropy(t, targets), [_vol(r, 2, 3, 2, 2, 2)], 1e-6
    yield (
        "soft_dice",
        lambda t: soft_dice_loss(softmax_channels(t), targets),
        [_vol(r, 2, 3, 2, 2, 2)],
        1e-5,
    )


def uharmony_cases():
    r = _rng(3)

    def stack_params(jp, seed):
        rr = _rng(seed)
        p = HarmonyParams.init(2, j_poly=jp)
        p.w.data[:] = rr.uniform(0.7, 1.6, 2)
        p.b.data[:] = rr.uniform(-0.4, 0.4, 2)
        p.lam.data[:] = rr.uniform(-0.2, 0.2, (2, jp))
        p.gamma.data[:] = rr.uniform(-0.2, 0.2, (2, jp))
        p.delta.data[:] = rr.uniform(-0.08, 0.08, (2, jp))
        return p

    def harm(x):
        xhat, _ = harmonize(x, 1e-5)
        return xhat

    yield "harmonize", harm, [_vol(r, 1, 2, 3, 3, 3)], 1e-6

    p1 = stack_params(2, 4)

    def aff(x, w, b, lam):
        p1.w, p1.b, p1.lam = w, b, lam
        return affine(x, p1)

    yield "affine_poly", aff, [_vol(r, 1, 2, 3, 3, 3), p1.w, p1.b, p1.lam], 1e-6

    p2 = stack_params(3, 5)
    sig = Tensor(_rng(6).uniform(0.5, 2.0, (1, 2)))
    mu = Tensor(_rng(7).uniform(-1, 1, (1, 2)))

    def rest(x, w, b, gam, dlt, s, m):
        p2.w, p2.b, p2.gamma, p2.delta = w, b, gam, dlt
        return restore(x, p2, InstanceStats(mu=m, sigma=s))

    yield (
        "restore_nonzero_gd",
        rest,
        [_vol(r, 1, 2, 3, 3, 3), p2.w, p2.b, p2.gamma, p2.delta, sig, mu],
        1e-4,
    )

    p3 = stack_params(2, 8)

    def full(x, w, b, lam, gam, dlt):
        p3.w, p3.b, p3.lam, p3.gamma, p3.delta = w, b, lam, gam, dlt
        xhat, stats = harmonize(x, p3.eps)
        return restore(affine(xhat, p3), p3, stats)

    yield (
        "uharmony_stack",
        full,
        [_vol(r, 1, 2, 3, 3, 3, scale=1.3), p3.w, p3.b, p3.lam, p3.gamma, p3.delta],
        1e-4,
    )


def end2end_case():
    registry = DomainRegistry.from_label_sets({"d0": ["a"], "d1": ["b", "c"]})
    net = SegNet(BackboneConfig(n_stages=3, base_channels=4), registry, seed=7)
    rng = _rng(9)
    for t in net.params.values():
        t.data = t.data + rng.uniform(-0.05, 0.05, t.data.shape)
    x = rng.standard_normal((1, 1, 8, 8, 8))
    keys = sorted(net.params)
    tensors = [net.params[k] for k in keys]

    def fn(xt, *params):
        for k, p in zip(keys, params):
            net.params[k] = p
        for s, hp in net.harmony.items():
            hp.w = net.params[f"harmony{s}.w"]
            hp.b = net.params[f"harmony{s}.b"]
            hp.lam = net.params[f"harmony{s}.lam"]
            hp.gamma = net.params[f"harmony{s}.gamma"]
            hp.delta = net.params[f"harmony{s}.delta"]
        return net.forward(xt).logits

    return fn, [Tensor(x)] + tensors, ["x"] + keys


def run_suite(scope: str = "all", inject_bug: str | None = None,
              seed: int = 0) -> list[GradCheckReport]:
    if scope not in SCOPES:
        raise ConfigurationError(f"scope must be one of {SCOPES}")
    reports = []
    cases = []
    if scope in ("ops", "all"):
        cases.extend(ops_cases())
    if scope in ("uharmony", "all"):
        cases.extend(uharmony_cases())
    injected = False
    for name, fn, inputs, tol in cases:
        if inject_bug and name == inject_bug:
            fn = _corrupt(fn, 1.01)
            injected = True
        reports.append(
            grad_check(fn, inputs, name=name, tol=tol, rng=np.random.default_rng(seed))
        )
    if scope in ("end2end", "all"):
        fn, inputs, labels = end2end_case()
        if inject_bug == "end2end":
            fn = _corrupt(fn, 1.01)
            injected = True
        reports.append(
            grad_check(fn, inputs, name="backbone_end2end", tol=1e-3,
                       rng=np.random.default_rng(seed), max_coords=6, labels=labels)
        )
    if inject_bug and not injected:
        raise ConfigurationError(f"no gradcheck case named {inject_bug!r} in scope {scope!r}")
    return reports
