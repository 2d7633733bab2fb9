"""Finite-difference gradient verification.

Every differentiable operation is checked against 64-bit central
differences with step 1e-3; the suite reports the worst relative error per
operation and is what the ``gradcheck`` CLI subcommand runs.
"""

from __future__ import annotations

import numpy as np

from . import ctc as ctc_mod
from . import tensor as tz
from .encoder import LayerParams, StackConfig, cross_attention_layer, self_attention_layer

FD_STEP = 1e-3
REL_TOL = 1e-4


def finite_difference_gradient(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` w.r.t. float64 array ``x``.

    ``fn`` is re-evaluated with each component nudged in place, so it must
    read ``x`` fresh on every call.
    """
    assert x.dtype == np.float64, "finite differences run in 64-bit"
    grad = np.zeros_like(x)
    for i in range(x.size):  # ndarray.flat writes through even when x is a view
        orig = x.flat[i]
        x.flat[i] = orig + step
        up = fn()
        x.flat[i] = orig - step
        down = fn()
        x.flat[i] = orig
        grad.flat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the gradient magnitude.

    The 1e-6 floor keeps exactly-zero gradients (e.g. the key bias, which
    attention's row-shift invariance kills) from dividing finite-difference
    noise by itself.
    """
    if not numeric.size:
        return 0.0
    denom = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-6)
    return float(np.abs(analytic - numeric).max()) / denom


def check_scalar_graph(build, leaves: dict[str, tz.Tensor], step: float = FD_STEP) -> float:
    """Worst relative error over ``leaves`` for the scalar graph ``build()``."""
    out = build()
    flow = tz.backward(out, seed=np.ones_like(out.values))
    worst = 0.0
    for t in leaves.values():
        numeric = finite_difference_gradient(lambda: float(build().values), t.values, step)
        analytic = flow.get(t)
        analytic = np.zeros_like(t.values) if analytic is None else np.asarray(analytic, dtype=np.float64)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _rand(rng, *shape):
    return tz.Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True)


def _weighted_sum(t: tz.Tensor, rng) -> tz.Tensor:
    # Random projection to a scalar so non-symmetric gradient errors cannot cancel.
    w = tz.Tensor(rng.uniform(-1.0, 1.0, t.values.shape))
    return tz.sum_all(tz.mul(t, w))


def _layer_params_f64(rng, hidden, ffn, posterior_dim=None):
    def mat(rows, cols):
        return tz.Tensor(rng.uniform(-0.5, 0.5, (rows, cols)), requires_grad=True)

    def vec(n, value=0.0):
        base = np.full(n, value, dtype=np.float64) + rng.uniform(-0.05, 0.05, n)
        return tz.Tensor(base, requires_grad=True)

    return LayerParams(
        ln1_gain=vec(hidden, 1.0),
        ln1_bias=vec(hidden),
        wq=None if posterior_dim else mat(hidden, hidden),
        bq=None if posterior_dim else vec(hidden),
        wp1=mat(posterior_dim, hidden) if posterior_dim else None,
        bp1=vec(hidden) if posterior_dim else None,
        wp2=mat(hidden, hidden) if posterior_dim else None,
        bp2=vec(hidden) if posterior_dim else None,
        wk=mat(hidden, hidden),
        bk=vec(hidden),
        wv=mat(hidden, hidden),
        bv=vec(hidden),
        wo=mat(hidden, hidden),
        bo=vec(hidden),
        ln2_gain=vec(hidden, 1.0),
        ln2_bias=vec(hidden),
        w1=mat(hidden, ffn),
        b1=vec(ffn),
        w2=mat(ffn, hidden),
        b2=vec(hidden),
    )


def _params_as_leaves(params: LayerParams) -> dict[str, tz.Tensor]:
    return {name: t for name, t in params.items()}


def _check_micro_model(seed: int) -> float:
    """End-to-end check of a two-mechanism micro model: splice at layer 1,
    posterior-query cross-attention after the tap at layer 2, combined loss
    over every parameter."""
    from .ctc import Vocabulary
    from .model import SshrConfig, SshrModel

    rng = np.random.default_rng(seed + 17)
    vocab = Vocabulary(("pa", "pb", "pc"), ("L0", "L1"))
    cfg = SshrConfig(
        stack=StackConfig(depth=3, hidden=6, heads=2, ffn=8),
        feature_dim=4,
        vocab=vocab,
        lid_extract_layer=1,
        lid_in_targets=True,
        cross_taps=(2,),
        loss_weight=0.5,
        seed=seed,
    )
    model = SshrModel(cfg, dtype=np.float64)
    feats = rng.uniform(-1.0, 1.0, (5, 4))
    transcript = [0, 2]

    def build():
        return model.utterance_loss(feats, transcript, "L1")

    return check_scalar_graph(build, dict(model.params))


def gradcheck_suite(seed: int = 0) -> dict:
    """Run every finite-difference check; returns a deterministic report.

    The report maps op name to its worst relative error and pass flag and
    carries an overall verdict; failures are entries, never exceptions.
    """
    rng = np.random.default_rng(seed)
    checks: dict[str, float] = {}

    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    w = tz.Tensor(rng.uniform(-1, 1, (3, 2)))
    checks["matmul"] = check_scalar_graph(
        lambda: tz.sum_all(tz.mul(tz.matmul(a, b), w)), {"a": a, "b": b}
    )

    x, wl, bl = _rand(rng, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)
    proj = tz.Tensor(rng.uniform(-1, 1, (3, 5)))
    checks["linear"] = check_scalar_graph(
        lambda: tz.sum_all(tz.mul(tz.linear(x, wl, bl), proj)), {"x": x, "w": wl, "b": bl}
    )

    xs = _rand(rng, 4, 6)
    ps = tz.Tensor(rng.uniform(-1, 1, (4, 6)))
    checks["log_softmax_rows"] = check_scalar_graph(
        lambda: tz.sum_all(tz.mul(tz.log_softmax_rows(xs), ps)), {"x": xs}
    )

    xn, gn, bn = _rand(rng, 3, 5), _rand(rng, 5), _rand(rng, 5)
    pn = tz.Tensor(rng.uniform(-1, 1, (3, 5)))
    checks["layer_norm"] = check_scalar_graph(
        lambda: tz.sum_all(tz.mul(tz.layer_norm(xn, gn, bn), pn)), {"x": xn, "gain": gn, "bias": bn}
    )

    xg = _rand(rng, 3, 4)
    pg = tz.Tensor(rng.uniform(-1, 1, (3, 4)))
    checks["gelu"] = check_scalar_graph(lambda: tz.sum_all(tz.mul(tz.gelu(xg), pg)), {"x": xg})

    xe = _rand(rng, 3, 4)
    pe = tz.Tensor(rng.uniform(-1, 1, (3, 4)))
    checks["exp"] = check_scalar_graph(lambda: tz.sum_all(tz.mul(tz.exp(xe), pe)), {"x": xe})

    xm = _rand(rng, 4, 3)
    pm = tz.Tensor(rng.uniform(-1, 1, (3,)))
    checks["mean_over_time"] = check_scalar_graph(
        lambda: tz.sum_all(tz.mul(tz.mean_over_time(xm), pm)), {"x": xm}
    )

    rowp, xp = _rand(rng, 4), _rand(rng, 3, 4)
    pp = tz.Tensor(rng.uniform(-1, 1, (4, 4)))
    checks["prepend_row"] = check_scalar_graph(
        lambda: tz.sum_all(tz.mul(tz.prepend_row(rowp, xp), pp)), {"row": rowp, "x": xp}
    )

    qa, ka, va = _rand(rng, 4, 6), _rand(rng, 5, 6), _rand(rng, 5, 6)
    pa = tz.Tensor(rng.uniform(-1, 1, (4, 6)))
    checks["multi_head_attention"] = check_scalar_graph(
        lambda: tz.sum_all(tz.mul(tz.multi_head_attention(qa, ka, va, 2), pa)),
        {"q": qa, "k": ka, "v": va},
    )

    # ctc_loss as a function of unconstrained log-probabilities
    lp = _rand(rng, 5, 4)
    targets = [1, 2]
    checks["ctc_loss"] = check_scalar_graph(
        lambda: ctc_mod.ctc_loss(lp, targets).loss, {"log_probs": lp}
    )

    # shared head composed with ctc_loss
    hid = _rand(rng, 5, 6)
    wh, bh = _rand(rng, 6, 4), _rand(rng, 4)
    checks["ctc_head+ctc_loss"] = check_scalar_graph(
        lambda: ctc_mod.ctc_loss(ctc_mod.ctc_head(hid, wh, bh, layer=0).log_probs, targets).loss,
        {"hidden": hid, "w": wh, "b": bh},
    )

    # full self-attention encoder layer
    hidden, ffn, heads = 6, 8, 2
    xl = _rand(rng, 4, hidden)
    sp = _layer_params_f64(rng, hidden, ffn)
    pl = tz.Tensor(rng.uniform(-1, 1, (4, hidden)))
    leaves = {"x": xl}
    leaves.update(_params_as_leaves(sp))
    checks["self_attention_layer"] = check_scalar_graph(
        lambda: tz.sum_all(tz.mul(self_attention_layer(xl, sp, heads), pl)), leaves
    )

    # cross-attention layer driven by a posterior matrix; checks the Q path
    vdim = 5
    post = _rand(rng, 4, vdim)
    xc = _rand(rng, 4, hidden)
    cp = _layer_params_f64(rng, hidden, ffn, posterior_dim=vdim)
    pc = tz.Tensor(rng.uniform(-1, 1, (4, hidden)))
    leaves_c = {"posterior": post, "x": xc}
    leaves_c.update(_params_as_leaves(cp))
    checks["cross_attention_layer"] = check_scalar_graph(
        lambda: tz.sum_all(tz.mul(cross_attention_layer(tz.exp(post), xc, cp, heads), pc)), leaves_c
    )

    checks["micro_model_total_loss"] = _check_micro_model(seed)

    report = {
        "seed": seed,
        "step": FD_STEP,
        "tolerance": REL_TOL,
        "checks": {
            name: {"max_rel_err": err, "passed": bool(err < REL_TOL)} for name, err in checks.items()
        },
    }
    report["worst_rel_err"] = max(checks.values())
    report["all_passed"] = all(entry["passed"] for entry in report["checks"].values())
    return report
