"""Fixed-seed finite-difference checks over every differentiable op and the toy model."""
from __future__ import annotations

import math
import time

import numpy as np

from . import numerics as nx
from .domain import BNState, DomainContext, domain_batch_norm, render_priors, smooth_prediction
from .encoder import conv_gru_step, spatial_attention
from .memory_fusion import MhcaParams, WorkingMemoryHead, channel_attention, channel_attention_spatial, mhca, working_memory_head
from .model import model_gradcheck_inputs
from .numerics import GradCheckReport, Tensor, grad_check, precision, rel_error

OPS_TOL = 1e-4
MODEL_TOL = 1e-3


def _mhca_op(D=8, heads=2):
    names = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo", "ln_gamma", "ln_beta")
    params = MhcaParams(D, heads, np.random.default_rng(3), residual=True)

    def op(xq, xkv, *ws):
        for n, w in zip(names, ws):
            setattr(params, n, w)
        return mhca(xq, xkv, params).tokens

    return op, [getattr(params, n).data for n in names]


def _wm_head_op():
    head = WorkingMemoryHead(3, 2, 2, np.random.default_rng(4))
    names = ("We", "be", "Wd", "bd", "Wp", "bp")

    def op(x, *ws):
        for n, w in zip(names, ws):
            setattr(head, n, w)
        return working_memory_head(x, head).tokens

    # zero biases would park whole relu6 channels exactly on the kink
    jitter = np.random.default_rng(5)
    return op, [getattr(head, n).data + (0.2 * jitter.standard_normal(getattr(head, n).shape) if n.startswith("b") else 0.0)
                for n in names]


def _bn_op(x, gamma, beta):
    ctx = DomainContext("g")
    ctx.bn_state["s"] = BNState(np.zeros(x.shape[1]), np.ones(x.shape[1]), gamma, beta)
    return domain_batch_norm(x, ctx, "s", "train")


def _bn_eval_op(x, gamma, beta):
    ctx = DomainContext("g")
    c = x.shape[1]
    ctx.bn_state["s"] = BNState(np.linspace(-0.2, 0.3, c), np.linspace(0.5, 2.0, c), gamma, beta)
    return domain_batch_norm(x, ctx, "s", "eval")


def _priors_op(p):
    return render_priors(DomainContext("g", prior_params=p), 5, 6)


def _smooth_op(pred, log_sigma):
    return smooth_prediction(pred, DomainContext("g", smooth_log_sigma=log_sigma))


def _kld_op(logits):
    from .training import kld_loss

    pos = nx.softplus(logits)
    pred = pos / pos.sum(axis=(-2, -1), keepdims=True)
    gt = np.random.default_rng(9).random(logits.shape) + 0.05
    gt /= gt.sum(axis=(-2, -1), keepdims=True)
    return kld_loss(pred, gt)


def op_cases():
    """(name, op, inputs) triples; inputs are arrays or (array, requires_grad) pairs."""
    r = np.random.default_rng(0)

    def rn(*shape):
        return r.standard_normal(shape)

    pos = lambda *shape: r.uniform(0.5, 2.0, shape)
    away = lambda *shape: r.choice([-1.0, 1.0], shape) * r.uniform(0.3, 2.0, shape) + 3.0  # avoids relu6 kinks at 0, 6
    mhca_op, mhca_ws = _mhca_op()
    wm_op, wm_ws = _wm_head_op()
    gru = {"Wzr": rn(4, 5, 3, 3) * 0.3, "bzr": rn(4), "Wh": rn(2, 5, 3, 3) * 0.3, "bh": rn(2)}
    return [
        ("add", lambda a, b: a + b, [rn(3, 4), rn(4)]),
        ("sub", lambda a, b: a - b, [rn(3, 4), rn(3, 1)]),
        ("mul", lambda a, b: a * b, [rn(3, 4), rn(3, 4)]),
        ("div", lambda a, b: a / b, [rn(3, 4), pos(3, 4)]),
        ("neg", lambda a: -a, [rn(5)]),
        ("exp", nx.exp, [rn(3, 4)]),
        ("log", nx.log, [pos(3, 4)]),
        ("sqrt", nx.sqrt, [pos(3, 4)]),
        ("sigmoid", nx.sigmoid, [rn(3, 4)]),
        ("tanh", nx.tanh, [rn(3, 4)]),
        ("relu6", nx.relu6, [np.concatenate([away(10), rn(6) - 2.0, rn(6) + 8.0])]),
        ("softplus", nx.softplus, [rn(3, 4) * 3]),
        ("reshape", lambda a: a.reshape(4, 3), [rn(3, 4)]),
        ("transpose", lambda a: a.transpose(2, 0, 1), [rn(2, 3, 4)]),
        ("getitem", lambda a: a[1:, ::2], [rn(3, 4)]),
        ("getitem_repeat", lambda a: a[np.array([0, 0, 2])], [rn(3, 4)]),
        ("concat", lambda a, b: nx.concat([a, b], axis=1), [rn(2, 3), rn(2, 2)]),
        ("stack", lambda a, b: nx.stack([a, b], axis=0), [rn(2, 3), rn(2, 3)]),
        ("sum", lambda a: a.sum(axis=1), [rn(3, 4)]),
        ("mean", lambda a: a.mean(axis=(0, 2), keepdims=True), [rn(2, 3, 4)]),
        ("matmul", nx.matmul, [rn(2, 3, 4), rn(4, 5)]),
        ("linear", nx.linear, [rn(3, 4), rn(5, 4), rn(5)]),
        ("conv2d", lambda x, k, b: nx.conv2d(x, k, b, padding=1), [rn(2, 3, 5, 5), rn(4, 3, 3, 3), rn(4)]),
        ("conv2d_stride2", lambda x, k: nx.conv2d(x, k, padding=1, stride=2), [rn(1, 2, 6, 6), rn(3, 2, 3, 3)]),
        ("conv2d_depthwise", lambda x, k: nx.conv2d(x, k, padding=1, groups=4), [rn(2, 4, 4, 4), rn(4, 1, 3, 3)]),
        ("conv2d_1x1", lambda x, k, b: nx.conv2d(x, k, b), [rn(2, 3, 4, 4), rn(2, 3, 1, 1), rn(2)]),
        ("softmax", lambda a: nx.softmax(a, axis=-1), [rn(3, 5)]),
        ("layer_norm", nx.layer_norm, [rn(3, 6), pos(6), rn(6)]),
        ("upsample_nearest", lambda a: nx.upsample_nearest(a, 2), [rn(2, 3, 3)]),
        ("dropout", lambda a: nx.dropout(a, 0.5, np.random.default_rng(1)), [rn(4, 5)]),
        ("spatial_attention", lambda x, t, p, o: spatial_attention(x, t, p, o),
         [rn(2, 4, 3, 3), rn(2, 4, 1, 1), rn(2, 4, 1, 1), rn(4, 4, 1, 1)]),
        ("spatial_attention_residual", lambda x, t, p, o: spatial_attention(x, t, p, o, residual=True),
         [rn(4, 2, 2), rn(2, 4, 1, 1), rn(2, 4, 1, 1), rn(4, 4, 1, 1)]),
        ("channel_attention", channel_attention, [rn(2, 3, 2, 2) * 0.5]),
        ("channel_attention_spatial", channel_attention_spatial, [rn(3, 2, 2) * 0.5]),
        ("conv_gru_step", lambda x, h, a, b, c, d: conv_gru_step(x, h, {"Wzr": a, "bzr": b, "Wh": c, "bh": d}),
         [rn(1, 3, 4, 4), rn(1, 2, 4, 4) * 0.5, gru["Wzr"], gru["bzr"], gru["Wh"], gru["bh"]]),
        ("domain_batch_norm_train", _bn_op, [rn(3, 2, 3, 3), pos(2), rn(2)]),
        ("domain_batch_norm_eval", _bn_eval_op, [rn(3, 2, 3, 3), pos(2), rn(2)]),
        ("render_priors", _priors_op,
         [np.column_stack([r.uniform(0.2, 0.8, 2), r.uniform(0.2, 0.8, 2), r.uniform(-1.5, -0.5, (2, 2)), rn(2) * 0.3])]),
        ("smooth_prediction", _smooth_op, [pos(2, 5, 6), np.array(r.uniform(-0.3, 0.3))]),
        # the key bias drops out of the softmax, so its exact-zero gradient is tested separately
        ("mhca", mhca_op, [rn(3, 8), rn(4, 8)] + mhca_ws[:3] + [Tensor(mhca_ws[3])] + mhca_ws[4:]),
        ("working_memory_head", wm_op, [rn(2, 3, 3, 3) * 0.5] + wm_ws),
        ("kld_loss", _kld_op, [rn(2, 2, 4, 4)]),
    ]


def run_ops(cases=None, tol=OPS_TOL):
    return [grad_check(op, inputs, tol=tol, name=name) for name, op, inputs in (cases or op_cases())]


def model_grad_check(seed=0, tol=MODEL_TOL, h=1e-5, max_elements=12):
    """Central differences of the toy model's training loss against backprop, for every parameter."""
    from .training import kld_loss

    with precision(np.float64):
        model, frames, gt = model_gradcheck_inputs(seed, np.float64)
        params = model.named_parameters()

        def value():
            pred = model(frames, "A", mode="train", rng=np.random.default_rng(0))
            model.fusion.bank.pending = None
            return kld_loss(pred, gt)

        model.zero_grad()
        value().backward()
        analytic = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in params.items()}
        rng = np.random.default_rng(seed)
        per, failure = [], None
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
            worst = 0.0
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                fp = float(value().data)
                flat[j] = orig - h
                fm = float(value().data)
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                ana = float(analytic[name].reshape(-1)[j])
                # entries whose gradient is at rounding level carry no signal
                if max(abs(num), abs(ana)) < 1e-7:
                    continue
                err = float(rel_error(ana, num))
                if err > worst:
                    worst = err
                    if err >= tol and failure is None:
                        failure = f"{name}[{int(j)}]: analytic {ana:.6g} vs numeric {num:.6g}"
            per.append(worst)
    max_err = max(per) if per else 0.0
    passed = failure is None and max_err < tol and all(math.isfinite(e) for e in per)
    return GradCheckReport("toy_model", max_err, per, passed, tol, None if passed else failure)


def run_suite(scope="ops"):
    """Returns (reports, seconds)."""
    t0 = time.perf_counter()
    reports = run_ops() if scope == "ops" else [model_grad_check()]
    return reports, time.perf_counter() - t0


__all__ = ["op_cases", "run_ops", "model_grad_check", "run_suite", "Tensor"]
