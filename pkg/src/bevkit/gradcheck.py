"""Finite-difference checks for every differentiable operation.

Each check draws a random toy instance, contracts the op's output with a
random cotangent to get a scalar, and compares the pullback against central
differences of that scalar for every differentiable input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fusion, losses
from . import tensor as T
from .camera import CameraModel
from .config import BevConfig, DepthBinning, LossWeights

STEP = 1e-3
TOL = 1e-3


@dataclass
class GradCheckResult:
    op: str
    instance: int
    wrt: str
    max_abs_err: float

    @property
    def passed(self) -> bool:
        return self.max_abs_err < TOL


def _compare(op, instance, inputs: dict, value_fn, analytic: dict, step=STEP):
    """FD-check ``value_fn(**inputs)`` against ``analytic`` for each key it holds."""
    out = []
    for name, grad in analytic.items():
        def f(x, name=name):
            args = dict(inputs)
            args[name] = x
            return value_fn(**args)

        fd = T.finite_diff_grad(f, inputs[name], step)
        err = float(np.max(np.abs(fd - np.asarray(grad, dtype=np.float64)))) if fd.size else 0.0
        out.append(GradCheckResult(op, instance, name, err))
    return out


def _check_op(op, instance, vjp, inputs, rng, fixed=None, keys=None, param_keys=()):
    fixed = fixed or {}
    out, pullback = vjp(**inputs, **fixed)
    R = rng.standard_normal(np.shape(out))
    grads = pullback(R)
    params = fixed.get("params")
    keys = keys or list(inputs)

    def value_fn(**args):
        return float(np.sum(np.asarray(vjp(**args, **fixed)[0], np.float64) * R))

    results = _compare(op, instance, inputs, value_fn, {k: grads[k] for k in keys})
    for pk in param_keys:
        def pf(x, pk=pk):
            p = dict(params)
            p[pk] = x
            f2 = dict(fixed, params=p)
            return float(np.sum(np.asarray(vjp(**inputs, **f2)[0], np.float64) * R))

        fd = T.finite_diff_grad(pf, params[pk])
        results.append(GradCheckResult(op, instance, pk, float(np.max(np.abs(fd - grads[pk])))))
    return results


def _f64(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


def _attention_params(rng, cb, cf, dk, cr):
    p = {
        "att.wq": _f64(rng, cb, dk, scale=0.5), "att.bq": _f64(rng, dk, scale=0.1),
        "att.wk": _f64(rng, cf, dk, scale=0.5), "att.bk": _f64(rng, dk, scale=0.1),
        "att.wv": _f64(rng, cf, dk, scale=0.5), "att.bv": _f64(rng, dk, scale=0.1),
        "att.reduce.w": _f64(rng, 1, 1, dk, cr, scale=0.5), "att.reduce.b": _f64(rng, cr, scale=0.1),
        "att.out.w": _f64(rng, 3, 3, cb + cr, cb, scale=0.3), "att.out.b": _f64(rng, cb, scale=0.1),
    }
    return p


def _flow_params(rng, cin, hidden):
    return {
        "flow1.w": _f64(rng, 1, 1, cin, hidden, scale=0.5), "flow1.b": _f64(rng, hidden, scale=0.1),
        "flow1.scale": 1.0 + _f64(rng, hidden, scale=0.1), "flow1.shift": _f64(rng, hidden, scale=0.1) + 0.3,
        "flow2.w": _f64(rng, 3, 3, hidden, 2, scale=0.3), "flow2.b": _f64(rng, 2, scale=0.1),
    }


def check_matmul(rng, i):
    a, b = _f64(rng, 3, 4), _f64(rng, 4, 2)
    return _check_op("matmul", i, lambda a, b: T.matmul_vjp(a, b), {"a": a, "b": b}, rng)


def check_softmax(rng, i):
    x = _f64(rng, 3, 5, scale=2.0)
    return _check_op("softmax", i, lambda x: T.softmax_lastdim_vjp(x), {"x": x}, rng)


def check_conv2d(rng, i):
    stride, pad = [(1, 1), (2, 1), (1, 0), (2, 0), (1, 2)][i % 5]
    x, w, b = _f64(rng, 5, 6, 2), _f64(rng, 3, 3, 2, 3, scale=0.5), _f64(rng, 3)

    def vjp(x, weight, bias):
        out, pb = T.conv2d_vjp(x, weight, bias, stride=stride, padding=pad)
        return out, pb

    return _check_op("conv2d", i, vjp, {"x": x, "weight": w, "bias": b}, rng)


def check_affine_norm(rng, i):
    x, s, t = _f64(rng, 4, 3, 3), 1.0 + _f64(rng, 3, scale=0.2), _f64(rng, 3)
    return _check_op("affine_norm", i, lambda x, scale, shift: T.affine_norm_vjp(x, scale, shift),
                     {"x": x, "scale": s, "shift": t}, rng)


def _toy_geometry(i):
    bev = BevConfig(x_min=0.0, x_max=12.0, y_min=-6.0, y_max=6.0, resolution=1.5)
    bins = DepthBinning(2.0, 10.0, 2.0)
    cam = CameraModel.forward_facing(image_w=16, image_h=8, focal=6.0 + i)
    return bev, bins, cam


def check_lift_splat(rng, i):
    bev, bins, cam = _toy_geometry(i)
    fh, fw = 2, 4
    F = _f64(rng, fh, fw, 2)
    D = T.softmax_lastdim(_f64(rng, fh, fw, bins.num_bins))

    def vjp(F, D):
        return fusion.lift_splat_vjp(F, D, cam, bev, bins, validate=False)

    return _check_op("lift_splat", i, vjp, {"F": F, "D": D}, rng)


def check_cross_attend(rng, i):
    cb, cf, dk, cr = 3, 2, 2 + i % 2, 2
    B, F = _f64(rng, 2, 3, cb), _f64(rng, 2, 2, cf)
    params = _attention_params(rng, cb, cf, dk, cr)
    return _check_op("cross_attend", i, lambda B, F, params: fusion.cross_attend_vjp(B, F, params),
                     {"B": B, "F": F}, rng, fixed={"params": params}, param_keys=("att.wq", "att.wv"))


def check_warp_bev(rng, i):
    C = _f64(rng, 4, 5, 2)
    # keep fractional parts away from integers, where bilinear weights have kinks
    whole = rng.integers(-2, 3, size=(4, 5, 2))
    frac = rng.uniform(0.1, 0.9, size=(4, 5, 2))
    flow = whole + frac
    return _check_op("warp_bev", i, lambda C, flow: fusion.warp_bev_vjp(C, flow), {"C": C, "flow": flow}, rng)


def check_predict_flow(rng, i):
    C, Lp = _f64(rng, 3, 4, 2), _f64(rng, 3, 4, 2)
    params = _flow_params(rng, 4, 3)
    # shift the hidden pre-activations off the ReLU kink
    params["flow1.shift"] = params["flow1.shift"] + 2.0

    return _check_op("predict_flow", i, lambda C, Lp, params: fusion.predict_flow_vjp(C, Lp, params),
                     {"C": C, "Lp": Lp}, rng, fixed={"params": params}, param_keys=("flow2.w",))


def _loss_check(op, i, fn, inputs):
    g = fn(**inputs).grads
    key = next(iter(g))
    return _compare(op, i, inputs, lambda **a: fn(**a).value, {next(iter(inputs)): g[key]})


def check_seg_loss(rng, i):
    x = _f64(rng, 3, 4, 4, scale=2.0)
    labels = rng.integers(0, 4, size=(3, 4))
    return _loss_check("seg_loss", i, lambda x: losses.seg_loss(x, labels), {"x": x})


def check_direction_loss(rng, i):
    x = _f64(rng, 3, 3, 36)
    labels = rng.integers(-1, 36, size=(3, 3))
    labels[0, 0] = 5
    return _loss_check("direction_loss", i, lambda x: losses.direction_loss(x, labels), {"x": x})


def check_depth_focal_loss(rng, i):
    x = _f64(rng, 2, 3, 6, scale=2.0)
    t = np.zeros((2, 3, 6))
    hot = rng.integers(0, 6, size=(2, 3))
    r, c = np.nonzero(rng.random((2, 3)) < 0.8)
    t[r, c, hot[r, c]] = 1.0
    t[0, 0, :] = 0.0
    t[1, 1, :] = 0.0
    t[1, 1, 2] = 1.0
    return _loss_check("depth_focal_loss", i, lambda x: losses.depth_focal_loss(x, t), {"x": x})


def check_instance_loss(rng, i):
    labels = rng.integers(0, 4, size=(3, 4))
    labels[0, :3] = [1, 2, 3]
    x = _f64(rng, 3, 4, 3, scale=1.5)
    w = LossWeights(delta_v=0.3, delta_d=1.0 + 0.5 * i)
    return _loss_check("instance_loss", i, lambda x: losses.instance_loss(x, labels, w), {"x": x})


def check_total_loss(rng, i):
    seg = _f64(rng, 2, 3, 4)
    dirs = _f64(rng, 2, 3, 36)
    emb = _f64(rng, 2, 3, 2, scale=1.5)
    dep = _f64(rng, 2, 2, 5)
    seg_lab = rng.integers(0, 4, size=(2, 3))
    dir_lab = rng.integers(-1, 36, size=(2, 3))
    ins_lab = rng.integers(0, 3, size=(2, 3))
    ins_lab[0, :2] = [1, 2]
    dep_t = np.zeros((2, 2, 5))
    dep_t[..., 1] = 1.0
    w = LossWeights()

    def total(seg, dirs, emb, dep):
        return losses.total_loss({
            "seg": losses.seg_loss(seg, seg_lab),
            "dir": losses.direction_loss(dirs, dir_lab),
            "ins": losses.instance_loss(emb, ins_lab, w),
            "dep": losses.depth_focal_loss(dep, dep_t, w.gamma),
        }, w)

    inputs = {"seg": seg, "dirs": dirs, "emb": emb, "dep": dep}
    g = total(**inputs).grads
    analytic = {"seg": g["seg_logits"], "dirs": g["dir_logits"], "emb": g["embeddings"], "dep": g["depth_logits"]}
    return _compare("total_loss", i, inputs, lambda **a: total(**a).value, analytic)


CHECKS = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "conv2d": check_conv2d,
    "affine_norm": check_affine_norm,
    "lift_splat": check_lift_splat,
    "cross_attend": check_cross_attend,
    "warp_bev": check_warp_bev,
    "predict_flow": check_predict_flow,
    "seg_loss": check_seg_loss,
    "instance_loss": check_instance_loss,
    "direction_loss": check_direction_loss,
    "depth_focal_loss": check_depth_focal_loss,
    "total_loss": check_total_loss,
}


def run_grad_suite(seed: int = 0, instances: int = 5, ops=None) -> list[GradCheckResult]:
    """Run every check ``instances`` times; deterministic for a given seed."""
    results = []
    for k, name in enumerate(ops or CHECKS):
        rng = np.random.default_rng([seed, k])
        for i in range(instances):
            results.extend(CHECKS[name](rng, i))
    return results
