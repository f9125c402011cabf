"""The three fusion levels: depth-aware lift-splat, image-guided LiDAR BEV
prediction with cross-attention, and flow-field BEV alignment.

All feature maps are (rows, cols, channels).  The BEV grid has lateral rows
and forward columns (see :class:`bevkit.config.BevConfig`).  Every stage has
a ``*_vjp`` form returning ``(value, pullback)``; pullbacks return dicts of
input gradients plus parameter gradients keyed by parameter name.
"""

from __future__ import annotations

import functools
import math

import numpy as np

from . import tensor as T
from .camera import CameraModel
from .config import BevConfig, DepthBinning, ModelConfig
from .errors import DistributionError, ShapeError

# ---------------------------------------------------------------- lift-splat


def feature_pixel_centers(cam: CameraModel, feat_h: int, feat_w: int):
    """Image coordinates (u, v) of the centre of every feature cell's pixel block."""
    sx = cam.image_w / feat_w
    sy = cam.image_h / feat_h
    u = (np.arange(feat_w) + 0.5) * sx - 0.5
    v = (np.arange(feat_h) + 0.5) * sy - 0.5
    return u, v


@functools.lru_cache(maxsize=32)
def frustum_pillars(cam: CameraModel, bev: BevConfig, bins: DepthBinning, feat_h: int, feat_w: int):
    """Flat BEV cell index for every frustum voxel (feat_h, feat_w, bins), -1 if off-grid.

    Voxels sit at bin-centre depth along the ray through their pixel centre.
    """
    u, v = feature_pixel_centers(cam, feat_h, feat_w)
    z = bins.centers()
    uu = u[None, :, None]
    vv = v[:, None, None]
    zz = z[None, None, :]
    xc = (uu - cam.cx) / cam.fx * zz
    yc = (vv - cam.cy) / cam.fy * zz
    zc = np.broadcast_to(zz, xc.shape)
    rot, t = cam.rotation, cam.translation
    q0, q1, q2 = xc - t[0], yc - t[1], zc - t[2]
    # explicit R^T (p - t), kept elementwise so the summation order is fixed
    xl = rot[0, 0] * q0 + rot[1, 0] * q1 + rot[2, 0] * q2
    yl = rot[0, 1] * q0 + rot[1, 1] * q1 + rot[2, 1] * q2
    row = np.floor((yl - bev.y_min) / bev.resolution).astype(np.int64)
    col = np.floor((xl - bev.x_min) / bev.resolution).astype(np.int64)
    ok = (row >= 0) & (row < bev.ny) & (col >= 0) & (col < bev.nx)
    idx = np.where(ok, row * bev.nx + col, -1)
    idx.setflags(write=False)
    return idx


def lift_splat_vjp(F, D, cam: CameraModel, bev: BevConfig, bins: DepthBinning, validate=True):
    F = np.asarray(F)
    D = np.asarray(D)
    if F.ndim != 3 or D.ndim != 3 or F.shape[:2] != D.shape[:2]:
        raise ShapeError(f"feature {F.shape} and depth {D.shape} grids disagree")
    if D.shape[2] != bins.num_bins:
        raise ShapeError(f"depth distribution has {D.shape[2]} bins, expected {bins.num_bins}")
    if validate:
        sums = D.astype(np.float64).sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-4) or np.any(D < 0):
            raise DistributionError("depth rows must be probability distributions")
    fh, fw, cf = F.shape
    dt = T.out_dtype(F, D)
    pillars = frustum_pillars(cam, bev, bins, fh, fw).reshape(-1)
    keep = pillars >= 0
    F64 = F.astype(np.float64)
    D64 = D.astype(np.float64)
    frustum = (D64[..., None] * F64[:, :, None, :]).reshape(-1, cf)
    out = np.zeros((bev.ny * bev.nx, cf))
    np.add.at(out, pillars[keep], frustum[keep])
    value = out.reshape(bev.ny, bev.nx, cf).astype(dt)

    def pullback(g):
        g2 = np.asarray(g, dtype=np.float64).reshape(-1, cf)
        gvox = np.zeros((pillars.size, cf))
        gvox[keep] = g2[pillars[keep]]
        gvox = gvox.reshape(fh, fw, bins.num_bins, cf)
        gF = np.einsum("hwk,hwkc->hwc", D64, gvox)
        gD = np.einsum("hwc,hwkc->hwk", F64, gvox)
        return {"F": gF.astype(dt), "D": gD.astype(dt)}

    return value, pullback


def lift_splat(F, D, cam, bev, bins, validate=True):
    return lift_splat_vjp(F, D, cam, bev, bins, validate)[0]


# ---------------------------------------------------------------- layer helpers


def _conv_vjp(x, params, name, stride=1, padding=1):
    y, pb = T.conv2d_vjp(x, params[f"{name}.w"], params.get(f"{name}.b"), stride, padding)

    def pullback(g):
        gr = pb(g)
        grads = {f"{name}.w": gr["weight"]}
        if "bias" in gr:
            grads[f"{name}.b"] = gr["bias"]
        return gr["x"], grads

    return y, pullback


def _conv_norm_relu_vjp(x, params, name, stride=1, padding=1):
    y1, pb1 = _conv_vjp(x, params, name, stride, padding)
    y2, pb2 = T.affine_norm_vjp(y1, params[f"{name}.scale"], params[f"{name}.shift"])
    y3, pb3 = T.relu_vjp(y2)

    def pullback(g):
        g2 = pb3(g)["x"]
        gn = pb2(g2)
        gx, grads = pb1(gn["x"])
        grads[f"{name}.scale"] = gn["scale"]
        grads[f"{name}.shift"] = gn["shift"]
        return gx, grads

    return y3, pullback


def _linear_vjp(x, w, b):
    y, pb = T.matmul_vjp(x, w)
    dt = T.out_dtype(y, b)
    y = (y.astype(np.float64) + np.asarray(b, dtype=np.float64)).astype(dt)

    def pullback(g):
        gr = pb(g)
        return gr["a"], gr["b"], np.asarray(g, dtype=np.float64).sum(axis=0).astype(dt)

    return y, pullback


def _merge(into: dict, grads: dict):
    for k, v in grads.items():
        into[k] = into[k] + v if k in into else v
    return into


# ---------------------------------------------------------------- encoder / decoder


def bev_encode_vjp(L, params):
    """conv-norm-relu, pool/2, conv-norm-relu, pool/2, conv-norm-relu.

    Returns ``(B, pool_indices, pullback)``; indices are ordered shallow to deep.
    """
    L = np.asarray(L)
    if L.ndim != 3 or L.shape[0] % 4 or L.shape[1] % 4:
        raise ShapeError(f"LiDAR BEV extents {L.shape[:2]} must be divisible by 4")
    x1, pb1 = _conv_norm_relu_vjp(L, params, "enc1")
    p1, idx1, pp1 = T.maxpool2d_vjp(x1, 2, 2)
    x2, pb2 = _conv_norm_relu_vjp(p1, params, "enc2")
    p2, idx2, pp2 = T.maxpool2d_vjp(x2, 2, 2)
    x3, pb3 = _conv_norm_relu_vjp(p2, params, "enc3")

    def pullback(g):
        grads = {}
        g, gr = pb3(g)
        _merge(grads, gr)
        g = pp2(g)["x"]
        g, gr = pb2(g)
        _merge(grads, gr)
        g = pp1(g)["x"]
        g, gr = pb1(g)
        _merge(grads, gr)
        grads["L"] = g
        return grads

    return x3, [idx1, idx2], pullback


def bev_encode(L, params):
    B, idx, _ = bev_encode_vjp(L, params)
    return B, idx


def bev_decode_vjp(Bp, pool_indices, params):
    """conv-norm-relu, unpool, conv-norm-relu, unpool, conv."""
    idx1, idx2 = pool_indices
    x1, pb1 = _conv_norm_relu_vjp(Bp, params, "dec1")
    u1, pu1 = T.maxunpool2d_vjp(x1, idx2)
    x2, pb2 = _conv_norm_relu_vjp(u1, params, "dec2")
    u2, pu2 = T.maxunpool2d_vjp(x2, idx1)
    x3, pb3 = _conv_vjp(u2, params, "dec3")

    def pullback(g):
        grads = {}
        g, gr = pb3(g)
        _merge(grads, gr)
        g = pu2(g)["y"]
        g, gr = pb2(g)
        _merge(grads, gr)
        g = pu1(g)["y"]
        g, gr = pb1(g)
        _merge(grads, gr)
        grads["Bp"] = g
        return grads

    return x3, pullback


def bev_decode(Bp, pool_indices, params):
    return bev_decode_vjp(Bp, pool_indices, params)[0]


def bev_encode_shapes(in_shape, c_b=256):
    """Layer-by-layer output shapes of the encoder, without running it."""
    h, w, c = in_shape
    rows = []
    shape = T.conv2d_output_shape((h, w, c), (3, 3, c, c_b), 1, 1)
    rows += [("Conv2D", shape), ("BN+ReLU", shape)]
    for _ in range(2):
        shape = (shape[0] // 2, shape[1] // 2, shape[2])
        rows.append(("MaxPool2D", shape))
        shape = T.conv2d_output_shape(shape, (3, 3, c_b, c_b), 1, 1)
        rows += [("Conv2D", shape), ("BN+ReLU", shape)]
    return rows


def bev_decode_shapes(in_shape, c_l=128):
    h, w, c_b = in_shape
    shape = T.conv2d_output_shape((h, w, c_b), (3, 3, c_b, c_b), 1, 1)
    rows = [("Conv2D", shape), ("BN+ReLU", shape)]
    shape = (shape[0] * 2, shape[1] * 2, shape[2])
    rows.append(("MaxUnpool2d", shape))
    shape = T.conv2d_output_shape(shape, (3, 3, c_b, c_b), 1, 1)
    rows += [("Conv2D", shape), ("BN+ReLU", shape)]
    shape = (shape[0] * 2, shape[1] * 2, shape[2])
    rows.append(("MaxUnpool2d", shape))
    rows.append(("Conv2D", T.conv2d_output_shape(shape, (3, 3, c_b, c_l), 1, 1)))
    return rows


def predict_flow_shapes(c_shape, c_l, hidden=128):
    h, w, c_f = c_shape
    shape = T.conv2d_output_shape((h, w, c_f + c_l), (1, 1, c_f + c_l, hidden), 1, 0)
    return [
        ("Conv2D", shape),
        ("BN+ReLU", shape),
        ("Conv2D", T.conv2d_output_shape(shape, (3, 3, hidden, 2), 1, 1)),
    ]


# ---------------------------------------------------------------- cross-attention


def cross_attend_vjp(B, F, params):
    """Bottleneck cells attend over every front-view feature position.

    Q from B, K and V from F via fully-connected layers; the aggregated
    feature goes through a 1x1 channel-reducing conv, is concatenated after
    B, and a 3x3 conv maps the result back to B's channel count.
    """
    B = np.asarray(B)
    F = np.asarray(F)
    h, w, cb = B.shape
    wq, wk = np.asarray(params["att.wq"]), np.asarray(params["att.wk"])
    if wq.shape[1] != wk.shape[1]:
        raise ShapeError(f"query dim {wq.shape[1]} != key dim {wk.shape[1]}")
    if wq.shape[0] != cb or wk.shape[0] != F.shape[-1]:
        raise ShapeError("attention projections do not match feature channels")
    d_k = wq.shape[1]
    Bf = B.reshape(h * w, cb)
    Ff = F.reshape(-1, F.shape[-1])
    Q, pq = _linear_vjp(Bf, wq, params["att.bq"])
    K, pk = _linear_vjp(Ff, wk, params["att.bk"])
    V, pv = _linear_vjp(Ff, params["att.wv"], params["att.bv"])
    S, ps = T.matmul_vjp(Q, K.T)
    scale = 1.0 / math.sqrt(d_k)
    P, psm = T.softmax_lastdim_vjp(S * scale)
    A, pa = T.matmul_vjp(P, V)
    A3 = A.reshape(h, w, -1)
    Ar, pr = _conv_vjp(A3, params, "att.reduce", padding=0)
    cat, pc = T.concat_channels_vjp(B, Ar)
    out, po = _conv_vjp(cat, params, "att.out", padding=1)

    def pullback(g):
        grads = {}
        g, gr = po(g)
        _merge(grads, gr)
        gc = pc(g)
        gB = np.asarray(gc[0], dtype=np.float64)
        g, gr = pr(gc[1])
        _merge(grads, gr)
        ga = pa(g.reshape(h * w, -1))
        gS = psm(ga["a"])["x"] * scale
        gs = ps(gS)
        gQ, gK, gV = gs["a"], gs["b"].T, ga["b"]
        gBf, grads["att.wq"], grads["att.bq"] = pq(gQ)
        gF1, grads["att.wk"], grads["att.bk"] = pk(gK)
        gF2, grads["att.wv"], grads["att.bv"] = pv(gV)
        grads["B"] = (gB + gBf.reshape(h, w, cb)).astype(out.dtype)
        grads["F"] = (np.asarray(gF1, np.float64) + gF2).reshape(F.shape).astype(out.dtype)
        return grads

    return out, pullback


def cross_attend(B, F, params):
    return cross_attend_vjp(B, F, params)[0]


def attention_weights(B, F, params):
    """The softmax affinity matrix (h*w, n_fv) used inside :func:`cross_attend`."""
    Bf = np.asarray(B).reshape(-1, np.shape(B)[-1])
    Ff = np.asarray(F).reshape(-1, np.shape(F)[-1])
    Q = _linear_vjp(Bf, params["att.wq"], params["att.bq"])[0]
    K = _linear_vjp(Ff, params["att.wk"], params["att.bk"])[0]
    S = T.matmul(Q, K.T) / math.sqrt(np.shape(params["att.wq"])[1])
    return T.softmax_lastdim(S)


# ---------------------------------------------------------------- alignment


def predict_flow_vjp(C, Lp, params):
    C = np.asarray(C)
    Lp = np.asarray(Lp)
    if C.shape[:2] != Lp.shape[:2]:
        raise ShapeError(f"camera BEV {C.shape} and LiDAR BEV {Lp.shape} disagree")
    cat, pc = T.concat_channels_vjp(C, Lp)
    x1, p1 = _conv_norm_relu_vjp(cat, params, "flow1", padding=0)
    flow, p2 = _conv_vjp(x1, params, "flow2", padding=1)

    def pullback(g):
        grads = {}
        g, gr = p2(g)
        _merge(grads, gr)
        g, gr = p1(g)
        _merge(grads, gr)
        gc = pc(g)
        grads["C"], grads["Lp"] = gc[0], gc[1]
        return grads

    return flow, pullback


def predict_flow(C, Lp, params):
    return predict_flow_vjp(C, Lp, params)[0]


def warp_bev_vjp(C, flow):
    """Bilinear resampling of C at (row + flow[...,0], col + flow[...,1]).

    Neighbours outside the grid contribute zero.
    """
    C = np.asarray(C)
    flow = np.asarray(flow)
    if flow.shape != C.shape[:2] + (2,):
        raise ShapeError(f"flow {flow.shape} does not match features {C.shape}")
    h, w, ch = C.shape
    dt = T.out_dtype(C, flow)
    C64 = C.astype(np.float64)
    f64 = flow.astype(np.float64)
    pr = np.arange(h)[:, None] + f64[..., 0]
    pc = np.arange(w)[None, :] + f64[..., 1]
    r0 = np.floor(pr)
    c0 = np.floor(pc)
    ar = pr - r0
    ac = pc - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    corners = []
    for dr, wr, sr in ((0, 1.0 - ar, -1.0), (1, ar, 1.0)):
        for dc, wc, sc in ((0, 1.0 - ac, -1.0), (1, ac, 1.0)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            rr_c = np.clip(rr, 0, h - 1)
            cc_c = np.clip(cc, 0, w - 1)
            corners.append((rr_c, cc_c, ok, wr, wc, sr, sc))
    out = np.zeros((h, w, ch))
    started = np.zeros((h, w, 1), dtype=bool)
    for rr, cc, ok, wr, wc, _, _ in corners:
        wgt = np.where(ok, wr * wc, 0.0)
        term = wgt[..., None] * np.where(ok[..., None], C64[rr, cc], 0.0)
        # zero-weight corners are skipped and the first live corner is assigned,
        # not added, so integer and zero flows copy values bit for bit
        live = (wgt != 0)[..., None]
        out = np.where(live, np.where(started, out + term, term), out)
        started |= live
    value = out.astype(dt)

    def pullback(g):
        g = np.asarray(g, dtype=np.float64)
        gC = np.zeros((h, w, ch))
        gflow = np.zeros((h, w, 2))
        for rr, cc, ok, wr, wc, sr, sc in corners:
            wgt = np.where(ok, wr * wc, 0.0)
            np.add.at(gC, (rr[ok], cc[ok]), (wgt[..., None] * g)[ok])
            dot = np.where(ok, (C64[rr, cc] * g).sum(axis=-1), 0.0)
            gflow[..., 0] += sr * wc * dot
            gflow[..., 1] += sc * wr * dot
        return {"C": gC.astype(dt), "flow": gflow.astype(dt)}

    return value, pullback


def warp_bev(C, flow):
    return warp_bev_vjp(C, flow)[0]


def fuse_bev_vjp(Cp, Lp):
    value, pb = T.concat_channels_vjp(Cp, Lp)

    def pullback(g):
        parts = pb(g)
        return {"Cp": parts[0], "Lp": parts[1]}

    return value, pullback


def fuse_bev(Cp, Lp):
    return fuse_bev_vjp(Cp, Lp)[0]


# ---------------------------------------------------------------- composite core


def fusion_core_vjp(F, D, L, params, cam, bev, bins, validate=True):
    """lift-splat + LiDAR prediction + alignment, returning the fused BEV.

    The returned dict holds every intermediate; ``pullback`` maps a gradient
    on the fused features to gradients on F, D, L and all parameters.
    """
    C, p_lift = lift_splat_vjp(F, D, cam, bev, bins, validate)
    B, idx, p_enc = bev_encode_vjp(L, params)
    Bp, p_att = cross_attend_vjp(B, F, params)
    Lp, p_dec = bev_decode_vjp(Bp, idx, params)
    flow, p_flow = predict_flow_vjp(C, Lp, params)
    Cp, p_warp = warp_bev_vjp(C, flow)
    fused, p_fuse = fuse_bev_vjp(Cp, Lp)
    inter = {"C": C, "B": B, "Bp": Bp, "Lp": Lp, "flow": flow, "Cp": Cp, "fused": fused}

    def pullback(g):
        grads = {}
        gf = p_fuse(g)
        gw = p_warp(gf["Cp"])
        gfl = p_flow(gw["flow"])
        _merge(grads, {k: v for k, v in gfl.items() if k not in ("C", "Lp")})
        gLp = np.asarray(gf["Lp"], np.float64) + gfl["Lp"]
        gd = p_dec(gLp)
        gBp = gd.pop("Bp")
        _merge(grads, gd)
        ga = p_att(gBp)
        gB, gF_att = ga.pop("B"), ga.pop("F")
        _merge(grads, ga)
        ge = p_enc(gB)
        grads["L"] = ge.pop("L")
        _merge(grads, ge)
        gC = np.asarray(gw["C"], np.float64) + gfl["C"]
        gl = p_lift(gC)
        grads["F"] = np.asarray(gl["F"], np.float64) + gF_att
        grads["D"] = gl["D"]
        return grads

    return inter, pullback


# ---------------------------------------------------------------- stems and heads


def camera_stem(image, params, num_bins):
    """Two stride-2 convs; the second conv's channels split into features and depth logits."""
    x = T.relu(T.conv2d(image, params["cam1.w"], params["cam1.b"], stride=2, padding=1))
    y = T.conv2d(x, params["cam2.w"], params["cam2.b"], stride=2, padding=1)
    return y[..., :-num_bins], y[..., -num_bins:]


def lidar_pillar_features(cloud, bev: BevConfig) -> np.ndarray:
    """Per-cell [log(1 + count), mean z, max z] of the points falling in each pillar."""
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    r, c = bev.cell_of(pts[:, 0], pts[:, 1])
    r = np.floor(r).astype(np.int64)
    c = np.floor(c).astype(np.int64)
    ok = (r >= 0) & (r < bev.ny) & (c >= 0) & (c < bev.nx)
    flat = r[ok] * bev.nx + c[ok]
    z = pts[ok, 2]
    n = bev.ny * bev.nx
    count = np.bincount(flat, minlength=n).astype(np.float64)
    zsum = np.bincount(flat, weights=z, minlength=n)
    zmax = np.full(n, -np.inf)
    np.maximum.at(zmax, flat, z)
    mean = np.divide(zsum, count, out=np.zeros(n), where=count > 0)
    zmax = np.where(count > 0, zmax, 0.0)
    feats = np.stack([np.log1p(count), mean, zmax], axis=-1)
    return feats.reshape(bev.ny, bev.nx, 3).astype(np.float32)


def lidar_stem(pillars, params):
    x = T.relu(T.conv2d(pillars, params["lid1.w"], params["lid1.b"], padding=1))
    return T.conv2d(x, params["lid2.w"], params["lid2.b"], padding=1)


def map_heads(fused, params):
    """Shared 3x3 conv + ReLU, then 1x1 segmentation / embedding / direction heads."""
    x = T.relu(T.conv2d(fused, params["head.w"], params["head.b"], padding=1))
    seg = T.conv2d(x, params["seg.w"], params["seg.b"])
    emb = T.conv2d(x, params["emb.w"], params["emb.b"])
    dirs = T.conv2d(x, params["dir.w"], params["dir.b"])
    return seg, emb, dirs


def init_params(model: ModelConfig, num_bins: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded He-style initialisation of every parameter tensor."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def conv(name, k, cin, cout, norm=False, gain=1.0):
        std = gain * math.sqrt(2.0 / (k * k * cin))
        p[f"{name}.w"] = (rng.standard_normal((k, k, cin, cout)) * std).astype(np.float32)
        p[f"{name}.b"] = np.zeros(cout, dtype=np.float32)
        if norm:
            p[f"{name}.scale"] = np.ones(cout, dtype=np.float32)
            p[f"{name}.shift"] = np.zeros(cout, dtype=np.float32)

    def linear(name, cin, cout):
        p[f"att.w{name}"] = (rng.standard_normal((cin, cout)) / math.sqrt(cin)).astype(np.float32)
        p[f"att.b{name}"] = np.zeros(cout, dtype=np.float32)

    m = model
    conv("cam1", 3, 4, 2 * m.c_f)
    conv("cam2", 3, 2 * m.c_f, m.c_f + num_bins)
    conv("lid1", 3, 3, m.c_l)
    conv("lid2", 3, m.c_l, m.c_l)
    conv("enc1", 3, m.c_l, m.c_b, norm=True)
    conv("enc2", 3, m.c_b, m.c_b, norm=True)
    conv("enc3", 3, m.c_b, m.c_b, norm=True)
    linear("q", m.c_b, m.d_k)
    linear("k", m.c_f, m.d_k)
    linear("v", m.c_f, m.d_k)
    conv("att.reduce", 1, m.d_k, m.c_reduce)
    conv("att.out", 3, m.c_b + m.c_reduce, m.c_b)
    conv("dec1", 3, m.c_b, m.c_b, norm=True)
    conv("dec2", 3, m.c_b, m.c_b, norm=True)
    conv("dec3", 3, m.c_b, m.c_l)
    conv("flow1", 1, m.c_f + m.c_l, m.c_flow, norm=True)
    conv("flow2", 3, m.c_flow, 2, gain=0.1)
    c_fused = m.c_f + m.c_l
    conv("head", 3, c_fused, m.c_head)
    conv("seg", 1, m.c_head, m.num_classes)
    conv("emb", 1, m.c_head, m.embed_dim)
    conv("dir", 1, m.c_head, 36)
    return p
