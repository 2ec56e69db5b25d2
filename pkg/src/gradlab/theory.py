"""Exact path-sum predictions for input-gradient mass, and the Monte Carlo
estimators that check them on sampled networks.

The object of study is the squared input gradient of a single logit at
initialization. Writing the gradient as a sum over paths through the layered
graph, independence of the weights makes distinct paths uncorrelated, each
relu crossing contributes an expected mask factor of 1/2, and each weight
contributes its initialization variance. PathDag computes the resulting
per-(input, logit) expected squared-gradient mass exactly by dynamic
programming over the layer structure, with a brute-force path enumeration as
a cross-check oracle. With relu-aware initialization gains every affine+relu
pair and the readout preserve total mass, non-overlapping average pooling
divides it by the window area, and the total over inputs telescopes to an
exact closed form.

The Monte Carlo half samples real networks and real gradients, so the
comparison exercises the full pipeline (init, forward, tape backward)
against the combinatorial prediction. Scaling reports fit log-log slopes of
calibrated gradient norms against input dimension, with a bootstrap over
seeds for the uncertainty band.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from . import objectives as obj
from . import tensor as tz
from .tensor import ConvGeometry, Tensor

INF = math.inf

ENUM_BUDGET = 10_000_000


# -- exact path mass -----------------------------------------------------------


class PathDag:
    """Layered graph of a relu network with per-edge mass (expected squared
    weight) on affine steps and squared coefficients on fixed linear steps.

    steps entries: {"kind": "affine"|"fixed", "mass": (n_in, n_out) array}
    or {"kind": "relu"}. Supported layers: dense, conv, avgpool, relu,
    flatten. Max pooling and batch norm have no weight-independent path
    coefficients, so specs containing them are rejected.
    """

    def __init__(self, d_in, steps):
        self.d_in = int(d_in)
        self.steps = list(steps)

    @staticmethod
    def from_spec(spec: nn.NetworkSpec) -> "PathDag":
        var = nn.init_variances(spec)
        shapes = [spec.input_shape] + spec.shapes()
        steps = []
        for i, layer in enumerate(spec.layers):
            cur = shapes[i]
            if layer.kind == "dense":
                steps.append({"kind": "affine",
                              "mass": np.full((cur[0], layer.width), var[i])})
            elif layer.kind == "conv":
                # one tap connects any (input, output) pair, so pushing basis
                # vectors through a kernel filled with the weight variance
                # yields the edge-mass matrix directly
                geom = ConvGeometry(layer.kernel, stride=layer.stride,
                                    dilation=layer.dilation, padding=layer.padding)
                kernel = Tensor(np.full((layer.channels, cur[0]) + layer.kernel,
                                        var[i]))
                basis = np.eye(int(np.prod(cur))).reshape((-1,) + cur)
                out = np.asarray(tz.conv2d(Tensor(basis), kernel, geom))
                steps.append({"kind": "affine",
                              "mass": out.reshape(out.shape[0], -1)})
            elif layer.kind == "avgpool":
                basis = np.eye(int(np.prod(cur))).reshape((-1,) + cur)
                out = np.asarray(tz.avg_pool(Tensor(basis), layer.mask))
                coeff = out.reshape(out.shape[0], -1)
                steps.append({"kind": "fixed", "mass": coeff * coeff})
            elif layer.kind == "relu":
                steps.append({"kind": "relu"})
            elif layer.kind == "flatten":
                pass
            else:
                raise ValueError(f"path mass analysis does not cover "
                                 f"{layer.kind!r} layers (layer {i})")
        return PathDag(int(np.prod(spec.input_shape)), steps)

    def mass_matrix(self) -> np.ndarray:
        """M[i, k] = predicted E[(d f_k / d x_i)^2] under path independence."""
        m = np.eye(self.d_in)
        for step in self.steps:
            if step["kind"] == "relu":
                m = m * 0.5
            else:
                m = m @ step["mass"]
        return m

    def count_matrix(self) -> np.ndarray:
        """Number of distinct paths from each input to each output unit."""
        c = np.eye(self.d_in, dtype=np.int64)
        for step in self.steps:
            if step["kind"] != "relu":
                c = c @ (step["mass"] > 0).astype(np.int64)
        return c

    def total_mass(self, logit: int) -> float:
        return float(self.mass_matrix()[:, logit].sum())

    def enumerate_mass(self, i: int, k: int, budget: int = ENUM_BUDGET) -> float:
        """Brute-force sum over explicit paths i -> k; the oracle for
        mass_matrix. Refuses when the path count exceeds the budget."""
        n_paths = int(self.count_matrix()[i, k])
        if n_paths > budget:
            raise ValueError(f"path count {n_paths} exceeds enumeration "
                             f"budget {budget}")
        mats = [s["mass"] for s in self.steps if s["kind"] != "relu"]
        factor = 0.5 ** sum(1 for s in self.steps if s["kind"] == "relu")

        def walk(depth, j):
            if depth == len(mats):
                return 1.0 if j == k else 0.0
            row = mats[depth][j]
            tot = 0.0
            for nxt in np.nonzero(row)[0]:
                tot += row[nxt] * walk(depth + 1, int(nxt))
            return tot

        return factor * walk(0, int(i))


# -- stock geometries whose mass telescopes exactly -----------------------------


def theory_mlp_spec(d: int, widths=(64, 64), classes: int = 10) -> nn.NetworkSpec:
    return nn.mlp_spec(d, list(widths), classes)


def _pow2_extent(h):
    if h < 2 or h & (h - 1):
        raise ValueError(f"image extent must be a power of two >= 2, got {h}")


def theory_cnn_spec(h: int, c_in: int = 3, channels: int = 8,
                    classes: int = 10) -> nn.NetworkSpec:
    """Stride-2 2x2 valid convolutions down to one pixel: non-overlapping
    windows and no padding, so every input coordinate carries identical path
    mass and the per-logit total is exactly one."""
    _pow2_extent(h)
    layers = []
    e = h
    while e > 1:
        layers += [nn.LayerSpec.conv(channels, kernel=2, stride=2),
                   nn.LayerSpec.relu()]
        e //= 2
    layers += [nn.LayerSpec.flatten(), nn.LayerSpec.dense(classes)]
    return nn.NetworkSpec((c_in, h, h), tuple(layers))


def avgpool_theory_pair(h: int = 4, c_in: int = 3, channels: int = 4,
                        classes: int = 10) -> tuple:
    """(pooling spec, matched strided spec): 1x1 conv + relu + 2x2 average
    pooling per block versus a 2x2 stride-2 conv + relu per block, same
    channel widths and spatial schedule. Predicted per-logit gradient mass:
    the product of 1/4 per pooling stage for the former, one for the
    latter."""
    _pow2_extent(h)
    pool_layers, stride_layers = [], []
    e = h
    while e > 1:
        pool_layers += [nn.LayerSpec.conv(channels, kernel=1),
                        nn.LayerSpec.relu(), nn.LayerSpec.avgpool(2)]
        stride_layers += [nn.LayerSpec.conv(channels, kernel=2, stride=2),
                          nn.LayerSpec.relu()]
        e //= 2
    tail = [nn.LayerSpec.flatten(), nn.LayerSpec.dense(classes)]
    return (nn.NetworkSpec((c_in, h, h), tuple(pool_layers + tail)),
            nn.NetworkSpec((c_in, h, h), tuple(stride_layers + tail)))


def random_mass_spec(rng) -> nn.NetworkSpec:
    """A random small relu network whose per-logit path mass is exactly one:
    dense stacks, or valid convolutions (stride 2 kernel 2, or stride 1 with
    the kernel fully inside), ending in a readout."""
    classes = int(rng.integers(2, 6))
    if rng.random() < 0.5:
        d = int(rng.integers(2, 13))
        widths = [int(rng.integers(2, 11)) for _ in range(int(rng.integers(1, 4)))]
        return nn.mlp_spec(d, widths, classes)
    c = int(rng.integers(1, 4))
    h = int(rng.choice([4, 8]))
    layers = []
    e = h
    while e > 1:
        ch = int(rng.integers(1, 5))
        if e >= 3 and rng.random() < 0.3:
            # valid stride-1 conv: windows stay inside, mass still telescopes
            layers += [nn.LayerSpec.conv(ch, kernel=2, stride=1),
                       nn.LayerSpec.relu()]
            e -= 1
        else:
            layers += [nn.LayerSpec.conv(ch, kernel=2, stride=2),
                       nn.LayerSpec.relu()]
            e //= 2
    layers += [nn.LayerSpec.flatten(), nn.LayerSpec.dense(classes)]
    return nn.NetworkSpec((c, h, h), tuple(layers))


# -- Monte Carlo side ------------------------------------------------------------


def _logit_grad_batch(net, x, logit):
    tape = ad.Tape()
    xn = tape.input(x)
    z = net.forward_graph(tape, xn)
    pick = np.zeros(z.shape)
    pick[:, logit] = 1.0
    s = ad.nsum(ad.mul(z, tape.const(pick)))
    return np.asarray(ad.grad(s, xn)[xn])


def mc_logit_grad_stats(spec: nn.NetworkSpec, n_nets: int = 20,
                        n_inputs: int = 8, logit: int = 0, seed: int = 0) -> dict:
    """Sampled squared-gradient mass of one logit at initialization: fresh
    He-initialized networks, standard normal inputs. Returns the mean total
    mass with its standard error, plus the spread of per-coordinate means
    scaled by d (the path prediction makes each of them equal)."""
    rng = np.random.default_rng(seed)
    d = int(np.prod(spec.input_shape))
    totals = []
    coord_acc = np.zeros(d)
    for _ in range(n_nets):
        net = nn.he_init(spec, seed=int(rng.integers(2 ** 31)))
        x = rng.standard_normal((n_inputs,) + spec.input_shape)
        g = _logit_grad_batch(net, x, logit).reshape(n_inputs, d)
        sq = g * g
        totals.extend(sq.sum(axis=1).tolist())
        coord_acc += sq.mean(axis=0)
    totals = np.asarray(totals)
    coord_mean_d = coord_acc / n_nets * d
    return {
        "d": d,
        "n_samples": int(totals.size),
        "total_mass_mean": float(totals.mean()),
        "total_mass_se": float(totals.std(ddof=1) / np.sqrt(totals.size)),
        "coord_mass_d_q10": float(np.quantile(coord_mean_d, 0.10)),
        "coord_mass_d_q90": float(np.quantile(coord_mean_d, 0.90)),
    }


def mc_path_products(edges_a, edges_b, n_samples: int = 100_000,
                     seed: int = 0) -> dict:
    """Sampled moments of two path weight products.

    edges_a / edges_b are sequences of (edge_id, variance); equal ids share
    the same draw within a sample. Independence of distinct weights makes
    E[w_a * w_b] vanish whenever the paths differ in any edge, while
    E[w_a^2] is the product of the variances along the path.
    """
    ids = {}
    for eid, v in list(edges_a) + list(edges_b):
        if eid in ids and ids[eid] != v:
            raise ValueError(f"edge {eid!r} given conflicting variances")
        ids[eid] = v
    order = list(ids)
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((n_samples, len(order)))
    draws *= np.sqrt([ids[e] for e in order])
    col = {e: draws[:, j] for j, e in enumerate(order)}

    def product(edges):
        w = np.ones(n_samples)
        for eid, _ in edges:
            w = w * col[eid]
        return w

    wa, wb = product(edges_a), product(edges_b)
    ab = wa * wb
    aa = wa * wa
    distinct = sorted(e for e, _ in edges_a) != sorted(e for e, _ in edges_b)
    return {
        "n_samples": n_samples,
        "mean_ab": float(ab.mean()),
        "se_ab": float(ab.std(ddof=1) / np.sqrt(n_samples)),
        "expected_ab": 0.0 if distinct else float(np.prod([v for _, v in edges_a])),
        "mean_aa": float(aa.mean()),
        "se_aa": float(aa.std(ddof=1) / np.sqrt(n_samples)),
        "expected_aa": float(np.prod([v for _, v in edges_a])),
    }


def ce_grad_mass_prediction(probs, label: int) -> float:
    """Predicted E||dL/dx||_2^2 when every per-logit gradient carries unit
    mass and distinct logits decorrelate: (1 - q_c)^2 + sum_{k != c} q_k^2."""
    q = np.asarray(probs, dtype=float)
    return float((1.0 - q[label]) ** 2 + (q * q).sum() - q[label] ** 2)


# -- scaling in the input dimension ----------------------------------------------


@dataclass
class ScalingReport:
    """Per-dimension statistics of a calibrated gradient norm plus the fitted
    log-log slope and its bootstrap band."""

    statistic: str
    p: float
    dims: list
    means: list
    q10: list
    q90: list
    per_seed: list = field(repr=False)
    slope: float = 0.0
    slope_q10: float = 0.0
    slope_q90: float = 0.0

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("d,statistic,mean,q10,q90\n")
            for d, m, lo, hi in zip(self.dims, self.means, self.q10, self.q90):
                f.write(f"{d},{self.statistic},{m:.17g},{lo:.17g},{hi:.17g}\n")

    def to_json(self) -> dict:
        return {"statistic": self.statistic,
                "p": "inf" if self.p == INF else self.p,
                "dims": [int(d) for d in self.dims],
                "means": self.means, "q10": self.q10, "q90": self.q90,
                "slope": self.slope,
                "slope_q10": self.slope_q10, "slope_q90": self.slope_q90}

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)


def fit_loglog_slope(dims, means) -> float:
    lx = np.log(np.asarray(dims, dtype=float))
    ly = np.log(np.asarray(means, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def bootstrap_slope(dims, per_seed, n_boot: int = 200, seed: int = 0) -> tuple:
    """10/90 band of the slope under resampling seeds with replacement."""
    rng = np.random.default_rng(seed)
    table = np.asarray(per_seed, dtype=float)  # (n_dims, n_seeds)
    n = table.shape[1]
    slopes = []
    for _ in range(n_boot):
        pick = rng.integers(0, n, size=n)
        slopes.append(fit_loglog_slope(dims, table[:, pick].mean(axis=1)))
    return float(np.quantile(slopes, 0.10)), float(np.quantile(slopes, 0.90))


def grad_norm_scaling(specs, p=INF, eps_inf: float = 1.0, n_seeds: int = 8,
                      n_inputs: int = 16, seed: int = 0,
                      n_boot: int = 200) -> ScalingReport:
    """Calibrated first-order damage eps_p * ||dL/dx||_q across input sizes.

    specs is a list of network specs ordered by input dimension; for each, a
    fresh network and standard normal inputs with uniform random labels are
    sampled n_seeds times. The prediction for the slope against d on log-log
    axes is one half for every p, since eps_p = eps_inf * d**(1/p) and the
    dual norm of the input gradient scales as d**(1/q - 1/2).
    """
    rng = np.random.default_rng(seed)
    q = obj.dual_exponent(p)
    dims, per_seed = [], []
    for spec in specs:
        d = int(np.prod(spec.input_shape))
        classes = spec.out_shape()[0]
        eps_p = obj.rescale_eps(p, eps_inf, d)
        vals = []
        for _ in range(n_seeds):
            net = nn.he_init(spec, seed=int(rng.integers(2 ** 31)))
            x = rng.standard_normal((n_inputs,) + spec.input_shape)
            lab = rng.integers(0, classes, size=n_inputs)
            g = np.asarray(nn.input_gradient(net, Tensor(x), lab))
            norms = obj.lp_norm(g.reshape(n_inputs, -1), q, axis=1)
            vals.append(float(eps_p * norms.mean()))
        dims.append(d)
        per_seed.append(vals)
    means = [float(np.mean(v)) for v in per_seed]
    rep = ScalingReport(
        statistic=f"first_order_damage_p{'inf' if p == INF else int(p)}",
        p=float(p), dims=dims, means=means,
        q10=[float(np.quantile(v, 0.10)) for v in per_seed],
        q90=[float(np.quantile(v, 0.90)) for v in per_seed],
        per_seed=per_seed)
    rep.slope = fit_loglog_slope(dims, means)
    rep.slope_q10, rep.slope_q90 = bootstrap_slope(dims, per_seed,
                                                   n_boot=n_boot, seed=seed + 1)
    return rep
