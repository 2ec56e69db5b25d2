"""Training runs: deterministic SGD/Adam loops over the tape-built
objectives, per-epoch robustness bookkeeping, and the run artifact trio
(history CSV, manifest JSON, final checkpoint).

A run is fully determined by its TrainConfig: the run id is a digest of the
canonical config JSON, every random stream (init, shuffling, eval attacks,
synthetic data) is seeded from fields of the config, and repeating a run
byte-identically reproduces the history file.

History rows use one fixed column order so downstream tooling can consume
the files without a schema handshake:

    run_id, epoch, split, accuracy, xent, g1, g2,
    vuln_pgd, vuln_fgsm, dmg01, dmgxent, dmgxent_over_eps

g1/g2 are mean l1/l2 norms of the per-sample input gradient of the loss,
vuln_* are label flip rates under the named attack at the eval budget, and
the dmg* columns are accuracy drop, loss increase, and loss increase per
unit threshold under the single-step sign attack.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import attacks, datasets, nn, objectives as obj

HISTORY_COLUMNS = ("run_id", "epoch", "split", "accuracy", "xent", "g1", "g2",
                   "vuln_pgd", "vuln_fgsm", "dmg01", "dmgxent",
                   "dmgxent_over_eps")

_DATASETS = ("image", "gauss")
_OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run depends on. Defaults give a small conv run."""

    arch: str = "strided6"          # "mlp" or a standard_archs name
    widths: tuple = (64, 64)        # hidden widths when arch == "mlp"
    channels: int = 16              # conv channel count otherwise
    dataset: str = "image"          # "image" | "gauss"
    size: int = 32                  # image extent, or gauss dimension
    upsample: int = 1               # load at size/upsample, then duplicate pixels
    n_train: int = 10000
    n_test: int = 2000
    classes: int = 10
    delta: float = 3.0              # gauss class separation
    objective: obj.ObjectiveSpec = field(default_factory=obj.ObjectiveSpec)
    epochs: int = 10
    batch_size: int = 128
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    eval_n: int = 250               # eval subsample size per split
    eval_seed: int = 0
    eval_eps_inf: float = 0.01      # attack budget for the vuln/dmg columns
    pgd_steps: int = 7
    attack_eval_every: int = 1      # attack columns every k-th epoch (+ final)

    def __post_init__(self):
        if self.dataset not in _DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}, expected one of {_DATASETS}")
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}, expected one of {_OPTIMIZERS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.attack_eval_every < 1:
            raise ValueError("attack_eval_every must be >= 1")
        if self.upsample < 1 or self.size % self.upsample:
            raise ValueError(f"upsample must be >= 1 and divide size, "
                             f"got {self.upsample} for size {self.size}")
        if self.upsample > 1 and self.dataset != "image":
            raise ValueError("upsample applies to image datasets only")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["objective"] = dict(asdict(self.objective),
                              p="inf" if math.isinf(self.objective.p)
                              else self.objective.p)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        o = dict(d.get("objective", {}))
        if o.get("p") == "inf":
            o["p"] = math.inf
        d["objective"] = obj.ObjectiveSpec(**o)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return TrainConfig(**d)

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve_data(cfg: TrainConfig):
    if cfg.dataset == "gauss":
        return datasets.synth_gaussian(cfg.size, cfg.n_train, cfg.n_test,
                                       delta=cfg.delta, classes=cfg.classes,
                                       seed=cfg.seed)
    # upsample > 1 grows the input dimension by pixel duplication without
    # adding information, the clean way to compare sizes on equal content
    base = cfg.size // cfg.upsample
    train, test = datasets.image_dataset(size=base, n_train=cfg.n_train,
                                         n_test=cfg.n_test, seed=cfg.seed)
    if cfg.upsample == 1:
        return train, test
    out = []
    for ds in (train, test):
        x = datasets.upsample_copy(ds.x, cfg.upsample)
        out.append(datasets.Dataset(x, ds.y, ds.name + f"-up{cfg.upsample}",
                                    ds.classes,
                                    dict(ds.meta, size=cfg.size,
                                         upsample=cfg.upsample)))
    return out[0], out[1]


def resolve_spec(cfg: TrainConfig, train_ds: datasets.Dataset) -> nn.NetworkSpec:
    shape = train_ds.x.shape[1:]
    if cfg.arch == "mlp":
        if len(shape) == 1:
            return nn.mlp_spec(shape[0], cfg.widths, train_ds.classes)
        # mlp on image data: flatten the pixels first
        flat = nn.mlp_spec(int(np.prod(shape)), cfg.widths, train_ds.classes)
        return nn.NetworkSpec(tuple(shape),
                              (nn.LayerSpec.flatten(),) + flat.layers)
    return nn.standard_archs(cfg.arch, shape, channels=cfg.channels,
                             classes=train_ds.classes)


# -- optimizers --------------------------------------------------------------------


class SGD:
    """Momentum SGD: v <- mu v + g, w <- w - lr v."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name]
            p -= self.lr * v


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def make_optimizer(cfg: TrainConfig, params: dict):
    if cfg.optimizer == "adam":
        return Adam(params, lr=cfg.lr)
    return SGD(params, lr=cfg.lr, momentum=cfg.momentum)


# -- objective dispatch ----------------------------------------------------------


def batch_loss_node(spec: obj.ObjectiveSpec, net: nn.Network, tape: ad.Tape,
                    x_node: ad.Node, labels, params: dict) -> ad.Node:
    """Build the training loss for one batch, train-mode forward with
    running-stat updates from the clean pass only."""
    if spec.kind == "plain":
        z = net.forward_graph(tape, x_node, train=True, params=params,
                              update_stats=True)
        return obj.ce_node(z, labels, reduce="mean")
    if spec.kind == "grad-penalty":
        return obj.grad_penalty_node(net, tape, x_node, labels, spec.p,
                                     spec.eps_inf, params=params, train=True,
                                     update_stats=True)
    if spec.kind == "augmented":
        x0 = x_node.value
        if spec.eps_inf == 0.0:
            delta = np.zeros_like(x0)
        else:
            p = {"fgsm": math.inf, "step-l2": 2.0, "pgd": spec.p}[spec.method]
            delta = obj._attack_delta(net, x0, labels, spec.method, p,
                                      spec.eps_inf)
        return obj.augmented_node(net, tape, x_node, labels, delta,
                                  params=params, train=True, update_stats=True)
    if spec.kind == "fgsm-variant":
        return obj.fgsm_variant_node(net, tape, x_node, labels, spec.eps_inf,
                                     params=params, train=True,
                                     update_stats=True)
    if spec.kind == "cross-lipschitz":
        z = net.forward_graph(tape, x_node, train=True, params=params,
                              update_stats=True)
        loss = obj.ce_node(z, labels, reduce="mean")
        reg = obj.cross_lipschitz_node(net, tape, x_node, params=params)
        return ad.add(loss, ad.mul(reg, tape.const(spec.coeff)))
    raise ValueError(f"unknown objective kind {spec.kind!r}")


def sgd_step(cfg: TrainConfig, net: nn.Network, optimizer, xb, yb) -> float:
    """One batch update; returns the loss value (nan when the forward pass
    itself degenerates, so the caller's rollback triggers)."""
    tape = ad.Tape()
    x_node = tape.input(np.asarray(xb))
    params = net.lift_params(tape)
    try:
        loss = batch_loss_node(cfg.objective, net, tape, x_node, yb, params)
    except ValueError as e:
        if "non-finite" in str(e):
            return float("nan")
        raise
    value = loss.item()
    if not math.isfinite(value):
        tape.release()
        return value
    gmap = ad.grad(loss, list(params.values()))
    grads = {name: np.asarray(gmap[node]) for name, node in params.items()}
    tape.release()
    optimizer.step(grads)
    return value


# -- evaluation --------------------------------------------------------------------


def gradient_norm_stats(net: nn.Network, x, labels, batch_size: int = 64):
    """Mean l1 and l2 norms of the per-sample input loss gradient."""
    x = np.asarray(x)
    n = x.shape[0]
    g1 = np.empty(n)
    g2 = np.empty(n)
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        g = np.asarray(nn.input_gradient(net, x[lo:hi], labels[lo:hi]))
        flat = g.reshape(hi - lo, -1)
        g1[lo:hi] = np.abs(flat).sum(axis=1)
        g2[lo:hi] = np.sqrt((flat ** 2).sum(axis=1))
    return float(g1.mean()), float(g2.mean())


def evaluate(net: nn.Network, ds: datasets.Dataset, eps_inf: float,
             pgd_steps: int = 7, seed: int = 0, batch_size: int = 64,
             attack_metrics: bool = True) -> dict:
    """Clean metrics, gradient norms, and attack damage on one split.

    attack_metrics=False skips the FGSM/PGD columns (NaN placeholders);
    gradient norms are one backward pass per batch, attacks cost several,
    so long runs only pay for them on a subset of epochs."""
    x, y = ds.x, ds.y
    n = x.shape[0]
    correct = 0
    xent = 0.0
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        z = net.logits_value(x[lo:hi])
        correct += int((z.argmax(axis=1) == y[lo:hi]).sum())
        xent += float(obj.cross_entropy_each(z, y[lo:hi]).sum())
    g1, g2 = gradient_norm_stats(net, x, y, batch_size)
    out = {"accuracy": correct / n, "xent": xent / n, "g1": g1, "g2": g2,
           "vuln_pgd": math.nan, "vuln_fgsm": math.nan,
           "dmg01": math.nan, "dmgxent": math.nan,
           "dmgxent_over_eps": math.nan}
    if attack_metrics:
        fg = attacks.vulnerability(net, x, y, attacks.AttackSpec(
            method="fgsm", eps_inf=eps_inf), batch_size=batch_size)
        pg = attacks.vulnerability(net, x, y, attacks.AttackSpec(
            method="pgd", p=math.inf, eps_inf=eps_inf, steps=pgd_steps,
            seed=seed), batch_size=batch_size)
        out.update(vuln_pgd=pg["flip_rate"], vuln_fgsm=fg["flip_rate"],
                   dmg01=fg["dmg01"], dmgxent=fg["dmgxent"],
                   dmgxent_over_eps=fg["dmgxent_over_eps"])
    return out


# -- history files ----------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def write_history(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])


def read_history(path) -> list:
    out = []
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        if tuple(r.fieldnames or ()) != HISTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected history columns {r.fieldnames}")
        for rec in r:
            row = dict(rec)
            row["epoch"] = int(row["epoch"])
            for c in HISTORY_COLUMNS[3:]:
                row[c] = float(row[c])
            out.append(row)
    return out


# -- the run -----------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: str
    config: TrainConfig
    net: nn.Network
    history: list
    aborted: bool
    out_dir: str

    def final(self, split="test") -> dict:
        rows = [r for r in self.history if r["split"] == split]
        return rows[-1]


def _eval_rows(cfg, run_id, net, epoch, train_eval, test_eval):
    attack_metrics = (epoch % cfg.attack_eval_every == 0) or epoch == cfg.epochs
    rows = []
    for split, ds in (("train", train_eval), ("test", test_eval)):
        m = evaluate(net, ds, cfg.eval_eps_inf, pgd_steps=cfg.pgd_steps,
                     seed=cfg.eval_seed, attack_metrics=attack_metrics)
        rows.append(dict({"run_id": run_id, "epoch": epoch, "split": split}, **m))
    return rows


def train(cfg: TrainConfig, out_dir, data=None, log=None) -> RunResult:
    """Run one experiment to completion and write its artifacts.

    data: optional (train, test) Dataset pair, letting callers share one
    corpus across a sweep; omitted, it is resolved from the config.
    log: optional callable taking one progress line per epoch.

    If a batch loss goes non-finite the run aborts: parameters are rolled
    back to the end of the last completed epoch, the manifest records
    aborted=true, and the history keeps only the completed epochs.
    """
    run_id = cfg.run_id()
    os.makedirs(out_dir, exist_ok=True)
    train_ds, test_ds = data if data is not None else resolve_data(cfg)
    spec = resolve_spec(cfg, train_ds)
    net = nn.he_init(spec, seed=cfg.seed)

    train_eval = train_ds.take(min(cfg.eval_n, train_ds.n), seed=cfg.eval_seed)
    test_eval = test_ds.take(min(cfg.eval_n, test_ds.n), seed=cfg.eval_seed)

    optimizer = make_optimizer(cfg, net.params)
    rng = np.random.default_rng(cfg.seed)
    history = list(_eval_rows(cfg, run_id, net, 0, train_eval, test_eval))
    if log:
        log(f"[{run_id}] epoch 0/{cfg.epochs} "
            f"test acc {history[-1]['accuracy']:.3f} xent {history[-1]['xent']:.4f}")

    snapshot = (net.clone().params, net.clone().buffers)
    aborted = False
    epochs_done = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(train_ds.n)
        for lo in range(0, train_ds.n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            value = sgd_step(cfg, net, optimizer, train_ds.x[idx], train_ds.y[idx])
            if not math.isfinite(value):
                aborted = True
                for k in net.params:
                    net.params[k][...] = snapshot[0][k]
                for k in net.buffers:
                    net.buffers[k][...] = snapshot[1][k]
                if log:
                    log(f"[{run_id}] non-finite loss in epoch {epoch}; "
                        f"rolled back to epoch {epochs_done}")
                break
        if aborted:
            break
        epochs_done = epoch
        snapshot = (net.clone().params, net.clone().buffers)
        history.extend(_eval_rows(cfg, run_id, net, epoch, train_eval, test_eval))
        if log:
            last = history[-1]
            log(f"[{run_id}] epoch {epoch}/{cfg.epochs} "
                f"test acc {last['accuracy']:.3f} xent {last['xent']:.4f} "
                f"vuln_pgd {last['vuln_pgd']:.3f}")

    net.meta["epoch"] = epochs_done
    net.meta["run_id"] = run_id
    result = RunResult(run_id, cfg, net, history, aborted, str(out_dir))

    write_history(os.path.join(out_dir, "history.csv"), history)
    net.save(os.path.join(out_dir, "final.ckpt"))
    from . import __version__

    manifest = {
        "run_id": run_id,
        "version": __version__,
        "config": cfg.to_dict(),
        "dataset": {"train_name": train_ds.name, "test_name": test_ds.name,
                    "n_train": train_ds.n, "n_test": test_ds.n,
                    "train_fingerprint": train_ds.fingerprint(),
                    "test_fingerprint": test_ds.fingerprint()},
        "epochs_completed": epochs_done,
        "aborted": aborted,
        "final_test": {k: v for k, v in result.final("test").items()
                       if k not in ("run_id",)},
        "files": {"history": "history.csv", "checkpoint": "final.ckpt"},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return result


def cached_run(cfg: TrainConfig, root, log=None) -> RunResult:
    """train(), but reuse a finished run directory under root if one exists.

    Runs are deterministic functions of their config, so the config digest
    is a safe cache key: a directory with a matching manifest and intact
    artifact files is loaded instead of retrained. Anything incomplete is
    retrained in place.
    """
    run_id = cfg.run_id()
    out = os.path.join(root, run_id)
    man_path = os.path.join(out, "manifest.json")
    hist_path = os.path.join(out, "history.csv")
    ckpt_path = os.path.join(out, "final.ckpt")
    if all(os.path.exists(p) for p in (man_path, hist_path, ckpt_path)):
        with open(man_path) as f:
            man = json.load(f)
        if man.get("run_id") == run_id:
            if log:
                log(f"cached {run_id} <- {out}")
            return RunResult(run_id=run_id, config=cfg,
                             net=nn.Network.load(ckpt_path),
                             history=read_history(hist_path),
                             aborted=bool(man.get("aborted")), out_dir=out)
    return train(cfg, out, log=log)


# -- analysis views ----------------------------------------------------------------


def early_stopping_view(history: list, split: str = "test") -> dict:
    """Where validation loss bottomed out versus where training ended."""
    rows = [r for r in history if r["split"] == split]
    if not rows:
        raise ValueError(f"history has no rows for split {split!r}")
    best = min(rows, key=lambda r: r["xent"])
    final = rows[-1]
    return {"best_epoch": best["epoch"], "best_xent": best["xent"],
            "best_vuln_pgd": best["vuln_pgd"], "best_accuracy": best["accuracy"],
            "final_epoch": final["epoch"], "final_xent": final["xent"],
            "final_vuln_pgd": final["vuln_pgd"],
            "final_accuracy": final["accuracy"]}


def tradeoff_curve(results: list, key=lambda cfg: cfg.objective.eps_inf) -> list:
    """Final test accuracy and vulnerability per run, sorted by a config
    knob (default: the objective threshold)."""
    rows = []
    for res in results:
        final = res.final("test")
        rows.append({"knob": key(res.config), "run_id": res.run_id,
                     "accuracy": final["accuracy"], "xent": final["xent"],
                     "vuln_pgd": final["vuln_pgd"],
                     "vuln_fgsm": final["vuln_fgsm"],
                     "dmgxent": final["dmgxent"]})
    rows.sort(key=lambda r: r["knob"])
    return rows


def discrepancy_report(net: nn.Network, ds: datasets.Dataset, eps_list,
                       p=math.inf) -> list:
    """Measured single-step loss damage against its first-order prediction
    over a range of thresholds. Ratios near one mean the linearization
    holds; growth or collapse marks where it breaks."""
    rows = []
    x, y = ds.x, ds.y
    d = int(np.prod(x.shape[1:]))
    for eps_inf in eps_list:
        predicted = float(np.mean(attacks.first_order_damage(net, x, y, p, eps_inf)))
        method = "fgsm" if math.isinf(p) else "step-l2"
        spec = attacks.AttackSpec(method=method, p=p, eps_inf=eps_inf)
        v = attacks.vulnerability(net, x, y, spec)
        measured = v["dmgxent"]
        rows.append({"eps_inf": eps_inf,
                     "eps_p": obj.rescale_eps(p, eps_inf, d),
                     "predicted": predicted, "measured": measured,
                     "ratio": measured / predicted if predicted else float("nan")})
    return rows
