"""Trainer contracts: config digests, optimizer arithmetic, objective
dispatch, determinism, NaN rollback, history file schema, analysis views."""

import json
import math
import os
import types

import numpy as np
import pytest

from gradlab import attacks, autodiff as ad, datasets as dz, nn
from gradlab import objectives as obj, training as tr


def tiny_cfg(**over):
    base = dict(arch="mlp", widths=(24,), dataset="gauss", size=12,
                n_train=256, n_test=128, classes=3, epochs=2, batch_size=64,
                eval_n=48, eval_eps_inf=0.05, seed=2)
    base.update(over)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = tiny_cfg()
    data = tr.resolve_data(cfg)
    out = tmp_path_factory.mktemp("run")
    res = tr.train(cfg, str(out))
    return cfg, data, res, str(out)


class TestConfig:
    def test_run_id_stable_and_sensitive(self):
        a, b = tiny_cfg(), tiny_cfg()
        assert a.run_id() == b.run_id()
        assert tiny_cfg(seed=3).run_id() != a.run_id()
        assert tiny_cfg(lr=0.051).run_id() != a.run_id()
        assert tiny_cfg(objective=obj.ObjectiveSpec(kind="grad-penalty",
                                                    eps_inf=0.01)).run_id() != a.run_id()

    def test_dict_roundtrip_through_json(self):
        cfg = tiny_cfg(objective=obj.ObjectiveSpec(kind="grad-penalty",
                                                   p=math.inf, eps_inf=0.02))
        blob = json.dumps(cfg.to_dict(), sort_keys=True)
        back = tr.TrainConfig.from_dict(json.loads(blob))
        assert back == cfg
        assert back.run_id() == cfg.run_id()
        assert math.isinf(back.objective.p)

    def test_validation(self):
        with pytest.raises(ValueError, match="unknown dataset"):
            tiny_cfg(dataset="imagenet")
        with pytest.raises(ValueError, match="unknown optimizer"):
            tiny_cfg(optimizer="lbfgs")
        with pytest.raises(ValueError, match="batch_size"):
            tiny_cfg(batch_size=0)


class TestOptimizers:
    def test_sgd_momentum_two_steps(self):
        w = {"w": np.array([1.0, -2.0])}
        opt = tr.SGD(w, lr=0.1, momentum=0.9)
        g1 = np.array([0.5, 1.0])
        g2 = np.array([-0.5, 2.0])
        opt.step({"w": g1})
        v1 = g1
        assert np.allclose(w["w"], [1.0, -2.0] - 0.1 * v1)
        opt.step({"w": g2})
        v2 = 0.9 * v1 + g2
        assert np.allclose(w["w"], [1.0, -2.0] - 0.1 * v1 - 0.1 * v2)

    def test_adam_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        w0 = rng.standard_normal(5)
        w = {"w": w0.copy()}
        opt = tr.Adam(w, lr=0.01)
        m = np.zeros(5)
        v = np.zeros(5)
        ref = w0.copy()
        for t in range(1, 6):
            g = rng.standard_normal(5)
            opt.step({"w": g.copy()})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            ref -= 0.01 * mh / (np.sqrt(vh) + 1e-8)
            assert np.allclose(w["w"], ref, atol=1e-14)

    def test_sgd_updates_in_place(self):
        net = nn.he_init(nn.mlp_spec(4, (5,), 2), seed=0)
        opt = tr.make_optimizer(tiny_cfg(), net.params)
        before = net.params["0.weight"].copy()
        opt.step({k: np.ones_like(p) for k, p in net.params.items()})
        assert np.abs(net.params["0.weight"] - before).max() > 0


class TestBatchLoss:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.net = nn.he_init(nn.mlp_spec(6, (8,), 3), seed=1)
        self.x = rng.standard_normal((5, 6))
        self.y = rng.integers(0, 3, 5)

    def build(self, spec):
        tape = ad.Tape()
        xn = tape.input(self.x)
        params = self.net.lift_params(tape)
        return tr.batch_loss_node(spec, self.net, tape, xn, self.y, params)

    def test_plain_equals_mean_ce(self):
        node = self.build(obj.ObjectiveSpec())
        z = self.net.logits_value(self.x)
        want = float(obj.cross_entropy_each(z, self.y).sum() * (1.0 / 5))
        assert node.item() == want

    def test_each_kind_builds_finite_scalar(self):
        specs = [obj.ObjectiveSpec(kind="grad-penalty", eps_inf=0.01),
                 obj.ObjectiveSpec(kind="augmented", eps_inf=0.01),
                 obj.ObjectiveSpec(kind="augmented", method="pgd", eps_inf=0.01),
                 obj.ObjectiveSpec(kind="fgsm-variant", eps_inf=0.01),
                 obj.ObjectiveSpec(kind="cross-lipschitz", coeff=0.1)]
        for spec in specs:
            node = self.build(spec)
            assert node.shape == ()
            assert math.isfinite(node.item())

    def test_cross_lipschitz_assembly(self):
        spec = obj.ObjectiveSpec(kind="cross-lipschitz", coeff=0.25)
        node = self.build(spec)
        plain = self.build(obj.ObjectiveSpec())
        reg = float(np.mean([obj.cross_lipschitz(self.net, xi) for xi in self.x]))
        assert abs(node.item() - (plain.item() + 0.25 * reg)) < 1e-12

    def test_unknown_kind(self):
        fake = types.SimpleNamespace(kind="bogus")
        with pytest.raises(ValueError, match="unknown objective kind"):
            self.build(fake)


class TestStep:
    def test_plain_step_matches_manual_gradient(self):
        cfg = tiny_cfg(momentum=0.0, lr=0.1)
        net = nn.he_init(nn.mlp_spec(6, (8,), 3), seed=4)
        rng = np.random.default_rng(0)
        xb = rng.standard_normal((7, 6))
        yb = rng.integers(0, 3, 7)

        tape = ad.Tape()
        xn = tape.input(xb)
        params = net.lift_params(tape)
        z = net.forward_graph(tape, xn, train=True, params=params)
        loss = obj.ce_node(z, yb)
        want = {name: np.asarray(g) for (name, node), g in zip(
            params.items(), ad.grad(loss, list(params.values())).values())}

        before = {k: v.copy() for k, v in net.params.items()}
        opt = tr.make_optimizer(cfg, net.params)
        value = tr.sgd_step(cfg, net, opt, xb, yb)
        assert math.isfinite(value)
        for name in net.params:
            step = before[name] - 0.1 * want[name]
            assert np.abs(net.params[name] - step).max() < 1e-15

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_forward_returns_nan(self):
        cfg = tiny_cfg()
        net = nn.he_init(nn.mlp_spec(6, (8,), 3), seed=4)
        net.params["0.weight"][0, 0] = np.inf
        opt = tr.make_optimizer(cfg, net.params)
        rng = np.random.default_rng(0)
        v = tr.sgd_step(cfg, net, opt, rng.standard_normal((4, 6)),
                        rng.integers(0, 3, 4))
        assert math.isnan(v)


class TestTrain:
    def test_history_shape_and_learning(self, trained):
        cfg, data, res, out = trained
        assert not res.aborted
        # one row per split per epoch, plus the epoch-0 baseline
        assert len(res.history) == (cfg.epochs + 1) * 2
        for r in res.history:
            assert set(r) == set(tr.HISTORY_COLUMNS)
        first = [r for r in res.history if r["split"] == "test"][0]
        final = res.final("test")
        assert final["accuracy"] > first["accuracy"]
        assert final["accuracy"] > 0.55
        assert final["xent"] < first["xent"]

    def test_sparse_attack_eval_schedule(self, tmp_path):
        cfg = tiny_cfg(epochs=3, attack_eval_every=2)
        res = tr.train(cfg, str(tmp_path / "sparse"))
        for r in res.history:
            on_schedule = r["epoch"] % 2 == 0 or r["epoch"] == cfg.epochs
            assert math.isnan(r["vuln_pgd"]) == (not on_schedule)
            assert math.isnan(r["dmgxent"]) == (not on_schedule)
            # cheap metrics are always present
            assert math.isfinite(r["g1"]) and math.isfinite(r["xent"])

    def test_attack_eval_every_validation(self):
        with pytest.raises(ValueError, match="attack_eval_every"):
            tiny_cfg(attack_eval_every=0)

    def test_upsampled_data_resolution(self):
        lo = tr.resolve_data(tr.TrainConfig(dataset="image", size=8,
                                            n_train=20, n_test=10, seed=3))
        hi = tr.resolve_data(tr.TrainConfig(dataset="image", size=16,
                                            upsample=2, n_train=20, n_test=10,
                                            seed=3))
        assert hi[0].x.shape == (20, 3, 16, 16)
        # same content, just pixel-duplicated
        assert np.array_equal(hi[0].x, dz.upsample_copy(lo[0].x, 2))
        assert np.array_equal(hi[0].y, lo[0].y)
        assert hi[0].meta["upsample"] == 2

    def test_upsample_validation(self):
        with pytest.raises(ValueError, match="upsample"):
            tr.TrainConfig(size=32, upsample=3)
        with pytest.raises(ValueError, match="image"):
            tr.TrainConfig(dataset="gauss", size=12, upsample=2)

    def test_mlp_on_image_flattens(self):
        cfg = tr.TrainConfig(arch="mlp", widths=(16,), dataset="image",
                             size=8, n_train=20, n_test=10)
        train_ds, _ = tr.resolve_data(cfg)
        spec = tr.resolve_spec(cfg, train_ds)
        assert spec.input_shape == (3, 8, 8)
        assert spec.layers[0].kind == "flatten"
        assert spec.out_shape() == (train_ds.classes,)
        net = nn.he_init(spec, seed=0)
        assert net.logits_value(train_ds.x[:5]).shape == (5, train_ds.classes)

    def test_cached_run_hits_and_misses(self, tmp_path):
        cfg = tiny_cfg(epochs=1)
        calls = []
        first = tr.cached_run(cfg, str(tmp_path), log=calls.append)
        assert not any(c.startswith("cached") for c in calls)
        second = tr.cached_run(cfg, str(tmp_path), log=calls.append)
        assert any(c.startswith("cached") for c in calls)
        assert second.out_dir == first.out_dir
        assert second.history == first.history
        for k in first.net.params:
            assert np.array_equal(second.net.params[k], first.net.params[k])
        # a damaged cache entry retrains instead of loading
        os.remove(os.path.join(first.out_dir, "final.ckpt"))
        third = tr.cached_run(cfg, str(tmp_path))
        assert third.history == first.history

    def test_artifacts_on_disk(self, trained):
        cfg, data, res, out = trained
        assert sorted(os.listdir(out)) == ["final.ckpt", "history.csv",
                                           "manifest.json"]
        man = json.load(open(os.path.join(out, "manifest.json")))
        assert man["run_id"] == cfg.run_id()
        assert man["aborted"] is False
        assert man["epochs_completed"] == cfg.epochs
        assert man["config"] == cfg.to_dict()
        assert set(man["dataset"]) >= {"train_fingerprint", "test_fingerprint"}
        back = nn.Network.load(os.path.join(out, "final.ckpt"))
        for k in back.params:
            assert np.array_equal(back.params[k], res.net.params[k])
        rows = tr.read_history(os.path.join(out, "history.csv"))
        assert len(rows) == len(res.history)
        # floats survive the %.17g round trip exactly
        for got, want in zip(rows, res.history):
            for c in tr.HISTORY_COLUMNS[3:]:
                assert (got[c] == want[c]
                        or (math.isnan(got[c]) and math.isnan(want[c])))

    def test_deterministic_repeats(self, tmp_path):
        cfg = tiny_cfg(epochs=1)
        a = tr.train(cfg, str(tmp_path / "a"))
        b = tr.train(cfg, str(tmp_path / "b"))
        ha = (tmp_path / "a" / "history.csv").read_bytes()
        hb = (tmp_path / "b" / "history.csv").read_bytes()
        ca = (tmp_path / "a" / "final.ckpt").read_bytes()
        cb = (tmp_path / "b" / "final.ckpt").read_bytes()
        assert ha == hb
        assert ca == cb
        assert a.run_id == b.run_id

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts_and_rolls_back(self, tmp_path):
        cfg = tiny_cfg(lr=1e12, epochs=4)
        res = tr.train(cfg, str(tmp_path))
        assert res.aborted
        man = json.load(open(tmp_path / "manifest.json"))
        assert man["aborted"] is True
        assert man["epochs_completed"] < 4
        assert all(np.isfinite(v).all() for v in res.net.params.values())
        rows = tr.read_history(tmp_path / "history.csv")
        assert max(r["epoch"] for r in rows) == man["epochs_completed"]

    def test_injected_data_reused(self, tmp_path):
        cfg = tiny_cfg(epochs=1)
        data = tr.resolve_data(cfg)
        res = tr.train(cfg, str(tmp_path), data=data)
        man = json.load(open(tmp_path / "manifest.json"))
        assert man["dataset"]["train_fingerprint"] == data[0].fingerprint()


class TestEvaluate:
    def test_metrics_match_direct_computation(self, trained):
        cfg, data, res, out = trained
        sub = data[1].take(32, seed=7)
        m = tr.evaluate(res.net, sub, eps_inf=0.05, seed=0)
        z = res.net.logits_value(sub.x)
        assert m["accuracy"] == float((z.argmax(axis=1) == sub.y).mean())
        assert abs(m["xent"] - obj.cross_entropy_each(z, sub.y).mean()) < 1e-12
        g1, g2 = tr.gradient_norm_stats(res.net, sub.x, sub.y)
        assert m["g1"] == g1 and m["g2"] == g2
        fg = attacks.vulnerability(res.net, sub.x, sub.y,
                                   attacks.AttackSpec(method="fgsm", eps_inf=0.05))
        assert m["vuln_fgsm"] == fg["flip_rate"]
        assert m["dmg01"] == fg["dmg01"]

    def test_gradient_norm_stats_per_sample(self):
        net = nn.he_init(nn.mlp_spec(5, (6,), 3), seed=0)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((9, 5))
        y = rng.integers(0, 3, 9)
        g1, g2 = tr.gradient_norm_stats(net, x, y, batch_size=4)
        rows = [np.asarray(nn.input_gradient(net, x[i], y[i])) for i in range(9)]
        assert abs(g1 - np.mean([np.abs(r).sum() for r in rows])) < 1e-12
        assert abs(g2 - np.mean([np.sqrt((r ** 2).sum()) for r in rows])) < 1e-12


class TestHistoryIO:
    def test_bad_columns_rejected(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("epoch,split\n1,train\n")
        with pytest.raises(ValueError, match="unexpected history columns"):
            tr.read_history(str(p))

    def test_nan_round_trip(self, tmp_path):
        row = {c: float("nan") for c in tr.HISTORY_COLUMNS[3:]}
        row.update(run_id="abc", epoch=1, split="test")
        p = tmp_path / "h.csv"
        tr.write_history(str(p), [row])
        back = tr.read_history(str(p))
        assert math.isnan(back[0]["dmgxent_over_eps"])


class TestViews:
    def fake_history(self):
        rows = []
        xents = {0: 2.0, 1: 1.0, 2: 0.8, 3: 0.9}
        vulns = {0: 0.0, 1: 0.1, 2: 0.2, 3: 0.4}
        for e in range(4):
            for split in ("train", "test"):
                r = {c: 0.0 for c in tr.HISTORY_COLUMNS[3:]}
                r.update(run_id="x", epoch=e, split=split,
                         xent=xents[e] if split == "test" else 0.5,
                         vuln_pgd=vulns[e], accuracy=0.5)
                rows.append(r)
        return rows

    def test_early_stopping_view(self):
        v = tr.early_stopping_view(self.fake_history())
        assert v["best_epoch"] == 2
        assert v["final_epoch"] == 3
        assert v["best_vuln_pgd"] == 0.2
        assert v["final_vuln_pgd"] == 0.4
        with pytest.raises(ValueError, match="no rows"):
            tr.early_stopping_view([], split="test")

    def test_tradeoff_curve_sorted_by_knob(self, trained):
        cfg, data, res, out = trained
        fakes = []
        for eps in (0.03, 0.01, 0.02):
            c = tiny_cfg(objective=obj.ObjectiveSpec(kind="grad-penalty",
                                                     eps_inf=eps))
            fakes.append(tr.RunResult(c.run_id(), c, res.net, res.history,
                                      False, out))
        rows = tr.tradeoff_curve(fakes)
        assert [r["knob"] for r in rows] == [0.01, 0.02, 0.03]
        assert all({"accuracy", "vuln_pgd", "xent"} <= set(r) for r in rows)

    def test_tradeoff_curve_survives_csv_replay(self, trained, tmp_path):
        # replaying persisted history must reproduce the curve exactly
        cfg, data, res, out = trained
        p = tmp_path / "h.csv"
        tr.write_history(str(p), res.history)
        replay = tr.RunResult(res.run_id, cfg, res.net,
                              tr.read_history(str(p)), False, out)
        assert tr.tradeoff_curve([replay]) == tr.tradeoff_curve([res])

    def test_discrepancy_ratio_near_one_at_small_eps(self, trained):
        cfg, data, res, out = trained
        sub = data[1].take(48, seed=3)
        rows = tr.discrepancy_report(res.net, sub, [1e-4, 1e-2])
        assert abs(rows[0]["ratio"] - 1.0) < 0.01
        assert rows[0]["eps_p"] == pytest.approx(1e-4 * 1.0)  # p=inf: no rescale
        # both columns move with eps
        assert rows[1]["predicted"] > rows[0]["predicted"]
