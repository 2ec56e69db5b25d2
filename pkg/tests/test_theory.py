"""Path-mass predictions against brute-force enumeration and sampled
networks, plus the scaling-slope machinery."""

import json
import math
import os

import numpy as np
import pytest

from gradlab import nn
from gradlab import theory as th

INF = math.inf


class TestPathDag:
    def test_mlp_mass_is_uniform_and_unit(self):
        spec = th.theory_mlp_spec(6, widths=(5, 4), classes=3)
        dag = th.PathDag.from_spec(spec)
        m = dag.mass_matrix()
        assert m.shape == (6, 3)
        assert np.abs(m - 1.0 / 6.0).max() < 1e-12
        for k in range(3):
            assert abs(dag.total_mass(k) - 1.0) < 1e-12

    def test_mlp_path_counts(self):
        spec = th.theory_mlp_spec(6, widths=(5, 4), classes=3)
        counts = th.PathDag.from_spec(spec).count_matrix()
        assert np.all(counts == 20)  # 5 * 4 routes per (input, logit) pair

    def test_cnn_mass_is_uniform_and_unit(self):
        spec = th.theory_cnn_spec(4, c_in=2, channels=3, classes=4)
        dag = th.PathDag.from_spec(spec)
        m = dag.mass_matrix()
        d = 2 * 4 * 4
        assert np.abs(m - 1.0 / d).max() < 1e-12

    def test_enumeration_matches_dp(self):
        for spec in (th.theory_mlp_spec(4, widths=(3, 3), classes=2),
                     th.theory_cnn_spec(4, c_in=1, channels=2, classes=2)):
            dag = th.PathDag.from_spec(spec)
            m = dag.mass_matrix()
            for i, k in ((0, 0), (2, 1), (m.shape[0] - 1, 0)):
                assert abs(dag.enumerate_mass(i, k) - m[i, k]) < 1e-12

    def test_enumeration_budget(self):
        spec = th.theory_mlp_spec(4, widths=(300, 300, 300), classes=2)
        dag = th.PathDag.from_spec(spec)
        with pytest.raises(ValueError, match="exceeds enumeration budget"):
            dag.enumerate_mass(0, 0)

    def test_avgpool_divides_mass_by_area(self):
        pool_spec, stride_spec = th.avgpool_theory_pair(h=4, channels=3, classes=2)
        pool = th.PathDag.from_spec(pool_spec)
        stride = th.PathDag.from_spec(stride_spec)
        assert abs(pool.total_mass(0) - 1.0 / 16.0) < 1e-12
        assert abs(stride.total_mass(0) - 1.0) < 1e-12

    def test_rejects_unsupported_layers(self):
        spec = nn.NetworkSpec((1, 4, 4), (nn.LayerSpec.maxpool(2),
                                          nn.LayerSpec.flatten(),
                                          nn.LayerSpec.dense(2)))
        with pytest.raises(ValueError, match="does not cover 'maxpool'"):
            th.PathDag.from_spec(spec)
        spec = nn.NetworkSpec((4,), (nn.LayerSpec.batchnorm(),
                                     nn.LayerSpec.dense(2)))
        with pytest.raises(ValueError, match="does not cover 'batchnorm'"):
            th.PathDag.from_spec(spec)

    def test_random_specs_preserve_total_mass(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            spec = th.random_mass_spec(rng)
            dag = th.PathDag.from_spec(spec)
            for k in range(spec.out_shape()[0]):
                assert abs(dag.total_mass(k) - 1.0) < 1e-9


class TestMonteCarlo:
    def test_mlp_grad_mass_matches_prediction(self):
        spec = th.theory_mlp_spec(24, widths=(32, 32), classes=4)
        st = th.mc_logit_grad_stats(spec, n_nets=30, n_inputs=8, seed=1)
        assert 0.7 < st["total_mass_mean"] < 1.3
        assert abs(st["total_mass_mean"] - 1.0) < 4 * st["total_mass_se"] + 0.05

    def test_cnn_grad_mass_matches_prediction(self):
        spec = th.theory_cnn_spec(4, channels=8, classes=4)
        st = th.mc_logit_grad_stats(spec, n_nets=30, n_inputs=8, seed=2)
        assert 0.7 < st["total_mass_mean"] < 1.3

    def test_path_products_decorrelate(self):
        res = th.mc_path_products([("a", 0.5), ("c", 0.25)],
                                  [("b", 0.5), ("c", 0.25)],
                                  n_samples=100_000, seed=3)
        assert res["expected_ab"] == 0.0
        assert abs(res["mean_ab"]) < 4 * res["se_ab"]
        assert res["expected_aa"] == 0.125
        assert abs(res["mean_aa"] - 0.125) < 4 * res["se_aa"]

    def test_identical_paths_share_draws(self):
        edges = [("a", 0.5), ("b", 0.5)]
        res = th.mc_path_products(edges, edges, n_samples=10_000, seed=4)
        assert res["expected_ab"] == res["expected_aa"]
        assert res["mean_ab"] == res["mean_aa"]

    def test_conflicting_variance_rejected(self):
        with pytest.raises(ValueError, match="conflicting"):
            th.mc_path_products([("a", 0.5)], [("a", 0.25)])

    def test_ce_grad_mass_prediction_closed_form(self):
        q = np.full(4, 0.25)
        want = (1 - 0.25) ** 2 + 3 * 0.25 ** 2
        assert abs(th.ce_grad_mass_prediction(q, 0) - want) < 1e-14

    def test_ce_grad_mass_prediction_matches_sampling(self):
        from gradlab import objectives as obj
        from gradlab.tensor import Tensor

        spec = th.theory_mlp_spec(32, widths=(48, 48), classes=6)
        rng = np.random.default_rng(5)
        ratios = []
        for _ in range(12):
            net = nn.he_init(spec, seed=int(rng.integers(2 ** 31)))
            x = rng.standard_normal((8, 32))
            lab = rng.integers(0, 6, size=8)
            g = np.asarray(nn.input_gradient(net, Tensor(x), lab))
            probs = obj.softmax(net.logits_value(x))
            for j in range(8):
                pred = th.ce_grad_mass_prediction(probs[j], int(lab[j]))
                ratios.append((g[j] ** 2).sum() / pred)
        assert 0.7 < np.mean(ratios) < 1.3


class TestScaling:
    def test_slope_fit_exact_on_power_law(self):
        dims = [64, 256, 1024]
        means = [3.0 * d ** 0.5 for d in dims]
        assert abs(th.fit_loglog_slope(dims, means) - 0.5) < 1e-12

    def test_grad_norm_scaling_slope_near_half(self):
        specs = [th.theory_mlp_spec(d, widths=(48, 48), classes=10)
                 for d in (64, 256, 1024)]
        rep = th.grad_norm_scaling(specs, p=INF, n_seeds=6, n_inputs=8,
                                   seed=4, n_boot=100)
        assert 0.4 < rep.slope < 0.6
        assert rep.slope_q10 <= rep.slope <= rep.slope_q90

    def test_report_is_deterministic(self):
        specs = [th.theory_mlp_spec(d, widths=(16,), classes=4)
                 for d in (16, 64)]
        a = th.grad_norm_scaling(specs, p=2, n_seeds=3, n_inputs=4, seed=7,
                                 n_boot=50)
        b = th.grad_norm_scaling(specs, p=2, n_seeds=3, n_inputs=4, seed=7,
                                 n_boot=50)
        assert a.means == b.means
        assert a.slope == b.slope
        assert (a.slope_q10, a.slope_q90) == (b.slope_q10, b.slope_q90)

    def test_report_files(self, tmp_path):
        specs = [th.theory_mlp_spec(d, widths=(16,), classes=4)
                 for d in (16, 64)]
        rep = th.grad_norm_scaling(specs, p=INF, n_seeds=3, n_inputs=4,
                                   seed=8, n_boot=50)
        csv_path = os.path.join(tmp_path, "scaling.csv")
        json_path = os.path.join(tmp_path, "scaling.json")
        rep.write_csv(csv_path)
        rep.write_json(json_path)
        lines = open(csv_path).read().splitlines()
        assert lines[0] == "d,statistic,mean,q10,q90"
        assert len(lines) == 3
        row = lines[1].split(",")
        assert int(row[0]) == 16
        assert float(row[2]) == rep.means[0]  # %.17g round-trips float64
        blob = json.load(open(json_path))
        assert blob["dims"] == [16, 64]
        assert blob["slope"] == rep.slope
        assert blob["p"] == "inf"
