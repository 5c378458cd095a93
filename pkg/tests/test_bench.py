import numpy as np
import pytest

from unicornn.bench import BENCH_COLUMNS, fused_loss_and_grads, naive_loss_and_grads, run_bench, \
    write_bench_csv
from unicornn.core import ConfigurationError, ModelConfig
from unicornn.train import init_params


class TestReference:
    @pytest.mark.parametrize("L", [1, 2])
    def test_matches_fused(self, rng, L):
        model = init_params(ModelConfig(L=L, m=5, d=2, dt=0.3, out_dim=2), 3)
        x = rng.uniform(-1, 1, (30, 4, 2))
        t = rng.uniform(-1, 1, (30, 4, 2))
        v1, g1 = naive_loss_and_grads(model, x, t)
        v2, g2 = fused_loss_and_grads(model, x, t)
        np.testing.assert_allclose(v1, v2, rtol=1e-13)
        assert g1.keys() == g2.keys()
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-11, atol=1e-15, err_msg=k)

    def test_rejects_residual(self):
        model = init_params(ModelConfig(L=3, m=2, d=1, dt=0.3, skip=2, out_dim=1), 0)
        with pytest.raises(ConfigurationError):
            naive_loss_and_grads(model, np.zeros((2, 1, 1)), np.zeros((2, 1, 1)))


class TestRunBench:
    def test_rows(self, tmp_path):
        res = run_bench(N=3, m=2, L=1, batch=2, repeats=3)
        assert [r["impl"] for r in res.rows] == ["fused"] * 3 + ["naive"] * 3
        assert res.mean("fused") > 0 and res.mean("naive") > 0
        write_bench_csv(res, tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == ",".join(BENCH_COLUMNS) and len(lines) == 7

    def test_bad_sizes(self):
        with pytest.raises(ConfigurationError):
            run_bench(N=0, m=1, L=1, batch=1)
        with pytest.raises(ConfigurationError):
            run_bench(N=1, m=1, L=1, batch=1, impls=("gpu",))
