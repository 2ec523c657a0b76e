import importlib
import time

import numpy as np
import pytest

from lwahand.config import default_config
from lwahand.flops import (
    OP_COSTS,
    CostConstants,
    FlopsError,
    FlopsReport,
    complexity_scan,
    count_flops,
    fit_exponent,
    op_cost,
    parse_sweep,
)

K = CostConstants()


def test_matmul_convention():
    assert op_cost("matmul", K, m=2, inner=3, n=4) == {"matmul": 48}


def test_partition_arithmetic():
    rep = FlopsReport([{"path": "a", "part": "image", "flops": 250_000_000},
                       {"path": "b", "part": "pose", "flops": 220_000_000}], 250_000_000, 220_000_000)
    assert rep.check().total == 470_000_000


def test_check_catches_mismatch():
    with pytest.raises(FlopsError):
        FlopsReport([{"path": "a", "part": "image", "flops": 1}], 2, 0).check()


def test_default_total(hierarchy):
    t0 = time.perf_counter()
    rep = count_flops(default_config(), hierarchy)
    assert time.perf_counter() - t0 < 1.0
    assert 0.40e9 <= rep.total <= 0.55e9
    assert rep.image_part + rep.pose_part == rep.total
    assert sum(e["flops"] for e in rep.entries) == rep.total
    assert sum(e["flops"] for e in rep.entries if e["part"] == "image") == rep.image_part


def test_report_is_static_and_stable(hierarchy):
    assert count_flops(default_config(), hierarchy).to_json() == count_flops(default_config(), hierarchy).to_json()


def test_aux_heads_add_cost(hierarchy):
    cfg = default_config()
    base = count_flops(cfg, hierarchy).total
    cfg.flops.aux_heads = True
    assert count_flops(cfg, hierarchy).total > base


def test_unknown_op():
    with pytest.raises(FlopsError, match="nonexistent"):
        op_cost("nonexistent", K)


@pytest.mark.parametrize("module", ["numerics", "attention", "encoder", "mesh", "model"])
def test_every_public_operator_has_a_cost(module):
    mod = importlib.import_module(f"lwahand.{module}")
    for name in mod.OPERATORS:
        assert hasattr(mod, name), name
        assert name in OP_COSTS, name


def test_softmax_and_activation_constants():
    assert op_cost("softmax", K, n=10) == {"softmax": 50}
    assert op_cost("activation", K, n=10) == {"act": 40}
    assert op_cost("activation", K, n=10, kind="identity") == {"act": 0}


class TestScans:
    def test_exponents(self):
        sizes = [64, 128, 256, 512]
        t0 = time.perf_counter()
        sep = complexity_scan("separable_self_attention", sizes)
        dense = complexity_scan("cross_hand_attention", sizes)
        assert time.perf_counter() - t0 < 1.0
        assert 0.9 <= sep.exponent <= 1.1
        assert 1.9 <= dense.exponent <= 2.1

    def test_matmul_linear(self):
        assert abs(complexity_scan("matmul", [8, 16, 32, 64]).exponent - 1.0) < 1e-12

    def test_fit_exponent_oracle(self):
        n = np.array([3.0, 5.0, 7.0, 11.0])
        assert abs(fit_exponent(n, 2.5 * n**1.7) - 1.7) < 1e-12

    def test_too_few_points(self):
        with pytest.raises(FlopsError, match="at least 4"):
            complexity_scan("matmul", [8, 16, 32])

    def test_not_increasing(self):
        with pytest.raises(FlopsError):
            complexity_scan("matmul", [8, 16, 16, 32])

    def test_not_sweepable(self):
        with pytest.raises(FlopsError, match="sweepable"):
            complexity_scan("gcn", [8, 16, 32, 64])

    def test_parse_sweep(self):
        assert parse_sweep("64..512") == [64, 128, 256, 512]
        assert parse_sweep("3,5,9") == [3, 5, 9]
        with pytest.raises(FlopsError):
            parse_sweep("10..2")
