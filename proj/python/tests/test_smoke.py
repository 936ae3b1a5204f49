import numpy as np
import pytest

import lightm_unet as lm


def test_default_config_counts():
    for rank in (2, 3):
        cfg = lm.config(rank)
        assert cfg["rank"] == rank
        params = lm.count_params(cfg)["params"]
        assert 1.0e6 <= params <= 2.0e6


def test_overrides_and_bad_values():
    cfg = lm.config(2, base_channels=4, d_state=2)
    assert cfg["base_channels"] == 4
    with pytest.raises(lm.ConfigError):
        lm.config(2, base_channels=0)


def test_flop_rows_sum_to_total():
    cfg = lm.config(2, base_channels=4, d_state=2)
    r = lm.count_flops(cfg, [32, 32])
    assert sum(row[2] for row in r["rows"]) == r["flops"]
    assert r["convention"].startswith("mac=2flop")


def test_forward_shape_and_determinism():
    cfg = lm.config(2, base_channels=4, d_state=2)
    image, mask = lm.synth_sample(7, 0, [16, 16])
    assert image.shape == (1, 16, 16) and mask.shape == (16, 16)
    a = lm.forward(cfg, image, seed=3)
    b = lm.forward(cfg, image, seed=3)
    assert a.shape == (cfg["num_classes"], 16, 16)
    assert np.array_equal(a, b)
    with pytest.raises(lm.DimensionError):
        lm.forward(cfg, np.zeros((1, 12, 16), np.float32))


def test_scan_kernels_agree():
    rng = np.random.default_rng(0)
    p = lm.init_scan_params(6, 4, 1, 11)
    x = rng.standard_normal((37, 6))
    seq = lm.selective_scan(x, p, "sequential")
    par = lm.selective_scan(x, p, "parallel")
    assert seq.shape == (37, 6)
    np.testing.assert_allclose(par, seq, rtol=1e-10, atol=1e-12)
    with pytest.raises(lm.ContractError):
        lm.selective_scan(x, p, "fast")


def test_loss_and_metrics():
    mask = np.array([[0, 1], [2, 1]], np.uint16)
    logits = np.zeros((3, 2, 2))
    assert lm.dice_ce_loss(logits, mask) > 0
    assert lm.dsc(mask, mask, 3) == [1.0, 1.0, 1.0]
    peaked = np.stack([(mask == k) * 10.0 for k in range(3)]).astype(np.float32)
    assert np.array_equal(lm.argmax_classes(peaked), mask)


def test_cli_in_process():
    code, out, _ = lm.run_cli("cost", "--rank", 2, "--size", 32, "--base_channels", 4, "--d_state", 2)
    assert code == 0 and "TOTAL," in out
    assert lm.run_cli("frobnicate")[0] == 2
