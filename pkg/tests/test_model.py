import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from windtunnel import autodiff as ad
from windtunnel._validation import ConfigError
from windtunnel.model import (
    MINICPM_CONFIGS,
    WIND_TUNNEL_CONFIGS,
    ModelConfig,
    build_model,
    count_params,
    total_params,
)

TINY = ModelConfig(d_m=16, d_ff=40, d_h=8, n_q=2, n_kv=1, n_layers=2, vocab=11, seed=3)


def brute_count(cfg):
    """Count non-embedding scalars by instantiating the model."""
    return build_model(cfg).non_embedding_count()


def test_minicpm_counts_exact():
    assert count_params(MINICPM_CONFIGS["minicpm-1.2b"]) == 1_247_442_432
    assert count_params(MINICPM_CONFIGS["minicpm-2.4b"]) == 2_442_057_984


def test_9m_count_matches_enumeration():
    cfg, _ = WIND_TUNNEL_CONFIGS["9M"]
    assert count_params(cfg) == 9_426_240
    assert brute_count(cfg.replace(vocab=8)) == 9_426_240


@pytest.mark.parametrize("name", [n for n in WIND_TUNNEL_CONFIGS if n != "9M"])
def test_wind_tunnel_counts_within_two_percent(name):
    cfg, nb = WIND_TUNNEL_CONFIGS[name]
    assert abs(count_params(cfg) / (nb * 1e9) - 1) < 0.02


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 50), st.booleans())
def test_count_matches_instantiated_model(groups, n_kv, n_layers, d_ff, shared):
    cfg = ModelConfig(d_m=4 * n_kv * groups, d_ff=d_ff, d_h=4, n_q=n_kv * groups, n_kv=n_kv,
                      n_layers=n_layers, vocab=7, share_embedding=shared)
    m = build_model(cfg)
    assert m.non_embedding_count() == count_params(cfg)
    assert sum(p.data.size for p in m.parameters()) == total_params(cfg)


def test_shared_embedding_saves_vocab_times_width():
    a = TINY.replace(share_embedding=True)
    b = TINY.replace(share_embedding=False)
    assert total_params(b) - total_params(a) == TINY.vocab * TINY.d_m


@pytest.mark.parametrize("kw", [dict(d_h=5), dict(n_kv=3), dict(d_base=32), dict(d_ff=0)])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        TINY.replace(**kw)


def test_init_std_rule():
    base = ModelConfig(d_m=64, d_ff=160, d_h=16, n_q=4, n_kv=4, n_layers=2, vocab=50, d_base=64)
    wide = base.replace(d_m=256, d_ff=640, n_q=16, n_kv=16)
    assert build_model(base).init_std_2d == 0.1
    assert build_model(wide).init_std_2d == pytest.approx(0.05, rel=1e-15)
    w = build_model(wide).params["layers.0.up_proj"].data
    assert np.std(w) == pytest.approx(0.05, rel=0.02)
    np.testing.assert_array_equal(build_model(wide).params["layers.0.attn_norm"].data, 1.0)


def test_same_seed_bit_identical():
    a, b = build_model(TINY), build_model(TINY)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    c = build_model(TINY.replace(seed=4))
    assert c.params["embed"].data.tobytes() != a.params["embed"].data.tobytes()


def test_param_groups_partition_and_multipliers():
    cfg = TINY.replace(d_base=8)
    m = build_model(cfg)
    groups = m.param_groups()
    assert [n for n, _, _ in groups] == list(m.params)
    for n, p, mult in groups:
        if p.ndim == 2 and n != "embed":
            assert mult == 0.5
        else:
            assert mult == 1.0
    assert all(mult == 1.0 for _, _, mult in build_model(TINY).param_groups())


def test_embedding_scaled_by_scale_emb():
    m = build_model(TINY)
    cap = {}
    m.forward(np.array([[3, 7]]), capture=cap)
    np.testing.assert_allclose(cap["embed_out"][0, 0], 12.0 * m.params["embed"].data[3], rtol=1e-6)


def test_logit_multiplier_factor():
    cfg = TINY.replace(d_base=8)
    on = build_model(cfg, dtype=np.float64)
    off = build_model(cfg.replace(mup=False), dtype=np.float64)
    off.load_state_dict(on.state_dict())
    # with mup off the residual and embedding rules are unchanged, only width ones differ
    toks = np.array([[1, 2, 3, 4]])
    lo = on.forward(toks)[0].data
    lf = off.forward(toks)[0].data
    np.testing.assert_allclose(lo, lf * (cfg.d_base / cfg.d_m), rtol=1e-12)


def test_degenerate_network_uniform():
    m = build_model(TINY, dtype=np.float64)
    for n, p in m.named_parameters():
        if p.ndim == 2:
            p.data[:] = 0.0
    toks = np.array([[1, 2, 3, 4, 5]])
    logits, loss = m.forward(toks, toks)
    np.testing.assert_array_equal(logits.data, 0.0)
    assert float(loss.data) == pytest.approx(math.log(TINY.vocab), rel=1e-14)


def test_causality():
    m = build_model(TINY, dtype=np.float64)
    a = np.array([[1, 2, 3, 4, 5, 6]])
    b = a.copy()
    b[0, 4:] = [9, 0]
    la = m.forward(a)[0].data
    lb = m.forward(b)[0].data
    np.testing.assert_array_equal(la[0, :4], lb[0, :4])
    assert not np.allclose(la[0, 4:], lb[0, 4:])


def test_token_out_of_range():
    with pytest.raises(IndexError):
        build_model(TINY).forward(np.array([[0, 11]]))


def test_token_losses_match_loss():
    m = build_model(TINY, dtype=np.float64)
    w = np.random.default_rng(0).integers(0, 11, size=(3, 7))
    per_tok = m.token_losses(w)
    assert per_tok.mean() == pytest.approx(float(m.loss_on_windows(w).data), rel=1e-12)


def test_mup_coordinate_check():
    rng = np.random.default_rng(0)
    toks = rng.integers(0, 64, size=(4, 32))
    rms = {}
    for d_m in (64, 128, 256, 512):
        cfg = ModelConfig(d_m=d_m, d_ff=int(2.5 * d_m), d_h=32, n_q=d_m // 32, n_kv=d_m // 32,
                          n_layers=2, vocab=64, d_base=64)
        cap = {}
        with ad.no_grad():
            build_model(cfg).forward(toks, capture=cap)
        rms[d_m] = np.mean([np.sqrt(np.mean(b.astype(np.float64) ** 2)) for b in cap["branches"]])
    assert max(rms.values()) / min(rms.values()) < 2.0, rms


def test_full_model_gradcheck():
    cfg = ModelConfig(d_m=8, d_ff=12, d_h=4, n_q=2, n_kv=1, n_layers=2, vocab=10, share_embedding=False, seed=1)
    m = build_model(cfg, dtype=np.float64)
    n = sum(p.data.size for p in m.parameters())
    assert n <= 10_000
    w = np.random.default_rng(2).integers(0, 10, size=(2, 6))
    errs = ad.gradcheck(lambda: m.loss_on_windows(w), list(m.parameters()), h=1e-5)
    assert np.quantile(errs, 0.99) < 1e-4
    assert errs.max() < 1e-3
