import json
import os

import numpy as np
import pytest
import yaml

from conftest import tiny_dict, tiny_spec
from windtunnel._validation import ConfigError
from windtunnel.harness import (
    METRIC_COLUMNS,
    ExperimentSpec,
    IngestionError,
    MixtureSampler,
    RunFault,
    TokenSource,
    TrainingRun,
    apply_override,
    expand_grid,
    fork_decay,
    ingest_corpus,
    load_checkpoint,
    load_ingested,
    load_run,
    load_spec,
    quantize_checkpoint,
    read_metrics,
    report,
    resume_run,
    run_experiment,
    sweep,
    synthetic_corpus,
)
from windtunnel.quant import load_quantized
from windtunnel.tokenizer import save_tokenizer, train_bpe


def read(path):
    with open(path, "rb") as f:
        return f.read()


# -- config ---------------------------------------------------------------------


def test_yaml_roundtrip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(tiny_dict(optimizer={"eps": "1e-8"})))
    spec = load_spec(str(p))
    assert spec.optimizer.eps == 1e-8
    assert spec.base_dir == str(tmp_path)
    assert ExperimentSpec.from_dict(spec.to_dict()).digest() == spec.digest()


@pytest.mark.parametrize("over", [
    {"bogus": 1},
    {"corpus": {"stable": {"main": 0.7}}},
    {"corpus": {"stable": {"nope": 1.0}}},
    {"corpus": {"warm": {"main": 1.0}}},
    {"model": {"d_m": 32, "d_ff": 64, "d_h": 16, "n_q": 2, "n_kv": 1, "n_layers": 1, "vocab": 256, "width": 3}},
    {"checkpoints": [99]},
    {"eval": {"sources": ["nope"]}},
])
def test_config_errors(over):
    with pytest.raises(ConfigError):
        tiny_spec(**over)


def test_missing_path_is_config_error(tmp_path):
    spec = tiny_spec(sources={"main": {"path": "nowhere.txt"}}, corpus={"stable": {"main": 1.0}})
    with pytest.raises(ConfigError):
        TrainingRun(spec, str(tmp_path))


def test_overrides():
    spec = tiny_spec()
    assert apply_override(spec, "lr", 0.02).schedule.eta == 0.02
    assert apply_override(spec, "model.n_layers", 2).model.n_layers == 2
    wide = apply_override(spec, "d_m", 64).model
    assert (wide.d_m, wide.d_h, wide.d_base) == (64, 16, spec.model.d_base)
    with pytest.raises(ConfigError):
        apply_override(spec, "schedule.nope", 1)
    assert [o for o, _ in expand_grid({"lr": [1, 2], "seed": [3]}, spec)] == [{"lr": 1, "seed": 3}, {"lr": 2, "seed": 3}]


# -- data -----------------------------------------------------------------------


def test_synthetic_corpus_deterministic():
    a = synthetic_corpus(3, 5000)
    assert a == synthetic_corpus(3, 5000)
    assert a != synthetic_corpus(4, 5000)
    assert len(a) == 5000


def _sources():
    rng = np.random.default_rng(0)
    mk = lambda n: TokenSource(n, rng.integers(0, 256, 4000).astype(np.int32), np.ones(4000, np.int32), 16)  # noqa: E731
    return {"a": mk("a"), "b": mk("b")}


def test_mixture_proportions_within_two_percent():
    s = MixtureSampler(_sources(), seed=0)
    _, chosen = s.sample(20_000, {"a": 0.6, "b": 0.4})
    frac = chosen.count("a") / len(chosen)
    assert abs(frac - 0.6) < 0.02
    assert s.counts["stable"]["a"] + s.counts["stable"]["b"] == 20_000


def test_mixture_epoch_covers_every_window_once():
    src = _sources()
    s = MixtureSampler(src, seed=1)
    n = src["a"].n_train
    batch, _ = s.sample(n, {"a": 1.0})
    starts = {tuple(w[:4]) for w in batch}
    assert len(starts) == len({tuple(w[:4]) for w in src["a"].windows[:n]})
    assert s.epoch["a"] == 0
    s.sample(1, {"a": 1.0})
    assert s.epoch["a"] == 1


def test_holdout_disjoint_from_training():
    src = _sources()["a"]
    ev, _ = src.eval_windows(100)
    assert src.n_eval == ev.shape[0] and src.n_train + src.n_eval == src.windows.shape[0]
    with pytest.raises(ValueError):
        TokenSource("x", np.zeros(10, np.int32), np.ones(10, np.int32), 16)


def test_ingest_identity_and_digest(tmp_path):
    data = b"hello windtunnel " * 50
    (tmp_path / "in.txt").write_bytes(data)
    c = ingest_corpus(str(tmp_path / "in.txt"), out_dir=str(tmp_path / "out"))
    assert bytes(c.tokens.astype(np.uint8)) == data
    back = load_ingested(str(tmp_path / "out"))
    np.testing.assert_array_equal(back.tokens, c.tokens)
    assert back.digest == c.digest
    tok = train_bpe(data, 300)
    save_tokenizer(tok, str(tmp_path / "t.bpe"))
    c2 = ingest_corpus(str(tmp_path / "in.txt"), str(tmp_path / "t.bpe"))
    assert c2.tokens.size < len(data)
    assert c2.n_bytes == len(data)
    assert c2.digest == c.digest


# -- training -------------------------------------------------------------------


@pytest.fixture(scope="module")
def donor(tmp_path_factory):
    d = tmp_path_factory.mktemp("donor")
    return run_experiment(tiny_spec(), str(d / "run"))


def test_run_outputs(donor):
    m = read_metrics(donor.metrics_path)
    assert m["step"].tolist() == list(range(1, 31))
    assert m["lr"][4] == 0.01 and m["lr"][1] == pytest.approx(0.004)
    assert np.isfinite(m["eval_loss"][[9, 19, 29]]).all() and np.isnan(m["eval_loss"][0])
    assert m["tokens_seen"][-1] == 30 * 64
    assert np.isnan(m["d1"][0]) and np.isfinite(m["d1"][1:]).all()
    assert len(donor.checkpoints) == 3
    counts = json.load(open(os.path.join(donor.run_dir, "mixture_counts.json")))
    assert set(counts) == {"stable", "decay"} and set(counts["decay"]) == {"main", "alt"}
    probes = read(os.path.join(donor.run_dir, "probes.jsonl")).decode().splitlines()
    assert len(probes) == 29 and "max_update_by_matrix" in json.loads(probes[0])
    assert load_run(donor.run_dir).spec_digest == donor.spec_digest


def test_warmup_midpoint_is_half_eta(tmp_path):
    spec = tiny_spec(schedule={"kind": "wsd", "eta": 0.01, "W": 100, "T": 120, "S": 130}, checkpoints=[],
                     eval={"every": 1000, "windows": 2}, probes={"cadence": 0})
    run = TrainingRun(spec, str(tmp_path))
    assert run.lr(50) == 0.005


def test_determinism_same_seed(tmp_path, donor):
    again = run_experiment(tiny_spec(), str(tmp_path / "again"))
    assert read(again.metrics_path) == read(donor.metrics_path)


def test_resume_byte_identical(tmp_path, donor):
    ckpt = [c for c in donor.checkpoints if "ckpt-0000010" in c][0]
    rec = resume_run(ckpt, str(tmp_path / "resumed"))
    assert read(rec.metrics_path) == read(donor.metrics_path)
    assert read(os.path.join(rec.run_dir, "probes.jsonl")) == read(os.path.join(donor.run_dir, "probes.jsonl"))


def test_probes_do_not_change_trajectory(tmp_path, donor):
    rec = run_experiment(tiny_spec(probes={"cadence": 0}), str(tmp_path / "noprobe"))
    a, b = read_metrics(rec.metrics_path), read_metrics(donor.metrics_path)
    for col in ("train_loss", "eval_loss"):
        np.testing.assert_array_equal(a[col], b[col])
    ca = load_checkpoint(rec.final_checkpoint).group("model")
    cb = load_checkpoint(donor.final_checkpoint).group("model")
    assert all(ca[k].tobytes() == cb[k].tobytes() for k in ca)


def test_checkpoint_is_read_only_and_verified(donor):
    ck = load_checkpoint(donor.final_checkpoint)
    assert ck.step == 30 and ck.digest[:12] in os.path.basename(donor.final_checkpoint)
    f = os.path.join(donor.final_checkpoint, "manifest.json")
    assert not os.access(f, os.W_OK) or os.geteuid() == 0


def test_fork_decay(tmp_path, donor):
    ckpt = [c for c in donor.checkpoints if "ckpt-0000010" in c][0]
    before = sorted(os.listdir(os.path.dirname(ckpt)))
    rec = fork_decay(ckpt, str(tmp_path / "fork"), end_step=16)
    m = read_metrics(rec.metrics_path)
    assert m["lr"][10] == 0.01
    assert m["lr"][11] == pytest.approx(0.01 * 0.5 ** (1 / 0.5))
    assert m["step"][-1] == 16
    assert sorted(os.listdir(os.path.dirname(ckpt))) == before
    # rows before the fork point are the donor's
    donor_rows = read(donor.metrics_path).decode().splitlines()[:11]
    assert read(rec.metrics_path).decode().splitlines()[:11] == donor_rows
    assert load_checkpoint(rec.final_checkpoint).state["fork"]["step"] == 10


def test_fork_refuses_decay_checkpoint(tmp_path, donor):
    with pytest.raises(ConfigError):
        fork_decay(donor.final_checkpoint, str(tmp_path / "bad"), end_step=40)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_fault_writes_diagnostic(tmp_path):
    spec = tiny_spec(schedule={"kind": "wsd", "eta": 1e30, "W": 1, "T": 20, "S": 30}, checkpoints=[],
                     optimizer={"clip_norm": None})
    with pytest.raises(RunFault) as e:
        run_experiment(spec, str(tmp_path / "nan"))
    assert e.value.checkpoint and load_checkpoint(e.value.checkpoint).state["reason"] == "diagnostic"
    assert load_run(str(tmp_path / "nan")).status == "fault"


def test_sweep_parallel_matches_serial(tmp_path):
    base = tiny_spec(schedule={"kind": "wsd", "eta": 0.01, "W": 2, "T": 6, "S": 8}, checkpoints=[],
                     eval={"sources": ["main"], "every": 4, "windows": 4})
    grid = {"lr": [0.003, 0.01, 0.03], "seed": [0, 1]}
    a = sweep(grid, base, str(tmp_path / "serial"), parallelism=1)
    b = sweep(grid, base, str(tmp_path / "par"), parallelism=2)
    assert len(a) == 6
    for x, y in zip(a, b):
        assert x.run_id == y.run_id and x.status == "ok"
        assert read(x.metrics_path) == read(y.metrics_path)
    summary = json.load(open(tmp_path / "serial" / "summary.json"))
    assert summary["n_runs"] == 6 and summary["n_failed"] == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_records_failures(tmp_path):
    base = tiny_spec(schedule={"kind": "wsd", "eta": 1e30, "W": 1, "T": 3, "S": 4}, checkpoints=[],
                     optimizer={"clip_norm": None})
    recs = sweep({"seed": [0]}, base, str(tmp_path / "s"))
    assert recs[0].status == "failed"


# -- reports --------------------------------------------------------------------


def _short(S, **kw):
    d = dict(schedule={"kind": "wsd", "eta": 0.01, "W": 2, "T": S - 2, "S": S, "half_life": 1}, checkpoints=[],
             probes={"cadence": 0}, eval={"sources": ["main"], "every": 1000, "windows": 4})
    d.update(kw)
    return tiny_spec(**d)


def test_scaling_report_two_sizes_four_budgets(tmp_path):
    recs = []
    for L in (1, 2):
        for S in (4, 6, 8, 10):
            m = dict(tiny_dict()["model"], n_layers=L)
            recs.append(run_experiment(_short(S, model=m), str(tmp_path / f"L{L}S{S}")))
    out = report(recs, "scaling", compute=[1e9])
    assert out["schema_version"] == 1 and len(out["runs"]) == 8
    assert out["result"]["fit"]["n_points"] == 8


def test_wsd_vs_cosine_and_decay_reports(tmp_path):
    w = run_experiment(_short(8), str(tmp_path / "w"))
    c = run_experiment(_short(8, schedule={"kind": "cosine", "eta": 0.01, "W": 2, "T": 8, "S": 8}), str(tmp_path / "c"))
    out = report([w, c], "wsd-vs-cosine")
    (pair,) = out["result"]["pairs"]
    assert pair["delta"] == pytest.approx(pair["wsd"] - pair["other"])
    table = report([w], "decay-sufficiency")["result"]["table"]
    assert table[0]["decay_steps"] == 2


def test_lr_stability_report(tmp_path):
    recs = [run_experiment(_short(4, schedule={"kind": "wsd", "eta": lr, "W": 1, "T": 3, "S": 4}), str(tmp_path / str(lr)))
            for lr in (1e-3, 1e-2)]
    res = report(recs, "lr-stability")["result"]["mup_on"]
    assert res["lr_grid"] == [1e-3, 1e-2]
    assert res["argmin_shift_steps"] == 0


def test_report_errors(tmp_path, donor):
    with pytest.raises(ValueError):
        report([], "scaling")
    with pytest.raises(ValueError):
        report([donor], "nope")
    bad = tmp_path / "m.csv"
    bad.write_text("step,lr\n1,0.1\n")
    with pytest.raises(IngestionError, match="missing column"):
        read_metrics(str(bad))
    bad.write_text(",".join(METRIC_COLUMNS) + ",extra\n")
    with pytest.raises(IngestionError, match="unexpected column"):
        read_metrics(str(bad))


def test_quantize_checkpoint(tmp_path, donor):
    rep = quantize_checkpoint(donor.final_checkpoint, str(tmp_path / "q"), group_size=16)
    mats = load_quantized(str(tmp_path / "q"))
    assert set(mats) == set(rep["matrices"])
    for r in rep["matrices"].values():
        assert r["gptq_objective"] <= r["rtn_objective"]
    assert abs(rep["eval_loss"]["quantized"] - rep["eval_loss"]["fp32"]) < 0.5
