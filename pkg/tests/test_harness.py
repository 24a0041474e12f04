import csv
import json
import logging

import numpy as np
import pytest

from drt import tensor as T
from drt.data import DomainBatch, SuiteSpec, generate_suite, read_dataset, write_dataset
from drt.errors import ConfigError, ContractError, DataError, DivergenceError
from drt.harness import training as tr
from drt.harness.analysis import (DegradationReport, export_coefficients, nearest_centroid_probe)
from drt.harness.cli import main
from drt.harness.config import TrainConfig, desk_preset, load_config, full_preset
from drt.harness.training import (accuracy, evaluate, lr_at, mcd_phase_a, mcd_phase_b, mcd_phase_c,
                                  mcd_step, select_pseudo_labels, self_train, train)
from drt.losses import Alignment, classifier_discrepancy, one_hot
from drt.models import AdaptationModel, Architecture, load_checkpoint, save_checkpoint
from drt.tensor import Tensor

TINY = dict(channels=[4, 8], hidden=16, epochs=2, eval_every=1, batch_size=16)
ARCH = Architecture(channels=(4, 8), hidden=16, classes=5)


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    return generate_suite(SuiteSpec(classes=5, n_train=24, n_eval=20, seed=1), out)


def _cfg(files, **kw):
    src = [k for k in files if k != "noise"]
    base = desk_preset().replace(
        source_paths=[files[k]["train"] for k in src],
        source_eval_paths=[files[k]["eval"] for k in src],
        target_path=files["noise"]["train"], target_eval_path=files["noise"]["eval"], **TINY)
    return base.replace(**kw)


def _batch(seed, n=6):
    r = np.random.default_rng(seed)
    return (Tensor(r.uniform(size=(n, 1, 32, 32))), one_hot(r.integers(0, 5, n), 5),
            Tensor(r.uniform(size=(n, 1, 32, 32))))


# -- schedule ----------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = full_preset()
    assert lr_at(0, cfg) == 0.002
    assert lr_at(250, cfg) == pytest.approx(2e-5, rel=1e-12)
    assert lr_at(299, cfg) == pytest.approx(2e-5, rel=1e-12)
    flat = cfg.replace(decay_factor=1.0)
    assert {lr_at(e, flat) for e in range(0, 300, 7)} == {0.002}


def test_lr_schedule_monotone():
    for cfg in (full_preset(), desk_preset(), desk_preset().replace(decay_factor=0.5, decay_every=3)):
        lrs = [lr_at(e, cfg) for e in range(cfg.epochs)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_presets():
    p = full_preset()
    assert (p.K, p.lam, p.alignment, p.lr0, p.decay_factor, p.decay_every, p.epochs, p.st_threshold) == \
        (4, 50.0, Alignment.MCD, 0.002, 0.1, 100, 300, 0.8)
    d = desk_preset()
    assert (d.epochs, d.decay_every, d.batch_size, d.lam) == (60, 20, 64, 50.0)


# -- config ------------------------------------------------------------------

def test_config_json_round_trip(tmp_path):
    cfg = desk_preset().replace(seed=3, source_paths=["a.msd"], target_path="t.msd")
    d = cfg.to_dict()
    assert d["lambda"] == 50.0 and "lam" not in d
    assert TrainConfig.from_dict(json.loads(cfg.dumps())) == cfg
    path = cfg.save(tmp_path / "c.json")
    loaded = load_config(path)
    assert loaded.source_paths == [str(tmp_path / "a.msd")]


def test_config_preset_key_and_errors(tmp_path):
    cfg = TrainConfig.from_dict({"preset": "desk", "seed": 5, "mode": "Static"})
    assert cfg.epochs == 60 and cfg.seed == 5
    for bad in ({"bogus": 1}, {"preset": "huge"}, {"lambda": -1}, {"mode": "Dynamic"}, {"K": 0},
                {"alignment": "MCD", "mcd_inner_steps": 0}, {"epochs": 0}):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "x.json")


# -- MCD step ------------------------------------------------------------------

def test_mcd_step_golden():
    m = AdaptationModel(ARCH, seed=0)
    xs, ys, xt = _batch(0)
    lce, ld = mcd_step(m, xs, ys, xt, desk_preset(), 0.05)
    assert lce == pytest.approx(3.1398280501508387, abs=1e-10)
    assert ld == pytest.approx(0.07730913553309611, abs=1e-10)


def test_mcd_lambda_zero_is_source_fitting():
    xs, ys, xt = _batch(1)
    m = AdaptationModel(ARCH, seed=2)
    ref = m.copy()
    lce, ld = mcd_step(m, xs, ys, xt, desk_preset().replace(lam=0.0), 0.05)
    # reference: phase A, then a CE-only head update; g untouched afterwards
    mcd_phase_a(ref, xs, ys, 0.05)
    g_after_a = {p.name: p.data.copy() for p in ref.g_parameters()}
    mcd_phase_b(ref, xs, ys, xt, 0.0, 0.05)
    for p in m.g_parameters():
        np.testing.assert_array_equal(p.data, g_after_a[p.name])
    for a, b in zip(m.head_parameters(), ref.head_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    with T.no_grad():
        assert ld == classifier_discrepancy(*ref.predict(xt)).item()
    assert ld > 0


def test_phase_c_decreases_discrepancy():
    lr = lr_at(0, desk_preset())
    wins = 0
    for trial in range(50):
        m = AdaptationModel(ARCH, seed=trial)
        xs, ys, xt = _batch(1000 + trial)
        mcd_phase_a(m, xs, ys, lr)
        mcd_phase_b(m, xs, ys, xt, 50.0, lr)
        with T.no_grad():
            before = classifier_discrepancy(*m.predict(xt)).item()
        mcd_phase_c(m, xt, 50.0, 4, lr)
        with T.no_grad():
            after = classifier_discrepancy(*m.predict(xt)).item()
        wins += after < before
    assert wins >= 45


def test_phase_b_only_moves_heads():
    m = AdaptationModel(ARCH, seed=4)
    g0 = [p.data.copy() for p in m.g_parameters()]
    h0 = [p.data.copy() for p in m.head_parameters()]
    mcd_phase_b(m, *_batch(5), 50.0, 0.05)
    assert all(np.array_equal(a, p.data) for a, p in zip(g0, m.g_parameters()))
    assert not all(np.array_equal(a, p.data) for a, p in zip(h0, m.head_parameters()))


def test_phase_c_only_moves_g():
    m = AdaptationModel(ARCH, seed=4)
    h0 = [p.data.copy() for p in m.head_parameters()]
    mcd_phase_c(m, _batch(6)[2], 50.0, 2, 0.05)
    assert all(np.array_equal(a, p.data) for a, p in zip(h0, m.head_parameters()))
    assert all(not p.grad.any() for p in m.parameters())


# -- evaluation -------------------------------------------------------------

def test_untrained_accuracy_near_chance():
    from drt.data import DomainSpec, Transform, generate_domain
    big = generate_domain(DomainSpec(5, Transform("Identity"), seed=77), 1000)
    acc = accuracy(AdaptationModel(ARCH, seed=11), big)
    assert abs(acc - 0.2) <= 0.05


def test_memorised_toy_set_is_perfect(tmp_path):
    from drt.data import DomainSpec, Transform, generate_domain
    toy = generate_domain(DomainSpec(5, Transform("Identity"), seed=3), 10)
    p = write_dataset(toy, tmp_path / "toy.msd")
    cfg = desk_preset().replace(source_paths=[str(p)], target_path=str(p), alignment="None",
                                lr0=0.2, epochs=60, decay_every=60, batch_size=10, eval_every=60,
                                channels=[4, 8], hidden=16)
    res = train(cfg, out_dir=tmp_path / "run")
    assert evaluate(res.checkpoint_path, p) == 1.0


def test_evaluate_round_trip_and_errors(suite, tmp_path):
    m = AdaptationModel(ARCH, seed=5)
    ds = read_dataset(suite["blur"]["eval"])
    path = save_checkpoint(m, tmp_path / "m.drtm")
    assert evaluate(path, suite["blur"]["eval"]) == accuracy(m, ds)
    unl = write_dataset(ds.without_labels(), tmp_path / "u.msd")
    with pytest.raises(DataError):
        evaluate(m, unl)


def test_ties_go_to_lowest_class():
    m = AdaptationModel(ARCH)
    for p in m.f1.parameters() + m.f2.parameters():
        p.data[...] = 0.0
    b = DomainBatch(np.zeros((4, 1, 32, 32)), [0, 1, 0, 2])
    assert accuracy(m, b) == 0.5


# -- training runs -----------------------------------------------------------

def test_train_writes_metrics_and_checkpoint(suite, tmp_path):
    res = train(_cfg(suite), out_dir=tmp_path)
    assert res.tag_reads == 0
    rows = list(csv.reader(open(res.metrics_path)))
    assert rows[0] == ["epoch", "lce", "ld", "target_acc", "src_acc_0", "src_acc_1", "src_acc_2",
                       "src_acc_3", "lr", "wall_ms"]
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    for r in rows[1:]:
        assert 0 <= float(r[3]) <= 1 and all(0 <= float(v) <= 1 for v in r[4:8])
    assert load_checkpoint(res.checkpoint_path).arch.channels == (4, 8)
    again = train(_cfg(suite), out_dir=tmp_path)
    assert again.metrics_path.name == "metrics-1.csv" and again.checkpoint_path.name == "model-1.drtm"
    assert res.metrics_path.read_bytes() == again.metrics_path.read_bytes()


def test_smoke_run_is_byte_reproducible(suite, tmp_path):
    a = train(_cfg(suite, seed=3), out_dir=tmp_path / "a")
    b = train(_cfg(suite, seed=3), out_dir=tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
    c = train(_cfg(suite, seed=4), out_dir=tmp_path / "c")
    assert c.checkpoint_path.read_bytes() != a.checkpoint_path.read_bytes()


@pytest.mark.parametrize("alignment", ["None", "Moment", "MCD"])
@pytest.mark.parametrize("mode", ["Static", "Combination"])
def test_every_recipe_runs(suite, alignment, mode):
    res = train(_cfg(suite, alignment=alignment, mode=mode, epochs=1, lam=1.0))
    assert len(res.history) == 1 and np.isfinite(res.history[0].lce)


def test_firewall_trips_on_tag_read(suite, monkeypatch):
    tagged = read_dataset(suite["identity"]["train"])
    real = tr._STEPS[Alignment.NONE]

    def peeking(model, xs, ys, xt, cfg, lr):
        _ = tagged.domain_tag
        return real(model, xs, ys, xt, cfg, lr)

    monkeypatch.setitem(tr._STEPS, Alignment.NONE, peeking)
    with pytest.raises(ContractError):
        train(_cfg(suite, alignment="None", epochs=1))


def test_divergence_dumps_diagnostics(suite, tmp_path):
    with pytest.raises(DivergenceError) as info:
        train(_cfg(suite, lr0=1e200, epochs=1), out_dir=tmp_path)
    diag = json.loads((tmp_path / "divergence.json").read_text())
    assert diag["epoch"] == 0 and diag["lr"] == 1e200
    assert info.value.diagnostics["epoch"] == 0


def test_missing_data_is_data_error(tmp_path):
    with pytest.raises(DataError):
        train(desk_preset().replace(source_paths=[str(tmp_path / "a.msd")], target_path=str(tmp_path / "b.msd")))
    with pytest.raises(DataError):
        train(desk_preset())


# -- self-training -------------------------------------------------------------

def test_pseudo_label_fixture():
    probs = np.array([
        [0.80, 0.10, 0.10],    # exactly at the threshold: excluded
        [0.05, 0.90, 0.05],    # selected, class 1
        [0.40, 0.30, 0.30],    # low confidence
        [0.00, 0.0001, 0.9999],  # selected, class 2
    ])
    idx, labels = select_pseudo_labels(probs, 0.8)
    assert idx.tolist() == [1, 3] and labels.tolist() == [1, 2]
    idx, labels = select_pseudo_labels(probs, 0.0)
    assert idx.tolist() == [0, 1, 2, 3] and labels.tolist() == [0, 1, 0, 2]
    assert select_pseudo_labels(probs, 1.0)[0].size == 0


def test_self_train_without_confident_samples_is_noop(suite, tmp_path, caplog):
    m = AdaptationModel(ARCH, seed=0)
    path = save_checkpoint(m, tmp_path / "m.drtm")
    with caplog.at_level(logging.WARNING):
        res = self_train(path, _cfg(suite, st_threshold=1.0))
    assert res.checkpoint_path == path and res.history == []
    assert "model unchanged" in caplog.text


def test_self_train_runs(suite, tmp_path):
    base = train(_cfg(suite, alignment="None", lr0=0.2), out_dir=tmp_path / "base")
    res = self_train(base.checkpoint_path, _cfg(suite, alignment="None", lr0=0.2, st_threshold=0.0),
                     out_dir=tmp_path / "st")
    assert res.checkpoint_path.exists() and len(res.history) == 2


# -- analysis ----------------------------------------------------------------

def test_export_coefficients_shape_and_sums(suite):
    m = AdaptationModel(ARCH, seed=1)
    files = [suite[k]["eval"] for k in ("identity", "blur")]
    table = export_coefficients(m, files)
    assert table.values.shape == (40, 2 * 4)
    assert table.columns[:5] == ["pi_0_0", "pi_0_1", "pi_0_2", "pi_0_3", "pi_1_0"]
    np.testing.assert_allclose(table.pi_blocks(2, 4).sum(axis=2), 1.0, atol=1e-9, rtol=0)
    assert sorted(set(table.domain_tags.tolist())) == [0, 4]
    assert table.sample_ids.tolist() == list(range(40))


def test_export_coefficients_mode_rules(suite):
    files = suite["identity"]["eval"]
    for mode in ("Static", "ChannelAttention"):
        with pytest.raises(ConfigError):
            export_coefficients(AdaptationModel(Architecture(**{**ARCH.__dict__, "mode": mode})), files)
    att = AdaptationModel(Architecture(**{**ARCH.__dict__, "mode": "ChannelAttention"}))
    table = export_coefficients(att, files, include_lambda=True)
    assert table.values.shape == (20, 4 + 8)
    assert ((table.values > 0) & (table.values < 1)).all()
    comb = AdaptationModel(Architecture(**{**ARCH.__dict__, "mode": "Combination"}))
    assert export_coefficients(comb, files, include_lambda=True).values.shape == (20, 8 + 12)


def test_nearest_centroid_probe():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1, 2], 50)
    separated = rng.normal(size=(150, 4)) * 0.1 + labels[:, None]
    assert nearest_centroid_probe(separated, labels) == 1.0
    noise = rng.normal(size=(3000, 4))
    assert abs(nearest_centroid_probe(noise, np.resize(labels, 3000)) - 1 / 3) < 0.05


def test_degradation_report_arithmetic(tmp_path):
    r = DegradationReport(["a", "b"], [0.9, 0.8], [0.85, 0.8], [0.9, 0.7])
    assert r.static_gap == pytest.approx([0.05, 0.0])
    assert r.dynamic_gap == pytest.approx([0.0, 0.1])
    assert r.mean_static_gap == pytest.approx(0.025) and r.mean_dynamic_gap == pytest.approx(0.05)
    rows = list(csv.reader(open(r.write_csv(tmp_path / "d.csv"))))
    assert rows[0][0] == "domain" and rows[-1][0] == "mean" and len(rows) == 4


def test_single_domain_degradation_gaps_vanish(suite, tmp_path):
    from drt.harness.analysis import degradation_study
    cfg = _cfg(suite, alignment="None", lr0=0.2, epochs=3).replace(
        source_paths=[suite["identity"]["train"]], source_eval_paths=[suite["identity"]["eval"]])
    oracle = train(cfg.replace(mode="Static")).model
    rep = degradation_study(cfg, static_model=oracle, oracles=[oracle])
    assert rep.static_gap == [0.0]
    rep = degradation_study(cfg, out_dir=tmp_path)
    assert rep.static_gap == [0.0]
    assert (tmp_path / "degradation.csv").exists()


# -- CLI -----------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"classes": 5, "n_train": 12, "n_eval": 10, "seed": 2}))
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "domain,split,path" and len(out) == 11

    cfg = {"preset": "desk", "mode": "SubspaceRouting", "epochs": 1, "channels": [4, 8], "hidden": 16,
           "batch_size": 16, "source_paths": [f"data/{n}_train.msd" for n in ("identity", "invert", "stroke", "blur")],
           "target_path": "data/noise_train.msd", "target_eval_path": "data/noise_eval.msd"}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "run")]) == 0
    out = dict(line.split(",", 1) for line in capsys.readouterr().out.splitlines())
    ckpt = out["checkpoint"]
    assert (tmp_path / "run" / "metrics.png").exists()

    assert main(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "data" / "noise_eval.msd")]) == 0
    assert capsys.readouterr().out.startswith("accuracy,")

    csv_path = tmp_path / "coef.csv"
    assert main(["export-coefficients", "--checkpoint", ckpt, "--data", str(tmp_path / "data"),
                 "--out", str(csv_path)]) == 0
    rows = list(csv.reader(open(csv_path)))
    assert rows[0][:3] == ["sample_id", "domain_tag", "pi_0_0"] and len(rows) == 1 + 5 * 22
    assert csv_path.with_suffix(".png").exists()
    capsys.readouterr()

    assert main(["flops", "--config", str(cfg_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("layer,cin,cout") and lines[-1].startswith("total")

    assert main(["self-train", "--checkpoint", ckpt, "--config", str(cfg_path),
                 "--out", str(tmp_path / "st")]) == 0


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"lambda": -3}')
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"source_paths": ["nope.msd"], "target_path": "nope.msd"}))
    assert main(["train", "--config", str(missing), "--out", str(tmp_path)]) == 3
    empty = tmp_path / "empty.msd"
    empty.write_bytes(b"")
    assert main(["eval", "--checkpoint", str(empty), "--data", str(empty)]) == 3
    assert "error" in capsys.readouterr().err


def test_cli_divergence_exit_code(suite, tmp_path):
    cfg = _cfg(suite, lr0=1e200, epochs=1)
    path = cfg.save(tmp_path / "c.json")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 4
