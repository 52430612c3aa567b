"""Acceptance criteria 1-10. Each test carries ``@pytest.mark.criterion(n)``;
the terminal summary prints one pass/fail line per criterion."""
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPT_FPS, ACCEPT_MODEL
from vitalformer import model as M
from vitalformer.cli import main as cli_main
from vitalformer.config import RunConfig
from vitalformer.diffcore import Tape, grad_check
from vitalformer.evalproto import (
    EvalConfig,
    cmae_crmse,
    default_eval_config,
    evaluate_records,
    export_masks,
    mask_contrast,
)
from vitalformer.ingest import ClipBatchItem
from vitalformer.sigproc import HR_BAND, RR_BAND, RateSeries, Waveform, bandpass, dominant_rate
from vitalformer.synth import ClipRecord, SceneParams, constant_rate_clip
from vitalformer.training import (
    LossConfig,
    TrainConfig,
    build_windows,
    cross_corr_oracle,
    loss_value,
    max_cc_loss,
    train,
    train_step_loss,
)

criterion = pytest.mark.criterion


def fft_cc(y, y_ref, fs, band=HR_BAND):
    tape = Tape()
    return max_cc_loss(tape, tape.leaf(y), y_ref, fs, LossConfig(band=band)).cc


def as_record(sc, clip_id, split="val"):
    return ClipRecord(clip_id, sc.clip, sc.pulse, sc.rate_gt, sc.skin, split)


# 1


@criterion(1)
def test_wiener_khinchin_equivalence(detail):
    t0 = time.perf_counter()
    worst = 0.0
    for n in (16, 64, 100, 256):
        for seed in range(20):
            rng = np.random.default_rng([n, seed])
            y, y_ref = rng.standard_normal(n), rng.standard_normal(n)
            diff = np.abs(cross_corr_oracle(y, y_ref, HR_BAND, 30.0) - fft_cc(y, y_ref, 30.0))
            worst = max(worst, float(diff.max()))
    elapsed = time.perf_counter() - t0
    detail(f"max per-lag diff {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-9
    assert elapsed < 10.0


# 2


def _model_grad_errors(seed):
    cfg = M.tiny_config(8, 12)
    rng = np.random.default_rng(seed)
    params = M.init_params(cfg, seed)
    for k in params.tensors:  # nonzero biases and gains so every path is exercised
        if k.endswith(".b"):
            params.tensors[k] = 0.1 * rng.standard_normal(params.tensors[k].shape)
    shape = (8, 12, 12, 3)
    item = ClipBatchItem(rng.standard_normal(shape), rng.standard_normal(shape), "g", 0)
    target = np.sin(2 * np.pi * np.arange(8) / 8.0 + rng.uniform(0, 6.28)) + 0.3 * rng.standard_normal(8)
    worst = worst_abs = 0.0
    for name, value in params.tensors.items():
        def f(tape, leaf, name=name):
            leaves = params.bind(tape)
            leaves[name] = leaf
            return max_cc_loss(tape, M.forward(tape, leaves, item, cfg), target, ACCEPT_FPS).loss

        picks = rng.choice(value.size, size=min(3, value.size), replace=False)
        coords = [np.unravel_index(i, value.shape) for i in picks]
        rep = grad_check(f, value, eps=1e-6, coords=coords)
        worst, worst_abs = max(worst, rep.max_rel_err), max(worst_abs, rep.max_abs_err)
    return worst, worst_abs


@criterion(2)
def test_gradient_correctness(detail):
    t0 = time.perf_counter()
    loss_worst = loss_abs = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        y_ref = rng.standard_normal(8)
        rep = grad_check(lambda tape, y: max_cc_loss(tape, y, y_ref, ACCEPT_FPS).loss, rng.standard_normal(8), eps=1e-6)
        loss_worst, loss_abs = max(loss_worst, rep.max_rel_err), max(loss_abs, rep.max_abs_err)
    errs = [_model_grad_errors(seed) for seed in range(10)]
    model_worst, model_abs = max(e[0] for e in errs), max(e[1] for e in errs)
    elapsed = time.perf_counter() - t0
    # relative error counts as 0 where the absolute error is under the 1e-8 floor
    detail(f"max rel/abs err: loss {loss_worst:.1e}/{loss_abs:.1e}, model {model_worst:.1e}/{model_abs:.1e}, "
           f"{elapsed:.0f} s")
    assert loss_worst <= 1e-4
    assert model_worst <= 1e-4
    assert elapsed < 120.0


# 3


@criterion(3)
def test_mask_identity_every_forward(monkeypatch, detail):
    sums = []
    original = M.attention_mask

    def spy(tape, z):
        q = original(tape, z)
        h, w = z.shape[1:3]
        sums.append(float(np.max(np.abs(q.values.sum(axis=(1, 2, 3)) - h * w / 2))))
        return q

    monkeypatch.setattr(M, "attention_mask", spy)
    assert M.CHECK_MASK_IDENTITY
    sc = constant_rate_clip(72.0, duration_s=12.0, fs=ACCEPT_FPS, h=12, w=12)
    res = train([as_record(sc, "c", "train")], M.tiny_config(8, 12), TrainConfig(steps=100, wall_clock=False))
    detail(f"{res.mask_checks} checks, max deviation {max(sums):.1e}")
    assert res.mask_checks == len(sums) == 200
    assert max(sums) <= 1e-10


# 4


@criterion(4)
def test_loss_invariances(detail):
    rng = np.random.default_rng(4)
    worst_a = worst_s = 0.0
    for n in (32, 100):
        y, y_ref = rng.standard_normal(n), rng.standard_normal(n)
        base = loss_value(y, y_ref, 30.0)
        for alpha in (0.1, 1.0, 17.0):
            worst_a = max(worst_a, abs(loss_value(alpha * y, y_ref, 30.0) - base))
        for lag in rng.integers(1, n, size=8):
            worst_s = max(worst_s, abs(loss_value(np.roll(y, lag), y_ref, 30.0) - base))
            worst_s = max(worst_s, abs(loss_value(y, np.roll(y_ref, lag), 30.0) - base))
    detail(f"amplitude {worst_a:.1e}, shift {worst_s:.1e}")
    assert worst_a < 1e-8
    assert worst_s < 1e-9


# 5


RATES = (48.0, 66.0, 84.0, 102.0, 120.0)


@criterion(5)
def test_classical_recovery(detail):
    t0 = time.perf_counter()
    clean = [as_record(constant_rate_clip(bpm, duration_s=20.0), f"c{int(bpm)}") for bpm in RATES]
    scene = SceneParams(noise_sigma=0.005)
    noisy = [as_record(constant_rate_clip(bpm, duration_s=20.0, params=scene, motion_amplitude=0.1), f"m{int(bpm)}")
             for bpm in RATES]
    scores = {m: evaluate_records(m, clean, EvalConfig()).cMAE for m in ("green", "pos", "ica")}
    scores["pos+motion"] = evaluate_records("pos", noisy, EvalConfig()).cMAE
    elapsed = time.perf_counter() - t0
    detail(", ".join(f"{k} {v:.2f}" for k, v in scores.items()) + f" bpm, {elapsed:.0f} s")
    assert all(scores[m] < 2.0 for m in ("green", "pos", "ica"))
    assert scores["pos+motion"] < 5.0
    assert elapsed < 60.0


# 6


@criterion(6)
def test_overfit_one_clip(detail):
    sc = constant_rate_clip(72.0, duration_s=30.0, fs=ACCEPT_FPS, h=12, w=12)
    rec = as_record(sc, "one", "train")
    res = train([rec], ACCEPT_MODEL, TrainConfig(steps=300, wall_clock=False))
    _, _, loss = train_step_loss(res.params, build_windows([rec], ACCEPT_MODEL), LossConfig())
    detail(f"overfit loss {float(loss.values):.3f}")
    assert float(loss.values) < -0.8


@criterion(6)
def test_trained_model_beats_untrained(acceptance_run, detail):
    run = acceptance_run
    trained = evaluate_records("model", run["val"], EvalConfig(), run["result"].params)
    untrained = evaluate_records("model", run["val"], EvalConfig(), run["init"])
    detail(f"val cMAE {trained.cMAE:.2f} vs untrained {untrained.cMAE:.2f} bpm, train {run['train_s']:.0f} s")
    assert not trained.partial
    assert trained.cMAE <= 5.0
    assert trained.cMAE < untrained.cMAE
    assert run["train_s"] < 15 * 60


def test_trained_model_reads_72_bpm(acceptance_run):
    params = acceptance_run["result"].params
    scene = SceneParams(noise_sigma=0.005)
    sc = constant_rate_clip(72.0, duration_s=30.0, fs=ACCEPT_FPS, h=12, w=12, params=scene, motion_amplitude=0.1)
    wave = M.infer_waveform(sc.clip, params, HR_BAND)
    assert dominant_rate(wave, HR_BAND) == pytest.approx(72.0, abs=3.0)


# 7


@criterion(7)
def test_metric_exactness(acceptance_run, detail):
    mae, rmse = cmae_crmse(RateSeries([61.0, 63.0], 30.0), RateSeries([60.0, 60.0], 30.0))
    assert abs(mae - 2.0) <= 1e-12 and abs(rmse - math.sqrt(5.0)) <= 1e-12
    reports = [evaluate_records(m, acceptance_run["val"], EvalConfig()) for m in ("green", "pos", "ica")]
    reports.append(evaluate_records("model", acceptance_run["val"], EvalConfig(), acceptance_run["result"].params))
    for rep in reports:
        assert rep.cMAE <= rep.cRMSE
        assert all(c.cMAE <= c.cRMSE for c in rep.clips)
        assert rep.n_frames == sum(c.n_frames for c in rep.clips)
    detail(f"[1,3] -> ({mae}, {rmse:.10f}); {len(reports)} reports checked")


# 8


def _pipeline(root, threads_eval=1, steps=30):
    cfg = {
        "synth": {"n_clips": 4, "dataset": {"duration_s": 12.0, "fps": 8.0, "height": 12, "width": 12, "n_val": 2,
                                             "noise_sigma": [0.0, 0.005]}},
        "model": ACCEPT_MODEL.to_dict(),
        "train": {"steps": steps, "wall_clock": False},
    }
    root.mkdir(parents=True)
    (root / "cfg.json").write_text(json.dumps(cfg))
    common = ["--config", str(root / "cfg.json"), "--seed", "3"]
    assert cli_main(common + ["--out", str(root / "data"), "--threads", "1", "synth"]) == 0
    assert cli_main(common + ["--out", str(root / "tr"), "--threads", "1", "train", "--manifest", str(root / "data")]) == 0
    ckpt = str(root / "tr" / "model.vtck")
    for t in (1, threads_eval):
        out = str(root / f"ev{t}")
        assert cli_main(common + ["--out", out, "--threads", str(t), "eval", "--checkpoint", ckpt,
                                  "--manifest", str(root / "data")]) == 0
        out = str(root / f"pos{t}")
        assert cli_main(common + ["--out", out, "--threads", str(t), "baseline", "ica",
                                  "--manifest", str(root / "data")]) == 0


@criterion(8)
def test_determinism(tmp_path, capsys, detail):
    _pipeline(tmp_path / "a", threads_eval=1)
    _pipeline(tmp_path / "b", threads_eval=4)
    capsys.readouterr()
    same = ["data/manifest.json", "data/clip_0000.rvid", "tr/train_log.csv", "tr/model.vtck",
            "ev1/report.json", "pos1/report.json"]
    for rel in same:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    # any thread count gives the same report
    assert (tmp_path / "b" / "ev4" / "report.json").read_bytes() == (tmp_path / "a" / "ev1" / "report.json").read_bytes()
    assert (tmp_path / "b" / "pos4" / "report.json").read_bytes() == (tmp_path / "a" / "pos1" / "report.json").read_bytes()
    detail(f"{len(same) + 2} artifacts byte-identical")


def test_cli_smoke_pipeline_time(tmp_path, capsys):
    t0 = time.perf_counter()
    _pipeline(tmp_path / "s", steps=300)
    capsys.readouterr()
    assert time.perf_counter() - t0 < 5 * 60


# 9


@criterion(9)
def test_attention_localization(acceptance_run, tmp_path, detail):
    params = acceptance_run["result"].params
    wins = []
    for rec in acceptance_run["val"]:
        out = export_masks(rec.clip, params, tmp_path / rec.clip_id, k=8)
        inside, outside = mask_contrast(out["masks"][out["frames"]], rec.skin)
        wins.append(inside > outside)
        detail(f"{rec.clip_id} {inside:.2f}/{outside:.2f}")
    assert len(wins) == 4 and sum(wins) >= 3


# 10


def _tone(freq, fs, seconds):
    return np.sin(2 * np.pi * freq * np.arange(int(round(fs * seconds))) / fs)


@criterion(10)
def test_bandpass_contract(tmp_path, capsys, detail):
    assert HR_BAND.as_list() == [0.7, 2.5] and RR_BAND.as_list() == [0.13, 0.34]
    assert LossConfig().band == HR_BAND and EvalConfig().band == HR_BAND
    assert default_eval_config("rr").band == RR_BAND

    assert cli_main(["--out", str(tmp_path / "hr"), "synth"]) == 0
    text = (tmp_path / "hr" / "config.json").read_text()
    resolved = json.loads(text)
    assert resolved["loss"]["band"] == [0.7, 2.5] and resolved["eval"]["band"] == [0.7, 2.5]
    assert "0.7,\n" in text and "2.5\n" in text
    rr = RunConfig.from_dict({"loss": {"band": [0.13, 0.34]}, "eval": {"band": [0.13, 0.34], "win_s": 30.0}})
    assert '0.13,\n      0.34\n' in rr.to_json()
    capsys.readouterr()

    # tones on exact bins: a brick-wall filter then leaks nothing
    atten = []
    for band, fs, seconds, f_out in ((HR_BAND, 30.0, 10.0, 5.0), (HR_BAND, 30.0, 10.0, 0.3),
                                     (RR_BAND, 30.0, 60.0, 1.0), (RR_BAND, 4.0, 100.0, 0.05)):
        x = _tone(f_out, fs, seconds)
        y = bandpass(Waveform(x, fs), band).samples
        atten.append(20 * np.log10(np.sqrt(np.mean(x * x)) / max(np.sqrt(np.mean(y * y)), 1e-300)))
    detail(f"min suppression {min(atten):.0f} dB")
    assert min(atten) > 60.0
