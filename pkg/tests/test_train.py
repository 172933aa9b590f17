import json

import numpy as np
import pytest

from bhivae.checkpoint import from_bytes, to_bytes
from bhivae.cli import main
from bhivae.config import config_from_dict
from bhivae.data import gen_minidsprites
from bhivae.metrics import FactorTable
from bhivae.model import init_params
from bhivae.train import (
    TrainingError,
    architecture,
    emit_traversal,
    evaluate,
    reconcile,
    restore,
    score_latents,
    train,
)

TINY_MODEL = {
    "encoder_hidden": [32],
    "part_hidden": [8],
    "merge_width": 8,
    "decoder_hidden": [32],
    "classifier_hidden": [8],
    "projection_hidden": [8],
    "discriminator_hidden": [16],
}


def tiny(mode="supervised", **over):
    obj = {
        "mode": mode,
        "layout": {"s_dims": [2, 2, 2], "h_dims": [6, 6], "c_dim": 8},
        "batch_size": 32,
        "total_steps": 20,
        "seed": 3,
        "dataset": {"min_size": 0},
        "model": TINY_MODEL,
        "metrics": {"votes": 60, "pairs": 16},
    }
    obj.update(over)
    return config_from_dict(obj)


@pytest.fixture(scope="module")
def grid():
    return gen_minidsprites()


@pytest.mark.parametrize("mode", ["supervised", "unsupervised"])
def test_training_is_deterministic(mode, grid):
    a, b = train(tiny(mode), grid), train(tiny(mode), grid)
    assert json.dumps(a.trace) == json.dumps(b.trace)
    assert to_bytes(a.checkpoint) == to_bytes(b.checkpoint)


@pytest.mark.parametrize("mode", ["supervised", "unsupervised"])
def test_trace_reconciles(mode, grid):
    cfg = tiny(mode)
    for rec in train(cfg, grid).trace:
        assert reconcile(rec, cfg) <= 1e-9


def test_trace_term_names(grid):
    sup = train(tiny("supervised", total_steps=1), grid).trace[0]["terms"]
    assert set(sup) == {f"{t}{i}" for t in ("class", "erasure", "probe") for i in range(3)} | {"recon"}
    uns = train(tiny("unsupervised", total_steps=1), grid).trace[0]["terms"]
    assert set(uns) == {f"{t}{i}" for t in ("kl", "tc", "disc") for i in range(3)} | {"recon"}


def test_zero_steps_keeps_initialization(grid):
    cfg = tiny(total_steps=0)
    res = train(cfg, grid)
    init = init_params(architecture(cfg, grid), cfg.seed)
    assert res.checkpoint.step == 0
    for k, v in init.items():
        assert res.checkpoint.params[k].tobytes() == v.astype(np.float32).tobytes()


def test_reconstruction_only_run_decreases(grid):
    # no adversarial terms: only the reconstruction term drives the model
    cfg = tiny("unsupervised", beta=1.0, gamma=0.0, total_steps=500)
    recon = [r["terms"]["recon"] for r in train(cfg, grid).trace]
    assert np.mean(recon[-50:]) < 0.5 * np.mean(recon[:50])


def test_non_finite_loss_aborts(grid, monkeypatch):
    import bhivae.train as T
    from bhivae import ndgrad as G

    monkeypatch.setattr(T, "reconstruction_loss", lambda x, x_hat: G.log(G.add(G.reduce_mean(x_hat), -2.0)))
    with pytest.raises(TrainingError, match="step 0"):
        train(tiny(), grid)


def test_evaluate_report(grid):
    res = train(tiny("unsupervised"), grid)
    before = to_bytes(res.checkpoint)
    report = evaluate(res.checkpoint, grid).to_dict()
    assert to_bytes(res.checkpoint) == before
    for key in ("mig", "block_mig", "sap"):
        assert 0.0 <= report[key] <= 1.0
    assert 0.0 <= report["z_diff"] <= 100.0
    assert len(report["layer_kl"]) == 3 and all(v >= 0 for v in report["layer_kl"])
    again = evaluate(from_bytes(before), grid).to_dict()
    assert json.dumps(again, sort_keys=True) == json.dumps(report, sort_keys=True)


def test_identity_latents_through_report_path(grid):
    cfg = tiny()
    _, arch, _ = restore(train(cfg, grid).checkpoint, grid)
    table = FactorTable(grid.factors.factors[:, :3], grid.factors.names[:3], grid.factors.cardinalities[:3])
    sub = type(grid)(grid.images, table, grid.resolution)
    latents = np.column_stack([table.factors, np.zeros((len(grid), 5))]).astype(float)
    report = score_latents(latents, grid.images, sub, arch.layout, lambda x: latents[: len(x)], cfg)
    assert report.mig == 1.0


def test_layout_mismatch_refused(grid):
    res = train(tiny(), grid)
    small = type(grid)(grid.images[:, :512], grid.factors, (16, 32))
    with pytest.raises(Exception, match="checkpoint|pixels"):
        evaluate(res.checkpoint, small)


class TestTraversal:
    def test_grid_shape_and_header(self, tmp_path, grid):
        res = train(tiny(), grid)
        tiles = emit_traversal(res.checkpoint, 5, 8, tmp_path / "t.pgm", grid)
        # three feature blocks plus four 2-wide residual pieces
        assert tiles.shape == (7 * 32, 8 * 32)
        raw = (tmp_path / "t.pgm").read_bytes()
        header = b"P5\n256 224\n255\n"
        assert raw.startswith(header) and len(raw) == len(header) + 256 * 224

    def test_deterministic(self, tmp_path, grid):
        res = train(tiny(), grid)
        emit_traversal(res.checkpoint, 0, 3, tmp_path / "a.pgm", grid)
        emit_traversal(res.checkpoint, 0, 3, tmp_path / "b.pgm", grid)
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_endpoints(self, grid):
        from bhivae.model import decode, encode_array, traverse_block

        res = train(tiny(), grid)
        tiles = emit_traversal(res.checkpoint, 2, 2, "/dev/null", grid)
        z = encode_array(res.params, res.arch, grid.images[2:3])
        _, arch, params = restore(res.checkpoint, grid)
        for t, col in ((-3.0, 0), (3.0, 1)):
            img = decode(params, arch, traverse_block(z, arch.layout, 0, t)).value.reshape(32, 32)
            expect = np.clip(np.round(img * 255), 0, 255)
            got = np.round(tiles[:32, col * 32 : (col + 1) * 32] * 255)
            np.testing.assert_array_equal(got, expect)

    def test_bad_sample(self, grid):
        res = train(tiny(total_steps=0), grid)
        with pytest.raises(IndexError):
            emit_traversal(res.checkpoint, 144, 4, "/dev/null", grid)


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tiny("unsupervised", total_steps=5)
    (tmp_path / "run.json").write_text(cfg.to_json())
    assert main(["train", str(tmp_path / "run.json")]) == 0
    assert (tmp_path / "run.ckpt").exists()
    lines = (tmp_path / "run.trace.jsonl").read_text().splitlines()
    assert len(lines) == 5 and "recon" in json.loads(lines[0])["terms"]

    (tmp_path / "spec.json").write_text(json.dumps({"resolution": 32}))
    assert main(["gen-data", str(tmp_path / "spec.json"), "--out", str(tmp_path / "data")]) == 0
    assert (tmp_path / "data" / "images.idx").exists() and (tmp_path / "data" / "factors.json").exists()

    capsys.readouterr()
    assert main(["eval", str(tmp_path / "run.ckpt"), str(tmp_path / "data")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"z_diff", "sap", "mig", "block_mig", "layer_kl"}

    out = tmp_path / "grid.pgm"
    assert main(["traverse", str(tmp_path / "run.ckpt"), "--sample", "3", "--steps", "4", "--out", str(out)]) == 0
    assert out.read_bytes().startswith(b"P5\n128 224\n255\n")


def test_cli_reports_config_errors(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"mode": "supervised", "layout": {"s_dims": [2], "h_dims": [], "c_dim": 2}, "betta": 1}))
    assert main(["train", str(tmp_path / "bad.json")]) == 2
    assert "betta" in capsys.readouterr().err
